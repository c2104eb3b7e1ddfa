//! Attention-based refinement: per block, LiDAR deformable cross-attention,
//! multi-camera deformable cross-attention with mean pooling, object
//! self-attention with positional encoding, and a box/class decode. Queries
//! with no valid image projection receive a zero camera contribution and
//! ride the residual path.

use nalgebra::Vector3;
use ndarray::{Array1, Array2};

use crate::attention::{deformable_sample, transformer_layer, Mlp, TransformerLayerWeights};
use crate::bev::BevFeatureMap;
use crate::error::Result;
use crate::geometry::{self, normalize_heading, Box3D, CameraModel};

use super::weights::{PipelineWeights, RefineBlockWeights};
use super::{Detection, PipelineConfig, Proposal, Provenance};

struct RefineQuery {
    feature: Array1<f64>,
    position: Vector3<f64>,
    box3d: Box3D,
    class_probs: Array1<f64>,
    provenance: Provenance,
}

/// Residual + layer-norm + feed-forward update with a precomputed attention
/// output (the second half of a transformer layer).
fn residual_update(
    feature: &Array1<f64>,
    attended: &Array1<f64>,
    w: &TransformerLayerWeights,
) -> Result<Array1<f64>> {
    let a = w.norm1.forward_row(&(feature + attended));
    let mut hidden = w.ffn_in.forward(&a)?;
    hidden.mapv_inplace(|v| v.max(0.0));
    let ffn = w.ffn_out.forward(&hidden)?;
    Ok(w.norm2.forward_row(&(&a + &ffn)))
}

fn decode_box(
    feature: &Array1<f64>,
    position: &Vector3<f64>,
    decoder: &Mlp,
    cfg: &PipelineConfig,
) -> Result<Box3D> {
    let raw = decoder.forward(feature)?;
    let center = cfg.roi.clamp(&Vector3::new(
        position.x + raw[0],
        position.y + raw[1],
        position.z + raw[2],
    ));
    let size = Vector3::new(
        raw[3].exp().clamp(0.05, 30.0),
        raw[4].exp().clamp(0.05, 30.0),
        raw[5].exp().clamp(0.05, 30.0),
    );
    Ok(Box3D::new(center, size, normalize_heading(raw[6])).expect("clamped sizes"))
}

fn run_block(
    queries: &mut [RefineQuery],
    block: &RefineBlockWeights,
    f_lidar: &BevFeatureMap,
    owl_maps: &[BevFeatureMap],
    cams: &[CameraModel],
    cfg: &PipelineConfig,
    weights: &PipelineWeights,
) -> Result<Vec<Detection>> {
    // LiDAR deformable cross-attention on the flattened BEV map.
    for q in queries.iter_mut() {
        let attended = deformable_sample(
            &q.feature,
            (q.position.x, q.position.y),
            f_lidar,
            &block.lidar_offset_head,
            &block.lidar_cross.attention,
        )?;
        q.feature = residual_update(&q.feature, &attended, &block.lidar_cross)?;
    }

    // Camera deformable cross-attention, mean-pooled over valid projections.
    for q in queries.iter_mut() {
        let mut pooled = Array1::zeros(q.feature.len());
        let mut valid = 0usize;
        for (cam, owl_map) in cams.iter().zip(owl_maps) {
            let Ok((u, v, _)) = geometry::project(cam, &q.position) else {
                continue;
            };
            if !cam.contains_pixel(u, v) {
                continue;
            }
            let h = deformable_sample(
                &q.feature,
                (u, v),
                owl_map,
                &block.cam_offset_head,
                &block.cam_cross.attention,
            )?;
            pooled = pooled + h;
            valid += 1;
        }
        if valid > 0 {
            pooled /= valid as f64;
        }
        // No valid projection leaves a zero attention contribution; the
        // residual and normalization still run.
        q.feature = residual_update(&q.feature, &pooled, &block.cam_cross)?;
    }

    // Object self-attention with positions encoded in first.
    if !queries.is_empty() {
        let d = queries[0].feature.len();
        let mut stack = Array2::zeros((queries.len(), d));
        for (i, q) in queries.iter().enumerate() {
            let pe = weights
                .refine
                .pe_xyz
                .encode(&[q.position.x, q.position.y, q.position.z])?;
            stack.row_mut(i).assign(&(&q.feature + &pe));
        }
        let updated = transformer_layer(&stack, &stack, &stack, &block.self_attn)?;
        for (i, q) in queries.iter_mut().enumerate() {
            q.feature = updated.row(i).to_owned();
        }
    }

    // Decode after the block; passthrough carries the incoming geometry.
    let mut decoded = Vec::with_capacity(queries.len());
    for q in queries.iter_mut() {
        if !weights.is_passthrough() {
            q.box3d = decode_box(&q.feature, &q.position, &block.box_decoder, cfg)?;
            let logits = block.class_decoder.forward(&q.feature)?;
            q.class_probs = logits.mapv(|z| 1.0 / (1.0 + (-z).exp()));
            q.position = q.box3d.center;
        }
        decoded.push(Detection::new(
            q.box3d,
            q.class_probs.clone(),
            q.provenance,
        ));
    }
    Ok(decoded)
}

/// Refine aggregated proposals through `cfg.refine_blocks` attention blocks,
/// decoding a detection set after every block. LiDAR-born queries initialize
/// their feature from the nearest BEV cell; camera-born queries reuse their
/// final proposal token.
pub fn refine(
    proposals: &[Proposal],
    f_lidar: &BevFeatureMap,
    owl_maps: &[BevFeatureMap],
    cams: &[CameraModel],
    cfg: &PipelineConfig,
    weights: &PipelineWeights,
) -> Result<(Vec<Detection>, Vec<Vec<Detection>>)> {
    let mut queries: Vec<RefineQuery> = Vec::with_capacity(proposals.len());
    for p in proposals {
        let center = p.detection.box3d.center;
        let feature = match &p.camera_token {
            Some(token) => weights.refine.camera_token_adapter.forward(token)?,
            None => {
                let (i, j) = f_lidar.nearest_cell(center.x, center.y);
                weights.refine.lidar_adapter.forward(&f_lidar.cell_feature(i, j))?
            }
        };
        queries.push(RefineQuery {
            feature,
            position: cfg.roi.clamp(&center),
            box3d: p.detection.box3d,
            class_probs: p.detection.class_probs.clone(),
            provenance: p.detection.provenance,
        });
    }

    let mut per_block = Vec::with_capacity(cfg.refine_blocks);
    for block in &weights.refine.blocks {
        per_block.push(run_block(
            &mut queries,
            block,
            f_lidar,
            owl_maps,
            cams,
            cfg,
            weights,
        )?);
    }
    let finals = per_block.last().cloned().unwrap_or_default();
    Ok((finals, per_block))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::tests::desk_cfg;
    use crate::pipeline::WeightsMode;
    use ndarray::Array1;

    fn make_weights(cfg: &PipelineConfig, mode: WeightsMode) -> PipelineWeights {
        PipelineWeights::new(cfg, 21, 6, mode)
    }

    fn lidar_proposal(x: f64, y: f64, score: f64) -> Proposal {
        let mut probs = Array1::zeros(6);
        probs[1] = score;
        Proposal {
            detection: Detection::new(
                Box3D::new(Vector3::new(x, y, 0.5), Vector3::new(2.0, 1.5, 1.0), 0.2).unwrap(),
                probs,
                Provenance::Lidar,
            ),
            camera_token: None,
        }
    }

    fn camera_proposal(cfg: &PipelineConfig, x: f64, y: f64) -> Proposal {
        let mut probs = Array1::zeros(6);
        probs[2] = 0.7;
        Proposal {
            detection: Detection::new(
                Box3D::new(Vector3::new(x, y, 0.6), Vector3::new(1.0, 1.0, 1.2), 0.0).unwrap(),
                probs,
                Provenance::Camera { cam: 0 },
            ),
            camera_token: Some(Array1::ones(cfg.d_model)),
        }
    }

    fn test_setup(cfg: &PipelineConfig) -> (BevFeatureMap, Vec<BevFeatureMap>, Vec<CameraModel>) {
        let dims = cfg.roi.grid_dims();
        let f_lidar = BevFeatureMap::from_fn(
            [cfg.roi.min[0], cfg.roi.min[1]],
            [cfg.roi.voxel_size[0], cfg.roi.voxel_size[1]],
            dims[0],
            dims[1],
            cfg.d_bev,
            |i, j, k| ((i * 7 + j * 3 + k) % 5) as f64 / 5.0,
        );
        let owl = BevFeatureMap::from_fn(
            [0.0, 0.0],
            [8.0, 8.0],
            24,
            16,
            cfg.d_owl,
            |i, j, k| ((i + j + k) % 3) as f64 / 3.0,
        );
        let cam = CameraModel::look_at(
            Vector3::new(0.0, 0.0, 1.4),
            Vector3::new(0.0, 1.0, 0.0),
            160.0,
            192,
            128,
        )
        .unwrap();
        (f_lidar, vec![owl], vec![cam])
    }

    #[test]
    fn passthrough_refine_is_identity_on_boxes() {
        let cfg = desk_cfg();
        let weights = make_weights(&cfg, WeightsMode::Passthrough);
        let (f_lidar, owl_maps, cams) = test_setup(&cfg);
        let proposals = vec![
            lidar_proposal(2.0, 10.0, 0.9),
            lidar_proposal(-5.0, 14.0, 0.8),
            camera_proposal(&cfg, 4.0, 12.0),
        ];
        let (finals, per_block) =
            refine(&proposals, &f_lidar, &owl_maps, &cams, &cfg, &weights).unwrap();
        assert_eq!(per_block.len(), cfg.refine_blocks);
        assert_eq!(finals.len(), proposals.len());
        for (f, p) in finals.iter().zip(&proposals) {
            assert_eq!(f.box3d, p.detection.box3d);
            assert_eq!(f.class_probs, p.detection.class_probs);
            assert_eq!(f.provenance, p.detection.provenance);
        }
    }

    #[test]
    fn seeded_refine_emits_block_sets_with_valid_probs() {
        let cfg = desk_cfg();
        let weights = make_weights(&cfg, WeightsMode::Seeded(11));
        let (f_lidar, owl_maps, cams) = test_setup(&cfg);
        let proposals = vec![
            lidar_proposal(2.0, 10.0, 0.9),
            camera_proposal(&cfg, -3.0, 9.0),
        ];
        let (finals, per_block) =
            refine(&proposals, &f_lidar, &owl_maps, &cams, &cfg, &weights).unwrap();
        assert_eq!(per_block.len(), cfg.refine_blocks);
        for set in &per_block {
            assert_eq!(set.len(), proposals.len());
            for d in set {
                assert!(d.class_probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
                assert!((d.score - d.class_probs.iter().cloned().fold(0.0, f64::max)).abs() < 1e-15);
                assert!(cfg.roi.contains(&d.box3d.center) || {
                    // clamped onto the boundary is fine too
                    let c = cfg.roi.clamp(&d.box3d.center);
                    (c - d.box3d.center).norm() < 1e-12
                });
            }
        }
        assert_eq!(finals.len(), proposals.len());
    }

    #[test]
    fn query_behind_all_cameras_rides_residual_path() {
        let cfg = desk_cfg();
        let weights = make_weights(&cfg, WeightsMode::Seeded(13));
        let (f_lidar, owl_maps, cams) = test_setup(&cfg);
        // Behind the forward-looking camera (y < camera y).
        let behind = lidar_proposal(0.0, -10.0, 0.9);
        let (finals, _) =
            refine(&[behind], &f_lidar, &owl_maps, &cams, &cfg, &weights).unwrap();
        assert_eq!(finals.len(), 1);
        assert!(finals[0].class_probs.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn two_cameras_mean_pool_matches_manual() {
        // With two identical cameras, the pooled camera attention equals the
        // per-camera attention; with one camera moved, pooling changes the
        // result. This exercises the mean-pool path both ways.
        let cfg = desk_cfg();
        let weights = make_weights(&cfg, WeightsMode::Seeded(17));
        let (f_lidar, owl_maps, cams) = test_setup(&cfg);
        let twin_maps = vec![owl_maps[0].clone(), owl_maps[0].clone()];
        let twin_cams = vec![cams[0].clone(), cams[0].clone()];
        let p = lidar_proposal(1.0, 12.0, 0.9);
        let (one, _) =
            refine(&[p.clone()], &f_lidar, &owl_maps, &cams, &cfg, &weights).unwrap();
        let (two, _) =
            refine(&[p.clone()], &f_lidar, &twin_maps, &twin_cams, &cfg, &weights).unwrap();
        // Mean of two identical attention outputs equals the single output.
        assert_eq!(one[0].box3d, two[0].box3d);
        assert_eq!(one[0].class_probs, two[0].class_probs);

        let mut other_map = owl_maps[0].clone();
        other_map.data.mapv_inplace(|v| 1.0 - v);
        let mixed_maps = vec![owl_maps[0].clone(), other_map];
        let (mixed, _) =
            refine(&[p], &f_lidar, &mixed_maps, &twin_cams, &cfg, &weights).unwrap();
        assert_ne!(mixed[0].box3d, one[0].box3d);
    }
}
