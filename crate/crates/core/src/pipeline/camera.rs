//! Camera proposal branch: query initialization from filtered priors,
//! pseudo point-cloud lifting, and the frustum-attention proposal decoder.

use nalgebra::Vector3;
use ndarray::{Array1, Array2, Axis};

use crate::attention::{frustum_grid, mha, transformer_layer};
use crate::bev::BevFeatureMap;
use crate::error::Result;
use crate::geometry::{self, normalize_heading, Box2D, Box3D, CameraModel};
use crate::priors::{DepthMap, PriorDetection};

use super::weights::PipelineWeights;
use super::{Detection, PipelineConfig, Proposal, Provenance};

/// A camera-branch object query: feature and 3D position plus the 2D
/// evidence it was lifted from.
#[derive(Debug, Clone)]
pub struct CameraQuery {
    pub feature: Array1<f64>,
    pub position: Vector3<f64>,
    pub box2d: Box2D,
    pub depth: f64,
    pub class: usize,
    pub prior_score: f64,
    pub cam: usize,
}

/// Initialize object queries from prompt-filtered priors. The depth comes
/// from a nearest-neighbor depth-map lookup at the 2D box center; priors
/// whose depth falls below the floor are discarded (counted, not errors).
/// The query feature is the reduced token plus positional encodings of
/// (u, v, d) and the unprojected position, plus the encoded affinities.
pub fn init_camera_queries(
    priors: &[(PriorDetection, usize, f64)],
    depth_map: &DepthMap,
    cam: &CameraModel,
    cam_idx: usize,
    cfg: &PipelineConfig,
    weights: &PipelineWeights,
) -> Result<(Vec<CameraQuery>, usize)> {
    let w = &weights.camera;
    let mut queries = Vec::new();
    let mut discarded = 0usize;
    for (prior, class, score) in priors {
        let (u, v) = (prior.box2d.center.x, prior.box2d.center.y);
        let d = depth_map.depth_at(u, v);
        if d < cfg.depth_discard {
            discarded += 1;
            continue;
        }
        let position = cfg.roi.clamp(&geometry::unproject(cam, u, v, d)?);
        let affinities = Array1::from_vec(prior.affinities.clone());
        let feature = w.token_reduce.forward(&prior.token)?
            + w.pe_uvd.encode(&[u, v, d])?
            + w.pe_xyz.encode(&[position.x, position.y, position.z])?
            + w.affinity_encode.forward(&affinities)?;
        queries.push(CameraQuery {
            feature,
            position,
            box2d: prior.box2d,
            depth: d,
            class: *class,
            prior_score: *score,
            cam: cam_idx,
        });
    }
    Ok((queries, discarded))
}

/// Unproject every pixel inside any prior 2D box whose depth confidence
/// clears the gate; each lifted point carries the token of its
/// best-scoring covering prior.
pub fn lift_prior_pixels(
    priors: &[(PriorDetection, usize, f64)],
    depth_map: &DepthMap,
    cam: &CameraModel,
    confidence_gate: f64,
) -> Result<Vec<(Vector3<f64>, Array1<f64>)>> {
    let (h, w) = depth_map.dims();
    // Best covering prior per pixel, by affinity score.
    let mut owner: Vec<Option<usize>> = vec![None; h * w];
    for (idx, (prior, _, score)) in priors.iter().enumerate() {
        let mn = prior.box2d.min();
        let mx = prior.box2d.max();
        let px_lo = mn.x.floor().max(0.0) as usize;
        let px_hi = (mx.x.ceil() as usize).min(w);
        let py_lo = mn.y.floor().max(0.0) as usize;
        let py_hi = (mx.y.ceil() as usize).min(h);
        for py in py_lo..py_hi {
            for px in px_lo..px_hi {
                let (u, v) = (px as f64 + 0.5, py as f64 + 0.5);
                if !prior.box2d.contains_pixel(u, v) {
                    continue;
                }
                let slot = &mut owner[py * w + px];
                let better = match slot {
                    Some(prev) => *score > priors[*prev].2,
                    None => true,
                };
                if better {
                    *slot = Some(idx);
                }
            }
        }
    }
    let mut cloud = Vec::new();
    for py in 0..h {
        for px in 0..w {
            let Some(idx) = owner[py * w + px] else {
                continue;
            };
            let (u, v) = (px as f64 + 0.5, py as f64 + 0.5);
            if depth_map.confidence_at(u, v) <= confidence_gate {
                continue;
            }
            let d = depth_map.depth_at(u, v);
            if d <= 0.0 {
                continue;
            }
            cloud.push((geometry::unproject(cam, u, v, d)?, priors[idx].0.token.clone()));
        }
    }
    Ok(cloud)
}

/// Sampled frustum features `g = F_bev(x, y) + PE(dxyz) + PE(duvd)` plus the
/// sample positions, as attention key/value rows.
fn gather_frustum_features(
    query: &CameraQuery,
    fused_bev: &BevFeatureMap,
    cam: &CameraModel,
    cfg: &PipelineConfig,
    weights: &PipelineWeights,
) -> Result<Option<(Array2<f64>, Array2<f64>)>> {
    let grid = frustum_grid(
        &query.box2d,
        query.depth,
        cam,
        (cfg.n_frustum[0], cfg.n_frustum[1], cfg.n_frustum[2]),
        cfg.delta,
    )?;
    if grid.samples.is_empty() {
        return Ok(None);
    }
    let w = &weights.camera;
    let dim = fused_bev.feature_dim();
    let mut feats = Array2::zeros((grid.samples.len(), dim));
    let mut positions = Array2::zeros((grid.samples.len(), 3));
    for (i, s) in grid.samples.iter().enumerate() {
        let mut g = fused_bev.bilinear_sample(s.position.x, s.position.y);
        g = g + w.pe_xyz.encode(&[s.delta_xyz.x, s.delta_xyz.y, s.delta_xyz.z])?;
        g = g + w.pe_uvd.encode(&[s.delta_uvd.0, s.delta_uvd.1, s.delta_uvd.2])?;
        feats.row_mut(i).assign(&g);
        positions[[i, 0]] = s.position.x;
        positions[[i, 1]] = s.position.y;
        positions[[i, 2]] = s.position.z;
    }
    Ok(Some((feats, positions)))
}

fn decode_box_seeded(
    feature: &Array1<f64>,
    position: &Vector3<f64>,
    decoder: &crate::attention::Mlp,
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
    let heading = raw[6].atan2(raw[7]); // raw layout (..., sin, cos): atan2(sin, cos)
    Ok(Box3D::new(center, size, normalize_heading(heading)).expect("clamped sizes"))
}

/// Run the frustum-attention blocks over one camera's queries and decode
/// proposals. Each block applies object self-attention, cross-attention to
/// the frustum samples, and a box decode; the query position (and thus the
/// sampling grid) is refreshed from the decoded box between blocks. The
/// class vector is decoded after the final block.
///
/// With passthrough weights the cross-attention runs as a single-probe
/// occupancy attention over the sample positions, so the decoded center is
/// the occupancy-weighted frustum sample: geometry flows through the same
/// sampling machinery with hand-set weights.
pub fn camera_proposals(
    mut queries: Vec<CameraQuery>,
    fused_bev: &BevFeatureMap,
    cam: &CameraModel,
    n_classes: usize,
    cfg: &PipelineConfig,
    weights: &PipelineWeights,
) -> Result<(Vec<Proposal>, Vec<Vec<Box3D>>)> {
    let w = &weights.camera;
    let mut per_block_boxes: Vec<Vec<Box3D>> = Vec::with_capacity(cfg.camera_blocks);
    if queries.is_empty() {
        return Ok((Vec::new(), vec![Vec::new(); cfg.camera_blocks]));
    }
    let d = cfg.d_model;
    let occupancy = PipelineWeights::occupancy_attention(
        fused_bev.feature_dim(),
        crate::bev::OCCUPANCY_CHANNEL,
        cfg.passthrough_sharpness,
    );

    for (block_idx, block) in w.blocks.iter().enumerate() {
        // Object self-attention across all queries of this image.
        let mut stack = Array2::zeros((queries.len(), d));
        for (i, q) in queries.iter().enumerate() {
            stack.row_mut(i).assign(&q.feature);
        }
        let updated = transformer_layer(&stack, &stack, &stack, &block.self_attn)?;

        let mut block_boxes = Vec::with_capacity(queries.len());
        for (i, q) in queries.iter_mut().enumerate() {
            q.feature = updated.row(i).to_owned();

            let Some((feats, positions)) =
                gather_frustum_features(q, fused_bev, cam, cfg, weights)?
            else {
                block_boxes.push(
                    Box3D::new(
                        q.position,
                        Vector3::from_row_slice(&cfg.passthrough_box_size),
                        0.0,
                    )
                    .expect("positive size"),
                );
                continue;
            };

            // Cross-attention to the sampled frustum features.
            let q_row = q.feature.clone().insert_axis(Axis(0));
            q.feature = transformer_layer(&q_row, &feats, &feats, &block.cross_attn)?
                .row(0)
                .to_owned();

            let decoded = if weights.is_passthrough() {
                let (probe, occ_w) = &occupancy;
                let snapped = mha(probe, &feats, &positions, occ_w)?;
                let center = cfg.roi.clamp(&Vector3::new(
                    snapped[[0, 0]],
                    snapped[[0, 1]],
                    snapped[[0, 2]],
                ));
                Box3D::new(
                    center,
                    Vector3::from_row_slice(&cfg.passthrough_box_size),
                    0.0,
                )
                .expect("positive size")
            } else {
                decode_box_seeded(&q.feature, &q.position, &block.box_decoder, cfg)?
            };

            // Re-sample from the new 3D position before the next block.
            q.position = decoded.center;
            if block_idx + 1 < cfg.camera_blocks {
                let z = cam.to_camera_frame(&decoded.center).z;
                q.depth = z.max(cfg.depth_discard);
            }
            block_boxes.push(decoded);
        }
        per_block_boxes.push(block_boxes);
    }

    let final_boxes = per_block_boxes.last().cloned().unwrap_or_default();
    let mut proposals = Vec::with_capacity(queries.len());
    for (q, box3d) in queries.iter().zip(final_boxes) {
        let class_probs = if weights.is_passthrough() {
            let mut probs = Array1::zeros(n_classes);
            probs[q.class] = q.prior_score;
            probs
        } else {
            let logits = w.class_decoder.forward(&q.feature)?;
            logits.mapv(|z| 1.0 / (1.0 + (-z).exp()))
        };
        proposals.push(Proposal {
            detection: Detection::new(box3d, class_probs, Provenance::Camera { cam: q.cam }),
            camera_token: Some(q.feature.clone()),
        });
    }
    Ok((proposals, per_block_boxes))
}
