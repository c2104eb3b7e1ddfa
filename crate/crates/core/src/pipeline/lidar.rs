//! LiDAR proposal decoding. The heatmap itself is an input here: it stands
//! in for a trained convolutional branch and is synthesized from ground
//! truth with configurable corruption.

use nalgebra::Vector3;
use ndarray::{Array1, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{nms_bev, normalize_heading, Box3D};
use crate::priors::GroundTruth;

use super::{Detection, PipelineConfig, Provenance};

/// Per-BEV-cell class logits plus the companion regression grid
/// (centroid offsets within the cell, z, dims, heading).
#[derive(Debug, Clone)]
pub struct Heatmap {
    /// (nx, ny, C) logits.
    pub logits: Array3<f64>,
    /// (nx, ny, 7): dx, dy, z, l, w, h, theta.
    pub regression: Array3<f64>,
    pub origin: [f64; 2],
    pub cell_size: [f64; 2],
}

impl Heatmap {
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.logits.shape();
        (s[0], s[1], s[2])
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.origin[0] + (i as f64 + 0.5) * self.cell_size[0],
            self.origin[1] + (j as f64 + 0.5) * self.cell_size[1],
        )
    }
}

/// Corruption applied when synthesizing a heatmap from ground truth.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct HeatmapCorruption {
    /// Gaussian noise added to every logit.
    pub logit_noise: f64,
    /// Gaussian noise on the regression targets (meters / radians).
    pub offset_noise: f64,
    /// Number of spurious confident peaks.
    pub spurious: usize,
    /// Probability of suppressing each ground-truth peak.
    pub drop: f64,
}

const PEAK_LOGIT: f64 = 8.0;
const BACKGROUND_LOGIT: f64 = -10.0;

/// Build a heatmap over the configured BEV grid with one confident peak per
/// ground-truth box and exact regression targets, optionally corrupted.
pub fn synthesize_heatmap(
    ground_truth: &[GroundTruth],
    n_classes: usize,
    cfg: &PipelineConfig,
    corruption: &HeatmapCorruption,
    seed: u64,
) -> Heatmap {
    let dims = cfg.roi.grid_dims();
    let (nx, ny) = (dims[0], dims[1]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut logits = Array3::from_elem((nx, ny, n_classes), BACKGROUND_LOGIT);
    let mut regression = Array3::zeros((nx, ny, 7));
    let origin = [cfg.roi.min[0], cfg.roi.min[1]];
    let cell_size = [cfg.roi.voxel_size[0], cfg.roi.voxel_size[1]];

    let noise = |scale: f64, rng: &mut ChaCha8Rng| {
        if scale > 0.0 {
            scale * crate::priors::sample_normal(rng)
        } else {
            0.0
        }
    };

    for g in ground_truth {
        if corruption.drop > 0.0 && rng.random::<f64>() < corruption.drop {
            continue;
        }
        let c = &g.box3d.center;
        let Some(idx) = cfg.roi.voxel_index(&Vector3::new(c.x, c.y, cfg.roi.min[2])) else {
            continue;
        };
        let (i, j) = (idx[0], idx[1]);
        let cx = origin[0] + (i as f64 + 0.5) * cell_size[0];
        let cy = origin[1] + (j as f64 + 0.5) * cell_size[1];
        logits[[i, j, g.class]] = PEAK_LOGIT + noise(corruption.logit_noise, &mut rng);
        regression[[i, j, 0]] = c.x - cx + noise(corruption.offset_noise, &mut rng);
        regression[[i, j, 1]] = c.y - cy + noise(corruption.offset_noise, &mut rng);
        regression[[i, j, 2]] = c.z + noise(corruption.offset_noise, &mut rng);
        regression[[i, j, 3]] = (g.box3d.size.x + noise(corruption.offset_noise, &mut rng)).max(0.05);
        regression[[i, j, 4]] = (g.box3d.size.y + noise(corruption.offset_noise, &mut rng)).max(0.05);
        regression[[i, j, 5]] = (g.box3d.size.z + noise(corruption.offset_noise, &mut rng)).max(0.05);
        regression[[i, j, 6]] = g.box3d.heading + noise(corruption.offset_noise, &mut rng);
    }

    for _ in 0..corruption.spurious {
        let i = rng.random_range(0..nx);
        let j = rng.random_range(0..ny);
        let class = rng.random_range(0..n_classes);
        logits[[i, j, class]] = PEAK_LOGIT;
        regression[[i, j, 0]] = 0.0;
        regression[[i, j, 1]] = 0.0;
        regression[[i, j, 2]] = 1.0;
        regression[[i, j, 3]] = 1.0;
        regression[[i, j, 4]] = 1.0;
        regression[[i, j, 5]] = 1.0;
        regression[[i, j, 6]] = 0.0;
    }

    Heatmap {
        logits,
        regression,
        origin,
        cell_size,
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Decode per-cell detections: confidence is the max over per-class sigmoid
/// probabilities; cells at or below the confidence filter are dropped, the
/// rest go through BEV NMS and the top-k cap.
pub fn decode_lidar_proposals(h: &Heatmap, cfg: &PipelineConfig) -> Vec<Detection> {
    let (nx, ny, n_classes) = h.dims();
    let mut candidates: Vec<Detection> = Vec::new();
    for i in 0..nx {
        for j in 0..ny {
            let probs = Array1::from_shape_fn(n_classes, |k| sigmoid(h.logits[[i, j, k]]));
            let conf = probs.iter().cloned().fold(0.0, f64::max);
            if conf <= cfg.confidence_filter {
                continue;
            }
            let (cx, cy) = h.cell_center(i, j);
            let center = Vector3::new(
                cx + h.regression[[i, j, 0]],
                cy + h.regression[[i, j, 1]],
                h.regression[[i, j, 2]],
            );
            let size = Vector3::new(
                h.regression[[i, j, 3]].max(0.05),
                h.regression[[i, j, 4]].max(0.05),
                h.regression[[i, j, 5]].max(0.05),
            );
            let heading = normalize_heading(h.regression[[i, j, 6]]);
            let Ok(box3d) = Box3D::new(center, size, heading) else {
                continue;
            };
            candidates.push(Detection::new(box3d, probs, Provenance::Lidar));
        }
    }
    let scored: Vec<(Box3D, f64)> = candidates.iter().map(|d| (d.box3d, d.score)).collect();
    let kept = nms_bev(&scored, cfg.nms_iou);
    kept.into_iter()
        .take(cfg.top_k)
        .map(|i| candidates[i].clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::bev_iou;
    use crate::pipeline::tests::desk_cfg;

    fn gt(x: f64, y: f64, class: usize) -> GroundTruth {
        GroundTruth {
            box3d: Box3D::new(
                Vector3::new(x, y, 0.75),
                Vector3::new(3.0, 1.5, 1.5),
                0.4,
            )
            .unwrap(),
            class,
        }
    }

    #[test]
    fn all_background_decodes_empty() {
        let cfg = desk_cfg();
        let h = synthesize_heatmap(&[], 4, &cfg, &HeatmapCorruption::default(), 0);
        // sigmoid(-10) ~ 4.5e-5 > 0.01? No: 4.5e-5 <= 0.01, so everything is
        // filtered.
        assert!(decode_lidar_proposals(&h, &cfg).is_empty());
    }

    #[test]
    fn exact_heatmap_recovers_boxes() {
        let cfg = desk_cfg();
        let gts = vec![gt(3.2, 7.9, 0), gt(-10.4, 4.4, 2)];
        let h = synthesize_heatmap(&gts, 4, &cfg, &HeatmapCorruption::default(), 0);
        let dets = decode_lidar_proposals(&h, &cfg);
        assert_eq!(dets.len(), 2);
        for g in &gts {
            let best = dets
                .iter()
                .map(|d| (d.box3d.center - g.box3d.center).norm())
                .fold(f64::INFINITY, f64::min);
            // Regression targets are exact: recovery is exact.
            assert!(best < 1e-9, "center error {best}");
        }
        for d in &dets {
            assert!(d.score > 0.99);
            assert_eq!(d.provenance, Provenance::Lidar);
        }
    }

    #[test]
    fn confidence_filter_boundary() {
        let cfg = desk_cfg();
        let mut h = synthesize_heatmap(&[], 2, &cfg, &HeatmapCorruption::default(), 0);
        // The filter drops confidences <= 0.01; probe just below and just
        // above the boundary.
        let below = (0.0099f64 / 0.9901).ln();
        let above = (0.0101f64 / 0.9899).ln();
        h.logits[[10, 10, 0]] = below;
        h.logits[[40, 40, 1]] = above;
        h.regression[[10, 10, 3]] = 1.0;
        h.regression[[10, 10, 4]] = 1.0;
        h.regression[[10, 10, 5]] = 1.0;
        h.regression[[40, 40, 3]] = 1.0;
        h.regression[[40, 40, 4]] = 1.0;
        h.regression[[40, 40, 5]] = 1.0;
        let dets = decode_lidar_proposals(&h, &cfg);
        assert_eq!(dets.len(), 1);
        assert!((dets[0].score - 0.0101).abs() < 1e-6);
    }

    #[test]
    fn top_500_cap() {
        let cfg = desk_cfg();
        // 600 disjoint confident cells, spaced 4 cells apart.
        let mut h = synthesize_heatmap(&[], 2, &cfg, &HeatmapCorruption::default(), 0);
        let mut placed = 0;
        'outer: for i in (0..120).step_by(4) {
            for j in (0..120).step_by(4) {
                if placed >= 600 {
                    break 'outer;
                }
                h.logits[[i, j, 0]] = 5.0 + (placed as f64) * 1e-3;
                h.regression[[i, j, 3]] = 0.5;
                h.regression[[i, j, 4]] = 0.5;
                h.regression[[i, j, 5]] = 0.5;
                h.regression[[i, j, 2]] = 0.25;
                placed += 1;
            }
        }
        assert_eq!(placed, 600);
        let dets = decode_lidar_proposals(&h, &cfg);
        assert_eq!(dets.len(), 500);
        // The cap keeps the highest confidences.
        let min_kept = dets.iter().map(|d| d.score).fold(f64::INFINITY, f64::min);
        let all: Vec<f64> = (0..600).map(|p| sigmoid(5.0 + p as f64 * 1e-3)).collect();
        let mut sorted = all.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!((min_kept - sorted[499]).abs() < 1e-12);
    }

    #[test]
    fn nms_suppresses_duplicate_cells() {
        let cfg = desk_cfg();
        let mut h = synthesize_heatmap(&[], 2, &cfg, &HeatmapCorruption::default(), 0);
        // Two adjacent cells regressing to nearly the same box (IoU ~0.9).
        for (i, score) in [(60usize, 6.0), (61usize, 5.0)] {
            h.logits[[i, 60, 0]] = score;
            let (cx, _) = h.cell_center(i, 60);
            h.regression[[i, 60, 0]] = 0.25 - cx; // absolute x 0.25
            h.regression[[i, 60, 1]] = 0.0;
            h.regression[[i, 60, 2]] = 0.5;
            h.regression[[i, 60, 3]] = 3.0;
            h.regression[[i, 60, 4]] = 1.5;
            h.regression[[i, 60, 5]] = 1.0;
        }
        // Shift the second one slightly so the pair isn't identical.
        h.regression[[61, 60, 0]] += 0.1;
        let dets = decode_lidar_proposals(&h, &cfg);
        assert_eq!(dets.len(), 1);
        assert!((dets[0].score - sigmoid(6.0)).abs() < 1e-12);

        // Sanity: the suppressed pair really overlapped above threshold.
        let a = Box3D::new(Vector3::new(0.25, 0.25, 0.5), Vector3::new(3.0, 1.5, 1.0), 0.0)
            .unwrap();
        let b = Box3D::new(Vector3::new(0.35, 0.25, 0.5), Vector3::new(3.0, 1.5, 1.0), 0.0)
            .unwrap();
        assert!(bev_iou(&a, &b) > cfg.nms_iou);
    }

    #[test]
    fn corruption_adds_and_drops_peaks() {
        let cfg = desk_cfg();
        let gts = vec![gt(3.0, 8.0, 0), gt(-10.0, 4.0, 1)];
        let clean = decode_lidar_proposals(
            &synthesize_heatmap(&gts, 4, &cfg, &HeatmapCorruption::default(), 1),
            &cfg,
        );
        assert_eq!(clean.len(), 2);
        let spurious = decode_lidar_proposals(
            &synthesize_heatmap(
                &gts,
                4,
                &cfg,
                &HeatmapCorruption {
                    spurious: 5,
                    ..Default::default()
                },
                1,
            ),
            &cfg,
        );
        assert!(spurious.len() > 2);
        let dropped = decode_lidar_proposals(
            &synthesize_heatmap(
                &gts,
                4,
                &cfg,
                &HeatmapCorruption {
                    drop: 1.0,
                    ..Default::default()
                },
                1,
            ),
            &cfg,
        );
        assert!(dropped.is_empty());
    }
}
