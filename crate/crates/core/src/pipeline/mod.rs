//! The detection pipeline: camera proposal branch (query init, frustum
//! attention, decode), LiDAR proposal decoding, multi-modal aggregation and
//! the attention-based refinement stage.

mod aggregate;
mod camera;
mod lidar;
mod refine;
mod weights;

pub use aggregate::aggregate_proposals;
pub use camera::{camera_proposals, init_camera_queries, lift_prior_pixels, CameraQuery};
pub use lidar::{decode_lidar_proposals, synthesize_heatmap, Heatmap, HeatmapCorruption};
pub use refine::refine;
pub use weights::{PipelineWeights, WeightsMode};

use nalgebra::Vector3;
use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::bev::{fuse_concat, to_bev, voxelize, BevFeatureMap, RegionOfInterest};
use crate::error::{Error, Result};
use crate::geometry::Box3D;
use crate::priors::{assign_prompt_class, owl_feature_grid, PromptTable, SyntheticScene};

/// Where a detection or query came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Lidar,
    Camera { cam: usize },
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Provenance::Lidar => write!(f, "lidar"),
            Provenance::Camera { cam } => write!(f, "camera:{cam}"),
        }
    }
}

/// A decoded detection: box, per-class probabilities and provenance. The
/// score is always the maximum class probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub box3d: Box3D,
    pub class_probs: Array1<f64>,
    pub score: f64,
    pub provenance: Provenance,
}

impl Detection {
    pub fn new(box3d: Box3D, class_probs: Array1<f64>, provenance: Provenance) -> Self {
        debug_assert!(class_probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
        let score = class_probs.iter().cloned().fold(0.0, f64::max);
        Detection {
            box3d,
            class_probs,
            score,
            provenance,
        }
    }

    pub fn argmax_class(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.class_probs.iter().enumerate() {
            if p > self.class_probs[best] {
                best = i;
            }
        }
        best
    }
}

/// A feature vector plus a 3D position; the currency of both attention
/// stages. Positions are clamped into the region of interest.
#[derive(Debug, Clone)]
pub struct ObjectQuery {
    pub feature: Array1<f64>,
    pub position: Vector3<f64>,
    pub provenance: Provenance,
}

/// A first-stage detection together with the query feature that decoded it
/// (camera proposals keep their final token for refinement).
#[derive(Debug, Clone)]
pub struct Proposal {
    pub detection: Detection,
    pub camera_token: Option<Array1<f64>>,
}

/// Pipeline hyperparameters. The recorded full-scale defaults (8 heads,
/// feature dim 512 with FFN dim 512 in the proposal stage; dim 256 with FFN
/// 1024/256 in refinement; dropout 0.1) are scaled down for desk runs via
/// these fields; dropout is a no-op in this deterministic setting.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub roi: RegionOfInterest,
    /// Frustum mesh-grid resolution (N_x, N_y, N_z).
    pub n_frustum: [usize; 3],
    /// Depth search range delta, meters.
    pub delta: f64,
    pub nms_iou: f64,
    pub crop_merge_iou: f64,
    pub confidence_filter: f64,
    pub top_k: usize,
    /// Discard priors whose center depth is below this.
    pub depth_discard: f64,
    /// Lift pixels only when depth confidence exceeds this.
    pub depth_confidence_gate: f64,
    pub camera_blocks: usize,
    pub refine_blocks: usize,
    pub alpha_phi: f64,
    pub alpha_z: f64,
    pub camera_class_blacklist: Vec<String>,
    pub d_owl: usize,
    /// Per-map BEV feature dimension; the fused map has twice this.
    pub d_bev: usize,
    /// Query feature dimension; must equal `2 * d_bev`.
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub deformable_samples: usize,
    pub owl_grid_stride: usize,
    /// Ground cutoff of the point encoders' occupancy channel, meters.
    pub ground_filter_z: f64,
    /// Softmax sharpness of the passthrough occupancy attention.
    pub passthrough_sharpness: f64,
    /// Box size emitted for passthrough camera proposals.
    pub passthrough_box_size: [f64; 3],
    pub pe_base: f64,
    pub weights_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            roi: RegionOfInterest::new([-54.0, -54.0, -5.0], [54.0, 54.0, 3.0], [0.6, 0.6, 2.0])
                .expect("valid default roi"),
            n_frustum: [1, 1, 20],
            delta: 10.0,
            nms_iou: 0.2,
            crop_merge_iou: 0.85,
            confidence_filter: 0.01,
            top_k: 500,
            depth_discard: 0.5,
            depth_confidence_gate: 0.5,
            camera_blocks: 2,
            refine_blocks: 2,
            alpha_phi: 0.03,
            alpha_z: 5.0,
            camera_class_blacklist: vec![
                "car".into(),
                "trailer".into(),
                "truck".into(),
                "bus".into(),
                "construction_vehicle".into(),
            ],
            d_owl: 32,
            d_bev: 12,
            d_model: 24,
            heads: 8,
            ffn_dim: 48,
            deformable_samples: 4,
            owl_grid_stride: 8,
            ground_filter_z: 0.15,
            passthrough_sharpness: 12.0,
            passthrough_box_size: [2.0, 2.0, 2.0],
            pe_base: 10000.0,
            weights_seed: 1,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model != 2 * self.d_bev {
            return Err(Error::ConfigError(format!(
                "d_model ({}) must equal 2 * d_bev ({})",
                self.d_model, self.d_bev
            )));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::ConfigError("heads must divide d_model".into()));
        }
        if self.d_model % 6 != 0 || self.d_bev % 6 != 0 {
            // 3-coordinate sinusoidal groups must be even.
            return Err(Error::ConfigError(
                "d_model and d_bev must be multiples of 6".into(),
            ));
        }
        if self.nms_iou <= 0.0 || self.crop_merge_iou <= 0.0 || self.delta <= 0.0 {
            return Err(Error::ConfigError("thresholds must be positive".into()));
        }
        if self.camera_blocks == 0 || self.refine_blocks == 0 {
            return Err(Error::ConfigError("block counts must be positive".into()));
        }
        Ok(())
    }

    pub fn blacklist_indices(&self, table: &PromptTable) -> Vec<usize> {
        self.camera_class_blacklist
            .iter()
            .filter_map(|name| table.class_index(name))
            .collect()
    }
}

/// LiDAR BEV feature map from raw points: every point carries a constant
/// intensity-placeholder token, runs through the pointwise encoder and the
/// sparse voxel / BEV-squash path.
pub fn build_lidar_bev(
    points: &[Vector3<f64>],
    cfg: &PipelineConfig,
    weights: &PipelineWeights,
) -> Result<BevFeatureMap> {
    let token = Array1::from_vec(vec![1.0]);
    let cloud: Vec<(Vector3<f64>, Array1<f64>)> =
        points.iter().map(|p| (*p, token.clone())).collect();
    let encoded = weights.bev.lidar_encoder.encode_cloud(&cloud)?;
    let grid = voxelize(&encoded, &cfg.roi)?;
    Ok(ensure_dims(to_bev(&grid), cfg))
}

/// Image-feature BEV map from a lifted pseudo point cloud.
pub fn build_owl_bev(
    cloud: &[(Vector3<f64>, Array1<f64>)],
    cfg: &PipelineConfig,
    weights: &PipelineWeights,
) -> Result<BevFeatureMap> {
    let encoded = weights.bev.owl_encoder.encode_cloud(cloud)?;
    let grid = voxelize(&encoded, &cfg.roi)?;
    Ok(ensure_dims(to_bev(&grid), cfg))
}

/// An empty sparse grid yields a zero-dimension map; pin it to `d_bev` so
/// fusion still lines up.
fn ensure_dims(map: BevFeatureMap, cfg: &PipelineConfig) -> BevFeatureMap {
    if map.feature_dim() == cfg.d_bev {
        map
    } else {
        let (nx, ny) = map.dims();
        BevFeatureMap::zeros(map.origin, map.cell_size, nx, ny, cfg.d_bev)
    }
}

/// Everything one scene produces on the way to final detections.
#[derive(Debug, Clone)]
pub struct SceneOutput {
    pub lidar_proposals: Vec<Detection>,
    pub camera_proposals: Vec<Detection>,
    /// Aggregated (post-NMS) proposals fed to refinement.
    pub proposals: Vec<Detection>,
    pub detections: Vec<Detection>,
    pub per_block_detections: Vec<Vec<Detection>>,
    /// Priors discarded by the depth floor, per camera.
    pub depth_discards: Vec<usize>,
}

/// Run the full pipeline on one synthetic scene: per-camera proposal
/// branches, LiDAR decoding, aggregation and refinement.
pub fn run_scene(
    scene: &SyntheticScene,
    table: &PromptTable,
    heatmap: &Heatmap,
    cfg: &PipelineConfig,
    weights: &PipelineWeights,
) -> Result<SceneOutput> {
    cfg.validate()?;
    let f_lidar = build_lidar_bev(&scene.lidar_points, cfg, weights)?;

    let mut all_camera: Vec<Proposal> = Vec::new();
    let mut depth_discards = Vec::new();
    let mut owl_maps = Vec::new();
    for (cam_idx, cam) in scene.cameras.iter().enumerate() {
        let priors = &scene.priors[cam_idx];
        let depth_map = &scene.depth_maps[cam_idx];

        let filtered: Vec<(crate::priors::PriorDetection, usize, f64)> = priors
            .iter()
            .filter_map(|p| {
                assign_prompt_class(p, table).map(|(class, score)| (p.clone(), class, score))
            })
            .collect();

        let (queries, discarded) =
            init_camera_queries(&filtered, depth_map, cam, cam_idx, cfg, weights)?;
        depth_discards.push(discarded);

        let lifted = lift_prior_pixels(&filtered, depth_map, cam, cfg.depth_confidence_gate)?;
        let f_owl_bev = build_owl_bev(&lifted, cfg, weights)?;
        let fused = fuse_concat(&f_lidar, &f_owl_bev)?;

        let (proposals, _per_block) = camera_proposals(
            queries,
            &fused,
            cam,
            table.n_classes(),
            cfg,
            weights,
        )?;
        all_camera.extend(proposals);

        owl_maps.push(owl_feature_grid(
            priors,
            cam.image_width,
            cam.image_height,
            cfg.owl_grid_stride,
            cfg.d_owl,
        ));
    }

    let lidar_proposals = decode_lidar_proposals(heatmap, cfg);
    let camera_detections: Vec<Detection> =
        all_camera.iter().map(|p| p.detection.clone()).collect();

    let proposals = aggregate_proposals(
        &lidar_proposals,
        &all_camera,
        &cfg.blacklist_indices(table),
        cfg.nms_iou,
    );
    let proposal_detections: Vec<Detection> =
        proposals.iter().map(|p| p.detection.clone()).collect();

    let (detections, per_block_detections) = refine(
        &proposals,
        &f_lidar,
        &owl_maps,
        &scene.cameras,
        cfg,
        weights,
    )?;

    Ok(SceneOutput {
        lidar_proposals,
        camera_proposals: camera_detections,
        proposals: proposal_detections,
        detections,
        per_block_detections,
        depth_discards,
    })
}
