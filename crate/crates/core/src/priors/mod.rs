//! Mock foundation-model layer: the prompt table with per-prompt score
//! filtering, crop merging, synthetic scene generation and the cached-prior
//! file format. Stands in for real open-vocabulary detector and metric-depth
//! outputs; affinities are generated, never computed from tokens.

mod cache;
mod scene;

pub use cache::{load_priors, save_priors, PRIOR_CACHE_VERSION};
pub use scene::{
    generate_scene, ray_box_intersection, token_prototypes, CameraConfig, ClassSpec, DepthMode,
    GroundTruth, LidarConfig, NoiseConfig, SceneConfig, SyntheticScene,
};
pub(crate) use scene::sample_normal;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::bev::BevFeatureMap;
use crate::error::{Error, Result};
use crate::geometry::Box2D;

/// One mock 2D detection: box, token feature, per-prompt affinities and the
/// crop it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorDetection {
    pub box2d: Box2D,
    pub token: Array1<f64>,
    pub affinities: Vec<f64>,
    pub source_crop: usize,
}

impl PriorDetection {
    pub fn score(&self) -> f64 {
        self.affinities.iter().cloned().fold(0.0, f64::max)
    }
}

/// Dense per-pixel depth (meters) and confidence in [0, 1], stored as f32
/// row-major grids to match the cache format exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub depth: Array2<f32>,
    pub confidence: Array2<f32>,
}

impl DepthMap {
    pub fn new(depth: Array2<f32>, confidence: Array2<f32>) -> Result<Self> {
        if depth.dim() != confidence.dim() {
            return Err(Error::ConfigError("depth/confidence shape mismatch".into()));
        }
        if depth.iter().any(|d| !d.is_finite()) {
            return Err(Error::ConfigError("non-finite depth".into()));
        }
        Ok(DepthMap { depth, confidence })
    }

    pub fn dims(&self) -> (usize, usize) {
        let (h, w) = self.depth.dim();
        (h, w)
    }

    /// Nearest-neighbor lookup at continuous pixel coordinates, clamped to
    /// the image.
    pub fn depth_at(&self, u: f64, v: f64) -> f64 {
        let (h, w) = self.dims();
        let x = (u.floor().max(0.0) as usize).min(w - 1);
        let y = (v.floor().max(0.0) as usize).min(h - 1);
        self.depth[[y, x]] as f64
    }

    pub fn confidence_at(&self, u: f64, v: f64) -> f64 {
        let (h, w) = self.dims();
        let x = (u.floor().max(0.0) as usize).min(w - 1);
        let y = (v.floor().max(0.0) as usize).min(h - 1);
        self.confidence[[y, x]] as f64
    }
}

/// One text prompt with its object class and score threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub class_name: String,
    pub threshold: f64,
}

/// Ordered prompt list with a many-to-one prompt-to-class mapping and
/// per-prompt score thresholds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptTable {
    prompts: Vec<Prompt>,
    classes: Vec<String>,
    prompt_class: Vec<usize>,
}

impl PromptTable {
    pub fn new(prompts: Vec<Prompt>) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::ConfigError("prompt table is empty".into()));
        }
        let mut classes: Vec<String> = Vec::new();
        let mut prompt_class = Vec::with_capacity(prompts.len());
        for p in &prompts {
            if !(0.0..=1.0).contains(&p.threshold) {
                return Err(Error::ConfigError(format!(
                    "prompt '{}' threshold outside [0, 1]",
                    p.text
                )));
            }
            let idx = match classes.iter().position(|c| c == &p.class_name) {
                Some(i) => i,
                None => {
                    classes.push(p.class_name.clone());
                    classes.len() - 1
                }
            };
            prompt_class.push(idx);
        }
        Ok(PromptTable {
            prompts,
            classes,
            prompt_class,
        })
    }

    /// The urban preset: one or more prompts per class with the per-prompt
    /// thresholds used for score filtering. Barriers and debris carry no
    /// prompts (too many false positives from the 2D detector).
    pub fn nuscenes() -> Self {
        let spec: &[(&str, &str, f64)] = &[
            ("a car", "car", 0.2),
            ("a truck", "truck", 0.2),
            ("a trailer", "trailer", 0.2),
            ("a construction vehicle", "construction_vehicle", 0.2),
            ("a bicycle", "bicycle", 0.15),
            ("a motorcycle", "motorcycle", 0.15),
            ("a bus", "bus", 0.2),
            ("a police vehicle", "emergency_vehicle", 0.2),
            ("an ambulance", "emergency_vehicle", 0.1),
            ("a person", "adult", 0.1),
            ("a child", "child", 0.1),
            ("a stroller", "stroller", 0.2),
            ("a construction worker", "construction_worker", 0.1),
            ("a police officer", "police_officer", 0.1),
            ("a scooter", "personal_mobility", 0.2),
            ("a wheelchair", "personal_mobility", 0.15),
            ("a traffic cone", "traffic_cone", 0.15),
            ("a dolley", "pushable_pullable", 0.15),
            ("a wheel barrow", "pushable_pullable", 0.2),
            ("a shopping cart", "pushable_pullable", 0.15),
            ("a garbage bin", "pushable_pullable", 0.3),
        ];
        PromptTable::new(
            spec.iter()
                .map(|&(text, class, threshold)| Prompt {
                    text: text.into(),
                    class_name: class.into(),
                    threshold,
                })
                .collect(),
        )
        .expect("preset table is valid")
    }

    pub fn prompts(&self) -> &[Prompt] {
        &self.prompts
    }

    pub fn n_prompts(&self) -> usize {
        self.prompts.len()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_of_prompt(&self, prompt_idx: usize) -> usize {
        self.prompt_class[prompt_idx]
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    /// Prompt indices belonging to a class, in table order.
    pub fn prompts_of_class(&self, class_idx: usize) -> Vec<usize> {
        (0..self.prompts.len())
            .filter(|&i| self.prompt_class[i] == class_idx)
            .collect()
    }
}

/// Argmax-prompt class assignment with per-prompt score filtering. Returns
/// `None` when the best affinity falls below its prompt's threshold. Ties
/// resolve to the lowest prompt index.
pub fn assign_prompt_class(det: &PriorDetection, table: &PromptTable) -> Option<(usize, f64)> {
    assert_eq!(
        det.affinities.len(),
        table.n_prompts(),
        "affinities not aligned with prompt table"
    );
    let mut best = 0usize;
    for (i, &a) in det.affinities.iter().enumerate() {
        if a > det.affinities[best] {
            best = i;
        }
    }
    let score = det.affinities[best];
    if score < table.prompts()[best].threshold {
        None
    } else {
        Some((table.class_of_prompt(best), score))
    }
}

fn nms_2d(dets: &[PriorDetection], iou_threshold: f64) -> Vec<PriorDetection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .score()
            .partial_cmp(&dets[i].score())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept
            .iter()
            .all(|&k| dets[k].box2d.iou(&dets[i].box2d) <= iou_threshold)
        {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

/// Shift per-crop detections into full-image coordinates, concatenate and
/// deduplicate with 2D NMS (score = max affinity).
pub fn merge_crops(
    dets_per_crop: &[Vec<PriorDetection>],
    crop_offsets: &[(f64, f64)],
    iou_threshold: f64,
) -> Result<Vec<PriorDetection>> {
    if dets_per_crop.len() != crop_offsets.len() {
        return Err(Error::dim(
            "crop offsets",
            dets_per_crop.len(),
            crop_offsets.len(),
        ));
    }
    let mut all = Vec::new();
    for (crop_idx, (dets, &(du, dv))) in dets_per_crop.iter().zip(crop_offsets).enumerate() {
        for d in dets {
            let mut shifted = d.clone();
            shifted.box2d = d.box2d.translated(du, dv);
            shifted.source_crop = crop_idx;
            all.push(shifted);
        }
    }
    Ok(nms_2d(&all, iou_threshold))
}

/// Image-space feature grid for refinement-stage camera attention: each cell
/// holds the mean token of the priors covering its center, zero elsewhere.
/// The grid reuses [`BevFeatureMap`] with pixel coordinates.
pub fn owl_feature_grid(
    priors: &[PriorDetection],
    image_width: usize,
    image_height: usize,
    stride: usize,
    d_owl: usize,
) -> BevFeatureMap {
    let nx = image_width.div_ceil(stride);
    let ny = image_height.div_ceil(stride);
    let mut map = BevFeatureMap::zeros(
        [0.0, 0.0],
        [stride as f64, stride as f64],
        nx,
        ny,
        d_owl,
    );
    for i in 0..nx {
        for j in 0..ny {
            let (u, v) = map.cell_center(i, j);
            let covering: Vec<&PriorDetection> = priors
                .iter()
                .filter(|p| p.box2d.contains_pixel(u, v))
                .collect();
            if covering.is_empty() {
                continue;
            }
            let mut acc = Array1::<f64>::zeros(d_owl);
            for p in &covering {
                acc = acc + &p.token;
            }
            map.data
                .slice_mut(ndarray::s![i, j, ..])
                .assign(&(acc / covering.len() as f64));
        }
    }
    map
}
