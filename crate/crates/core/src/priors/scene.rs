//! Synthetic scene generation: ground-truth boxes, LiDAR points on box
//! surfaces and the ground plane, analytically rendered depth maps, and
//! noisy mock 2D detections with class-conditional token features.
//!
//! Everything is driven by a single seeded RNG, so a (config, seed) pair
//! yields a bit-identical scene every time.

use nalgebra::Vector3;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, Box3D, CameraModel};
use crate::priors::{DepthMap, PriorDetection, PromptTable};

/// How the depth map reports object depth: the camera-frame z of the struck
/// box surface, or the z of the struck box's centroid (an idealized
/// object-level depth, useful for geometric end-to-end checks).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DepthMode {
    #[default]
    Surface,
    Centroid,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub count: usize,
    /// Placement range for box centers: [[x_min, x_max], [y_min, y_max]].
    pub center_range: [[f64; 2]; 2],
    pub size_min: [f64; 3],
    pub size_max: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraConfig {
    pub position: [f64; 3],
    pub forward: [f64; 3],
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarConfig {
    pub points_per_box: usize,
    pub ground_points: usize,
    /// Half-extent of the ground patch around the origin.
    pub ground_half_extent: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        LidarConfig {
            points_per_box: 400,
            ground_points: 1000,
            ground_half_extent: 54.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct NoiseConfig {
    /// Std-dev of the 2D box center/size jitter, pixels.
    pub box_jitter_px: f64,
    pub depth_bias: f64,
    pub depth_noise: f64,
    /// Expected number of false-positive priors per camera (Poisson).
    pub fp_rate: f64,
    /// Probability of dropping each visible ground truth (Bernoulli).
    pub fn_rate: f64,
}

impl NoiseConfig {
    fn validate(&self) -> Result<()> {
        if self.box_jitter_px < 0.0
            || self.depth_noise < 0.0
            || self.fp_rate < 0.0
            || !(0.0..=1.0).contains(&self.fn_rate)
        {
            return Err(Error::ConfigError("negative noise rate".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    pub classes: Vec<ClassSpec>,
    pub cameras: Vec<CameraConfig>,
    #[serde(default)]
    pub lidar: LidarConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub depth_mode: DepthMode,
    /// Minimum BEV center separation between placed boxes.
    #[serde(default = "default_min_separation")]
    pub min_separation: f64,
    /// Token feature dimension of the mock 2D detector.
    #[serde(default = "default_d_owl")]
    pub d_owl: usize,
    /// Seed of the class-conditional token prototypes (fixed across scenes).
    #[serde(default = "default_prototype_seed")]
    pub prototype_seed: u64,
}

fn default_min_separation() -> f64 {
    6.0
}

fn default_d_owl() -> usize {
    32
}

fn default_prototype_seed() -> u64 {
    7
}

impl SceneConfig {
    pub fn validate(&self, table: &PromptTable) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::ConfigError("no classes configured".into()));
        }
        for c in &self.classes {
            if table.class_index(&c.name).is_none() {
                return Err(Error::ConfigError(format!(
                    "class '{}' has no prompt in the table",
                    c.name
                )));
            }
            for a in 0..2 {
                if c.center_range[a][1] <= c.center_range[a][0] {
                    return Err(Error::ConfigError(format!(
                        "class '{}': empty center range",
                        c.name
                    )));
                }
            }
            for a in 0..3 {
                if c.size_min[a] <= 0.0 || c.size_max[a] < c.size_min[a] {
                    return Err(Error::ConfigError(format!(
                        "class '{}': bad size range",
                        c.name
                    )));
                }
            }
        }
        if self.cameras.is_empty() {
            return Err(Error::ConfigError("no cameras configured".into()));
        }
        if self.d_owl == 0 {
            return Err(Error::ConfigError("d_owl must be positive".into()));
        }
        self.noise.validate()
    }
}

/// One annotated object.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub box3d: Box3D,
    pub class: usize,
}

/// A fully rendered synthetic scene.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub ground_truth: Vec<GroundTruth>,
    pub lidar_points: Vec<Vector3<f64>>,
    pub cameras: Vec<CameraModel>,
    pub depth_maps: Vec<DepthMap>,
    /// Raw (unfiltered) mock detections per camera.
    pub priors: Vec<Vec<PriorDetection>>,
    pub seed: u64,
}

// Distributions derived from the uniform stream; hand-rolled so the byte
// stream consumed per sample is fixed.
pub(crate) fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn sample_poisson(rng: &mut ChaCha8Rng, lambda: f64) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    let l = (-lambda).exp();
    let mut k = 0usize;
    let mut p = 1.0;
    loop {
        p *= rng.random::<f64>();
        if p <= l {
            return k;
        }
        k += 1;
    }
}

/// Class-conditional token prototypes, fixed by `prototype_seed` so the same
/// class looks the same across scenes.
pub fn token_prototypes(table: &PromptTable, d_owl: usize, prototype_seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(prototype_seed);
    Array2::from_shape_fn((table.n_classes(), d_owl), |_| sample_normal(&mut rng))
}

fn place_boxes(
    config: &SceneConfig,
    table: &PromptTable,
    rng: &mut ChaCha8Rng,
) -> Vec<GroundTruth> {
    let mut out: Vec<GroundTruth> = Vec::new();
    for spec in &config.classes {
        let class = table.class_index(&spec.name).expect("validated");
        for _ in 0..spec.count {
            // Rejection sampling against the separation constraint.
            let mut placed = None;
            for _ in 0..64 {
                let x = rng.random_range(spec.center_range[0][0]..spec.center_range[0][1]);
                let y = rng.random_range(spec.center_range[1][0]..spec.center_range[1][1]);
                let ok = out.iter().all(|g| {
                    let d = (g.box3d.center.x - x).hypot(g.box3d.center.y - y);
                    d >= config.min_separation
                });
                if ok {
                    placed = Some((x, y));
                    break;
                }
            }
            let Some((x, y)) = placed else {
                continue; // crowded config: place fewer boxes
            };
            let size = Vector3::new(
                rng.random_range(spec.size_min[0]..=spec.size_max[0]),
                rng.random_range(spec.size_min[1]..=spec.size_max[1]),
                rng.random_range(spec.size_min[2]..=spec.size_max[2]),
            );
            let heading = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let center = Vector3::new(x, y, size.z / 2.0);
            out.push(GroundTruth {
                box3d: Box3D::new(center, size, heading).expect("positive sizes"),
                class,
            });
        }
    }
    out
}

fn sample_surface_points(
    b: &Box3D,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vector3<f64>> {
    let (l, w, h) = (b.size.x, b.size.y, b.size.z);
    // Face areas: +-x sides (w*h), +-y sides (l*h), top/bottom (l*w).
    let areas = [w * h, w * h, l * h, l * h, l * w, l * w];
    let total: f64 = areas.iter().sum();
    let (s, c) = b.heading.sin_cos();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut pick = rng.random::<f64>() * total;
        let mut face = 0usize;
        for (i, a) in areas.iter().enumerate() {
            if pick < *a {
                face = i;
                break;
            }
            pick -= a;
        }
        let u = rng.random::<f64>() - 0.5;
        let v = rng.random::<f64>() - 0.5;
        let local = match face {
            0 => Vector3::new(l / 2.0, u * w, v * h),
            1 => Vector3::new(-l / 2.0, u * w, v * h),
            2 => Vector3::new(u * l, w / 2.0, v * h),
            3 => Vector3::new(u * l, -w / 2.0, v * h),
            4 => Vector3::new(u * l, v * w, h / 2.0),
            _ => Vector3::new(u * l, v * w, -h / 2.0),
        };
        let world = Vector3::new(
            b.center.x + c * local.x - s * local.y,
            b.center.y + s * local.x + c * local.y,
            b.center.z + local.z,
        );
        out.push(world);
    }
    out
}

/// Slab-method ray / oriented-box intersection. The ray is
/// `origin + t * dir`; returns the entry parameter when the ray hits.
pub fn ray_box_intersection(origin: &Vector3<f64>, dir: &Vector3<f64>, b: &Box3D) -> Option<f64> {
    let (s, c) = b.heading.sin_cos();
    let rel = origin - b.center;
    let o = Vector3::new(c * rel.x + s * rel.y, -s * rel.x + c * rel.y, rel.z);
    let d = Vector3::new(c * dir.x + s * dir.y, -s * dir.x + c * dir.y, dir.z);
    let half = b.size / 2.0;
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    for a in 0..3 {
        let (oa, da, ha) = (o[a], d[a], half[a]);
        if da.abs() < 1e-15 {
            if oa.abs() > ha {
                return None;
            }
            continue;
        }
        let t1 = (-ha - oa) / da;
        let t2 = (ha - oa) / da;
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        t_enter = t_enter.max(lo);
        t_exit = t_exit.min(hi);
        if t_enter > t_exit {
            return None;
        }
    }
    if t_exit < 0.0 {
        return None;
    }
    Some(t_enter.max(0.0))
}

fn render_depth_map(
    cam: &CameraModel,
    boxes: &[GroundTruth],
    mode: DepthMode,
    noise: &NoiseConfig,
    rng: &mut ChaCha8Rng,
) -> DepthMap {
    let (w, h) = (cam.image_width, cam.image_height);
    let mut depth = Array2::<f32>::zeros((h, w));
    let mut confidence = Array2::<f32>::zeros((h, w));
    let cam_origin = -(cam.rotation().transpose() * cam.translation());
    let k_inv = cam.intrinsics().try_inverse().expect("invertible K");
    for py in 0..h {
        for px in 0..w {
            let pixel = Vector3::new(px as f64 + 0.5, py as f64 + 0.5, 1.0);
            let ray_cam = k_inv * pixel;
            let dir = cam.rotation().transpose() * ray_cam;
            let mut best: Option<(f64, usize)> = None;
            for (gi, g) in boxes.iter().enumerate() {
                if let Some(t) = ray_box_intersection(&cam_origin, &dir, &g.box3d) {
                    if best.map_or(true, |(bt, _)| t < bt) {
                        best = Some((t, gi));
                    }
                }
            }
            let Some((t, gi)) = best else {
                continue; // no hit: depth 0, confidence 0
            };
            let mut z = match mode {
                DepthMode::Surface => {
                    let hit = cam_origin + dir * t;
                    cam.to_camera_frame(&hit).z
                }
                DepthMode::Centroid => cam.to_camera_frame(&boxes[gi].box3d.center).z,
            };
            if noise.depth_bias != 0.0 || noise.depth_noise > 0.0 {
                z += noise.depth_bias + noise.depth_noise * sample_normal(rng);
            }
            if z <= 0.0 {
                continue;
            }
            depth[[py, px]] = z as f32;
            confidence[[py, px]] = 1.0;
        }
    }
    DepthMap { depth, confidence }
}

/// Projected 2D bounding box of a 3D box, or `None` if it is not usably
/// visible (a corner behind the camera, or the footprint missing the image).
fn project_box(cam: &CameraModel, b: &Box3D) -> Option<(f64, f64, geometry::Box2D)> {
    let (cu, cv, _) = geometry::project(cam, &b.center).ok()?;
    let mut min_u = f64::INFINITY;
    let mut max_u = f64::NEG_INFINITY;
    let mut min_v = f64::INFINITY;
    let mut max_v = f64::NEG_INFINITY;
    for corner in b.corners() {
        let (u, v, _) = geometry::project(cam, &corner).ok()?;
        min_u = min_u.min(u);
        max_u = max_u.max(u);
        min_v = min_v.min(v);
        max_v = max_v.max(v);
    }
    if !cam.contains_pixel(cu, cv) {
        return None;
    }
    // Clip the footprint to the image.
    let min_u = min_u.max(0.0);
    let max_u = max_u.min(cam.image_width as f64);
    let min_v = min_v.max(0.0);
    let max_v = max_v.min(cam.image_height as f64);
    if max_u - min_u < 1.0 || max_v - min_v < 1.0 {
        return None;
    }
    let box2d = geometry::Box2D::from_cxcywh(
        (min_u + max_u) / 2.0,
        (min_v + max_v) / 2.0,
        max_u - min_u,
        max_v - min_v,
    )
    .ok()?;
    Some((cu, cv, box2d))
}

fn affinities_for_class(
    class: usize,
    table: &PromptTable,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    // Background affinities stay below every threshold; the first prompt of
    // the class peaks above its own threshold.
    let mut aff: Vec<f64> = (0..table.n_prompts())
        .map(|_| rng.random_range(0.0..0.05))
        .collect();
    let prompt = table.prompts_of_class(class)[0];
    let threshold = table.prompts()[prompt].threshold;
    aff[prompt] = threshold + rng.random_range(0.1..0.5) * (1.0 - threshold);
    aff
}

fn generate_priors(
    cam: &CameraModel,
    boxes: &[GroundTruth],
    table: &PromptTable,
    prototypes: &Array2<f64>,
    config: &SceneConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<PriorDetection> {
    let noise = &config.noise;
    let mut out = Vec::new();
    for g in boxes {
        let Some((cu, cv, bbox)) = project_box(cam, &g.box3d) else {
            continue;
        };
        if noise.fn_rate > 0.0 && rng.random::<f64>() < noise.fn_rate {
            continue;
        }
        let j = noise.box_jitter_px;
        let center_u = cu + j * sample_normal(rng);
        let center_v = cv + j * sample_normal(rng);
        let size_u = (bbox.size.x + j * sample_normal(rng)).max(2.0);
        let size_v = (bbox.size.y + j * sample_normal(rng)).max(2.0);
        let Ok(box2d) = geometry::Box2D::from_cxcywh(center_u, center_v, size_u, size_v) else {
            continue;
        };
        let token = Array1::from_shape_fn(config.d_owl, |i| {
            prototypes[[g.class, i]] + 0.1 * sample_normal(rng)
        });
        out.push(PriorDetection {
            box2d,
            token,
            affinities: affinities_for_class(g.class, table, rng),
            source_crop: 0,
        });
    }
    // Poisson false positives with confident affinities on a random class.
    let n_fp = sample_poisson(rng, noise.fp_rate);
    for _ in 0..n_fp {
        let class = rng.random_range(0..table.n_classes());
        let w = rng.random_range(8.0..cam.image_width as f64 / 4.0);
        let h = rng.random_range(8.0..cam.image_height as f64 / 4.0);
        let u = rng.random_range(w / 2.0..cam.image_width as f64 - w / 2.0);
        let v = rng.random_range(h / 2.0..cam.image_height as f64 - h / 2.0);
        let token = Array1::from_shape_fn(config.d_owl, |i| {
            prototypes[[class, i]] + 0.3 * sample_normal(rng)
        });
        out.push(PriorDetection {
            box2d: geometry::Box2D::from_cxcywh(u, v, w, h).expect("positive sizes"),
            token,
            affinities: affinities_for_class(class, table, rng),
            source_crop: 0,
        });
    }
    out
}

/// Generate a deterministic synthetic scene.
pub fn generate_scene(
    config: &SceneConfig,
    table: &PromptTable,
    seed: u64,
) -> Result<SyntheticScene> {
    config.validate(table)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prototypes = token_prototypes(table, config.d_owl, config.prototype_seed);

    let ground_truth = place_boxes(config, table, &mut rng);

    let mut lidar_points = Vec::new();
    for g in &ground_truth {
        lidar_points.extend(sample_surface_points(
            &g.box3d,
            config.lidar.points_per_box,
            &mut rng,
        ));
    }
    let ext = config.lidar.ground_half_extent;
    for _ in 0..config.lidar.ground_points {
        lidar_points.push(Vector3::new(
            rng.random_range(-ext..ext),
            rng.random_range(-ext..ext),
            0.0,
        ));
    }

    let mut cameras = Vec::new();
    for cc in &config.cameras {
        cameras.push(CameraModel::look_at(
            Vector3::new(cc.position[0], cc.position[1], cc.position[2]),
            Vector3::new(cc.forward[0], cc.forward[1], cc.forward[2]),
            cc.focal,
            cc.width,
            cc.height,
        )?);
    }

    let mut depth_maps = Vec::new();
    let mut priors = Vec::new();
    for cam in &cameras {
        depth_maps.push(render_depth_map(
            cam,
            &ground_truth,
            config.depth_mode,
            &config.noise,
            &mut rng,
        ));
        priors.push(generate_priors(
            cam,
            &ground_truth,
            table,
            &prototypes,
            config,
            &mut rng,
        ));
    }

    Ok(SyntheticScene {
        ground_truth,
        lidar_points,
        cameras,
        depth_maps,
        priors,
        seed,
    })
}
