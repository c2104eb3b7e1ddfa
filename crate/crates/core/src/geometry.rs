//! Camera models, box algebra, frustum angles, rotated-box overlap and BEV NMS.
//!
//! Everything here is a pure function over immutable values; all arithmetic
//! is f64. Conventions:
//!
//! * Pixel coordinates are continuous; pixel `(i, j)` covers
//!   `[i, i+1) x [j, j+1)` with its center at `(i+0.5, j+0.5)`.
//! * Unprojection scales the pixel ray so that the camera-frame z equals the
//!   supplied depth (z-depth, not range).
//! * Box headings are normalized to `[-pi, pi)` at construction time.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MIN_DEPTH: f64 = 1e-9;

/// Pinhole camera: intrinsics `K`, world-to-camera rotation `R` and
/// translation `t`, so that `x_cam = R * p_world + t`.
#[derive(Debug, Clone)]
pub struct CameraModel {
    intrinsics: Matrix3<f64>,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    pub image_width: usize,
    pub image_height: usize,
}

impl CameraModel {
    pub fn new(
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        image_width: usize,
        image_height: usize,
    ) -> Result<Self> {
        if image_width == 0 || image_height == 0 {
            return Err(Error::ConfigError("camera image dims must be > 0".into()));
        }
        // K upper-triangular with positive diagonal.
        let k = &intrinsics;
        if k[(1, 0)].abs() > 1e-12 || k[(2, 0)].abs() > 1e-12 || k[(2, 1)].abs() > 1e-12 {
            return Err(Error::ConfigError("intrinsics must be upper-triangular".into()));
        }
        if k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 || k[(2, 2)] <= 0.0 {
            return Err(Error::ConfigError(
                "intrinsics diagonal must be positive".into(),
            ));
        }
        let rtr = rotation.transpose() * rotation;
        if (rtr - Matrix3::identity()).abs().max() > 1e-9 {
            return Err(Error::ConfigError("rotation must be orthonormal".into()));
        }
        Ok(CameraModel {
            intrinsics,
            rotation,
            translation,
            image_width,
            image_height,
        })
    }

    /// Camera at `position` looking along `forward` (world frame), with image
    /// x to the camera's right and image y pointing down. `forward` must not
    /// be parallel to the world z axis.
    pub fn look_at(
        position: Vector3<f64>,
        forward: Vector3<f64>,
        focal: f64,
        image_width: usize,
        image_height: usize,
    ) -> Result<Self> {
        let f = forward
            .try_normalize(1e-12)
            .ok_or_else(|| Error::ConfigError("camera forward is zero".into()))?;
        let up = Vector3::new(0.0, 0.0, 1.0);
        // Image x to the camera's right, image y down, z forward.
        let right = f
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::ConfigError("camera forward parallel to world z".into()))?;
        let down = f.cross(&right);
        // Rows of R are the camera axes expressed in world coordinates.
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), f.transpose()]);
        let translation = -rotation * position;
        let intrinsics = Matrix3::new(
            focal,
            0.0,
            image_width as f64 / 2.0,
            0.0,
            focal,
            image_height as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        );
        CameraModel::new(intrinsics, rotation, translation, image_width, image_height)
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn to_camera_frame(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn contains_pixel(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u < self.image_width as f64 && v >= 0.0 && v < self.image_height as f64
    }
}

/// 7-DoF BEV-oriented box: centroid, size, yaw about world z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: Vector3<f64>,
    /// (l, w, h): extent along the box x axis (heading direction), the box
    /// y axis, and world z.
    pub size: Vector3<f64>,
    pub heading: f64,
}

impl Box3D {
    pub fn new(center: Vector3<f64>, size: Vector3<f64>, heading: f64) -> Result<Self> {
        if !(size.x > 0.0 && size.y > 0.0 && size.z > 0.0) {
            return Err(Error::ConfigError(format!(
                "box sizes must be strictly positive, got {:?}",
                size
            )));
        }
        Ok(Box3D {
            center,
            size,
            heading: normalize_heading(heading),
        })
    }

    pub fn from_xyzlwht(p: [f64; 7]) -> Result<Self> {
        Box3D::new(
            Vector3::new(p[0], p[1], p[2]),
            Vector3::new(p[3], p[4], p[5]),
            p[6],
        )
    }

    pub fn to_xyzlwht(&self) -> [f64; 7] {
        [
            self.center.x,
            self.center.y,
            self.center.z,
            self.size.x,
            self.size.y,
            self.size.z,
            self.heading,
        ]
    }

    pub fn volume(&self) -> f64 {
        self.size.x * self.size.y * self.size.z
    }

    /// BEV footprint corners, counter-clockwise.
    pub fn bev_corners(&self) -> [Vector2<f64>; 4] {
        let (s, c) = self.heading.sin_cos();
        let hl = self.size.x / 2.0;
        let hw = self.size.y / 2.0;
        let cx = self.center.x;
        let cy = self.center.y;
        let rot = |x: f64, y: f64| Vector2::new(cx + c * x - s * y, cy + s * x + c * y);
        [rot(hl, hw), rot(-hl, hw), rot(-hl, -hw), rot(hl, -hw)]
    }

    pub fn z_interval(&self) -> (f64, f64) {
        (
            self.center.z - self.size.z / 2.0,
            self.center.z + self.size.z / 2.0,
        )
    }

    /// Eight corners in world coordinates.
    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let bev = self.bev_corners();
        let (z0, z1) = self.z_interval();
        let mut out = [Vector3::zeros(); 8];
        for (i, c) in bev.iter().enumerate() {
            out[i] = Vector3::new(c.x, c.y, z0);
            out[i + 4] = Vector3::new(c.x, c.y, z1);
        }
        out
    }

    /// True if `p` lies inside the box (inclusive).
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let d = p - self.center;
        let (s, c) = self.heading.sin_cos();
        let lx = c * d.x + s * d.y;
        let ly = -s * d.x + c * d.y;
        lx.abs() <= self.size.x / 2.0 + 1e-12
            && ly.abs() <= self.size.y / 2.0 + 1e-12
            && d.z.abs() <= self.size.z / 2.0 + 1e-12
    }
}

/// Image-space box: center (u, v) and size (w, h) in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub center: Vector2<f64>,
    pub size: Vector2<f64>,
}

impl Box2D {
    pub fn new(center: Vector2<f64>, size: Vector2<f64>) -> Result<Self> {
        if !(size.x > 0.0 && size.y > 0.0) {
            return Err(Error::ConfigError("2D box sizes must be positive".into()));
        }
        if !(center.x.is_finite() && center.y.is_finite()) {
            return Err(Error::ConfigError("2D box center must be finite".into()));
        }
        Ok(Box2D { center, size })
    }

    pub fn from_cxcywh(u: f64, v: f64, w: f64, h: f64) -> Result<Self> {
        Box2D::new(Vector2::new(u, v), Vector2::new(w, h))
    }

    pub fn min(&self) -> Vector2<f64> {
        self.center - self.size / 2.0
    }

    pub fn max(&self) -> Vector2<f64> {
        self.center + self.size / 2.0
    }

    pub fn area(&self) -> f64 {
        self.size.x * self.size.y
    }

    pub fn contains_pixel(&self, u: f64, v: f64) -> bool {
        let mn = self.min();
        let mx = self.max();
        u >= mn.x && u <= mx.x && v >= mn.y && v <= mx.y
    }

    pub fn translated(&self, du: f64, dv: f64) -> Box2D {
        Box2D {
            center: self.center + Vector2::new(du, dv),
            size: self.size,
        }
    }

    pub fn iou(&self, other: &Box2D) -> f64 {
        let ix = (self.max().x.min(other.max().x) - self.min().x.max(other.min().x)).max(0.0);
        let iy = (self.max().y.min(other.max().y) - self.min().y.max(other.min().y)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Angles from the camera's optical axis to a box center, plus depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrustumAngles {
    pub phi_u: f64,
    pub phi_v: f64,
    pub depth: f64,
}

pub fn normalize_heading(mut theta: f64) -> f64 {
    while theta >= std::f64::consts::PI {
        theta -= 2.0 * std::f64::consts::PI;
    }
    while theta < -std::f64::consts::PI {
        theta += 2.0 * std::f64::consts::PI;
    }
    theta
}

/// Project a world point to pixel coordinates, returning (u, v, depth).
pub fn project(cam: &CameraModel, p: &Vector3<f64>) -> Result<(f64, f64, f64)> {
    let x_cam = cam.to_camera_frame(p);
    if x_cam.z <= MIN_DEPTH {
        return Err(Error::NonPositiveDepth(x_cam.z));
    }
    let h = cam.intrinsics() * x_cam;
    Ok((h.x / h.z, h.y / h.z, x_cam.z))
}

/// Unproject a pixel with depth back to the reference frame. The pixel ray
/// is scaled so that the camera-frame z equals `d`.
pub fn unproject(cam: &CameraModel, u: f64, v: f64, d: f64) -> Result<Vector3<f64>> {
    if d <= 0.0 {
        return Err(Error::NonPositiveDepth(d));
    }
    let k_inv = cam
        .intrinsics()
        .try_inverse()
        .expect("upper-triangular K with positive diagonal is invertible");
    let ray = k_inv * Vector3::new(u, v, 1.0);
    let x_cam = ray * (d / ray.z);
    Ok(cam.rotation().transpose() * (x_cam - cam.translation()))
}

/// Camera-frame angles `(arctan(x/z), arctan(y/z))` and depth of a box center.
pub fn frustum_angles(cam: &CameraModel, b: &Box3D) -> Result<FrustumAngles> {
    let c = cam.to_camera_frame(&b.center);
    if c.z <= MIN_DEPTH {
        return Err(Error::NonPositiveDepth(c.z));
    }
    Ok(FrustumAngles {
        phi_u: (c.x / c.z).atan(),
        phi_v: (c.y / c.z).atan(),
        depth: c.z,
    })
}

/// Hard frustum test between a detection and a ground-truth box: the angle
/// difference must stay under `alpha_phi` and the camera-frame depth gap
/// under `alpha_z`. Boxes behind the camera never pass.
pub fn in_frustum(
    cam: &CameraModel,
    det: &Box3D,
    gt: &Box3D,
    alpha_phi: f64,
    alpha_z: f64,
) -> bool {
    let (fd, fg) = match (frustum_angles(cam, det), frustum_angles(cam, gt)) {
        (Ok(a), Ok(b)) => (a, b),
        _ => return false,
    };
    let dphi = ((fd.phi_u - fg.phi_u).powi(2) + (fd.phi_v - fg.phi_v).powi(2)).sqrt();
    dphi < alpha_phi && (fd.depth - fg.depth).abs() < alpha_z
}

/// Sutherland-Hodgman clip of a convex polygon against the half-planes of a
/// convex clip polygon (counter-clockwise).
fn clip_polygon(subject: &[Vector2<f64>], clip: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let mut output: Vec<Vector2<f64>> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let edge = b - a;
        // Tolerance keeps on-edge vertices (self-intersection, shared edges)
        // from being clipped by rounding noise.
        let inside = |p: &Vector2<f64>| edge.x * (p.y - a.y) - edge.y * (p.x - a.x) >= -1e-9;
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = inside(&cur);
            let prev_in = inside(&prev);
            if cur_in {
                if !prev_in {
                    output.push(intersect_lines(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(intersect_lines(prev, cur, a, b));
            }
        }
    }
    output
}

fn intersect_lines(
    p1: Vector2<f64>,
    p2: Vector2<f64>,
    a: Vector2<f64>,
    b: Vector2<f64>,
) -> Vector2<f64> {
    let d1 = p2 - p1;
    let d2 = b - a;
    let denom = d1.x * d2.y - d1.y * d2.x;
    if denom.abs() < 1e-30 {
        return p1;
    }
    let t = ((a.x - p1.x) * d2.y - (a.y - p1.y) * d2.x) / denom;
    p1 + d1 * t
}

fn shoelace_area(poly: &[Vector2<f64>]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        acc += p.x * q.y - q.x * p.y;
    }
    (acc / 2.0).abs()
}

/// BEV intersection area of two oriented boxes (polygon clipping + shoelace).
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let poly = clip_polygon(&a.bev_corners(), &b.bev_corners());
    let area = shoelace_area(&poly);
    if area < 1e-12 {
        0.0
    } else {
        area
    }
}

/// Rotated-rectangle BEV IoU, ignoring z.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection_area(a, b);
    let union = a.size.x * a.size.y + b.size.x * b.size.y - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// 3D generalized IoU. Intersection is BEV polygon overlap times z-interval
/// overlap; the enclosing volume is the smallest axis-aligned 3D box covering
/// both boxes. With an axis-aligned enclosure, identical boxes reach exactly
/// 1.0 only when their footprint is axis-aligned; a rotated box leaves slack
/// in its own enclosure.
pub fn giou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let bev_inter = bev_intersection_area(a, b);
    let (az0, az1) = a.z_interval();
    let (bz0, bz1) = b.z_interval();
    let z_overlap = (az1.min(bz1) - az0.max(bz0)).max(0.0);
    let inter = bev_inter * z_overlap;
    let union = a.volume() + b.volume() - inter;

    let mut min = Vector3::new(f64::INFINITY, f64::INFINITY, az0.min(bz0));
    let mut max = Vector3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, az1.max(bz1));
    for c in a.bev_corners().iter().chain(b.bev_corners().iter()) {
        min.x = min.x.min(c.x);
        min.y = min.y.min(c.y);
        max.x = max.x.max(c.x);
        max.y = max.y.max(c.y);
    }
    let enclosing = (max.x - min.x) * (max.y - min.y) * (max.z - min.z);

    let iou = inter / union;
    if enclosing <= 0.0 {
        return iou;
    }
    iou - (enclosing - union) / enclosing
}

/// Greedy descending-score BEV NMS. Returns the kept indices sorted by score
/// descending; no two kept boxes overlap more than `iou_threshold` in BEV.
pub fn nms_bev(boxes: &[(Box3D, f64)], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    // Ties broken by index so the result is deterministic.
    order.sort_by(|&i, &j| {
        boxes[j].1
            .partial_cmp(&boxes[i].1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept
            .iter()
            .any(|&k| bev_iou(&boxes[k].0, &boxes[i].0) > iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}
