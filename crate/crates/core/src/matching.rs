//! Set matching between detections and ground truths: cost matrix with the
//! hard frustum constraint, Hungarian assignment, box regression loss,
//! sigmoid focal classification loss and total loss assembly.

use ndarray::Array1;

use crate::geometry::{giou_3d, in_frustum, Box3D, CameraModel};

/// Sentinel standing in for infinite cost inside the Hungarian solver;
/// larger than any finite cost sum that can occur here (costs are O(100))
/// while keeping the potentials arithmetic well inside f64 precision.
/// Pairs at or above it are discarded after assignment.
pub const INF_COST: f64 = 1e9;

/// Row-major N x M matching costs; row = detection, column = ground truth.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    data: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl CostMatrix {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        CostMatrix { data, rows, cols }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn is_infinite(&self, i: usize, j: usize) -> bool {
        self.get(i, j) >= INF_COST
    }
}

/// One-to-one assignment result plus leftovers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// (detection index, ground-truth index), sorted by detection index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_detections: Vec<usize>,
    pub unmatched_ground_truths: Vec<usize>,
}

impl MatchResult {
    pub fn total_cost(&self, c: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(i, j)| c.get(i, j)).sum()
    }
}

/// Matching and loss hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    /// GIoU and L2 weights of the matching cost.
    pub match_giou: f64,
    pub match_l2: f64,
    /// GIoU, centroid-L1 and dimension-L1 weights of the box loss.
    pub loss_giou: f64,
    pub loss_xyz: f64,
    pub loss_lwh: f64,
    pub focal_gamma: f64,
    /// `None` disables the alpha weighting entirely.
    pub focal_alpha: Option<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            match_giou: 1.0,
            match_l2: 0.2,
            loss_giou: 1.0,
            loss_xyz: 0.2,
            loss_lwh: 0.04,
            focal_gamma: 2.0,
            focal_alpha: Some(0.25),
        }
    }
}

/// Optional frustum gate applied to every (detection, ground-truth) pair.
#[derive(Debug, Clone, Copy)]
pub struct FrustumContext<'a> {
    pub cam: &'a CameraModel,
    pub alpha_phi: f64,
    pub alpha_z: f64,
}

fn loc_l2(a: &Box3D, b: &Box3D) -> f64 {
    let dc = a.center - b.center;
    let ds = a.size - b.size;
    (dc.norm_squared() + ds.norm_squared()).sqrt()
}

/// Matching cost `-match_giou * GIoU + match_l2 * ||Loc - Loc*||_2`, with
/// pairs failing the frustum gate forced to infinity.
pub fn cost_matrix(
    dets: &[Box3D],
    gts: &[Box3D],
    w: &LossWeights,
    frustum_ctx: Option<FrustumContext<'_>>,
) -> CostMatrix {
    CostMatrix::from_fn(dets.len(), gts.len(), |i, j| {
        if let Some(ctx) = frustum_ctx {
            if !in_frustum(ctx.cam, &dets[i], &gts[j], ctx.alpha_phi, ctx.alpha_z) {
                return f64::INFINITY;
            }
        }
        -w.match_giou * giou_3d(&dets[i], &gts[j]) + w.match_l2 * loc_l2(&dets[i], &gts[j])
    })
}

/// Minimum-total-cost one-to-one assignment over `min(N, M)` pairs
/// (Kuhn-Munkres with potentials on a sentinel-padded square matrix).
/// Pairs whose original cost is infinite are discarded afterwards.
pub fn hungarian(c: &CostMatrix) -> MatchResult {
    let n = c.rows;
    let m = c.cols;
    let dim = n.max(m);
    if n == 0 || m == 0 {
        return MatchResult {
            pairs: Vec::new(),
            unmatched_detections: (0..n).collect(),
            unmatched_ground_truths: (0..m).collect(),
        };
    }

    // Square cost with sentinel padding; infinities also become the sentinel
    // so the solver prefers any finite pairing over them.
    let cost = |i: usize, j: usize| -> f64 {
        if i < n && j < m {
            let v = c.get(i, j);
            if v.is_finite() {
                v.min(INF_COST)
            } else {
                INF_COST
            }
        } else {
            INF_COST
        }
    };

    // Potentials-based O(dim^3) assignment; 1-based bookkeeping arrays.
    let mut u = vec![0.0f64; dim + 1];
    let mut v = vec![0.0f64; dim + 1];
    let mut way = vec![0usize; dim + 1];
    let mut match_col = vec![0usize; dim + 1]; // column -> row (1-based, 0 = free)
    for i in 1..=dim {
        match_col[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; dim + 1];
        let mut used = vec![false; dim + 1];
        loop {
            used[j0] = true;
            let i0 = match_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=dim {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=dim {
                if used[j] {
                    u[match_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if match_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            match_col[j0] = match_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs = Vec::new();
    let mut det_matched = vec![false; n];
    let mut gt_matched = vec![false; m];
    for j in 1..=dim {
        let i = match_col[j];
        if i == 0 {
            continue;
        }
        let (row, col) = (i - 1, j - 1);
        if row < n && col < m && cost(row, col) < INF_COST {
            pairs.push((row, col));
            det_matched[row] = true;
            gt_matched[col] = true;
        }
    }
    pairs.sort_unstable();
    MatchResult {
        pairs,
        unmatched_detections: (0..n).filter(|&i| !det_matched[i]).collect(),
        unmatched_ground_truths: (0..m).filter(|&j| !gt_matched[j]).collect(),
    }
}

/// Box regression loss for a matched pair:
/// `-loss_giou * GIoU + loss_xyz * L1(centroid) + loss_lwh * L1(dims)`.
pub fn box_loss(det: &Box3D, gt: &Box3D, w: &LossWeights) -> f64 {
    let dc = det.center - gt.center;
    let ds = det.size - gt.size;
    -w.loss_giou * giou_3d(det, gt)
        + w.loss_xyz * (dc.x.abs() + dc.y.abs() + dc.z.abs())
        + w.loss_lwh * (ds.x.abs() + ds.y.abs() + ds.z.abs())
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-class sigmoid focal loss summed over classes, together with its
/// analytic gradient with respect to the logits.
pub fn focal_loss(
    logits: &Array1<f64>,
    target: &Array1<f64>,
    gamma: f64,
    alpha: Option<f64>,
) -> (f64, Array1<f64>) {
    assert_eq!(logits.len(), target.len(), "logit/target length mismatch");
    let mut loss = 0.0;
    let mut grad = Array1::zeros(logits.len());
    for (c, (&z, &t)) in logits.iter().zip(target.iter()).enumerate() {
        debug_assert!(t == 0.0 || t == 1.0);
        let s = sigmoid(z);
        let ln_s = -softplus(-z);
        let ln_1ms = -softplus(z);
        if t > 0.5 {
            let a = alpha.unwrap_or(1.0);
            let focus = (1.0 - s).powf(gamma);
            loss += -a * focus * ln_s;
            // d/dz [-a (1-s)^g ln s] = a (1-s)^g (g s ln s - (1-s))
            grad[c] = a * focus * (gamma * s * ln_s - (1.0 - s));
        } else {
            let a = alpha.map(|a| 1.0 - a).unwrap_or(1.0);
            let focus = s.powf(gamma);
            loss += -a * focus * ln_1ms;
            grad[c] = a * focus * (s - gamma * (1.0 - s) * ln_1ms);
        }
    }
    (loss, grad)
}

/// Loss breakdown returned by [`total_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub box_term: f64,
    pub class_term: f64,
    pub matched: usize,
}

/// Matched-pair box loss averaged over matches, plus the focal
/// classification loss averaged over all detections. Unmatched detections
/// are supervised against the all-zero class target.
pub fn total_loss(
    dets: &[Box3D],
    det_logits: &[Array1<f64>],
    gts: &[Box3D],
    gt_classes: &[usize],
    n_classes: usize,
    w: &LossWeights,
    frustum_ctx: Option<FrustumContext<'_>>,
) -> LossBreakdown {
    assert_eq!(dets.len(), det_logits.len());
    assert_eq!(gts.len(), gt_classes.len());
    let c = cost_matrix(dets, gts, w, frustum_ctx);
    let result = hungarian(&c);

    let mut box_term = 0.0;
    let mut matched_gt_of_det = vec![None; dets.len()];
    for &(i, j) in &result.pairs {
        box_term += box_loss(&dets[i], &gts[j], w);
        matched_gt_of_det[i] = Some(j);
    }
    let matched = result.pairs.len();
    if matched > 0 {
        box_term /= matched as f64;
    } else {
        box_term = 0.0;
    }

    let mut class_term = 0.0;
    for (i, logits) in det_logits.iter().enumerate() {
        let mut target = Array1::zeros(n_classes);
        if let Some(j) = matched_gt_of_det[i] {
            target[gt_classes[j]] = 1.0;
        }
        class_term += focal_loss(logits, &target, w.focal_gamma, w.focal_alpha).0;
    }
    if !dets.is_empty() {
        class_term /= dets.len() as f64;
    }

    LossBreakdown {
        total: box_term + class_term,
        box_term,
        class_term,
        matched,
    }
}
