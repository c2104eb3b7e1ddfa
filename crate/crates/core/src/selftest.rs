//! Built-in oracle suites behind the CLI `selftest` mode: each check pits an
//! implementation against an independent brute-force or closed-form
//! reference and reports pass/fail with a detail line. These references are
//! deliberately naive; they exist to disagree loudly, not to be fast.

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, AttentionWeights};
use crate::geometry::{self, Box3D, CameraModel};
use crate::matching::{self, CostMatrix, INF_COST};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        CheckResult {
            name,
            passed,
            detail,
        }
    }
}

fn random_camera(rng: &mut ChaCha8Rng) -> CameraModel {
    let yaw: f64 = rng.random_range(-3.0..3.0);
    let (s, c) = yaw.sin_cos();
    let rot = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
    let t = Vector3::new(
        rng.random_range(-5.0..5.0),
        rng.random_range(-5.0..5.0),
        rng.random_range(-5.0..5.0),
    );
    let f = rng.random_range(50.0..500.0);
    let k = Matrix3::new(
        f,
        0.0,
        rng.random_range(100.0..500.0),
        0.0,
        f,
        rng.random_range(100.0..400.0),
        0.0,
        0.0,
        1.0,
    );
    CameraModel::new(k, rot, t, 1000, 800).expect("valid random camera")
}

pub fn random_box(rng: &mut ChaCha8Rng, span: f64, size_lo: f64, size_hi: f64) -> Box3D {
    Box3D::new(
        Vector3::new(
            rng.random_range(-span..span),
            rng.random_range(-span..span),
            rng.random_range(-span..span),
        ),
        Vector3::new(
            rng.random_range(size_lo..size_hi),
            rng.random_range(size_lo..size_hi),
            rng.random_range(size_lo..size_hi),
        ),
        rng.random_range(-4.0..4.0),
    )
    .expect("positive sizes")
}

/// Round-trip identity of project/unproject over random cameras and rays.
pub fn check_round_trip(pairs: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0.0f64;
    for _ in 0..pairs {
        let cam = random_camera(&mut rng);
        let (u, v, d) = (
            rng.random_range(0.0..1000.0),
            rng.random_range(0.0..800.0),
            rng.random_range(0.1..80.0),
        );
        let p = match geometry::unproject(&cam, u, v, d) {
            Ok(p) => p,
            Err(e) => return CheckResult::new("round_trip", false, format!("unproject: {e}")),
        };
        match geometry::project(&cam, &p) {
            Ok((u2, v2, d2)) => {
                max_err = max_err
                    .max((u - u2).abs())
                    .max((v - v2).abs())
                    .max((d - d2).abs());
            }
            Err(e) => return CheckResult::new("round_trip", false, format!("project: {e}")),
        }
        let q = Vector3::new(
            rng.random_range(-20.0..20.0),
            rng.random_range(-20.0..20.0),
            rng.random_range(-20.0..20.0),
        );
        if let Ok((u3, v3, d3)) = geometry::project(&cam, &q) {
            let back = geometry::unproject(&cam, u3, v3, d3).expect("positive depth");
            max_err = max_err.max((q - back).norm());
        }
    }
    CheckResult::new(
        "round_trip",
        max_err < 1e-9,
        format!("{pairs} pairs, max error {max_err:.3e} (tolerance 1e-9)"),
    )
}

/// Monte-Carlo GIoU estimate: rejection sampling inside the overlap of the
/// two axis-aligned bounds, analytic volumes everywhere else.
pub fn monte_carlo_giou(a: &Box3D, b: &Box3D, samples: usize, rng: &mut ChaCha8Rng) -> f64 {
    let bounds = |bx: &Box3D| {
        let cs = bx.bev_corners();
        let (z0, z1) = bx.z_interval();
        let mut mn = Vector3::new(f64::INFINITY, f64::INFINITY, z0);
        let mut mx = Vector3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, z1);
        for c in &cs {
            mn.x = mn.x.min(c.x);
            mn.y = mn.y.min(c.y);
            mx.x = mx.x.max(c.x);
            mx.y = mx.y.max(c.y);
        }
        (mn, mx)
    };
    let (amin, amax) = bounds(a);
    let (bmin, bmax) = bounds(b);
    let mn = Vector3::new(amin.x.max(bmin.x), amin.y.max(bmin.y), amin.z.max(bmin.z));
    let mx = Vector3::new(amax.x.min(bmax.x), amax.y.min(bmax.y), amax.z.min(bmax.z));
    let inter = if mx.x > mn.x && mx.y > mn.y && mx.z > mn.z {
        let vol = (mx.x - mn.x) * (mx.y - mn.y) * (mx.z - mn.z);
        let mut hits = 0usize;
        for _ in 0..samples {
            let p = Vector3::new(
                rng.random_range(mn.x..mx.x),
                rng.random_range(mn.y..mx.y),
                rng.random_range(mn.z..mx.z),
            );
            if a.contains(&p) && b.contains(&p) {
                hits += 1;
            }
        }
        vol * hits as f64 / samples as f64
    } else {
        0.0
    };
    let union = a.volume() + b.volume() - inter;
    let enc_min = Vector3::new(amin.x.min(bmin.x), amin.y.min(bmin.y), amin.z.min(bmin.z));
    let enc_max = Vector3::new(amax.x.max(bmax.x), amax.y.max(bmax.y), amax.z.max(bmax.z));
    let c = (enc_max.x - enc_min.x) * (enc_max.y - enc_min.y) * (enc_max.z - enc_min.z);
    inter / union - (c - union) / c
}

pub fn check_giou(pairs: usize, samples_per_pair: usize, tolerance: f64, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Axis-aligned identity is exact; rotated identity carries enclosure
    // slack by the axis-aligned-enclosure convention.
    let ident = Box3D::new(
        Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        ),
        Vector3::new(
            rng.random_range(0.8..3.0),
            rng.random_range(0.8..3.0),
            rng.random_range(0.8..3.0),
        ),
        0.0,
    )
    .expect("positive sizes");
    if (geometry::giou_3d(&ident, &ident) - 1.0).abs() > 1e-12 {
        return CheckResult::new("giou_oracle", false, "identical boxes != 1.0".into());
    }
    let a = Box3D::new(Vector3::zeros(), Vector3::new(1.0, 1.0, 1.0), 0.0).unwrap();
    let b = Box3D::new(Vector3::new(3.0, 0.0, 0.0), Vector3::new(1.0, 1.0, 1.0), 0.0).unwrap();
    if (geometry::giou_3d(&a, &b) + 0.5).abs() > 1e-12 {
        return CheckResult::new("giou_oracle", false, "disjoint cubes != -0.5".into());
    }

    let mut max_err = 0.0f64;
    for _ in 0..pairs {
        let a = random_box(&mut rng, 1.5, 0.8, 3.0);
        let b = random_box(&mut rng, 1.5, 0.8, 3.0);
        let exact = geometry::giou_3d(&a, &b);
        let mc = monte_carlo_giou(&a, &b, samples_per_pair, &mut rng);
        max_err = max_err.max((exact - mc).abs());
    }
    CheckResult::new(
        "giou_oracle",
        max_err <= tolerance,
        format!(
            "{pairs} pairs x {samples_per_pair} samples, max |delta| {max_err:.3e} (tolerance {tolerance:.1e})"
        ),
    )
}

/// Exhaustive minimum assignment cost with the sentinel substitution, for
/// comparison against the Hungarian solver.
pub fn brute_force_assignment_cost(c: &CostMatrix) -> f64 {
    fn recurse(c: &CostMatrix, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        let k = c.rows.min(c.cols);
        let assigned = used.iter().filter(|&&u| u).count();
        if assigned == k {
            *best = best.min(acc);
            return;
        }
        if row == c.rows {
            return;
        }
        let rows_left = c.rows - row;
        if assigned + rows_left > k {
            recurse(c, row + 1, used, acc, best);
        }
        for j in 0..c.cols {
            if used[j] {
                continue;
            }
            used[j] = true;
            recurse(c, row + 1, used, acc + c.get(row, j).min(INF_COST), best);
            used[j] = false;
        }
    }
    let mut best = f64::INFINITY;
    let mut used = vec![false; c.cols];
    recurse(c, 0, &mut used, 0.0, &mut best);
    best
}

pub fn check_hungarian(square: usize, rect: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..square + rect {
        let (n, m) = if case < square { (5, 5) } else { (4, 6) };
        let c = CostMatrix::from_fn(n, m, |_, _| {
            if rng.random::<f64>() < 0.2 {
                f64::INFINITY
            } else {
                rng.random_range(-10.0..10.0)
            }
        });
        let r = matching::hungarian(&c);
        let k = n.min(m);
        let got: f64 = r
            .pairs
            .iter()
            .map(|&(i, j)| c.get(i, j).min(INF_COST))
            .sum::<f64>()
            + (k - r.pairs.len()) as f64 * INF_COST;
        let want = brute_force_assignment_cost(&c);
        let err = (got - want).abs() / want.abs().max(1.0);
        worst = worst.max(err);
        if err > 1e-9 {
            return CheckResult::new(
                "hungarian_oracle",
                false,
                format!("case {case}: cost {got} vs brute force {want}"),
            );
        }
    }
    CheckResult::new(
        "hungarian_oracle",
        true,
        format!(
            "{square} square + {rect} rectangular cases, worst relative gap {worst:.3e}"
        ),
    )
}

/// Naive per-element attention loop.
pub fn mha_reference(
    queries: &Array2<f64>,
    keys: &Array2<f64>,
    values: &Array2<f64>,
    w: &AttentionWeights,
) -> Array2<f64> {
    let n = queries.nrows();
    let m = keys.nrows();
    let l = w.p_q.ncols();
    let d_out = w.p_v.ncols();
    let head_l = l / w.heads;
    let head_v = d_out / w.heads;
    let matmul = |x: &Array2<f64>, p: &Array2<f64>| -> Vec<Vec<f64>> {
        (0..x.nrows())
            .map(|i| {
                (0..p.ncols())
                    .map(|j| (0..x.ncols()).map(|k| x[[i, k]] * p[[k, j]]).sum())
                    .collect()
            })
            .collect()
    };
    let qp = matmul(queries, &w.p_q);
    let kp = matmul(keys, &w.p_k);
    let vp = matmul(values, &w.p_v);
    let mut concat = vec![vec![0.0; d_out]; n];
    for h in 0..w.heads {
        for i in 0..n {
            let mut scores = vec![0.0; m];
            for (j, s) in scores.iter_mut().enumerate() {
                for k in 0..head_l {
                    *s += qp[i][h * head_l + k] * kp[j][h * head_l + k];
                }
                *s /= (head_l as f64).sqrt();
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for j in 0..m {
                for k in 0..head_v {
                    concat[i][h * head_v + k] += exps[j] / denom * vp[j][h * head_v + k];
                }
            }
        }
    }
    let concat = Array2::from_shape_fn((n, d_out), |(i, j)| concat[i][j]);
    concat.dot(&w.w_o)
}

pub fn check_attention(instances: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_diff = 0.0f64;
    let mut max_row_gap = 0.0f64;
    for _ in 0..instances {
        let w = AttentionWeights::seeded(6, 5, 7, 8, 8, 4, &mut rng);
        let q = attention::init_matrix(4, 6, &mut rng);
        let k = attention::init_matrix(9, 5, &mut rng);
        let v = attention::init_matrix(9, 7, &mut rng);
        let (fast, attn) = match attention::mha_detailed(&q, &k, &v, &w) {
            Ok(x) => x,
            Err(e) => return CheckResult::new("attention_oracle", false, format!("{e}")),
        };
        let slow = mha_reference(&q, &k, &v, &w);
        for (a, b) in fast.iter().zip(slow.iter()) {
            max_diff = max_diff.max((a - b).abs());
        }
        for head in &attn {
            for row in head.rows() {
                max_row_gap = max_row_gap.max((row.sum() - 1.0).abs());
            }
        }
        // Permutation invariance of key/value order.
        let perm: Vec<usize> = vec![3, 0, 6, 2, 5, 1, 4, 8, 7];
        let kp = Array2::from_shape_fn((9, 5), |(i, j)| k[[perm[i], j]]);
        let vp = Array2::from_shape_fn((9, 7), |(i, j)| v[[perm[i], j]]);
        let permuted = attention::mha(&q, &kp, &vp, &w).expect("dims ok");
        for (a, b) in fast.iter().zip(permuted.iter()) {
            max_diff = max_diff.max((a - b).abs());
        }
    }
    CheckResult::new(
        "attention_oracle",
        max_diff < 1e-10 && max_row_gap < 1e-12,
        format!(
            "{instances} instances, max |delta| {max_diff:.3e}, max softmax row gap {max_row_gap:.3e}"
        ),
    )
}

pub fn check_focal_gradient(draws: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let n = rng.random_range(1..6);
        let logits = Array1::from_shape_fn(n, |_| rng.random_range(-6.0..6.0));
        let target = Array1::from_shape_fn(n, |_| if rng.random::<bool>() { 1.0 } else { 0.0 });
        let gamma = [0.0, 1.0, 2.0][rng.random_range(0..3)];
        let alpha = if rng.random::<bool>() { Some(0.25) } else { None };
        let (_, grad) = matching::focal_loss(&logits, &target, gamma, alpha);
        for c in 0..n {
            let mut plus = logits.clone();
            plus[c] += h;
            let mut minus = logits.clone();
            minus[c] -= h;
            let fd = (matching::focal_loss(&plus, &target, gamma, alpha).0
                - matching::focal_loss(&minus, &target, gamma, alpha).0)
                / (2.0 * h);
            let rel = (grad[c] - fd).abs() / fd.abs().max(1e-3);
            worst = worst.max(rel);
        }
    }
    // gamma = 0 with alpha off must reduce to binary cross-entropy.
    let (bce_like, _) = matching::focal_loss(
        &Array1::from_vec(vec![0.0]),
        &Array1::from_vec(vec![1.0]),
        0.0,
        None,
    );
    let bce_gap = (bce_like - std::f64::consts::LN_2).abs();
    CheckResult::new(
        "focal_gradient",
        worst < 1e-5 && bce_gap < 1e-12,
        format!("{draws} draws, worst relative error {worst:.3e}, BCE gap {bce_gap:.3e}"),
    )
}

pub fn check_frustum_grid(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..50 {
        let cam = random_camera(&mut rng);
        let b = match geometry::Box2D::from_cxcywh(
            rng.random_range(100.0..900.0),
            rng.random_range(100.0..700.0),
            rng.random_range(10.0..120.0),
            rng.random_range(10.0..120.0),
        ) {
            Ok(b) => b,
            Err(e) => return CheckResult::new("frustum_grid", false, format!("{e}")),
        };
        let depth = rng.random_range(8.0..60.0);
        let grid = match attention::frustum_grid(&b, depth, &cam, (1, 1, 20), 10.0) {
            Ok(g) => g,
            Err(e) => return CheckResult::new("frustum_grid", false, format!("{e}")),
        };
        if grid.samples.len() != 369 {
            return CheckResult::new(
                "frustum_grid",
                false,
                format!("expected 369 samples, got {}", grid.samples.len()),
            );
        }
        let center = &grid.samples[grid.center_index];
        let direct = geometry::unproject(&cam, b.center.x, b.center.y, depth).expect("d > 0");
        if (center.position - direct).norm() > 1e-9 {
            return CheckResult::new("frustum_grid", false, "center sample mismatch".into());
        }
        for s in &grid.samples {
            let (u, v, _) = geometry::project(&cam, &s.position).expect("in front");
            if u < b.min().x - 1e-6
                || u > b.max().x + 1e-6
                || v < b.min().y - 1e-6
                || v > b.max().y + 1e-6
            {
                return CheckResult::new(
                    "frustum_grid",
                    false,
                    format!("sample reprojects outside the box: ({u}, {v})"),
                );
            }
        }
    }
    CheckResult::new(
        "frustum_grid",
        true,
        "50 grids: 369 samples each, centers exact, all reprojections inside".into(),
    )
}

/// Run every suite at selftest scale (fast variants of the full oracles).
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    vec![
        check_round_trip(1000, seed),
        check_giou(50, 100_000, 1.5e-2, seed.wrapping_add(1)),
        check_hungarian(100, 50, seed.wrapping_add(2)),
        check_attention(20, seed.wrapping_add(3)),
        check_focal_gradient(200, seed.wrapping_add(4)),
        check_frustum_grid(seed.wrapping_add(5)),
    ]
}
