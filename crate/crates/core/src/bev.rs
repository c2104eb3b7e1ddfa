//! Sparse voxelization of feature point clouds, BEV squashing, map fusion by
//! concatenation and bilinear sampling.
//!
//! The per-point feature preparation (token reduction plus positional
//! encoding of xyz) lives in [`PointEncoder`]; `voxelize` itself only bins
//! and averages whatever features it is handed. Maps are immutable after
//! construction and safe for concurrent reads.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};

use crate::attention::{Linear, PositionalEncoder};
use crate::error::{Error, Result};

/// Axis-aligned region of interest with per-axis voxel sizes.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RegionOfInterest {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub voxel_size: [f64; 3],
}

impl RegionOfInterest {
    pub fn new(min: [f64; 3], max: [f64; 3], voxel_size: [f64; 3]) -> Result<Self> {
        for a in 0..3 {
            if max[a] <= min[a] {
                return Err(Error::ConfigError(format!("roi axis {a}: max <= min")));
            }
            if voxel_size[a] <= 0.0 {
                return Err(Error::ConfigError(format!("roi axis {a}: voxel size <= 0")));
            }
        }
        Ok(RegionOfInterest {
            min,
            max,
            voxel_size,
        })
    }

    /// Number of voxels along each axis.
    pub fn grid_dims(&self) -> [usize; 3] {
        let mut dims = [0usize; 3];
        for a in 0..3 {
            dims[a] = ((self.max[a] - self.min[a]) / self.voxel_size[a]).ceil() as usize;
        }
        dims
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let q = [p.x, p.y, p.z];
        (0..3).all(|a| q[a] >= self.min[a] && q[a] < self.max[a])
    }

    pub fn voxel_index(&self, p: &Vector3<f64>) -> Option<[usize; 3]> {
        if !self.contains(p) {
            return None;
        }
        let dims = self.grid_dims();
        let q = [p.x, p.y, p.z];
        let mut idx = [0usize; 3];
        for a in 0..3 {
            idx[a] = (((q[a] - self.min[a]) / self.voxel_size[a]).floor() as usize).min(dims[a] - 1);
        }
        Some(idx)
    }

    pub fn clamp(&self, p: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            p.x.clamp(self.min[0], self.max[0]),
            p.y.clamp(self.min[1], self.max[1]),
            p.z.clamp(self.min[2], self.max[2]),
        )
    }
}

#[derive(Debug, Clone)]
struct VoxelAccum {
    sum: Array1<f64>,
    count: usize,
}

/// Occupied-voxels-only feature grid. Iteration order is the sorted index
/// order, keeping downstream reductions deterministic.
#[derive(Debug, Clone)]
pub struct SparseVoxelGrid {
    voxels: BTreeMap<[usize; 3], VoxelAccum>,
    pub roi: RegionOfInterest,
    pub feature_dim: usize,
}

impl SparseVoxelGrid {
    pub fn occupied(&self) -> usize {
        self.voxels.len()
    }

    pub fn total_points(&self) -> usize {
        self.voxels.values().map(|v| v.count).sum()
    }

    /// Mean feature and point count of one voxel.
    pub fn voxel(&self, index: [usize; 3]) -> Option<(Array1<f64>, usize)> {
        self.voxels
            .get(&index)
            .map(|v| (&v.sum / v.count as f64, v.count))
    }

    pub fn iter(&self) -> impl Iterator<Item = ([usize; 3], Array1<f64>, usize)> + '_ {
        self.voxels
            .iter()
            .map(|(idx, v)| (*idx, &v.sum / v.count as f64, v.count))
    }

    /// Merge another grid into this one; (sum, count) accumulation is
    /// associative and commutative, so sharded voxelization can be merged
    /// in any grouping.
    pub fn merge(&mut self, other: SparseVoxelGrid) -> Result<()> {
        if other.feature_dim != self.feature_dim {
            return Err(Error::dim("voxel merge", self.feature_dim, other.feature_dim));
        }
        for (idx, v) in other.voxels {
            match self.voxels.entry(idx) {
                std::collections::btree_map::Entry::Occupied(mut e) => {
                    let acc = e.get_mut();
                    acc.sum = &acc.sum + &v.sum;
                    acc.count += v.count;
                }
                std::collections::btree_map::Entry::Vacant(e) => {
                    e.insert(v);
                }
            }
        }
        Ok(())
    }
}

/// Bin feature points into the ROI's sparse voxel grid; out-of-roi points are
/// discarded and the per-voxel feature is the mean of member features.
pub fn voxelize(
    points: &[(Vector3<f64>, Array1<f64>)],
    roi: &RegionOfInterest,
) -> Result<SparseVoxelGrid> {
    let feature_dim = points.first().map(|(_, f)| f.len()).unwrap_or(0);
    let mut voxels: BTreeMap<[usize; 3], VoxelAccum> = BTreeMap::new();
    for (p, f) in points {
        if f.len() != feature_dim {
            return Err(Error::dim("voxelize feature", feature_dim, f.len()));
        }
        let Some(idx) = roi.voxel_index(p) else {
            continue;
        };
        match voxels.entry(idx) {
            std::collections::btree_map::Entry::Occupied(mut e) => {
                let acc = e.get_mut();
                acc.sum = &acc.sum + f;
                acc.count += 1;
            }
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(VoxelAccum {
                    sum: f.clone(),
                    count: 1,
                });
            }
        }
    }
    Ok(SparseVoxelGrid {
        voxels,
        roi: *roi,
        feature_dim,
    })
}

/// Dense 2D grid of feature vectors with a world-to-grid mapping. Also used
/// for image-space feature grids, in which case the "world" coordinates are
/// pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeatureMap {
    /// (nx, ny, d), cell (i, j) covering
    /// `[origin + i*cell, origin + (i+1)*cell)` per axis.
    pub data: Array3<f64>,
    pub origin: [f64; 2],
    pub cell_size: [f64; 2],
}

impl BevFeatureMap {
    pub fn zeros(origin: [f64; 2], cell_size: [f64; 2], nx: usize, ny: usize, d: usize) -> Self {
        BevFeatureMap {
            data: Array3::zeros((nx, ny, d)),
            origin,
            cell_size,
        }
    }

    pub fn from_fn(
        origin: [f64; 2],
        cell_size: [f64; 2],
        nx: usize,
        ny: usize,
        d: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        BevFeatureMap {
            data: Array3::from_shape_fn((nx, ny, d), |(i, j, k)| f(i, j, k)),
            origin,
            cell_size,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.data.shape()[0], self.data.shape()[1])
    }

    pub fn feature_dim(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.origin[0] + (i as f64 + 0.5) * self.cell_size[0],
            self.origin[1] + (j as f64 + 0.5) * self.cell_size[1],
        )
    }

    pub fn cell_feature(&self, i: usize, j: usize) -> Array1<f64> {
        self.data.slice(ndarray::s![i, j, ..]).to_owned()
    }

    /// Cell index containing a world point, clamped to the grid.
    pub fn nearest_cell(&self, x: f64, y: f64) -> (usize, usize) {
        let (nx, ny) = self.dims();
        let i = ((x - self.origin[0]) / self.cell_size[0]).floor();
        let j = ((y - self.origin[1]) / self.cell_size[1]).floor();
        (
            (i.max(0.0) as usize).min(nx - 1),
            (j.max(0.0) as usize).min(ny - 1),
        )
    }

    /// Bilinear interpolation of the four surrounding cell centers;
    /// coordinates outside the map clamp to the border cells.
    pub fn bilinear_sample(&self, x: f64, y: f64) -> Array1<f64> {
        let (nx, ny) = self.dims();
        // Continuous cell coordinates with cell centers at integers.
        let gx = (x - self.origin[0]) / self.cell_size[0] - 0.5;
        let gy = (y - self.origin[1]) / self.cell_size[1] - 0.5;
        let gx = gx.clamp(0.0, (nx - 1) as f64);
        let gy = gy.clamp(0.0, (ny - 1) as f64);
        let i0 = gx.floor() as usize;
        let j0 = gy.floor() as usize;
        let i1 = (i0 + 1).min(nx - 1);
        let j1 = (j0 + 1).min(ny - 1);
        let fx = gx - i0 as f64;
        let fy = gy - j0 as f64;

        let f00 = self.data.slice(ndarray::s![i0, j0, ..]);
        let f10 = self.data.slice(ndarray::s![i1, j0, ..]);
        let f01 = self.data.slice(ndarray::s![i0, j1, ..]);
        let f11 = self.data.slice(ndarray::s![i1, j1, ..]);
        let mut out = Array1::zeros(self.feature_dim());
        for k in 0..self.feature_dim() {
            let a = f00[k] * (1.0 - fx) + f10[k] * fx;
            let b = f01[k] * (1.0 - fx) + f11[k] * fx;
            out[k] = a * (1.0 - fy) + b * fy;
        }
        out
    }

    /// Flatten to (cell feature, cell center) token rows in index order.
    pub fn flatten_tokens(&self) -> Vec<(Array1<f64>, (f64, f64))> {
        let (nx, ny) = self.dims();
        let mut out = Vec::with_capacity(nx * ny);
        for i in 0..nx {
            for j in 0..ny {
                out.push((self.cell_feature(i, j), self.cell_center(i, j)));
            }
        }
        out
    }
}

/// Squash a sparse voxel grid to BEV: each cell is the mean over its occupied
/// z-levels; unoccupied cells are zero.
pub fn to_bev(grid: &SparseVoxelGrid) -> BevFeatureMap {
    let dims = grid.roi.grid_dims();
    let d = grid.feature_dim.max(1);
    let mut map = BevFeatureMap::zeros(
        [grid.roi.min[0], grid.roi.min[1]],
        [grid.roi.voxel_size[0], grid.roi.voxel_size[1]],
        dims[0],
        dims[1],
        d,
    );
    let mut levels: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (idx, mean, _) in grid.iter() {
        *levels.entry((idx[0], idx[1])).or_insert(0) += 1;
        let mut cell = map.data.slice_mut(ndarray::s![idx[0], idx[1], ..]);
        cell += &mean.view();
    }
    for ((i, j), n) in levels {
        let mut cell = map.data.slice_mut(ndarray::s![i, j, ..]);
        cell /= n as f64;
    }
    map
}

/// Per-cell feature concatenation of two maps with identical extents.
pub fn fuse_concat(a: &BevFeatureMap, b: &BevFeatureMap) -> Result<BevFeatureMap> {
    if a.dims() != b.dims() || a.origin != b.origin || a.cell_size != b.cell_size {
        return Err(Error::ExtentMismatch(format!(
            "{:?}/{:?} origin {:?}/{:?} cell {:?}/{:?}",
            a.dims(),
            b.dims(),
            a.origin,
            b.origin,
            a.cell_size,
            b.cell_size
        )));
    }
    let (nx, ny) = a.dims();
    let da = a.feature_dim();
    let db = b.feature_dim();
    let mut out = BevFeatureMap::zeros(a.origin, a.cell_size, nx, ny, da + db);
    out.data.slice_mut(ndarray::s![.., .., ..da]).assign(&a.data);
    out.data.slice_mut(ndarray::s![.., .., da..]).assign(&b.data);
    Ok(out)
}

/// Turns raw tokens into voxelization-ready point features: a linear
/// reduction of the token plus a positional encoding of xyz. Channel 0 of
/// the output is an occupancy marker (1.0 for points above the ground
/// cutoff, 0.0 otherwise), so after mean pooling a BEV cell's channel 0
/// reads as its above-ground point fraction.
#[derive(Debug, Clone)]
pub struct PointEncoder {
    pub reduce: Linear,
    pub pe: PositionalEncoder,
    /// Points at or below this height do not count as occupancy.
    pub occupancy_min_z: f64,
}

pub const OCCUPANCY_CHANNEL: usize = 0;

impl PointEncoder {
    pub fn new(reduce: Linear, pe: PositionalEncoder) -> Self {
        assert_eq!(reduce.out_dim(), pe.out_dim);
        PointEncoder {
            reduce,
            pe,
            occupancy_min_z: f64::NEG_INFINITY,
        }
    }

    /// Ground-filtered occupancy: only points above `min_z` mark their cell.
    pub fn with_min_z(mut self, min_z: f64) -> Self {
        self.occupancy_min_z = min_z;
        self
    }

    pub fn out_dim(&self) -> usize {
        self.reduce.out_dim()
    }

    pub fn encode(&self, position: &Vector3<f64>, token: &Array1<f64>) -> Result<Array1<f64>> {
        let mut f = self.reduce.forward(token)?
            + self.pe.encode(&[position.x, position.y, position.z])?;
        f[OCCUPANCY_CHANNEL] = if position.z > self.occupancy_min_z {
            1.0
        } else {
            0.0
        };
        Ok(f)
    }

    pub fn encode_cloud(
        &self,
        points: &[(Vector3<f64>, Array1<f64>)],
    ) -> Result<Vec<(Vector3<f64>, Array1<f64>)>> {
        points
            .iter()
            .map(|(p, t)| Ok((*p, self.encode(p, t)?)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_roi() -> RegionOfInterest {
        RegionOfInterest::new([-10.0, -10.0, -2.0], [10.0, 10.0, 2.0], [1.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn paper_ranges_give_1440_cells() {
        let roi = RegionOfInterest::new(
            [-54.0, -54.0, -5.0],
            [54.0, 54.0, 3.0],
            [0.075, 0.075, 0.2],
        )
        .unwrap();
        assert_eq!(roi.grid_dims()[0], 1440);
        assert_eq!(roi.grid_dims()[1], 1440);
        assert_eq!(roi.grid_dims()[2], 40);
    }

    #[test]
    fn single_point_at_min_corner() {
        let roi = small_roi();
        let f = Array1::from_vec(vec![1.0, 2.0]);
        let grid = voxelize(&[(Vector3::new(-10.0, -10.0, -2.0), f.clone())], &roi).unwrap();
        assert_eq!(grid.occupied(), 1);
        let (mean, count) = grid.voxel([0, 0, 0]).unwrap();
        assert_eq!(count, 1);
        assert_eq!(mean, f);
    }

    #[test]
    fn out_of_roi_points_discarded() {
        let roi = small_roi();
        let f = Array1::zeros(2);
        let grid = voxelize(
            &[
                (Vector3::new(100.0, 0.0, 0.0), f.clone()),
                (Vector3::new(0.0, 0.0, 0.0), f.clone()),
                (Vector3::new(10.0, 0.0, 0.0), f), // max boundary is exclusive
            ],
            &roi,
        )
        .unwrap();
        assert_eq!(grid.total_points(), 1);
    }

    #[test]
    fn voxelize_matches_dense_binning() {
        let roi = small_roi();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let points: Vec<(Vector3<f64>, Array1<f64>)> = (0..10_000)
            .map(|_| {
                (
                    Vector3::new(
                        rng.random_range(-12.0..12.0),
                        rng.random_range(-12.0..12.0),
                        rng.random_range(-3.0..3.0),
                    ),
                    Array1::from_vec(vec![rng.random::<f64>(), rng.random::<f64>()]),
                )
            })
            .collect();
        let grid = voxelize(&points, &roi).unwrap();

        // Dense brute-force reference.
        let dims = roi.grid_dims();
        let mut sums = vec![vec![0.0f64; 2]; dims[0] * dims[1] * dims[2]];
        let mut counts = vec![0usize; dims[0] * dims[1] * dims[2]];
        let mut in_roi = 0usize;
        for (p, f) in &points {
            if let Some([i, j, k]) = roi.voxel_index(p) {
                let flat = (i * dims[1] + j) * dims[2] + k;
                sums[flat][0] += f[0];
                sums[flat][1] += f[1];
                counts[flat] += 1;
                in_roi += 1;
            }
        }
        assert_eq!(grid.total_points(), in_roi);
        let mut occupied = 0usize;
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    let flat = (i * dims[1] + j) * dims[2] + k;
                    if counts[flat] == 0 {
                        assert!(grid.voxel([i, j, k]).is_none());
                        continue;
                    }
                    occupied += 1;
                    let (mean, count) = grid.voxel([i, j, k]).unwrap();
                    assert_eq!(count, counts[flat]);
                    for c in 0..2 {
                        assert_relative_eq!(
                            mean[c],
                            sums[flat][c] / counts[flat] as f64,
                            epsilon = 1e-12
                        );
                    }
                }
            }
        }
        assert_eq!(grid.occupied(), occupied);
    }

    #[test]
    fn voxelize_permutation_invariant() {
        let roi = small_roi();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut points: Vec<(Vector3<f64>, Array1<f64>)> = (0..500)
            .map(|_| {
                (
                    Vector3::new(
                        rng.random_range(-9.9..9.9),
                        rng.random_range(-9.9..9.9),
                        rng.random_range(-1.9..1.9),
                    ),
                    Array1::from_vec(vec![rng.random::<f64>(); 3]),
                )
            })
            .collect();
        let a = voxelize(&points, &roi).unwrap();
        points.reverse();
        let b = voxelize(&points, &roi).unwrap();
        for (idx, mean, count) in a.iter() {
            let (mean_b, count_b) = b.voxel(idx).unwrap();
            assert_eq!(count, count_b);
            for c in 0..3 {
                assert_relative_eq!(mean[c], mean_b[c], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn sharded_merge_equals_single_pass() {
        let roi = small_roi();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let points: Vec<(Vector3<f64>, Array1<f64>)> = (0..400)
            .map(|_| {
                (
                    Vector3::new(
                        rng.random_range(-9.0..9.0),
                        rng.random_range(-9.0..9.0),
                        rng.random_range(-1.5..1.5),
                    ),
                    Array1::from_vec(vec![rng.random::<f64>(), rng.random::<f64>()]),
                )
            })
            .collect();
        let whole = voxelize(&points, &roi).unwrap();
        let mut merged = voxelize(&points[..150], &roi).unwrap();
        merged.merge(voxelize(&points[150..], &roi).unwrap()).unwrap();
        assert_eq!(whole.occupied(), merged.occupied());
        assert_eq!(whole.total_points(), merged.total_points());
        for (idx, mean, _) in whole.iter() {
            let (mean_m, _) = merged.voxel(idx).unwrap();
            for c in 0..2 {
                assert_relative_eq!(mean[c], mean_m[c], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn to_bev_single_and_double_voxel() {
        let roi = small_roi();
        let f1 = Array1::from_vec(vec![2.0, 4.0]);
        let f2 = Array1::from_vec(vec![4.0, 8.0]);
        // Same BEV cell (two z levels), plus a lone voxel elsewhere.
        let grid = voxelize(
            &[
                (Vector3::new(0.5, 0.5, -1.5), f1.clone()),
                (Vector3::new(0.5, 0.5, 1.5), f2),
                (Vector3::new(-9.5, 3.5, 0.5), f1),
            ],
            &roi,
        )
        .unwrap();
        let bev = to_bev(&grid);
        let cell = bev.cell_feature(10, 10);
        assert_relative_eq!(cell[0], 3.0, epsilon = 1e-12);
        assert_relative_eq!(cell[1], 6.0, epsilon = 1e-12);
        let lone = bev.cell_feature(0, 13);
        assert_relative_eq!(lone[0], 2.0, epsilon = 1e-12);
        // Unoccupied cells are zero.
        assert_eq!(bev.cell_feature(5, 5), Array1::zeros(2));
    }

    #[test]
    fn to_bev_matches_dense_reference() {
        let roi = small_roi();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let points: Vec<(Vector3<f64>, Array1<f64>)> = (0..2000)
            .map(|_| {
                (
                    Vector3::new(
                        rng.random_range(-9.9..9.9),
                        rng.random_range(-9.9..9.9),
                        rng.random_range(-1.9..1.9),
                    ),
                    Array1::from_vec(vec![rng.random::<f64>(), rng.random::<f64>()]),
                )
            })
            .collect();
        let grid = voxelize(&points, &roi).unwrap();
        let bev = to_bev(&grid);

        let dims = roi.grid_dims();
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                let mut acc = Array1::<f64>::zeros(2);
                let mut n = 0usize;
                for k in 0..dims[2] {
                    if let Some((mean, _)) = grid.voxel([i, j, k]) {
                        acc = acc + mean;
                        n += 1;
                    }
                }
                let expected = if n > 0 { acc / n as f64 } else { Array1::zeros(2) };
                let got = bev.cell_feature(i, j);
                for c in 0..2 {
                    assert_relative_eq!(got[c], expected[c], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn fuse_concat_dims_and_content() {
        let a = BevFeatureMap::from_fn([0.0, 0.0], [1.0, 1.0], 4, 4, 8, |i, j, k| {
            (i + j + k) as f64
        });
        let b = BevFeatureMap::from_fn([0.0, 0.0], [1.0, 1.0], 4, 4, 8, |i, j, k| {
            (i * j * k) as f64 + 1.0
        });
        let fused = fuse_concat(&a, &b).unwrap();
        assert_eq!(fused.feature_dim(), 16);
        for i in 0..4 {
            for j in 0..4 {
                let f = fused.cell_feature(i, j);
                let fa = a.cell_feature(i, j);
                let fb = b.cell_feature(i, j);
                for k in 0..8 {
                    assert_eq!(f[k], fa[k]);
                    assert_eq!(f[k + 8], fb[k]);
                }
            }
        }

        let zeros = BevFeatureMap::zeros([0.0, 0.0], [1.0, 1.0], 4, 4, 3);
        let fused2 = fuse_concat(&zeros, &b).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let f = fused2.cell_feature(i, j);
                assert!(f.slice(ndarray::s![..3]).iter().all(|&v| v == 0.0));
                assert_eq!(f.slice(ndarray::s![3..]).to_owned(), b.cell_feature(i, j));
            }
        }
    }

    #[test]
    fn fuse_concat_extent_mismatch() {
        let a = BevFeatureMap::zeros([0.0, 0.0], [1.0, 1.0], 4, 4, 2);
        let b = BevFeatureMap::zeros([0.0, 0.0], [1.0, 1.0], 5, 4, 2);
        assert!(matches!(fuse_concat(&a, &b), Err(Error::ExtentMismatch(_))));
        let c = BevFeatureMap::zeros([1.0, 0.0], [1.0, 1.0], 4, 4, 2);
        assert!(matches!(fuse_concat(&a, &c), Err(Error::ExtentMismatch(_))));
    }

    #[test]
    fn bilinear_at_cell_center_and_midpoint() {
        let map = BevFeatureMap::from_fn([0.0, 0.0], [2.0, 2.0], 5, 5, 2, |i, j, k| {
            (i * 10 + j + k) as f64
        });
        let (cx, cy) = map.cell_center(2, 3);
        assert_eq!(map.bilinear_sample(cx, cy), map.cell_feature(2, 3));
        let (nx_, ny_) = map.cell_center(3, 3);
        let mid = map.bilinear_sample((cx + nx_) / 2.0, (cy + ny_) / 2.0);
        let avg = (map.cell_feature(2, 3) + map.cell_feature(3, 3)) / 2.0;
        for k in 0..2 {
            assert_relative_eq!(mid[k], avg[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn bilinear_matches_closed_form() {
        let map = BevFeatureMap::from_fn([-4.0, 2.0], [0.5, 0.25], 12, 16, 3, |i, j, k| {
            ((i * 31 + j * 17 + k * 7) % 23) as f64 / 5.0
        });
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..200 {
            let x = rng.random_range(-3.7..1.7);
            let y = rng.random_range(2.2..5.8);
            let got = map.bilinear_sample(x, y);
            // Direct closed-form interpolation.
            let gx = ((x - map.origin[0]) / map.cell_size[0] - 0.5).clamp(0.0, 11.0);
            let gy = ((y - map.origin[1]) / map.cell_size[1] - 0.5).clamp(0.0, 15.0);
            let (i0, j0) = (gx.floor() as usize, gy.floor() as usize);
            let (i1, j1) = ((i0 + 1).min(11), (j0 + 1).min(15));
            let (fx, fy) = (gx - i0 as f64, gy - j0 as f64);
            for k in 0..3 {
                let expected = map.data[[i0, j0, k]] * (1.0 - fx) * (1.0 - fy)
                    + map.data[[i1, j0, k]] * fx * (1.0 - fy)
                    + map.data[[i0, j1, k]] * (1.0 - fx) * fy
                    + map.data[[i1, j1, k]] * fx * fy;
                assert_relative_eq!(got[k], expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_out_of_map_clamps_to_border() {
        let map = BevFeatureMap::from_fn([0.0, 0.0], [1.0, 1.0], 3, 3, 1, |i, j, _| {
            (i * 3 + j) as f64
        });
        assert_eq!(map.bilinear_sample(-100.0, -100.0)[0], 0.0);
        assert_eq!(map.bilinear_sample(100.0, 100.0)[0], 8.0);
        assert_eq!(map.bilinear_sample(100.0, -100.0)[0], 6.0);
    }

    #[test]
    fn point_encoder_marks_occupancy() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let pe = PositionalEncoder::seeded(3, 6, 10000.0, &mut rng);
        let enc = PointEncoder::new(Linear::seeded(4, 6, &mut rng), pe);
        let f = enc
            .encode(&Vector3::new(1.0, 2.0, 3.0), &Array1::from_vec(vec![0.1; 4]))
            .unwrap();
        assert_eq!(f[OCCUPANCY_CHANNEL], 1.0);
    }

    proptest! {
        #[test]
        fn bilinear_is_continuous(x in -9.0f64..9.0, y in -9.0f64..9.0) {
            let map = BevFeatureMap::from_fn([-10.0, -10.0], [1.0, 1.0], 20, 20, 2, |i, j, k| {
                ((i * 13 + j * 29 + k * 5) % 11) as f64
            });
            let a = map.bilinear_sample(x, y);
            let b = map.bilinear_sample(x + 1e-9, y + 1e-9);
            for k in 0..2 {
                prop_assert!((a[k] - b[k]).abs() < 1e-6);
            }
        }

        #[test]
        fn fuse_concat_preserves_inputs(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = BevFeatureMap::from_fn([0.0, 0.0], [1.0, 1.0], 3, 3, 2, |_, _, _| rng.random::<f64>());
            let b = BevFeatureMap::from_fn([0.0, 0.0], [1.0, 1.0], 3, 3, 3, |_, _, _| rng.random::<f64>());
            let fused = fuse_concat(&a, &b).unwrap();
            prop_assert_eq!(fused.data.slice(ndarray::s![.., .., ..2]).to_owned(), a.data);
            prop_assert_eq!(fused.data.slice(ndarray::s![.., .., 2..]).to_owned(), b.data);
        }
    }
}
