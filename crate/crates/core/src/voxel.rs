//! Attributed sparse voxel sets: voxelization, coarsening, lifting, window
//! partitioning and occupancy statistics.
//!
//! Indices are kept unique and sorted lexicographically; every operation
//! preserves that order so downstream selection is deterministic.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::error::{Error, Result};
use crate::fusion::Aabb;
use crate::linalg::Vec3;
use crate::scalar::Real;

pub type VoxelIndex = [i32; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct SparseVoxelGrid<T> {
    resolution: T,
    origin: Vec3<T>,
    indices: Vec<VoxelIndex>,
    features: Vec<T>,
    channels: usize,
}

impl<T: Real> SparseVoxelGrid<T> {
    /// Builds a grid from parts; indices must be strictly increasing.
    pub fn from_parts(
        resolution: T,
        origin: Vec3<T>,
        indices: Vec<VoxelIndex>,
        features: Vec<T>,
        channels: usize,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidInput("voxel grids need at least one feature channel".into()));
        }
        if features.len() != indices.len() * channels {
            return Err(Error::DimensionMismatch(format!(
                "{} features for {} voxels × {} channels",
                features.len(),
                indices.len(),
                channels
            )));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("voxel indices must be unique and sorted".into()));
        }
        Ok(Self { resolution, origin, indices, features, channels })
    }

    pub fn empty(resolution: T, origin: Vec3<T>, channels: usize) -> Self {
        Self { resolution, origin, indices: Vec::new(), features: Vec::new(), channels: channels.max(1) }
    }

    pub fn resolution(&self) -> T {
        self.resolution
    }

    pub fn origin(&self) -> Vec3<T> {
        self.origin
    }

    pub fn indices(&self) -> &[VoxelIndex] {
        &self.indices
    }

    pub fn features(&self) -> &[T] {
        &self.features
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn feature(&self, row: usize) -> &[T] {
        &self.features[row * self.channels..(row + 1) * self.channels]
    }

    /// Row of `v`, if present (binary search on the sorted index list).
    pub fn find(&self, v: VoxelIndex) -> Option<usize> {
        self.indices.binary_search(&v).ok()
    }

    pub fn center(&self, v: VoxelIndex) -> Vec3<T> {
        voxel_center(self.origin, self.resolution, v)
    }

    pub fn centers(&self) -> Vec<Vec3<T>> {
        self.indices.iter().map(|&v| self.center(v)).collect()
    }

    /// Replaces the feature matrix, keeping the index set.
    pub fn with_features(&self, features: Vec<T>, channels: usize) -> Result<Self> {
        Self::from_parts(self.resolution, self.origin, self.indices.clone(), features, channels)
    }

    /// Subset of rows (must be ascending).
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut indices = Vec::with_capacity(rows.len());
        let mut features = Vec::with_capacity(rows.len() * self.channels);
        for &r in rows {
            indices.push(self.indices[r]);
            features.extend_from_slice(self.feature(r));
        }
        Self { resolution: self.resolution, origin: self.origin, indices, features, channels: self.channels }
    }
}

pub fn voxel_center<T: Real>(origin: Vec3<T>, resolution: T, v: VoxelIndex) -> Vec3<T> {
    let half = T::lit(0.5);
    let c = |i: i32| (T::from_i32(i).unwrap() + half) * resolution;
    origin + Vec3::new(c(v[0]), c(v[1]), c(v[2]))
}

/// Voxelizes points (optionally with one extra channel, e.g. a TSDF value).
///
/// Features per voxel: mean point offset from the voxel center in units of
/// the resolution (3), `ln(1 + count)`, and the mean extra channel when present.
pub fn voxelize<T: Real>(points: &[Vec3<T>], extra: Option<&[T]>, resolution: T, origin: Vec3<T>) -> Result<SparseVoxelGrid<T>> {
    if !(resolution > T::zero()) {
        return Err(Error::InvalidInput("resolution must be positive".into()));
    }
    if let Some(e) = extra {
        if e.len() != points.len() {
            return Err(Error::DimensionMismatch(format!("{} extra values for {} points", e.len(), points.len())));
        }
    }
    let channels = if extra.is_some() { 5 } else { 4 };
    let mut acc: BTreeMap<VoxelIndex, (Vec3<T>, T, usize)> = BTreeMap::new();
    for (i, &p) in points.iter().enumerate() {
        let v = p.cell_index(origin, resolution);
        let e = acc.entry(v).or_insert((Vec3::zero(), T::zero(), 0));
        e.0 += p;
        if let Some(x) = extra {
            e.1 = e.1 + x[i];
        }
        e.2 += 1;
    }
    let mut indices = Vec::with_capacity(acc.len());
    let mut features = Vec::with_capacity(acc.len() * channels);
    for (v, (sum, esum, n)) in acc {
        let nf = T::from_usize(n).unwrap();
        let offset = (sum.scale(T::one() / nf) - voxel_center(origin, resolution, v)).scale(T::one() / resolution);
        features.extend_from_slice(&[offset.x, offset.y, offset.z, (T::one() + nf).ln()]);
        if extra.is_some() {
            features.push(esum / nf);
        }
        indices.push(v);
    }
    SparseVoxelGrid::from_parts(resolution, origin, indices, features, channels)
}

/// Coarse grid plus the child→parent row map.
#[derive(Clone, Debug, PartialEq)]
pub struct Coarsened<T> {
    pub grid: SparseVoxelGrid<T>,
    pub parent: Vec<usize>,
}

#[inline]
pub fn parent_index(v: VoxelIndex, factor: i32) -> VoxelIndex {
    [v[0].div_euclid(factor), v[1].div_euclid(factor), v[2].div_euclid(factor)]
}

/// Coarsens by an integer factor; the coarse feature is the mean of child features.
pub fn coarsen<T: Real>(grid: &SparseVoxelGrid<T>, factor: usize) -> Result<Coarsened<T>> {
    if factor < 2 {
        return Err(Error::InvalidInput(format!("coarsening factor must be at least 2, got {factor}")));
    }
    let f = factor as i32;
    let c = grid.channels;
    let mut acc: BTreeMap<VoxelIndex, (Vec<T>, usize)> = BTreeMap::new();
    for (row, &v) in grid.indices.iter().enumerate() {
        let e = acc.entry(parent_index(v, f)).or_insert_with(|| (vec![T::zero(); c], 0));
        for (a, &x) in e.0.iter_mut().zip(grid.feature(row)) {
            *a = *a + x;
        }
        e.1 += 1;
    }
    let lookup: HashMap<VoxelIndex, usize> = acc.keys().enumerate().map(|(i, &k)| (k, i)).collect();
    let parent = grid.indices.iter().map(|&v| lookup[&parent_index(v, f)]).collect();
    let mut indices = Vec::with_capacity(acc.len());
    let mut features = Vec::with_capacity(acc.len() * c);
    for (k, (sum, n)) in acc {
        let nf = T::from_usize(n).unwrap();
        indices.push(k);
        features.extend(sum.into_iter().map(|s| s / nf));
    }
    let res = grid.resolution * T::from_usize(factor).unwrap();
    Ok(Coarsened { grid: SparseVoxelGrid::from_parts(res, grid.origin, indices, features, c)?, parent })
}

/// Fine voxels whose parent survived, with the parent's features appended.
#[derive(Clone, Debug, PartialEq)]
pub struct Lifted<T> {
    pub grid: SparseVoxelGrid<T>,
    /// Row in the fine grid of each output voxel.
    pub fine_rows: Vec<usize>,
    /// Row in the coarse grid matched by each output voxel.
    pub coarse_rows: Vec<usize>,
}

pub fn lift_and_filter<T: Real>(
    fine: &SparseVoxelGrid<T>,
    coarse: &SparseVoxelGrid<T>,
    kept: &HashSet<VoxelIndex>,
    factor: usize,
) -> Result<Lifted<T>> {
    let f = factor as i32;
    let c_out = fine.channels + coarse.channels;
    let mut indices = Vec::new();
    let mut features = Vec::new();
    let mut fine_rows = Vec::new();
    let mut coarse_rows = Vec::new();
    for (row, &v) in fine.indices.iter().enumerate() {
        let p = parent_index(v, f);
        if !kept.contains(&p) {
            continue;
        }
        let crow = coarse
            .find(p)
            .ok_or_else(|| Error::InvalidInput(format!("kept coarse voxel {p:?} missing from the coarse grid")))?;
        indices.push(v);
        features.extend_from_slice(fine.feature(row));
        features.extend_from_slice(coarse.feature(crow));
        fine_rows.push(row);
        coarse_rows.push(crow);
    }
    let grid = SparseVoxelGrid::from_parts(fine.resolution, fine.origin, indices, features, c_out)?;
    Ok(Lifted { grid, fine_rows, coarse_rows })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub id: VoxelIndex,
    pub rows: Vec<usize>,
}

/// Groups rows into non-overlapping cubic windows of `window` voxels per side,
/// ordered by window id; rows within a window stay ascending.
pub fn partition_windows(indices: &[VoxelIndex], window: usize) -> Result<Vec<Window>> {
    if window == 0 {
        return Err(Error::InvalidInput("window size must be at least 1".into()));
    }
    let w = window as i32;
    let mut groups: BTreeMap<VoxelIndex, Vec<usize>> = BTreeMap::new();
    for (row, &v) in indices.iter().enumerate() {
        groups.entry(parent_index(v, w)).or_default().push(row);
    }
    Ok(groups.into_iter().map(|(id, rows)| Window { id, rows }).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OccupancyRow<T> {
    pub resolution: T,
    pub sparse: usize,
    pub dense: usize,
    pub ratio: f64,
}

/// Number of cells a dense grid needs to cover `extent` at `resolution`.
pub fn dense_cells<T: Real>(extent: T, resolution: T) -> usize {
    let q = extent / resolution;
    // tolerate representation error when the extent is an exact multiple
    let r = q.round();
    let cells = if (q - r).abs() <= T::lit(1e-9) * r.max(T::one()) { r } else { q.ceil() };
    cells.to_usize().unwrap_or(0).max(1)
}

pub fn occupancy_stats<T: Real>(points: &[Vec3<T>], workspace: &Aabb<T>, resolutions: &[T]) -> Result<Vec<OccupancyRow<T>>> {
    let ext = workspace.extent();
    let inside: Vec<Vec3<T>> = points.iter().copied().filter(|&p| workspace.contains(p)).collect();
    resolutions
        .iter()
        .map(|&res| {
            if !(res > T::zero()) {
                return Err(Error::InvalidInput("resolution must be positive".into()));
            }
            let sparse: HashSet<VoxelIndex> = inside.iter().map(|p| p.cell_index(workspace.min, res)).collect();
            let dense = dense_cells(ext.x, res) * dense_cells(ext.y, res) * dense_cells(ext.z, res);
            Ok(OccupancyRow { resolution: res, sparse: sparse.len(), dense, ratio: sparse.len() as f64 / dense as f64 })
        })
        .collect()
}

/// Least-squares slope of log(count) against log(1/resolution).
pub fn loglog_slope(resolutions: &[f64], counts: &[f64]) -> f64 {
    let xs: Vec<f64> = resolutions.iter().map(|r| (1.0 / r).ln()).collect();
    let ys: Vec<f64> = counts.iter().map(|c| c.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

pub fn occupancy_csv<T: Real>(rows: &[OccupancyRow<T>]) -> String {
    let mut s = String::from("theta_mm,sparse,dense,ratio\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{:.9}\n", r.resolution.as_f64() * 1000.0, r.sparse, r.dense, r.ratio));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn o() -> Vec3<f64> {
        Vec3::zero()
    }

    #[test]
    fn voxelize_examples() {
        let g = voxelize(&[Vec3::new(0.001, 0.001, 0.001)], None, 0.002, o()).unwrap();
        assert_eq!(g.indices(), &[[0, 0, 0]]);
        assert_eq!(g.channels(), 4);
        let g = voxelize(&[Vec3::new(0.0005, 0.001, 0.001), Vec3::new(0.0015, 0.001, 0.001)], None, 0.002, o()).unwrap();
        assert_eq!(g.len(), 1);
        assert!((g.feature(0)[3] - 3f64.ln()).abs() < 1e-12);
        assert!(g.feature(0)[..3].iter().all(|x| x.abs() < 1e-12));
        let g = voxelize(&[Vec3::new(0.002, 0.0, 0.0)], None, 0.002, o()).unwrap();
        assert_eq!(g.indices()[0][0], 1);
    }

    #[test]
    fn voxelize_with_extra_channel() {
        let g = voxelize(&[Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.001, 0.0, 0.0)], Some(&[0.2, 0.4]), 0.002, o()).unwrap();
        assert_eq!(g.channels(), 5);
        assert!((g.feature(0)[4] - 0.3).abs() < 1e-12);
        assert!(voxelize(&[Vec3::new(0.0, 0.0, 0.0)], Some(&[]), 0.002, o()).is_err());
        assert!(voxelize::<f64>(&[], None, 0.002, o()).unwrap().is_empty());
    }

    #[test]
    fn coarsen_examples() {
        let pts: Vec<Vec3<f64>> = (0..11).map(|i| Vec3::new((i as f64 + 0.5) * 0.001, 0.0005, 0.0005)).collect();
        let g = voxelize(&pts, None, 0.001, o()).unwrap();
        let c = coarsen(&g, 10).unwrap();
        assert_eq!(c.grid.indices(), &[[0, 0, 0], [1, 0, 0]]);
        assert_eq!(c.parent, vec![0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1]);
        assert!((c.grid.resolution() - 0.01).abs() < 1e-15);
        assert!(coarsen(&g, 1).is_err());
    }

    #[test]
    fn lift_keep_all_and_none() {
        let pts: Vec<Vec3<f64>> = (0..30).map(|i| Vec3::new(i as f64 * 0.0017, (i % 7) as f64 * 0.003, 0.0)).collect();
        let g = voxelize(&pts, None, 0.001, o()).unwrap();
        let c = coarsen(&g, 10).unwrap();
        let all: HashSet<VoxelIndex> = c.grid.indices().iter().copied().collect();
        let l = lift_and_filter(&g, &c.grid, &all, 10).unwrap();
        assert_eq!(l.grid.indices(), g.indices());
        assert_eq!(l.grid.channels(), 8);
        assert_eq!(&l.grid.feature(3)[..4], g.feature(3));
        assert_eq!(&l.grid.feature(3)[4..], c.grid.feature(c.parent[3]));
        let none = lift_and_filter(&g, &c.grid, &HashSet::new(), 10).unwrap();
        assert!(none.grid.is_empty());
    }

    #[test]
    fn windows_examples() {
        let idx = vec![[0, 0, 0], [1, 2, 3], [3, 3, 3], [4, 0, 0]];
        let w1 = partition_windows(&idx, 1).unwrap();
        assert_eq!(w1.len(), 4);
        let w4 = partition_windows(&idx, 4).unwrap();
        assert_eq!(w4.len(), 2);
        assert_eq!(w4[0].rows, vec![0, 1, 2]);
        assert!(partition_windows(&idx, 0).is_err());
    }

    #[test]
    fn occupancy_examples() {
        let ws = Aabb::new(Vec3::zero(), Vec3::new(0.096, 0.048, 0.032)).unwrap();
        let rows = occupancy_stats(&[Vec3::new(0.01, 0.01, 0.01)], &ws, &[0.008, 0.004, 0.002]).unwrap();
        assert!(rows.iter().all(|r| r.sparse == 1));
        assert_eq!(rows[1].dense, rows[0].dense * 8);
        assert_eq!(rows[2].dense, rows[1].dense * 8);
        let csv = occupancy_csv(&rows);
        assert!(csv.starts_with("theta_mm,sparse,dense,ratio\n8,1,"));
    }

    #[test]
    fn dense_cells_tolerates_representation_error() {
        assert_eq!(dense_cells(0.3, 0.002), 150);
        assert_eq!(dense_cells(0.3, 0.1), 3);
        assert_eq!(dense_cells(0.301, 0.1), 4);
    }

    #[test]
    fn slope_of_power_law() {
        let r: [f64; 4] = [0.008, 0.004, 0.002, 0.001];
        let c: Vec<f64> = r.iter().map(|x| 5.0 * x.powi(-2)).collect();
        assert!((loglog_slope(&r, &c) - 2.0).abs() < 1e-12);
    }

    fn arb_points() -> impl Strategy<Value = Vec<(f64, f64, f64)>> {
        prop::collection::vec((-0.05f64..0.05, -0.05f64..0.05, -0.05f64..0.05), 1..200)
    }

    proptest! {
        #[test]
        fn voxelize_centers_is_idempotent(pts in arb_points()) {
            let pts: Vec<Vec3<f64>> = pts.into_iter().map(|(x, y, z)| Vec3::new(x, y, z)).collect();
            let g = voxelize(&pts, None, 0.003, o()).unwrap();
            let again = voxelize(&g.centers(), None, 0.003, o()).unwrap();
            prop_assert_eq!(g.indices(), again.indices());
        }

        #[test]
        fn coarsen_then_lift_all_preserves_indices(pts in arb_points()) {
            let pts: Vec<Vec3<f64>> = pts.into_iter().map(|(x, y, z)| Vec3::new(x, y, z)).collect();
            let g = voxelize(&pts, None, 0.002, o()).unwrap();
            let c = coarsen(&g, 10).unwrap();
            // brute-force distinct parent count
            let distinct: HashSet<VoxelIndex> = g.indices().iter().map(|&v| [v[0].div_euclid(10), v[1].div_euclid(10), v[2].div_euclid(10)]).collect();
            prop_assert_eq!(c.grid.len(), distinct.len());
            let l = lift_and_filter(&g, &c.grid, &distinct, 10).unwrap();
            prop_assert_eq!(l.grid.indices(), g.indices());
        }

        #[test]
        fn lift_random_keep_matches_brute_force(pts in arb_points(), mask in prop::collection::vec(any::<bool>(), 64)) {
            let pts: Vec<Vec3<f64>> = pts.into_iter().map(|(x, y, z)| Vec3::new(x, y, z)).collect();
            let g = voxelize(&pts, None, 0.002, o()).unwrap();
            let c = coarsen(&g, 10).unwrap();
            let kept: HashSet<VoxelIndex> = c.grid.indices().iter().enumerate().filter(|(i, _)| mask[i % 64]).map(|(_, &v)| v).collect();
            let l = lift_and_filter(&g, &c.grid, &kept, 10).unwrap();
            let brute: Vec<VoxelIndex> = g.indices().iter().copied().filter(|v| kept.contains(&[v[0].div_euclid(10), v[1].div_euclid(10), v[2].div_euclid(10)])).collect();
            prop_assert_eq!(l.grid.indices(), &brute[..]);
        }

        #[test]
        fn windows_partition_rows(pts in arb_points(), w in 1usize..9) {
            let pts: Vec<Vec3<f64>> = pts.into_iter().map(|(x, y, z)| Vec3::new(x, y, z)).collect();
            let g = voxelize(&pts, None, 0.002, o()).unwrap();
            let wins = partition_windows(g.indices(), w).unwrap();
            let mut seen = vec![0usize; g.len()];
            for win in &wins {
                for &r in &win.rows {
                    seen[r] += 1;
                    let v = g.indices()[r];
                    let wi = w as i32;
                    prop_assert_eq!(win.id, [v[0].div_euclid(wi), v[1].div_euclid(wi), v[2].div_euclid(wi)]);
                }
            }
            prop_assert!(seen.iter().all(|&s| s == 1));
        }
    }
}
