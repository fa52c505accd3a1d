//! Cylindrical voxelization: point to `(rho, phi, z)` bins, per-voxel max
//! pooling and per-voxel supervision.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::io::{ClassId, LabelArray, PointCloud};
use crate::{Error, Result};

/// Uniform grid over `rho in [rho_min, rho_max]`, `phi in [-pi, pi)` and
/// `z in [z_min, z_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CylGrid {
    pub rho: [f64; 2],
    pub z: [f64; 2],
    /// `(n_rho, n_phi, n_z)`
    pub bins: [usize; 3],
}

impl Default for CylGrid {
    fn default() -> Self {
        CylGrid {
            rho: [0.0, 50.0],
            z: [-4.0, 2.0],
            bins: [60, 36, 8],
        }
    }
}

impl CylGrid {
    pub fn validate(&self) -> Result<()> {
        let [rho_min, rho_max] = self.rho;
        let [z_min, z_max] = self.z;
        if !(rho_min >= 0.0 && rho_max > rho_min && rho_max.is_finite()) {
            return Err(Error::Config(format!(
                "rho range must satisfy 0 <= min < max, got {:?}",
                self.rho
            )));
        }
        if !(z_max > z_min && z_min.is_finite() && z_max.is_finite()) {
            return Err(Error::Config(format!(
                "z range must satisfy min < max, got {:?}",
                self.z
            )));
        }
        if self.bins.contains(&0) {
            return Err(Error::Config(format!("bin counts must be >= 1, got {:?}", self.bins)));
        }
        Ok(())
    }

    /// Bin widths `(d_rho, d_phi, d_z)`.
    pub fn bin_size(&self) -> [f64; 3] {
        [
            (self.rho[1] - self.rho[0]) / self.bins[0] as f64,
            2.0 * PI / self.bins[1] as f64,
            (self.z[1] - self.z[0]) / self.bins[2] as f64,
        ]
    }

    pub fn num_cells(&self) -> u64 {
        self.bins.iter().map(|&b| b as u64).product()
    }

    /// Bin triple of a cylindrical coordinate, or `None` when outside.
    pub fn bin_of(&self, rho: f64, phi: f64, z: f64) -> Option<[usize; 3]> {
        let [d_rho, d_phi, d_z] = self.bin_size();
        let axis = |v: f64, lo: f64, hi: f64, d: f64, n: usize| -> Option<usize> {
            if !(v >= lo && v <= hi) {
                return None;
            }
            Some((((v - lo) / d).floor() as usize).min(n - 1))
        };
        let i_rho = axis(rho, self.rho[0], self.rho[1], d_rho, self.bins[0])?;
        let i_z = axis(z, self.z[0], self.z[1], d_z, self.bins[2])?;
        let i_phi = (((phi + PI) / d_phi).floor().max(0.0) as usize).min(self.bins[1] - 1);
        Some([i_rho, i_phi, i_z])
    }

    pub fn cell_id(&self, [i_rho, i_phi, i_z]: [usize; 3]) -> u64 {
        ((i_rho as u64 * self.bins[1] as u64) + i_phi as u64) * self.bins[2] as u64 + i_z as u64
    }

    pub fn cell_bins(&self, id: u64) -> [usize; 3] {
        let n_z = self.bins[2] as u64;
        let n_phi = self.bins[1] as u64;
        [
            (id / (n_z * n_phi)) as usize,
            ((id / n_z) % n_phi) as usize,
            (id % n_z) as usize,
        ]
    }

    /// Cylindrical center `(rho, phi, z)` of a bin.
    pub fn cell_center(&self, [i_rho, i_phi, i_z]: [usize; 3]) -> [f64; 3] {
        let [d_rho, d_phi, d_z] = self.bin_size();
        [
            self.rho[0] + (i_rho as f64 + 0.5) * d_rho,
            -PI + (i_phi as f64 + 0.5) * d_phi,
            self.z[0] + (i_z as f64 + 0.5) * d_z,
        ]
    }
}

/// `(rho, phi, z)` with `phi` in `[-pi, pi)`; the `+pi` edge maps to `-pi`.
pub fn to_cylindrical(x: f64, y: f64, z: f64) -> (f64, f64, f64) {
    let rho = x.hypot(y);
    let mut phi = y.atan2(x);
    if phi >= PI {
        phi = -PI;
    }
    (rho, phi, z)
}

/// Point to voxel assignment for one scan.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelMapping {
    pub grid: CylGrid,
    /// Per point: index into `occupied`, or `None` when outside the grid.
    pub assignment: Vec<Option<usize>>,
    /// Occupied cell ids, strictly increasing.
    pub occupied: Vec<u64>,
    /// Member point indices per occupied voxel, increasing.
    pub members: Vec<Vec<usize>>,
}

impl VoxelMapping {
    pub fn num_voxels(&self) -> usize {
        self.occupied.len()
    }

    pub fn num_points(&self) -> usize {
        self.assignment.len()
    }

    pub fn num_outside(&self) -> usize {
        self.assignment.iter().filter(|a| a.is_none()).count()
    }
}

pub fn voxelize(cloud: &PointCloud, grid: &CylGrid) -> VoxelMapping {
    let cells: Vec<Option<u64>> = cloud
        .points
        .iter()
        .map(|p| {
            let (rho, phi, z) = to_cylindrical(p.x as f64, p.y as f64, p.z as f64);
            grid.bin_of(rho, phi, z).map(|b| grid.cell_id(b))
        })
        .collect();

    let mut by_cell: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, c) in cells.iter().enumerate() {
        if let Some(c) = c {
            by_cell.entry(*c).or_default().push(i);
        }
    }
    let occupied: Vec<u64> = by_cell.keys().copied().collect();
    let members: Vec<Vec<usize>> = by_cell.into_values().collect();
    let mut assignment = vec![None; cloud.len()];
    for (v, pts) in members.iter().enumerate() {
        for &i in pts {
            assignment[i] = Some(v);
        }
    }
    VoxelMapping {
        grid: *grid,
        assignment,
        occupied,
        members,
    }
}

/// Elementwise max over the rows in each segment of a row-major `n x dim`
/// matrix. Also returns, per `(segment, column)`, the row that won; ties go
/// to the earliest row in the segment.
///
/// Panics on an empty segment.
pub fn max_pool_segments(
    values: &[f64],
    dim: usize,
    segments: &[Vec<usize>],
) -> (Vec<f64>, Vec<usize>) {
    let mut out = Vec::with_capacity(segments.len() * dim);
    let mut arg = Vec::with_capacity(segments.len() * dim);
    for (s, rows) in segments.iter().enumerate() {
        assert!(!rows.is_empty(), "segment {s} is empty; occupied voxels have members");
        let first = rows[0];
        let base = out.len();
        out.extend_from_slice(&values[first * dim..(first + 1) * dim]);
        arg.extend(std::iter::repeat_n(first, dim));
        for &r in &rows[1..] {
            let row = &values[r * dim..(r + 1) * dim];
            for (c, &v) in row.iter().enumerate() {
                if v > out[base + c] {
                    out[base + c] = v;
                    arg[base + c] = r;
                }
            }
        }
    }
    (out, arg)
}

/// Voxel features as the per-dimension maximum over member points.
///
/// `point_feats` is row-major `n_points x dim`. Returns `n_v x dim` features
/// and the winning point index for each entry.
pub fn aggregate_features(
    point_feats: &[f64],
    dim: usize,
    mapping: &VoxelMapping,
) -> (Vec<f64>, Vec<usize>) {
    assert!(dim >= 1, "feature dimension must be >= 1");
    assert_eq!(
        point_feats.len(),
        mapping.num_points() * dim,
        "point features do not match the mapped cloud ({} points x {dim})",
        mapping.num_points()
    );
    max_pool_segments(point_feats, dim, &mapping.members)
}

/// Sorted set of known class ids and their dense training indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnownClasses {
    ids: Vec<ClassId>,
}

impl KnownClasses {
    pub fn new(mut ids: Vec<ClassId>) -> Result<Self> {
        ids.sort_unstable();
        ids.dedup();
        if ids.is_empty() {
            return Err(Error::Config("known class set is empty".into()));
        }
        Ok(KnownClasses { ids })
    }

    pub fn ids(&self) -> &[ClassId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: ClassId) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }

    pub fn id_of(&self, index: usize) -> ClassId {
        self.ids[index]
    }

    pub fn contains(&self, id: ClassId) -> bool {
        self.index_of(id).is_some()
    }
}

/// Per-voxel supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelLabels {
    /// Training index of the majority class, `None` when ignored.
    pub y_s: Vec<Option<usize>>,
    /// `true` exactly when `y_s` is a known class.
    pub known_mask: Vec<bool>,
    /// Raw majority class id per voxel.
    pub majority: Vec<ClassId>,
}

impl VoxelLabels {
    pub fn len(&self) -> usize {
        self.y_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_s.is_empty()
    }

    pub fn num_known(&self) -> usize {
        self.known_mask.iter().filter(|&&k| k).count()
    }
}

/// Majority vote per voxel, ties to the lowest class id. Voxels whose
/// majority is not a known class are ignored.
pub fn voxel_labels(labels: &LabelArray, mapping: &VoxelMapping, known: &KnownClasses) -> VoxelLabels {
    assert_eq!(
        labels.len(),
        mapping.num_points(),
        "labels are not paired with the voxelized cloud"
    );
    let mut y_s = Vec::with_capacity(mapping.num_voxels());
    let mut known_mask = Vec::with_capacity(mapping.num_voxels());
    let mut majority = Vec::with_capacity(mapping.num_voxels());
    let mut counts: BTreeMap<ClassId, usize> = BTreeMap::new();
    for pts in &mapping.members {
        counts.clear();
        for &i in pts {
            *counts.entry(labels.labels[i]).or_default() += 1;
        }
        // BTreeMap iterates ascending, so the strict comparison keeps the lowest id on ties.
        let mut best = (0, 0usize);
        for (&id, &n) in &counts {
            if n > best.1 {
                best = (id, n);
            }
        }
        let idx = known.index_of(best.0);
        y_s.push(idx);
        known_mask.push(idx.is_some());
        majority.push(best.0);
    }
    VoxelLabels {
        y_s,
        known_mask,
        majority,
    }
}

/// Copies each voxel's value to its member points; outside points get
/// `fallback`.
pub fn propagate_to_points<T: Clone>(voxel_values: &[T], mapping: &VoxelMapping, fallback: T) -> Vec<T> {
    assert_eq!(
        voxel_values.len(),
        mapping.num_voxels(),
        "expected one value per occupied voxel"
    );
    mapping
        .assignment
        .iter()
        .map(|a| match a {
            Some(v) => voxel_values[*v].clone(),
            None => fallback.clone(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::Point;
    use proptest::prelude::*;

    fn close(a: (f64, f64, f64), b: (f64, f64, f64)) -> bool {
        (a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12 && (a.2 - b.2).abs() < 1e-12
    }

    #[test]
    fn cylindrical_axis_cases() {
        assert!(close(to_cylindrical(1.0, 0.0, 0.0), (1.0, 0.0, 0.0)));
        assert!(close(to_cylindrical(0.0, 2.0, 5.0), (2.0, PI / 2.0, 5.0)));
        assert!(close(to_cylindrical(-3.0, 0.0, -1.0), (3.0, -PI, -1.0)));
        assert!(close(to_cylindrical(-3.0, -0.0, -1.0), (3.0, -PI, -1.0)));
    }

    fn grid50() -> CylGrid {
        CylGrid {
            rho: [0.0, 50.0],
            z: [-4.0, 2.0],
            bins: [50, 36, 8],
        }
    }

    fn cloud(pts: &[[f32; 3]]) -> PointCloud {
        PointCloud::new(pts.iter().map(|p| Point::new(p[0], p[1], p[2], 0.0)).collect())
    }

    #[test]
    fn uniform_rho_binning() {
        let g = grid50();
        assert_eq!(g.bin_of(1.0, 0.0, 0.0).unwrap()[0], 1);
    }

    #[test]
    fn upper_boundary_clamps_into_last_bin() {
        let g = grid50();
        assert_eq!(g.bin_of(50.0, 0.0, 0.0).unwrap()[0], 49);
        assert_eq!(g.bin_of(1.0, 0.0, 2.0).unwrap()[2], 7);
    }

    #[test]
    fn below_z_min_is_outside() {
        let m = voxelize(&cloud(&[[1.0, 0.0, -5.0], [1.0, 0.0, 0.0]]), &grid50());
        assert_eq!(m.assignment[0], None);
        assert_eq!(m.assignment[1], Some(0));
        assert_eq!(m.num_voxels(), 1);
    }

    #[test]
    fn beyond_rho_max_is_outside() {
        let m = voxelize(&cloud(&[[60.0, 0.0, 0.0]]), &grid50());
        assert_eq!(m.num_outside(), 1);
        assert_eq!(m.num_voxels(), 0);
    }

    #[test]
    fn grid_validation() {
        assert!(CylGrid::default().validate().is_ok());
        let bad = CylGrid {
            rho: [5.0, 5.0],
            ..CylGrid::default()
        };
        assert!(bad.validate().is_err());
        let bad = CylGrid {
            bins: [1, 0, 1],
            ..CylGrid::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn cell_id_round_trips() {
        let g = CylGrid::default();
        for b in [[0, 0, 0], [59, 35, 7], [3, 17, 2]] {
            assert_eq!(g.cell_bins(g.cell_id(b)), b);
        }
    }

    fn one_voxel(n: usize) -> VoxelMapping {
        voxelize(&cloud(&vec![[1.0, 0.1, 0.0]; n]), &grid50())
    }

    #[test]
    fn elementwise_max_in_one_voxel() {
        let (f, _) = aggregate_features(&[1.0, 2.0, 3.0, 0.0], 2, &one_voxel(2));
        assert_eq!(f, vec![3.0, 2.0]);
    }

    #[test]
    fn single_point_voxel_is_identity() {
        let (f, arg) = aggregate_features(&[-1.5, 4.0], 2, &one_voxel(1));
        assert_eq!(f, vec![-1.5, 4.0]);
        assert_eq!(arg, vec![0, 0]);
    }

    #[test]
    fn ties_route_to_lowest_point() {
        let (_, arg) = aggregate_features(&[5.0, 1.0, 5.0, 2.0, 5.0, 0.0], 2, &one_voxel(3));
        assert_eq!(arg, vec![0, 1]);
    }

    #[test]
    #[should_panic(expected = "empty")]
    fn empty_segment_panics() {
        max_pool_segments(&[1.0], 1, &[vec![]]);
    }

    fn known(ids: &[ClassId]) -> KnownClasses {
        KnownClasses::new(ids.to_vec()).unwrap()
    }

    #[test]
    fn majority_label() {
        let m = one_voxel(3);
        let vl = voxel_labels(&LabelArray::new(vec![4, 4, 7]), &m, &known(&[4, 7]));
        assert_eq!(vl.y_s, vec![Some(0)]);
        assert_eq!(vl.known_mask, vec![true]);
    }

    #[test]
    fn unknown_majority_is_ignored() {
        let m = one_voxel(2);
        let vl = voxel_labels(&LabelArray::new(vec![9, 9]), &m, &known(&[4, 7]));
        assert_eq!(vl.y_s, vec![None]);
        assert_eq!(vl.known_mask, vec![false]);
        assert_eq!(vl.majority, vec![9]);
    }

    #[test]
    fn label_tie_goes_to_lowest_id() {
        let m = one_voxel(2);
        let vl = voxel_labels(&LabelArray::new(vec![7, 4]), &m, &known(&[4, 7]));
        assert_eq!(vl.y_s, vec![Some(0)]);
        assert_eq!(vl.majority, vec![4]);
    }

    #[test]
    fn propagation_follows_assignment() {
        let c = cloud(&[[1.0, 0.1, 0.0], [10.0, 0.1, 0.0], [1.0, 0.1, 0.0], [1.0, 0.0, -9.0]]);
        let m = voxelize(&c, &grid50());
        assert_eq!(m.members, vec![vec![0, 2], vec![1]]);
        assert_eq!(propagate_to_points(&['u', 'v'], &m, '?'), vec!['u', 'v', 'u', '?']);
    }

    #[test]
    fn propagation_single_voxel_is_constant() {
        let m = one_voxel(4);
        assert_eq!(propagate_to_points(&[3], &m, 0), vec![3; 4]);
    }

    #[test]
    #[should_panic(expected = "one value per occupied voxel")]
    fn propagation_length_mismatch_panics() {
        propagate_to_points(&[1, 2], &one_voxel(1), 0);
    }

    fn arb_cloud() -> impl Strategy<Value = Vec<[f32; 3]>> {
        prop::collection::vec(
            (-60.0f32..60.0, -60.0f32..60.0, -6.0f32..4.0).prop_map(|(x, y, z)| [x, y, z]),
            0..200,
        )
    }

    proptest! {
        #[test]
        fn partition_covers_every_point(pts in arb_cloud()) {
            let m = voxelize(&cloud(&pts), &CylGrid::default());
            let members: usize = m.members.iter().map(Vec::len).sum();
            prop_assert_eq!(members + m.num_outside(), pts.len());
            prop_assert!(m.occupied.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(m.members.iter().all(|v| !v.is_empty()));
            for (v, pts) in m.members.iter().enumerate() {
                for &i in pts {
                    prop_assert_eq!(m.assignment[i], Some(v));
                }
            }
        }

        #[test]
        fn every_finite_point_has_a_bin_or_is_outside(
            x in -1e6f64..1e6, y in -1e6f64..1e6, z in -1e3f64..1e3
        ) {
            let g = CylGrid::default();
            let (rho, phi, z) = to_cylindrical(x, y, z);
            prop_assert!((-PI..PI).contains(&phi));
            if let Some(b) = g.bin_of(rho, phi, z) {
                prop_assert!(b[0] < g.bins[0] && b[1] < g.bins[1] && b[2] < g.bins[2]);
            } else {
                prop_assert!(rho > g.rho[1] || z < g.z[0] || z > g.z[1]);
            }
        }

        #[test]
        fn max_pool_is_permutation_invariant(
            feats in prop::collection::vec(-1e3f64..1e3, 3 * 7),
            seed in any::<u64>()
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let n = 7;
            let m = one_voxel(n);
            let (a, _) = aggregate_features(&feats, 3, &m);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let shuffled: Vec<f64> = order.iter().flat_map(|&i| feats[i * 3..i * 3 + 3].to_vec()).collect();
            let (b, _) = aggregate_features(&shuffled, 3, &m);
            prop_assert_eq!(a, b);
        }
    }
}
