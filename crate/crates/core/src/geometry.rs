//! Neighborhoods, covariance features and per-view viewing conditions.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::PI;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::camera::CameraView;
use crate::scene_io::PointCloud;

/// Number of viewing-condition descriptors.
pub const N_CONDITIONS: usize = 8;

/// Descriptor names, in storage order.
pub const CONDITION_NAMES: [&str; N_CONDITIONS] = [
    "depth_norm",
    "linearity",
    "planarity",
    "scattering",
    "view_angle_cos",
    "pixel_row",
    "local_density",
    "covisibility",
];

pub const DEFAULT_KNN: usize = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("k-NN needs at least two points, got {0}")]
    DegenerateCloud(usize),
    #[error("no local geometry for point {0}")]
    MissingGeometry(u32),
}

/// Exact k nearest neighbors of every point (self excluded), nearest first;
/// equal distances are ordered by id.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborIndex {
    k: usize,
    ids: Vec<u32>,
    dists: Vec<f64>,
}

impl NeighborIndex {
    /// Index with no neighbors for any of `n` points.
    pub fn empty(n: usize) -> Self {
        let _ = n;
        Self {
            k: 0,
            ids: Vec::new(),
            dists: Vec::new(),
        }
    }

    /// Neighbors per point: `min(knn_k, N - 1)`.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.ids.len() / self.k
        }
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn neighbors(&self, p: u32) -> &[u32] {
        if self.k == 0 {
            return &[];
        }
        let s = p as usize * self.k;
        &self.ids[s..s + self.k]
    }

    pub fn distances(&self, p: u32) -> &[f64] {
        if self.k == 0 {
            return &[];
        }
        let s = p as usize * self.k;
        &self.dists[s..s + self.k]
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    id: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then_with(|| self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Uniform bucketing of point ids.
struct PointGrid {
    min: [f64; 3],
    cell: f64,
    dims: [i64; 3],
    starts: Vec<u32>,
    ids: Vec<u32>,
}

impl PointGrid {
    fn build(points: &[[f64; 3]], per_cell: usize) -> Self {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        let extent: Vec<f64> = (0..3).map(|a| (max[a] - min[a]).max(0.0)).collect();
        let largest = extent.iter().cloned().fold(0.0, f64::max).max(1e-9);
        let target_cells = (points.len() / per_cell.max(1)).max(1) as f64;
        let cells_for = |cell: f64| -> f64 { extent.iter().map(|e| (e / cell).floor() + 1.0).product() };
        // bisect on log(cell) so that flat and collinear clouds get sensible cells
        let (mut lo, mut hi) = (largest / 1024.0, largest * 2.0);
        for _ in 0..60 {
            let mid = (lo * hi).sqrt();
            if cells_for(mid) > target_cells {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let cell = hi;
        let dims = [0, 1, 2].map(|a| (extent[a] / cell).floor() as i64 + 1);
        let n_cells = (dims[0] * dims[1] * dims[2]) as usize;
        let cell_of = |p: &[f64; 3]| -> usize {
            let c = [0, 1, 2].map(|a| (((p[a] - min[a]) / cell) as i64).clamp(0, dims[a] - 1));
            ((c[2] * dims[1] + c[1]) * dims[0] + c[0]) as usize
        };
        let mut starts = vec![0u32; n_cells + 1];
        for p in points {
            starts[cell_of(p) + 1] += 1;
        }
        for i in 0..n_cells {
            starts[i + 1] += starts[i];
        }
        let mut fill = starts.clone();
        let mut ids = vec![0u32; points.len()];
        for (i, p) in points.iter().enumerate() {
            let c = cell_of(p);
            ids[fill[c] as usize] = i as u32;
            fill[c] += 1;
        }
        Self {
            min,
            cell,
            dims,
            starts,
            ids,
        }
    }

    fn coords(&self, p: &[f64; 3]) -> [i64; 3] {
        [0, 1, 2].map(|a| (((p[a] - self.min[a]) / self.cell) as i64).clamp(0, self.dims[a] - 1))
    }

    fn bucket(&self, c: [i64; 3]) -> &[u32] {
        let i = ((c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]) as usize;
        &self.ids[self.starts[i] as usize..self.starts[i + 1] as usize]
    }

    /// Lower bound on the distance from `p` to any cell outside the cube of
    /// Chebyshev radius `ring` around `p`'s cell.
    fn ring_clearance(&self, p: &[f64; 3], c: [i64; 3], ring: i64) -> f64 {
        (0..3)
            .map(|a| {
                let lo = self.min[a] + (c[a] - ring) as f64 * self.cell;
                let hi = self.min[a] + (c[a] + ring + 1) as f64 * self.cell;
                let below = if c[a] - ring <= 0 { f64::INFINITY } else { p[a] - lo };
                let above = if c[a] + ring >= self.dims[a] - 1 { f64::INFINITY } else { hi - p[a] };
                below.min(above)
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn knn(&self, points: &[[f64; 3]], query: usize, k: usize) -> Vec<Candidate> {
        let p = &points[query];
        let c = self.coords(p);
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        let max_ring = self.dims.iter().copied().max().unwrap_or(1);
        for ring in 0..=max_ring {
            let span = |a: usize| (-ring).max(-c[a])..=ring.min(self.dims[a] - 1 - c[a]);
            for dz in span(2) {
                for dy in span(1) {
                    let shell = dz.abs() == ring || dy.abs() == ring;
                    for dx in span(0) {
                        if !shell && dx.abs() != ring {
                            continue;
                        }
                        let cc = [c[0] + dx, c[1] + dy, c[2] + dz];
                        for &id in self.bucket(cc) {
                            if id as usize == query {
                                continue;
                            }
                            let q = &points[id as usize];
                            let d2 = (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)
                                + (q[2] - p[2]).powi(2);
                            let cand = Candidate { d2, id };
                            if heap.len() < k {
                                heap.push(cand);
                            } else if cand < *heap.peek().unwrap() {
                                heap.pop();
                                heap.push(cand);
                            }
                        }
                    }
                }
            }
            let clearance = self.ring_clearance(p, c, ring);
            if heap.len() == k && heap.peek().unwrap().d2 < clearance * clearance {
                break;
            }
            if clearance.is_infinite() {
                break;
            }
        }
        heap.into_sorted_vec()
    }
}

/// Exact k-NN for every point of the cloud.
pub fn build_knn(cloud: &PointCloud, knn_k: usize) -> Result<NeighborIndex, GeometryError> {
    let all: Vec<u32> = (0..cloud.len() as u32).collect();
    build_knn_for(cloud, knn_k, &all)
}

/// Exact k-NN rows for `queries` only; other rows are left empty (filled with
/// the query's own id and zero distance).
pub fn build_knn_for(
    cloud: &PointCloud,
    knn_k: usize,
    queries: &[u32],
) -> Result<NeighborIndex, GeometryError> {
    let n = cloud.len();
    if n < 2 {
        return Err(GeometryError::DegenerateCloud(n));
    }
    let k = knn_k.min(n - 1);
    let grid = PointGrid::build(&cloud.positions, 8);
    let mut ids = vec![0u32; n * k];
    let mut dists = vec![0.0f64; n * k];
    for p in 0..n {
        ids[p * k..(p + 1) * k].fill(p as u32);
    }
    let rows: Vec<(u32, Vec<Candidate>)> = queries
        .par_iter()
        .map(|&q| (q, grid.knn(&cloud.positions, q as usize, k)))
        .collect();
    for (q, row) in rows {
        let s = q as usize * k;
        for (j, cand) in row.into_iter().enumerate() {
            ids[s + j] = cand.id;
            dists[s + j] = cand.d2.sqrt();
        }
    }
    Ok(NeighborIndex { k, ids, dists })
}

/// Covariance eigen-features of a neighborhood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalGeometry {
    pub linearity: f64,
    pub planarity: f64,
    pub scattering: f64,
    /// Unit eigenvector of the smallest eigenvalue; sign is arbitrary.
    pub normal: [f64; 3],
    /// Distance to the farthest of the k neighbors.
    pub r_k: f64,
}

/// Eigen-features from the covariance of `p` and its neighbors:
/// `(l1 - l2) / l1`, `(l2 - l3) / l1`, `l3 / l1` for `l1 >= l2 >= l3`.
pub fn eigen_features(cloud: &PointCloud, nbrs: &NeighborIndex, p: u32) -> LocalGeometry {
    let ids = nbrs.neighbors(p);
    let pts = std::iter::once(p)
        .chain(ids.iter().copied())
        .map(|i| Vector3::from(cloud.positions[i as usize]));
    let n = ids.len() + 1;
    let mean = pts.clone().fold(Vector3::zeros(), |a, v| a + v) / n as f64;
    let cov = pts.fold(Matrix3::zeros(), |a, v| {
        let d = v - mean;
        a + d * d.transpose()
    }) / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let l = order.map(|i| eig.eigenvalues[i].max(0.0));
    let normal = eig.eigenvectors.column(order[2]).normalize();
    let (linearity, planarity, scattering) = if l[0] > 0.0 {
        let lin = (l[0] - l[1]) / l[0];
        let pla = (l[1] - l[2]) / l[0];
        (lin, pla, 1.0 - lin - pla)
    } else {
        (0.0, 0.0, 0.0)
    };
    let normal = if normal.iter().all(|v| v.is_finite()) {
        [normal.x, normal.y, normal.z]
    } else {
        [0.0, 0.0, 1.0]
    };
    LocalGeometry {
        linearity,
        planarity,
        scattering,
        normal,
        r_k: nbrs.distances(p).last().copied().unwrap_or(0.0),
    }
}

/// The eight descriptors of one point seen in one image, in
/// [`CONDITION_NAMES`] order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewingConditions(pub [f32; N_CONDITIONS]);

impl ViewingConditions {
    pub fn depth_norm(&self) -> f32 {
        self.0[0]
    }
    pub fn view_angle_cos(&self) -> f32 {
        self.0[4]
    }
    pub fn pixel_row(&self) -> f32 {
        self.0[5]
    }
    pub fn local_density(&self) -> f32 {
        self.0[6]
    }
    /// Fraction of the k neighbors also seen in the image (the complement of
    /// an occlusion rate).
    pub fn covisibility(&self) -> f32 {
        self.0[7]
    }
}

/// Descriptors of point `p` observed at pixel row `v` and distance `depth` in
/// `view`. `seen_in_view[q]` tells whether point `q` has an entry in the same
/// image.
#[allow(clippy::too_many_arguments)]
pub fn viewing_conditions(
    cloud: &PointCloud,
    p: u32,
    v: u32,
    depth: f64,
    view: &CameraView,
    geom: &LocalGeometry,
    nbrs: &NeighborIndex,
    seen_in_view: &[bool],
    r_max: f64,
) -> ViewingConditions {
    let pos = Vector3::from(cloud.positions[p as usize]);
    let ray = pos - view.center();
    let mut normal = Vector3::from(geom.normal);
    if normal.dot(&ray) > 0.0 {
        normal = -normal;
    }
    let ray_len = ray.norm();
    let cos = if ray_len > 0.0 {
        (ray.dot(&normal) / ray_len).abs().min(1.0)
    } else {
        1.0
    };
    let (_, h) = view.size();
    let c = cloud.resolution;
    let ids = nbrs.neighbors(p);
    let covis = if ids.is_empty() {
        0.0
    } else {
        ids.iter().filter(|&&q| seen_in_view[q as usize]).count() as f64 / ids.len() as f64
    };
    ViewingConditions([
        (depth / r_max) as f32,
        geom.linearity as f32,
        geom.planarity as f32,
        geom.scattering as f32,
        cos as f32,
        (v as f64 / h as f64) as f32,
        (PI * geom.r_k * geom.r_k / (c * c)) as f32,
        covis as f32,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{CameraModel, Pose};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(points: Vec<[f64; 3]>) -> PointCloud {
        PointCloud::new(points, 0.05).unwrap()
    }

    #[test]
    fn collinear_k1() {
        let c = cloud(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        let nn = build_knn(&c, 1).unwrap();
        assert_eq!(nn.neighbors(0), &[1]);
        assert_eq!(nn.neighbors(1), &[0]);
        assert_eq!(nn.neighbors(2), &[1]);
        assert_eq!(nn.distances(2), &[2.0]);
    }

    #[test]
    fn k_is_clamped() {
        let c = cloud(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]);
        let nn = build_knn(&c, 10).unwrap();
        assert_eq!(nn.k(), 2);
        assert_eq!(nn.neighbors(0), &[1, 2]);
        assert!(matches!(
            build_knn(&cloud(vec![[0.0; 3]]), 3),
            Err(GeometryError::DegenerateCloud(1))
        ));
    }

    #[test]
    fn matches_brute_force_on_uniform_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<[f64; 3]> = (0..1000)
            .map(|_| [rng.gen(), rng.gen::<f64>() * 2.0, rng.gen::<f64>() * 0.5])
            .collect();
        let c = cloud(pts.clone());
        let nn = build_knn(&c, 50).unwrap();
        for p in 0..pts.len() {
            let mut all: Vec<(f64, u32)> = (0..pts.len())
                .filter(|&q| q != p)
                .map(|q| {
                    let d2: f64 = (0..3).map(|a| (pts[p][a] - pts[q][a]).powi(2)).sum();
                    (d2, q as u32)
                })
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let expect: Vec<u32> = all[..50].iter().map(|x| x.1).collect();
            assert_eq!(nn.neighbors(p as u32), expect.as_slice(), "point {p}");
        }
    }

    #[test]
    fn ties_are_broken_by_id() {
        let pts = vec![
            [0.0; 3],
            [0.0, 0.0, -1.0],
            [0.0, 1.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, -1.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
        ];
        let nn = build_knn(&cloud(pts), 3).unwrap();
        assert_eq!(nn.neighbors(0), &[1, 2, 3]);
    }

    #[test]
    fn eigen_feature_extremes() {
        let line = cloud((0..20).map(|i| [i as f64 * 0.1, 0.0, 0.0]).collect());
        let g = eigen_features(&line, &build_knn(&line, 10).unwrap(), 5);
        assert_relative_eq!(g.linearity, 1.0, epsilon = 1e-9);
        assert_relative_eq!(g.planarity, 0.0, epsilon = 1e-9);
        assert_relative_eq!(g.scattering, 0.0, epsilon = 1e-9);

        // square lattice ring around the center: in-plane isotropic
        let mut pts = vec![[0.0, 0.0, 0.0]];
        for i in 0..8 {
            let a = i as f64 * std::f64::consts::FRAC_PI_4;
            pts.push([a.cos(), a.sin(), 0.0]);
        }
        let plane = cloud(pts);
        let g = eigen_features(&plane, &build_knn(&plane, 8).unwrap(), 0);
        assert_relative_eq!(g.planarity, 1.0, epsilon = 1e-9);
        assert_relative_eq!(g.normal[2].abs(), 1.0, epsilon = 1e-9);
        assert_relative_eq!(g.r_k, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn gaussian_features_match_closed_form_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = rand_distr_normal(&mut rng, 1000);
        let c = cloud(pts.clone());
        let nn = build_knn(&c, 999).unwrap();
        let g = eigen_features(&c, &nn, 0);

        // covariance of all points around their mean, eigenvalues by the
        // trigonometric formula for symmetric 3x3 matrices
        let n = pts.len() as f64;
        let mean: Vec<f64> = (0..3).map(|a| pts.iter().map(|p| p[a]).sum::<f64>() / n).collect();
        let cov = |i: usize, j: usize| {
            pts.iter().map(|p| (p[i] - mean[i]) * (p[j] - mean[j])).sum::<f64>() / n
        };
        let (a11, a22, a33, a12, a13, a23) = (cov(0, 0), cov(1, 1), cov(2, 2), cov(0, 1), cov(0, 2), cov(1, 2));
        let q = (a11 + a22 + a33) / 3.0;
        let p1 = a12 * a12 + a13 * a13 + a23 * a23;
        let p2 = (a11 - q).powi(2) + (a22 - q).powi(2) + (a33 - q).powi(2) + 2.0 * p1;
        let p = (p2 / 6.0).sqrt();
        let (b11, b22, b33) = ((a11 - q) / p, (a22 - q) / p, (a33 - q) / p);
        let (b12, b13, b23) = (a12 / p, a13 / p, a23 / p);
        let det = b11 * (b22 * b33 - b23 * b23) - b12 * (b12 * b33 - b23 * b13)
            + b13 * (b12 * b23 - b22 * b13);
        let phi = (det / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
        let l1 = q + 2.0 * p * phi.cos();
        let l3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::FRAC_PI_3).cos();
        let l2 = 3.0 * q - l1 - l3;
        assert_relative_eq!(g.linearity, (l1 - l2) / l1, epsilon = 1e-9);
        assert_relative_eq!(g.planarity, (l2 - l3) / l1, epsilon = 1e-9);
        assert_relative_eq!(g.scattering, l3 / l1, epsilon = 1e-9);
        assert!(g.scattering > 0.8, "scattering {}", g.scattering);
    }

    fn rand_distr_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
        // Box-Muller
        let mut draw = || {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        };
        (0..n).map(|_| [draw(), draw(), draw()]).collect()
    }

    #[test]
    fn condition_examples() {
        let view = CameraView::new(
            0,
            CameraModel::Equirectangular {
                width: 1024,
                height: 512,
            },
            Pose::identity(),
        )
        .unwrap();
        let mut pts = vec![[0.0, 0.0, 4.0]];
        for i in 0..8 {
            let a = i as f64 * std::f64::consts::FRAC_PI_4;
            pts.push([0.05 * a.cos(), 0.05 * a.sin(), 4.0]);
        }
        let c = cloud(pts);
        let nn = build_knn(&c, 8).unwrap();
        let g = eigen_features(&c, &nn, 0);
        let mut seen = vec![true; 9];
        let o = viewing_conditions(&c, 0, 256, 4.0, &view, &g, &nn, &seen, 8.0);
        assert_eq!(o.depth_norm(), 0.5);
        assert_eq!(o.pixel_row(), 0.5);
        assert_relative_eq!(o.view_angle_cos(), 1.0, epsilon = 1e-6);
        assert_relative_eq!(o.local_density() as f64, PI, epsilon = 1e-5);
        assert_eq!(o.covisibility(), 1.0);
        seen[1..].fill(false);
        let o = viewing_conditions(&c, 0, 256, 4.0, &view, &g, &nn, &seen, 8.0);
        assert_eq!(o.covisibility(), 0.0);
        seen[1] = true;
        seen[2] = true;
        let o = viewing_conditions(&c, 0, 256, 4.0, &view, &g, &nn, &seen, 8.0);
        assert_eq!(o.covisibility(), 0.25);
    }
}
