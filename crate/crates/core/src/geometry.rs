//! Geometric primitives: clouds, rigid transforms, correspondences and
//! exact k-nearest-neighbour search.

use std::cmp::Ordering;

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;

/// Minimum cloud size accepted by the matching pipeline.
pub const MIN_PIPELINE_POINTS: usize = 3;

/// Ordered set of 3D points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    /// Build a cloud, rejecting non-finite coordinates.
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidInput(format!("point {} has a non-finite coordinate", i)));
        }
        Ok(PointCloud { points })
    }

    pub fn from_rows(rows: &[[f64; 3]]) -> Result<Self> {
        PointCloud::new(rows.iter().map(|r| Point3::new(r[0], r[1], r[2])).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &Point3 {
        &self.points[i]
    }

    /// Row-major `M x 3` coordinates.
    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
    }

    /// Check the size precondition for clouds entering the pipeline.
    pub fn ensure_pipeline_ready(&self, role: &str) -> Result<()> {
        if self.len() < MIN_PIPELINE_POINTS {
            return Err(Error::InvalidInput(format!(
                "{} cloud has {} points, at least {} required",
                role,
                self.len(),
                MIN_PIPELINE_POINTS
            )));
        }
        Ok(())
    }

    pub fn select(&self, idx: &[usize]) -> PointCloud {
        PointCloud {
            points: idx.iter().map(|&i| self.points[i]).collect(),
        }
    }

    pub fn centroid(&self) -> Point3 {
        let n = self.points.len().max(1) as f64;
        self.points.iter().sum::<Point3>() / n
    }
}

/// Rotation in SO(3) followed by a translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

const SO3_TOL: f64 = 1e-9;

impl RigidTransform {
    /// Validate `RᵀR = I` and `det R = +1` to 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if !(ortho <= SO3_TOL && (det - 1.0).abs() <= SO3_TOL) {
            return Err(Error::InvalidArgument(format!(
                "rotation not in SO(3): |RᵀR - I| = {:.3e}, det = {:.12}",
                ortho, det
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite translation".into()));
        }
        Ok(RigidTransform { rotation, translation })
    }

    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle_rad: f64, translation: Vector3<f64>) -> Self {
        let rotation = if axis.norm() > 0.0 {
            Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle_rad).into_inner()
        } else {
            Matrix3::identity()
        };
        RigidTransform { rotation, translation }
    }

    pub fn apply_point(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Geodesic rotation angle in degrees.
    pub fn rotation_angle_deg(&self) -> f64 {
        // Chord form; arccos of the trace loses precision near zero.
        let half = ((self.rotation - Matrix3::identity()).norm() / (2.0 * 2f64.sqrt())).clamp(0.0, 1.0);
        (2.0 * half.asin()).to_degrees()
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_homogeneous(m: &Matrix4<f64>) -> Result<Self> {
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidInput(format!("bad homogeneous bottom row {:?}", bottom)));
        }
        RigidTransform::new(m.fixed_view::<3, 3>(0, 0).into(), m.fixed_view::<3, 1>(0, 3).into())
    }
}

/// Apply a rigid transform to every point.
pub fn apply_transform(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| t.apply_point(p)).collect(),
    }
}

/// Random rigid motion with rotation angle uniform in `[0, rot_max_deg]`
/// about a uniformly distributed axis and `‖t‖ <= trans_max`.
pub fn random_rigid(seed: u64, rot_max_deg: f64, trans_max: f64) -> Result<RigidTransform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_rigid_with(&mut rng, rot_max_deg, trans_max)
}

pub(crate) fn unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n: f64 = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

pub(crate) fn random_rigid_with<R: Rng + ?Sized>(
    rng: &mut R,
    rot_max_deg: f64,
    trans_max: f64,
) -> Result<RigidTransform> {
    if !(0.0..=180.0).contains(&rot_max_deg) {
        return Err(Error::InvalidArgument(format!("rot_max {} outside [0, 180]", rot_max_deg)));
    }
    if !(trans_max >= 0.0) {
        return Err(Error::InvalidArgument(format!("trans_max {} is negative", trans_max)));
    }
    let axis = unit_vector(rng);
    let angle = rng.random::<f64>() * rot_max_deg.to_radians();
    let dir = unit_vector(rng);
    let mag = rng.random::<f64>() * trans_max;
    Ok(RigidTransform::from_axis_angle(axis, angle, dir * mag))
}

/// One putative match between source index `src` and target index `tgt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub src: usize,
    pub tgt: usize,
    pub weight: Option<f64>,
}

/// Set of correspondences without duplicate `(src, tgt)` pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorrespondenceSet {
    pairs: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn new(pairs: Vec<Correspondence>, num_src: usize, num_tgt: usize) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for c in &pairs {
            if c.src >= num_src || c.tgt >= num_tgt {
                return Err(Error::InvalidArgument(format!(
                    "correspondence ({}, {}) outside {}x{}",
                    c.src, c.tgt, num_src, num_tgt
                )));
            }
            if let Some(w) = c.weight {
                if !(0.0..=1.0).contains(&w) {
                    return Err(Error::InvalidArgument(format!("weight {} outside [0, 1]", w)));
                }
            }
            if !seen.insert((c.src, c.tgt)) {
                return Err(Error::InvalidArgument(format!("duplicate pair ({}, {})", c.src, c.tgt)));
            }
        }
        Ok(CorrespondenceSet { pairs })
    }

    /// Build from unweighted index pairs.
    pub fn from_pairs(pairs: &[(usize, usize)], num_src: usize, num_tgt: usize) -> Result<Self> {
        CorrespondenceSet::new(
            pairs
                .iter()
                .map(|&(src, tgt)| Correspondence { src, tgt, weight: None })
                .collect(),
            num_src,
            num_tgt,
        )
    }

    pub(crate) fn from_vec_unchecked(pairs: Vec<Correspondence>) -> Self {
        CorrespondenceSet { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[Correspondence] {
        &self.pairs
    }

    pub fn index_pairs(&self) -> Vec<(usize, usize)> {
        self.pairs.iter().map(|c| (c.src, c.tgt)).collect()
    }

    /// Keep the first `n` pairs.
    pub fn truncated(&self, n: usize) -> Self {
        CorrespondenceSet {
            pairs: self.pairs.iter().take(n).copied().collect(),
        }
    }
}

/// Thresholds used for ground truth and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Ground-truth match distance threshold.
    pub beta: f64,
    /// Residual threshold for a putative pair to count as an inlier.
    pub inlier_tau: f64,
    /// Inlier ratio a pair must exceed to count toward feature matching recall.
    pub fmr_eta: f64,
    pub rre_thresh: f64,
    pub rte_thresh: f64,
}

impl EvalConfig {
    pub fn synthetic() -> Self {
        EvalConfig {
            beta: 0.05,
            inlier_tau: 0.05,
            fmr_eta: 0.6,
            rre_thresh: 5.0,
            rte_thresh: 0.1,
        }
    }

    pub fn object() -> Self {
        EvalConfig {
            beta: 0.05,
            inlier_tau: 0.05,
            fmr_eta: 0.6,
            rre_thresh: 5.0,
            rte_thresh: 0.1,
        }
    }

    pub fn outdoor() -> Self {
        EvalConfig {
            beta: 0.6,
            inlier_tau: 0.6,
            fmr_eta: 0.6,
            rre_thresh: 5.0,
            rte_thresh: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.beta, self.inlier_tau, self.fmr_eta, self.rre_thresh, self.rte_thresh];
        if all.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidArgument(format!("thresholds must be positive: {:?}", self)));
        }
        if self.fmr_eta >= 1.0 {
            return Err(Error::InvalidArgument(format!("fmr_eta {} must be < 1", self.fmr_eta)));
        }
        Ok(())
    }
}

fn cmp_dist(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn knn_impl(
    query: &[f64],
    base: &[f64],
    dim: usize,
    k: usize,
    exclude_self: bool,
) -> Result<Vec<Vec<usize>>> {
    if dim == 0 || query.len() % dim != 0 || base.len() % dim != 0 {
        return Err(Error::InvalidArgument(format!(
            "knn: buffers of {} and {} values are not {}-dimensional rows",
            query.len(),
            base.len(),
            dim
        )));
    }
    if query.iter().chain(base).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("knn: non-finite input".into()));
    }
    let nb = base.len() / dim;
    let available = if exclude_self { nb.saturating_sub(1) } else { nb };
    if k > available {
        return Err(Error::InvalidArgument(format!("knn: k = {} exceeds {} candidates", k, available)));
    }
    let mut out = Vec::with_capacity(query.len() / dim);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(nb);
    for (qi, q) in query.chunks_exact(dim).enumerate() {
        cand.clear();
        cand.extend(
            base.chunks_exact(dim)
                .enumerate()
                .filter(|(bi, _)| !(exclude_self && *bi == qi))
                .map(|(bi, b)| (sq_dist(q, b), bi)),
        );
        if k == 0 {
            out.push(Vec::new());
            continue;
        }
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, cmp_dist);
            cand.truncate(k);
        }
        cand.sort_by(cmp_dist);
        out.push(cand.iter().map(|c| c.1).collect());
    }
    Ok(out)
}

/// Exact k nearest neighbours of each `dim`-dimensional query row among the
/// base rows, by ascending Euclidean distance with ties broken by lowest
/// index.
pub fn knn(query: &[f64], base: &[f64], dim: usize, k: usize) -> Result<Vec<Vec<usize>>> {
    knn_impl(query, base, dim, k, false)
}

/// Like [`knn`] over a single row set, excluding each row from its own list.
pub fn knn_excluding_self(rows: &[f64], dim: usize, k: usize) -> Result<Vec<Vec<usize>>> {
    knn_impl(rows, rows, dim, k, true)
}

/// Nearest base point for every query point (ties by lowest index).
pub fn nearest_points(query: &[Point3], base: &[Point3]) -> Result<Vec<usize>> {
    if base.is_empty() {
        return Err(Error::InvalidArgument("nearest neighbour in an empty cloud".into()));
    }
    Ok(query
        .iter()
        .map(|q| {
            let mut best = (f64::INFINITY, 0usize);
            for (j, b) in base.iter().enumerate() {
                let d = (q - b).norm_squared();
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect())
}

/// Ground-truth matches: `(i, j)` with `j` the nearest target to `T(x_i)`
/// when that distance is below `beta`. Also returns per-source inlier flags.
pub fn gt_correspondences(
    x: &PointCloud,
    y: &PointCloud,
    t_gt: &RigidTransform,
    beta: f64,
) -> Result<(CorrespondenceSet, Vec<bool>)> {
    let warped = apply_transform(x, t_gt);
    let nn = nearest_points(warped.points(), y.points())?;
    let mut pairs = Vec::new();
    let mut flags = vec![false; x.len()];
    for (i, &j) in nn.iter().enumerate() {
        if (warped.point(i) - y.point(j)).norm() < beta {
            pairs.push(Correspondence {
                src: i,
                tgt: j,
                weight: None,
            });
            flags[i] = true;
        }
    }
    Ok((CorrespondenceSet::from_vec_unchecked(pairs), flags))
}

/// Inlier flags for target points: `y_j` has a source point within `beta`
/// under the ground-truth motion.
pub fn target_inlier_flags(
    x: &PointCloud,
    y: &PointCloud,
    t_gt: &RigidTransform,
    beta: f64,
) -> Result<Vec<bool>> {
    let (_, flags) = gt_correspondences(y, x, &t_gt.inverse(), beta)?;
    Ok(flags)
}
