//! Pre-alignment from the intermediate scores, bilateral 3D matching and
//! paired-feature fusion.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::geometry::{nearest_points, Point3, PointCloud, RigidTransform};
use crate::weights::{BoundWeights, Linear};

/// Weighted least-squares rigid fit `min Σ w_i ‖R s_i + t - d_i‖²`.
/// Weights need not be normalized but must be non-negative with a positive sum.
pub fn weighted_kabsch(src: &[Point3], dst: &[Point3], w: &[f64]) -> Result<RigidTransform> {
    if src.len() != dst.len() || src.len() != w.len() {
        return Err(shape_err(
            "weighted_kabsch",
            format!("{} sources, {} targets, {} weights", src.len(), dst.len(), w.len()),
        ));
    }
    if src.len() < 3 {
        return Err(Error::DegenerateGeometry(format!("{} pairs, need at least 3", src.len())));
    }
    if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidArgument("weights must be finite and non-negative".into()));
    }
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateGeometry("all weights are zero".into()));
    }
    let cs = src.iter().zip(w).map(|(p, wi)| p * *wi).sum::<Vector3<f64>>() / total;
    let cd = dst.iter().zip(w).map(|(p, wi)| p * *wi).sum::<Vector3<f64>>() / total;

    let mut cov_s = Matrix3::zeros();
    let mut h = Matrix3::zeros();
    for ((s, d), wi) in src.iter().zip(dst).zip(w) {
        let (a, b) = (s - cs, d - cd);
        cov_s += a * a.transpose() * (*wi / total);
        h += a * b.transpose() * (*wi / total);
    }
    let mut ev = SymmetricEigen::new(cov_s).eigenvalues;
    ev.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= ev[0] * 1e-12 {
        return Err(Error::DegenerateGeometry("source points are collinear or coincident".into()));
    }

    let scale = (ev[0] * ev[0] + ev[1] * ev[1] + ev[2] * ev[2]).sqrt();
    let rotation = if h.norm() <= scale * 1e-15 {
        // Targets collapsed to one point: every rotation fits equally well.
        Matrix3::identity()
    } else {
        let svd = h.svd(true, true);
        let u = svd.u.expect("requested U");
        let v = svd.v_t.expect("requested Vᵀ").transpose();
        let sign = (v * u.transpose()).determinant().signum();
        v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign)) * u.transpose()
    };
    Ok(RigidTransform {
        rotation,
        translation: cd - rotation * cs,
    })
}

fn row_softmax(s: &Tensor<f64>) -> Tensor<f64> {
    let (m, n) = (s.rows(), s.cols());
    let mut out = s.clone();
    for i in 0..m {
        let row = &mut out.data_mut()[i * n..(i + 1) * n];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// Rigid transform from soft assignments: targets `ŷ_i = Σ_j P_ij y_j` with
/// `P = softmax_row(S)` and confidence weights `w_i ∝ max_j P_ij`.
pub fn weighted_procrustes(x: &PointCloud, y: &PointCloud, s: &Tensor<f64>) -> Result<RigidTransform> {
    x.ensure_pipeline_ready("source")?;
    y.ensure_pipeline_ready("target")?;
    if s.shape() != [x.len(), y.len()] {
        return Err(shape_err(
            "weighted_procrustes",
            format!("scores {:?} for {} x {} points", s.shape(), x.len(), y.len()),
        ));
    }
    if !s.is_finite() {
        return Err(Error::NonFinite { op: "weighted_procrustes" });
    }
    let p = row_softmax(s);
    let n = y.len();
    let mut targets = Vec::with_capacity(x.len());
    let mut weights = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let row = &p.data()[i * n..(i + 1) * n];
        targets.push(row.iter().zip(y.points()).map(|(pij, yj)| yj * *pij).sum::<Vector3<f64>>());
        weights.push(row.iter().copied().fold(0.0, f64::max));
    }
    weighted_kabsch(x.points(), &targets, &weights)
}

/// Nearest-neighbour maps in both directions after warping the source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BilateralMatch {
    /// For each source point, the matched target index.
    pub src_to_tgt: Vec<usize>,
    /// For each target point, the matched source index.
    pub tgt_to_src: Vec<usize>,
}

/// Where the bilateral matches came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchSource {
    /// 3D nearest neighbours after repositioning.
    WarpedNearestNeighbour,
    /// Row and column argmax of the intermediate score matrix.
    ScoreArgmax,
}

pub fn warp_and_match(x: &PointCloud, y: &PointCloud, t: &RigidTransform) -> Result<BilateralMatch> {
    let warped: Vec<Point3> = x.points().iter().map(|p| t.apply_point(p)).collect();
    Ok(BilateralMatch {
        src_to_tgt: nearest_points(&warped, y.points())?,
        tgt_to_src: nearest_points(y.points(), &warped)?,
    })
}

/// Matching without repositioning: row-wise and column-wise argmax of `Ŝ`
/// (lowest index on ties).
pub fn argmax_match<T: Real>(s: &Tensor<T>) -> Result<BilateralMatch> {
    if s.rank() != 2 || s.numel() == 0 {
        return Err(shape_err("argmax_match", format!("scores {:?}", s.shape())));
    }
    let (m, n) = (s.rows(), s.cols());
    let mut row_best = vec![(T::neg_infinity(), 0usize); m];
    let mut col_best = vec![(T::neg_infinity(), 0usize); n];
    for i in 0..m {
        for j in 0..n {
            let v = s.at(i, j);
            if v > row_best[i].0 {
                row_best[i] = (v, j);
            }
            if v > col_best[j].0 {
                col_best[j] = (v, i);
            }
        }
    }
    Ok(BilateralMatch {
        src_to_tgt: row_best.into_iter().map(|b| b.1).collect(),
        tgt_to_src: col_best.into_iter().map(|b| b.1).collect(),
    })
}

/// Bound `W`, `b` of one fusion direction.
#[derive(Debug, Clone, Copy)]
pub struct FusionWeights {
    pub linear: Linear,
}

impl FusionWeights {
    /// Returns the `(X <- Y, Y <- X)` pair.
    pub fn bind(w: &BoundWeights) -> Result<(Self, Self)> {
        Ok((
            FusionWeights { linear: w.linear("fusion_xy")? },
            FusionWeights { linear: w.linear("fusion_yx")? },
        ))
    }
}

/// `W [ĥ_src_i, ĥ_tgt_map(i)] + b`.
pub fn fuse_pair_features<T: Real>(
    tape: &mut Tape<T>,
    h_src: Var,
    h_tgt: Var,
    map: &[usize],
    w: &FusionWeights,
) -> Result<Var> {
    let rows = tape.shape(h_src)[0];
    if map.len() != rows {
        return Err(shape_err("fuse_pair_features", format!("map of {} for {} rows", map.len(), rows)));
    }
    let partner = tape.gather_rows(h_tgt, map)?;
    let cat = tape.concat(&[h_src, partner], 1)?;
    w.linear.apply(tape, cat)
}
