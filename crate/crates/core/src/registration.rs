//! From score matrices to correspondences and poses, plus evaluation
//! metrics and the Sinkhorn baseline.

use std::cmp::Ordering;

use nalgebra::Matrix3;
use rand::seq::index::sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::geometry::{gt_correspondences, Correspondence, CorrespondenceSet, EvalConfig, Point3, PointCloud, RigidTransform};
use crate::reposition::weighted_kabsch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    MutualTop1,
    TopK,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub mode: SelectionMode,
    pub k: usize,
    pub ransac_iters: usize,
    pub ransac_thresh: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            mode: SelectionMode::MutualTop1,
            k: 256,
            ransac_iters: 500,
            ransac_thresh: 0.05,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if !(self.ransac_thresh > 0.0) {
            return Err(Error::InvalidArgument("ransac_thresh must be positive".into()));
        }
        Ok(())
    }

    pub fn select(&self, s: &Tensor<f64>) -> Result<CorrespondenceSet> {
        match self.mode {
            SelectionMode::MutualTop1 => mutual_top1(s),
            SelectionMode::TopK => top_k_select(s, self.k),
        }
    }
}

fn check_scores(op: &'static str, s: &Tensor<f64>) -> Result<(usize, usize)> {
    if s.rank() != 2 {
        return Err(shape_err(op, format!("scores {:?}", s.shape())));
    }
    if !s.is_finite() {
        return Err(Error::NonFinite { op });
    }
    Ok((s.rows(), s.cols()))
}

/// Row and column argmax (lowest index on ties).
fn argmaxes(s: &Tensor<f64>) -> (Vec<usize>, Vec<usize>) {
    let (m, n) = (s.rows(), s.cols());
    let mut row = vec![0usize; m];
    let mut col = vec![0usize; n];
    for i in 0..m {
        for j in 0..n {
            let v = s.at(i, j);
            if v > s.at(i, row[i]) {
                row[i] = j;
            }
            if v > s.at(col[j], j) {
                col[j] = i;
            }
        }
    }
    (row, col)
}

fn weight_of(v: f64) -> Option<f64> {
    (0.0..=1.0).contains(&v).then_some(v)
}

/// Mutual nearest entries, ordered by descending score (ties by `(i, j)`).
fn mutual_entries(s: &Tensor<f64>) -> Vec<(usize, usize)> {
    let (row, col) = argmaxes(s);
    let mut out: Vec<(usize, usize)> = row
        .iter()
        .enumerate()
        .filter(|&(i, &j)| col[j] == i)
        .map(|(i, &j)| (i, j))
        .collect();
    out.sort_by(|a, b| {
        s.at(b.0, b.1)
            .partial_cmp(&s.at(a.0, a.1))
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    });
    out
}

fn to_set(s: &Tensor<f64>, pairs: &[(usize, usize)]) -> CorrespondenceSet {
    CorrespondenceSet::from_vec_unchecked(
        pairs
            .iter()
            .map(|&(i, j)| Correspondence {
                src: i,
                tgt: j,
                weight: weight_of(s.at(i, j)),
            })
            .collect(),
    )
}

/// Pairs `(i, j)` where `j` is the argmax of row `i` and `i` the argmax of
/// column `j`, listed by source index. Weights are the scores when those lie
/// in `[0, 1]`.
pub fn mutual_top1(s: &Tensor<f64>) -> Result<CorrespondenceSet> {
    check_scores("mutual_top1", s)?;
    let mut pairs = mutual_entries(s);
    pairs.sort();
    Ok(to_set(s, &pairs))
}

/// The `k` highest-scoring mutual pairs, best first.
pub fn top_k_select(s: &Tensor<f64>, k: usize) -> Result<CorrespondenceSet> {
    check_scores("top_k_select", s)?;
    if k == 0 {
        return Ok(CorrespondenceSet::default());
    }
    let mut pairs = mutual_entries(s);
    pairs.truncate(k);
    Ok(to_set(s, &pairs))
}

/// Weighted Procrustes over hard pairs; missing weights count as 1.
pub fn estimate_pose(corr: &CorrespondenceSet, x: &PointCloud, y: &PointCloud) -> Result<RigidTransform> {
    if corr.len() < 3 {
        return Err(Error::DegenerateGeometry(format!("{} correspondences, need at least 3", corr.len())));
    }
    let mut src = Vec::with_capacity(corr.len());
    let mut dst = Vec::with_capacity(corr.len());
    let mut w = Vec::with_capacity(corr.len());
    for c in corr.pairs() {
        if c.src >= x.len() || c.tgt >= y.len() {
            return Err(Error::InvalidArgument(format!("pair ({}, {}) out of range", c.src, c.tgt)));
        }
        src.push(*x.point(c.src));
        dst.push(*y.point(c.tgt));
        w.push(c.weight.unwrap_or(1.0));
    }
    // Collinear targets leave the rotation about their line undetermined.
    weighted_kabsch(&dst, &src, &w)?;
    weighted_kabsch(&src, &dst, &w)
}

/// Outcome of robust estimation: a model, or no consensus.
#[derive(Debug, Clone, PartialEq)]
pub enum RansacOutcome {
    Model { transform: RigidTransform, inliers: usize },
    NoConsensus,
}

/// Three-point RANSAC followed by Procrustes refinement on the inliers.
pub fn ransac_pose(
    corr: &CorrespondenceSet,
    x: &PointCloud,
    y: &PointCloud,
    cfg: &MatchConfig,
    seed: u64,
) -> Result<RansacOutcome> {
    cfg.validate()?;
    let n = corr.len();
    if n < 3 {
        return Err(Error::DegenerateGeometry(format!("{} correspondences, need at least 3", n)));
    }
    let pairs = corr.pairs();
    let residual_ok = |t: &RigidTransform, c: &Correspondence| {
        (t.apply_point(x.point(c.src)) - y.point(c.tgt)).norm() < cfg.ransac_thresh
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, RigidTransform)> = None;
    for _ in 0..cfg.ransac_iters {
        let idx = sample(&mut rng, n, 3);
        let src: Vec<Point3> = idx.iter().map(|i| *x.point(pairs[i].src)).collect();
        let dst: Vec<Point3> = idx.iter().map(|i| *y.point(pairs[i].tgt)).collect();
        let Ok(t) = weighted_kabsch(&src, &dst, &[1.0; 3]) else {
            continue;
        };
        let count = pairs.iter().filter(|c| residual_ok(&t, c)).count();
        if best.as_ref().is_none_or(|b| count > b.0) {
            best = Some((count, t));
        }
    }
    let Some((count, t)) = best else {
        return Ok(RansacOutcome::NoConsensus);
    };
    if count < 3 {
        return Ok(RansacOutcome::NoConsensus);
    }
    let inliers: Vec<Correspondence> = pairs.iter().filter(|c| residual_ok(&t, c)).copied().collect();
    match estimate_pose(&CorrespondenceSet::from_vec_unchecked(inliers), x, y) {
        Ok(refined) => Ok(RansacOutcome::Model { transform: refined, inliers: count }),
        Err(Error::DegenerateGeometry(_)) => Ok(RansacOutcome::Model { transform: t, inliers: count }),
        Err(e) => Err(e),
    }
}

fn logsumexp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + v.map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn on the kernel `exp(Ŝ)`. With `slack`, a dustbin row
/// and column holding that log-score are appended and excluded from their own
/// normalization, giving an `(M+1) x (N+1)` result.
pub fn sinkhorn_baseline(s_hat: &Tensor<f64>, iters: usize, slack: Option<f64>) -> Result<Tensor<f64>> {
    let (m, n) = check_scores("sinkhorn_baseline", s_hat)?;
    if iters == 0 {
        return Err(Error::InvalidArgument("sinkhorn needs at least one iteration".into()));
    }
    let (rows, cols, norm_rows, norm_cols) = match slack {
        None => (m, n, m, n),
        Some(v) => {
            if !v.is_finite() {
                return Err(Error::InvalidArgument("slack must be finite".into()));
            }
            (m + 1, n + 1, m, n)
        }
    };
    let mut l = vec![slack.unwrap_or(0.0); rows * cols];
    for i in 0..m {
        l[i * cols..i * cols + n].copy_from_slice(s_hat.row(i));
    }
    for _ in 0..iters {
        for i in 0..norm_rows {
            let row = &mut l[i * cols..(i + 1) * cols];
            let z = logsumexp(row.iter().copied());
            row.iter_mut().for_each(|v| *v -= z);
        }
        for j in 0..norm_cols {
            let z = logsumexp((0..rows).map(|i| l[i * cols + j]));
            for i in 0..rows {
                l[i * cols + j] -= z;
            }
        }
    }
    Tensor::new(vec![rows, cols], l.into_iter().map(f64::exp).collect())
}

/// Geodesic angle between two rotations in degrees, computed from the chord
/// `‖A - B‖_F = 2√2 sin(θ/2)`, which stays accurate near zero where the
/// trace form `arccos((tr(AᵀB) - 1) / 2)` loses half its digits.
pub fn rotation_error_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let chord = (a - b).norm();
    let half = (chord / (2.0 * 2f64.sqrt())).clamp(0.0, 1.0);
    (2.0 * half.asin()).to_degrees()
}

/// Per-pair evaluation numbers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rre: f64,
    pub rte: f64,
    pub rr: bool,
    pub ir: f64,
    /// `ir > fmr_eta`.
    pub fmr: bool,
    /// Fraction of the smaller cloud with a ground-truth partner within beta.
    pub overlap: f64,
    pub num_corr: usize,
    pub runtime: f64,
}

/// Inlier ratio of `corr` under the ground-truth motion.
pub fn inlier_ratio(corr: &CorrespondenceSet, x: &PointCloud, y: &PointCloud, t_gt: &RigidTransform, tau: f64) -> f64 {
    if corr.is_empty() {
        return 0.0;
    }
    let good = corr
        .pairs()
        .iter()
        .filter(|c| (t_gt.apply_point(x.point(c.src)) - y.point(c.tgt)).norm() < tau)
        .count();
    good as f64 / corr.len() as f64
}

/// Evaluate an estimate. A failed estimate (`None`) scores RRE 180, RTE
/// infinite and RR false.
pub fn compute_metrics(
    t_est: Option<&RigidTransform>,
    t_gt: &RigidTransform,
    corr: &CorrespondenceSet,
    x: &PointCloud,
    y: &PointCloud,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    cfg.validate()?;
    let (rre, rte) = match t_est {
        Some(t) => (
            rotation_error_deg(&t_gt.rotation, &t.rotation),
            (t.translation - t_gt.translation).norm(),
        ),
        None => (180.0, f64::INFINITY),
    };
    let ir = inlier_ratio(corr, x, y, t_gt, cfg.inlier_tau);
    let (gt, _) = gt_correspondences(x, y, t_gt, cfg.beta)?;
    Ok(MetricsReport {
        rre,
        rte,
        rr: rre < cfg.rre_thresh && rte < cfg.rte_thresh,
        ir,
        fmr: ir > cfg.fmr_eta,
        overlap: gt.len() as f64 / x.len().min(y.len()).max(1) as f64,
        num_corr: corr.len(),
        runtime: 0.0,
    })
}

/// Registration recall and feature matching recall over a set of pairs.
pub fn recall(reports: &[MetricsReport]) -> (f64, f64) {
    if reports.is_empty() {
        return (0.0, 0.0);
    }
    let n = reports.len() as f64;
    (
        reports.iter().filter(|r| r.rr).count() as f64 / n,
        reports.iter().filter(|r| r.fmr).count() as f64 / n,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply_transform, random_rigid};
    use nalgebra::Vector3;
    use rand::Rng;

    fn mat(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new((0..n).map(|_| Point3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect()).unwrap()
    }

    #[test]
    fn mutual_top1_examples() {
        let s = mat(&[&[0.9, 0.1], &[0.2, 0.8]]);
        assert_eq!(mutual_top1(&s).unwrap().index_pairs(), vec![(0, 0), (1, 1)]);
        let s = mat(&[&[0.9, 0.8], &[0.7, 0.1]]);
        assert_eq!(mutual_top1(&s).unwrap().index_pairs(), vec![(0, 0)]);
        let perm = [2, 0, 3, 1];
        let s = Tensor::from_fn(&[4, 4], |k| if perm[k / 4] == k % 4 { 1.0 } else { 0.0 });
        let got = mutual_top1(&s).unwrap();
        assert_eq!(got.index_pairs(), vec![(0, 2), (1, 0), (2, 3), (3, 1)]);
        assert_eq!(got.pairs()[0].weight, Some(1.0));
    }

    #[test]
    fn top_k_examples() {
        let perm = [1, 2, 0];
        let s = Tensor::from_fn(&[3, 3], |k| if perm[k / 3] == k % 3 { 0.5 + 0.1 * (k / 3) as f64 } else { 0.0 });
        let all = top_k_select(&s, 9).unwrap();
        assert_eq!(all.len(), 3);
        let one = top_k_select(&s, 1).unwrap();
        assert_eq!(one.index_pairs(), vec![(2, 0)]);
        assert!(top_k_select(&s, 0).unwrap().is_empty());
    }

    #[test]
    fn sinkhorn_examples() {
        let p = mat(&[&[0.3, 0.7], &[0.7, 0.3]]);
        let logp = Tensor::from_fn(&[2, 2], |k| p.data()[k].ln());
        for iters in [1, 5, 50] {
            let out = sinkhorn_baseline(&logp, iters, None).unwrap();
            for (a, b) in out.data().iter().zip(p.data()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        let out = sinkhorn_baseline(&mat(&[&[3.0, -1.0], &[0.5, 2.0]]), 100, None).unwrap();
        for i in 0..2 {
            assert!((out.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!((out.at(0, i) + out.at(1, i) - 1.0).abs() < 1e-6);
        }
        let slack = sinkhorn_baseline(&mat(&[&[3.0, -1.0], &[0.5, 2.0]]), 100, Some(0.0)).unwrap();
        assert_eq!(slack.shape(), &[3, 3]);
        assert!(sinkhorn_baseline(&p, 0, None).is_err());
    }

    #[test]
    fn sinkhorn_row_deviation_shrinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = Tensor::from_fn(&[6, 6], |_| rng.random_range(-3.0..3.0));
        let mut prev = f64::INFINITY;
        for iters in 1..30 {
            let out = sinkhorn_baseline(&s, iters, None).unwrap();
            let dev = (0..6).map(|i| (out.row(i).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
            assert!(dev <= prev + 1e-15);
            prev = dev;
        }
    }

    #[test]
    fn pose_from_exact_pairs() {
        let x = cloud(1, 30);
        let t = random_rigid(2, 170.0, 3.0).unwrap();
        let y = apply_transform(&x, &t);
        let corr = CorrespondenceSet::from_pairs(&(0..30).map(|i| (i, i)).collect::<Vec<_>>(), 30, 30).unwrap();
        let est = estimate_pose(&corr, &x, &y).unwrap();
        assert!(rotation_error_deg(&est.rotation, &t.rotation) < 1e-6);
        assert!((est.translation - t.translation).norm() < 1e-9);
        let two = corr.truncated(2);
        assert!(matches!(estimate_pose(&two, &x, &y), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn ransac_clean_equals_procrustes_and_is_seeded() {
        let x = cloud(3, 40);
        let t = random_rigid(4, 90.0, 1.0).unwrap();
        let y = apply_transform(&x, &t);
        let corr = CorrespondenceSet::from_pairs(&(0..40).map(|i| (i, i)).collect::<Vec<_>>(), 40, 40).unwrap();
        let cfg = MatchConfig::default();
        let direct = estimate_pose(&corr, &x, &y).unwrap();
        let a = ransac_pose(&corr, &x, &y, &cfg, 9).unwrap();
        let RansacOutcome::Model { transform, inliers } = &a else { panic!("{:?}", a) };
        assert_eq!(*inliers, 40);
        assert!((transform.rotation - direct.rotation).abs().max() < 1e-9);
        assert!((transform.translation - direct.translation).abs().max() < 1e-9);
        assert_eq!(a, ransac_pose(&corr, &x, &y, &cfg, 9).unwrap());
    }

    #[test]
    fn ransac_without_consensus() {
        let x = cloud(5, 10);
        let y = cloud(6, 10);
        let corr = CorrespondenceSet::from_pairs(&(0..10).map(|i| (i, i)).collect::<Vec<_>>(), 10, 10).unwrap();
        let cfg = MatchConfig {
            ransac_thresh: 1e-9,
            ..MatchConfig::default()
        };
        assert_eq!(ransac_pose(&corr, &x, &y, &cfg, 1).unwrap(), RansacOutcome::NoConsensus);
    }

    #[test]
    fn metrics_examples() {
        let x = cloud(7, 10);
        let t = random_rigid(8, 30.0, 1.0).unwrap();
        let y = apply_transform(&x, &t);
        let corr = CorrespondenceSet::from_pairs(&(0..10).map(|i| (i, i)).collect::<Vec<_>>(), 10, 10).unwrap();
        let cfg = EvalConfig::synthetic();
        let r = compute_metrics(Some(&t), &t, &corr, &x, &y, &cfg).unwrap();
        assert_eq!((r.rre, r.rte, r.rr, r.ir), (0.0, 0.0, true, 1.0));
        assert!(r.fmr);

        let rz = RigidTransform::from_axis_angle(Vector3::z(), 10f64.to_radians(), Vector3::zeros());
        let rre = rotation_error_deg(&Matrix3::identity(), &rz.rotation);
        assert!((rre - 10.0).abs() < 1e-12);
        let a = random_rigid(1, 180.0, 0.0).unwrap().rotation;
        let b = random_rigid(2, 180.0, 0.0).unwrap().rotation;
        assert!((rotation_error_deg(&a, &b) - rotation_error_deg(&b, &a)).abs() < 1e-12);
        let trace_form = (((a.transpose() * b).trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees();
        assert!((rotation_error_deg(&a, &b) - trace_form).abs() < 1e-6);
    }
}
