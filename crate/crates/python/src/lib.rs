//! Python bindings. Clouds cross the boundary as `(N, 3)` nested sequences
//! (lists or numpy arrays), transforms as 4x4 row-major nested lists.

use std::path::PathBuf;

use imatcher::autodiff::{Precision, Tensor};
use imatcher::cli::{parse_ablation, AnyMatcher};
use imatcher::geometry::{CorrespondenceSet, EvalConfig, PointCloud, RigidTransform};
use imatcher::model::WarpMode;
use imatcher::reposition::MatchSource;
use imatcher::registration::{self, MatchConfig, RansacOutcome, SelectionMode};
use imatcher::synth::{SynthParams, Shape};
use imatcher::train::{train_loop, SynthStream, TrainConfig};
use imatcher::weights::{ModelConfig, ModelWeights};
use imatcher::{io, Error};
use nalgebra::Matrix4;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

pub type Rows = Vec<[f64; 3]>;
pub type Mat4 = [[f64; 4]; 4];

pub fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

pub fn cloud(rows: &[[f64; 3]]) -> Result<PointCloud, Error> {
    PointCloud::from_rows(rows)
}

pub fn rows(c: &PointCloud) -> Rows {
    c.points().iter().map(|p| [p.x, p.y, p.z]).collect()
}

pub fn mat4(t: &RigidTransform) -> Mat4 {
    let h = t.to_homogeneous();
    std::array::from_fn(|r| std::array::from_fn(|c| h[(r, c)]))
}

pub fn transform(m: &Mat4) -> Result<RigidTransform, Error> {
    RigidTransform::from_homogeneous(&Matrix4::from_fn(|r, c| m[r][c]))
}

pub fn score_rows(s: &Tensor<f64>) -> Vec<Vec<f64>> {
    let n = s.shape()[1];
    s.data().chunks(n).map(<[f64]>::to_vec).collect()
}

pub fn score_tensor(s: &[Vec<f64>]) -> Result<Tensor<f64>, Error> {
    let n = s.first().map_or(0, Vec::len);
    if s.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidInput("score rows have different lengths".into()));
    }
    Tensor::new(vec![s.len(), n], s.concat())
}

pub fn preset_eval(name: &str) -> Result<EvalConfig, Error> {
    match name {
        "synthetic" => Ok(EvalConfig::synthetic()),
        "object" => Ok(EvalConfig::object()),
        "outdoor" => Ok(EvalConfig::outdoor()),
        other => Err(Error::InvalidArgument(format!("unknown preset '{}'", other))),
    }
}

fn precision(f64: bool) -> Precision {
    if f64 {
        Precision::F64
    } else {
        Precision::F32
    }
}

/// Generate a synthetic pair. Returns `(x, y, t_gt)` with `y ≈ t_gt(x)` on the overlap.
#[pyfunction]
#[pyo3(signature = (seed, num_points=256, overlap=0.7, noise=0.01, rot_max=45.0, trans_max=0.5, shape="gaussian_blobs"))]
fn synth_pair(
    seed: u64,
    num_points: usize,
    overlap: f64,
    noise: f64,
    rot_max: f64,
    trans_max: f64,
    shape: &str,
) -> PyResult<(Rows, Rows, Mat4)> {
    let params = SynthParams {
        num_points,
        overlap_ratio: overlap,
        noise_sigma: noise,
        rot_max,
        trans_max,
        seed,
        shape: shape.parse::<Shape>().map_err(py_err)?,
    };
    let p = imatcher::synth::synth_pair(&params).map_err(py_err)?;
    Ok((rows(&p.x), rows(&p.y), mat4(&p.t_gt)))
}

/// Write freshly initialized weights.
#[pyfunction]
#[pyo3(signature = (path, seed=0, d=64, k_graph=12, k_local=32, f64=false))]
fn init_weights(path: PathBuf, seed: u64, d: usize, k_graph: usize, k_local: usize, f64: bool) -> PyResult<()> {
    let cfg = ModelConfig::new(d, k_graph, k_local).map_err(py_err)?;
    let res = if f64 {
        io::save_weights(&ModelWeights::<f64>::init(cfg, seed).map_err(py_err)?, &path)
    } else {
        io::save_weights(&ModelWeights::<f32>::init(cfg, seed).map_err(py_err)?, &path)
    };
    res.map_err(py_err)
}

/// Train on the synthetic stream and write the weights to `out`. Returns the
/// per-step losses.
#[pyfunction]
#[pyo3(signature = (out, steps=2000, lr=1e-3, seed=0, ablation="e", d=64, k_graph=12, k_local=32, num_points=256, f64=false))]
#[allow(clippy::too_many_arguments)]
fn train_synthetic(
    py: Python<'_>,
    out: PathBuf,
    steps: usize,
    lr: f64,
    seed: u64,
    ablation: &str,
    d: usize,
    k_graph: usize,
    k_local: usize,
    num_points: usize,
    f64: bool,
) -> PyResult<Vec<f64>> {
    let ablation = parse_ablation(ablation).map_err(py_err)?;
    let cfg = ModelConfig::new(d, k_graph, k_local).map_err(py_err)?;
    let tc = TrainConfig {
        steps,
        lr,
        seed,
        precision: precision(f64),
        ..TrainConfig::default()
    };
    let mut source = SynthStream {
        params: SynthParams {
            num_points,
            ..SynthParams::standard(seed)
        },
        seed,
        k_local,
        beta: EvalConfig::synthetic().beta,
    };
    py.detach(|| {
        if f64 {
            let o = train_loop(ModelWeights::<f64>::init(cfg, seed)?, &ablation, &tc, &mut source, |_, _| {})?;
            io::save_weights(&o.weights, &out)?;
            Ok(o.losses)
        } else {
            let o = train_loop(ModelWeights::<f32>::init(cfg, seed)?, &ablation, &tc, &mut source, |_, _| {})?;
            io::save_weights(&o.weights, &out)?;
            Ok(o.losses)
        }
    })
    .map_err(py_err)
}

/// A matcher bound to one set of weights and ablation switches.
#[pyclass(name = "Matcher", frozen)]
struct PyMatcher {
    inner: AnyMatcher,
}

#[pymethods]
impl PyMatcher {
    /// Load weights from `weights`, or build seeded untrained weights when it
    /// is omitted.
    #[new]
    #[pyo3(signature = (weights=None, ablation="e", f64=false, seed=0, d=64, k_graph=12, k_local=32))]
    fn new(
        weights: Option<PathBuf>,
        ablation: &str,
        f64: bool,
        seed: u64,
        d: usize,
        k_graph: usize,
        k_local: usize,
    ) -> PyResult<Self> {
        let ablation = parse_ablation(ablation).map_err(py_err)?;
        let p = precision(f64);
        let inner = match weights {
            Some(path) => AnyMatcher::load(&path, p, ablation),
            None => ModelConfig::new(d, k_graph, k_local)
                .and_then(|cfg| ModelWeights::<f64>::init(cfg, seed))
                .map(|w| AnyMatcher::new(w, p, ablation)),
        }
        .map_err(py_err)?;
        Ok(PyMatcher { inner })
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.config().d
    }

    /// Score `x` against `y`. The dict holds `scores`, `s_hat` (M x N lists),
    /// `tau_x`, `tau_y`, `match_source` and the repositioning `warp`.
    fn score<'py>(&self, py: Python<'py>, x: Rows, y: Rows) -> PyResult<Bound<'py, PyDict>> {
        let out = py
            .detach(|| {
                let (px, py_) = (self.inner.prepare(&cloud(&x)?)?, self.inner.prepare(&cloud(&y)?)?);
                self.inner.match_prepared(&px, &py_, &WarpMode::Estimate)
            })
            .map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("scores", score_rows(&out.scores))?;
        d.set_item("s_hat", score_rows(&out.s_hat))?;
        d.set_item("tau_x", out.tau_x)?;
        d.set_item("tau_y", out.tau_y)?;
        d.set_item("match_source", out.match_source.map(source_name))?;
        d.set_item("warp", out.warp.as_ref().map(mat4))?;
        Ok(d)
    }

    /// Match and register `x` onto `y`. Returns `(pairs, transform)`.
    #[pyo3(signature = (x, y, top_k=None, ransac=false, seed=0))]
    fn register(
        &self,
        py: Python<'_>,
        x: Rows,
        y: Rows,
        top_k: Option<usize>,
        ransac: bool,
        seed: u64,
    ) -> PyResult<(Vec<(usize, usize)>, Mat4)> {
        py.detach(|| {
            let (cx, cy) = (cloud(&x)?, cloud(&y)?);
            let out = self
                .inner
                .match_prepared(&self.inner.prepare(&cx)?, &self.inner.prepare(&cy)?, &WarpMode::Estimate)?;
            let cfg = match_config(top_k);
            let corr = cfg.select(&out.scores)?;
            let t = pose(&corr, &cx, &cy, &cfg, ransac, seed)?;
            Ok((corr.index_pairs(), mat4(&t)))
        })
        .map_err(py_err)
    }
}

pub fn source_name(s: MatchSource) -> &'static str {
    match s {
        MatchSource::WarpedNearestNeighbour => "warped_nearest_neighbour",
        MatchSource::ScoreArgmax => "score_argmax",
    }
}

fn match_config(top_k: Option<usize>) -> MatchConfig {
    match top_k {
        Some(k) => MatchConfig {
            mode: SelectionMode::TopK,
            k,
            ..MatchConfig::default()
        },
        None => MatchConfig::default(),
    }
}

fn pose(
    corr: &CorrespondenceSet,
    x: &PointCloud,
    y: &PointCloud,
    cfg: &MatchConfig,
    ransac: bool,
    seed: u64,
) -> Result<RigidTransform, Error> {
    if !ransac {
        return registration::estimate_pose(corr, x, y);
    }
    match registration::ransac_pose(corr, x, y, cfg, seed)? {
        RansacOutcome::Model { transform, .. } => Ok(transform),
        RansacOutcome::NoConsensus => Err(Error::DegenerateGeometry("RANSAC found no consensus".into())),
    }
}

/// Select correspondences from an M x N score matrix: mutual top-1 by
/// default, or the `top_k` best mutual pairs.
#[pyfunction]
#[pyo3(signature = (scores, top_k=None))]
fn select(scores: Vec<Vec<f64>>, top_k: Option<usize>) -> PyResult<Vec<(usize, usize)>> {
    let s = score_tensor(&scores).map_err(py_err)?;
    Ok(match_config(top_k).select(&s).map_err(py_err)?.index_pairs())
}

/// Least-squares rigid transform mapping `x[i]` onto `y[j]` over `pairs`.
#[pyfunction]
#[pyo3(signature = (pairs, x, y, ransac=false, seed=0))]
fn estimate_pose(pairs: Vec<(usize, usize)>, x: Rows, y: Rows, ransac: bool, seed: u64) -> PyResult<Mat4> {
    let (cx, cy) = (cloud(&x).map_err(py_err)?, cloud(&y).map_err(py_err)?);
    let corr = CorrespondenceSet::from_pairs(&pairs, cx.len(), cy.len()).map_err(py_err)?;
    let t = pose(&corr, &cx, &cy, &MatchConfig::default(), ransac, seed).map_err(py_err)?;
    Ok(mat4(&t))
}

/// Evaluation numbers for an estimate; `t_est=None` marks a failed pair.
#[pyfunction]
#[pyo3(signature = (t_est, t_gt, pairs, x, y, preset="synthetic"))]
fn metrics<'py>(
    py: Python<'py>,
    t_est: Option<Mat4>,
    t_gt: Mat4,
    pairs: Vec<(usize, usize)>,
    x: Rows,
    y: Rows,
    preset: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let (cx, cy) = (cloud(&x).map_err(py_err)?, cloud(&y).map_err(py_err)?);
    let corr = CorrespondenceSet::from_pairs(&pairs, cx.len(), cy.len()).map_err(py_err)?;
    let est = t_est.as_ref().map(transform).transpose().map_err(py_err)?;
    let gt = transform(&t_gt).map_err(py_err)?;
    let cfg = preset_eval(preset).map_err(py_err)?;
    let r = registration::compute_metrics(est.as_ref(), &gt, &corr, &cx, &cy, &cfg).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("rre_deg", r.rre)?;
    d.set_item("rte", r.rte)?;
    d.set_item("rr", r.rr)?;
    d.set_item("ir", r.ir)?;
    d.set_item("fmr_flag", r.fmr)?;
    d.set_item("overlap", r.overlap)?;
    d.set_item("num_corr", r.num_corr)?;
    Ok(d)
}

#[pyfunction]
fn load_cloud(path: PathBuf) -> PyResult<Rows> {
    Ok(rows(&io::load_cloud(&path).map_err(py_err)?))
}

/// Write `.ply` for that extension, whitespace-separated xyz otherwise.
#[pyfunction]
fn save_cloud(points: Rows, path: PathBuf) -> PyResult<()> {
    io::save_cloud(&cloud(&points).map_err(py_err)?, &path).map_err(py_err)
}

#[pyfunction]
fn load_transform(path: PathBuf) -> PyResult<Mat4> {
    Ok(mat4(&io::load_transform(&path).map_err(py_err)?))
}

#[pyfunction]
fn save_transform(t: Mat4, path: PathBuf) -> PyResult<()> {
    io::save_transform(&transform(&t).map_err(py_err)?, &path).map_err(py_err)
}

#[pymodule]
fn imatcher_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMatcher>()?;
    m.add_function(wrap_pyfunction!(synth_pair, m)?)?;
    m.add_function(wrap_pyfunction!(init_weights, m)?)?;
    m.add_function(wrap_pyfunction!(train_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(select, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_pose, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(load_cloud, m)?)?;
    m.add_function(wrap_pyfunction!(save_cloud, m)?)?;
    m.add_function(wrap_pyfunction!(load_transform, m)?)?;
    m.add_function(wrap_pyfunction!(save_transform, m)?)?;
    Ok(())
}
