//! First-order spatial compatibility confidence.
//!
//! A correspondence whose pairwise distances to the other correspondences
//! are preserved across the two clouds is probably an inlier. `G` holds the
//! distance discrepancies, `α_i` the row mean of `exp(-σ G)`.

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::geometry::Point3;
use crate::weights::{BoundWeights, Linear};

#[derive(Debug, Clone, Copy)]
pub struct ConsistencyWeights {
    /// `σ = exp(log_sigma)`.
    pub log_sigma: Var,
    /// Layers `1 -> d/4 -> d/2 -> d`.
    pub h2: [Linear; 3],
}

impl ConsistencyWeights {
    pub fn bind(w: &BoundWeights) -> Result<Self> {
        Ok(ConsistencyWeights {
            log_sigma: w.var("consistency.log_sigma")?,
            h2: [
                w.linear("consistency.h2.0")?,
                w.linear("consistency.h2.1")?,
                w.linear("consistency.h2.2")?,
            ],
        })
    }
}

/// `G_ij = | ‖x_i - x_j‖ - ‖y_i - y_j‖ |` for row-aligned `x` and matched `y`.
pub fn fosc_matrix(x: &[Point3], matched: &[Point3]) -> Result<Tensor<f64>> {
    if x.len() != matched.len() {
        return Err(shape_err(
            "fosc_matrix",
            format!("{} sources vs {} matched targets", x.len(), matched.len()),
        ));
    }
    let m = x.len();
    let mut g = vec![0.0; m * m];
    for i in 0..m {
        for j in i + 1..m {
            let v = ((x[i] - x[j]).norm() - (matched[i] - matched[j]).norm()).abs();
            g[i * m + j] = v;
            g[j * m + i] = v;
        }
    }
    Tensor::new(vec![m, m], g)
}

/// `α_i = (1/M) Σ_j exp(-σ G_ij)`, diagonal included.
pub fn confidence_scores(g: &Tensor<f64>, sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma = {} must be positive", sigma)));
    }
    if g.rank() != 2 || g.rows() != g.cols() || g.rows() == 0 {
        return Err(shape_err("confidence_scores", format!("G {:?}", g.shape())));
    }
    let m = g.rows();
    Ok((0..m)
        .map(|i| g.row(i).iter().map(|v| (-sigma * v).exp()).sum::<f64>() / m as f64)
        .collect())
}

/// Differentiable counterpart of [`confidence_scores`], with `σ` taken from
/// `log_sigma` on the tape. Returns an `M`-vector.
pub fn confidence_on_tape<T: Real>(tape: &mut Tape<T>, g: Var, log_sigma: Var) -> Result<Var> {
    let sigma = tape.exp(log_sigma)?;
    let scaled = tape.mul(g, sigma)?;
    let neg = tape.neg(scaled)?;
    let e = tape.exp(neg)?;
    tape.mean_reduce(e, 1)
}

/// Lift each `α_i` to `ℝ^d` through `h2`, normalizing over the points.
pub fn encode_confidence<T: Real>(tape: &mut Tape<T>, alpha: Var, w: &ConsistencyWeights) -> Result<Var> {
    let m = tape.shape(alpha)[0];
    let mut h = tape.reshape(alpha, &[m, 1])?;
    for layer in &w.h2 {
        h = layer.apply(tape, h)?;
        h = tape.instance_norm(h)?;
        h = tape.relu(h)?;
    }
    Ok(h)
}

/// `G` from coordinates, `α` and `v̂` for one direction.
pub fn confidence_features<T: Real>(
    tape: &mut Tape<T>,
    src: &[Point3],
    matched: &[Point3],
    w: &ConsistencyWeights,
) -> Result<Var> {
    let g = fosc_matrix(src, matched)?;
    let g = tape.constant(g.cast());
    let alpha = confidence_on_tape(tape, g, w.log_sigma)?;
    encode_confidence(tape, alpha, w)
}
