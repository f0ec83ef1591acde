use crate::error::Result;

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Deterministic, non-constant projection weights used to turn a tensor
/// output into a scalar.
fn probe_weight(k: usize) -> f64 {
    (1.3 * k as f64 + 0.5).sin() + 0.25
}

fn scalarize(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
    if tape.value(out).numel() == 1 {
        return Ok(out);
    }
    let shape = tape.value(out).shape().to_vec();
    let w = tape.constant(Tensor::from_fn(&shape, probe_weight));
    let prod = tape.mul(out, w)?;
    tape.sum_all(prod)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let s = scalarize(&mut tape, out)?;
    Ok(tape.value(s).item())
}

/// Compare reverse-mode gradients of `f` against central differences.
///
/// Tensor-valued outputs are reduced with a fixed weighting before
/// differentiation. Returns the largest
/// `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)` over every input coordinate.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let s = scalarize(&mut tape, out)?;
    let grads = tape.backward(s)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (t, &v) in vars.iter().enumerate() {
        let g_ad = grads.get(v).expect("parameter gradient").data().to_vec();
        for k in 0..inputs[t].numel() {
            let orig = inputs[t].data()[k];
            probe[t].data_mut()[k] = orig + eps;
            let plus = evaluate(&f, &probe)?;
            probe[t].data_mut()[k] = orig - eps;
            let minus = evaluate(&f, &probe)?;
            probe[t].data_mut()[k] = orig;
            let g_fd = (plus - minus) / (2.0 * eps);
            let denom = 1.0f64.max(g_ad[k].abs()).max(g_fd.abs());
            worst = worst.max((g_ad[k] - g_fd).abs() / denom);
        }
    }
    Ok(worst)
}
