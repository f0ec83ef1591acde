//! Matchability head and the final score matrix
//! `S = (τX τYᵀ) ⊙ softmax_row(Ŝ) ⊙ softmax_col(Ŝ)`.

use crate::autodiff::{Real, Tape, Var};
use crate::error::{shape_err, Result};
use crate::weights::{BoundWeights, Linear};

#[derive(Debug, Clone, Copy)]
pub struct FusionHeadWeights {
    /// Layers `2d -> d/4 -> d/4 -> d/2 -> 1`.
    pub h3: [Linear; 4],
}

impl FusionHeadWeights {
    /// Returns the source and target heads, which do not share parameters.
    pub fn bind(w: &BoundWeights) -> Result<(Self, Self)> {
        let side = |s: &str| -> Result<Self> {
            Ok(FusionHeadWeights {
                h3: [
                    w.linear(&format!("matchability_{s}.h3.0"))?,
                    w.linear(&format!("matchability_{s}.h3.1"))?,
                    w.linear(&format!("matchability_{s}.h3.2"))?,
                    w.linear(&format!("matchability_{s}.h3.3"))?,
                ],
            })
        };
        Ok((side("x")?, side("y")?))
    }
}

/// `τ_i = sigmoid(h3([v̂_i, h_fused_i]))`, an `M`-vector in (0, 1).
pub fn matchability_scores<T: Real>(
    tape: &mut Tape<T>,
    v_hat: Var,
    h_fused: Var,
    w: &FusionHeadWeights,
) -> Result<Var> {
    let m = tape.shape(v_hat)[0];
    let mut h = tape.concat(&[v_hat, h_fused], 1)?;
    for (i, layer) in w.h3.iter().enumerate() {
        h = layer.apply(tape, h)?;
        if i + 1 < w.h3.len() {
            h = tape.relu(h)?;
        }
    }
    let tau = tape.sigmoid(h)?;
    tape.reshape(tau, &[m])
}

/// Outer product `S^M = τX τYᵀ`.
pub fn matchability_matrix<T: Real>(tape: &mut Tape<T>, tau_x: Var, tau_y: Var) -> Result<Var> {
    let (sx, sy) = (tape.shape(tau_x).to_vec(), tape.shape(tau_y).to_vec());
    if sx.len() != 1 || sy.len() != 1 {
        return Err(shape_err("matchability_matrix", format!("{:?} x {:?}", sx, sy)));
    }
    let cx = tape.reshape(tau_x, &[sx[0], 1])?;
    let cy = tape.reshape(tau_y, &[sy[0], 1])?;
    tape.matmul_nt(cx, cy)
}

/// `softmax_row(Ŝ) ⊙ softmax_col(Ŝ)`.
pub fn dual_softmax<T: Real>(tape: &mut Tape<T>, s_hat: Var) -> Result<Var> {
    let r = tape.softmax(s_hat, 1)?;
    let c = tape.softmax(s_hat, 0)?;
    tape.mul(r, c)
}

pub fn final_scores<T: Real>(tape: &mut Tape<T>, s_hat: Var, s_m: Var) -> Result<Var> {
    if tape.shape(s_hat) != tape.shape(s_m) {
        return Err(shape_err(
            "final_scores",
            format!("{:?} vs {:?}", tape.shape(s_hat), tape.shape(s_m)),
        ));
    }
    let ds = dual_softmax(tape, s_hat)?;
    tape.mul(s_m, ds)
}
