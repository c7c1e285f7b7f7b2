//! Training losses built on the tape.

use crate::autodiff::{Graph, Var};
use crate::data::PAD;
use crate::error::{Error, Result};

/// `-sum_t log softmax(logits_t)[y_t]` over non-pad targets.
pub fn xe_loss(g: &mut Graph, logits: &[Var], targets: &[usize]) -> Result<Var> {
    if logits.len() != targets.len() {
        return Err(Error::LengthMismatch {
            op: "xe_loss",
            left: logits.len(),
            right: targets.len(),
        });
    }
    let mut total = g.scalar(0.0)?;
    for (&l, &y) in logits.iter().zip(targets) {
        if y == PAD {
            continue;
        }
        let vocab = g.value(l).numel();
        if y >= vocab {
            return Err(Error::TokenOutOfRange { id: y, vocab });
        }
        let lp = g.log_softmax(l)?;
        let t = g.index(lp, y)?;
        total = g.sub(total, t)?;
    }
    Ok(total)
}

/// Mean squared difference between a projected decoder state and a target
/// code; the target is held constant.
pub fn hidden_mse_loss(g: &mut Graph, projected: Var, target: Var) -> Result<Var> {
    let target = g.stop_gradient(target)?;
    let d = g.sq_diff(projected, target)?;
    g.mean(d)
}

pub fn combined_loss(g: &mut Graph, xe: Var, mse: Var) -> Result<Var> {
    g.add(xe, mse)
}

/// Surrogate whose gradient is `-(r_s - r_b) * grad(sum log p(sample))`.
pub fn scst_loss(g: &mut Graph, logprob_sum: Var, reward: f64, baseline: f64) -> Result<Var> {
    if !reward.is_finite() || !baseline.is_finite() {
        return Err(Error::NonFinite("scst reward"));
    }
    g.affine(logprob_sum, -(reward - baseline), 0.0)
}
