//! Central-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many coordinates per tensor (evenly strided).
    pub max_coords_per_tensor: Option<usize>,
    /// Multiple of the rounding floor `EPSILON * max(1, |f|) / (2 eps)`
    /// below which an analytic/numeric disagreement is not resolvable.
    pub noise_multiple: f64,
    /// Relative error above which an unresolvable coordinate is counted in
    /// [`GradCheckReport::noise_limited`].
    pub tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_coords_per_tensor: None,
            noise_multiple: 8.0,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Maximum relative error over every checked coordinate.
    pub max_rel_error: f64,
    /// Maximum relative error over coordinates whose analytic/numeric
    /// difference exceeds the rounding floor of the central difference.
    pub max_resolved_rel_error: f64,
    /// Coordinates above `tolerance` whose difference is within the
    /// rounding floor (only possible when the derivative itself is tiny).
    pub noise_limited: usize,
    /// (tensor index, coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    /// Analytic and numeric derivative at `worst`.
    pub worst_values: Option<(f64, f64)>,
    pub checked: usize,
    /// Coordinates skipped because a perturbation flipped a recorded
    /// discrete decision (e.g. an attention argmax).
    pub skipped: usize,
}

impl GradCheckReport {
    /// True when every resolvable coordinate is within `tolerance`.
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_resolved_rel_error < tolerance
    }
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

struct Eval {
    value: f64,
    decisions: Vec<usize>,
    pins: Vec<Tensor>,
}

fn evaluate<F>(f: &F, params: &[Tensor], replay: Option<&[Tensor]>) -> Result<Eval>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = match replay {
        Some(p) => Graph::with_replay(p.to_vec()),
        None => Graph::new(),
    };
    let vars = params
        .iter()
        .map(|p| g.leaf(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let t = g.value(out);
    if t.numel() != 1 {
        return Err(Error::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(Eval {
        value: t.item(),
        decisions: g.decisions().to_vec(),
        pins: g.pins().to_vec(),
    })
}

/// Analytic gradients of `f` at `params`, in parameter order.
pub fn analytic_gradients<F>(f: &F, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params
        .iter()
        .map(|p| g.leaf(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let value = g.value(out).item();
    let grads = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape()))
        })
        .collect();
    Ok((value, grads))
}

pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    finite_diff_check_with(
        f,
        params,
        &GradCheckOptions {
            eps,
            ..GradCheckOptions::default()
        },
    )
}

/// Compares reverse-mode gradients of the scalar function `f` against
/// central differences, coordinate by coordinate.
///
/// Gradient-stopped values (see [`Graph::pinned`]) are held at their
/// unperturbed values during the perturbed evaluations, so the numeric side
/// differentiates the same surrogate as the backward pass.
pub fn finite_diff_check_with<F>(
    f: F,
    params: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(opts.eps > 0.0) {
        return Err(Error::Invalid(format!("eps must be positive, got {}", opts.eps)));
    }
    let (value, grads) = analytic_gradients(&f, params)?;
    let base = evaluate(&f, params, None)?;
    if base.value.to_bits() != value.to_bits() {
        return Err(Error::NonDeterministic {
            first: value,
            second: base.value,
        });
    }
    let again = evaluate(&f, params, None)?;
    if again.value.to_bits() != base.value.to_bits() || again.decisions != base.decisions
        || again.pins != base.pins
    {
        return Err(Error::NonDeterministic {
            first: base.value,
            second: again.value,
        });
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_resolved_rel_error: 0.0,
        noise_limited: 0,
        worst: None,
        worst_values: None,
        checked: 0,
        skipped: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, grad) in grads.iter().enumerate() {
        let n = params[pi].numel();
        let stride = match opts.max_coords_per_tensor {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for j in (0..n).step_by(stride) {
            let orig = params[pi].data()[j];
            work[pi].data_mut()[j] = orig + opts.eps;
            let plus = evaluate(&f, &work, Some(&base.pins))?;
            work[pi].data_mut()[j] = orig - opts.eps;
            let minus = evaluate(&f, &work, Some(&base.pins))?;
            work[pi].data_mut()[j] = orig;
            if plus.decisions != base.decisions || minus.decisions != base.decisions {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus.value - minus.value) / (2.0 * opts.eps);
            let analytic = grad.data()[j];
            let err = relative_error(analytic, numeric);
            let floor = f64::EPSILON * plus.value.abs().max(minus.value.abs()).max(1.0)
                / (2.0 * opts.eps);
            if (analytic - numeric).abs() > opts.noise_multiple * floor {
                report.max_resolved_rel_error = report.max_resolved_rel_error.max(err);
            } else if err >= opts.tolerance {
                report.noise_limited += 1;
            }
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((pi, j));
                report.worst_values = Some((analytic, numeric));
            }
        }
    }
    Ok(report)
}
