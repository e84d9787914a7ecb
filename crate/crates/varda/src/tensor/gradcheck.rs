//! Finite-difference validation of tape gradients.
//!
//! The check runs one recorded forward/backward pass to collect analytic
//! gradients, then re-evaluates the loss twice per probed element with a
//! central difference. The forward closure must be deterministic: any noise
//! it uses has to be drawn once by the caller and captured, or the comparison
//! is meaningless.

use super::{Tape, Tensor, TensorError};
use crate::Real;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Maximum relative error per probed tensor, in input order.
    pub per_tensor: Vec<(String, Real)>,
    pub max_rel_err: Real,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub worst_analytic: Real,
    pub worst_numeric: Real,
    /// Total elements probed across all tensors.
    pub probed: usize,
}

/// Relative error that stays meaningful when both values are near zero.
pub fn rel_err(a: Real, b: Real) -> Real {
    (a - b).abs() / (a.abs() + b.abs() + 1e-12)
}

/// Compare tape gradients of `forward` against central differences for each
/// listed tensor. `step` is the base perturbation, scaled per element by
/// `max(1, |x|)`. `max_probes_per_tensor` caps work by striding over large
/// tensors; `None` probes every element.
pub fn grad_check(
    targets: &[(&str, &Tensor)],
    step: Real,
    max_probes_per_tensor: Option<usize>,
    forward: impl Fn(&Tape) -> Result<Tensor, TensorError>,
) -> Result<GradCheckReport, TensorError> {
    let tape = Tape::new();
    let loss = forward(&tape)?;
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss { numel: loss.numel() });
    }
    for (_, t) in targets {
        t.zero_grad();
    }
    tape.backward(&loss)?;

    let mut analytic: Vec<Vec<Real>> = Vec::with_capacity(targets.len());
    for (name, t) in targets {
        analytic.push(t.take_grad().ok_or(TensorError::MissingGrad { name: name.to_string() })?);
    }

    let eval = || -> Result<Real, TensorError> { Ok(forward(&Tape::no_grad())?.item()) };

    let mut report = GradCheckReport {
        per_tensor: Vec::new(),
        max_rel_err: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        probed: 0,
    };

    for ((name, t), grads) in targets.iter().zip(&analytic) {
        let n = t.numel();
        let stride = match max_probes_per_tensor {
            Some(cap) if cap > 0 && n > cap => n.div_ceil(cap),
            _ => 1,
        };
        let mut tensor_max = 0.0;
        let mut idx = 0;
        while idx < n {
            let x0 = t.data()[idx];
            let h = step * x0.abs().max(1.0);

            t.with_data_mut(|d| d[idx] = x0 + h);
            let up = eval()?;
            t.with_data_mut(|d| d[idx] = x0 - h);
            let down = eval()?;
            t.with_data_mut(|d| d[idx] = x0);

            let numeric = (up - down) / (2.0 * h);
            let e = rel_err(grads[idx], numeric);
            if e > tensor_max {
                tensor_max = e;
            }
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst_tensor = name.to_string();
                report.worst_index = idx;
                report.worst_analytic = grads[idx];
                report.worst_numeric = numeric;
            }
            report.probed += 1;
            idx += stride;
        }
        report.per_tensor.push((name.to_string(), tensor_max));
    }
    Ok(report)
}
