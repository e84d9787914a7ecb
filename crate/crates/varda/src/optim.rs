//! Adam optimizer with bias correction, a stepped learning-rate schedule,
//! and global-norm gradient clipping.
//!
//! State is keyed by parameter name rather than by insertion order so that a
//! parameter set rebuilt in a different order still maps onto the same
//! moment buffers.

use thiserror::Error;

use crate::nets::ParameterSet;
use crate::Real;

pub const ADAM_BETA1: Real = 0.9;
pub const ADAM_BETA2: Real = 0.999;
pub const ADAM_EPS: Real = 1e-8;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("parameter {0:?} has no accumulated gradient")]
    MissingGrad(String),
    #[error("parameter {0:?} is not in the parameter set")]
    UnknownParam(String),
    #[error("gradient for {name:?} has {got} elements, expected {expected}")]
    GradShape {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("invalid optimizer setting: {0}")]
    BadConfig(String),
}

/// Stepped decay: `base * decay^floor(iter / interval)`, zero-based iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: Real,
    pub decay: Real,
    pub interval: usize,
}

impl LrSchedule {
    pub fn new(base: Real, decay: Real, interval: usize) -> Result<LrSchedule, OptimError> {
        if !(base.is_finite() && base > 0.0) {
            return Err(OptimError::BadConfig(format!("base lr must be positive, got {base}")));
        }
        if !(decay.is_finite() && decay > 0.0 && decay <= 1.0) {
            return Err(OptimError::BadConfig(format!("decay must be in (0, 1], got {decay}")));
        }
        if interval == 0 {
            return Err(OptimError::BadConfig("decay interval must be >= 1".into()));
        }
        Ok(LrSchedule { base, decay, interval })
    }

    pub fn at(&self, iter: usize) -> Real {
        let steps = (iter / self.interval) as i32;
        self.base * self.decay.powi(steps)
    }
}

/// First and second moment buffers for one named parameter.
#[derive(Debug)]
struct Slot {
    name: String,
    m: Vec<Real>,
    v: Vec<Real>,
}

/// Adam moments for a full parameter set. The step counter is global: every
/// call to [`adam_step`] advances it once, regardless of which subset of
/// parameters is active in that call.
#[derive(Debug)]
pub struct AdamState {
    t: u64,
    slots: Vec<Slot>,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> AdamState {
        let slots = params
            .iter()
            .map(|(name, _, tensor)| Slot {
                name: name.to_string(),
                m: vec![0.0; tensor.numel()],
                v: vec![0.0; tensor.numel()],
            })
            .collect();
        AdamState { t: 0, slots }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    fn slot_mut(&mut self, name: &str) -> Option<&mut Slot> {
        self.slots.iter_mut().find(|s| s.name == name)
    }

    /// Plain-data view `(t, [(name, m, v)])` for checkpointing.
    pub fn to_parts(&self) -> (u64, Vec<(String, Vec<Real>, Vec<Real>)>) {
        let parts = self.slots.iter().map(|s| (s.name.clone(), s.m.clone(), s.v.clone())).collect();
        (self.t, parts)
    }

    /// Rebuilds state captured by [`AdamState::to_parts`]. Moment lengths are
    /// revalidated against the parameters on the next `adam_step`.
    pub fn from_parts(t: u64, parts: Vec<(String, Vec<Real>, Vec<Real>)>) -> AdamState {
        let slots = parts.into_iter().map(|(name, m, v)| Slot { name, m, v }).collect();
        AdamState { t, slots }
    }
}

/// Applies one Adam update to every parameter named in `active`, consuming
/// their gradients. An active parameter without a gradient is an error: it
/// means the loss graph silently dropped a branch that should be trained.
pub fn adam_step(
    params: &ParameterSet,
    active: &[&str],
    state: &mut AdamState,
    lr: Real,
) -> Result<(), OptimError> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(OptimError::BadConfig(format!("lr must be positive, got {lr}")));
    }
    state.t += 1;
    debug_assert!(state.t < i32::MAX as u64);
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);

    for &name in active {
        let tensor = params
            .get(name)
            .map_err(|_| OptimError::UnknownParam(name.to_string()))?;
        let grad = tensor
            .take_grad()
            .ok_or_else(|| OptimError::MissingGrad(name.to_string()))?;
        if grad.len() != tensor.numel() {
            return Err(OptimError::GradShape {
                name: name.to_string(),
                expected: tensor.numel(),
                got: grad.len(),
            });
        }
        let slot = state
            .slot_mut(name)
            .ok_or_else(|| OptimError::UnknownParam(name.to_string()))?;
        if slot.m.len() != grad.len() || slot.v.len() != grad.len() {
            return Err(OptimError::GradShape {
                name: name.to_string(),
                expected: grad.len(),
                got: slot.m.len(),
            });
        }
        let (m, v) = (&mut slot.m, &mut slot.v);
        tensor.with_data_mut(|x| {
            for i in 0..x.len() {
                let g = grad[i];
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                x[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        });
    }
    Ok(())
}

/// Scales the gradients of the active parameters so their joint L2 norm is at
/// most `max_norm`. Returns the pre-clip norm. Parameters without gradients
/// are skipped: clipping runs before the missing-grad check in `adam_step`,
/// which remains the authority on which gradients must exist.
pub fn clip_global_norm(
    params: &ParameterSet,
    active: &[&str],
    max_norm: Real,
) -> Result<Real, OptimError> {
    if !(max_norm.is_finite() && max_norm > 0.0) {
        return Err(OptimError::BadConfig(format!(
            "max_norm must be positive, got {max_norm}"
        )));
    }
    let mut sq: Real = 0.0;
    for &name in active {
        let tensor = params
            .get(name)
            .map_err(|_| OptimError::UnknownParam(name.to_string()))?;
        if let Some(g) = tensor.grad_data() {
            for &gi in g.iter() {
                sq += gi * gi;
            }
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for &name in active {
            let tensor = params.get(name).expect("checked above");
            tensor.map_grad(|g| {
                for gi in g.iter_mut() {
                    *gi *= scale;
                }
            });
        }
    }
    Ok(norm)
}
