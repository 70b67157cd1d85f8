//! Distance-over-gradients step scale for one guidance component.

use crate::error::{shape_mismatch, Error, Result};
use crate::numerics::Tensor;

/// Numerator of the scale returned on the reference step.
pub const INITIAL_SCALE_NUMERATOR: f64 = 1e-5;

/// Per-trajectory accumulators for one component (x̂ or ε̂).
///
/// The first call with a nonzero gradient stores the component value as the
/// reference `f_ref` and returns `1e-5 / ‖g‖`. Every later call returns
/// `max_i ‖f_i - f_ref‖ / √(Σ_i ‖g_i‖²)`, where the running maximum and the
/// sum both include the current step.
#[derive(Clone, Debug, Default)]
pub struct DogState {
    f_ref: Option<Tensor>,
    max_dist: f64,
    grad_sq_sum: f64,
    last_t: Option<usize>,
}

impl DogState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_initialized(&self) -> bool {
        self.f_ref.is_some()
    }

    pub fn max_dist(&self) -> f64 {
        self.max_dist
    }

    pub fn grad_sq_sum(&self) -> f64 {
        self.grad_sq_sum
    }

    pub fn reference(&self) -> Option<&Tensor> {
        self.f_ref.as_ref()
    }

    /// Scale for step `t`; steps must be visited in strictly decreasing order.
    pub fn estimate(&mut self, t: usize, f: &Tensor, g: &Tensor) -> Result<f64> {
        if f.shape() != g.shape() {
            return Err(shape_mismatch("estimate_scale", f.shape(), g.shape()));
        }
        if let Some(prev) = self.last_t {
            if t >= prev {
                return Err(Error::InvalidParameter(format!(
                    "estimate_scale called at t = {t} after t = {prev}"
                )));
            }
        }
        self.last_t = Some(t);
        let g_sq = g.norm_sq();
        if !g_sq.is_finite() {
            return Err(Error::NonFinite("estimate_scale gradient".into()));
        }
        let Some(f_ref) = &self.f_ref else {
            if g_sq == 0.0 {
                // no direction yet: stay inactive and retry next step
                return Ok(0.0);
            }
            self.f_ref = Some(f.clone());
            self.grad_sq_sum = g_sq;
            return Ok(INITIAL_SCALE_NUMERATOR / g_sq.sqrt());
        };
        if f_ref.len() != f.len() {
            return Err(shape_mismatch("estimate_scale", f_ref.shape(), f.shape()));
        }
        let dist = f_ref
            .data()
            .iter()
            .zip(f.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        self.max_dist = self.max_dist.max(dist);
        self.grad_sq_sum += g_sq;
        Ok(self.max_dist / self.grad_sq_sum.sqrt())
    }
}

pub fn estimate_scale(state: &mut DogState, t: usize, f: &Tensor, g: &Tensor) -> Result<f64> {
    state.estimate(t, f, g)
}
