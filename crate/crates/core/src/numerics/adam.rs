use super::{ParamSet, Scalar};
use crate::error::{Error, Result};

/// Bias-corrected Adam moments for one [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub first_moment: Vec<Vec<F>>,
    pub second_moment: Vec<Vec<F>>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &ParamSet<F>, lr: f64) -> Self {
        Self::with_betas(params, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &ParamSet<F>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<F>> = params.tensors().iter().map(|t| vec![F::zero(); t.numel()]).collect();
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
            lr,
            beta1,
            beta2,
            eps,
        }
    }

    /// Applies one update using each tensor's accumulated gradient.
    ///
    /// Tensors without a gradient are treated as having a zero gradient.
    /// Nothing is modified if any gradient entry is non-finite.
    pub fn step(&mut self, params: &mut ParamSet<F>) -> Result<()> {
        if self.first_moment.len() != params.len()
            || self
                .first_moment
                .iter()
                .zip(params.tensors())
                .any(|(m, t)| m.len() != t.numel())
        {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }
        let finite = params
            .tensors()
            .iter()
            .filter_map(|t| t.grad.as_ref())
            .all(|g| g.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::NonFiniteGradient);
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let (one_b1, one_b2) = (F::of(1.0 - self.beta1), F::of(1.0 - self.beta2));
        let step = F::of(self.lr / bc1);
        let inv_sqrt_bc2 = F::of(1.0 / bc2.sqrt());
        let eps = F::of(self.eps);

        for ((tensor, m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            let grad = tensor.grad.take();
            for j in 0..m.len() {
                let g = grad.as_ref().map_or(F::zero(), |g| g[j]);
                m[j] = b1 * m[j] + one_b1 * g;
                v[j] = b2 * v[j] + one_b2 * g * g;
                tensor.values[j] -= step * m[j] / (v[j].sqrt() * inv_sqrt_bc2 + eps);
            }
            tensor.grad = grad;
        }
        Ok(())
    }
}
