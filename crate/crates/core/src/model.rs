//! The differentiable-loss interface every estimator consumes.
//!
//! A model implements [`DifferentiableLoss::eval_grad`] once, generically
//! over [`Scalar`]. The `f64` instantiation is the reverse-mode gradient;
//! the [`Dual`] instantiation run with tangent `v` propagates a directional
//! derivative through the same backward pass, giving the exact
//! Hessian-vector product H·v without ever forming H.

use crate::error::{CoreError, Result};
use crate::params::{Layout, ParameterVector};
use crate::scalar::{Dual, Scalar};
use std::sync::Arc;

/// Loss value and gradient at a point.
#[derive(Clone, Debug)]
pub struct GradResult {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// A differentiable loss over (parameters, data batch).
pub trait DifferentiableLoss: Sync {
    type Batch: Sync;

    fn layout(&self) -> &Arc<Layout>;

    fn dim(&self) -> usize {
        self.layout().total()
    }

    /// Evaluate the batch loss and write its gradient into `grad_out`
    /// (same length as `params`). Returns the loss.
    fn eval_grad<S: Scalar>(
        &self,
        params: &[S],
        batch: &Self::Batch,
        grad_out: &mut [S],
    ) -> Result<S>;

    /// Batch loss without the gradient. Default goes through `eval_grad`;
    /// models may override with a cheaper forward-only path.
    fn eval_loss(&self, params: &[f64], batch: &Self::Batch) -> Result<f64> {
        let mut g = vec![0.0; params.len()];
        Ok(self.eval_grad(params, batch, &mut g)?)
    }
}

fn check_params<M: DifferentiableLoss>(model: &M, params: &ParameterVector) -> Result<()> {
    if !params.layout.same_as(model.layout()) {
        return Err(CoreError::shape(format!(
            "parameter layout ({} values) does not match model layout ({} values)",
            params.len(),
            model.dim()
        )));
    }
    Ok(())
}

/// Loss and exact reverse-mode gradient of the batch loss.
pub fn value_and_grad<M: DifferentiableLoss>(
    model: &M,
    params: &ParameterVector,
    batch: &M::Batch,
) -> Result<GradResult> {
    check_params(model, params)?;
    value_and_grad_flat(model, &params.values, batch)
}

/// As [`value_and_grad`] but over a raw slice (layout already trusted).
pub fn value_and_grad_flat<M: DifferentiableLoss>(
    model: &M,
    params: &[f64],
    batch: &M::Batch,
) -> Result<GradResult> {
    let mut grad = vec![0.0; params.len()];
    let loss = model.eval_grad(params, batch, &mut grad)?;
    if !loss.is_finite() {
        return Err(CoreError::NonFinite {
            location: "loss".into(),
        });
    }
    Ok(GradResult { loss, grad })
}

/// Matrix-free Hessian-vector product H·v of the batch loss,
/// computed exactly by forward-over-reverse differentiation.
pub fn hvp<M: DifferentiableLoss>(
    model: &M,
    params: &ParameterVector,
    batch: &M::Batch,
    v: &[f64],
) -> Result<Vec<f64>> {
    check_params(model, params)?;
    hvp_flat(model, &params.values, batch, v)
}

pub fn hvp_flat<M: DifferentiableLoss>(
    model: &M,
    params: &[f64],
    batch: &M::Batch,
    v: &[f64],
) -> Result<Vec<f64>> {
    if v.len() != params.len() {
        return Err(CoreError::shape(format!(
            "hvp direction has length {}, parameters have {}",
            v.len(),
            params.len()
        )));
    }
    let dual_params: Vec<Dual> = params
        .iter()
        .zip(v.iter())
        .map(|(&p, &t)| Dual::new(p, t))
        .collect();
    let mut dual_grad = vec![Dual::constant(0.0); params.len()];
    let loss = model.eval_grad(&dual_params, batch, &mut dual_grad)?;
    if !loss.v.is_finite() {
        return Err(CoreError::NonFinite {
            location: "loss".into(),
        });
    }
    Ok(dual_grad.iter().map(|g| g.d).collect())
}
