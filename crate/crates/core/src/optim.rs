//! Poly learning-rate schedule, SGD with momentum, and Adam.

use crate::error::{Error, Result};
use crate::nets::{is_weight, ParamSet};
use crate::real::Real;
use crate::tensor::Tensor;

/// `base_lr * (1 - iter/total)^power`.
pub fn poly_lr(base_lr: f64, iter: usize, total: usize, power: f64) -> Result<f64> {
    if total == 0 || iter > total {
        return Err(Error::InvalidArgument(format!("iteration {iter} outside 0..={total}")));
    }
    Ok(base_lr * (1.0 - iter as f64 / total as f64).powf(power))
}

fn check_grads<T: Real>(params: &ParamSet<T>, grads: &[Tensor<T>], slots: &[Tensor<T>]) -> Result<()> {
    if grads.len() != params.len() || slots.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            slots.len()
        )));
    }
    for ((p, g), s) in params.tensors().iter().zip(grads).zip(slots) {
        if p.shape() != g.shape() || p.shape() != s.shape() {
            return Err(Error::Shape(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
        }
    }
    Ok(())
}

fn zeros_like<T: Real>(params: &ParamSet<T>) -> Vec<Tensor<T>> {
    params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdState<T> {
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Real> SgdState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        SgdState { velocity: zeros_like(params) }
    }
}

/// `v = momentum*v + g + wd*p; p -= lr*v`. Weight decay only touches
/// `.weight` tensors.
pub fn sgd_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &[Tensor<T>],
    state: &mut SgdState<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    check_grads(params, grads, &state.velocity)?;
    let (lr, mom) = (T::lit(lr), T::lit(momentum));
    let names: Vec<bool> = params.names().iter().map(|n| is_weight(n)).collect();
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let wd = if names[i] { T::lit(weight_decay) } else { T::zero() };
        let g = grads[i].data();
        let mut v = std::mem::replace(&mut state.velocity[i], Tensor::scalar(T::zero())).into_data();
        let mut data = std::mem::replace(p, Tensor::scalar(T::zero())).into_data();
        for j in 0..data.len() {
            v[j] = mom * v[j] + g[j] + wd * data[j];
            data[j] -= lr * v[j];
        }
        let shape = grads[i].shape().to_vec();
        state.velocity[i] = Tensor::new(shape.clone(), v)?;
        *p = Tensor::new(shape, data)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        AdamState {
            step: 0,
            m: zeros_like(params),
            v: zeros_like(params),
        }
    }
}

/// Bias-corrected Adam update.
pub fn adam_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    check_grads(params, grads, &state.m)?;
    check_grads(params, grads, &state.v)?;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(betas.0), T::lit(betas.1));
    let c1 = T::lit(1.0 - betas.0.powi(t));
    let c2 = T::lit(1.0 - betas.1.powi(t));
    let (lr, eps, one) = (T::lit(lr), T::lit(eps), T::one());
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads[i].data();
        let mut m = std::mem::replace(&mut state.m[i], Tensor::scalar(T::zero())).into_data();
        let mut v = std::mem::replace(&mut state.v[i], Tensor::scalar(T::zero())).into_data();
        let mut data = std::mem::replace(p, Tensor::scalar(T::zero())).into_data();
        for j in 0..data.len() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            data[j] -= lr * mhat / (vhat.sqrt() + eps);
        }
        let dims = grads[i].shape().to_vec();
        state.m[i] = Tensor::new(dims.clone(), m)?;
        state.v[i] = Tensor::new(dims.clone(), v)?;
        *p = Tensor::new(dims, data)?;
    }
    Ok(())
}
