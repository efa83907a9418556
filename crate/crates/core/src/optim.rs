//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps_hat: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// First/second moment buffers, one per parameter tensor.
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
    pub step_count: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { first_moment: zeros.clone(), second_moment: zeros, step_count: 0 }
    }
}

/// One bias-corrected Adam update, in place. A `None` gradient is treated as zero.
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut OptimState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
        return Err(Error::Contract(format!("invalid Adam hyperparameters {cfg:?}")));
    }
    if grads.len() != params.len() || state.first_moment.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.shape() != params.tensor(i).shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter {} of shape {:?}",
                    g.shape(),
                    params.name(i),
                    params.tensor(i).shape()
                )));
            }
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let b1 = T::of(cfg.beta1);
    let b2 = T::of(cfg.beta2);
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let lr = T::of(cfg.lr);
    let eps = T::of(cfg.eps_hat);
    for (i, g) in grads.iter().enumerate() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        let p = params.tensor_mut(i).data_mut();
        for j in 0..p.len() {
            let gj = g.as_ref().map_or(T::zero(), |g| g.data()[j]);
            m[j] = b1 * m[j] + (T::one() - b1) * gj;
            v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            p[j] = p[j] - lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(x: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.push("x", Tensor::from_f64(&[1], &[x]).unwrap());
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single(1.5);
        let mut st = OptimState::new(&p);
        for _ in 0..10 {
            adam_step(&mut p, &[Some(Tensor::zeros(&[1]))], &mut st, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p.tensor(0).item(), 1.5);
        assert_eq!(st.step_count, 10);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::<f64>::from_f64(&[3], &[0.0, 0.0, 0.0]).unwrap());
        let mut st = OptimState::new(&p);
        let g = Tensor::from_f64(&[3], &[2.0, -0.5, 0.0]).unwrap();
        adam_step(&mut p, &[Some(g)], &mut st, &AdamConfig::default()).unwrap();
        let w = p.tensor(0).data();
        assert!((w[0] + 1e-3).abs() < 1e-9);
        assert!((w[1] - 1e-3).abs() < 1e-9);
        assert_eq!(w[2], 0.0);
    }

    #[test]
    fn quadratic_converges() {
        // f(x) = x², grad 2x; the scalar recurrence reaches |x| < 0.5 in 100 steps
        let mut p = single(5.0);
        let mut st = OptimState::new(&p);
        let cfg = AdamConfig::with_lr(0.1);
        for _ in 0..100 {
            let x = p.tensor(0).item();
            adam_step(&mut p, &[Some(Tensor::scalar(2.0 * x))], &mut st, &cfg).unwrap();
        }
        assert!(p.tensor(0).item().abs() < 0.5, "x = {}", p.tensor(0).item());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = single(1.0);
        let mut st = OptimState::new(&p);
        let r = adam_step(&mut p, &[Some(Tensor::zeros(&[2]))], &mut st, &AdamConfig::default());
        assert!(matches!(r, Err(Error::Shape(_))));
    }
}
