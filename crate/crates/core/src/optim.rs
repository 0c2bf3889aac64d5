//! Adam with bias correction.

use crate::error::{shape_err, Error, Result};
use crate::graph::Gradients;
use crate::params::ParamStore;
use crate::scalar::{lit, Real};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for every parameter tensor plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Tensor<T>], config: AdamConfig) -> Result<Self> {
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::Contract(format!(
                "Adam betas must lie in [0, 1): {} {}",
                config.beta1, config.beta2
            )));
        }
        let zeros: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Ok(Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
            config,
        })
    }

    pub fn for_store(store: &ParamStore<T>, config: AdamConfig) -> Result<Self> {
        Self::new(store.tensors(), config)
    }

    /// In-place update of `params` with `grads`.
    pub fn apply(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return shape_err(
                "adam_step",
                format!(
                    "{} params, {} grads, {} moments",
                    params.len(),
                    grads.len(),
                    self.first_moment.len()
                ),
            );
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first_moment[i].shape() {
                return shape_err("adam_step", format!("tensor {i}: {:?} vs {:?}", p.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter tensor {i}")));
            }
        }
        self.step_count += 1;
        let c = self.config;
        let (b1, b2): (T, T) = (lit(c.beta1), lit(c.beta2));
        let bc1: T = lit(1.0 - c.beta1.powf(self.step_count as f64));
        let bc2: T = lit(1.0 - c.beta2.powf(self.step_count as f64));
        let (lr, eps): (T, T) = (lit(c.lr), lit(c.eps));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Update a parameter store from a backward pass.
    pub fn step_store(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        let dense = grads.dense(store);
        self.apply(store.tensors_mut(), &dense)
    }
}

/// Pure Adam step: returns updated parameters and state.
pub fn adam_step<T: Real>(
    params: &[Tensor<T>],
    grads: &[Tensor<T>],
    state: &AdamState<T>,
) -> Result<(Vec<Tensor<T>>, AdamState<T>)> {
    let mut p = params.to_vec();
    let mut s = state.clone();
    s.apply(&mut p, grads)?;
    Ok((p, s))
}
