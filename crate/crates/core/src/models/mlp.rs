//! Two-layer perceptron over the flattened history.

use serde::{Deserialize, Serialize};

use super::seq_dims;
use crate::error::{contract, Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::Linear;
use crate::params::{Initializer, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub input_len: usize,
    pub input_dim: usize,
    pub hidden: usize,
    pub delta: usize,
}

impl MlpConfig {
    pub fn new(input_dim: usize, input_len: usize, delta: usize) -> Self {
        Self {
            input_len,
            input_dim,
            hidden: 512,
            delta,
        }
    }

    pub fn tiny(input_dim: usize, input_len: usize, delta: usize) -> Self {
        Self {
            input_len,
            input_dim,
            hidden: 7,
            delta,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub cfg: MlpConfig,
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real>(init: &mut Initializer<'_, T>, cfg: MlpConfig) -> Result<Self> {
        if cfg.input_len == 0 || cfg.delta == 0 {
            return contract(format!("mlp needs input_len >= 1 and delta >= 1: {cfg:?}"));
        }
        let d = cfg.input_dim;
        Ok(Self {
            cfg,
            fc1: Linear::new(init, "fc1", cfg.input_len * d, cfg.hidden),
            fc2: Linear::new(init, "fc2", cfg.hidden, cfg.delta * d),
        })
    }

    fn run<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, known: &Tensor<T>) -> Result<Var> {
        let (b, l) = seq_dims(known, self.cfg.input_dim, "mlp input")?;
        if l != self.cfg.input_len {
            return Err(Error::Unsupported(format!(
                "mlp was built for {} snapshots, got {l}",
                self.cfg.input_len
            )));
        }
        let x = g.constant(known.reshape(&[b, l * self.cfg.input_dim])?);
        let h = self.fc1.forward(g, store, x)?;
        let h = g.relu(h)?;
        let y = self.fc2.forward(g, store, h)?;
        g.reshape(y, &[b, self.cfg.delta, self.cfg.input_dim])
    }

    pub fn forward_train<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        known: &Tensor<T>,
        future: &Tensor<T>,
    ) -> Result<Var> {
        let (_, delta) = seq_dims(future, self.cfg.input_dim, "mlp targets")?;
        if delta != self.cfg.delta {
            return contract(format!("mlp emits {} snapshots, targets have {delta}", self.cfg.delta));
        }
        self.run(g, store, known)
    }

    /// Fixed-length prediction; other lengths are unsupported.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, known: &Tensor<T>, delta: usize) -> Result<Tensor<T>> {
        if delta != self.cfg.delta {
            return Err(Error::Unsupported(format!(
                "mlp was built for horizon {}, asked for {delta}",
                self.cfg.delta
            )));
        }
        let mut g = Graph::new();
        let y = self.run(&mut g, store, known)?;
        Ok(g.value(y).clone())
    }
}
