//! Stacked LSTM with a linear head that emits all future snapshots at once.

use serde::{Deserialize, Serialize};

use super::recurrent::LstmCell;
use super::{concat_time, seq_dims, time_range, time_step};
use crate::error::{contract, Result};
use crate::graph::{Graph, Var};
use crate::layers::Linear;
use crate::params::{Initializer, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LstmConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub delta: usize,
}

impl LstmConfig {
    pub fn new(input_dim: usize, delta: usize) -> Self {
        Self {
            input_dim,
            hidden: 128,
            layers: 2,
            delta,
        }
    }

    pub fn tiny(input_dim: usize, delta: usize) -> Self {
        Self {
            input_dim,
            hidden: 5,
            layers: 2,
            delta,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Lstm {
    pub cfg: LstmConfig,
    cells: Vec<LstmCell>,
    head: Linear,
}

impl Lstm {
    pub fn new<T: Real>(init: &mut Initializer<'_, T>, cfg: LstmConfig) -> Result<Self> {
        if cfg.layers == 0 || cfg.delta == 0 {
            return contract(format!("lstm needs layers >= 1 and delta >= 1: {cfg:?}"));
        }
        let (d, h) = (cfg.input_dim, cfg.hidden);
        let cells = (0..cfg.layers)
            .map(|i| LstmCell::new(init, &format!("lstm.{i}"), if i == 0 { d } else { h }, h))
            .collect();
        let head = Linear::new(init, "head", h, d * cfg.delta);
        Ok(Self { cfg, cells, head })
    }

    /// One full pass: `[batch, delta_train, input_dim]`.
    fn run<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, known: &Tensor<T>) -> Result<Var> {
        let (b, l) = seq_dims(known, self.cfg.input_dim, "lstm input")?;
        if l == 0 {
            return contract("lstm needs at least one snapshot");
        }
        let zero = g.constant(Tensor::zeros(&[b, self.cfg.hidden]));
        let mut u = vec![zero; self.cfg.layers];
        let mut c = vec![zero; self.cfg.layers];
        for t in 0..l {
            let mut inp = g.constant(time_step(known, t));
            for (k, cell) in self.cells.iter().enumerate() {
                let s = cell.forward(g, store, inp, u[k], c[k])?;
                u[k] = s.u;
                c[k] = s.c;
                inp = s.u;
            }
        }
        let y = self.head.forward(g, store, u[self.cfg.layers - 1])?;
        g.reshape(y, &[b, self.cfg.delta, self.cfg.input_dim])
    }

    /// Training pass; `future` must have the trained horizon.
    pub fn forward_train<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        known: &Tensor<T>,
        future: &Tensor<T>,
    ) -> Result<Var> {
        let (_, delta) = seq_dims(future, self.cfg.input_dim, "lstm targets")?;
        if delta != self.cfg.delta {
            return contract(format!("lstm head emits {} snapshots, targets have {delta}", self.cfg.delta));
        }
        self.run(g, store, known)
    }

    /// Shorter horizons keep the leading head outputs; longer ones re-apply
    /// the model to the known history extended by its own predictions.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, known: &Tensor<T>, delta: usize) -> Result<Tensor<T>> {
        let (b, _) = seq_dims(known, self.cfg.input_dim, "lstm input")?;
        let mut history = known.clone();
        let mut out = super::zeros_seq(b, 0, self.cfg.input_dim);
        loop {
            let mut g = Graph::new();
            let y = self.run(&mut g, store, &history)?;
            let done = out.shape()[1];
            let take = (delta - done).min(self.cfg.delta);
            let part = time_range(g.value(y), 0, take);
            out = concat_time(&out, &part);
            if out.shape()[1] == delta {
                return Ok(out);
            }
            history = concat_time(&history, &part);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn build() -> (Lstm, ParamStore<f64>, Tensor<f64>) {
        let mut store = ParamStore::new();
        let m = Lstm::new(&mut Initializer::new(&mut store, 1), LstmConfig::tiny(3, 4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let known = Tensor::from_fn(&[2, 6, 3], |_| rng.random_range(-1.0..1.0));
        (m, store, known)
    }

    #[test]
    fn horizon_handling() {
        let (m, s, known) = build();
        let full = m.predict(&s, &known, 4).unwrap();
        assert_eq!(full.shape(), &[2, 4, 3]);
        assert_eq!(m.predict(&s, &known, 2).unwrap(), time_range(&full, 0, 2));
        let six = m.predict(&s, &known, 6).unwrap();
        assert_eq!(time_range(&six, 0, 4), full);
        let extended = concat_time(&known, &full);
        let second = m.predict(&s, &extended, 2).unwrap();
        assert_eq!(time_range(&six, 4, 2), second);
        assert_eq!(m.predict(&s, &known, 0).unwrap().shape(), &[2, 0, 3]);
    }

    #[test]
    fn training_horizon_must_match_head() {
        let (m, s, known) = build();
        let mut g = Graph::new();
        assert!(m.forward_train(&mut g, &s, &known, &Tensor::zeros(&[2, 2, 3])).is_err());
        let y = m.forward_train(&mut g, &s, &known, &Tensor::zeros(&[2, 4, 3])).unwrap();
        assert_eq!(g.value(y), &m.predict(&s, &known, 4).unwrap());
    }
}
