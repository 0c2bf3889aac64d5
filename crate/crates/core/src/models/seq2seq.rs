//! GRU encoder/decoder with attention over the encoder outputs.
//!
//! At each decoder step the attention layer maps `concat(x_i, u_i)` to
//! `l_max` logits, the first `l` are normalized, and weight `k` pairs with
//! encoder output `u_{l−k}` when `reverse` is set (with `u_{k+1}` otherwise).
//! The resulting context is combined with the current input by a linear
//! layer and ReLU and fed to the decoder GRU stack.

use serde::{Deserialize, Serialize};

use super::recurrent::GruCell;
use super::{seq_dims, time_step, zeros_seq};
use crate::error::{contract, Result};
use crate::graph::{Graph, Var};
use crate::layers::Linear;
use crate::params::{Initializer, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seq2SeqConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub l_max: usize,
    pub reverse: bool,
}

impl Seq2SeqConfig {
    pub fn new(input_dim: usize, reverse: bool) -> Self {
        Self {
            input_dim,
            hidden: 128,
            layers: 2,
            l_max: 20,
            reverse,
        }
    }

    pub fn tiny(input_dim: usize, reverse: bool) -> Self {
        Self {
            input_dim,
            hidden: 5,
            layers: 2,
            l_max: 6,
            reverse,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Seq2Seq {
    pub cfg: Seq2SeqConfig,
    encoder: Vec<GruCell>,
    decoder: Vec<GruCell>,
    attn: Linear,
    combine: Linear,
    out: Linear,
}

/// Encoder result: top-layer outputs per step and final per-layer states.
pub struct Encoded {
    pub outputs: Vec<Var>,
    pub states: Vec<Var>,
}

impl Seq2Seq {
    pub fn new<T: Real>(init: &mut Initializer<'_, T>, cfg: Seq2SeqConfig) -> Result<Self> {
        if cfg.layers == 0 || cfg.l_max == 0 {
            return contract(format!("seq2seq needs layers >= 1 and l_max >= 1: {cfg:?}"));
        }
        let (d, h) = (cfg.input_dim, cfg.hidden);
        let stack = |init: &mut Initializer<'_, T>, name: &str| -> Vec<GruCell> {
            (0..cfg.layers)
                .map(|i| GruCell::new(init, &format!("{name}.{i}"), if i == 0 { d } else { h }, h))
                .collect()
        };
        let encoder = stack(init, "enc");
        let decoder = stack(init, "dec");
        Ok(Self {
            cfg,
            encoder,
            decoder,
            attn: Linear::new(init, "attn", d + h, cfg.l_max),
            combine: Linear::new(init, "combine", d + h, d),
            out: Linear::new(init, "out", h, d),
        })
    }

    pub fn encode<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, known: &Tensor<T>) -> Result<Encoded> {
        let (b, l) = seq_dims(known, self.cfg.input_dim, "seq2seq input")?;
        if l == 0 {
            return contract("seq2seq encoder needs at least one snapshot");
        }
        if l > self.cfg.l_max {
            return contract(format!("history length {l} exceeds l_max {}", self.cfg.l_max));
        }
        let zero = g.constant(Tensor::zeros(&[b, self.cfg.hidden]));
        let mut states = vec![zero; self.cfg.layers];
        let mut outputs = Vec::with_capacity(l);
        for t in 0..l {
            let mut inp = g.constant(time_step(known, t));
            for (cell, s) in self.encoder.iter().zip(states.iter_mut()) {
                *s = cell.forward(g, store, inp, *s)?;
                inp = *s;
            }
            outputs.push(inp);
        }
        Ok(Encoded { outputs, states })
    }

    /// Attention context for input `x_i` and top decoder state `u_i`.
    /// Returns `(context [batch, hidden], weights [batch, l])`.
    pub fn attend<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x_i: Var,
        u_i: Var,
        enc_outputs: &[Var],
    ) -> Result<(Var, Var)> {
        let l = enc_outputs.len();
        if l == 0 || l > self.cfg.l_max {
            return contract(format!("attention over {l} encoder outputs with l_max {}", self.cfg.l_max));
        }
        let b = g.shape(x_i)[0];
        let h = self.cfg.hidden;
        let xu = g.concat(&[x_i, u_i])?;
        let logits = self.attn.forward(g, store, xu)?;
        let logits = g.slice_last(logits, 0, l)?;
        let w = g.softmax(logits)?;
        let ordered: Vec<Var> = if self.cfg.reverse {
            enc_outputs.iter().rev().copied().collect()
        } else {
            enc_outputs.to_vec()
        };
        let e = g.concat(&ordered)?;
        let e = g.reshape(e, &[b, l, h])?;
        let w3 = g.reshape(w, &[b, 1, l])?;
        let ctx = g.matmul(w3, e, false, false)?;
        let ctx = g.reshape(ctx, &[b, h])?;
        Ok((ctx, w))
    }

    /// One decoder step; updates `states` in place and returns the output snapshot.
    fn step<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x_i: Var,
        states: &mut [Var],
        enc_outputs: &[Var],
    ) -> Result<Var> {
        let top = *states.last().expect("at least one layer");
        let (ctx, _) = self.attend(g, store, x_i, top, enc_outputs)?;
        let xc = g.concat(&[x_i, ctx])?;
        let mut inp = self.combine.forward(g, store, xc)?;
        inp = g.relu(inp)?;
        for (cell, s) in self.decoder.iter().zip(states.iter_mut()) {
            *s = cell.forward(g, store, inp, *s)?;
            inp = *s;
        }
        self.out.forward(g, store, inp)
    }

    fn run<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        known: &Tensor<T>,
        delta: usize,
        teacher: Option<&Tensor<T>>,
    ) -> Result<Var> {
        let (b, l) = seq_dims(known, self.cfg.input_dim, "seq2seq input")?;
        let d = self.cfg.input_dim;
        let enc = self.encode(g, store, known)?;
        let mut states = enc.states.clone();
        let mut x = g.constant(time_step(known, l - 1));
        let mut outs = Vec::with_capacity(delta);
        for k in 0..delta {
            let y = self.step(g, store, x, &mut states, &enc.outputs)?;
            outs.push(y);
            x = match teacher {
                Some(f) if k + 1 < delta => g.constant(time_step(f, k)),
                _ => y,
            };
        }
        if outs.is_empty() {
            return Ok(g.constant(zeros_seq(b, 0, d)));
        }
        let flat = g.concat(&outs)?;
        g.reshape(flat, &[b, delta, d])
    }

    /// Teacher-forced pass: step `k > 0` consumes `future[.., k−1]`.
    pub fn forward_train<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        known: &Tensor<T>,
        future: &Tensor<T>,
    ) -> Result<Var> {
        let (b, _) = seq_dims(known, self.cfg.input_dim, "seq2seq input")?;
        let (bf, delta) = seq_dims(future, self.cfg.input_dim, "seq2seq targets")?;
        if bf != b || delta == 0 {
            return contract(format!("teacher forcing needs {b} target sequences of length >= 1"));
        }
        self.run(g, store, known, delta, Some(future))
    }

    /// Free-running prediction of `delta` snapshots.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, known: &Tensor<T>, delta: usize) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let y = self.run(&mut g, store, known, delta, None)?;
        Ok(g.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: Seq2SeqConfig, seed: u64) -> (Seq2Seq, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let m = Seq2Seq::new(&mut Initializer::new(&mut store, seed), cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
        for t in store.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        (m, store)
    }

    fn rand_seq(rng: &mut ChaCha8Rng, b: usize, l: usize, d: usize) -> Tensor<f64> {
        Tensor::from_fn(&[b, l, d], |_| rng.random_range(-1.0..1.0))
    }

    fn states(g: &mut Graph<f64>, rng: &mut ChaCha8Rng, l: usize, h: usize) -> Vec<Var> {
        (0..l).map(|_| g.constant(Tensor::from_fn(&[1, h], |_| rng.random_range(-1.0..1.0)))).collect()
    }

    #[test]
    fn single_output_context_is_that_output() {
        let (m, s) = build(Seq2SeqConfig::tiny(4, true), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let enc = states(&mut g, &mut rng, 1, 5);
        let x = g.constant(Tensor::from_fn(&[1, 4], |i| i as f64));
        let u = g.constant(Tensor::from_fn(&[1, 5], |i| -(i as f64)));
        let (ctx, _) = m.attend(&mut g, &s, x, u, &enc).unwrap();
        assert!(g.value(ctx).max_abs_diff(g.value(enc[0])) < 1e-15);
    }

    #[test]
    fn index_zero_weight_pairs_with_most_recent_output() {
        let (m, mut s) = build(Seq2SeqConfig::tiny(4, true), 1);
        for v in s.get_mut(m.attn.weight).data_mut() {
            *v = 0.0;
        }
        let bias = s.get_mut(m.attn.bias);
        for (i, v) in bias.data_mut().iter_mut().enumerate() {
            *v = if i == 0 { 1e3 } else { 0.0 };
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let enc = states(&mut g, &mut rng, 5, 5);
        let x = g.constant(Tensor::full(&[1, 4], 0.2));
        let u = g.constant(Tensor::full(&[1, 5], -0.3));
        let (ctx, _) = m.attend(&mut g, &s, x, u, &enc).unwrap();
        assert_eq!(g.value(ctx), g.value(enc[4]));
    }

    #[test]
    fn reversed_pairing_equals_last_l_of_l_max_unreversed() {
        // Pairing oracle: with reversal, logit index k multiplies u_{l−k}.
        // The alternative reads logits l_max−l..l_max against u_1..u_l, so
        // logit index l_max−l+j multiplies u_{j+1}. Permuting the logit rows
        // so both conventions see the same score per encoder output must
        // give the same context.
        let cfg = Seq2SeqConfig::tiny(4, true);
        let (m, s) = build(cfg, 7);
        let (l, lm) = (5, cfg.l_max);
        let mut alt = s.clone();
        let w = s.get(m.attn.weight).clone();
        let bb = s.get(m.attn.bias).clone();
        let cols = w.shape()[1];
        for k in 0..l {
            // reversed index k ↔ u_{l−k} ↔ alternative index lm − l + (l − k − 1)
            let target = lm - 1 - k;
            for c in 0..cols {
                alt.get_mut(m.attn.weight).set(&[target, c], w.get(&[k, c]));
            }
            alt.get_mut(m.attn.bias).set(&[target], bb.get(&[k]));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = Graph::new();
        let enc = states(&mut g, &mut rng, l, 5);
        let x = g.constant(Tensor::from_fn(&[1, 4], |i| 0.1 * i as f64));
        let u = g.constant(Tensor::from_fn(&[1, 5], |i| 0.3 - 0.1 * i as f64));
        let (ctx, _) = m.attend(&mut g, &s, x, u, &enc).unwrap();

        // Alternative convention evaluated by hand.
        let xu: Vec<f64> = g.value(x).data().iter().chain(g.value(u).data()).copied().collect();
        let aw = alt.get(m.attn.weight);
        let ab = alt.get(m.attn.bias);
        let logits: Vec<f64> = (lm - l..lm)
            .map(|r| ab.get(&[r]) + (0..cols).map(|c| aw.get(&[r, c]) * xu[c]).sum::<f64>())
            .collect();
        let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut expected = [0.0; 5];
        for (j, &ej) in e.iter().enumerate() {
            for (h, out) in expected.iter_mut().enumerate() {
                *out += ej / z * g.value(enc[j]).data()[h];
            }
        }
        for (a, b) in g.value(ctx).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn history_longer_than_l_max_is_rejected() {
        let (m, s) = build(Seq2SeqConfig::tiny(4, true), 1);
        assert!(m.predict(&s, &Tensor::zeros(&[1, 7, 4]), 1).is_err());
        assert!(m.predict(&s, &Tensor::zeros(&[1, 6, 4]), 1).is_ok());
    }

    #[test]
    fn default_config_accepts_both_history_lengths() {
        let mut store = ParamStore::<f32>::new();
        let m = Seq2Seq::new(&mut Initializer::new(&mut store, 0), Seq2SeqConfig::new(64, true)).unwrap();
        for l in [8, 16] {
            let out = m.predict(&store, &Tensor::full(&[1, l, 64], 0.1f32), 1).unwrap();
            assert_eq!(out.shape(), &[1, 1, 64]);
        }
    }

    #[test]
    fn teacher_forcing_on_own_outputs_reproduces_free_run() {
        let (m, s) = build(Seq2SeqConfig::tiny(4, true), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let known = rand_seq(&mut rng, 3, 5, 4);
        let pred = m.predict(&s, &known, 4).unwrap();
        let mut g = Graph::new();
        let tf = m.forward_train(&mut g, &s, &known, &pred).unwrap();
        assert!(g.value(tf).max_abs_diff(&pred) < 1e-12);
        let p2 = m.predict(&s, &known, 2).unwrap();
        assert_eq!(super::super::time_range(&pred, 0, 2), p2);
    }

    #[test]
    fn reversal_flag_changes_predictions() {
        let (a, s) = build(Seq2SeqConfig::tiny(4, true), 5);
        let (b, _) = build(Seq2SeqConfig::tiny(4, false), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let known = rand_seq(&mut rng, 1, 4, 4);
        assert_ne!(a.predict(&s, &known, 2).unwrap(), b.predict(&s, &known, 2).unwrap());
        let one = rand_seq(&mut rng, 1, 1, 4);
        assert_eq!(a.predict(&s, &one, 2).unwrap(), b.predict(&s, &one, 2).unwrap());
    }
}
