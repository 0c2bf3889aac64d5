//! Predictor families and the shared sequence helpers they use.
//!
//! Batched sequences are `[batch, length, dim]` tensors.

pub mod checkpoint;
pub mod lstm;
pub mod mar;
pub mod mlp;
pub mod recurrent;
pub mod seq2seq;
pub mod transformer;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, shape_err, Error, Result};
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::graph::{Graph, Var};
use crate::params::{Initializer, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub use lstm::{Lstm, LstmConfig};
pub use mar::{mar_fit, MarModel};
pub use mlp::{Mlp, MlpConfig};
pub use seq2seq::{Seq2Seq, Seq2SeqConfig};
pub use transformer::{DecoderMode, PeMode, Transformer, TransformerConfig};

/// Snapshots read by the parallel transformer decoder.
pub const PARALLEL_PREFIX: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    TransformerRpe,
    Transformer,
    TransformerParallel,
    Seq2SeqAttnR,
    Seq2SeqAttn,
    Lstm,
    Mlp,
    Mar,
}

impl Family {
    pub const ALL: [Family; 8] = [
        Family::TransformerRpe,
        Family::Transformer,
        Family::TransformerParallel,
        Family::Seq2SeqAttnR,
        Family::Seq2SeqAttn,
        Family::Lstm,
        Family::Mlp,
        Family::Mar,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Family::TransformerRpe => "transformer-rpe",
            Family::Transformer => "transformer",
            Family::TransformerParallel => "transformer-parallel",
            Family::Seq2SeqAttnR => "seq2seq-attn-r",
            Family::Seq2SeqAttn => "seq2seq-attn",
            Family::Lstm => "lstm",
            Family::Mlp => "mlp",
            Family::Mar => "mar",
        }
    }

    pub fn is_neural(self) -> bool {
        self != Family::Mar
    }

    /// Reference parameter totals for the published configurations.
    pub fn reference_param_count(self) -> Option<usize> {
        match self {
            Family::Lstm => Some(264_448),
            Family::Seq2SeqAttnR => Some(370_832),
            Family::TransformerRpe | Family::TransformerParallel => Some(178_752),
            _ => None,
        }
    }

    /// Full-size configuration for snapshot width `input_dim`, history
    /// `l` and horizon `delta`.
    pub fn config(self, input_dim: usize, l: usize, delta: usize) -> ModelConfig {
        let seq = DecoderMode::Sequential;
        match self {
            Family::TransformerRpe => ModelConfig::Transformer(TransformerConfig::new(input_dim, PeMode::Reversed, seq)),
            Family::Transformer => ModelConfig::Transformer(TransformerConfig::new(input_dim, PeMode::Standard, seq)),
            Family::TransformerParallel => ModelConfig::Transformer(TransformerConfig::new(
                input_dim,
                PeMode::Standard,
                DecoderMode::Parallel { prefix: PARALLEL_PREFIX },
            )),
            Family::Seq2SeqAttnR => ModelConfig::Seq2Seq(Seq2SeqConfig::new(input_dim, true)),
            Family::Seq2SeqAttn => ModelConfig::Seq2Seq(Seq2SeqConfig::new(input_dim, false)),
            Family::Lstm => ModelConfig::Lstm(LstmConfig::new(input_dim, delta)),
            Family::Mlp => ModelConfig::Mlp(MlpConfig::new(input_dim, l, delta)),
            Family::Mar => ModelConfig::Mar(MarConfig { order: l, dim: input_dim }),
        }
    }

    /// Small configuration for gradient checks and smoke tests.
    pub fn tiny_config(self, input_dim: usize, l: usize, delta: usize) -> ModelConfig {
        let seq = DecoderMode::Sequential;
        match self {
            Family::TransformerRpe => ModelConfig::Transformer(TransformerConfig::tiny(input_dim, PeMode::Reversed, seq)),
            Family::Transformer => ModelConfig::Transformer(TransformerConfig::tiny(input_dim, PeMode::Standard, seq)),
            Family::TransformerParallel => ModelConfig::Transformer(TransformerConfig::tiny(
                input_dim,
                PeMode::Standard,
                DecoderMode::Parallel { prefix: l.min(PARALLEL_PREFIX) },
            )),
            Family::Seq2SeqAttnR => ModelConfig::Seq2Seq(Seq2SeqConfig::tiny(input_dim, true)),
            Family::Seq2SeqAttn => ModelConfig::Seq2Seq(Seq2SeqConfig::tiny(input_dim, false)),
            Family::Lstm => ModelConfig::Lstm(LstmConfig::tiny(input_dim, delta)),
            Family::Mlp => ModelConfig::Mlp(MlpConfig::tiny(input_dim, l, delta)),
            Family::Mar => ModelConfig::Mar(MarConfig { order: l, dim: input_dim }),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.id() == s)
            .ok_or_else(|| Error::Unsupported(format!("unknown model family '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarConfig {
    pub order: usize,
    pub dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelConfig {
    Transformer(TransformerConfig),
    Seq2Seq(Seq2SeqConfig),
    Lstm(LstmConfig),
    Mlp(MlpConfig),
    Mar(MarConfig),
}

impl ModelConfig {
    pub fn family(&self) -> Family {
        match self {
            ModelConfig::Transformer(c) => match (c.decoder, c.encoder_pe) {
                (DecoderMode::Parallel { .. }, _) => Family::TransformerParallel,
                (DecoderMode::Sequential, PeMode::Reversed) => Family::TransformerRpe,
                (DecoderMode::Sequential, PeMode::Standard) => Family::Transformer,
            },
            ModelConfig::Seq2Seq(c) if c.reverse => Family::Seq2SeqAttnR,
            ModelConfig::Seq2Seq(_) => Family::Seq2SeqAttn,
            ModelConfig::Lstm(_) => Family::Lstm,
            ModelConfig::Mlp(_) => Family::Mlp,
            ModelConfig::Mar(_) => Family::Mar,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ModelConfig::Transformer(c) => c.input_dim,
            ModelConfig::Seq2Seq(c) => c.input_dim,
            ModelConfig::Lstm(c) => c.input_dim,
            ModelConfig::Mlp(c) => c.input_dim,
            ModelConfig::Mar(c) => c.dim,
        }
    }
}

/// Network structure with parameter handles into a [`ParamStore`].
#[derive(Clone, Debug)]
pub enum Architecture {
    Transformer(Transformer),
    Seq2Seq(Seq2Seq),
    Lstm(Lstm),
    Mlp(Mlp),
}

impl Architecture {
    pub fn build<T: Real>(config: &ModelConfig, init: &mut Initializer<'_, T>) -> Result<Self> {
        Ok(match *config {
            ModelConfig::Transformer(c) => Architecture::Transformer(Transformer::new(init, c)?),
            ModelConfig::Seq2Seq(c) => Architecture::Seq2Seq(Seq2Seq::new(init, c)?),
            ModelConfig::Lstm(c) => Architecture::Lstm(Lstm::new(init, c)?),
            ModelConfig::Mlp(c) => Architecture::Mlp(Mlp::new(init, c)?),
            ModelConfig::Mar(_) => return contract("the autoregressive baseline has no network"),
        })
    }

    pub fn forward_train<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        known: &Tensor<T>,
        future: &Tensor<T>,
    ) -> Result<Var> {
        match self {
            Architecture::Transformer(m) => m.forward_train(g, store, known, future),
            Architecture::Seq2Seq(m) => m.forward_train(g, store, known, future),
            Architecture::Lstm(m) => m.forward_train(g, store, known, future),
            Architecture::Mlp(m) => m.forward_train(g, store, known, future),
        }
    }

    pub fn predict<T: Real>(&self, store: &ParamStore<T>, known: &Tensor<T>, delta: usize) -> Result<Tensor<T>> {
        match self {
            Architecture::Transformer(m) => m.predict(store, known, delta),
            Architecture::Seq2Seq(m) => m.predict(store, known, delta),
            Architecture::Lstm(m) => m.predict(store, known, delta),
            Architecture::Mlp(m) => m.predict(store, known, delta),
        }
    }
}

/// A trainable predictor: structure, configuration and parameters.
#[derive(Clone, Debug)]
pub struct NeuralModel<T> {
    pub config: ModelConfig,
    pub arch: Architecture,
    pub params: ParamStore<T>,
}

impl<T: Real> NeuralModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let arch = Architecture::build(&config, &mut Initializer::new(&mut params, seed))?;
        Ok(Self { config, arch, params })
    }

    pub fn family(&self) -> Family {
        self.config.family()
    }

    /// Teacher-forced (or one-shot) outputs shaped like `future`.
    pub fn forward_train(&self, g: &mut Graph<T>, known: &Tensor<T>, future: &Tensor<T>) -> Result<Var> {
        self.arch.forward_train(g, &self.params, known, future)
    }

    pub fn predict(&self, known: &Tensor<T>, delta: usize) -> Result<Tensor<T>> {
        self.arch.predict(&self.params, known, delta)
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn cast<U: Real>(&self) -> NeuralModel<U> {
        NeuralModel {
            config: self.config,
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }
}

/// Any predictor family with its parameters.
#[derive(Clone, Debug)]
pub enum ModelBundle {
    Neural(NeuralModel<f32>),
    Mar(MarModel),
}

impl ModelBundle {
    pub fn family(&self) -> Family {
        match self {
            ModelBundle::Neural(m) => m.family(),
            ModelBundle::Mar(_) => Family::Mar,
        }
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            ModelBundle::Neural(m) => m.config,
            ModelBundle::Mar(m) => ModelConfig::Mar(MarConfig {
                order: m.order,
                dim: m.dim,
            }),
        }
    }

    pub fn predict(&self, known: &Tensor<f32>, delta: usize) -> Result<Tensor<f32>> {
        match self {
            ModelBundle::Neural(m) => m.predict(known, delta),
            ModelBundle::Mar(m) => m.predict(known, delta),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            ModelBundle::Neural(m) => m.num_params(),
            ModelBundle::Mar(m) => m.num_params(),
        }
    }
}

/// Per-block parameter counts of a freshly built model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamAudit {
    pub family: Family,
    pub blocks: Vec<(String, usize)>,
    pub total: usize,
    pub reference: Option<usize>,
}

impl ParamAudit {
    /// Signed difference to the reference count.
    pub fn delta(&self) -> Option<i64> {
        self.reference.map(|r| self.total as i64 - r as i64)
    }
}

pub fn count_parameters(config: &ModelConfig) -> Result<usize> {
    Ok(audit_parameters(config)?.total)
}

/// Parameter counts grouped by block (`enc.0`, `dec.1`, `attn`, ...).
pub fn audit_parameters(config: &ModelConfig) -> Result<ParamAudit> {
    let family = config.family();
    let (blocks, total) = match config {
        ModelConfig::Mar(c) => {
            let coef = c.order * c.dim * c.dim;
            (vec![("coefficients".into(), coef), ("intercept".into(), c.dim)], coef + c.dim)
        }
        _ => {
            let m = NeuralModel::<f32>::new(*config, 0)?;
            (m.params.audit(2), m.num_params())
        }
    };
    Ok(ParamAudit {
        family,
        blocks,
        total,
        reference: family.reference_param_count(),
    })
}

/// Gradient check of a tiny `f64` model of `family` (snapshot width 4,
/// batch 2) on a mean-squared loss, with slightly perturbed parameters so
/// zero-initialized biases are probed away from zero.
pub fn gradcheck_family(family: Family, l: usize, delta: usize, seed: u64) -> Result<GradCheckReport> {
    if !family.is_neural() {
        return Err(Error::Unsupported(format!("{family} has no gradient")));
    }
    let d = 4;
    let mut model = NeuralModel::<f64>::new(family.tiny_config(d, l, delta), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for t in model.params.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let known = Tensor::from_fn(&[2, l, d], |_| rng.random_range(-1.0..1.0));
    let future = Tensor::from_fn(&[2, delta, d], |_| rng.random_range(-1.0..1.0));
    let arch = &model.arch;
    grad_check(
        |g, s| {
            let y = arch.forward_train(g, s, &known, &future)?;
            let t = g.constant(future.clone());
            let e = g.sub(y, t)?;
            let sq = g.mul(e, e)?;
            g.mean(sq)
        },
        &model.params,
        3 * model.params.len(),
        seed,
    )
}

pub(crate) fn seq_dims<T: Real>(x: &Tensor<T>, dim: usize, what: &str) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() != 3 || s[2] != dim {
        return shape_err("sequence", format!("{what}: expected [batch, len, {dim}], got {s:?}"));
    }
    Ok((s[0], s[1]))
}

/// `[batch, dim]` slice at time `t`.
pub fn time_step<T: Real>(x: &Tensor<T>, t: usize) -> Tensor<T> {
    let s = x.shape();
    let mut out = Tensor::zeros(&[s[0], s[2]]);
    let d = s[2];
    for b in 0..s[0] {
        let base = (b * s[1] + t) * d;
        out.data_mut()[b * d..(b + 1) * d].copy_from_slice(&x.data()[base..base + d]);
    }
    out
}

/// `[batch, len, dim]` window starting at time `start`.
pub fn time_range<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Tensor<T> {
    let s = x.shape();
    let (l, d) = (s[1], s[2]);
    let mut data = Vec::with_capacity(s[0] * len * d);
    for b in 0..s[0] {
        data.extend_from_slice(&x.data()[(b * l + start) * d..(b * l + start + len) * d]);
    }
    Tensor::new(&[s[0], len, d], data).expect("window inside sequence")
}

/// Join two batches of sequences along time.
pub fn concat_time<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (sa, sb) = (a.shape(), b.shape());
    debug_assert!(sa[0] == sb[0] && sa[2] == sb[2]);
    let (n, d) = (sa[0], sa[2]);
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * sa[1] * d..(i + 1) * sa[1] * d]);
        data.extend_from_slice(&b.data()[i * sb[1] * d..(i + 1) * sb[1] * d]);
    }
    Tensor::new(&[n, sa[1] + sb[1], d], data).expect("consistent shapes")
}

pub fn zeros_seq<T: Real>(batch: usize, len: usize, dim: usize) -> Tensor<T> {
    Tensor::zeros(&[batch, len, dim])
}

/// Repeat a `[l, d]` table over a batch axis.
pub(crate) fn tile<T: Real>(table: &Tensor<T>, batch: usize) -> Tensor<T> {
    let mut shape = vec![batch];
    shape.extend_from_slice(table.shape());
    let mut data = Vec::with_capacity(batch * table.len());
    for _ in 0..batch {
        data.extend_from_slice(table.data());
    }
    Tensor::new(&shape, data).expect("consistent shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reference_parameter_counts() {
        let lstm = audit_parameters(&Family::Lstm.config(64, 16, 4)).unwrap();
        assert_eq!(lstm.total, 264_448);
        assert_eq!(lstm.delta(), Some(0));
        let mlp = count_parameters(&Family::Mlp.config(64, 16, 4)).unwrap();
        assert_eq!(mlp, 1024 * 512 + 512 + 512 * 256 + 256);
        for f in [Family::TransformerRpe, Family::TransformerParallel, Family::Seq2SeqAttnR] {
            let a = audit_parameters(&f.config(64, 16, 4)).unwrap();
            let r = a.reference.unwrap() as f64;
            assert!((a.total as f64 - r).abs() / r < 0.01, "{f}: {}", a.total);
            assert_eq!(a.blocks.iter().map(|b| b.1).sum::<usize>(), a.total);
        }
    }

    #[test]
    fn closed_form_counts() {
        // Transformer: 3 embeddings/heads of 64·64+64, per encoder layer
        // 2 norms + 4 attention matrices + MLP, per decoder layer 3 norms +
        // 8 attention matrices + MLP, and two final norms.
        let lin = 64 * 64 + 64;
        let ln = 128;
        let attn = 4 * 64 * 64;
        let mlp = 64 * 128 + 128 + 128 * 64 + 64;
        let enc = 2 * ln + attn + mlp;
        let dec = 3 * ln + 2 * attn + mlp;
        let t = 3 * lin + 2 * enc + 2 * dec + 2 * ln;
        assert_eq!(count_parameters(&Family::TransformerRpe.config(64, 16, 4)).unwrap(), t);
        let gru = |i: usize| 3 * (128 * (i + 128) + 2 * 128);
        let s = 2 * (gru(64) + gru(128)) + (192 * 20 + 20) + (192 * 64 + 64) + (128 * 64 + 64);
        assert_eq!(count_parameters(&Family::Seq2SeqAttnR.config(64, 16, 4)).unwrap(), s);
    }

    #[test]
    fn family_ids_roundtrip() {
        for f in Family::ALL {
            assert_eq!(f.id().parse::<Family>().unwrap(), f);
            assert_eq!(f.config(64, 16, 4).family(), f);
            let json = serde_json::to_string(&f.config(64, 16, 4)).unwrap();
            let back: ModelConfig = serde_json::from_str(&json).unwrap();
            assert_eq!(back.family(), f);
        }
        assert!("gpt".parse::<Family>().is_err());
    }

    #[test]
    fn tiny_models_pass_gradient_check() {
        for (f, l, delta) in [
            (Family::TransformerRpe, 4, 2),
            (Family::Transformer, 4, 2),
            (Family::TransformerParallel, 4, 2),
            (Family::Seq2SeqAttnR, 4, 2),
            (Family::Seq2SeqAttn, 4, 2),
            (Family::Lstm, 4, 2),
            (Family::Mlp, 4, 2),
        ] {
            let err = gradcheck_family(f, l, delta, 5).unwrap().max_rel_error;
            assert!(err < 1e-4, "{f}: {err}");
        }
    }

    #[test]
    fn predictions_are_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let known = Tensor::from_fn(&[2, 4, 4], |_| rng.random_range(-1.0f32..1.0));
        for f in Family::ALL.into_iter().filter(|f| f.is_neural()) {
            let m = NeuralModel::<f32>::new(f.tiny_config(4, 4, 2), 3).unwrap();
            let a = m.predict(&known, 2).unwrap();
            assert_eq!(a, m.predict(&known, 2).unwrap());
            assert_eq!(a.shape(), &[2, 2, 4]);
        }
    }

    #[test]
    fn sequence_helpers() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 2], |i| i as f64);
        assert_eq!(time_step(&x, 1).data(), &[2.0, 3.0, 8.0, 9.0]);
        let w = time_range(&x, 1, 2);
        assert_eq!(w.data(), &[2.0, 3.0, 4.0, 5.0, 8.0, 9.0, 10.0, 11.0]);
        let j = concat_time(&time_range(&x, 0, 1), &w);
        assert_eq!(j, x);
    }
}
