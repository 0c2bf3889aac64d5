//! Encoder/decoder transformer with pre-norm residual blocks.
//!
//! The encoder adds either the standard or the reversed sinusoidal table to
//! its embedded inputs; the decoder always uses the standard table. With
//! [`DecoderMode::Sequential`] the decoder input starts with the last known
//! snapshot and is extended one prediction at a time; with
//! [`DecoderMode::Parallel`] it is the last `prefix` known snapshots followed
//! by zero slots, and all outputs are read from one pass.

use serde::{Deserialize, Serialize};

use super::{concat_time, seq_dims, tile, time_range, zeros_seq};
use crate::attention::{causal_mask, positional_encoding, reverse_positional_encoding, Mha, MhaDims};
use crate::error::{contract, Result};
use crate::graph::{Graph, Var};
use crate::layers::{LayerNorm, Linear};
use crate::params::{Initializer, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PeMode {
    Reversed,
    Standard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DecoderMode {
    Sequential,
    Parallel { prefix: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_attn: usize,
    pub d_mid: usize,
    pub mlp_hidden: usize,
    pub input_dim: usize,
    pub encoder_pe: PeMode,
    pub decoder: DecoderMode,
}

impl TransformerConfig {
    pub fn new(input_dim: usize, encoder_pe: PeMode, decoder: DecoderMode) -> Self {
        Self {
            enc_layers: 2,
            dec_layers: 2,
            d_model: 64,
            heads: 4,
            d_attn: 16,
            d_mid: 16,
            mlp_hidden: 128,
            input_dim,
            encoder_pe,
            decoder,
        }
    }

    pub fn tiny(input_dim: usize, encoder_pe: PeMode, decoder: DecoderMode) -> Self {
        Self {
            enc_layers: 1,
            dec_layers: 1,
            d_model: 8,
            heads: 2,
            d_attn: 4,
            d_mid: 4,
            mlp_hidden: 16,
            input_dim,
            encoder_pe,
            decoder,
        }
    }

    fn self_dims(&self) -> MhaDims {
        MhaDims {
            heads: self.heads,
            d_attn: self.d_attn,
            d_mid: self.d_mid,
            d_x: self.d_model,
            d_z: self.d_model,
            d_out: self.d_model,
        }
    }
}

#[derive(Clone, Debug)]
struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    fn new<T: Real>(init: &mut Initializer<'_, T>, name: &str, d: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(init, &format!("{name}.fc1"), d, hidden),
            fc2: Linear::new(init, &format!("{name}.fc2"), hidden, d),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, store, h)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln_attn: LayerNorm,
    attn: Mha,
    ln_mlp: LayerNorm,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: Mha,
    ln_cross: LayerNorm,
    cross_attn: Mha,
    ln_mlp: LayerNorm,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct Transformer {
    pub cfg: TransformerConfig,
    enc_in: Linear,
    enc_layers: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    dec_in: Linear,
    dec_layers: Vec<DecoderLayer>,
    dec_norm: LayerNorm,
    head: Linear,
}

impl Transformer {
    pub fn new<T: Real>(init: &mut Initializer<'_, T>, cfg: TransformerConfig) -> Result<Self> {
        if cfg.d_model % 2 != 0 || cfg.heads == 0 {
            return contract(format!("transformer needs even d_model and heads >= 1: {cfg:?}"));
        }
        if let DecoderMode::Parallel { prefix: 0 } = cfg.decoder {
            return contract("parallel decoder needs a nonempty prefix");
        }
        let (d, hid) = (cfg.d_model, cfg.mlp_hidden);
        let enc_in = Linear::new(init, "enc.in", cfg.input_dim, d);
        let enc_layers = (0..cfg.enc_layers)
            .map(|i| {
                let p = format!("enc.{i}");
                EncoderLayer {
                    ln_attn: LayerNorm::new(init, &format!("{p}.ln_attn"), d),
                    attn: Mha::new(init, &format!("{p}.attn"), cfg.self_dims()),
                    ln_mlp: LayerNorm::new(init, &format!("{p}.ln_mlp"), d),
                    mlp: Mlp::new(init, &format!("{p}.mlp"), d, hid),
                }
            })
            .collect();
        let enc_norm = LayerNorm::new(init, "enc.norm", d);
        let dec_in = Linear::new(init, "dec.in", cfg.input_dim, d);
        let dec_layers = (0..cfg.dec_layers)
            .map(|i| {
                let p = format!("dec.{i}");
                DecoderLayer {
                    ln_self: LayerNorm::new(init, &format!("{p}.ln_self"), d),
                    self_attn: Mha::new(init, &format!("{p}.self_attn"), cfg.self_dims()),
                    ln_cross: LayerNorm::new(init, &format!("{p}.ln_cross"), d),
                    cross_attn: Mha::new(init, &format!("{p}.cross_attn"), cfg.self_dims()),
                    ln_mlp: LayerNorm::new(init, &format!("{p}.ln_mlp"), d),
                    mlp: Mlp::new(init, &format!("{p}.mlp"), d, hid),
                }
            })
            .collect();
        let dec_norm = LayerNorm::new(init, "dec.norm", d);
        let head = Linear::new(init, "dec.head", d, cfg.input_dim);
        Ok(Self {
            cfg,
            enc_in,
            enc_layers,
            enc_norm,
            dec_in,
            dec_layers,
            dec_norm,
            head,
        })
    }

    /// Positional table the encoder adds for a history of length `l`.
    pub fn encoder_positions<T: Real>(&self, l: usize) -> Result<Tensor<T>> {
        let pe = match self.cfg.encoder_pe {
            PeMode::Reversed => reverse_positional_encoding(l, self.cfg.d_model)?,
            PeMode::Standard => positional_encoding(l, self.cfg.d_model)?,
        };
        Ok(pe.table)
    }

    /// `known`: `[batch, l, input_dim]` → `[batch, l, d_model]`.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, known: &Tensor<T>) -> Result<Var> {
        let (b, l) = seq_dims(known, self.cfg.input_dim, "transformer encoder input")?;
        if l == 0 {
            return contract("transformer encoder needs at least one snapshot");
        }
        let x = g.constant(known.clone());
        let x = self.enc_in.forward(g, store, x)?;
        let pe = g.constant(tile(&self.encoder_positions(l)?, b));
        let mut x = g.add(x, pe)?;
        for layer in &self.enc_layers {
            let h = layer.ln_attn.forward(g, store, x)?;
            let a = layer.attn.forward(g, store, h, h, None)?;
            x = g.add(x, a)?;
            let h = layer.ln_mlp.forward(g, store, x)?;
            let m = layer.mlp.forward(g, store, h)?;
            x = g.add(x, m)?;
        }
        self.enc_norm.forward(g, store, x)
    }

    /// Masked decoder pass over `dec_in` (`[batch, n, input_dim]`), returning
    /// `[batch, n, input_dim]`.
    pub fn decode<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, enc: Var, dec_in: &Tensor<T>) -> Result<Var> {
        let (b, n) = seq_dims(dec_in, self.cfg.input_dim, "transformer decoder input")?;
        let mask = causal_mask(n)?;
        let y = g.constant(dec_in.clone());
        let y = self.dec_in.forward(g, store, y)?;
        let pe = g.constant(tile(&positional_encoding(n, self.cfg.d_model)?.table, b));
        let mut y = g.add(y, pe)?;
        for layer in &self.dec_layers {
            let h = layer.ln_self.forward(g, store, y)?;
            let a = layer.self_attn.forward(g, store, h, h, Some(&mask))?;
            y = g.add(y, a)?;
            let h = layer.ln_cross.forward(g, store, y)?;
            let a = layer.cross_attn.forward(g, store, h, enc, None)?;
            y = g.add(y, a)?;
            let h = layer.ln_mlp.forward(g, store, y)?;
            let m = layer.mlp.forward(g, store, h)?;
            y = g.add(y, m)?;
        }
        let y = self.dec_norm.forward(g, store, y)?;
        self.head.forward(g, store, y)
    }

    fn parallel_input<T: Real>(&self, known: &Tensor<T>, prefix: usize, delta: usize) -> Result<Tensor<T>> {
        let (b, l) = seq_dims(known, self.cfg.input_dim, "transformer input")?;
        if l < prefix {
            return contract(format!("parallel decoder needs at least {prefix} known snapshots, got {l}"));
        }
        Ok(concat_time(
            &time_range(known, l - prefix, prefix),
            &zeros_seq(b, delta, self.cfg.input_dim),
        ))
    }

    /// Trailing `delta` positions of a `[batch, prefix + delta, d]` output.
    fn trailing<T: Real>(&self, g: &mut Graph<T>, y: Var, prefix: usize, delta: usize) -> Result<Var> {
        let d = self.cfg.input_dim;
        let b = g.shape(y)[0];
        let flat = g.reshape(y, &[b, (prefix + delta) * d])?;
        let tail = g.slice_last(flat, prefix * d, delta * d)?;
        g.reshape(tail, &[b, delta, d])
    }

    /// Teacher-forced pass: decoder inputs are the last known snapshot
    /// followed by `future[.., 0..δ−1]`. Returns `[batch, δ, input_dim]`.
    pub fn forward_train<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        known: &Tensor<T>,
        future: &Tensor<T>,
    ) -> Result<Var> {
        let (b, l) = seq_dims(known, self.cfg.input_dim, "transformer input")?;
        let (bf, delta) = seq_dims(future, self.cfg.input_dim, "transformer targets")?;
        if bf != b || delta == 0 {
            return contract(format!("teacher forcing needs {b} target sequences of length >= 1"));
        }
        match self.cfg.decoder {
            DecoderMode::Sequential => {
                let enc = self.encode(g, store, known)?;
                let start = time_range(known, l - 1, 1);
                let dec_in = concat_time(&start, &time_range(future, 0, delta - 1));
                self.decode(g, store, enc, &dec_in)
            }
            DecoderMode::Parallel { prefix } => {
                let dec_in = self.parallel_input(known, prefix, delta)?;
                let enc = self.encode(g, store, known)?;
                let y = self.decode(g, store, enc, &dec_in)?;
                self.trailing(g, y, prefix, delta)
            }
        }
    }

    /// Sequential (or one-shot parallel) prediction of `delta` snapshots.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, known: &Tensor<T>, delta: usize) -> Result<Tensor<T>> {
        let (b, l) = seq_dims(known, self.cfg.input_dim, "transformer input")?;
        let mut g = Graph::new();
        if let DecoderMode::Parallel { prefix } = self.cfg.decoder {
            let dec_in = self.parallel_input(known, prefix, delta)?;
            let enc = self.encode(&mut g, store, known)?;
            if delta == 0 {
                return Ok(zeros_seq(b, 0, self.cfg.input_dim));
            }
            let y = self.decode(&mut g, store, enc, &dec_in)?;
            let y = self.trailing(&mut g, y, prefix, delta)?;
            return Ok(g.value(y).clone());
        }
        let enc = self.encode(&mut g, store, known)?;
        let mut dec_in = time_range(known, l - 1, 1);
        let mut outputs = zeros_seq(b, 0, self.cfg.input_dim);
        for k in 0..delta {
            let y = self.decode(&mut g, store, enc, &dec_in)?;
            let next = time_range(g.value(y), k, 1);
            outputs = concat_time(&outputs, &next);
            dec_in = concat_time(&dec_in, &next);
        }
        Ok(outputs)
    }
}
