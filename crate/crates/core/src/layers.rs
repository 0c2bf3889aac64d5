//! Standard layers: linear maps, layer norm, and elementwise activations.
//!
//! Each layer comes in two flavours: a parameter-handle struct used inside
//! models ([`Linear`], [`LayerNorm`]) that records onto a [`Graph`], and a
//! plain-tensor function ([`linear_forward`], [`layer_norm`], ...) for
//! one-off evaluation.

use crate::error::{shape_err, Result};
use crate::graph::{self, Graph, Var};
use crate::params::{Initializer, ParamId, ParamStore};
use crate::scalar::{lit, Real};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Affine map `y = W x + b` along the trailing axis. `W` is `out × in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(init: &mut Initializer<'_, T>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = init.glorot(format!("{name}.weight"), out_dim, in_dim);
        let bias = init.zeros(format!("{name}.bias"), out_dim);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w, false, true)?;
        g.add_bias(y, b)
    }

    pub fn num_params(&self) -> usize {
        self.out_dim * self.in_dim + self.out_dim
    }
}

/// Layer normalization with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(init: &mut Initializer<'_, T>, name: &str, dim: usize) -> Self {
        Self {
            gain: init.ones(format!("{name}.gain"), dim),
            bias: init.zeros(format!("{name}.bias"), dim),
            dim,
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, lit(self.eps))
    }
}

/// Concrete weights of one affine layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Concrete gain, bias and epsilon of one layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
    pub eps: T,
}

/// `y = W x + b` along the trailing axis of `x`.
pub fn linear_forward<T: Real>(x: &Tensor<T>, p: &LinearParams<T>) -> Result<Tensor<T>> {
    let ws = p.weight.shape();
    if ws.len() != 2 || p.bias.shape() != [ws[0]] {
        return shape_err(
            "linear_forward",
            format!("weight {:?}, bias {:?}", ws, p.bias.shape()),
        );
    }
    if x.last_dim() != ws[1] || x.ndim() == 0 {
        return shape_err("linear_forward", format!("x {:?} vs in_dim {}", x.shape(), ws[1]));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let w = g.constant(p.weight.clone());
    let b = g.constant(p.bias.clone());
    let y = g.matmul(xv, w, false, true)?;
    let y = g.add_bias(y, b)?;
    Ok(g.value(y).clone())
}

/// Layer norm along the trailing axis with population variance.
pub fn layer_norm<T: Real>(x: &Tensor<T>, p: &LayerNormParams<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let gain = g.constant(p.gain.clone());
    let bias = g.constant(p.bias.clone());
    let y = g.layer_norm(xv, gain, bias, p.eps)?;
    Ok(g.value(y).clone())
}

pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(graph::gelu)
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(graph::sigmoid)
}

pub fn tanh<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(T::tanh)
}

/// Max-stabilized softmax along `axis`.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let nd = x.ndim();
    if axis >= nd {
        return shape_err("softmax", format!("axis {axis} on rank {nd}"));
    }
    if axis == nd - 1 {
        return Ok(graph::softmax_last(x));
    }
    let mut perm: Vec<usize> = (0..nd).filter(|&a| a != axis).collect();
    perm.push(axis);
    let moved = graph::permute_tensor(x, &perm);
    let s = graph::softmax_last(&moved);
    let mut inv = vec![0; nd];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    Ok(graph::permute_tensor(&s, &inv))
}
