//! Reverse-mode automatic differentiation over a fixed operation set.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its output
//! value and enough state to propagate gradients. Handles ([`Var`]) are plain
//! indices into the tape. Parameters enter the tape through [`Graph::param`],
//! which records the [`ParamId`] so that [`Graph::backward`] can report
//! gradients per parameter.
//!
//! Supported operations: matmul (plain and batched, with free transposes),
//! add/sub/mul, bias broadcast, scaling, concat/slice along the last axis,
//! reshape, permute, masked fill, softmax, gelu/relu/sigmoid/tanh, layer
//! norm, and sum/mean reductions. Double-backward is not supported.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{contract, shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{lit, Real};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Concat(Vec<(Var, usize)>),
    Slice {
        x: Var,
        start: usize,
        width: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    MaskedFill {
        x: Var,
        allowed: Rc<[bool]>,
    },
    Softmax(Var),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    SumLast(Var),
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    by_param: HashMap<ParamId, Tensor<T>>,
    by_var: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a parameter, `None` if it did not influence the loss.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(&id)
    }

    /// Gradient of a parameter, zeros shaped like it when detached.
    pub fn param_or_zeros(&self, id: ParamId, store: &ParamStore<T>) -> Tensor<T> {
        self.by_param
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
    }

    /// Gradient with respect to any recorded node that requires gradients.
    pub fn var(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_var.get(v.0).and_then(Option::as_ref)
    }

    pub fn num_params(&self) -> usize {
        self.by_param.len()
    }

    /// Dense gradient list aligned with the store, zeros where detached.
    pub fn dense(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store.ids().map(|id| self.param_or_zeros(id, store)).collect()
    }
}

/// Gradient tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, rg: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op_name.to_string()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad: rg,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a constant (no gradient).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a free input that receives a gradient but is not a parameter.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Place a parameter on the tape (once per graph).
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.input(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    /// Matrix product.
    ///
    /// With a 2-D `b`, `a` is viewed as `[leading, k]` and the product is
    /// taken along its trailing axis (`ta` must be false). With two 3-D
    /// operands of equal batch size the product is batched; `ta`/`tb`
    /// transpose the trailing two axes of each operand.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, m, k, n, out_shape) = if sb.len() == 2 {
            if ta || sa.is_empty() {
                return shape_err("matmul", "transposed or scalar lhs with 2-D rhs");
            }
            let k = *sa.last().unwrap();
            let (bk, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
            if bk != k {
                return shape_err("matmul", format!("{sa:?} x {sb:?} (tb={tb})"));
            }
            let m = sa[..sa.len() - 1].iter().product();
            let mut out = sa[..sa.len() - 1].to_vec();
            out.push(n);
            (1, m, k, n, out)
        } else if sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] {
            let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
            let (bk, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
            if bk != k {
                return shape_err("matmul", format!("{sa:?} x {sb:?} (ta={ta}, tb={tb})"));
            }
            (sa[0], m, k, n, vec![sa[0], m, n])
        } else {
            return shape_err("matmul", format!("unsupported operands {sa:?} x {sb:?}"));
        };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    ta,
                    &bd[i * k * n..(i + 1) * k * n],
                    tb,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(&out_shape, out)?;
        self.push(
            "matmul",
            value,
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                k,
                n,
            },
            rg,
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(name, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `x + bias` with `bias` broadcast along every leading axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return shape_err("add_bias", format!("{:?} + {:?}", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let vx = self.value(x);
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, &bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        let value = Tensor::new(vx.shape(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        self.push("add_bias", value, Op::AddBias(x, bias), rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push("scale", value, Op::Scale(x, s), rg)
    }

    /// Concatenate along the last axis; leading shapes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat", "no operands");
        };
        let lead_shape = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let rows = self.value(first).leading();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead_shape.len() + 1 || s[..s.len() - 1] != lead_shape[..] {
                return shape_err("concat", format!("{:?} vs leading {:?}", s, lead_shape));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead_shape;
        shape.push(total);
        let value = Tensor::new(&shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        let op = Op::Concat(parts.iter().copied().zip(widths).collect());
        self.push("concat", value, op, rg)
    }

    /// Columns `start..start + width` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.last_dim();
        if start + width > d {
            return shape_err("slice_last", format!("{start}+{width} > {d}"));
        }
        let rows = vx.leading();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&vx.data()[r * d + start..r * d + start + width]);
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        let value = Tensor::new(&shape, data)?;
        let rg = self.rg(x);
        self.push("slice_last", value, Op::Slice { x, start, width }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        self.push("reshape", value, Op::Reshape(x), rg)
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return shape_err("permute", format!("{perm:?} on {s:?}"));
        }
        let value = permute_tensor(self.value(x), perm);
        let rg = self.rg(x);
        self.push(
            "permute",
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        )
    }

    /// Replace disallowed entries with the most negative finite value.
    ///
    /// `allowed` is a row-major `[rows, cols]` pattern matching the trailing
    /// two axes of `x`, broadcast over the leading ones. Every row needs at
    /// least one allowed entry.
    pub fn masked_fill(&mut self, x: Var, allowed: Rc<[bool]>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return shape_err("masked_fill", format!("need >= 2 axes, got {s:?}"));
        }
        let cols = s[s.len() - 1];
        let rows = s[s.len() - 2];
        if allowed.len() != rows * cols {
            return shape_err("masked_fill", format!("mask of {} for {rows}x{cols}", allowed.len()));
        }
        if allowed.chunks(cols.max(1)).any(|r| !r.iter().any(|&a| a)) {
            return contract("mask row with zero allowed entries (softmax over empty support)");
        }
        let neg = T::min_value();
        let mut data = self.value(x).data().to_vec();
        for block in data.chunks_mut(rows * cols) {
            for (v, &ok) in block.iter_mut().zip(allowed.iter()) {
                if !ok {
                    *v = neg;
                }
            }
        }
        let value = Tensor::new(&s, data)?;
        let rg = self.rg(x);
        self.push("masked_fill", value, Op::MaskedFill { x, allowed }, rg)
    }

    /// Softmax along the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let value = softmax_last(self.value(x));
        let rg = self.rg(x);
        self.push("softmax", value, Op::Softmax(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push("gelu", value, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push("relu", value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push("sigmoid", value, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(T::tanh);
        let rg = self.rg(x);
        self.push("tanh", value, Op::Tanh(x), rg)
    }

    /// Layer normalization over the last axis (population variance).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return shape_err(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", vx.shape(), self.shape(gain), self.shape(bias)),
            );
        }
        if eps <= T::zero() {
            return contract("layer norm epsilon must be positive");
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = vx.leading();
        let inv_d = T::one() / lit::<T>(d as f64);
        let mut xhat = Vec::with_capacity(vx.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(vx.len());
        for row in vx.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(vx.shape(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.last_dim();
        let data: Vec<T> = vx.data().chunks(d.max(1)).map(|r| r.iter().copied().sum()).collect();
        let shape = &vx.shape()[..vx.ndim().saturating_sub(1)];
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        self.push("sum_last", value, Op::SumLast(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push("sum", value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return shape_err("mean", "empty tensor");
        }
        let value = Tensor::scalar(self.value(x).sum() / lit::<T>(n as f64));
        let rg = self.rg(x);
        self.push("mean", value, Op::Mean(x), rg)
    }

    /// Reverse sweep from a scalar loss. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return contract("backward already ran on this tape");
        }
        if self.value(loss).len() != 1 {
            return contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        let by_var: Vec<Option<Tensor<T>>> = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape(), g).expect("gradient shape")))
            .collect();
        let by_param = self
            .params
            .iter()
            .filter_map(|(&id, &v)| by_var[v.0].clone().map(|t| (id, t)))
            .collect();
        Ok(Gradients { by_param, by_var })
    }

    fn backprop_node(&self, i: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                k,
                n,
            } => {
                let ad = self.value(a).data();
                let bd = self.value(b).data();
                let b_shared = self.value(b).ndim() == 2 && batch == 1;
                if self.rg(a) {
                    let ga = slot(grads, a, ad.len());
                    for s in 0..batch {
                        let dys = &dy[s * m * n..(s + 1) * m * n];
                        let bs = if b_shared { bd } else { &bd[s * k * n..(s + 1) * k * n] };
                        let gas = &mut ga[s * m * k..(s + 1) * m * k];
                        if !ta {
                            // dA = dC · op(B)^T
                            gemm(m, n, k, dys, false, bs, !tb, gas, true);
                        } else {
                            // dA_stored = op(B) · dC^T
                            gemm(k, n, m, bs, tb, dys, true, gas, true);
                        }
                    }
                }
                if self.rg(b) {
                    let gb = slot(grads, b, bd.len());
                    for s in 0..batch {
                        let dys = &dy[s * m * n..(s + 1) * m * n];
                        let as_ = &ad[s * m * k..(s + 1) * m * k];
                        let gbs = &mut gb[s * k * n..(s + 1) * k * n];
                        if !tb {
                            // dB = op(A)^T · dC
                            gemm(k, m, n, as_, !ta, dys, false, gbs, true);
                        } else {
                            // dB_stored = dC^T · op(A)
                            gemm(n, m, k, dys, true, as_, ta, gbs, true);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, |g| axpy(g, dy, T::one()));
                self.acc(grads, b, |g| axpy(g, dy, T::one()));
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, |g| axpy(g, dy, T::one()));
                self.acc(grads, b, |g| axpy(g, dy, -T::one()));
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                self.acc(grads, a, |g| {
                    for ((g, &d), &o) in g.iter_mut().zip(dy).zip(vb) {
                        *g += d * o;
                    }
                });
                self.acc(grads, b, |g| {
                    for ((g, &d), &o) in g.iter_mut().zip(dy).zip(va) {
                        *g += d * o;
                    }
                });
            }
            &Op::AddBias(x, bias) => {
                self.acc(grads, x, |g| axpy(g, dy, T::one()));
                let d = self.value(bias).len();
                self.acc(grads, bias, |g| {
                    for row in dy.chunks(d) {
                        axpy(g, row, T::one());
                    }
                });
            }
            &Op::Scale(x, s) => self.acc(grads, x, |g| axpy(g, dy, s)),
            Op::Concat(parts) => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut off = 0;
                for &(p, w) in parts {
                    self.acc(grads, p, |g| {
                        for (r, grow) in g.chunks_mut(w).enumerate() {
                            axpy(grow, &dy[r * total + off..r * total + off + w], T::one());
                        }
                    });
                    off += w;
                }
            }
            &Op::Slice { x, start, width } => {
                let d = self.value(x).last_dim();
                self.acc(grads, x, |g| {
                    for (r, grow) in g.chunks_mut(d).enumerate() {
                        axpy(&mut grow[start..start + width], &dy[r * width..(r + 1) * width], T::one());
                    }
                });
            }
            &Op::Reshape(x) => self.acc(grads, x, |g| axpy(g, dy, T::one())),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let dyt = Tensor::new(node.value.shape(), dy.to_vec()).expect("shape");
                let back = permute_tensor(&dyt, &inv);
                self.acc(grads, *x, |g| axpy(g, back.data(), T::one()));
            }
            Op::MaskedFill { x, allowed } => {
                let n = allowed.len();
                self.acc(grads, *x, |g| {
                    for (gb, db) in g.chunks_mut(n).zip(dy.chunks(n)) {
                        for ((g, &d), &ok) in gb.iter_mut().zip(db).zip(allowed.iter()) {
                            if ok {
                                *g += d;
                            }
                        }
                    }
                });
            }
            &Op::Softmax(x) => {
                let d = node.value.last_dim();
                self.acc(grads, x, |g| {
                    for ((grow, yrow), drow) in g.chunks_mut(d).zip(y.chunks(d)).zip(dy.chunks(d)) {
                        let dot: T = yrow.iter().zip(drow).map(|(&a, &b)| a * b).sum();
                        for ((g, &yv), &dv) in grow.iter_mut().zip(yrow).zip(drow) {
                            *g += yv * (dv - dot);
                        }
                    }
                });
            }
            &Op::Gelu(x) => {
                let vx = self.value(x).data();
                self.acc(grads, x, |g| {
                    for ((g, &d), &xv) in g.iter_mut().zip(dy).zip(vx) {
                        *g += d * gelu_grad(xv);
                    }
                });
            }
            &Op::Relu(x) => {
                let vx = self.value(x).data();
                self.acc(grads, x, |g| {
                    for ((g, &d), &xv) in g.iter_mut().zip(dy).zip(vx) {
                        if xv > T::zero() {
                            *g += d;
                        }
                    }
                });
            }
            &Op::Sigmoid(x) => self.acc(grads, x, |g| {
                for ((g, &d), &yv) in g.iter_mut().zip(dy).zip(y) {
                    *g += d * yv * (T::one() - yv);
                }
            }),
            &Op::Tanh(x) => self.acc(grads, x, |g| {
                for ((g, &d), &yv) in g.iter_mut().zip(dy).zip(y) {
                    *g += d * (T::one() - yv * yv);
                }
            }),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let gv = self.value(*gain).data();
                self.acc(grads, *gain, |g| {
                    for (drow, hrow) in dy.chunks(d).zip(xhat.chunks(d)) {
                        for ((g, &dv), &h) in g.iter_mut().zip(drow).zip(hrow) {
                            *g += dv * h;
                        }
                    }
                });
                self.acc(grads, *bias, |g| {
                    for drow in dy.chunks(d) {
                        axpy(g, drow, T::one());
                    }
                });
                let inv_d = T::one() / lit::<T>(d as f64);
                self.acc(grads, *x, |g| {
                    for (((grow, drow), hrow), &r) in
                        g.chunks_mut(d).zip(dy.chunks(d)).zip(xhat.chunks(d)).zip(rstd)
                    {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dh = drow[j] * gv[j];
                            m1 += dh;
                            m2 += dh * hrow[j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for j in 0..d {
                            let dh = drow[j] * gv[j];
                            grow[j] += r * (dh - m1 - hrow[j] * m2);
                        }
                    }
                });
            }
            &Op::SumLast(x) => {
                let d = self.value(x).last_dim();
                self.acc(grads, x, |g| {
                    for (grow, &dv) in g.chunks_mut(d).zip(dy) {
                        for v in grow {
                            *v += dv;
                        }
                    }
                });
            }
            &Op::Sum(x) => self.acc(grads, x, |g| {
                for v in g {
                    *v += dy[0];
                }
            }),
            &Op::Mean(x) => {
                let s = dy[0] / lit::<T>(self.value(x).len() as f64);
                self.acc(grads, x, |g| {
                    for v in g {
                        *v += s;
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if self.rg(v) {
            f(slot(grads, v, self.value(v).len()));
        }
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn axpy<T: Real>(g: &mut [T], x: &[T], s: T) {
    for (g, &x) in g.iter_mut().zip(x) {
        *g += s * x;
    }
}

pub(crate) fn permute_tensor<T: Real>(t: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let s = t.shape();
    let nd = s.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    if nd == 0 || t.is_empty() {
        return Tensor::new(&out_shape, t.data().to_vec()).expect("permute preserves size");
    }
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd - 1).rev() {
        in_strides[i] = in_strides[i + 1] * s[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    // Copy whole rows when the trailing axis stays in place.
    let (outer_nd, block) = if perm[nd - 1] == nd - 1 { (nd - 1, s[nd - 1]) } else { (nd, 1) };
    let src = t.data();
    let mut out = Vec::with_capacity(t.len());
    let mut idx = vec![0usize; outer_nd];
    let mut off = 0usize;
    for _ in 0..t.len() / block {
        out.extend_from_slice(&src[off..off + block]);
        for ax in (0..outer_nd).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permute preserves size")
}

pub(crate) fn softmax_last<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let d = t.last_dim().max(1);
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(d) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::new(t.shape(), out).expect("same shape")
}

/// Exact GeLU, `x · Φ(x)`.
pub fn gelu<T: Real>(x: T) -> T {
    let xf = x.to_f64_lossy();
    T::from_f64_lossy(0.5 * xf * (1.0 + libm::erf(xf / std::f64::consts::SQRT_2)))
}

fn gelu_grad<T: Real>(x: T) -> T {
    let xf = x.to_f64_lossy();
    let cdf = 0.5 * (1.0 + libm::erf(xf / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * xf * xf).exp() / (2.0 * std::f64::consts::PI).sqrt();
    T::from_f64_lossy(cdf + xf * pdf)
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
