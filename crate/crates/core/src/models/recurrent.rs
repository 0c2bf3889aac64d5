//! GRU and LSTM cells with separate input-side and hidden-side biases.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Initializer, ParamId, ParamStore};
use crate::scalar::Real;

/// One gate: weights over `concat(input, hidden)` and two bias vectors.
#[derive(Clone, Debug)]
pub struct Gate {
    pub weight: ParamId,
    pub bias_in: ParamId,
    pub bias_hid: ParamId,
}

impl Gate {
    fn new<T: Real>(init: &mut Initializer<'_, T>, name: &str, in_dim: usize, hidden: usize) -> Self {
        Self {
            weight: init.glorot(format!("{name}.weight"), hidden, in_dim + hidden),
            bias_in: init.zeros(format!("{name}.bias_in"), hidden),
            bias_hid: init.zeros(format!("{name}.bias_hid"), hidden),
        }
    }

    /// Pre-activation `W · xu + b_in + b_hid`.
    fn pre<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, xu: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let bi = g.param(store, self.bias_in);
        let bh = g.param(store, self.bias_hid);
        let y = g.matmul(xu, w, false, true)?;
        let y = g.add_bias(y, bi)?;
        g.add_bias(y, bh)
    }
}

/// Gated recurrent unit:
///
/// ```text
/// z = σ(W_z [x, u] + b_z)      r = σ(W_r [x, u] + b_r)
/// ũ = tanh(W_ũ [x, r ⊙ u] + b_ũ)
/// u' = (1 − z) ⊙ ũ + z ⊙ u
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub update: Gate,
    pub reset: Gate,
    pub candidate: Gate,
    pub in_dim: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<T: Real>(init: &mut Initializer<'_, T>, name: &str, in_dim: usize, hidden: usize) -> Self {
        Self {
            update: Gate::new(init, &format!("{name}.z"), in_dim, hidden),
            reset: Gate::new(init, &format!("{name}.r"), in_dim, hidden),
            candidate: Gate::new(init, &format!("{name}.u"), in_dim, hidden),
            in_dim,
            hidden,
        }
    }

    /// `x`: `[batch, in_dim]`, `u_prev`: `[batch, hidden]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, u_prev: Var) -> Result<Var> {
        let (u, _, _) = self.forward_gates(g, store, x, u_prev)?;
        Ok(u)
    }

    /// New state plus the update and reset gate activations.
    pub fn forward_gates<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        u_prev: Var,
    ) -> Result<(Var, Var, Var)> {
        let xu = g.concat(&[x, u_prev])?;
        let z = self.update.pre(g, store, xu)?;
        let z = g.sigmoid(z)?;
        let r = self.reset.pre(g, store, xu)?;
        let r = g.sigmoid(r)?;
        let ru = g.mul(r, u_prev)?;
        let xru = g.concat(&[x, ru])?;
        let cand = self.candidate.pre(g, store, xru)?;
        let cand = g.tanh(cand)?;
        // (1 − z) ⊙ ũ + z ⊙ u = ũ + z ⊙ (u − ũ)
        let diff = g.sub(u_prev, cand)?;
        let zd = g.mul(z, diff)?;
        let u = g.add(cand, zd)?;
        Ok((u, z, r))
    }

    pub fn num_params(&self) -> usize {
        3 * (self.hidden * (self.in_dim + self.hidden) + 2 * self.hidden)
    }
}

/// Long short-term memory cell:
///
/// ```text
/// i, f, o = σ(W_{i,f,o} [x, u] + b)     c̃ = tanh(W_c [x, u] + b_c)
/// c' = f ⊙ c + i ⊙ c̃                   u' = o ⊙ tanh(c')
/// ```
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input: Gate,
    pub forget: Gate,
    pub output: Gate,
    pub cell: Gate,
    pub in_dim: usize,
    pub hidden: usize,
}

pub struct LstmStep {
    pub u: Var,
    pub c: Var,
    pub gates: [Var; 3],
}

impl LstmCell {
    pub fn new<T: Real>(init: &mut Initializer<'_, T>, name: &str, in_dim: usize, hidden: usize) -> Self {
        Self {
            input: Gate::new(init, &format!("{name}.i"), in_dim, hidden),
            forget: Gate::new(init, &format!("{name}.f"), in_dim, hidden),
            output: Gate::new(init, &format!("{name}.o"), in_dim, hidden),
            cell: Gate::new(init, &format!("{name}.c"), in_dim, hidden),
            in_dim,
            hidden,
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        u_prev: Var,
        c_prev: Var,
    ) -> Result<LstmStep> {
        let xu = g.concat(&[x, u_prev])?;
        let i = self.input.pre(g, store, xu)?;
        let i = g.sigmoid(i)?;
        let f = self.forget.pre(g, store, xu)?;
        let f = g.sigmoid(f)?;
        let o = self.output.pre(g, store, xu)?;
        let o = g.sigmoid(o)?;
        let ct = self.cell.pre(g, store, xu)?;
        let ct = g.tanh(ct)?;
        let fc = g.mul(f, c_prev)?;
        let ic = g.mul(i, ct)?;
        let c = g.add(fc, ic)?;
        let tc = g.tanh(c)?;
        let u = g.mul(o, tc)?;
        Ok(LstmStep { u, c, gates: [i, f, o] })
    }

    pub fn num_params(&self) -> usize {
        4 * (self.hidden * (self.in_dim + self.hidden) + 2 * self.hidden)
    }
}
