//! Multivariate autoregression fitted by ordinary least squares.

use nalgebra::{DMatrix, DVector};

use super::seq_dims;
use crate::error::{contract, Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Relative ridge used when the normal equations are (near) singular.
pub const MAR_RIDGE: f64 = 1e-8;
const RIDGE_REFINEMENTS: usize = 3;

/// `h_t = c + Σ_k A_k h_{t−k}` for `k = 1..=order`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarModel {
    pub order: usize,
    pub dim: usize,
    /// `coefficients[k − 1]` is `A_k`, `dim × dim`.
    pub coefficients: Vec<Tensor<f64>>,
    pub intercept: Vec<f64>,
    /// True when the ridge fallback was needed.
    pub ridge: bool,
}

/// Fit on `[n, len, dim]` sequences using every window of `order + 1`
/// consecutive snapshots.
pub fn mar_fit<T: Real>(sequences: &Tensor<T>, order: usize) -> Result<MarModel> {
    let dim = sequences.last_dim();
    let (n, len) = seq_dims(sequences, dim, "mar training data")?;
    if order == 0 {
        return contract("mar order must be >= 1");
    }
    if len <= order || n == 0 {
        return contract(format!("mar order {order} needs sequences longer than {order}, got {n} of length {len}"));
    }
    let p = order * dim + 1;
    let rows = n * (len - order);
    let data = sequences.data();
    let at = |s: usize, t: usize, c: usize| data[(s * len + t) * dim + c].to_f64_lossy();
    let mut x = DMatrix::<f64>::zeros(rows, p);
    let mut y = DMatrix::<f64>::zeros(rows, dim);
    let mut r = 0;
    for s in 0..n {
        for t in order..len {
            for k in 0..order {
                for c in 0..dim {
                    x[(r, k * dim + c)] = at(s, t - 1 - k, c);
                }
            }
            x[(r, p - 1)] = 1.0;
            for c in 0..dim {
                y[(r, c)] = at(s, t, c);
            }
            r += 1;
        }
    }
    let xtx = x.tr_mul(&x);
    let xty = x.tr_mul(&y);
    let (beta, ridge) = solve_normal(xtx, &xty)?;

    let coefficients = (0..order)
        .map(|k| Tensor::from_fn(&[dim, dim], |i| beta[(k * dim + i % dim, i / dim)]))
        .collect();
    let intercept = (0..dim).map(|c| beta[(p - 1, c)]).collect();
    Ok(MarModel {
        order,
        dim,
        coefficients,
        intercept,
        ridge,
    })
}

/// Cholesky solve of `G β = R`, falling back to `G + λI` (λ relative to the
/// mean diagonal) when `G` is not numerically positive definite.
fn solve_normal(gram: DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    let p = gram.nrows();
    if let Some(ch) = gram.clone().cholesky() {
        let diag: Vec<f64> = ch.l_dirty().diagonal().iter().map(|v| v * v).collect();
        let (lo, hi) = diag.iter().fold((f64::MAX, 0f64), |(a, b), &v| (a.min(v), b.max(v)));
        if hi > 0.0 && lo / hi > 1e-13 {
            return Ok((ch.solve(rhs), false));
        }
    }
    let scale = (gram.trace() / p as f64).max(f64::MIN_POSITIVE);
    let lambda = MAR_RIDGE * scale;
    let regularized = &gram + DMatrix::<f64>::identity(p, p) * lambda;
    let ch = regularized
        .cholesky()
        .ok_or_else(|| Error::Contract("mar normal equations are not solvable even with ridge".into()))?;
    // Iterated refinement removes the ridge bias on well-determined
    // directions while keeping null-space components at zero.
    let mut beta = ch.solve(rhs);
    for _ in 0..RIDGE_REFINEMENTS {
        let resid = rhs - &gram * &beta;
        beta += ch.solve(&resid);
    }
    Ok((beta, true))
}

impl MarModel {
    /// One-step prediction from the most recent `order` snapshots
    /// (`history[0]` is the oldest).
    fn step(&self, history: &[DVector<f64>]) -> DVector<f64> {
        let mut out = DVector::from_column_slice(&self.intercept);
        let h = history.len();
        for (k, a) in self.coefficients.iter().enumerate() {
            let prev = &history[h - 1 - k];
            for i in 0..self.dim {
                let row = a.row(i);
                out[i] += row.iter().zip(prev.iter()).map(|(w, v)| w * v).sum::<f64>();
            }
        }
        out
    }

    /// Recursive `delta`-step prediction on `[batch, l, dim]` histories with
    /// `l >= order`.
    pub fn predict<T: Real>(&self, known: &Tensor<T>, delta: usize) -> Result<Tensor<T>> {
        let (b, l) = seq_dims(known, self.dim, "mar input")?;
        if l < self.order {
            return Err(Error::Unsupported(format!(
                "mar of order {} needs {} snapshots, got {l}",
                self.order, self.order
            )));
        }
        let mut out = Vec::with_capacity(b * delta * self.dim);
        for s in 0..b {
            let mut hist: Vec<DVector<f64>> = (l - self.order..l)
                .map(|t| {
                    let base = (s * l + t) * self.dim;
                    DVector::from_iterator(
                        self.dim,
                        known.data()[base..base + self.dim].iter().map(|v| v.to_f64_lossy()),
                    )
                })
                .collect();
            for _ in 0..delta {
                let next = self.step(&hist);
                out.extend(next.iter().map(|&v| T::from_f64_lossy(v)));
                hist.remove(0);
                hist.push(next);
            }
        }
        Tensor::new(&[b, delta, self.dim], out)
    }

    pub fn num_params(&self) -> usize {
        self.order * self.dim * self.dim + self.dim
    }
}
