//! Training, evaluation and experiment sweeps.

mod data;
mod sweep;
mod train;

pub use data::PreparedData;
pub use sweep::{read_records, sweep, sweep_to_csv, write_records, ExperimentRecord, Score, SweepConfig, CSV_HEADER, HOLD_ID};
pub use train::{fit_family, train, validation_score, NoiseMode, TrainConfig, TrainHistory, ValidationMode};

use crate::channel::SplitKind;
use crate::error::{contract, shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::models::{time_range, ModelBundle, NeuralModel};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Rows per forward pass when predicting a whole split.
pub const EVAL_CHUNK: usize = 250;

/// SplitMix64 over `base` and `parts`.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

/// NMSE together with the number of zero-energy samples left out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NmseReport {
    pub value: f64,
    pub excluded: usize,
}

/// Mean over samples (leading axis) of `||H − Ĥ||²_F / ||H||²_F`.
pub fn nmse_report<T: Real>(truth: &Tensor<T>, pred: &Tensor<T>) -> Result<NmseReport> {
    if truth.shape() != pred.shape() || truth.ndim() == 0 {
        return shape_err("nmse", format!("{:?} vs {:?}", truth.shape(), pred.shape()));
    }
    let n = truth.shape()[0];
    let per = if n == 0 { 0 } else { truth.len() / n };
    let (mut sum, mut used) = (0.0, 0usize);
    for j in 0..n {
        let (h, p) = (&truth.data()[j * per..(j + 1) * per], &pred.data()[j * per..(j + 1) * per]);
        let den: f64 = h.iter().map(|v| v.to_f64_lossy().powi(2)).sum();
        if den == 0.0 {
            continue;
        }
        let num: f64 = h.iter().zip(p).map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2)).sum();
        sum += num / den;
        used += 1;
    }
    if used == 0 {
        return contract("nmse needs at least one sample with nonzero energy");
    }
    Ok(NmseReport {
        value: sum / used as f64,
        excluded: n - used,
    })
}

pub fn nmse<T: Real>(truth: &Tensor<T>, pred: &Tensor<T>) -> Result<f64> {
    Ok(nmse_report(truth, pred)?.value)
}

/// Differentiable NMSE of `pred` against constant `target`.
pub fn nmse_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    if g.shape(pred) != target.shape() || target.ndim() == 0 {
        return shape_err("nmse_loss", format!("{:?} vs {:?}", g.shape(pred), target.shape()));
    }
    let n = target.shape()[0];
    let per = target.len() / n.max(1);
    let inv: Vec<T> = target
        .data()
        .chunks(per.max(1))
        .map(|s| {
            let e: T = s.iter().map(|&v| v * v).sum();
            if e > T::zero() {
                e.recip()
            } else {
                T::zero()
            }
        })
        .collect();
    let t = g.constant(target.clone());
    let e = g.sub(pred, t)?;
    let sq = g.mul(e, e)?;
    let flat = g.reshape(sq, &[n, per])?;
    let per_sample = g.sum_last(flat)?;
    let w = g.constant(Tensor::new(&[n], inv)?);
    let ratio = g.mul(per_sample, w)?;
    g.mean(ratio)
}

/// Repeat the last known snapshot `delta` times.
pub fn last_value_hold<T: Real>(known: &Tensor<T>, delta: usize) -> Result<Tensor<T>> {
    let s = known.shape();
    if s.len() != 3 || s[1] == 0 {
        return contract(format!("last-value hold needs [batch, l >= 1, dim], got {s:?}"));
    }
    let (b, l, d) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(b * delta * d);
    for i in 0..b {
        let last = &known.data()[((i * l) + l - 1) * d..(i * l + l) * d];
        for _ in 0..delta {
            out.extend_from_slice(last);
        }
    }
    Tensor::new(&[b, delta, d], out)
}

/// Anything that maps `[batch, l, dim]` histories to `[batch, delta, dim]`.
pub trait Forecaster {
    fn forecast(&self, known: &Tensor<f32>, delta: usize) -> Result<Tensor<f32>>;
}

impl Forecaster for ModelBundle {
    fn forecast(&self, known: &Tensor<f32>, delta: usize) -> Result<Tensor<f32>> {
        self.predict(known, delta)
    }
}

impl Forecaster for NeuralModel<f32> {
    fn forecast(&self, known: &Tensor<f32>, delta: usize) -> Result<Tensor<f32>> {
        self.predict(known, delta)
    }
}

/// The naive comparator.
#[derive(Clone, Copy, Debug, Default)]
pub struct LastValueHold;

impl Forecaster for LastValueHold {
    fn forecast(&self, known: &Tensor<f32>, delta: usize) -> Result<Tensor<f32>> {
        last_value_hold(known, delta)
    }
}

/// Rows `idx` of a tensor along its leading axis.
pub fn gather_rows<T: Real>(t: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let mut shape = t.shape().to_vec();
    let per = t.len() / shape[0].max(1);
    shape[0] = idx.len();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    Tensor::new(&shape, data).expect("row gather keeps shape")
}

/// Predict a whole split in chunks.
pub fn forecast_all(f: &dyn Forecaster, known: &Tensor<f32>, delta: usize) -> Result<Tensor<f32>> {
    let n = known.shape()[0];
    let mut out: Vec<f32> = Vec::new();
    let mut shape = None;
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let y = f.forecast(&gather_rows(known, &idx), delta)?;
        shape.get_or_insert_with(|| y.shape().to_vec());
        out.extend_from_slice(y.data());
    }
    let mut shape = shape.unwrap_or_else(|| vec![0, delta, known.last_dim()]);
    shape[0] = n;
    Tensor::new(&shape, out)
}

/// Score a forecaster on the test split: `l` noisy snapshots in, clean
/// snapshots `l + 1 ..= l + delta` as reference. Families that cannot handle
/// the lengths give [`Score::Unsupported`].
pub fn evaluate(f: &dyn Forecaster, data: &PreparedData, l: usize, delta: usize) -> Result<Score> {
    data.check_lengths(l, delta)?;
    let known = time_range(data.noisy(SplitKind::Test), 0, l);
    let pred = match forecast_all(f, &known, delta) {
        Ok(p) => p,
        Err(Error::Unsupported(why)) => return Ok(Score::Unsupported(why)),
        Err(e) => return Err(e),
    };
    let truth = time_range(data.clean(SplitKind::Test), l, delta);
    Ok(Score::Nmse(nmse(&truth, &pred)?))
}
