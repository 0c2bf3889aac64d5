use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, forecast_all, gather_rows, nmse, nmse_loss, PreparedData, EVAL_CHUNK};
use crate::channel::SplitKind;
use crate::error::{contract, Error, Result};
use crate::graph::Graph;
use crate::models::{mar_fit, time_range, Family, ModelBundle, NeuralModel};
use crate::optim::{AdamConfig, AdamState};
use crate::scalar::Real;
use crate::tensor::Tensor;

const SHUFFLE_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    /// One noise draw per dataset, shared by every epoch.
    #[default]
    Fixed,
    /// A new noise draw over the clean training frames every epoch.
    Fresh,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValidationMode {
    /// Decode as at test time, feeding predictions back.
    #[default]
    Sequential,
    TeacherForced,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub l: usize,
    pub delta: usize,
    pub snr_db: f64,
    pub seed: u64,
    /// Frames to simulate when no dataset is supplied.
    pub frames: usize,
    pub noise: NoiseMode,
    pub validation: ValidationMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 100,
            lr: 1e-3,
            l: 16,
            delta: 4,
            snr_db: 20.0,
            seed: 0,
            frames: 2000,
            noise: NoiseMode::Fixed,
            validation: ValidationMode::Sequential,
        }
    }
}

impl TrainConfig {
    /// Full-scale protocol: 500 epochs, batches of 200, 150,000 frames.
    pub fn full_scale() -> Self {
        Self {
            epochs: 500,
            batch_size: 200,
            frames: 150_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.l == 0 || self.delta == 0 {
            return contract(format!(
                "epochs, batch size, history and horizon must be positive: {self:?}"
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !self.snr_db.is_finite() {
            return contract(format!("learning rate must be positive and snr finite: {self:?}"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean training loss per epoch (noisy targets).
    pub train_loss: Vec<f64>,
    /// Validation NMSE per epoch (noisy targets).
    pub val_nmse: Vec<f64>,
    /// Epoch whose parameters were kept (argmin, earliest on ties).
    pub best_epoch: usize,
    pub best_val_nmse: f64,
    pub seconds: f64,
}

fn validation_nmse<T: Real>(
    model: &NeuralModel<T>,
    known: &Tensor<T>,
    future: &Tensor<T>,
    mode: ValidationMode,
) -> Result<f64> {
    let n = known.shape()[0];
    let delta = future.shape()[1];
    let mut pred = Vec::with_capacity(future.len());
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let x = gather_rows(known, &idx);
        let y = match mode {
            ValidationMode::Sequential => model.predict(&x, delta)?,
            ValidationMode::TeacherForced => {
                let mut g = Graph::new();
                let v = model.forward_train(&mut g, &x, &gather_rows(future, &idx))?;
                g.value(v).clone()
            }
        };
        pred.extend_from_slice(y.data());
    }
    nmse(future, &Tensor::new(future.shape(), pred)?)
}

fn diverged(epoch: usize, batch: usize, loss: f64) -> Error {
    Error::Diverged { epoch, batch, loss }
}

/// Mini-batch Adam on noisy `l`-snapshot histories and noisy `delta`-snapshot
/// targets; recurrent and attention decoders are teacher-forced. The model
/// ends up holding the parameters of the best validation epoch.
pub fn train<T: Real>(model: &mut NeuralModel<T>, data: &PreparedData, cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    data.check_lengths(cfg.l, cfg.delta)?;
    let (n, n_val) = (data.len(SplitKind::Train), data.len(SplitKind::Validation));
    if n == 0 || n_val == 0 {
        return contract(format!("training needs frames in train and validation, got {n} and {n_val}"));
    }
    let start = Instant::now();
    let (l, delta) = (cfg.l, cfg.delta);
    let val_seq = data.noisy(SplitKind::Validation).cast::<T>();
    let (val_known, val_future) = (time_range(&val_seq, 0, l), time_range(&val_seq, l, delta));
    let fixed = data.noisy(SplitKind::Train).cast::<T>();

    let mut adam = AdamState::for_store(
        &model.params,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[SHUFFLE_STREAM]));
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = TrainHistory {
        train_loss: Vec::with_capacity(cfg.epochs),
        val_nmse: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        best_val_nmse: f64::INFINITY,
        seconds: 0.0,
    };
    let mut best = model.params.clone();

    for epoch in 0..cfg.epochs {
        let fresh;
        let seq = match cfg.noise {
            NoiseMode::Fixed => &fixed,
            NoiseMode::Fresh => {
                fresh = data.fresh_noisy_train(epoch)?.cast::<T>();
                &fresh
            }
        };
        let (known, future) = (time_range(seq, 0, l), time_range(seq, l, delta));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = (gather_rows(&known, idx), gather_rows(&future, idx));
            let mut g = Graph::new();
            let step = model
                .forward_train(&mut g, &x, &y)
                .and_then(|p| nmse_loss(&mut g, p, &y))
                .and_then(|loss| Ok((g.value(loss).item().to_f64_lossy(), g.backward(loss)?)));
            let (loss, grads) = match step {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => return Err(diverged(epoch, batch, f64::NAN)),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(diverged(epoch, batch, loss));
            }
            match adam.step_store(&mut model.params, &grads) {
                Err(Error::NonFinite(_)) => return Err(diverged(epoch, batch, loss)),
                other => other?,
            }
            total += loss * idx.len() as f64;
        }
        history.train_loss.push(total / n as f64);
        let val = validation_nmse(model, &val_known, &val_future, cfg.validation)?;
        if !val.is_finite() {
            return Err(diverged(epoch, 0, val));
        }
        history.val_nmse.push(val);
        if val < history.best_val_nmse {
            history.best_val_nmse = val;
            history.best_epoch = epoch;
            best = model.params.clone();
        }
    }
    model.params = best;
    history.seconds = start.elapsed().as_secs_f64();
    Ok(history)
}

/// Build and train (or fit) one family at `cfg.l`, `cfg.delta` on `data`.
///
/// Neural models train in `f32` from a seed derived from `cfg.seed`, the
/// family and the SNR; the autoregressive baseline of order `cfg.l` is fitted
/// on every window of the noisy training frames.
pub fn fit_family(family: Family, data: &PreparedData, cfg: &TrainConfig) -> Result<(ModelBundle, Option<TrainHistory>)> {
    data.check_lengths(cfg.l, cfg.delta)?;
    if family == Family::Mar {
        let m = mar_fit(data.noisy(SplitKind::Train), cfg.l)?;
        return Ok((ModelBundle::Mar(m), None));
    }
    let idx = Family::ALL.iter().position(|&f| f == family).unwrap_or(0) as u64;
    let seed = derive_seed(cfg.seed, &[INIT_STREAM, idx, data.snr_db.to_bits()]);
    let mut model = NeuralModel::<f32>::new(family.config(data.dim, cfg.l, cfg.delta), seed)?;
    let history = train(&mut model, data, cfg)?;
    Ok((ModelBundle::Neural(model), Some(history)))
}

/// Validation NMSE of any bundle with sequential decoding.
pub fn validation_score(model: &ModelBundle, data: &PreparedData, l: usize, delta: usize) -> Result<f64> {
    data.check_lengths(l, delta)?;
    let seq = data.noisy(SplitKind::Validation);
    let pred = forecast_all(model, &time_range(seq, 0, l), delta)?;
    nmse(&time_range(seq, l, delta), &pred)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{Dataset, ScenarioConfig};
    use crate::train_eval::{evaluate, Score};

    fn small_data(frames: usize) -> PreparedData {
        let ds = Dataset::generate(ScenarioConfig { vertical: 2, horizontal: 2, ..ScenarioConfig::default() }, frames).unwrap();
        PreparedData::new(&ds, 20.0).unwrap()
    }

    fn tiny(family: Family, dim: usize, cfg: &TrainConfig) -> NeuralModel<f32> {
        NeuralModel::new(family.tiny_config(dim, cfg.l, cfg.delta), 1).unwrap()
    }

    #[test]
    fn one_batch_is_deterministic() {
        let data = small_data(20);
        let cfg = TrainConfig { epochs: 1, batch_size: 64, l: 6, delta: 2, ..TrainConfig::default() };
        let run = || {
            let mut m = tiny(Family::TransformerRpe, 8, &cfg);
            train(&mut m, &data, &cfg).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.train_loss.len(), 1);
        assert_eq!(a.train_loss, b.train_loss);
        assert_eq!(a.val_nmse, b.val_nmse);
    }

    #[test]
    fn training_never_reads_clean_data() {
        let data = small_data(30);
        let cfg = TrainConfig { epochs: 2, batch_size: 8, l: 6, delta: 2, ..TrainConfig::default() };
        for f in [Family::TransformerRpe, Family::Seq2SeqAttnR, Family::Lstm, Family::Mlp] {
            let mut m = tiny(f, 8, &cfg);
            train(&mut m, &data, &cfg).unwrap();
        }
        fit_family(Family::Mar, &data, &TrainConfig { l: 2, ..cfg.clone() }).unwrap();
        assert_eq!(data.clean_reads(), 0);
        let fresh = TrainConfig { noise: NoiseMode::Fresh, ..cfg.clone() };
        train(&mut tiny(Family::Mlp, 8, &fresh), &data, &fresh).unwrap();
        assert!(data.clean_reads() > 0);
    }

    #[test]
    fn best_epoch_is_the_earliest_argmin() {
        let data = small_data(30);
        let cfg = TrainConfig { epochs: 6, batch_size: 4, lr: 3e-2, l: 6, delta: 2, ..TrainConfig::default() };
        let mut m = tiny(Family::Lstm, 8, &cfg);
        let h = train(&mut m, &data, &cfg).unwrap();
        let min = h.val_nmse.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(h.best_epoch, h.val_nmse.iter().position(|&v| v == min).unwrap());
        assert!(h.best_val_nmse <= *h.val_nmse.last().unwrap());
        let kept = validation_score(&ModelBundle::Neural(m), &data, 6, 2).unwrap();
        assert!((kept - h.best_val_nmse).abs() < 1e-9);
    }

    #[test]
    fn training_reduces_loss_for_every_family() {
        let data = small_data(100);
        let cfg = TrainConfig { epochs: 20, batch_size: 20, l: 6, delta: 2, ..TrainConfig::default() };
        for f in Family::ALL.into_iter().filter(|f| f.is_neural()) {
            let mut m = tiny(f, 8, &cfg);
            let h = train(&mut m, &data, &cfg).unwrap();
            assert!(h.train_loss[19] < h.train_loss[0], "{f}: {:?}", h.train_loss);
        }
    }

    #[test]
    fn trained_beats_untrained() {
        let data = small_data(200);
        let cfg = TrainConfig { epochs: 15, batch_size: 20, l: 6, delta: 2, ..TrainConfig::default() };
        let untrained = tiny(Family::TransformerRpe, 8, &cfg);
        let mut trained = untrained.clone();
        train(&mut trained, &data, &cfg).unwrap();
        let (Score::Nmse(a), Score::Nmse(b)) =
            (evaluate(&untrained, &data, 6, 2).unwrap(), evaluate(&trained, &data, 6, 2).unwrap())
        else {
            panic!("transformer supports every length");
        };
        assert!(b < a, "{b} vs {a}");
    }

    #[test]
    fn divergence_reports_epoch_and_batch() {
        let data = small_data(20);
        let cfg = TrainConfig { epochs: 3, batch_size: 4, l: 6, delta: 2, lr: 1e30, ..TrainConfig::default() };
        let mut m = tiny(Family::Mlp, 8, &cfg);
        match train(&mut m, &data, &cfg) {
            Err(Error::Diverged { epoch, batch, .. }) => assert!(epoch < 3 && batch < 4),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
        let p = TrainConfig::full_scale();
        assert_eq!((p.epochs, p.batch_size), (500, 200));
        let data = small_data(20);
        let too_long = TrainConfig { l: 18, delta: 4, ..TrainConfig::default() };
        assert!(fit_family(Family::Mlp, &data, &too_long).is_err());
    }
}
