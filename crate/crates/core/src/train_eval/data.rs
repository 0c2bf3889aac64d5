//! Realified, noise-injected views of a dataset at one SNR.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::derive_seed;
use crate::channel::{add_noise, snr_to_sigma, to_real, ComplexFrame, Dataset, SplitKind};
use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// `[frames, n_slot, 2M]` tensors of one split.
#[derive(Clone, Debug)]
struct SplitData {
    frame_ids: Vec<usize>,
    noisy: Tensor<f32>,
    clean: Tensor<f32>,
}

/// Noisy observations for training and validation, with clean targets held
/// behind a read counter so tests can prove training never touches them.
#[derive(Debug)]
pub struct PreparedData {
    pub snr_db: f64,
    pub sigma2: f64,
    pub n_slot: usize,
    pub dim: usize,
    noise_seed: u64,
    frames: Vec<ComplexFrame>,
    splits: [SplitData; 3],
    clean_reads: AtomicUsize,
}

fn realify(frames: &[ComplexFrame], n_slot: usize, dim: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(frames.len() * n_slot * dim);
    for f in frames {
        data.extend(to_real(f).into_iter().map(|v| v as f32));
    }
    Tensor::new(&[frames.len(), n_slot, dim], data)
}

fn noise_rng(seed: u64, snr_db: f64, frame: usize, epoch: Option<usize>) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[snr_db.to_bits(), epoch.map_or(0, |e| e as u64 + 1)]));
    rng.set_stream(frame as u64);
    rng
}

impl PreparedData {
    /// Calibrate σ_n² over the whole dataset and add one fixed noise draw to
    /// every frame. Noise depends only on the dataset seed, the SNR and the
    /// frame index.
    pub fn new(ds: &Dataset, snr_db: f64) -> Result<Self> {
        if !snr_db.is_finite() {
            return contract(format!("snr must be finite, got {snr_db}"));
        }
        let sigma2 = snr_to_sigma(&ds.frames, snr_db)?;
        let (n_slot, dim) = (ds.scenario.n_slot, ds.scenario.real_dim());
        let seed = ds.scenario.seed;
        let build = |kind: SplitKind| -> Result<SplitData> {
            let ids = ds.split.get(kind).to_vec();
            let clean: Vec<ComplexFrame> = ids.iter().map(|&i| ds.frames[i].clone()).collect();
            let noisy = ids
                .iter()
                .map(|&i| add_noise(&ds.frames[i], sigma2, &mut noise_rng(seed, snr_db, i, None)))
                .collect::<Result<Vec<_>>>()?;
            Ok(SplitData {
                frame_ids: ids,
                noisy: realify(&noisy, n_slot, dim)?,
                clean: realify(&clean, n_slot, dim)?,
            })
        };
        Ok(Self {
            snr_db,
            sigma2,
            n_slot,
            dim,
            noise_seed: seed,
            frames: ds.frames.clone(),
            splits: [build(SplitKind::Train)?, build(SplitKind::Validation)?, build(SplitKind::Test)?],
            clean_reads: AtomicUsize::new(0),
        })
    }

    pub fn len(&self, kind: SplitKind) -> usize {
        self.splits[kind as usize].frame_ids.len()
    }

    pub fn noisy(&self, kind: SplitKind) -> &Tensor<f32> {
        &self.splits[kind as usize].noisy
    }

    /// Clean snapshots; every call is counted.
    pub fn clean(&self, kind: SplitKind) -> &Tensor<f32> {
        self.clean_reads.fetch_add(1, Ordering::SeqCst);
        &self.splits[kind as usize].clean
    }

    pub fn clean_reads(&self) -> usize {
        self.clean_reads.load(Ordering::SeqCst)
    }

    /// A fresh noise draw over the clean training frames (augmentation mode).
    /// Reads clean data and is counted as such.
    pub fn fresh_noisy_train(&self, epoch: usize) -> Result<Tensor<f32>> {
        self.clean_reads.fetch_add(1, Ordering::SeqCst);
        let noisy = self.splits[SplitKind::Train as usize]
            .frame_ids
            .iter()
            .map(|&i| {
                add_noise(
                    &self.frames[i],
                    self.sigma2,
                    &mut noise_rng(self.noise_seed, self.snr_db, i, Some(epoch)),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        realify(&noisy, self.n_slot, self.dim)
    }

    pub fn check_lengths(&self, l: usize, delta: usize) -> Result<()> {
        if l == 0 || delta == 0 || l + delta > self.n_slot {
            return contract(format!(
                "history {l} and horizon {delta} must be positive and fit in {} slots",
                self.n_slot
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ScenarioConfig;

    #[test]
    fn noise_is_calibrated_and_fixed() {
        let ds = Dataset::generate(ScenarioConfig::default(), 30).unwrap();
        let a = PreparedData::new(&ds, 10.0).unwrap();
        let b = PreparedData::new(&ds, 10.0).unwrap();
        assert_eq!(a.noisy(SplitKind::Train), b.noisy(SplitKind::Train));
        assert_eq!(a.clean_reads(), 0);
        let (n, c) = (a.noisy(SplitKind::Train), a.clean(SplitKind::Train));
        assert_eq!(a.clean_reads(), 1);
        let p: f64 = n.data().iter().zip(c.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / (n.len() / 2) as f64;
        assert!((p / a.sigma2 - 1.0).abs() < 0.1, "{p} vs {}", a.sigma2);
        assert_ne!(a.fresh_noisy_train(0).unwrap(), *a.noisy(SplitKind::Train));
        assert!(a.check_lengths(16, 4).is_ok() && a.check_lengths(16, 5).is_err());
    }
}
