//! Synthetic multi-antenna fading channels.
//!
//! Each frame is a sum of sinusoids: `P` scattered paths with unit complex
//! Gaussian gains, half-wavelength URA steering vectors at the base station
//! and a Doppler shift `f_d cos α_p` per path, with the user speed held
//! constant over the frame.

pub mod dataset;

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

pub use dataset::{
    load_dataset, read_dataset, save_dataset, split_dataset, write_dataset, Dataset, Sidecar, Split, SplitKind,
    DATASET_MAGIC, DATASET_VERSION, STRATA,
};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Base-station array, timing and user-placement parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub vertical: usize,
    pub horizontal: usize,
    pub n_slot: usize,
    /// Seconds.
    pub t_slot: f64,
    /// Hz.
    pub carrier_freq: f64,
    pub paths: usize,
    /// Rayleigh scale of the user speed, m/s.
    pub rayleigh_scale: f64,
    /// Angular width of the served sector, degrees.
    pub sector_deg: f64,
    pub min_range: f64,
    pub max_range: f64,
    pub bs_height: f64,
    pub ut_height: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            vertical: 8,
            horizontal: 4,
            n_slot: 20,
            t_slot: 0.5e-3,
            carrier_freq: 2.6e9,
            paths: 25,
            rayleigh_scale: 8.0,
            sector_deg: 120.0,
            min_range: 50.0,
            max_range: 150.0,
            bs_height: 25.0,
            ut_height: 1.5,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn antennas(&self) -> usize {
        self.vertical * self.horizontal
    }

    /// Width of a realified snapshot.
    pub fn real_dim(&self) -> usize {
        2 * self.antennas()
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [self.vertical, self.horizontal, self.n_slot, self.paths];
        let reals = [
            self.t_slot,
            self.carrier_freq,
            self.rayleigh_scale,
            self.sector_deg,
            self.min_range,
            self.max_range,
            self.bs_height,
            self.ut_height,
        ];
        if counts.contains(&0) || reals.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return contract(format!("scenario parameters must be positive: {self:?}"));
        }
        if self.min_range > self.max_range || self.sector_deg > 360.0 {
            return contract(format!(
                "scenario geometry is inconsistent: range {}..{} m, sector {} deg",
                self.min_range, self.max_range, self.sector_deg
            ));
        }
        Ok(())
    }

    pub fn doppler(&self, velocity: f64) -> f64 {
        velocity * self.carrier_freq / SPEED_OF_LIGHT
    }

    /// Generator seeded for frame `index`; streams never overlap.
    pub fn frame_rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }
}

/// `n_slot × antennas` complex snapshots of one user.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexFrame {
    pub n_slot: usize,
    pub antennas: usize,
    /// Row-major, snapshot `i` occupies `[i * antennas, (i + 1) * antennas)`.
    pub snapshots: Vec<Complex64>,
    /// m/s.
    pub velocity: f64,
    /// Factor applied by [`normalize_pathgain`] (1 before normalization).
    pub pathgain_norm: f64,
}

impl ComplexFrame {
    pub fn snapshot(&self, i: usize) -> &[Complex64] {
        &self.snapshots[i * self.antennas..(i + 1) * self.antennas]
    }

    pub fn energy(&self) -> f64 {
        self.snapshots.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Average `||h_i||²` over the slots.
    pub fn mean_snapshot_energy(&self) -> f64 {
        self.energy() / self.n_slot as f64
    }
}

pub fn rayleigh_inverse_cdf(scale: f64, u: f64) -> f64 {
    scale * (-2.0 * (-u).ln_1p()).sqrt()
}

/// Speed drawn from `(v/γ²) exp(−v²/2γ²)` by inversion.
pub fn sample_velocity<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> Result<f64> {
    if !(scale > 0.0 && scale.is_finite()) {
        return contract(format!("rayleigh scale must be positive, got {scale}"));
    }
    Ok(rayleigh_inverse_cdf(scale, rng.random::<f64>()))
}

/// Response of the `vertical × horizontal` array (element `v * horizontal + h`)
/// to a plane wave at elevation `theta` and azimuth `phi`, both measured from
/// broadside.
pub fn steering_vector(vertical: usize, horizontal: usize, theta: f64, phi: f64) -> Vec<Complex64> {
    let (sv, ch) = (theta.sin(), theta.cos() * phi.sin());
    let mut a = Vec::with_capacity(vertical * horizontal);
    for v in 0..vertical {
        for h in 0..horizontal {
            a.push(Complex64::from_polar(1.0, PI * (v as f64 * sv + h as f64 * ch)));
        }
    }
    a
}

fn complex_normal<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(s * re, s * im)
}

/// Distance-dependent amplitude attenuation (log-distance model).
fn path_gain(cfg: &ScenarioConfig, range: f64) -> f64 {
    let d3 = range.hypot(cfg.bs_height - cfg.ut_height);
    let loss_db = 28.0 + 22.0 * d3.log10() + 20.0 * (cfg.carrier_freq / 1e9).log10();
    10f64.powf(-loss_db / 20.0)
}

/// One frame for a user moving at `velocity`.
///
/// The user is dropped uniformly in range and sector; each path departs at an
/// azimuth drawn uniformly over the sector and an elevation drawn uniformly
/// between the depression angles of the near and far sector edges.
pub fn generate_frame<R: Rng + ?Sized>(cfg: &ScenarioConfig, velocity: f64, rng: &mut R) -> Result<ComplexFrame> {
    cfg.validate()?;
    if !(velocity >= 0.0 && velocity.is_finite()) {
        return contract(format!("velocity must be finite and non-negative, got {velocity}"));
    }
    let m = cfg.antennas();
    let half_sector = cfg.sector_deg.to_radians() / 2.0;
    let dh = cfg.bs_height - cfg.ut_height;
    let (el_lo, el_hi) = ((dh / cfg.max_range).atan(), (dh / cfg.min_range).atan());
    let range = rng.random_range(cfg.min_range..=cfg.max_range);
    let amplitude = path_gain(cfg, range) / (cfg.paths as f64).sqrt();
    let fd = cfg.doppler(velocity);

    let mut snapshots = vec![Complex64::new(0.0, 0.0); cfg.n_slot * m];
    for _ in 0..cfg.paths {
        let gain = complex_normal(rng, 1.0) * amplitude;
        let phi = rng.random_range(-half_sector..=half_sector);
        let theta = -rng.random_range(el_lo..=el_hi);
        let alpha = rng.random_range(0.0..2.0 * PI);
        let psi = rng.random_range(0.0..2.0 * PI);
        let a = steering_vector(cfg.vertical, cfg.horizontal, theta, phi);
        let w = 2.0 * PI * fd * alpha.cos() * cfg.t_slot;
        for i in 0..cfg.n_slot {
            let rot = gain * Complex64::from_polar(1.0, w * i as f64 + psi);
            for (h, ak) in snapshots[i * m..(i + 1) * m].iter_mut().zip(&a) {
                *h += rot * ak;
            }
        }
    }
    Ok(ComplexFrame {
        n_slot: cfg.n_slot,
        antennas: m,
        snapshots,
        velocity,
        pathgain_norm: 1.0,
    })
}

/// Scale so the average `||h_i||²` equals the number of antennas.
pub fn normalize_pathgain(frame: &ComplexFrame) -> Result<ComplexFrame> {
    let e = frame.mean_snapshot_energy();
    if !(e > 0.0 && e.is_finite()) {
        return contract(format!("cannot normalize a frame with energy {e}"));
    }
    let s = (frame.antennas as f64 / e).sqrt();
    Ok(ComplexFrame {
        snapshots: frame.snapshots.iter().map(|c| c * s).collect(),
        pathgain_norm: frame.pathgain_norm * s,
        ..frame.clone()
    })
}

/// Frame `index` of the scenario: speed, geometry and normalization.
pub fn simulate_frame(cfg: &ScenarioConfig, index: u64) -> Result<ComplexFrame> {
    let mut rng = cfg.frame_rng(index);
    let v = sample_velocity(cfg.rayleigh_scale, &mut rng)?;
    normalize_pathgain(&generate_frame(cfg, v, &mut rng)?)
}

/// Frames `0..count`, generated on all available cores.
pub fn simulate_frames(cfg: &ScenarioConfig, count: usize) -> Result<Vec<ComplexFrame>> {
    cfg.validate()?;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(count.max(1));
    let chunk = count.div_ceil(workers.max(1)).max(1);
    let parts: Vec<Result<Vec<ComplexFrame>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..count)
            .step_by(chunk)
            .map(|start| {
                let end = (start + chunk).min(count);
                s.spawn(move || (start..end).map(|i| simulate_frame(cfg, i as u64)).collect())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("frame worker panicked")).collect()
    });
    let mut frames = Vec::with_capacity(count);
    for p in parts {
        frames.extend(p?);
    }
    Ok(frames)
}

/// Noise variance giving the requested average SNR over `frames`.
pub fn snr_to_sigma(frames: &[ComplexFrame], snr_db: f64) -> Result<f64> {
    if frames.is_empty() {
        return contract("snr calibration needs at least one frame");
    }
    let slots: usize = frames.iter().map(|f| f.n_slot).sum();
    let energy: f64 = frames.iter().map(ComplexFrame::energy).sum();
    let m = frames[0].antennas as f64;
    Ok(energy / slots as f64 / (m * 10f64.powf(snr_db / 10.0)))
}

/// Average SNR in dB of `noisy` relative to `clean`, using the same formula
/// as [`snr_to_sigma`] with the empirical noise power.
pub fn measured_snr_db(clean: &[ComplexFrame], noisy: &[ComplexFrame]) -> f64 {
    let (mut signal, mut noise, mut count) = (0.0, 0.0, 0usize);
    for (c, n) in clean.iter().zip(noisy) {
        signal += c.energy();
        noise += c.snapshots.iter().zip(&n.snapshots).map(|(a, b)| (b - a).norm_sqr()).sum::<f64>();
        count += c.snapshots.len();
    }
    let slots: usize = clean.iter().map(|f| f.n_slot).sum();
    10.0 * ((signal / slots as f64) / (clean[0].antennas as f64 * noise / count as f64)).log10()
}

/// Add circular complex Gaussian noise of per-element variance `sigma2`,
/// independent across elements and slots.
pub fn add_noise<R: Rng + ?Sized>(frame: &ComplexFrame, sigma2: f64, rng: &mut R) -> Result<ComplexFrame> {
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return contract(format!("noise variance must be finite and non-negative, got {sigma2}"));
    }
    if sigma2 == 0.0 {
        return Ok(frame.clone());
    }
    Ok(ComplexFrame {
        snapshots: frame.snapshots.iter().map(|h| h + complex_normal(rng, sigma2)).collect(),
        ..frame.clone()
    })
}

/// `concat(Re h_i, Im h_i)` per snapshot, row-major `[n_slot, 2M]`.
pub fn to_real(frame: &ComplexFrame) -> Vec<f64> {
    let m = frame.antennas;
    let mut out = Vec::with_capacity(frame.snapshots.len() * 2);
    for i in 0..frame.n_slot {
        let s = frame.snapshot(i);
        out.extend(s.iter().map(|c| c.re));
        out.extend(s.iter().map(|c| c.im));
        debug_assert_eq!(out.len(), (i + 1) * 2 * m);
    }
    out
}

/// Inverse of [`to_real`] for snapshots of width `2 * antennas`.
pub fn to_complex(real: &[f64], antennas: usize) -> Result<Vec<Complex64>> {
    if antennas == 0 || real.len() % (2 * antennas) != 0 {
        return contract(format!("{} reals do not split into snapshots of {antennas} antennas", real.len()));
    }
    Ok(real
        .chunks_exact(2 * antennas)
        .flat_map(|s| (0..antennas).map(move |k| Complex64::new(s[k], s[antennas + k])))
        .collect())
}
