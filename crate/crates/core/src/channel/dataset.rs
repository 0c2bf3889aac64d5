//! Train/validation/test partitions and the dataset file format.
//!
//! Layout (integers little-endian `u32`, reals little-endian `f32`):
//!
//! ```text
//! magic "CSIPDSET" | version | header JSON (len + utf-8) | frame count
//! per frame: split tag (u8) | velocity | pathgain_norm | n_slot × M × (re, im)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{simulate_frames, ComplexFrame, ScenarioConfig};
use crate::binio::{get_f32s, get_str, get_u32, put_f32, put_str, put_u32};
use crate::error::{contract, Error, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"CSIPDSET";
pub const DATASET_VERSION: u32 = 1;
/// Velocity quantile bins used for stratification.
pub const STRATA: usize = 10;
pub const GENERATOR: &str = concat!("csipred-sum-of-sinusoids/", env!("CARGO_PKG_VERSION"));
const SPLIT_SALT: u64 = 0x5eed_5b11_7000_0001;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitKind {
    Train,
    Validation,
    Test,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::Train, SplitKind::Validation, SplitKind::Test];

    fn tag(self) -> u8 {
        self as u8
    }

    fn from_tag(t: u8) -> Result<Self> {
        Self::ALL
            .get(t as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown split tag {t}")))
    }
}

/// Frame indices per split, each list ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    /// False when there were too few frames to stratify by velocity.
    pub stratified: bool,
}

impl Split {
    pub fn get(&self, kind: SplitKind) -> &[usize] {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Validation => &self.validation,
            SplitKind::Test => &self.test,
        }
    }

    pub fn counts(&self) -> [usize; 3] {
        [self.train.len(), self.validation.len(), self.test.len()]
    }
}

/// Split sizes: validation and test are rounded shares, train takes the rest.
fn split_counts(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let va = ((n as f64 * ratios[1]).round() as usize).min(n);
    let te = ((n as f64 * ratios[2]).round() as usize).min(n - va);
    [n - va - te, va, te]
}

/// Partition frames by velocity-stratified shuffling.
///
/// Frames are sorted by speed, cut into [`STRATA`] quantile bins and shuffled
/// within each bin; walking that order, each frame goes to the split furthest
/// behind its target share, so every bin is divided in proportion and the
/// totals are exact. With fewer than [`STRATA`] frames a plain shuffle is cut
/// contiguously and `stratified` is false.
pub fn split_dataset(velocities: &[f64], ratios: [f64; 3], seed: u64) -> Result<Split> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return contract(format!("split ratios must be non-negative and sum to 1, got {ratios:?}"));
    }
    let n = velocities.len();
    let counts = split_counts(n, ratios);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT);
    let mut order: Vec<usize> = (0..n).collect();
    let stratified = n >= STRATA;
    let mut parts: [Vec<usize>; 3] = Default::default();
    if stratified {
        order.sort_by(|&a, &b| velocities[a].total_cmp(&velocities[b]).then(a.cmp(&b)));
        for b in 0..STRATA {
            order[b * n / STRATA..(b + 1) * n / STRATA].shuffle(&mut rng);
        }
        for (j, &idx) in order.iter().enumerate() {
            let target = |s: usize| (j + 1) as f64 * counts[s] as f64 / n as f64 - parts[s].len() as f64;
            let s = (0..3)
                .filter(|&s| parts[s].len() < counts[s])
                .max_by(|&a, &b| target(a).total_cmp(&target(b)).then(b.cmp(&a)))
                .expect("quota remains while frames remain");
            parts[s].push(idx);
        }
    } else {
        order.shuffle(&mut rng);
        parts[0] = order[..counts[0]].to_vec();
        parts[1] = order[counts[0]..counts[0] + counts[1]].to_vec();
        parts[2] = order[counts[0] + counts[1]..].to_vec();
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    let [train, validation, test] = parts;
    Ok(Split {
        train,
        validation,
        test,
        stratified,
    })
}

/// Normalized clean frames with their partition.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scenario: ScenarioConfig,
    pub frames: Vec<ComplexFrame>,
    pub split: Split,
    pub generator: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    scenario: ScenarioConfig,
    generator: String,
    stratified: bool,
}

/// Human-readable summary written next to a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format_version: u32,
    pub generator: String,
    pub scenario: ScenarioConfig,
    pub frames: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub stratified: bool,
    /// Dataset average of `||h_i||² / M`.
    pub mean_energy_per_antenna: f64,
    pub velocity_min: f64,
    pub velocity_mean: f64,
    pub velocity_max: f64,
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl Dataset {
    /// Simulate `count` frames and split them 80/10/10.
    ///
    /// Values are rounded to `f32` so a saved and reloaded dataset compares
    /// equal to the in-memory one.
    pub fn generate(scenario: ScenarioConfig, count: usize) -> Result<Self> {
        let mut frames = simulate_frames(&scenario, count)?;
        for f in &mut frames {
            f.velocity = round_f32(f.velocity);
            f.pathgain_norm = round_f32(f.pathgain_norm);
            for c in &mut f.snapshots {
                *c = Complex64::new(round_f32(c.re), round_f32(c.im));
            }
        }
        let velocities: Vec<f64> = frames.iter().map(|f| f.velocity).collect();
        let split = split_dataset(&velocities, [0.8, 0.1, 0.1], scenario.seed)?;
        Ok(Self {
            scenario,
            frames,
            split,
            generator: GENERATOR.to_string(),
        })
    }

    pub fn frames_of(&self, kind: SplitKind) -> impl Iterator<Item = &ComplexFrame> {
        self.split.get(kind).iter().map(|&i| &self.frames[i])
    }

    pub fn sidecar(&self) -> Sidecar {
        let slots: usize = self.frames.iter().map(|f| f.n_slot).sum();
        let energy: f64 = self.frames.iter().map(ComplexFrame::energy).sum();
        let m = self.scenario.antennas() as f64;
        let v: Vec<f64> = self.frames.iter().map(|f| f.velocity).collect();
        let [train, validation, test] = self.split.counts();
        Sidecar {
            format_version: DATASET_VERSION,
            generator: self.generator.clone(),
            scenario: self.scenario,
            frames: self.frames.len(),
            train,
            validation,
            test,
            stratified: self.split.stratified,
            mean_energy_per_antenna: if slots == 0 { 0.0 } else { energy / slots as f64 / m },
            velocity_min: v.iter().copied().fold(f64::INFINITY, f64::min),
            velocity_mean: v.iter().sum::<f64>() / v.len().max(1) as f64,
            velocity_max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

pub fn write_dataset<W: Write>(w: &mut W, ds: &Dataset) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    put_u32(w, DATASET_VERSION as usize)?;
    let header = Header {
        scenario: ds.scenario,
        generator: ds.generator.clone(),
        stratified: ds.split.stratified,
    };
    put_str(w, &serde_json::to_string(&header)?)?;
    put_u32(w, ds.frames.len())?;
    let mut tags = vec![None; ds.frames.len()];
    for kind in SplitKind::ALL {
        for &i in ds.split.get(kind) {
            tags[i] = Some(kind);
        }
    }
    for (f, tag) in ds.frames.iter().zip(tags) {
        let tag = tag.ok_or_else(|| Error::Contract("frame missing from every split".into()))?;
        w.write_all(&[tag.tag()])?;
        put_f32(w, f.velocity as f32)?;
        put_f32(w, f.pathgain_norm as f32)?;
        for c in &f.snapshots {
            put_f32(w, c.re as f32)?;
            put_f32(w, c.im as f32)?;
        }
    }
    Ok(())
}

pub fn read_dataset<R: Read>(r: &mut R) -> Result<Dataset> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = get_u32(r)?;
    if version != DATASET_VERSION as usize {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let header: Header = serde_json::from_str(&get_str(r, 1 << 16)?)?;
    let scenario = header.scenario;
    scenario.validate().map_err(|e| Error::Format(e.to_string()))?;
    let count = get_u32(r)?;
    let (n_slot, m) = (scenario.n_slot, scenario.antennas());
    let mut frames = Vec::with_capacity(count);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for i in 0..count {
        let mut tag = [0u8];
        r.read_exact(&mut tag)?;
        parts[SplitKind::from_tag(tag[0])? as usize].push(i);
        let meta = get_f32s(r, 2)?;
        let vals = get_f32s(r, 2 * n_slot * m)?;
        frames.push(ComplexFrame {
            n_slot,
            antennas: m,
            snapshots: vals.chunks_exact(2).map(|c| Complex64::new(c[0] as f64, c[1] as f64)).collect(),
            velocity: meta[0] as f64,
            pathgain_norm: meta[1] as f64,
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after the last frame".into()));
    }
    let [train, validation, test] = parts;
    Ok(Dataset {
        scenario,
        frames,
        split: Split {
            train,
            validation,
            test,
            stratified: header.stratified,
        },
        generator: header.generator,
    })
}

/// Write `path` and its JSON sidecar at `path` with extension `.json`.
pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(&mut w, ds)?;
    w.flush()?;
    let sidecar = serde_json::to_string_pretty(&ds.sidecar())?;
    std::fs::write(path.with_extension("json"), sidecar + "\n")?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(&mut BufReader::new(File::open(path)?))
}
