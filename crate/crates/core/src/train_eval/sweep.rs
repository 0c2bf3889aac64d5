use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{evaluate, fit_family, Forecaster, LastValueHold, PreparedData, TrainConfig};
use crate::channel::Dataset;
use crate::error::{contract, Error, Result};
use crate::models::checkpoint::save_checkpoint;
use crate::models::Family;

pub const CSV_HEADER: &str = "model,snr_db,l,delta,nmse,seed,runtime_s,checkpoint";
/// Model column value of the last-value-hold comparator.
pub const HOLD_ID: &str = "last-value-hold";

#[derive(Clone, Debug, PartialEq)]
pub enum Score {
    Nmse(f64),
    /// The family cannot forecast at these lengths.
    Unsupported(String),
    Failed(String),
}

impl Score {
    pub fn value(&self) -> Option<f64> {
        match self {
            Score::Nmse(v) => Some(*v),
            _ => None,
        }
    }

    fn cell(&self) -> String {
        match self {
            Score::Nmse(v) => v.to_string(),
            Score::Unsupported(_) => "unsupported".into(),
            Score::Failed(_) => "failed".into(),
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "unsupported" => Ok(Score::Unsupported(String::new())),
            "failed" => Ok(Score::Failed(String::new())),
            v => v
                .parse::<f64>()
                .map(Score::Nmse)
                .map_err(|_| Error::Format(format!("bad nmse cell {v:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentRecord {
    pub model: String,
    pub snr_db: f64,
    pub l: usize,
    pub delta: usize,
    pub score: Score,
    pub seed: u64,
    pub runtime_s: f64,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct Row {
    model: String,
    snr_db: f64,
    l: usize,
    delta: usize,
    nmse: String,
    seed: u64,
    runtime_s: f64,
    checkpoint: String,
}

impl From<&ExperimentRecord> for Row {
    fn from(r: &ExperimentRecord) -> Self {
        Row {
            model: r.model.clone(),
            snr_db: r.snr_db,
            l: r.l,
            delta: r.delta,
            nmse: r.score.cell(),
            seed: r.seed,
            runtime_s: (r.runtime_s * 1e3).round() / 1e3,
            checkpoint: r.checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        }
    }
}

fn csv_writer<W: Write>(w: W) -> Result<csv::Writer<W>> {
    let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    csv.write_record(CSV_HEADER.split(','))?;
    Ok(csv)
}

pub fn write_records<W: Write>(w: W, records: &[ExperimentRecord]) -> Result<()> {
    let mut csv = csv_writer(w)?;
    for r in records {
        csv.serialize(Row::from(r))?;
    }
    csv.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(r: R) -> Result<Vec<ExperimentRecord>> {
    let mut csv = csv::Reader::from_reader(r);
    if csv.headers()?.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(Error::Format(format!("results header must be {CSV_HEADER}")));
    }
    csv.deserialize::<Row>()
        .map(|row| {
            let row = row?;
            Ok(ExperimentRecord {
                model: row.model,
                snr_db: row.snr_db,
                l: row.l,
                delta: row.delta,
                score: Score::parse(&row.nmse)?,
                seed: row.seed,
                runtime_s: row.runtime_s,
                checkpoint: (!row.checkpoint.is_empty()).then(|| PathBuf::from(row.checkpoint)),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub families: Vec<Family>,
    pub snr_grid: Vec<f64>,
    /// `(l, delta)` evaluation pairs.
    pub lengths: Vec<(usize, usize)>,
    /// Add rows for the last-value-hold comparator.
    pub include_hold: bool,
    /// Training protocol; `l` and `delta` are the training lengths.
    pub train: TrainConfig,
    /// Where to save one checkpoint per (family, SNR); none when unset.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            families: Family::ALL.to_vec(),
            snr_grid: vec![-5.0, 0.0, 5.0, 10.0, 15.0, 20.0],
            lengths: vec![(16, 4), (8, 2), (14, 6)],
            include_hold: true,
            train: TrainConfig::default(),
            checkpoint_dir: None,
        }
    }
}

fn snr_tag(snr: f64) -> String {
    format!("{snr}").replace('.', "p")
}

/// Train every family at every SNR on `(train.l, train.delta)`, then score it
/// at every length pair. MAR is refit with order `l` for each pair. A failing cell yields `failed` rows and the sweep
/// carries on. Each record is passed to `sink` as soon as it exists.
pub fn sweep(
    ds: &Dataset,
    cfg: &SweepConfig,
    sink: &mut dyn FnMut(&ExperimentRecord) -> Result<()>,
) -> Result<Vec<ExperimentRecord>> {
    cfg.train.validate()?;
    if cfg.snr_grid.is_empty() || cfg.lengths.is_empty() || (cfg.families.is_empty() && !cfg.include_hold) {
        return contract("sweep needs at least one SNR, one length pair and one model");
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut records = Vec::new();
    let mut push = |r: ExperimentRecord, records: &mut Vec<ExperimentRecord>| -> Result<()> {
        sink(&r)?;
        records.push(r);
        Ok(())
    };
    for &snr in &cfg.snr_grid {
        let data = PreparedData::new(ds, snr)?;
        let train_cfg = TrainConfig {
            snr_db: snr,
            ..cfg.train.clone()
        };
        let record = |model: &str, l: usize, delta: usize, score: Score, runtime_s: f64, ckpt: Option<PathBuf>| {
            ExperimentRecord {
                model: model.to_string(),
                snr_db: snr,
                l,
                delta,
                score,
                seed: cfg.train.seed,
                runtime_s,
                checkpoint: ckpt,
            }
        };
        let fit = |family: Family, tc: &TrainConfig| {
            fit_family(family, &data, tc).and_then(|(bundle, _)| {
                let order = if family == Family::Mar && tc.l != cfg.train.l { format!("_l{}", tc.l) } else { String::new() };
                let path = cfg.checkpoint_dir.as_ref().map(|d| {
                    d.join(format!("{}{order}_snr{}_seed{}.ckpt", family.id(), snr_tag(snr), cfg.train.seed))
                });
                if let Some(p) = &path {
                    save_checkpoint(p, &bundle)?;
                }
                Ok((bundle, path))
            })
        };
        for &family in &cfg.families {
            // MAR has order l, so it is refit for every history length.
            let groups: Vec<(TrainConfig, Vec<(usize, usize)>)> = if family == Family::Mar {
                cfg.lengths.iter().map(|&p| (TrainConfig { l: p.0, ..train_cfg.clone() }, vec![p])).collect()
            } else {
                vec![(train_cfg.clone(), cfg.lengths.clone())]
            };
            for (tc, lengths) in groups {
                let t0 = Instant::now();
                let fitted = fit(family, &tc);
                let fit_s = t0.elapsed().as_secs_f64();
                for (l, delta) in lengths {
                    let (score, rt, path) = match &fitted {
                        Ok((bundle, path)) => {
                            let t1 = Instant::now();
                            let score = evaluate(bundle, &data, l, delta).unwrap_or_else(|e| Score::Failed(e.to_string()));
                            (score, fit_s + t1.elapsed().as_secs_f64(), path.clone())
                        }
                        Err(e) => (Score::Failed(e.to_string()), fit_s, None),
                    };
                    push(record(family.id(), l, delta, score, rt, path), &mut records)?;
                }
            }
        }
        if cfg.include_hold {
            for &(l, delta) in &cfg.lengths {
                let t1 = Instant::now();
                let score = evaluate(&LastValueHold as &dyn Forecaster, &data, l, delta)
                    .unwrap_or_else(|e| Score::Failed(e.to_string()));
                push(record(HOLD_ID, l, delta, score, t1.elapsed().as_secs_f64(), None), &mut records)?;
            }
        }
    }
    Ok(records)
}

/// Run [`sweep`] and stream rows to a CSV file at `path`.
pub fn sweep_to_csv(ds: &Dataset, cfg: &SweepConfig, path: &Path) -> Result<Vec<ExperimentRecord>> {
    let mut csv = csv_writer(File::create(path)?)?;
    csv.flush()?;
    let records = sweep(ds, cfg, &mut |r| {
        csv.serialize(Row::from(r))?;
        csv.flush()?;
        Ok(())
    })?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ScenarioConfig;

    fn tiny_setup() -> (Dataset, SweepConfig) {
        let ds = Dataset::generate(ScenarioConfig { vertical: 2, horizontal: 1, n_slot: 8, ..ScenarioConfig::default() }, 30)
            .unwrap();
        let cfg = SweepConfig {
            families: vec![Family::Mlp, Family::Mar],
            snr_grid: vec![20.0],
            lengths: vec![(4, 2)],
            include_hold: false,
            train: TrainConfig { epochs: 2, batch_size: 8, l: 4, delta: 2, ..TrainConfig::default() },
            checkpoint_dir: None,
        };
        (ds, cfg)
    }

    #[test]
    fn cardinality_and_unsupported_marker() {
        let (ds, mut cfg) = tiny_setup();
        let recs = sweep(&ds, &cfg, &mut |_| Ok(())).unwrap();
        assert_eq!(recs.len(), 2);
        assert!(recs.iter().all(|r| matches!(r.score, Score::Nmse(v) if v >= 0.0)));
        cfg.lengths.push((3, 1));
        cfg.include_hold = true;
        let recs = sweep(&ds, &cfg, &mut |_| Ok(())).unwrap();
        assert_eq!(recs.len(), 6);
        assert!(matches!(recs[1].score, Score::Unsupported(_)), "{:?}", recs[1]);
        assert!(matches!(recs[3].score, Score::Nmse(_)), "mar is refit at order 3: {:?}", recs[3]);
        assert_eq!(recs[5].model, HOLD_ID);
    }

    #[test]
    fn failures_are_recorded_and_the_sweep_continues() {
        let (ds, mut cfg) = tiny_setup();
        cfg.families = vec![Family::TransformerParallel, Family::Mlp];
        let recs = sweep(&ds, &cfg, &mut |_| Ok(())).unwrap();
        assert!(matches!(recs[0].score, Score::Failed(_)));
        assert!(matches!(recs[1].score, Score::Nmse(_)));
    }

    #[test]
    fn csv_is_deterministic_apart_from_runtime() {
        let (ds, mut cfg) = tiny_setup();
        let dir = tempfile::tempdir().unwrap();
        cfg.checkpoint_dir = Some(dir.path().join("ckpt"));
        let run = |name: &str| {
            let p = dir.path().join(name);
            sweep_to_csv(&ds, &cfg, &p).unwrap();
            std::fs::read_to_string(p).unwrap()
        };
        let (a, b) = (run("a.csv"), run("b.csv"));
        assert_eq!(a.lines().next().unwrap(), CSV_HEADER);
        let strip = |s: &str| -> Vec<String> {
            s.lines()
                .map(|l| {
                    let mut c: Vec<&str> = l.split(',').collect();
                    c[6] = "";
                    c.join(",")
                })
                .collect()
        };
        assert_eq!(strip(&a), strip(&b));
        let back = read_records(a.as_bytes()).unwrap();
        assert_eq!(back.len(), 2);
        assert!(back[0].checkpoint.as_ref().unwrap().exists());
        let mut buf = Vec::new();
        write_records(&mut buf, &back).unwrap();
        assert_eq!(strip(&String::from_utf8(buf).unwrap()), strip(&a));
    }
}
