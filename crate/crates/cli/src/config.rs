use std::path::Path;

use anyhow::{bail, Context, Result};
use csipred::channel::ScenarioConfig;
use csipred::models::Family;
use csipred::train_eval::{SweepConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// Structured-text run configuration; every section is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub scenario: ScenarioConfig,
    pub train: TrainConfig,
    pub sweep: SweepSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub families: Vec<Family>,
    pub snr_grid: Vec<f64>,
    pub lengths: Vec<(usize, usize)>,
    pub include_hold: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        let d = SweepConfig::default();
        Self {
            families: d.families,
            snr_grid: d.snr_grid,
            lengths: d.lengths,
            include_hold: d.include_hold,
        }
    }
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.train.validate()?;
        if self.train.l + self.train.delta > self.scenario.n_slot {
            bail!(
                "training lengths {} + {} exceed the {} slots of a frame",
                self.train.l,
                self.train.delta,
                self.scenario.n_slot
            );
        }
        Ok(())
    }

    /// Write the resolved configuration, preceded by `notes` as comments.
    pub fn snapshot(&self, path: &Path, notes: &[String]) -> Result<()> {
        let mut text: String = notes.iter().map(|n| format!("# {n}\n")).collect();
        text.push_str(&toml::to_string(self)?);
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}

pub fn parse_lengths(s: &str) -> std::result::Result<(usize, usize), String> {
    let (l, d) = s.split_once(':').ok_or_else(|| format!("expected L:DELTA, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(l)?, p(d)?))
}
