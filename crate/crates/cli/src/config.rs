use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lesionpaint::{PhantomSpec, SamplerConfig, ScheduleSpec, SegmentThresholds, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Number of phantom pairs to generate.
    pub n: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { n: 200 }
    }
}

/// Input and output locations. Each command reads the entries it needs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub wm_mask: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub prediction: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

/// Everything a run depends on. Written next to every output so the run can
/// be replayed with `--config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed of the phantom corpus.
    pub seed: u64,
    pub phantom: PhantomSpec,
    pub corpus: CorpusConfig,
    /// Noise schedule used when training; inference reads it from the weights.
    pub schedule: ScheduleSpec,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub segment: SegmentThresholds,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}
