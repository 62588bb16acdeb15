//! Run configuration file (TOML).
//!
//! ```toml
//! seed = 0
//! manifest = "data/manifest.csv"
//! out = "runs/all"
//! checkpoint_every = 5000
//!
//! [train]
//! hidden = 256
//! iterations = 20000
//!
//! [train.schedule]
//! lr0 = 0.001
//!
//! [synth]
//! train_per_class = 25
//!
//! [finetune]
//! anchors = [[25, 100, 500], [75, 300, 1200], [125, 500, 2000]]
//! ```
//!
//! Every key is optional. The top-level `seed` drives all randomness and
//! replaces any `seed` written inside `[train]` or `[synth]`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use aqa_core::protocols::{FinetuneSchedule, TrainConfig};
use aqa_core::synth::SynthSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Reject manifest scores outside the per-action judge ranges.
    pub validate_score_ranges: bool,
    /// Write `ckpt_<iter>.aqam` at multiples of this; the final iteration is always written.
    pub checkpoint_every: u64,
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub finetune: FinetuneSchedule,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            manifest: None,
            out: None,
            validate_score_ranges: false,
            checkpoint_every: 5000,
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
            finetune: FinetuneSchedule::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn resolve(file: Option<&Path>, overrides: Overrides) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if overrides.manifest.is_some() {
            cfg.manifest = overrides.manifest;
        }
        if overrides.out.is_some() {
            cfg.out = overrides.out;
        }
        cfg.train.seed = cfg.seed;
        cfg.synth.seed = cfg.seed;
        if cfg.checkpoint_every == 0 {
            bail!("checkpoint_every must be positive");
        }
        Ok(cfg)
    }

    pub fn out_dir(&self) -> Result<&Path> {
        match &self.out {
            Some(p) => Ok(p),
            None => bail!("no output directory: pass --out or set `out` in the config"),
        }
    }

    pub fn manifest(&self) -> Result<&Path> {
        match &self.manifest {
            Some(p) => Ok(p),
            None => bail!("no dataset: pass --manifest or set `manifest` in the config"),
        }
    }

    /// Writes `config.resolved` into `dir`, headed by the invoking command.
    pub fn write_resolved(&self, dir: &Path, command: &str) -> Result<()> {
        let body = toml::to_string(self).context("serializing resolved config")?;
        let path = dir.join("config.resolved");
        fs::write(&path, format!("# aqa {command}\n{body}")).with_context(|| format!("writing {}", path.display()))
    }
}
