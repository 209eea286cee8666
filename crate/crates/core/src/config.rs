//! JSON run configuration and the per-command output manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::data::SyntheticConfig;
use crate::error::{MedcError, Result};
use crate::training::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;
pub const SEED_ENV: &str = "MEDC_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Classes with more training positives than this are head classes.
    pub head_threshold: usize,
    /// Classes above this (and not head) are medium; the rest are tail.
    pub medium_threshold: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            head_threshold: 500,
            medium_threshold: 100,
        }
    }
}

fn default_version() -> u32 {
    CONFIG_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    /// No default: must come from the file, `MEDC_SEED` or `--seed`.
    #[serde(default)]
    pub seed: Option<u64>,
    /// No default: must come from the file or `--out`.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: SyntheticConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: None,
            output_dir: None,
            data: SyntheticConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| MedcError::Config(format!("{origin}: {e}")))?;
        if cfg.version != CONFIG_VERSION {
            return Err(MedcError::Config(format!(
                "{origin}: unsupported config version {} (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        cfg.validate()
            .map_err(|e| MedcError::Config(format!("{origin}: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MedcError::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        if self.eval.head_threshold <= self.eval.medium_threshold || self.eval.medium_threshold == 0 {
            return Err(MedcError::Invalid(format!(
                "thresholds need head > medium > 0, got head={} medium={}",
                self.eval.head_threshold, self.eval.medium_threshold
            )));
        }
        Ok(())
    }

    /// Precedence: `--seed` flag, then `MEDC_SEED`, then the config file.
    pub fn resolve_seed(&self, flag: Option<u64>, env: Option<&str>) -> Result<u64> {
        if let Some(s) = flag {
            return Ok(s);
        }
        if let Some(v) = env {
            return v
                .trim()
                .parse()
                .map_err(|_| MedcError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")));
        }
        self.seed
            .ok_or_else(|| MedcError::Config(format!("no seed: set \"seed\" in the config, {SEED_ENV}, or --seed")))
    }

    /// sha256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub seed: u64,
    pub created_at: String,
    pub outputs: Vec<OutputEntry>,
}

impl Manifest {
    /// Hashes each output file; paths are stored relative to `dir`.
    pub fn build(dir: &Path, config_sha256: &str, seed: u64, outputs: &[PathBuf]) -> Result<Self> {
        let outputs = outputs
            .iter()
            .map(|p| {
                let bytes = fs::read(p).map_err(|e| MedcError::io(p, e))?;
                let rel = p.strip_prefix(dir).unwrap_or(p);
                Ok(OutputEntry {
                    path: rel.display().to_string(),
                    sha256: sha256_hex(&bytes),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config_sha256: config_sha256.to_string(),
            seed,
            created_at: chrono::Utc::now().to_rfc3339(),
            outputs,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| MedcError::io(&path, e))?;
        Ok(path)
    }
}
