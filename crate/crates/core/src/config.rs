//! Run configuration: every hyperparameter, paths and the master seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distillation_data::{
    simulate_real_set, synthesize_pseudo_set, CaptureConfig, ExpressionFrame, FittingNoise, PseudoOptions,
    SceneConfig, SyntheticScene,
};
use crate::error::{ensure, Error, Result};
use crate::seed::child_seed;
use crate::model::ArchConfig;
use crate::training::{FinetuneOptions, TrainSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub real_count: usize,
    pub pseudo_count: usize,
    /// Interpolated frames held out for evaluation.
    pub heldout_count: usize,
    pub pseudo: PseudoOptions,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { real_count: 200, pseudo_count: 2000, heldout_count: 50, pseudo: PseudoOptions::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { data_dir: "data".into(), run_dir: "runs".into() }
    }
}

impl PathsConfig {
    pub fn real(&self) -> PathBuf {
        self.data_dir.join("real.lavds")
    }

    pub fn pseudo(&self) -> PathBuf {
        self.data_dir.join("pseudo.lavds")
    }

    pub fn heldout(&self) -> PathBuf {
        self.data_dir.join("heldout.lavds")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogConfig {
    /// Steps between loss-log rows.
    pub every: u64,
}

impl Default for LogConfig {
    fn default() -> Self {
        LogConfig { every: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub warmup: usize,
    pub iters: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { warmup: 2, iters: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub arch: ArchConfig,
    pub scene: SceneConfig,
    pub capture: CaptureConfig,
    pub noise: FittingNoise,
    pub data: DataConfig,
    pub train: TrainSchedule,
    pub finetune: FinetuneOptions,
    pub log: LogConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            paths: PathsConfig::default(),
            arch: ArchConfig::desk(),
            scene: SceneConfig::default(),
            capture: CaptureConfig::default(),
            noise: FittingNoise::default(),
            data: DataConfig::default(),
            train: TrainSchedule::desk(),
            finetune: FinetuneOptions::default(),
            log: LogConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::config(e.to_string())
}

/// Parses a command-line value as a TOML literal, falling back to a string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// Full-size architecture and schedule.
    pub fn full() -> Self {
        RunConfig { arch: ArchConfig::full(), train: TrainSchedule::full(), ..Self::default() }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Parses `text` after applying `key.path=value` overrides.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = if text.trim().is_empty() {
            toml::Table::new()
        } else {
            toml::from_str(text).map_err(config_err)?
        };
        if !overrides.is_empty() {
            // Fill defaults first so overrides can target nested keys.
            let mut base: toml::Table =
                toml::from_str(&toml::to_string(&Self::deserialize_table(table.clone())?).map_err(config_err)?)
                    .map_err(config_err)?;
            for o in overrides {
                let (key, raw) = o
                    .split_once('=')
                    .ok_or_else(|| Error::Usage(format!("override '{o}' is not of the form key=value")))?;
                set_path(&mut base, key.trim(), parse_value(raw.trim()))?;
            }
            table = base;
        }
        let cfg = Self::deserialize_table(table)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn deserialize_table(table: toml::Table) -> Result<Self> {
        toml::Value::Table(table).try_into().map_err(config_err)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.scene.validate()?;
        self.capture.validate()?;
        self.noise.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate()?;
        ensure!(
            self.capture.resolution % crate::model::SR_SCALE == 0,
            Config,
            "capture resolution {} must be divisible by {}",
            self.capture.resolution,
            crate::model::SR_SCALE
        );
        ensure!(self.log.every >= 1, Config, "log.every must be ≥ 1");
        if let Some(a) = self.data.pseudo.fixed_alpha {
            ensure!((0.0..1.0).contains(&a), Config, "data.pseudo.fixed_alpha must be in [0, 1)");
        }
        Ok(())
    }

    /// Checks that the dataset can feed this model.
    pub fn check_data_compat(&self) -> Result<()> {
        ensure!(
            self.arch.latent_count >= self.data.real_count,
            Config,
            "arch.latent_count ({}) is smaller than data.real_count ({})",
            self.arch.latent_count,
            self.data.real_count
        );
        Ok(())
    }
}

/// Independent seed streams derived from the master seed.
pub mod streams {
    pub const REAL: u64 = 1;
    pub const PSEUDO: u64 = 2;
    pub const HELDOUT: u64 = 3;
    pub const MODEL_INIT: u64 = 4;
    pub const TRAIN: u64 = 5;
    pub const TRAJECTORY: u64 = 6;
}

pub struct Datasets {
    pub real: Vec<ExpressionFrame>,
    pub pseudo: Vec<ExpressionFrame>,
    /// Interpolated frames drawn with an independent seed.
    pub heldout: Vec<ExpressionFrame>,
}

impl RunConfig {
    pub fn seed_for(&self, stream: u64, index: u64) -> u64 {
        child_seed(self.seed, stream, index)
    }

    pub fn scene(&self) -> Result<SyntheticScene> {
        SyntheticScene::new(self.scene.clone(), self.arch.expr_dim)
    }

    pub fn generate_real(&self) -> Result<Vec<ExpressionFrame>> {
        ensure!(self.data.real_count >= 2, Validation, "data.real_count must be ≥ 2, got {}", self.data.real_count);
        simulate_real_set(&self.scene()?, &self.capture, self.data.real_count, self.noise, self.seed_for(streams::REAL, 0))
    }

    pub fn generate_data(&self) -> Result<Datasets> {
        let scene = self.scene()?;
        let real = self.generate_real()?;
        let pseudo = synthesize_pseudo_set(
            &scene,
            &real,
            self.data.pseudo_count,
            self.seed_for(streams::PSEUDO, 0),
            &self.data.pseudo,
        )?;
        let heldout = if self.data.heldout_count == 0 {
            Vec::new()
        } else {
            synthesize_pseudo_set(
                &scene,
                &real,
                self.data.heldout_count,
                self.seed_for(streams::HELDOUT, 0),
                &self.data.pseudo,
            )?
        };
        Ok(Datasets { real, pseudo, heldout })
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Usage(format!("empty override key '{key}'")))?;
    let mut cur = table;
    for p in parts {
        cur = cur
            .get_mut(p)
            .and_then(|v| v.as_table_mut())
            .ok_or_else(|| Error::Config(format!("unknown configuration section '{p}' in '{key}'")))?;
    }
    // Optional fields may be absent from the serialised defaults.
    let value = match (cur.get(last), value) {
        (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    };
    cur.insert(last.to_string(), value);
    Ok(())
}
