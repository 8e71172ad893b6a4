//! Experiment runner: run configuration, training, evaluation and the
//! comparison protocols.

mod evaluate;
mod experiments;
pub mod plot;
mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoding::EncodingParams;
use crate::error::{Error, Result};
use crate::landmarks::{build_default_skeleton, table2_skeleton, SkeletonGraph};
use crate::losses::{AwingParams, HeatmapLoss, HybridWeights};
use crate::net::NetworkConfig;
use crate::uncertainty::UeParams;

pub use evaluate::{evaluate, infer, predict_images, score, EvalOutput, ImagePrediction, InferOutput};
pub use experiments::{ablation, evaluate_grid, loss_comparison, write_ablation, AblationResult, AblationRow, LossComparison, MRE_TARGET_PX};
pub use train::{train, train_on, EpochRow, RunLedger, StepRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkeletonKind {
    /// Clinical-parameter pairs plus support edges for pelvic landmarks.
    #[default]
    Extended,
    /// Clinical-parameter pairs only.
    Table2,
}

impl SkeletonKind {
    pub fn build(self) -> SkeletonGraph {
        match self {
            SkeletonKind::Extended => build_default_skeleton(),
            SkeletonKind::Table2 => table2_skeleton(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub output: PathBuf,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub flip_probability: f64,
    /// Noise standard deviation is drawn uniformly from `[0, max]` per sample.
    pub noise_sigma_max: f64,
    pub heatmap_loss: HeatmapLoss,
    pub skeleton: SkeletonKind,
    pub network: NetworkConfig,
    pub awing: AwingParams,
    pub weights: HybridWeights,
    pub encoding: EncodingParams,
    pub ue: UeParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: PathBuf::from("data"),
            output: PathBuf::from("runs/default"),
            seed: 0,
            epochs: 60,
            batch_size: 8,
            learning_rate: 1e-3,
            flip_probability: 0.5,
            noise_sigma_max: 0.05,
            heatmap_loss: HeatmapLoss::MaskedAwing,
            skeleton: SkeletonKind::Extended,
            network: NetworkConfig::default(),
            awing: AwingParams::default(),
            weights: HybridWeights::default(),
            encoding: EncodingParams::default(),
            ue: UeParams::default(),
        }
    }
}

impl RunConfig {
    /// Checks values and cross-field consistency; does not touch the disk.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config("flip_probability must lie in [0, 1]".into()));
        }
        if !(self.noise_sigma_max >= 0.0) {
            return Err(Error::Config("noise_sigma_max must be non-negative".into()));
        }
        self.network.validate()?;
        self.awing.validate()?;
        self.weights.validate()?;
        self.encoding.validate()?;
        self.ue.validate()?;
        if self.network.output_stride != self.encoding.stride {
            return Err(Error::Config(format!(
                "network output stride {} differs from encoding stride {}",
                self.network.output_stride, self.encoding.stride
            )));
        }
        let edges = self.skeleton.build().num_edges();
        if self.network.num_edges != edges {
            return Err(Error::Config(format!(
                "network has {} PAF edges but the {:?} skeleton has {edges}",
                self.network.num_edges, self.skeleton
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    /// Parses TOML text, then applies `key.path=value` overrides. Values
    /// are read as TOML literals, falling back to plain strings.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        RunConfig::deserialize(toml::Value::Table(doc)).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml_with_overrides(&text, overrides)
    }
}

fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
