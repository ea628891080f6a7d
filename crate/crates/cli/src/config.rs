use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use naer_core::hpo::HyperBox;
use naer_core::interpret::ExplainConfig;
use naer_core::labeler::LabelConfig;
use naer_core::metrics::LogRegConfig;
use naer_core::splitter::{SplitConfig, Thresholds};
use naer_core::trainer::TrainConfig;
use naer_core::CoreError;
use serde::{Deserialize, Serialize};

/// Default file locations. Relative paths are resolved against the
/// directory holding the config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Raw (non-anomaly) GSK1 stack.
    pub data: Option<PathBuf>,
    pub anomalies: Option<PathBuf>,
    /// Regime label CSV.
    pub labels: Option<PathBuf>,
    pub enso: Option<PathBuf>,
    pub pdo: Option<PathBuf>,
    pub amo: Option<PathBuf>,
    /// Split plan JSON.
    pub split: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
    pub outputs: Option<PathBuf>,
}

impl Paths {
    fn rebase(&mut self, dir: &Path) {
        for p in [
            &mut self.data,
            &mut self.anomalies,
            &mut self.labels,
            &mut self.enso,
            &mut self.pdo,
            &mut self.amo,
            &mut self.split,
            &mut self.checkpoints,
            &mut self.outputs,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnomalyParams {
    /// Climatology window length in years.
    pub window: i32,
    /// Years between climatology epochs.
    pub step: i32,
    pub winter_only: bool,
    pub drop_corrupt: bool,
}

impl Default for AnomalyParams {
    fn default() -> Self {
        Self {
            window: 30,
            step: 5,
            winter_only: true,
            drop_corrupt: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HpoParams {
    pub space: HyperBox,
    pub budget: usize,
    /// Epoch cap for each trial.
    pub max_epochs: usize,
}

impl Default for HpoParams {
    fn default() -> Self {
        Self {
            space: HyperBox::default(),
            budget: 20,
            max_epochs: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalParams {
    /// Z500 EOFs fed to the logistic-regression baseline.
    pub logreg_eofs: usize,
    pub logreg: LogRegConfig,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            logreg_eofs: 20,
            logreg: LogRegConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub anomaly: AnomalyParams,
    pub labeling: LabelConfig,
    pub thresholds: Thresholds,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub hpo: HpoParams,
    pub evaluate: EvalParams,
    pub interpret: ExplainConfig,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Self = serde_json::from_str(&text).with_context(|| format!("config {}", path.display()))?;
        cfg.paths.rebase(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }
}

/// The flag value, else the configured path, else an error naming both.
pub fn resolve(flag: &Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    resolve_as(flag, configured, what, what)
}

pub fn resolve_as(flag: &Option<PathBuf>, configured: &Option<PathBuf>, flag_name: &str, key: &str) -> Result<PathBuf> {
    match flag.as_ref().or(configured.as_ref()) {
        Some(p) => Ok(p.clone()),
        None => Err(CoreError::InvalidArgument(format!("no {key} path: pass --{flag_name} or set paths.{key} in the config")).into()),
    }
}
