//! Run configuration: one TOML document with a section per command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::Granularity;
use crate::cmaes::StopCriteria;
use crate::dit::train::TrainConfig;
use crate::dit::ArchSpec;
use crate::error::{Error, Result};
use crate::rewards::RewardSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub arch: ArchSpec,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub reward: RewardSpec,
    pub ablate: AblateConfig,
    pub sweep: SweepConfig,
    pub calibrate: CalibrateConfig,
    pub eval: EvalConfig,
    /// Derived constants written by the harness for reference; ignored on load.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub derived: Option<toml::Table>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Reference images per class stored with the checkpoint.
    pub reference_per_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            reference_per_class: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub conditions: usize,
    pub seeds: usize,
    pub nfe: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            conditions: 64,
            seeds: 5,
            nfe: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub scales: Vec<f64>,
    pub conditions: usize,
    pub seeds: usize,
    pub nfe: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            scales: vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5],
            conditions: 64,
            seeds: 5,
            nfe: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleRoles {
    /// Every member receives the request's class.
    SamePrompt,
    /// First member conditional, second unconditional.
    Cfg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Candidate with the best held-out reward seen during the search.
    BestHeldout,
    /// Final search-distribution mean.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrateConfig {
    pub granularity: Granularity,
    pub nfe: usize,
    pub n_models: usize,
    pub roles: EnsembleRoles,
    pub guidance_scale: f64,
    pub sigma0: f64,
    /// Overrides the recommended population size when set.
    pub population: Option<usize>,
    pub bucket_size: usize,
    pub heldout_size: usize,
    pub max_dimension: usize,
    pub selection: Selection,
    pub stop: StopCriteria,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        Self {
            granularity: Granularity::Layer,
            nfe: 8,
            n_models: 1,
            roles: EnsembleRoles::SamePrompt,
            guidance_scale: 0.0,
            sigma0: 0.25,
            population: None,
            bucket_size: 16,
            heldout_size: 32,
            max_dimension: 512,
            selection: Selection::BestHeldout,
            stop: StopCriteria {
                min_generations: 150,
                ..StopCriteria::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub nfe_list: Vec<usize>,
    pub conditions: usize,
    pub seeds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            nfe_list: vec![2, 4, 8, 16, 32, 64],
            conditions: 64,
            seeds: 3,
        }
    }
}

/// Converts a TOML parse error into a located config error.
pub fn config_error(text: &str, e: &toml::de::Error) -> Error {
    let (line, column) = match e.span() {
        Some(span) => {
            let before = &text[..span.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
            (line, column)
        }
        None => (0, 0),
    };
    Error::Config {
        message: e.message().to_string(),
        line,
        column,
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| config_error(text, &e))?;
        cfg.derived = None;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            message: format!("cannot read {}: {e}", path.display()),
            line: 0,
            column: 0,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Contract(format!("config serialization: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |message: String| Error::Config {
            message,
            line: 0,
            column: 0,
        };
        self.arch.validate().map_err(|e| bad(e.to_string()))?;
        self.reward.validate().map_err(|e| bad(e.to_string()))?;
        let c = &self.calibrate;
        if !(1..=2).contains(&c.n_models) {
            return Err(bad(format!("calibrate.n_models must be 1 or 2, got {}", c.n_models)));
        }
        if c.nfe == 0 || self.ablate.nfe == 0 || self.sweep.nfe == 0 || self.eval.nfe_list.contains(&0) {
            return Err(bad("nfe values must be at least 1".into()));
        }
        if c.bucket_size == 0 || c.heldout_size == 0 {
            return Err(bad("bucket sizes must be at least 1".into()));
        }
        if !(c.sigma0 > 0.0) {
            return Err(bad(format!("calibrate.sigma0 must be positive, got {}", c.sigma0)));
        }
        if self.eval.conditions < 2 {
            return Err(bad("eval.conditions must be at least 2 for diversity".into()));
        }
        if self.train.batch == 0 {
            return Err(bad("train.batch must be at least 1".into()));
        }
        Ok(())
    }
}
