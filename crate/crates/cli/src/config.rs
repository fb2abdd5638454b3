//! The TOML run config.
//!
//! ```toml
//! version = 1
//! variant = "cgc_lora"          # cgc_lora | lora_full | wo_gate | multi_gate
//!
//! [model]                       # ModelConfig
//! d_model = 32
//! [model.adapter]
//! r_total = 16
//! n_common = 4
//!
//! [train]                       # TrainConfig
//! max_steps = 2000
//!
//! [data]
//! seed = 0
//! tasks = ["copy", "reverse", "extract_caps", "parity"]
//! sizes = { train = 1000, val = 100, test = 100 }
//!
//! [[clusters]]                  # optional; default is one cluster "main"
//! id = "main"
//! tasks = ["copy", "reverse", "extract_caps", "parity"]
//!
//! [sweep]
//! n_common = [2, 4, 8, 16]
//! expert_rank = [1, 2, 4]
//! parallel = false
//! ```
//!
//! Every field has a default and unknown keys are rejected.

use std::collections::HashSet;
use std::path::Path;

use cgc_lora::model::{ModelConfig, Variant};
use cgc_lora::taskdata::{SplitSizes, SuiteParams, SyntheticTask};
use cgc_lora::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::{read, CliError, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub variant: Variant,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub clusters: Vec<ClusterConfig>,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            variant: Variant::CgcLora,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            clusters: Vec::new(),
            sweep: SweepConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub tasks: Vec<String>,
    pub sizes: SplitSizes,
    pub suite: SuiteParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tasks: SyntheticTask::ALL.iter().map(|t| t.name().to_string()).collect(),
            sizes: SplitSizes::default(),
            suite: SuiteParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub id: String,
    pub tasks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub n_common: Vec<usize>,
    pub expert_rank: Vec<usize>,
    pub parallel: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            n_common: vec![2, 4, 8, 16],
            expert_rank: vec![1, 2, 4],
            parallel: false,
        }
    }
}

/// The config as loaded, with the text it came from.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    /// Echoed verbatim into run directories.
    pub text: String,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Loaded> {
        match path {
            Some(p) => {
                let text = read(p)?;
                Ok(Loaded {
                    config: Self::parse(&text)?,
                    text,
                })
            }
            None => {
                let config = RunConfig::default();
                Ok(Loaded {
                    text: config.to_toml()?,
                    config,
                })
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(CliError::Usage(format!(
                "config: version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.model.variant != Variant::default() && self.model.variant != self.variant {
            return Err(CliError::Usage(
                "config: model.variant disagrees with variant; set only the top-level variant".into(),
            ));
        }
        self.model_config().validate()?;
        self.train.validate()?;
        self.data
            .sizes
            .validate()
            .map_err(|e| CliError::Usage(format!("config: data.{}", e.to_string().trim_start_matches("configuration error: "))))?;
        let mut seen = HashSet::new();
        for t in &self.data.tasks {
            if SyntheticTask::from_name(t).is_none() {
                return Err(CliError::Usage(format!("config: data.tasks: unknown task {t:?}")));
            }
            if !seen.insert(t) {
                return Err(CliError::Usage(format!("config: data.tasks: {t:?} listed twice")));
            }
        }
        if self.data.tasks.is_empty() {
            return Err(CliError::Usage("config: data.tasks must not be empty".into()));
        }
        let mut owner = HashSet::new();
        let mut ids = HashSet::new();
        for c in &self.clusters {
            if c.id.is_empty() || !c.id.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '-' || ch == '_') {
                return Err(CliError::Usage(format!(
                    "config: cluster id {:?} must be non-empty ASCII letters, digits, '-' or '_'",
                    c.id
                )));
            }
            if !ids.insert(&c.id) {
                return Err(CliError::Usage(format!("config: cluster {:?} defined twice", c.id)));
            }
            if c.tasks.is_empty() {
                return Err(CliError::Usage(format!("config: cluster {:?} has no tasks", c.id)));
            }
            for t in &c.tasks {
                if !self.data.tasks.contains(t) {
                    return Err(CliError::Usage(format!(
                        "config: cluster {:?} lists {t:?}, which is not in data.tasks",
                        c.id
                    )));
                }
                if !owner.insert(t) {
                    return Err(CliError::Usage(format!(
                        "config: task {t:?} belongs to more than one cluster"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Model config with the run's variant applied.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            ..self.model.clone()
        }
    }

    /// Explicit clusters, or a single `main` cluster holding every task.
    pub fn clusters(&self) -> Vec<ClusterConfig> {
        if self.clusters.is_empty() {
            vec![ClusterConfig {
                id: "main".into(),
                tasks: self.data.tasks.clone(),
            }]
        } else {
            self.clusters.clone()
        }
    }
}
