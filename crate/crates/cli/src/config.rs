//! Experiment configuration files (TOML).

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;
use smile_core::engine::Policy;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoTag {
    Auto,
}

/// A number, or `"auto"` to derive it from the instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Setting {
    Value(f64),
    Auto(AutoTag),
}

impl Default for Setting {
    fn default() -> Self {
        Setting::Auto(AutoTag::Auto)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub name: String,
    pub instance: InstanceSpec,
    #[serde(default)]
    pub run: RunSpec,
    #[serde(default)]
    pub agent: AgentSpec,
    #[serde(default)]
    pub analysis: AnalysisSpec,
}

/// One explicitly given chain; `cell` and `channel` are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSpec {
    pub cell: usize,
    pub channel: usize,
    pub rates: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceSpec {
    pub kind: String,
    pub cells: Option<usize>,
    pub channels: Option<usize>,
    /// Target mean rates, one row per cell.
    pub means: Option<Vec<Vec<f64>>>,
    /// 1-based cell pairs.
    pub edges: Option<Vec<[usize; 2]>>,
    pub edge_probability: Option<f64>,
    pub mean_range: Option<[f64; 2]>,
    pub min_gap: Option<f64>,
    /// Chain family for generated instances: `rayleigh6` or
    /// `gilbert_elliott`.
    pub chain: Option<String>,
    pub p_stay_good: Option<f64>,
    pub p_stay_bad: Option<f64>,
    pub good_rates: Option<Vec<Vec<f64>>>,
    pub good_rate_range: Option<[f64; 2]>,
    pub chains: Option<Vec<ChainSpec>>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSpec {
    pub horizon: u64,
    pub replications: u64,
    /// Base seed; replication `r` uses `seed + r` unless `seeds` is given.
    pub seed: u64,
    pub seeds: Option<Vec<u64>>,
    /// Sampling stride of the CSV output; 0 picks `horizon / 1000`.
    pub stride: u64,
    pub policies: Vec<String>,
    pub output_dir: Option<PathBuf>,
    /// Write the per-slot stream of the first replication.
    pub raw_dump: bool,
    pub plot_script: bool,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            horizon: 10_000,
            replications: 1,
            seed: 0,
            seeds: None,
            stride: 0,
            policies: vec!["smile".into()],
            output_dir: None,
            raw_dump: false,
            plot_script: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentSpec {
    pub kappa: Setting,
    pub concentration_rate: Setting,
    pub epsilon: f64,
    /// Floor of the squared gap in the exploration coefficients; `auto`
    /// uses the squared smallest mean gap of the instance.
    pub delta_sq: Setting,
    pub recovery_cap: Option<u64>,
}

impl Default for AgentSpec {
    fn default() -> Self {
        Self {
            kappa: Setting::default(),
            concentration_rate: Setting::default(),
            epsilon: 0.0,
            delta_sq: Setting::default(),
            recovery_cap: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSpec {
    /// Accuracy parameter used for the reported constants.
    pub epsilon: f64,
    /// Add the analytical regret bound to the CSVs.
    pub bound: bool,
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            bound: true,
        }
    }
}

/// A parsed config with its source text digest.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub path: PathBuf,
    pub sha256: String,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<LoadedConfig, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let config = Self::parse(&text)?;
        let sha256 = hex::encode(Sha256::digest(text.as_bytes()));
        Ok(LoadedConfig {
            config,
            path: path.to_path_buf(),
            sha256,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.schema != SCHEMA_VERSION {
            return bad(format!(
                "unsupported schema {} (expected {SCHEMA_VERSION})",
                self.schema
            ));
        }
        if self.run.replications == 0 {
            return bad("run.replications must be at least 1".into());
        }
        if self.run.horizon == 0 {
            return bad("run.horizon must be positive".into());
        }
        if let Some(seeds) = &self.run.seeds {
            if seeds.len() as u64 != self.run.replications {
                return bad(format!(
                    "run.seeds has {} entries for {} replications",
                    seeds.len(),
                    self.run.replications
                ));
            }
            if seeds.iter().collect::<BTreeSet<_>>().len() != seeds.len() {
                return bad("run.seeds must be distinct".into());
            }
        }
        if self.run.policies.is_empty() {
            return bad("run.policies is empty".into());
        }
        self.policies()?;
        if !(self.analysis.epsilon.is_finite() && self.analysis.epsilon > 0.0) {
            return bad("analysis.epsilon must be positive".into());
        }
        if !(self.agent.epsilon.is_finite() && self.agent.epsilon >= 0.0) {
            return bad("agent.epsilon must be nonnegative".into());
        }
        for (name, setting) in [
            ("agent.kappa", self.agent.kappa),
            ("agent.concentration_rate", self.agent.concentration_rate),
            ("agent.delta_sq", self.agent.delta_sq),
        ] {
            if let Setting::Value(v) = setting {
                if !(v.is_finite() && v > 0.0) {
                    return bad(format!("{name} must be positive or \"auto\""));
                }
            }
        }
        Ok(())
    }

    pub fn policies(&self) -> Result<Vec<Policy>, CliError> {
        self.run
            .policies
            .iter()
            .map(|p| match p.as_str() {
                "smile" => Ok(Policy::Smile),
                "oracle" => Ok(Policy::Oracle),
                "random" => Ok(Policy::Random),
                other => Err(CliError::Config(format!("unknown policy {other:?}"))),
            })
            .collect()
    }

    pub fn seeds(&self) -> Vec<u64> {
        match &self.run.seeds {
            Some(seeds) => seeds.clone(),
            None => (0..self.run.replications)
                .map(|r| self.run.seed.wrapping_add(r))
                .collect(),
        }
    }

    pub fn stride(&self) -> u64 {
        if self.run.stride > 0 {
            self.run.stride
        } else {
            (self.run.horizon / 1000).max(1)
        }
    }
}
