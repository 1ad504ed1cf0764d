//! Fit configuration read from TOML, with command-line overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use samsel::basis::{NvcKind, DEFAULT_L_MAX, DEFAULT_NVC_SIZE};
use samsel::selection::CostKind;
use samsel::terms::EffectType;

use crate::data::Schema;
use crate::error::{io_err, CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Fit the configured types without selection.
    None,
    Simple,
    Mc,
}

impl FromStr for Mode {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Mode::None),
            "simple" => Ok(Mode::Simple),
            "mc" => Ok(Mode::Mc),
            other => Err(CliError::Config(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub accept: f64,
    pub outer: f64,
    pub max_sweeps: usize,
    /// Relative likelihood tolerance of the variance search.
    pub optim: f64,
    pub max_evals: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            accept: 1e-6,
            outer: 1e-5,
            max_sweeps: 30,
            optim: 1e-6,
            max_evals: 500,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    /// Input file; relative paths are taken from the config file's directory.
    #[serde(default)]
    pub data_path: Option<PathBuf>,
    pub data: Schema,
    /// Proximity range; the largest nearest-neighbour distance when absent.
    #[serde(default)]
    pub range: Option<f64>,
    #[serde(default = "default_l_max")]
    pub l_max: usize,
    #[serde(default)]
    pub nvc_kind: NvcKind,
    #[serde(default = "default_nvc_size")]
    pub nvc_size: usize,
    /// Candidate types of the intercept.
    #[serde(default = "default_intercept")]
    pub intercept: Vec<EffectType>,
    /// Candidate types for covariates not listed in `types`.
    #[serde(default = "default_types")]
    pub default_types: Vec<EffectType>,
    #[serde(default)]
    pub types: BTreeMap<String, Vec<EffectType>>,
    #[serde(default)]
    pub cost: CostKind,
    #[serde(default)]
    pub mode: Option<Mode>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tolerances: Tolerances,
}

fn default_l_max() -> usize {
    DEFAULT_L_MAX
}

fn default_nvc_size() -> usize {
    DEFAULT_NVC_SIZE
}

fn default_intercept() -> Vec<EffectType> {
    vec![EffectType::Constant, EffectType::Svc]
}

fn default_types() -> Vec<EffectType> {
    EffectType::ALL.to_vec()
}

fn default_replicates() -> usize {
    30
}

fn default_workers() -> usize {
    1
}

impl FitConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: FitConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(p), Some(dir)) = (cfg.data_path.as_ref(), path.parent()) {
            if p.is_relative() {
                cfg.data_path = Some(dir.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.tolerances;
        if !(t.accept > 0.0 && t.outer > 0.0 && t.optim > 0.0) {
            return Err(CliError::Config("all tolerances must be positive".into()));
        }
        if t.max_sweeps == 0 || t.max_evals == 0 {
            return Err(CliError::Config("max_sweeps and max_evals must be positive".into()));
        }
        if self.mode == Some(Mode::Mc) && self.replicates == 0 {
            return Err(CliError::Config("mc mode needs at least one replicate".into()));
        }
        if self.workers == 0 {
            return Err(CliError::Config("workers must be at least 1".into()));
        }
        if let Some(r) = self.range {
            if !(r > 0.0 && r.is_finite()) {
                return Err(CliError::Config("range must be positive".into()));
            }
        }
        if self.l_max == 0 || self.nvc_size == 0 {
            return Err(CliError::Config("l_max and nvc_size must be positive".into()));
        }
        for name in self.types.keys() {
            if !self.data.covariates.contains(name) {
                return Err(CliError::Config(format!("`types` names unknown covariate `{name}`")));
            }
        }
        Ok(())
    }

    pub fn candidates(&self, covariate: &str) -> &[EffectType] {
        self.types.get(covariate).map_or(&self.default_types, |v| v)
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub data: Option<PathBuf>,
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub replicates: Option<usize>,
    pub cost: Option<CostKind>,
    pub workers: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut FitConfig) {
        if let Some(d) = &self.data {
            cfg.data_path = Some(d.clone());
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.mode {
            cfg.mode = Some(m);
        }
        if let Some(g) = self.replicates {
            cfg.replicates = g;
        }
        if let Some(c) = self.cost {
            cfg.cost = c;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
    }
}
