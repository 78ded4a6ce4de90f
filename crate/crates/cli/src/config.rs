//! JSON run configuration.

use std::path::{Path, PathBuf};

use dbps_core::dbps::{BetweenTable, DEFAULT_DRAWS, DEFAULT_FOLDS, DEFAULT_SUBSET_SIZE};
use dbps_core::diagnostics::VariogramOptions;
use dbps_core::WeightMethod;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum GridSource {
    /// Variogram fits per outcome, spread into `alpha_count × phi_count` values.
    Auto {
        #[serde(default = "three")]
        alpha_count: usize,
        #[serde(default = "three")]
        phi_count: usize,
    },
    /// Cartesian product of the listed values.
    Explicit { alpha: Vec<f64>, phi: Vec<f64> },
}

fn three() -> usize {
    3
}

impl Default for GridSource {
    fn default() -> Self {
        GridSource::Auto {
            alpha_count: 3,
            phi_count: 3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub m0: Option<Vec<Vec<f64>>>,
    pub big_m0: Option<Vec<Vec<f64>>>,
    pub psi0: Option<Vec<Vec<f64>>>,
    pub nu0: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthConfig {
    pub alpha: f64,
    pub phi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseConfig {
    pub truth: TruthConfig,
    #[serde(default = "default_l_mc")]
    pub l_mc: usize,
    /// Locations (and predictors) at which predictive densities are
    /// compared; defaults to `prediction_input`.
    #[serde(default)]
    pub eval_input: Option<PathBuf>,
}

fn default_l_mc() -> usize {
    1000
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    Sim3,
    Sim4,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub design: Design,
    pub n: usize,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub phi: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariogramConfig {
    #[serde(default = "default_bins")]
    pub n_bins: usize,
    #[serde(default = "default_frac")]
    pub max_dist_frac: f64,
    #[serde(default = "default_cap")]
    pub subsample_cap: usize,
}

fn default_bins() -> usize {
    15
}
fn default_frac() -> f64 {
    0.5
}
fn default_cap() -> usize {
    50_000
}

impl Default for VariogramConfig {
    fn default() -> Self {
        Self {
            n_bins: default_bins(),
            max_dist_frac: default_frac(),
            subsample_cap: default_cap(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub input: Option<PathBuf>,
    #[serde(default)]
    pub coords: Vec<String>,
    #[serde(default)]
    pub outcomes: Vec<String>,
    #[serde(default)]
    pub predictors: Vec<String>,
    #[serde(default = "yes")]
    pub intercept: bool,
    /// Number of subsets; when absent, ceil(n / subset_size).
    #[serde(default)]
    pub subsets: Option<usize>,
    #[serde(default = "default_subset_size")]
    pub subset_size: usize,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub grid: GridSource,
    #[serde(default)]
    pub weight_method: WeightMethod,
    #[serde(default)]
    pub between_table: BetweenTable,
    #[serde(default = "default_draws")]
    pub draws: usize,
    pub seed: u64,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(default)]
    pub variogram: VariogramConfig,
    #[serde(default)]
    pub model_dir: Option<PathBuf>,
    #[serde(default)]
    pub prediction_input: Option<PathBuf>,
    #[serde(default)]
    pub diagnose: Option<DiagnoseConfig>,
    #[serde(default)]
    pub simulate: Option<SimulateConfig>,
}

fn yes() -> bool {
    true
}
fn default_subset_size() -> usize {
    DEFAULT_SUBSET_SIZE
}
fn default_folds() -> usize {
    DEFAULT_FOLDS
}
fn default_draws() -> usize {
    DEFAULT_DRAWS
}

impl RunConfig {
    /// Parse a config file; relative paths are resolved against its directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.input);
        fix(&mut self.output);
        fix(&mut self.model_dir);
        fix(&mut self.prediction_input);
        if let Some(d) = &mut self.diagnose {
            fix(&mut d.eval_input);
        }
    }

    pub fn output_dir(&self) -> CliResult<PathBuf> {
        self.output
            .clone()
            .ok_or_else(|| CliError::Config("no output directory (set \"output\" or pass --output)".into()))
    }

    pub fn model_path(&self) -> CliResult<PathBuf> {
        match &self.model_dir {
            Some(p) => Ok(p.clone()),
            None => Ok(self.output_dir()?.join("model")),
        }
    }

    pub fn input_path(&self) -> CliResult<&Path> {
        self.input
            .as_deref()
            .ok_or_else(|| CliError::Config("missing \"input\"".into()))
    }

    /// Check the keys the data commands need.
    pub fn require_columns(&self) -> CliResult<()> {
        if self.coords.len() != 2 {
            return Err(CliError::Config("\"coords\" must name exactly two columns".into()));
        }
        if self.outcomes.is_empty() {
            return Err(CliError::Config("\"outcomes\" must name at least one column".into()));
        }
        if self.predictors.is_empty() && !self.intercept {
            return Err(CliError::Config("the design has no columns".into()));
        }
        Ok(())
    }

    pub fn variogram_options(&self) -> VariogramOptions {
        VariogramOptions {
            n_bins: self.variogram.n_bins,
            max_dist_frac: self.variogram.max_dist_frac,
            subsample_cap: self.variogram.subsample_cap,
            seed: self.seed,
        }
    }

    /// The settings that affect results, as JSON: output locations and the
    /// worker count are removed.
    fn canonical(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            for k in ["output", "workers", "model_dir"] {
                map.remove(k);
            }
        }
        v
    }

    /// SHA-256 of the canonical JSON (object keys sorted).
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(&self.canonical()).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// The effective configuration with defaults filled in and its hash.
    pub fn echo(&self) -> String {
        let mut v = self.canonical();
        if let Some(map) = v.as_object_mut() {
            map.insert("config_hash".into(), self.hash().into());
        }
        serde_json::to_string_pretty(&v).expect("value serializes") + "\n"
    }
}
