//! Experiment configuration: TOML files with per-study sections. Every
//! field has a default reproducing the standard desk-scale protocols, so an
//! empty file is a valid config.

use crate::battery::PhysicalConstants;
use crate::grid::GeometrySpec;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Geometry section: either a pre-generated geometry file or generation
/// parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometryConfig {
    /// Optional path to an existing geometry file; takes precedence over
    /// the generation parameters below.
    pub file: Option<PathBuf>,
    pub dims: [usize; 3],
    pub voxel_size_cm: [f64; 3],
    pub layers: [usize; 5],
    pub porosity: f64,
    pub seed: u64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        let s = GeometrySpec::default();
        GeometryConfig {
            file: None,
            dims: s.dims,
            voxel_size_cm: s.voxel_size,
            layers: s.layers,
            porosity: s.porosity,
            seed: s.seed,
        }
    }
}

impl GeometryConfig {
    pub fn to_spec(&self) -> GeometrySpec {
        GeometrySpec {
            dims: self.dims,
            voxel_size: self.voxel_size_cm,
            layers: self.layers,
            porosity: self.porosity,
            seed: self.seed,
        }
    }
}

/// Battery ROM study: training/test protocol and the (k, M) sweep grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BatteryStudyConfig {
    /// Applied current density interval [A/cm^2].
    pub mu_min: f64,
    pub mu_max: f64,
    pub dt_s: f64,
    pub t_end_s: f64,
    /// Equidistant training parameters.
    pub n_train: usize,
    /// Seeded uniform random test parameters.
    pub n_test: usize,
    pub test_seed: u64,
    /// Reduced dimensions per field (k_c = k_phi = k).
    pub k_grid: Vec<usize>,
    /// Interpolation point counts per nonlinear operator part.
    pub m_grid: Vec<usize>,
    /// Training-set size for the sparse-training stagnation variant.
    pub n_train_sparse: usize,
}

impl Default for BatteryStudyConfig {
    fn default() -> Self {
        BatteryStudyConfig {
            mu_min: 0.00012,
            mu_max: 0.0012,
            dt_s: 20.0,
            t_end_s: 2000.0,
            n_train: 20,
            n_test: 20,
            test_seed: 20210531,
            k_grid: vec![5, 10, 20, 30, 40],
            m_grid: vec![40, 80, 120, 160],
            n_train_sparse: 2,
        }
    }
}

/// Heat LRBMS study parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HeatStudyConfig {
    /// Electrolyte conductivity parameter interval.
    pub mu_min: f64,
    pub mu_max: f64,
    /// Equidistant training parameters.
    pub n_train: usize,
    pub dt_s: f64,
    pub n_steps: usize,
    /// Greedy stops when max training error dropped by this relative factor.
    pub target_error_factor: f64,
    pub max_extensions: usize,
    pub blocks: [usize; 3],
    /// Placeholder solid conductivities (negative collector, positive
    /// collector, electrodes).
    pub cond_neg_cc: f64,
    pub cond_pos_cc: f64,
    pub cond_electrode: f64,
}

impl Default for HeatStudyConfig {
    fn default() -> Self {
        HeatStudyConfig {
            mu_min: 0.1,
            mu_max: 10.0,
            n_train: 5,
            dt_s: 1e-4,
            n_steps: 10,
            target_error_factor: 1e-8,
            max_extensions: 40,
            blocks: [4, 2, 2],
            cond_neg_cc: 3.8,
            cond_pos_cc: 2.4,
            cond_electrode: 0.05,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub geometry: GeometryConfig,
    pub constants: PhysicalConstants,
    pub battery: BatteryStudyConfig,
    pub heat: HeatStudyConfig,
    /// Output directory; CLI --out overrides.
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: ExperimentConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.battery.mu_min < self.battery.mu_max) {
            return Err(ConfigError::Invalid(format!(
                "battery mu interval [{}, {}] empty",
                self.battery.mu_min, self.battery.mu_max
            )));
        }
        if !(self.heat.mu_min < self.heat.mu_max) {
            return Err(ConfigError::Invalid(format!(
                "heat mu interval [{}, {}] empty",
                self.heat.mu_min, self.heat.mu_max
            )));
        }
        if self.battery.k_grid.is_empty() || self.battery.m_grid.is_empty() {
            return Err(ConfigError::Invalid("empty k/M sweep grid".into()));
        }
        if self.battery.dt_s <= 0.0 || self.battery.t_end_s <= 0.0 {
            return Err(ConfigError::Invalid("battery dt/T must be positive".into()));
        }
        if self.battery.n_train < 1 || self.heat.n_train < 1 {
            return Err(ConfigError::Invalid("need at least one training parameter".into()));
        }
        if self.heat.n_steps == 0 || self.heat.dt_s <= 0.0 {
            return Err(ConfigError::Invalid("heat time grid empty".into()));
        }
        Ok(())
    }
}

/// n equidistant values spanning [lo, hi] inclusive (single value = lo).
pub fn equidistant(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}
