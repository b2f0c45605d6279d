//! Run configurations. Every file is TOML with a `config_version` key; all
//! other keys have defaults except the paths a command cannot guess.

use crate::error::{CliError, CliResult};
use pvudf::inference::InferenceConfig;
use pvudf::model::ModelConfig;
use pvudf::oracles::AnalyticField;
use pvudf::training::{SourceShape, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const CONFIG_VERSION: u32 = 1;

/// Reads and parses a config file, checking its version.
pub fn load<T: DeserializeOwned + Versioned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse(&text).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse<T: DeserializeOwned + Versioned>(text: &str) -> CliResult<T> {
    let cfg: T = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    if cfg.version() != CONFIG_VERSION {
        return Err(CliError::Config(format!(
            "config_version {} is not supported (expected {CONFIG_VERSION})",
            cfg.version()
        )));
    }
    Ok(cfg)
}

pub trait Versioned {
    fn version(&self) -> u32;
}

macro_rules! versioned {
    ($($t:ty),*) => {
        $(impl Versioned for $t {
            fn version(&self) -> u32 {
                self.config_version
            }
        })*
    };
}

versioned!(PrepareConfig, TrainRunConfig, ReconstructConfig, EvalConfig);

fn core(r: pvudf::Result<()>) -> CliResult<()> {
    r.map_err(|e| match e {
        pvudf::Error::InvalidConfig(m) => CliError::Config(m),
        other => other.into(),
    })
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(pvudf::Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, format!("{what} not found")),
        }
        .into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepareConfig {
    pub config_version: u32,
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_densities")]
    pub densities: Vec<usize>,
    #[serde(default = "default_resolutions")]
    pub resolutions: Vec<usize>,
    /// Query sampling settings; only the sampling keys matter here.
    #[serde(default)]
    pub queries: TrainConfig,
    pub shapes: Vec<SourceShape>,
}

fn default_densities() -> Vec<usize> {
    vec![3000]
}

fn default_resolutions() -> Vec<usize> {
    vec![64]
}

impl PrepareConfig {
    pub fn options(&self) -> pvudf::training::PrepareOptions {
        pvudf::training::PrepareOptions {
            densities: self.densities.clone(),
            resolutions: self.resolutions.clone(),
            queries: self.queries.clone(),
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        core(self.options().validate())?;
        core(pvudf::training::check_sources(&self.shapes))?;
        if self.shapes.is_empty() {
            return Err(CliError::Config("no shapes listed".into()));
        }
        // Unreadable meshes are skipped later; a missing path is a typo.
        for s in &self.shapes {
            require_file(&s.path, &format!("mesh for shape {}", s.id))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    pub config_version: u32,
    /// Prepared dataset directory.
    pub dataset: PathBuf,
    pub output: PathBuf,
    /// Input density N; the grid resolution is `model.voxel.resolution`.
    #[serde(default = "default_density")]
    pub density: usize,
    /// Trains the ablation without the point encoder.
    #[serde(default)]
    pub wp: bool,
    /// Trainer checkpoint to continue from.
    #[serde(default)]
    pub resume: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_density() -> usize {
    3000
}

impl TrainRunConfig {
    /// Model config with the `wp` flag applied.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.wp |= self.wp;
        m
    }

    pub fn validate(&self) -> CliResult<()> {
        core(self.model_config().validate())?;
        core(self.train.validate())?;
        if self.density == 0 {
            return Err(CliError::Config("density must be positive".into()));
        }
        require_file(&self.dataset.join(pvudf::training::DATASET_MANIFEST), "dataset manifest")?;
        if let Some(r) = &self.resume {
            require_file(r, "resume checkpoint")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Object,
    Scene,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    /// Window edge as a fraction of the scene extent along each axis.
    pub size_fraction: f64,
    /// Overlap between neighboring windows as a fraction of the window edge.
    pub overlap: f64,
    /// Windows with fewer input points are skipped.
    pub min_points: usize,
    /// Output points per window are this multiple of its input count.
    pub output_factor: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            size_fraction: 0.25,
            overlap: 0.1,
            min_points: 50,
            output_factor: 5,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> CliResult<()> {
        if !(self.size_fraction > 0.0 && self.size_fraction <= 1.0) {
            return Err(CliError::Config(format!("window size_fraction must be in (0, 1], got {}", self.size_fraction)));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(CliError::Config(format!("window overlap must be in [0, 1), got {}", self.overlap)));
        }
        if self.min_points == 0 || self.output_factor == 0 {
            return Err(CliError::Config("min_points and output_factor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructConfig {
    pub config_version: u32,
    /// Input cloud (.ply or .obj vertices). Optional in oracle mode, where
    /// the oracle's own mesh is sampled instead.
    #[serde(default)]
    pub input: Option<PathBuf>,
    /// Output PLY; the JSON report goes next to it unless `report` is set.
    pub output: PathBuf,
    #[serde(default)]
    pub report: Option<PathBuf>,
    /// Model or trainer checkpoint. Exactly one of this and `oracle`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Analytic field used in place of a model.
    #[serde(default)]
    pub oracle: Option<AnalyticField>,
    /// Input samples drawn from the oracle mesh when `input` is absent.
    #[serde(default = "default_oracle_samples")]
    pub oracle_samples: usize,
    /// Rejects checkpoints whose `wp` flag differs.
    #[serde(default)]
    pub expect_wp: Option<bool>,
    #[serde(default)]
    pub mode: Mode,
    /// Fits the input into the unit cube before inference and maps the
    /// output back. Turn off for clouds already in the training frame, such
    /// as prepared dataset samples. Scene windows are always normalized.
    #[serde(default = "default_true")]
    pub normalize: bool,
    #[serde(default)]
    pub inference: InferenceConfig,
    #[serde(default)]
    pub window: WindowConfig,
    /// Adds wall-clock timings to the report, making it run dependent.
    #[serde(default)]
    pub record_timings: bool,
}

fn default_true() -> bool {
    true
}

fn default_oracle_samples() -> usize {
    3000
}

impl ReconstructConfig {
    pub fn report_path(&self) -> PathBuf {
        self.report.clone().unwrap_or_else(|| self.output.with_extension("json"))
    }

    pub fn validate(&self) -> CliResult<()> {
        core(self.inference.validate())?;
        self.window.validate()?;
        match (&self.checkpoint, &self.oracle) {
            (Some(c), None) => require_file(c, "checkpoint")?,
            (None, Some(f)) => {
                core(f.validate())?;
                if self.mode == Mode::Scene {
                    return Err(CliError::Config("scene mode needs a checkpoint".into()));
                }
            }
            _ => return Err(CliError::Config("set exactly one of checkpoint and oracle".into())),
        }
        match &self.input {
            Some(p) => require_file(p, "input cloud")?,
            None if self.oracle.is_some() => {
                if self.oracle_samples == 0 {
                    return Err(CliError::Config("oracle_samples must be positive".into()));
                }
            }
            None => return Err(CliError::Config("input is required with a checkpoint".into())),
        }
        if self.report_path() == self.output {
            return Err(CliError::Config("report and output paths coincide".into()));
        }
        Ok(())
    }
}

/// One reconstruction to score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalPair {
    pub id: String,
    pub reconstruction: PathBuf,
    /// Ground-truth mesh (sampled, and used for outlier rates) or point cloud.
    pub ground_truth: PathBuf,
    /// Input cloud, enabling the bounding-box filter comparison.
    #[serde(default)]
    pub input: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub config_version: u32,
    pub output: PathBuf,
    pub pairs: Vec<EvalPair>,
    /// F-score thresholds as fractions of the ground-truth diagonal.
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<f64>,
    /// Surface samples drawn from ground-truth meshes.
    #[serde(default = "default_gt_samples")]
    pub gt_samples: usize,
    #[serde(default = "default_outlier_threshold")]
    pub outlier_threshold: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_thresholds() -> Vec<f64> {
    vec![0.001, 0.0005]
}

fn default_gt_samples() -> usize {
    100_000
}

fn default_outlier_threshold() -> f64 {
    0.02
}

impl EvalConfig {
    pub fn validate(&self) -> CliResult<()> {
        if self.pairs.is_empty() {
            return Err(CliError::Config("no pairs to evaluate".into()));
        }
        if self.thresholds.is_empty() || self.thresholds.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(CliError::Config("thresholds must be a non-empty list of positive fractions".into()));
        }
        if self.gt_samples == 0 || !(self.outlier_threshold > 0.0) {
            return Err(CliError::Config("gt_samples and outlier_threshold must be positive".into()));
        }
        let mut ids = std::collections::BTreeSet::new();
        for p in &self.pairs {
            if p.id.is_empty() || p.id.contains([',', '\n', '"']) || !ids.insert(&p.id) {
                return Err(CliError::Config(format!("pair id {:?} is empty, duplicated or not CSV safe", p.id)));
            }
            require_file(&p.reconstruction, "reconstruction")?;
            require_file(&p.ground_truth, "ground truth")?;
            if let Some(i) = &p.input {
                require_file(i, "input cloud")?;
            }
        }
        Ok(())
    }
}
