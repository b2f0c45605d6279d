//! Query generation, the clamped L1 regression loss, Adam and the training
//! loop with checkpointing and resume.

mod adam;
mod dataset;
mod loss;
mod queries;
mod trainer;

pub use adam::Adam;
pub use dataset::{
    check_sources, load_shapes, prepare_dataset, shape_seed, DatasetManifest, DensityFile, GridFile, PrepareOptions, PrepareOutcome,
    ShapeRecord, SkippedShape, SourceShape, Split, DATASET_MANIFEST, DATASET_VERSION,
};
pub use loss::{clamped_loss, clamped_loss_grad};
pub use queries::{generate_training_queries, QueryBatch, QUERY_BOUND};
pub use trainer::{LossRecord, StopReason, TrainSummary, Trainer, TrainingShape, LOSS_CSV};

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Optimization and query-sampling settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Clamp distance in normalized units.
    pub delta: f64,
    /// Shapes per step (capped by the number of training shapes).
    pub batch_size: usize,
    /// Queries drawn per shape per step.
    pub queries_per_batch: usize,
    pub learning_rate: f64,
    pub queries_per_shape: usize,
    /// Standard deviations of the near-surface displacement.
    pub perturbation_sigmas: Vec<f64>,
    /// Relative frequency of each sigma.
    pub sigma_weights: Vec<f64>,
    /// Fraction of queries drawn uniformly in the unit cube.
    pub uniform_fraction: f64,
    pub max_steps: u64,
    pub seed: u64,
    /// Steps between validation evaluations.
    pub eval_every: u64,
    /// Validation queries used per shape.
    pub val_queries: usize,
    /// Early stop after this many evaluations without improvement.
    pub patience: usize,
    pub checkpoint_every: u64,
    /// Share of each shape's queries held out for validation when no
    /// validation shapes exist.
    pub holdout_fraction: f64,
    /// Optional wall-clock budget in seconds.
    pub max_seconds: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            delta: 0.1,
            batch_size: 4,
            queries_per_batch: 1024,
            learning_rate: 1e-6,
            queries_per_shape: 50_000,
            perturbation_sigmas: vec![0.003, 0.01, 0.1],
            sigma_weights: vec![0.4, 0.4, 0.2],
            uniform_fraction: 0.05,
            max_steps: 100_000,
            seed: 0,
            eval_every: 100,
            val_queries: 4096,
            patience: 20,
            checkpoint_every: 500,
            holdout_fraction: 0.1,
            max_seconds: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad(format!("delta must be positive, got {}", self.delta));
        }
        if self.batch_size == 0 || self.queries_per_batch == 0 || self.queries_per_shape == 0 {
            return bad("batch_size, queries_per_batch and queries_per_shape must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be non-negative, got {}", self.learning_rate));
        }
        if self.perturbation_sigmas.is_empty() || self.perturbation_sigmas.len() != self.sigma_weights.len() {
            return bad("perturbation_sigmas and sigma_weights must be non-empty and of equal length".into());
        }
        if self.perturbation_sigmas.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return bad("perturbation sigmas must lie in [0, 1]".into());
        }
        if self.sigma_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || self.sigma_weights.iter().sum::<f64>() <= 0.0 {
            return bad("sigma_weights must be non-negative with a positive sum".into());
        }
        if !(0.0..=1.0).contains(&self.uniform_fraction) {
            return bad("uniform_fraction must lie in [0, 1]".into());
        }
        if self.eval_every == 0 || self.checkpoint_every == 0 || self.val_queries == 0 {
            return bad("eval_every, checkpoint_every and val_queries must be at least 1".into());
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return bad("holdout_fraction must lie in (0, 1)".into());
        }
        if let Some(s) = self.max_seconds {
            if !(s > 0.0) {
                return bad("max_seconds must be positive".into());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn bad_values_are_rejected() {
        let cases: Vec<fn(&mut TrainConfig)> = vec![
            |c| c.delta = 0.0,
            |c| c.sigma_weights.pop().map(|_| ()).unwrap_or(()),
            |c| c.learning_rate = -1.0,
            |c| c.holdout_fraction = 1.0,
            |c| c.batch_size = 0,
        ];
        for f in cases {
            let mut c = TrainConfig::default();
            f(&mut c);
            assert!(c.validate().is_err());
        }
    }
}
