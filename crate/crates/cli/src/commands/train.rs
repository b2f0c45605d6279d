use crate::config::TrainRunConfig;
use crate::error::{CliError, CliResult};
use crate::lock::DirLock;
use pvudf::diff::checkpoint::Checkpoint;
use pvudf::training::{load_shapes, DatasetManifest, Split, TrainSummary, Trainer};

pub fn run(cfg: &TrainRunConfig) -> CliResult<TrainSummary> {
    cfg.validate()?;
    let model_cfg = cfg.model_config();
    let manifest = DatasetManifest::load(&cfg.dataset)?;
    let m = model_cfg.voxel.resolution;
    let train = load_shapes(&cfg.dataset, &manifest, Split::Train, cfg.density, m)?;
    let val = load_shapes(&cfg.dataset, &manifest, Split::Val, cfg.density, m)?;
    if train.is_empty() {
        return Err(CliError::Config(format!("dataset {} has no training shapes", cfg.dataset.display())));
    }
    let mut trainer = match &cfg.resume {
        Some(path) => {
            let t = Trainer::from_checkpoint(&Checkpoint::load(path)?)?;
            if *t.model.config() != model_cfg {
                return Err(CliError::Config(format!(
                    "checkpoint {} was trained with a different model config",
                    path.display()
                )));
            }
            let mut t = t;
            t.cfg = cfg.train.clone();
            t
        }
        None => Trainer::new(model_cfg, cfg.train.clone())?,
    };
    let _lock = DirLock::acquire(&cfg.output)?;
    log::info!(
        "training {} shapes ({} val) at N={} M={m}, {} parameters{}",
        train.len(),
        val.len(),
        cfg.density,
        trainer.model.num_params(),
        if cfg.model_config().wp { ", wp" } else { "" }
    );
    let summary = trainer.fit(&train, &val, Some(&cfg.output))?;
    log::info!(
        "stopped after {} steps ({:?}), best val {:?}",
        summary.steps,
        summary.stop,
        summary.best_val_loss
    );
    Ok(summary)
}
