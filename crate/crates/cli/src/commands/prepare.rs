use crate::config::PrepareConfig;
use crate::error::CliResult;
use crate::lock::DirLock;
use pvudf::training::prepare_dataset;

pub fn run(cfg: &PrepareConfig) -> CliResult<()> {
    cfg.validate()?;
    let _lock = DirLock::acquire(&cfg.output)?;
    let outcome = prepare_dataset(&cfg.shapes, &cfg.output, &cfg.options())?;
    for s in &outcome.skipped {
        log::warn!("skipped shape {}: {}", s.id, s.reason);
    }
    log::info!(
        "prepared {} of {} shapes into {}",
        outcome.manifest.shapes.len(),
        cfg.shapes.len(),
        cfg.output.display()
    );
    Ok(())
}
