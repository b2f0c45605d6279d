use crate::config::{Mode, ReconstructConfig, WindowConfig};
use crate::error::{CliError, CliResult};
use crate::lock::DirLock;
use crate::write_atomic;
use pvudf::diff::checkpoint::Checkpoint;
use pvudf::geom::io::read_geometry;
use pvudf::geom::{normalize_cloud, sample_surface_points, Aabb, PointCloud, Vec3};
use pvudf::inference::{infer_surface, infer_with_model, InferenceConfig, ReconstructionReport, StageCounts, StageTimings};
use pvudf::model::UdfModel;
use pvudf::training::shape_seed;
use pvudf::Error;
use serde::Serialize;
use std::path::Path;

#[derive(Clone, Debug, Serialize)]
pub struct WindowRecord {
    pub index: usize,
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub input_points: usize,
    pub output_points: usize,
    /// Why the window produced nothing, if it did not.
    pub skipped: Option<String>,
}

/// The JSON report written next to the output cloud.
#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub mode: Mode,
    pub source: String,
    pub input_points: usize,
    pub output_points: usize,
    /// Stage counts summed over windows.
    pub counts: StageCounts,
    /// Final field values in the normalized frame the field was evaluated in.
    pub max_residual: f64,
    pub mean_residual: f64,
    pub windows: Vec<WindowRecord>,
    pub timings: Option<Vec<StageTimings>>,
}

pub struct Reconstruction {
    pub points: Vec<Vec3>,
    pub residuals: Vec<f64>,
    pub report: RunReport,
}

/// Overlapping axis-aligned windows tiling `bounds`. Along each axis the edge
/// is `size_fraction` of the extent and neighbors share `overlap` of an edge;
/// the last window is pulled back to end on the upper bound.
pub fn scene_windows(bounds: &Aabb, cfg: &WindowConfig) -> Vec<Aabb> {
    let ext = bounds.extent();
    let axis = |a: usize| -> Vec<(f64, f64)> {
        let (lo, hi) = (bounds.min[a], bounds.max[a]);
        let w = ext[a] * cfg.size_fraction;
        if w <= 0.0 || cfg.size_fraction >= 1.0 {
            return vec![(lo, hi)];
        }
        let stride = w * (1.0 - cfg.overlap);
        let n = ((ext[a] - w) / stride - 1e-9).ceil().max(0.0) as usize + 1;
        (0..n)
            .map(|i| {
                let s = (lo + i as f64 * stride).min(hi - w);
                (s, if i + 1 == n { hi } else { s + w })
            })
            .collect()
    };
    let (xs, ys, zs) = (axis(0), axis(1), axis(2));
    let mut out = Vec::with_capacity(xs.len() * ys.len() * zs.len());
    for x in &xs {
        for y in &ys {
            for z in &zs {
                out.push(Aabb {
                    min: Vec3::new(x.0, y.0, z.0),
                    max: Vec3::new(x.1, y.1, z.1),
                });
            }
        }
    }
    out
}

fn read_cloud(path: &Path) -> CliResult<PointCloud> {
    Ok(read_geometry(path)?.into_cloud()?)
}

fn load_model(cfg: &ReconstructConfig, path: &Path) -> CliResult<UdfModel<f32>> {
    let model = UdfModel::<f32>::from_checkpoint(&Checkpoint::load(path)?)?;
    if let Some(wp) = cfg.expect_wp {
        if model.config().wp != wp {
            return Err(CliError::Config(format!(
                "checkpoint {} has wp = {}, config expects {wp}",
                path.display(),
                model.config().wp
            )));
        }
    }
    if !model.stats_ready() {
        return Err(Error::InvalidState(format!("checkpoint {} has no normalization statistics", path.display())).into());
    }
    Ok(model)
}

/// Normalizes `cloud`, extracts the surface with the model and maps the result back.
fn model_pass(model: &UdfModel<f32>, cloud: &PointCloud, icfg: &InferenceConfig) -> pvudf::Result<(Vec<Vec3>, ReconstructionReport)> {
    let (norm, t) = normalize_cloud(cloud)?;
    let r = infer_with_model(model, &norm, icfg)?;
    Ok((r.output.iter().map(|p| t.invert(p)).collect(), r))
}

fn add_counts(total: &mut StageCounts, c: &StageCounts) {
    total.input += c.input;
    total.seeds += c.seeds;
    total.first_survivors += c.first_survivors;
    total.first_removed += c.first_removed;
    total.resampled += c.resampled;
    total.final_survivors += c.final_survivors;
    total.final_removed += c.final_removed;
}

/// Runs the reconstruction without writing anything.
pub fn reconstruct(cfg: &ReconstructConfig) -> CliResult<Reconstruction> {
    cfg.validate()?;
    let mut points = Vec::new();
    let mut residuals = Vec::new();
    let mut counts = StageCounts::default();
    let mut windows = Vec::new();
    let mut timings = Vec::new();
    let (source, input_points) = match (&cfg.oracle, &cfg.checkpoint) {
        (Some(field), _) => {
            let input = match &cfg.input {
                Some(p) => read_cloud(p)?,
                None => sample_surface_points(&field.make_mesh(4)?.mesh, cfg.oracle_samples, cfg.inference.seed)?,
            };
            let r = infer_surface(field, input.points(), &cfg.inference)?;
            add_counts(&mut counts, &r.counts);
            timings.push(r.timings);
            points = r.output;
            residuals = r.residuals;
            (format!("oracle:{}", field.name()), input.len())
        }
        (None, Some(ck)) => {
            let model = load_model(cfg, ck)?;
            let input = read_cloud(cfg.input.as_ref().expect("validated"))?;
            match cfg.mode {
                Mode::Object if !cfg.normalize => {
                    let r = infer_with_model(&model, &input, &cfg.inference)?;
                    add_counts(&mut counts, &r.counts);
                    timings.push(r.timings);
                    points = r.output;
                    residuals = r.residuals;
                }
                Mode::Object => {
                    let (pts, r) = model_pass(&model, &input, &cfg.inference)?;
                    add_counts(&mut counts, &r.counts);
                    timings.push(r.timings);
                    points = pts;
                    residuals = r.residuals;
                }
                Mode::Scene => {
                    for (index, w) in scene_windows(&input.bounds(), &cfg.window).into_iter().enumerate() {
                        let inside: Vec<Vec3> = input.points().iter().filter(|p| w.contains(p)).copied().collect();
                        let mut rec = WindowRecord {
                            index,
                            min: w.min.into(),
                            max: w.max.into(),
                            input_points: inside.len(),
                            output_points: 0,
                            skipped: None,
                        };
                        if inside.len() < cfg.window.min_points {
                            log::info!("window {index}: {} points, below the minimum of {}", inside.len(), cfg.window.min_points);
                            rec.skipped = Some(format!("fewer than {} points", cfg.window.min_points));
                            windows.push(rec);
                            continue;
                        }
                        let icfg = InferenceConfig {
                            out_res: cfg.window.output_factor * inside.len(),
                            seed: shape_seed(cfg.inference.seed, index),
                            ..cfg.inference.clone()
                        };
                        match model_pass(&model, &PointCloud::new(inside)?, &icfg) {
                            Ok((pts, r)) => {
                                rec.output_points = pts.len();
                                add_counts(&mut counts, &r.counts);
                                timings.push(r.timings);
                                points.extend(pts);
                                residuals.extend(r.residuals);
                            }
                            Err(e @ (Error::EmptySurvivors { .. } | Error::DegenerateInput(_))) => {
                                log::warn!("window {index}: {e}");
                                rec.skipped = Some(e.to_string());
                            }
                            Err(e) => return Err(e.into()),
                        }
                        windows.push(rec);
                    }
                    if points.is_empty() {
                        return Err(Error::EmptySurvivors {
                            stage: "window",
                            detail: "no window produced output points".into(),
                        }
                        .into());
                    }
                }
            }
            (format!("checkpoint:{}", ck.display()), input.len())
        }
        (None, None) => unreachable!("validated"),
    };
    let n = residuals.len().max(1) as f64;
    let report = RunReport {
        mode: cfg.mode,
        source,
        input_points,
        output_points: points.len(),
        counts,
        max_residual: residuals.iter().cloned().fold(0.0, f64::max),
        mean_residual: residuals.iter().sum::<f64>() / n,
        windows,
        timings: cfg.record_timings.then_some(timings),
    };
    Ok(Reconstruction { points, residuals, report })
}

pub fn run(cfg: &ReconstructConfig) -> CliResult<RunReport> {
    cfg.validate()?;
    let dir = cfg.output.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let _lock = DirLock::acquire(dir)?;
    let r = reconstruct(cfg)?;
    let mut ply = Vec::new();
    pvudf::geom::io::write_ply_points(&r.points, &[("residual", &r.residuals)], &mut ply)?;
    write_atomic(&cfg.output, &ply)?;
    let json = serde_json::to_string_pretty(&r.report).expect("report serializes");
    write_atomic(&cfg.report_path(), json.as_bytes())?;
    log::info!("{} points written to {}", r.points.len(), cfg.output.display());
    Ok(r.report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> Aabb {
        Aabb {
            min: Vec3::zeros(),
            max: Vec3::new(1.0, 1.0, 1.0),
        }
    }

    #[test]
    fn default_windows_tile_the_scene_with_overlap() {
        let ws = scene_windows(&unit(), &WindowConfig::default());
        // Edge 0.25, stride 0.225: 5 windows per axis.
        assert_eq!(ws.len(), 125);
        assert!((ws[0].max.x - 0.25).abs() < 1e-12);
        assert!((ws[25].min.x - 0.225).abs() < 1e-12);
        let last = ws.last().unwrap();
        assert_eq!(last.max, Vec3::new(1.0, 1.0, 1.0));
        // Every point of the scene is covered.
        for i in 0..=20 {
            let p = Vec3::new(i as f64 / 20.0, 0.37, 0.91);
            assert!(ws.iter().any(|w| w.contains(&p)));
        }
    }

    #[test]
    fn flat_axis_gets_one_window() {
        let b = Aabb {
            min: Vec3::zeros(),
            max: Vec3::new(1.0, 1.0, 0.0),
        };
        assert_eq!(scene_windows(&b, &WindowConfig::default()).len(), 25);
    }
}
