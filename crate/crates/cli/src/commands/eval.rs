use crate::config::{EvalConfig, EvalPair};
use crate::error::CliResult;
use crate::lock::DirLock;
use crate::write_atomic;
use pvudf::geom::io::read_geometry;
use pvudf::geom::{sample_surface_points, DistanceIndex, Vec3};
use pvudf::inference::{naive_outlier_filter, outlier_rate};
use pvudf::metrics::{chamfer_l2, evaluate, nearest_squared_distances, KdTree, MetricReport};
use pvudf::training::shape_seed;
use std::path::Path;

#[derive(Clone, Debug)]
pub struct PairResult {
    pub id: String,
    pub points: usize,
    pub metrics: MetricReport,
    pub outlier_rate: f64,
    pub naive: Option<NaiveFilter>,
}

/// The reconstruction after the input bounding-box filter.
#[derive(Clone, Debug)]
pub struct NaiveFilter {
    pub removed: usize,
    /// Absent when the filter removes everything.
    pub chamfer_mean: Option<f64>,
    pub outlier_rate: f64,
}

struct GroundTruth {
    points: Vec<Vec3>,
    index: Option<DistanceIndex>,
}

impl GroundTruth {
    fn load(path: &Path, samples: usize, seed: u64) -> CliResult<Self> {
        let raw = read_geometry(path)?;
        if raw.polygons.is_empty() {
            return Ok(GroundTruth {
                points: raw.into_cloud()?.into_points(),
                index: None,
            });
        }
        let mesh = raw.into_mesh()?;
        let points = sample_surface_points(&mesh, samples, seed)?.into_points();
        Ok(GroundTruth {
            points,
            index: Some(DistanceIndex::from_mesh(mesh)),
        })
    }

    /// Falls back to the nearest ground-truth sample without a mesh.
    fn outlier_rate(&self, pts: &[Vec3], threshold: f64) -> f64 {
        match &self.index {
            Some(idx) => outlier_rate(pts, idx, threshold),
            None if pts.is_empty() => 0.0,
            None => {
                let d2 = nearest_squared_distances(pts, &KdTree::build(&self.points));
                d2.iter().filter(|&&d| d > threshold * threshold).count() as f64 / pts.len() as f64
            }
        }
    }
}

pub fn evaluate_pair(cfg: &EvalConfig, index: usize, pair: &EvalPair) -> CliResult<PairResult> {
    let recon = read_geometry(&pair.reconstruction)?.into_cloud()?.into_points();
    let gt = GroundTruth::load(&pair.ground_truth, cfg.gt_samples, shape_seed(cfg.seed, index))?;
    let metrics = evaluate(&recon, &gt.points, &cfg.thresholds)?;
    let naive = match &pair.input {
        None => None,
        Some(p) => {
            let input = read_geometry(p)?.into_cloud()?.into_points();
            let kept = naive_outlier_filter(&recon, &input);
            Some(NaiveFilter {
                removed: recon.len() - kept.len(),
                chamfer_mean: if kept.is_empty() { None } else { Some(chamfer_l2(&kept, &gt.points)?.mean) },
                outlier_rate: gt.outlier_rate(&kept, cfg.outlier_threshold),
            })
        }
    };
    Ok(PairResult {
        id: pair.id.clone(),
        points: recon.len(),
        outlier_rate: gt.outlier_rate(&recon, cfg.outlier_threshold),
        metrics,
        naive,
    })
}

fn header(thresholds: &[f64]) -> String {
    let mut h = String::from("id,points,chamfer_mean,chamfer_mean_e4,chamfer_sum");
    for t in thresholds {
        h.push_str(&format!(",precision@{t},recall@{t},fscore@{t}"));
    }
    h.push_str(",outlier_rate,naive_removed,naive_chamfer_mean,naive_outlier_rate");
    h
}

fn row(id: &str, cells: &[Option<f64>]) -> String {
    let mut s = id.to_string();
    for c in cells {
        s.push(',');
        if let Some(v) = c {
            s.push_str(&v.to_string());
        }
    }
    s
}

fn cells(r: &PairResult) -> Vec<Option<f64>> {
    let m = &r.metrics;
    let mut c = vec![Some(r.points as f64), Some(m.chamfer_mean), Some(m.chamfer_mean_e4), Some(m.chamfer_sum)];
    for s in &m.scores {
        c.extend([Some(s.precision), Some(s.recall), Some(s.fscore)]);
    }
    c.push(Some(r.outlier_rate));
    match &r.naive {
        Some(n) => c.extend([Some(n.removed as f64), n.chamfer_mean, Some(n.outlier_rate)]),
        None => c.extend([None, None, None]),
    }
    c
}

/// CSV with one row per pair and a final `mean` row over the available values.
pub fn to_csv(thresholds: &[f64], results: &[PairResult]) -> String {
    let mut out = header(thresholds);
    out.push('\n');
    let rows: Vec<Vec<Option<f64>>> = results.iter().map(cells).collect();
    for (r, c) in results.iter().zip(&rows) {
        out.push_str(&row(&r.id, c));
        out.push('\n');
    }
    let width = rows.first().map_or(0, Vec::len);
    let mean: Vec<Option<f64>> = (0..width)
        .map(|k| {
            let vals: Vec<f64> = rows.iter().filter_map(|r| r[k]).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect();
    out.push_str(&row("mean", &mean));
    out.push('\n');
    out
}

pub fn run(cfg: &EvalConfig) -> CliResult<Vec<PairResult>> {
    cfg.validate()?;
    let dir = cfg.output.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let _lock = DirLock::acquire(dir)?;
    let results = cfg
        .pairs
        .iter()
        .enumerate()
        .map(|(i, p)| evaluate_pair(cfg, i, p))
        .collect::<CliResult<Vec<_>>>()?;
    for r in &results {
        log::info!(
            "{}: chamfer {:.4e}, outlier rate {:.4}",
            r.id,
            r.metrics.chamfer_mean,
            r.outlier_rate
        );
    }
    write_atomic(&cfg.output, to_csv(&cfg.thresholds, &results).as_bytes())?;
    Ok(results)
}
