//! Dense surface point extraction: jittered seeding around the input points,
//! repeated gradient projection `p <- p - f(p) * grad f(p) / |grad f(p)|`,
//! a coarse distance filter, uniform resampling with Gaussian displacement,
//! a second projection round and a final distance filter.

use crate::diff::Scalar;
use crate::geom::io::write_ply_points;
use crate::geom::{voxelize, Aabb, DistanceIndex, PointCloud, Vec3};
use crate::model::{EncoderInput, Latent, UdfModel};
use crate::oracles::AnalyticField;
use crate::rng::stream_rng;
use crate::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Points handled per parallel work item and per RNG stream.
pub const CHUNK: usize = 4096;

/// Gradients shorter than this leave the point where it is for that iteration.
pub const MIN_GRADIENT_NORM: f64 = 1e-12;

const RESAMPLE_SALT: u64 = 0x5E5A_3C1E_0000_0002;

/// A distance field that can be evaluated in batches.
pub trait UdfField: Sync {
    fn values(&self, pts: &[Vec3]) -> Result<Vec<f64>>;

    /// Values and gradients; a zero gradient marks an undefined direction.
    fn values_and_gradients(&self, pts: &[Vec3]) -> Result<(Vec<f64>, Vec<Vec3>)>;
}

impl UdfField for AnalyticField {
    fn values(&self, pts: &[Vec3]) -> Result<Vec<f64>> {
        Ok(pts.iter().map(|p| self.distance(p)).collect())
    }

    fn values_and_gradients(&self, pts: &[Vec3]) -> Result<(Vec<f64>, Vec<Vec3>)> {
        Ok(pts
            .iter()
            .map(|p| {
                let s = self.eval(p);
                (s.distance, s.gradient.unwrap_or_else(Vec3::zeros))
            })
            .unzip())
    }
}

/// A trained model bound to one encoded input.
pub struct LatentField<'a, T> {
    pub model: &'a UdfModel<T>,
    pub latent: Latent<T>,
}

impl<'a, T: Scalar> LatentField<'a, T> {
    pub fn new(model: &'a UdfModel<T>, input: &EncoderInput<T>) -> Result<Self> {
        Ok(LatentField {
            model,
            latent: model.encode(input)?,
        })
    }
}

impl<T: Scalar> UdfField for LatentField<'_, T> {
    fn values(&self, pts: &[Vec3]) -> Result<Vec<f64>> {
        Ok(self.model.decode(&self.latent, pts)?.iter().map(|v| v.as_f64()).collect())
    }

    fn values_and_gradients(&self, pts: &[Vec3]) -> Result<(Vec<f64>, Vec<Vec3>)> {
        let (v, g) = self.model.decode_with_grad(&self.latent, pts)?;
        Ok((
            v.iter().map(|x| x.as_f64()).collect(),
            g.iter()
                .map(|g| Vec3::new(g[0].as_f64(), g[1].as_f64(), g[2].as_f64()))
                .collect(),
        ))
    }
}

/// Replaces the gradient of `inner` by central differences with step `h`.
pub struct FiniteDifferenceField<F> {
    pub inner: F,
    pub h: f64,
}

impl<F: UdfField> UdfField for FiniteDifferenceField<F> {
    fn values(&self, pts: &[Vec3]) -> Result<Vec<f64>> {
        self.inner.values(pts)
    }

    fn values_and_gradients(&self, pts: &[Vec3]) -> Result<(Vec<f64>, Vec<Vec3>)> {
        let n = pts.len();
        let mut probe = Vec::with_capacity(7 * n);
        probe.extend_from_slice(pts);
        for a in 0..3 {
            let mut e = Vec3::zeros();
            e[a] = self.h;
            probe.extend(pts.iter().map(|p| p + e));
            probe.extend(pts.iter().map(|p| p - e));
        }
        let v = self.inner.values(&probe)?;
        let grads = (0..n)
            .map(|i| {
                let d = |a: usize| (v[(1 + 2 * a) * n + i] - v[(2 + 2 * a) * n + i]) / (2.0 * self.h);
                Vec3::new(d(0), d(1), d(2))
            })
            .collect();
        Ok((v[..n].to_vec(), grads))
    }
}

impl<F: UdfField> UdfField for &F {
    fn values(&self, pts: &[Vec3]) -> Result<Vec<f64>> {
        (*self).values(pts)
    }

    fn values_and_gradients(&self, pts: &[Vec3]) -> Result<(Vec<f64>, Vec<Vec3>)> {
        (*self).values_and_gradients(pts)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientSource {
    /// Backward pass through the decoder (exact gradient for analytic fields).
    Analytic,
    /// Central finite differences of field values.
    FiniteDifference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Lower jitter bound `a` per coordinate.
    pub jitter_low: f64,
    /// Upper jitter bound `b` per coordinate.
    pub jitter_high: f64,
    /// Jittered seeds per input point (`m`).
    pub seeds_per_point: usize,
    pub num_projections: usize,
    /// Coarse filter distance after the first projection round.
    pub max_thresh: f64,
    /// Output point count before the final filter.
    pub out_res: usize,
    /// Resample displacement is `N(0, delta / 3)` per coordinate.
    pub delta: f64,
    /// Final filter distance.
    pub max_dist: f64,
    pub seed: u64,
    pub gradient: GradientSource,
    /// Step of the finite-difference gradient.
    pub fd_step: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            jitter_low: -0.1,
            jitter_high: 0.1,
            seeds_per_point: 10,
            num_projections: 7,
            max_thresh: 0.05,
            out_res: 1_000_000,
            delta: 0.1,
            max_dist: 0.005,
            seed: 0,
            gradient: GradientSource::Analytic,
            fd_step: 1e-4,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.jitter_low.is_finite() && self.jitter_high.is_finite() && self.jitter_low <= self.jitter_high) {
            return bad(format!("jitter bounds must satisfy a <= b, got [{}, {}]", self.jitter_low, self.jitter_high));
        }
        if self.seeds_per_point == 0 || self.num_projections == 0 || self.out_res == 0 {
            return bad("seeds_per_point, num_projections and out_res must be at least 1".into());
        }
        if !(self.max_dist > 0.0 && self.max_dist <= self.max_thresh && self.max_thresh.is_finite()) {
            return bad(format!(
                "need 0 < max_dist <= max_thresh, got {} and {}",
                self.max_dist, self.max_thresh
            ));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return bad(format!("delta must be non-negative, got {}", self.delta));
        }
        if !(self.fd_step > 0.0 && self.fd_step.is_finite()) {
            return bad(format!("fd_step must be positive, got {}", self.fd_step));
        }
        Ok(())
    }
}

/// Model distance as used by filters and projection: negatives count as 0.
fn as_distance(v: f64) -> f64 {
    if v < 0.0 {
        0.0
    } else {
        v
    }
}

/// `m` jittered copies of every input point, `x + j` with `j ~ U(a, b)^3`,
/// in input order.
pub fn seed_queries(input: &[Vec3], cfg: &InferenceConfig) -> Vec<Vec3> {
    let m = cfg.seeds_per_point;
    let (a, b) = (cfg.jitter_low, cfg.jitter_high);
    input
        .par_chunks(CHUNK)
        .enumerate()
        .flat_map_iter(|(c, chunk)| {
            let mut rng = stream_rng(cfg.seed, c as u64);
            let mut out = Vec::with_capacity(chunk.len() * m);
            let jitter = |rng: &mut rand_chacha::ChaCha8Rng| if a < b { rng.random_range(a..b) } else { a };
            for x in chunk {
                for _ in 0..m {
                    out.push(x + Vec3::new(jitter(&mut rng), jitter(&mut rng), jitter(&mut rng)));
                }
            }
            out
        })
        .collect()
}

/// Applies `iterations` projection steps to every point.
pub fn project<F: UdfField>(points: &[Vec3], field: &F, iterations: usize) -> Result<Vec<Vec3>> {
    let chunks: Vec<Vec<Vec3>> = points
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut p = chunk.to_vec();
            for _ in 0..iterations {
                let (f, g) = field.values_and_gradients(&p)?;
                for ((p, f), g) in p.iter_mut().zip(f).zip(g) {
                    let n = g.norm();
                    if n >= MIN_GRADIENT_NORM && n.is_finite() && f.is_finite() {
                        *p -= g * (as_distance(f) / n);
                    }
                }
            }
            Ok(p)
        })
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

/// Field values, with negatives reported as 0.
pub fn distances<F: UdfField>(points: &[Vec3], field: &F) -> Result<Vec<f64>> {
    let chunks: Vec<Vec<f64>> = points
        .par_chunks(CHUNK)
        .map(|c| Ok(field.values(c)?.into_iter().map(as_distance).collect()))
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

/// Indices of `out_res` uniform draws with replacement from `n` survivors.
pub fn resample_indices(n: usize, out_res: usize, seed: u64) -> Vec<usize> {
    let chunks = out_res.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = stream_rng(seed ^ RESAMPLE_SALT, c as u64);
            let len = CHUNK.min(out_res - c * CHUNK);
            (0..len).map(move |_| rng.random_range(0..n)).collect::<Vec<_>>()
        })
        .collect()
}

/// Resampled survivors displaced by `N(0, delta / 3)` per coordinate.
pub fn resample(survivors: &[Vec3], cfg: &InferenceConfig) -> Vec<Vec3> {
    let idx = resample_indices(survivors.len(), cfg.out_res, cfg.seed);
    let sigma = cfg.delta / 3.0;
    idx.par_chunks(CHUNK)
        .enumerate()
        .flat_map_iter(|(c, chunk)| {
            // A separate stream family from the index draws.
            let mut rng = stream_rng(cfg.seed ^ RESAMPLE_SALT, (1 << 40) + c as u64);
            let normal = Normal::new(0.0, sigma).ok();
            chunk
                .iter()
                .map(|&i| match &normal {
                    Some(nd) if sigma > 0.0 => {
                        survivors[i] + Vec3::new(nd.sample(&mut rng), nd.sample(&mut rng), nd.sample(&mut rng))
                    }
                    _ => survivors[i],
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub input: usize,
    pub seeds: usize,
    pub first_survivors: usize,
    pub first_removed: usize,
    pub resampled: usize,
    pub final_survivors: usize,
    pub final_removed: usize,
}

/// Wall-clock seconds per stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub seed: f64,
    pub first_projection: f64,
    pub first_filter: f64,
    pub resample: f64,
    pub second_projection: f64,
    pub final_filter: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct ReconstructionReport {
    pub output: Vec<Vec3>,
    /// Field value at each output point (negatives reported as 0).
    pub residuals: Vec<f64>,
    pub counts: StageCounts,
    pub timings: StageTimings,
}

/// Serializable digest of a report without the points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub counts: StageCounts,
    pub max_residual: f64,
    pub mean_residual: f64,
    pub timings: Option<StageTimings>,
}

impl ReconstructionReport {
    /// Binary PLY of the output points with a `residual` float property.
    pub fn write_ply<W: std::io::Write>(&self, w: W) -> Result<()> {
        write_ply_points(&self.output, &[("residual", &self.residuals)], w)
    }

    pub fn summary(&self, with_timings: bool) -> ReportSummary {
        let n = self.residuals.len().max(1) as f64;
        ReportSummary {
            counts: self.counts.clone(),
            max_residual: self.residuals.iter().cloned().fold(0.0, f64::max),
            mean_residual: self.residuals.iter().sum::<f64>() / n,
            timings: with_timings.then(|| self.timings.clone()),
        }
    }
}

fn filter_below(points: Vec<Vec3>, values: Vec<f64>, limit: f64) -> (Vec<Vec3>, Vec<f64>) {
    points
        .into_iter()
        .zip(values)
        .filter(|(_, v)| *v < limit)
        .unzip()
}

/// Runs the full extraction pipeline on a normalized input cloud.
pub fn infer_surface<F: UdfField>(field: &F, input: &[Vec3], cfg: &InferenceConfig) -> Result<ReconstructionReport> {
    cfg.validate()?;
    if input.is_empty() {
        return Err(Error::DegenerateInput("inference input is empty".into()));
    }
    match cfg.gradient {
        GradientSource::Analytic => run_pipeline(field, input, cfg),
        GradientSource::FiniteDifference => run_pipeline(
            &FiniteDifferenceField {
                inner: field,
                h: cfg.fd_step,
            },
            input,
            cfg,
        ),
    }
}

fn run_pipeline<F: UdfField>(field: &F, input: &[Vec3], cfg: &InferenceConfig) -> Result<ReconstructionReport> {
    let start = Instant::now();
    let mut t = StageTimings::default();
    let mut counts = StageCounts {
        input: input.len(),
        ..Default::default()
    };
    let lap = |since: &mut Instant| {
        let s = since.elapsed().as_secs_f64();
        *since = Instant::now();
        s
    };
    let mut clock = Instant::now();

    let seeds = seed_queries(input, cfg);
    counts.seeds = seeds.len();
    t.seed = lap(&mut clock);

    let projected = project(&seeds, field, cfg.num_projections)?;
    t.first_projection = lap(&mut clock);

    let values = distances(&projected, field)?;
    let (survivors, _) = filter_below(projected, values, cfg.max_thresh);
    counts.first_survivors = survivors.len();
    counts.first_removed = counts.seeds - survivors.len();
    t.first_filter = lap(&mut clock);
    if survivors.is_empty() {
        return Err(Error::EmptySurvivors {
            stage: "first",
            detail: format!("0 of {} seeds within max_thresh {}", counts.seeds, cfg.max_thresh),
        });
    }

    let resampled = resample(&survivors, cfg);
    counts.resampled = resampled.len();
    t.resample = lap(&mut clock);

    let projected = project(&resampled, field, cfg.num_projections)?;
    t.second_projection = lap(&mut clock);

    let values = distances(&projected, field)?;
    let (output, residuals) = filter_below(projected, values, cfg.max_dist);
    counts.final_survivors = output.len();
    counts.final_removed = counts.resampled - output.len();
    t.final_filter = lap(&mut clock);
    if output.is_empty() {
        return Err(Error::EmptySurvivors {
            stage: "final",
            detail: format!("0 of {} resampled points within max_dist {}", counts.resampled, cfg.max_dist),
        });
    }
    t.total = start.elapsed().as_secs_f64();
    Ok(ReconstructionReport {
        output,
        residuals,
        counts,
        timings: t,
    })
}

/// Voxelizes `input` at the model resolution, encodes it and extracts the
/// surface with the model's field.
pub fn infer_with_model<T: Scalar>(model: &UdfModel<T>, input: &PointCloud, cfg: &InferenceConfig) -> Result<ReconstructionReport> {
    let grid = voxelize(input, model.config().voxel.resolution)?;
    let field = LatentField::new(model, &EncoderInput::new(input, &grid))?;
    infer_surface(&field, input.points(), cfg)
}

/// Keeps the points inside the axis-aligned bounding box of `input`.
pub fn naive_outlier_filter(cloud: &[Vec3], input: &[Vec3]) -> Vec<Vec3> {
    let b = Aabb::from_points(input);
    cloud.iter().filter(|p| b.contains(p)).copied().collect()
}

/// Fraction of `output` farther than `threshold` from the indexed surface.
pub fn outlier_rate(output: &[Vec3], gt: &DistanceIndex, threshold: f64) -> f64 {
    if output.is_empty() {
        return 0.0;
    }
    let far = output.par_iter().filter(|p| gt.distance(p) > threshold).count();
    far as f64 / output.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> InferenceConfig {
        InferenceConfig {
            out_res: 5000,
            ..InferenceConfig::default()
        }
    }

    #[test]
    fn zero_jitter_copies_each_point_m_times() {
        let pts = vec![Vec3::new(0.1, 0.2, 0.3), Vec3::new(-0.1, 0.0, 0.2)];
        let c = InferenceConfig {
            jitter_low: 0.0,
            jitter_high: 0.0,
            seeds_per_point: 3,
            ..cfg()
        };
        let s = seed_queries(&pts, &c);
        assert_eq!(s.len(), 6);
        assert!(s[..3].iter().all(|p| *p == pts[0]));
        assert!(s[3..].iter().all(|p| *p == pts[1]));
    }

    #[test]
    fn jitter_stays_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vec3> = (0..100).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        let c = InferenceConfig {
            seeds_per_point: 1,
            ..cfg()
        };
        let s = seed_queries(&pts, &c);
        assert_eq!(s.len(), 100);
        for (q, p) in s.iter().zip(&pts) {
            let d = q - p;
            assert!(d.iter().all(|v| (-0.1..0.1).contains(v)));
        }
    }

    #[test]
    fn sphere_projection_lands_on_the_surface() {
        let f = AnalyticField::Sphere { radius: 1.0 };
        let p = project(&[Vec3::new(2.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)], &f, 1).unwrap();
        assert!((p[0] - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
        assert_eq!(p[1], Vec3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn plane_projection_drops_z() {
        let p = project(&[Vec3::new(0.3, -0.2, 0.7), Vec3::new(0.1, 0.4, -0.2)], &AnalyticField::Plane, 1).unwrap();
        assert_eq!(p[0], Vec3::new(0.3, -0.2, 0.0));
        assert_eq!(p[1], Vec3::new(0.1, 0.4, 0.0));
    }

    #[test]
    fn finite_difference_gradient_matches_analytic() {
        let f = AnalyticField::Sphere { radius: 0.4 };
        let pts = vec![Vec3::new(0.3, 0.2, -0.1), Vec3::new(-0.5, 0.1, 0.2)];
        let (_, ga) = f.values_and_gradients(&pts).unwrap();
        let (_, gf) = FiniteDifferenceField { inner: &f, h: 1e-4 }.values_and_gradients(&pts).unwrap();
        for (a, b) in ga.iter().zip(&gf) {
            assert!((a - b).norm() < 1e-7);
        }
    }

    #[test]
    fn resampling_draws_from_survivors() {
        let survivors: Vec<Vec3> = (0..7).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        let idx = resample_indices(7, 10_000, 4);
        assert_eq!(idx.len(), 10_000);
        assert!(idx.iter().all(|&i| i < 7));
        let c = InferenceConfig {
            delta: 0.0,
            out_res: 50,
            ..cfg()
        };
        assert!(resample(&survivors, &c).iter().all(|p| survivors.contains(p)));
    }

    #[test]
    fn sphere_pipeline_output_is_within_max_dist() {
        let f = AnalyticField::Sphere { radius: 0.4 };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input: Vec<Vec3> = (0..300)
            .map(|_| {
                let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                v.normalize() * 0.4
            })
            .collect();
        let r = infer_surface(&f, &input, &cfg()).unwrap();
        assert_eq!(r.counts.resampled, 5000);
        assert!(r.output.iter().all(|p| (p.norm() - 0.4).abs() < 0.005));
        assert!(r.residuals.iter().all(|&v| v < 0.005));
        let again = infer_surface(&f, &input, &cfg()).unwrap();
        assert_eq!(again.output, r.output);
    }

    #[test]
    fn empty_survivors_is_a_diagnostic_error() {
        let f = AnalyticField::Sphere { radius: 0.4 };
        // Seeds far from the surface with a single weak projection cannot pass.
        let input = vec![Vec3::new(5.0, 5.0, 5.0)];
        let c = InferenceConfig {
            jitter_low: 0.0,
            jitter_high: 0.0,
            max_thresh: 0.01,
            max_dist: 0.005,
            ..cfg()
        };
        let far = FarField(f);
        let err = infer_surface(&far, &input, &c).unwrap_err();
        assert!(matches!(err, Error::EmptySurvivors { stage: "first", .. }));
    }

    /// A field whose gradient is always zero, so nothing moves.
    struct FarField(AnalyticField);

    impl UdfField for FarField {
        fn values(&self, pts: &[Vec3]) -> Result<Vec<f64>> {
            self.0.values(pts)
        }

        fn values_and_gradients(&self, pts: &[Vec3]) -> Result<(Vec<f64>, Vec<Vec3>)> {
            Ok((self.0.values(pts)?, vec![Vec3::zeros(); pts.len()]))
        }
    }

    #[test]
    fn naive_filter_and_outlier_rate() {
        let input = vec![Vec3::new(-0.5, -0.5, -0.1), Vec3::new(0.5, 0.5, 0.1)];
        let cloud = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 0.2), Vec3::new(0.4, -0.4, 0.05)];
        assert_eq!(naive_outlier_filter(&cloud, &input), vec![cloud[0], cloud[2]]);
        let plane = AnalyticField::Plane.make_mesh(1).unwrap().mesh;
        let idx = DistanceIndex::from_mesh(plane);
        let mut pts: Vec<Vec3> = (0..9).map(|i| Vec3::new(0.1 * i as f64 - 0.4, 0.0, 0.0)).collect();
        pts.push(Vec3::new(0.0, 0.0, 0.04));
        assert!((outlier_rate(&pts, &idx, 0.02) - 0.1).abs() < 1e-15);
    }
}
