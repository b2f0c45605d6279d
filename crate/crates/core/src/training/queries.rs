use super::TrainConfig;
use crate::diff::checkpoint::Checkpoint;
use crate::diff::Tensor;
use crate::geom::{DistanceIndex, SurfaceSampler, TriangleMesh, Vec3, UNIT_HALF_EXTENT};
use crate::{Error, Result};
use rand::distr::weighted::WeightedIndex;
use crate::rng::stream_rng;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

/// Queries stay within 1.5 times the unit cube.
pub const QUERY_BOUND: f64 = 0.75;

/// Queries generated per independently seeded chunk.
const CHUNK: usize = 1024;

/// Query positions with their exact, unclamped distances to the surface.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QueryBatch {
    pub points: Vec<Vec3>,
    pub targets: Vec<f64>,
}

impl QueryBatch {
    pub fn new(points: Vec<Vec3>, targets: Vec<f64>) -> Result<Self> {
        let b = QueryBatch { points, targets };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() != self.targets.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} query points for {} targets",
                self.points.len(),
                self.targets.len()
            )));
        }
        if self.targets.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
            return Err(Error::DegenerateInput("query targets must be finite and non-negative".into()));
        }
        if self.points.iter().any(|p| !(p.amax() <= QUERY_BOUND)) {
            return Err(Error::DegenerateInput(format!("query points must lie within [-{QUERY_BOUND}, {QUERY_BOUND}]^3")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_checkpoint(&self, shape_id: &str) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({"format": "pvudf-queries", "shape": shape_id}));
        let flat: Vec<f64> = self.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        ck.push("points", &Tensor::from_vec(&[self.len(), 3], flat).expect("3 coordinates per point"));
        ck.push("targets", &Tensor::from_vec(&[self.len()], self.targets.clone()).expect("one target per point"));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let pts: Tensor<f64> = ck.tensor("points")?;
        let targets: Tensor<f64> = ck.tensor("targets")?;
        pts.expect_rank(2, "query points")?;
        let points = pts.data().chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
        QueryBatch::new(points, targets.into_data())
    }
}

fn draw_query<R: Rng>(
    rng: &mut R,
    sampler: &SurfaceSampler<'_>,
    cfg: &TrainConfig,
    sigma_index: &WeightedIndex<f64>,
) -> Vec3 {
    if rng.random::<f64>() < cfg.uniform_fraction {
        let h = UNIT_HALF_EXTENT;
        return Vec3::new(rng.random_range(-h..h), rng.random_range(-h..h), rng.random_range(-h..h));
    }
    let (s, _) = sampler.sample(rng);
    let sigma = cfg.perturbation_sigmas[sigma_index.sample(rng)];
    if sigma == 0.0 {
        return s;
    }
    let noise = Normal::new(0.0, sigma).expect("validated sigma");
    // Displacements leaving the query box are redrawn.
    loop {
        let q = s + Vec3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng));
        if q.amax() <= QUERY_BOUND {
            return q;
        }
    }
}

/// Draws `cfg.queries_per_shape` queries around a normalized mesh: surface
/// samples displaced by isotropic Gaussian noise with a per-sample sigma, plus
/// a uniform-in-cube fraction. Targets are exact distances from `index`.
pub fn generate_training_queries(
    mesh: &TriangleMesh,
    index: &DistanceIndex,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<QueryBatch> {
    cfg.validate()?;
    if !(mesh.bounds().min.amax().max(mesh.bounds().max.amax()) <= UNIT_HALF_EXTENT + 1e-9) {
        return Err(Error::DegenerateInput("query generation expects a normalized mesh".into()));
    }
    let sampler = SurfaceSampler::new(mesh)?;
    let sigma_index = WeightedIndex::new(&cfg.sigma_weights)
        .map_err(|e| Error::InvalidConfig(format!("sigma_weights: {e}")))?;
    let n = cfg.queries_per_shape;
    let points: Vec<Vec3> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = stream_rng(seed, c as u64);
            let len = CHUNK.min(n - c * CHUNK);
            (0..len)
                .map(|_| draw_query(&mut rng, &sampler, cfg, &sigma_index))
                .collect::<Vec<_>>()
        })
        .collect();
    let targets = points.par_iter().map(|p| index.distance(p)).collect();
    QueryBatch::new(points, targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::AnalyticField;

    fn cfg(n: usize) -> TrainConfig {
        TrainConfig {
            queries_per_shape: n,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_sigma_queries_lie_on_the_surface() {
        let mesh = AnalyticField::default_plate().make_mesh(2).unwrap().mesh;
        let index = DistanceIndex::from_mesh(mesh.clone());
        let c = TrainConfig {
            perturbation_sigmas: vec![0.0],
            sigma_weights: vec![1.0],
            uniform_fraction: 0.0,
            ..cfg(3000)
        };
        let q = generate_training_queries(&mesh, &index, &c, 3).unwrap();
        assert_eq!(q.len(), 3000);
        assert!(q.targets.iter().all(|&t| t < 1e-12));
    }

    #[test]
    fn uniform_queries_on_sphere_match_the_radial_distance() {
        let field = AnalyticField::Sphere { radius: 0.5 };
        let om = field.make_mesh(4).unwrap();
        let index = DistanceIndex::from_mesh(om.mesh.clone());
        let c = TrainConfig {
            uniform_fraction: 1.0,
            ..cfg(2000)
        };
        let q = generate_training_queries(&om.mesh, &index, &c, 9).unwrap();
        for (p, t) in q.points.iter().zip(&q.targets) {
            assert!((t - (p.norm() - 0.5).abs()).abs() <= om.bound + 1e-12);
        }
    }

    #[test]
    fn fixed_seed_gives_identical_queries() {
        let mesh = AnalyticField::default_plate().make_mesh(2).unwrap().mesh;
        let index = DistanceIndex::from_mesh(mesh.clone());
        let a = generate_training_queries(&mesh, &index, &cfg(2500), 1).unwrap();
        let b = generate_training_queries(&mesh, &index, &cfg(2500), 1).unwrap();
        let c = generate_training_queries(&mesh, &index, &cfg(2500), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        a.validate().unwrap();
    }

    #[test]
    fn archive_round_trip() {
        let q = QueryBatch::new(vec![Vec3::new(0.1, -0.2, 0.3)], vec![0.25]).unwrap();
        let mut buf = Vec::new();
        q.to_checkpoint("s").write_to(&mut buf).unwrap();
        let back = QueryBatch::from_checkpoint(&Checkpoint::read_from(&mut buf.as_slice()).unwrap()).unwrap();
        assert_eq!(back, q);
    }
}
