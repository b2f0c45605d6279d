//! Surface extraction against exact analytic distance fields.

use proptest::prelude::*;
use pvudf::geom::{sample_surface_points, DistanceIndex, Vec3};
use pvudf::inference::{
    infer_surface, naive_outlier_filter, outlier_rate, project, resample_indices, seed_queries, GradientSource,
    InferenceConfig, UdfField,
};
use pvudf::oracles::AnalyticField;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fields() -> Vec<AnalyticField> {
    vec![
        AnalyticField::Sphere { radius: 0.4 },
        AnalyticField::Plane,
        AnalyticField::default_plate(),
        AnalyticField::OpenCylinder { radius: 0.3, height: 0.6 },
        AnalyticField::Hemisphere { radius: 0.4 },
    ]
}

fn surface_input(field: &AnalyticField, n: usize, seed: u64) -> Vec<Vec3> {
    let mesh = field.make_mesh(4).unwrap().mesh;
    sample_surface_points(&mesh, n, seed).unwrap().into_points()
}

fn small_cfg(seed: u64) -> InferenceConfig {
    InferenceConfig {
        out_res: 20_000,
        seed,
        ..InferenceConfig::default()
    }
}

fn vec3() -> impl Strategy<Value = Vec3> {
    prop::array::uniform3(-0.75f64..0.75).prop_map(Vec3::from)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn one_step_lands_on_the_surface(p in vec3(), k in 0usize..5) {
        let f = fields()[k];
        prop_assume!(f.eval(&p).gradient.is_some());
        let q = project(&[p], &f, 1).unwrap()[0];
        prop_assert!(f.distance(&q) < 1e-9, "{:?} from {p:?} ended {}", f, f.distance(&q));
    }

    #[test]
    fn residuals_do_not_grow(p in vec3(), k in 0usize..5) {
        let f = fields()[k];
        prop_assume!(f.eval(&p).gradient.is_some());
        let q = project(&[p], &f, 1).unwrap()[0];
        prop_assert!(f.distance(&q) <= f.distance(&p));
    }

    #[test]
    fn surface_points_are_fixed(seed in 0u64..1000, k in 0usize..5) {
        let f = fields()[k];
        // Closest points of random starts lie exactly on the analytic surface.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = Vec3::new(rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7));
        let on = f.eval(&p).closest;
        prop_assume!(f.distance(&on) == 0.0);
        prop_assert_eq!(project(&[on], &f, 3).unwrap()[0], on);
    }

    #[test]
    fn resampled_indices_cover_only_survivors(n in 1usize..500, out in 1usize..10_000, seed: u64) {
        let idx = resample_indices(n, out, seed);
        prop_assert_eq!(idx.len(), out);
        prop_assert!(idx.iter().all(|&i| i < n));
    }
}

#[test]
fn seed_count_is_m_times_n() {
    let input = surface_input(&AnalyticField::Plane, 100, 1);
    let cfg = InferenceConfig {
        seeds_per_point: 1,
        ..small_cfg(0)
    };
    assert_eq!(seed_queries(&input, &cfg).len(), 100);
    let cfg = InferenceConfig {
        seeds_per_point: 10,
        ..cfg
    };
    assert_eq!(seed_queries(&input, &cfg).len(), 1000);
}

#[test]
fn jitter_marginals_fill_the_interval() {
    let input = vec![Vec3::zeros(); 2000];
    let cfg = InferenceConfig {
        jitter_low: -0.05,
        jitter_high: 0.05,
        seeds_per_point: 5,
        ..small_cfg(7)
    };
    let s = seed_queries(&input, &cfg);
    for axis in 0..3 {
        let vals: Vec<f64> = s.iter().map(|p| p[axis]).collect();
        assert!(vals.iter().all(|v| (-0.05..0.05).contains(v)));
        // Uniform on [a, b): mean 0, variance (b - a)^2 / 12, 10^4 samples.
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 4.0 * (0.01f64 / 12.0 / 1e4).sqrt());
        assert!((var - 0.01 / 12.0).abs() < 0.05 * 0.01 / 12.0);
    }
}

#[test]
fn pipeline_output_is_within_max_dist_for_every_field() {
    for f in fields() {
        let input = surface_input(&f, 2000, 3);
        let r = infer_surface(&f, &input, &small_cfg(1)).unwrap();
        assert_eq!(r.counts.resampled, 20_000);
        assert_eq!(r.counts.seeds, 20_000);
        assert_eq!(r.counts.first_survivors + r.counts.first_removed, r.counts.seeds);
        assert_eq!(r.counts.final_survivors + r.counts.final_removed, r.counts.resampled);
        assert_eq!(r.output.len(), r.residuals.len());
        for (p, res) in r.output.iter().zip(&r.residuals) {
            assert!(*res < 0.005);
            assert!(f.distance(p) < 0.005, "{f:?}: {p:?} at {}", f.distance(p));
        }
    }
}

#[test]
fn finite_difference_gradients_give_the_same_quality() {
    let f = AnalyticField::default_plate();
    let input = surface_input(&f, 1000, 5);
    let cfg = InferenceConfig {
        gradient: GradientSource::FiniteDifference,
        ..small_cfg(2)
    };
    let r = infer_surface(&f, &input, &cfg).unwrap();
    assert!(r.output.len() > 15_000);
    assert!(r.output.iter().all(|p| f.distance(p) < 0.005));
}

#[test]
fn object_setting_feeds_a_million_candidates_to_the_last_filter() {
    let f = AnalyticField::Sphere { radius: 0.4 };
    let input = surface_input(&f, 1000, 4);
    let cfg = InferenceConfig {
        out_res: 1_000_000,
        ..small_cfg(3)
    };
    let r = infer_surface(&f, &input, &cfg).unwrap();
    assert_eq!(r.counts.resampled, 1_000_000);
    assert_eq!(r.counts.final_removed + r.output.len(), 1_000_000);
}

#[test]
fn pipeline_is_deterministic() {
    let f = AnalyticField::default_plate();
    let input = surface_input(&f, 1500, 9);
    let a = infer_surface(&f, &input, &small_cfg(11)).unwrap();
    let b = infer_surface(&f, &input, &small_cfg(11)).unwrap();
    let c = infer_surface(&f, &input, &small_cfg(12)).unwrap();
    assert_eq!(a.output, b.output);
    assert_eq!(a.residuals, b.residuals);
    assert_eq!(a.counts, b.counts);
    assert_ne!(a.output, c.output);
    let (mut pa, mut pb) = (Vec::new(), Vec::new());
    a.write_ply(&mut pa).unwrap();
    b.write_ply(&mut pb).unwrap();
    assert_eq!(pa, pb);
    assert_eq!(
        serde_json::to_string(&a.summary(false)).unwrap(),
        serde_json::to_string(&b.summary(false)).unwrap()
    );
}

#[test]
fn pipeline_outliers_vanish_on_the_sphere() {
    let f = AnalyticField::Sphere { radius: 0.4 };
    let om = f.make_mesh(5).unwrap();
    assert!(om.bound < 0.005);
    let input = sample_surface_points(&om.mesh, 2000, 1).unwrap().into_points();
    let cfg = InferenceConfig {
        max_dist: 0.01,
        ..small_cfg(5)
    };
    let r = infer_surface(&f, &input, &cfg).unwrap();
    let index = DistanceIndex::from_mesh(om.mesh);
    assert_eq!(outlier_rate(&r.output, &index, 0.02), 0.0);
}

#[test]
fn outlier_rate_counts_far_points() {
    let f = AnalyticField::Plane;
    let om = f.make_mesh(2).unwrap();
    let on = sample_surface_points(&om.mesh, 99, 3).unwrap().into_points();
    let index = DistanceIndex::from_mesh(om.mesh);
    assert_eq!(outlier_rate(&on, &index, 0.01), 0.0);
    let mut pts = on.clone();
    pts.push(Vec3::new(0.0, 0.0, 0.02));
    assert!((outlier_rate(&pts, &index, 0.01) - 1.0 / 100.0).abs() < 1e-15);
}

#[test]
fn naive_filter_removes_exactly_the_injected_outliers() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let input: Vec<Vec3> = (0..1000)
        .map(|_| Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.3..0.3), rng.random_range(-0.1..0.1)))
        .collect();
    assert_eq!(naive_outlier_filter(&input, &input), input);
    let mut cloud: Vec<Vec3> = input.iter().take(950).copied().collect();
    let far: Vec<Vec3> = (0..50)
        .map(|i| {
            let s = if i % 2 == 0 { 2.0 } else { -2.0 };
            Vec3::new(s * rng.random_range(0.5..1.0), rng.random_range(-0.3..0.3), 0.0)
        })
        .collect();
    for (i, p) in far.iter().enumerate() {
        cloud.insert(i * 19, *p);
    }
    let kept = naive_outlier_filter(&cloud, &input);
    assert_eq!(kept, input[..950].to_vec());
}

#[test]
fn zero_gradient_points_are_left_in_place() {
    let f = AnalyticField::Sphere { radius: 0.4 };
    // The sphere center is its cut locus.
    assert!(f.eval(&Vec3::zeros()).gradient.is_none());
    assert_eq!(project(&[Vec3::zeros()], &f, 7).unwrap()[0], Vec3::zeros());
    let (_, g) = f.values_and_gradients(&[Vec3::zeros()]).unwrap();
    assert_eq!(g[0], Vec3::zeros());
}

#[test]
fn invalid_configs_are_rejected() {
    let base = InferenceConfig::default();
    base.validate().unwrap();
    for bad in [
        InferenceConfig { jitter_low: 0.2, ..base.clone() },
        InferenceConfig { num_projections: 0, ..base.clone() },
        InferenceConfig { max_dist: 0.1, ..base.clone() },
        InferenceConfig { out_res: 0, ..base.clone() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}
