//! Metrics against brute-force references and their algebraic properties.

use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;
use pvudf::geom::Vec3;
use pvudf::metrics::{chamfer_l2, evaluate, fscore, nearest_squared_distances, precision_recall, KdTree};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn brute_nn2(from: &[Vec3], to: &[Vec3]) -> Vec<f64> {
    from.iter()
        .map(|p| to.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min))
        .collect()
}

fn brute_chamfer(a: &[Vec3], b: &[Vec3]) -> f64 {
    let f = brute_nn2(a, b);
    let g = brute_nn2(b, a);
    f.iter().sum::<f64>() / f.len() as f64 + g.iter().sum::<f64>() / g.len() as f64
}

fn brute_pr(a: &[Vec3], b: &[Vec3], d: f64) -> (f64, f64) {
    let within = |from: &[Vec3], to: &[Vec3]| {
        from.iter()
            .filter(|p| to.iter().any(|q| (*p - q).norm() < d))
            .count() as f64
            / from.len() as f64
    };
    (within(a, b), within(b, a))
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
    // Mix of a dense cluster and spread points to exercise tree balance.
    (0..n)
        .map(|i| {
            let s = if i % 3 == 0 { 0.05 } else { 1.0 };
            Vec3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
        })
        .collect()
}

fn cloud(max: usize) -> impl Strategy<Value = Vec<Vec3>> {
    prop::collection::vec(prop::array::uniform3(-1.0f64..1.0).prop_map(Vec3::from), 1..max)
}

#[test]
fn fifty_random_pairs_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for k in 0..50 {
        let (na, nb) = (rng.random_range(1..=2000), rng.random_range(1..=2000));
        let a = random_cloud(&mut rng, na);
        let b = random_cloud(&mut rng, nb);
        let c = chamfer_l2(&a, &b).unwrap();
        assert!((c.mean - brute_chamfer(&a, &b)).abs() <= 1e-10, "pair {k}");
        for d in [0.01, 0.05, 0.2] {
            let (p, r) = precision_recall(&a, &b, d).unwrap();
            let (bp, br) = brute_pr(&a, &b, d);
            assert!((p - bp).abs() <= 1e-10 && (r - br).abs() <= 1e-10, "pair {k} d {d}");
            assert!((fscore(p, r) - fscore(bp, br)).abs() <= 1e-10);
        }
    }
}

#[test]
fn identical_clouds_score_perfectly() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random_cloud(&mut rng, 500);
    let rep = evaluate(&a, &a, &[0.001, 0.0005]).unwrap();
    assert_eq!(rep.chamfer_mean, 0.0);
    assert!(rep.scores.iter().all(|s| s.fscore == 1.0));
}

#[test]
fn any_displaced_point_breaks_a_perfect_score() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random_cloud(&mut rng, 400);
    let gaps = brute_nn2(&a, &a[1..]);
    let max_gap = gaps.iter().cloned().fold(0.0, f64::max).sqrt();
    let d = 1.01 * max_gap;
    let mut b = a.clone();
    b[0] += Vec3::new(10.0, 0.0, 0.0);
    let (p, r) = precision_recall(&b, &a, d).unwrap();
    assert!(fscore(p, r) < 1.0);
    let (p, r) = precision_recall(&a, &a, d).unwrap();
    assert_eq!(fscore(p, r), 1.0);
}

#[test]
fn half_far_points_give_half_precision() {
    let gt: Vec<Vec3> = (0..100)
        .flat_map(|i| (0..100).map(move |j| Vec3::new(i as f64 * 0.01, j as f64 * 0.01, 0.0)))
        .collect();
    let d = 0.01;
    let mut y: Vec<Vec3> = (0..50).map(|i| Vec3::new(0.013 * i as f64, 0.4, 0.0)).collect();
    y.extend((0..50).map(|i| Vec3::new(0.013 * i as f64, 0.4, 10.0 * d)));
    let (p, _) = precision_recall(&y, &gt, d).unwrap();
    assert_eq!(p, 0.5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kd_tree_equals_brute_force(pts in cloud(2000), queries in cloud(50)) {
        let tree = KdTree::build(&pts);
        prop_assert_eq!(nearest_squared_distances(&queries, &tree), brute_nn2(&queries, &pts));
    }

    #[test]
    fn chamfer_is_symmetric(a in cloud(300), b in cloud(300)) {
        prop_assert_eq!(chamfer_l2(&a, &b).unwrap().mean, chamfer_l2(&b, &a).unwrap().mean);
    }

    #[test]
    fn chamfer_is_rigid_invariant(
        a in cloud(300),
        b in cloud(300),
        axis in prop::array::uniform3(-1.0f64..1.0),
        angle in -3.14f64..3.14,
        t in prop::array::uniform3(-5.0f64..5.0),
    ) {
        let axis = Vector3::from(axis);
        prop_assume!(axis.norm() > 1e-3);
        let rot = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        let t = Vec3::from(t);
        let m = |c: &[Vec3]| c.iter().map(|p| rot * p + t).collect::<Vec<_>>();
        let c0 = chamfer_l2(&a, &b).unwrap().mean;
        let c1 = chamfer_l2(&m(&a), &m(&b)).unwrap().mean;
        prop_assert!((c0 - c1).abs() <= 1e-9 * c0.max(1e-12), "{c0} vs {c1}");
    }

    #[test]
    fn precision_and_recall_grow_with_d(a in cloud(200), b in cloud(200), d0 in 0.001f64..0.5, step in 0.0f64..0.5) {
        let (p0, r0) = precision_recall(&a, &b, d0).unwrap();
        let (p1, r1) = precision_recall(&a, &b, d0 + step).unwrap();
        prop_assert!(p1 >= p0 && r1 >= r0);
        let f = fscore(p1, r1);
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert_eq!(f == 1.0, p1 == 1.0 && r1 == 1.0);
    }
}
