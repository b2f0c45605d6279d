//! Finite-difference checks of every op kind and of the composed network.

use pvudf::diff::gradcheck::{check_op, relative_error};
use pvudf::diff::{
    BatchNorm3d, Concat, Conv3d, DifferentiableOp, Linear, MaxPoolOverPoints, OpKind, Relu, Scalar, Tensor,
    TrilinearSample,
};
use pvudf::geom::{voxelize, PointCloud, Vec3};
use pvudf::model::{EncoderInput, ModelConfig, UdfModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [11, 22, 33, 44, 55];
const DIRECTION_TRIALS: usize = 4;

fn rand_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::uniform(shape, 1.0, rng)
}

fn assert_checks<T: Scalar, O: DifferentiableOp<T>>(op: &mut O, inputs: &[Tensor<T>], seed: u64, h: f64, tol: f64) {
    let kind = op.kind();
    for c in check_op(op, inputs, seed, h).unwrap() {
        assert!(
            c.relative_error < tol,
            "{kind:?} {} ({:?}): analytic {} numeric {} rel {}",
            c.target,
            T::DTYPE,
            c.analytic,
            c.numeric,
            c.relative_error
        );
    }
}

fn check_all_ops<T: Scalar>(h: f64, tol: f64) {
    let mut covered = Vec::new();
    for &seed in &SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut lin = Linear::<T>::init(5, 4, &mut rng);
        assert_checks(&mut lin, &[rand_tensor(&mut rng, &[6, 5])], seed, h, tol);
        covered.push(lin.kind());

        let mut conv = Conv3d::<T>::init(2, 0, 3, 3, 2, 1, &mut rng);
        assert_checks(&mut conv, &[rand_tensor(&mut rng, &[2, 2, 5, 5, 5])], seed, h, tol);
        let mut fused = Conv3d::<T>::init(2, 3, 2, 3, 1, 1, &mut rng);
        assert_checks(
            &mut fused,
            &[rand_tensor(&mut rng, &[2, 2, 4, 4, 4]), rand_tensor(&mut rng, &[2, 3])],
            seed,
            h,
            tol,
        );
        covered.push(conv.kind());

        let mut bn = BatchNorm3d::<T>::new(3);
        bn.gamma = rand_tensor(&mut rng, &[3]);
        bn.beta = rand_tensor(&mut rng, &[3]);
        assert_checks(&mut bn, &[rand_tensor(&mut rng, &[2, 3, 3, 3, 3])], seed, h, tol);
        bn.training = false;
        assert_checks(&mut bn, &[rand_tensor(&mut rng, &[2, 3, 2, 2, 2])], seed, h, tol);
        covered.push(bn.kind());

        let mut relu = Relu::<T>::new();
        assert_checks(&mut relu, &[rand_tensor(&mut rng, &[7, 9])], seed, h, tol);
        covered.push(relu.kind());

        let mut pool = MaxPoolOverPoints::new();
        assert_checks::<T, _>(&mut pool, &[rand_tensor(&mut rng, &[20, 6])], seed, h, tol);
        covered.push(DifferentiableOp::<T>::kind(&pool));

        let mut tri = TrilinearSample::<T>::new();
        let coords: Vec<f64> = (0..30).map(|_| rng.random_range(0.05..3.95)).collect();
        let coords = Tensor::from_f64(&[10, 3], &coords).unwrap();
        assert_checks(&mut tri, &[rand_tensor(&mut rng, &[5, 5, 5, 2]), coords], seed, h, tol);
        covered.push(tri.kind());

        let mut cat = Concat::new();
        assert_checks::<T, _>(
            &mut cat,
            &[rand_tensor(&mut rng, &[4, 3]), rand_tensor(&mut rng, &[4, 5])],
            seed,
            h,
            tol,
        );
        covered.push(DifferentiableOp::<T>::kind(&cat));
    }
    for k in OpKind::ALL {
        assert!(covered.contains(&k), "{k:?} not checked");
    }
}

#[test]
fn every_op_kind_matches_finite_differences_f64() {
    check_all_ops::<f64>(1e-6, 1e-6);
}

#[test]
fn every_op_kind_matches_finite_differences_f32() {
    check_all_ops::<f32>(1e-3, 1e-2);
}

fn test_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| Vec3::new(rng.random_range(-0.45..0.45), rng.random_range(-0.45..0.45), 0.1 * rng.random_range(-1.0..1.0)))
            .collect(),
    )
    .unwrap()
}

/// True when no sampling position of `p` lies within `margin` (index units)
/// of a cell-center plane of any latent grid, so trilinear sampling is smooth
/// on the finite-difference stencil.
fn away_from_cell_faces(cfg: &ModelConfig, p: &Vec3, margin: f64) -> bool {
    let d = cfg.decoder.neighborhood_distance;
    let mut sides: Vec<usize> = cfg.latent_blocks().iter().map(|&b| cfg.block_plans()[b].out_side).collect();
    sides.push(cfg.voxel.resolution);
    pvudf::model::neighborhood_offsets(p, d).iter().all(|q| {
        sides.iter().all(|&s| {
            (0..3).all(|a| {
                let u = (q[a] + 0.5) * s as f64 - 0.5;
                let frac = u - u.round();
                frac.abs() > margin
            })
        })
    })
}

#[test]
fn composed_query_gradient_matches_finite_differences() {
    for &seed in &SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig::tiny(32);
        let mut model = UdfModel::<f64>::new(cfg.clone(), seed).unwrap();
        model.reset_running_stats();
        let cloud = test_cloud(&mut rng, 200);
        let input = EncoderInput::new(&cloud, &voxelize(&cloud, 32).unwrap());
        let latent = model.encode(&input).unwrap();
        let h = 1e-4;
        let mut checked = 0;
        while checked < 20 {
            let p = Vec3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4));
            if !away_from_cell_faces(&cfg, &p, 2.0 * h * 32.0) {
                continue;
            }
            let (_, g) = model.decode_with_grad(&latent, &[p]).unwrap();
            for a in 0..3 {
                let mut e = Vec3::zeros();
                e[a] = h;
                let f = |q: Vec3| model.decode(&latent, &[q]).unwrap()[0];
                let (fp, f0, fm) = (f(p + e), f(p), f(p - e));
                // A ReLU kink inside the stencil shows up as disagreeing
                // one-sided differences; such points are the excluded
                // measure-zero set.
                if ((fp - f0) - (f0 - fm)).abs() > 1e-6 * (fp - fm).abs().max(1e-8) {
                    continue;
                }
                let numeric = (fp - fm) / (2.0 * h);
                let rel = relative_error(g[0][a], numeric, 1e-6);
                assert!(rel < 1e-4, "seed {seed} axis {a}: {} vs {numeric} ({rel})", g[0][a]);
            }
            checked += 1;
        }
    }
}

#[test]
fn composed_parameter_gradient_matches_finite_differences() {
    for &seed in &SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for wp in [false, true] {
            let mut cfg = ModelConfig::tiny(32);
            cfg.wp = wp;
            let mut model = UdfModel::<f64>::new(cfg, seed).unwrap();
            let clouds: Vec<PointCloud> = (0..2).map(|_| test_cloud(&mut rng, 150)).collect();
            let inputs: Vec<EncoderInput<f64>> =
                clouds.iter().map(|c| EncoderInput::new(c, &voxelize(c, 32).unwrap())).collect();
            let refs: Vec<&EncoderInput<f64>> = inputs.iter().collect();
            let queries: Vec<Vec<Vec3>> = (0..2)
                .map(|_| {
                    (0..40)
                        .map(|_| Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)))
                        .collect()
                })
                .collect();
            let (pred, tape) = model.forward_train(&refs, &queries).unwrap();
            let r: Vec<f64> = (0..pred.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let grads = model.backward_train(&tape, &r).unwrap();
            assert_eq!(grads.len(), model.params().len());
            let mut checked = 0;
            for _ in 0..DIRECTION_TRIALS {
                let dirs: Vec<Tensor<f64>> = model.params().iter().map(|t| Tensor::uniform(t.shape(), 1.0, &mut rng)).collect();
                let norm = dirs.iter().map(|d| d.dot(d)).sum::<f64>().sqrt();
                let analytic: f64 = grads.iter().zip(&dirs).map(|(g, d)| g.dot(d)).sum::<f64>() / norm;
                // The voxel encoder has tens of thousands of ReLU units, so the
                // step is kept small enough that most lines cross none of them.
                let h = 1e-6;
                let mut eval = |s: f64| {
                    for (p, d) in model.params_mut().into_iter().zip(&dirs) {
                        for (v, dv) in p.data_mut().iter_mut().zip(d.data()) {
                            *v += s * dv / norm;
                        }
                    }
                    let (out, _) = model.forward_train(&refs, &queries).unwrap();
                    for (p, d) in model.params_mut().into_iter().zip(&dirs) {
                        for (v, dv) in p.data_mut().iter_mut().zip(d.data()) {
                            *v -= s * dv / norm;
                        }
                    }
                    out.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>()
                };
                let (lp, l0, lm) = (eval(h), eval(0.0), eval(-h));
                let numeric = (lp - lm) / (2.0 * h);
                // A kink on the line shows up as disagreeing one-sided slopes.
                let slope_gap = ((lp - l0) - (l0 - lm)).abs() / h;
                if slope_gap > 1e-5 * numeric.abs().max(1e-6) {
                    continue;
                }
                let rel = relative_error(analytic, numeric, 1e-6);
                assert!(rel < 1e-4, "seed {seed} wp {wp}: {analytic} vs {numeric} ({rel})");
                checked += 1;
            }
            assert!(checked * 2 >= DIRECTION_TRIALS, "seed {seed} wp {wp}: only {checked} kink-free directions");
        }
    }
}
