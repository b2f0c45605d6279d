//! Finite-difference gradient checks.
//!
//! A check draws a random projection `r` of the op output, so the objective
//! `L = <op(x), r>` is scalar, and compares the analytic directional
//! derivative `<dL/dx, d>` against a central difference along a unit
//! direction `d`.
//!
//! `d` is the normalized sum of the analytic gradient direction and an
//! independent random unit vector. A purely random direction in many
//! dimensions is nearly orthogonal to the gradient, which shrinks the
//! directional derivative toward the finite-difference noise floor and makes
//! the relative error meaningless; the mixed direction keeps it of the order
//! of the gradient norm while any gradient error still shows through the
//! random component.

use super::{DifferentiableOp, Scalar, Tensor};
use crate::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `"input[i]"` or `"param[i]"`.
    pub target: String,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn normalize(mut d: Vec<f64>) -> Vec<f64> {
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        d.iter_mut().for_each(|v| *v /= norm);
    }
    d
}

fn random_direction(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    normalize((0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Unit direction mixing the normalized `grad` with a random unit vector.
pub fn mixed_direction(rng: &mut ChaCha8Rng, grad: &[f64]) -> Vec<f64> {
    let g = normalize(grad.to_vec());
    let r = random_direction(rng, grad.len());
    normalize(g.iter().zip(&r).map(|(a, b)| a + b).collect())
}

/// Directional check of a scalar function with a known gradient.
pub fn check_function<F>(mut f: F, x: &[f64], grad: &[f64], seed: u64, h: f64) -> (f64, f64)
where
    F: FnMut(&[f64]) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = mixed_direction(&mut rng, grad);
    let shifted = |s: f64| -> Vec<f64> { x.iter().zip(&d).map(|(a, b)| a + s * b).collect() };
    let numeric = (f(&shifted(h)) - f(&shifted(-h))) / (2.0 * h);
    let analytic = grad.iter().zip(&d).map(|(g, v)| g * v).sum();
    (analytic, numeric)
}

/// Checks every input and parameter gradient of `op` at `inputs`. The
/// perturbation is applied in `T`, so `h` should suit its precision.
pub fn check_op<T: Scalar, O: DifferentiableOp<T>>(
    op: &mut O,
    inputs: &[Tensor<T>],
    seed: u64,
    h: f64,
) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let refs: Vec<&Tensor<T>> = inputs.iter().collect();
    let y = op.forward(&refs)?;
    let r = Tensor::uniform(y.shape(), 1.0, &mut rng);
    let grads = op.backward(&r)?;
    let mut out = Vec::new();

    for (i, g) in grads.inputs.iter().enumerate() {
        let gf: Vec<f64> = g.data().iter().map(|v| v.as_f64()).collect();
        let d = mixed_direction(&mut rng, &gf);
        let eval = |s: f64, op: &mut O| -> Result<f64> {
            let mut moved = inputs.to_vec();
            for (v, dv) in moved[i].data_mut().iter_mut().zip(&d) {
                *v += T::lit(s * dv);
            }
            let refs: Vec<&Tensor<T>> = moved.iter().collect();
            Ok(op.forward(&refs)?.dot(&r))
        };
        let numeric = (eval(h, op)? - eval(-h, op)?) / (2.0 * h);
        let analytic: f64 = g.data().iter().zip(&d).map(|(a, b)| a.as_f64() * b).sum();
        out.push(GradCheck {
            target: format!("input[{i}]"),
            analytic,
            numeric,
            relative_error: relative_error(analytic, numeric, 1e-6),
        });
    }

    for (j, g) in grads.params.iter().enumerate() {
        let gf: Vec<f64> = g.data().iter().map(|v| v.as_f64()).collect();
        let d = mixed_direction(&mut rng, &gf);
        let eval = |s: f64, op: &mut O| -> Result<f64> {
            let saved = op.params()[j].clone();
            for (v, dv) in op.params_mut()[j].data_mut().iter_mut().zip(&d) {
                *v += T::lit(s * dv);
            }
            let y = op.forward(&refs)?.dot(&r);
            *op.params_mut()[j] = saved;
            Ok(y)
        };
        let numeric = (eval(h, op)? - eval(-h, op)?) / (2.0 * h);
        let analytic: f64 = g.data().iter().zip(&d).map(|(a, b)| a.as_f64() * b).sum();
        out.push(GradCheck {
            target: format!("param[{j}]"),
            analytic,
            numeric,
            relative_error: relative_error(analytic, numeric, 1e-6),
        });
    }
    Ok(out)
}
