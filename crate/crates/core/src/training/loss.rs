use crate::diff::Scalar;
use crate::{Error, Result};

/// `min(v, delta)` that keeps NaN, so a diverged prediction poisons the loss.
fn clamp(v: f64, delta: f64) -> f64 {
    if v.is_nan() {
        v
    } else {
        v.min(delta)
    }
}

fn check(n_pred: usize, n_target: usize, delta: f64) -> Result<()> {
    if n_pred != n_target {
        return Err(Error::ShapeMismatch(format!("{n_pred} predictions for {n_target} targets")));
    }
    if !(delta > 0.0) {
        return Err(Error::InvalidConfig(format!("delta must be positive, got {delta}")));
    }
    Ok(())
}

/// `sum_i |min(pred_i, delta) - min(target_i, delta)|`.
pub fn clamped_loss<T: Scalar>(pred: &[T], targets: &[f64], delta: f64) -> Result<f64> {
    check(pred.len(), targets.len(), delta)?;
    Ok(pred
        .iter()
        .zip(targets)
        .map(|(p, t)| (clamp(p.as_f64(), delta) - clamp(*t, delta)).abs())
        .sum())
}

/// Loss and its gradient with respect to each prediction. The gradient is
/// zero where the prediction is clamped (`pred >= delta`) and where the two
/// clamped values agree.
pub fn clamped_loss_grad<T: Scalar>(pred: &[T], targets: &[f64], delta: f64) -> Result<(f64, Vec<T>)> {
    check(pred.len(), targets.len(), delta)?;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(targets) {
        let p = p.as_f64();
        let diff = clamp(p, delta) - clamp(*t, delta);
        loss += diff.abs();
        let g = if p < delta && diff != 0.0 { diff.signum() } else { 0.0 };
        grad.push(T::lit(g));
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_examples() {
        let d = 0.1;
        assert_eq!(clamped_loss(&[0.3f64, 0.02], &[0.3, 0.02], d).unwrap(), 0.0);
        assert_eq!(clamped_loss(&[5.0 * d], &[2.0 * d], d).unwrap(), 0.0);
        let l = clamped_loss(&[0.5 * d], &[0.1 * d], d).unwrap();
        assert!((l - 0.4 * d).abs() < 1e-15);
    }

    #[test]
    fn gradient_signs() {
        let (_, g) = clamped_loss_grad(&[0.05f64, 0.01, 0.2, 0.03], &[0.01, 0.05, 0.01, 0.03], 0.1).unwrap();
        assert_eq!(g, vec![1.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn nan_predictions_propagate() {
        assert!(clamped_loss(&[f32::NAN], &[0.0], 0.1).unwrap().is_nan());
        assert!(clamped_loss_grad(&[0.0f64], &[f64::NAN], 0.1).unwrap().0.is_nan());
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(clamped_loss(&[0.0f32], &[], 0.1).is_err());
        assert!(clamped_loss::<f32>(&[], &[], 0.0).is_err());
    }
}
