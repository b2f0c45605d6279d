use crate::diff::{Scalar, Tensor};
use crate::{Error, Result};

/// Adam with bias correction and a fixed learning rate.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(shapes: &[&[usize]], lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer holds {} slots, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let one = T::one();
        let bc1 = T::lit(1.0 - self.beta1.powf(self.t as f64));
        let bc2 = T::lit(1.0 - self.beta2.powf(self.t as f64));
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            g.expect_shape(p.shape(), "gradient")?;
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut p = Tensor::from_vec(&[3], vec![1.0f64, 1.0, 1.0]).unwrap();
        let g = Tensor::from_vec(&[3], vec![0.5, -2.0, 0.0]).unwrap();
        let mut adam = Adam::new(&[&[3]], 0.01);
        adam.step(vec![&mut p], &[g]).unwrap();
        // With bias correction the first update is lr * g / (|g| + eps).
        assert!((p.data()[0] - 0.99).abs() < 1e-9);
        assert!((p.data()[1] - 1.01).abs() < 1e-9);
        assert_eq!(p.data()[2], 1.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Tensor::from_vec(&[2], vec![3.0f64, -2.0]).unwrap();
        let mut adam = Adam::new(&[&[2]], 0.05);
        for _ in 0..2000 {
            let g = Tensor::from_vec(&[2], p.data().iter().map(|x| 2.0 * x).collect()).unwrap();
            adam.step(vec![&mut p], &[g]).unwrap();
        }
        assert!(p.data().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn zero_rate_is_a_no_op() {
        let mut p = Tensor::from_vec(&[2], vec![0.3f32, -0.7]).unwrap();
        let before = p.clone();
        let mut adam = Adam::new(&[&[2]], 0.0);
        for _ in 0..5 {
            adam.step(vec![&mut p], &[Tensor::from_vec(&[2], vec![1.0, -3.0]).unwrap()]).unwrap();
        }
        assert_eq!(p, before);
    }
}
