use super::{gemm, not_run, DifferentiableOp, Gradients, OpKind, Scalar, Tensor};
use crate::Result;
use rand::Rng;

/// Fully connected layer `y = x W^T + b` over rows of a `[B, in]` input.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    /// `[out, in]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
    cache: Option<Tensor<T>>,
}

/// Activations `backward` needs: the layer input.
#[derive(Clone, Debug)]
pub struct LinearCache<T> {
    pub input: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        weight.expect_rank(2, "linear weight")?;
        bias.expect_shape(&[weight.dim(0)], "linear bias")?;
        Ok(Linear {
            weight,
            bias,
            cache: None,
        })
    }

    /// Uniform `+-1/sqrt(in)` initialization for weights and bias.
    pub fn init<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Linear {
            weight: Tensor::uniform(&[outputs, inputs], bound, rng),
            bias: Tensor::uniform(&[outputs], bound, rng),
            cache: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn out_features(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.expect_rank(2, "linear input")?;
        if x.dim(1) != self.in_features() {
            return Err(crate::Error::ShapeMismatch(format!(
                "linear expects {} input features, got {}",
                self.in_features(),
                x.dim(1)
            )));
        }
        let (b, i, o) = (x.dim(0), self.in_features(), self.out_features());
        let mut y = vec![T::zero(); b * o];
        for row in y.chunks_exact_mut(o) {
            row.copy_from_slice(self.bias.data());
        }
        gemm(false, true, b, o, i, T::one(), x.data(), self.weight.data(), T::one(), &mut y);
        Tensor::from_vec(&[b, o], y)
    }

    pub fn forward_cached(&self, x: Tensor<T>) -> Result<(Tensor<T>, LinearCache<T>)> {
        let y = self.forward_eval(&x)?;
        Ok((y, LinearCache { input: x }))
    }

    /// Gradient with respect to the input only.
    pub fn backward_input(&self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        gy.expect_rank(2, "linear upstream")?;
        let (b, i, o) = (gy.dim(0), self.in_features(), self.out_features());
        let mut gx = vec![T::zero(); b * i];
        gemm(false, false, b, i, o, T::one(), gy.data(), self.weight.data(), T::zero(), &mut gx);
        Tensor::from_vec(&[b, i], gx)
    }

    /// Returns `(dx, dW, db)`.
    pub fn backward(
        &self,
        cache: &LinearCache<T>,
        gy: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let x = &cache.input;
        gy.expect_shape(&[x.dim(0), self.out_features()], "linear upstream")?;
        let gx = self.backward_input(gy)?;
        let (gw, gb) = self.param_grads(x, gy);
        Ok((gx, gw, gb))
    }

    pub fn param_grads(&self, x: &Tensor<T>, gy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let (b, i, o) = (x.dim(0), self.in_features(), self.out_features());
        let mut gw = vec![T::zero(); o * i];
        gemm(true, false, o, i, b, T::one(), gy.data(), x.data(), T::zero(), &mut gw);
        let mut gb = vec![T::zero(); o];
        for row in gy.data().chunks_exact(o) {
            for (g, v) in gb.iter_mut().zip(row) {
                *g += *v;
            }
        }
        (
            Tensor::from_vec(&[o, i], gw).expect("shape"),
            Tensor::from_vec(&[o], gb).expect("shape"),
        )
    }
}

impl<T: Scalar> DifferentiableOp<T> for Linear<T> {
    fn kind(&self) -> OpKind {
        OpKind::Linear
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let (y, cache) = self.forward_cached(inputs[0].clone())?;
        self.cache = Some(cache.input);
        Ok(y)
    }

    fn backward(&self, upstream: &Tensor<T>) -> Result<Gradients<T>> {
        let input = self.cache.clone().ok_or_else(not_run)?;
        let (gx, gw, gb) = Linear::backward(self, &LinearCache { input }, upstream)?;
        Ok(Gradients {
            inputs: vec![gx],
            params: vec![gw, gb],
        })
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights_pass_input_through() {
        let mut w = Tensor::<f64>::zeros(&[3, 3]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let lin = Linear::new(w, Tensor::zeros(&[3])).unwrap();
        let x = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 4.0, -1.0]).unwrap();
        assert_eq!(lin.forward_eval(&x).unwrap(), x);
    }

    #[test]
    fn wrong_width_is_rejected() {
        let lin = Linear::<f32>::new(Tensor::zeros(&[2, 3]), Tensor::zeros(&[2])).unwrap();
        assert!(lin.forward_eval(&Tensor::zeros(&[1, 4])).is_err());
    }
}
