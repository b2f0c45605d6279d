use super::{not_run, DifferentiableOp, Gradients, OpKind, Scalar, Tensor};
use crate::Result;

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| {
        if *v <= T::zero() {
            *v = T::zero()
        }
    });
    y
}

/// `dx = dy * [x > 0]`, so the subgradient at zero is zero.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let mut g = gy.clone();
    relu_backward_in_place(x.data(), g.data_mut());
    g
}

/// Masks `grad` by `[activation > 0]`; works with either the pre- or the
/// post-activation values since both are positive on the same set.
pub fn relu_backward_in_place<T: Scalar>(activation: &[T], grad: &mut [T]) {
    for (g, &x) in grad.iter_mut().zip(activation) {
        if x <= T::zero() {
            *g = T::zero();
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Relu<T> {
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Relu { cache: None }
    }
}

impl<T: Scalar> DifferentiableOp<T> for Relu<T> {
    fn kind(&self) -> OpKind {
        OpKind::Relu
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        self.cache = Some(inputs[0].clone());
        Ok(relu(inputs[0]))
    }

    fn backward(&self, upstream: &Tensor<T>) -> Result<Gradients<T>> {
        let x = self.cache.as_ref().ok_or_else(not_run)?;
        x.expect_shape(upstream.shape(), "relu upstream")?;
        Ok(Gradients {
            inputs: vec![relu_backward(x, upstream)],
            params: vec![],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_definition() {
        let x = Tensor::from_vec(&[3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_subgradients() {
        let x = Tensor::from_vec(&[3], vec![3.0f64, -3.0, 0.0]).unwrap();
        let g = relu_backward(&x, &Tensor::full(&[3], 1.0));
        assert_eq!(g.data(), &[1.0, 0.0, 0.0]);
    }
}
