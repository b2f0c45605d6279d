use super::{not_run, DifferentiableOp, Gradients, OpKind, Scalar, Tensor};
use crate::{Error, Result};

/// Max over the point axis: `[N, C] -> [C]`. Ties resolve to the lowest point
/// index, which affects only where gradient is routed, never the value.
#[derive(Clone, Debug, Default)]
pub struct MaxPoolOverPoints {
    cache: Option<(usize, Vec<usize>)>,
}

impl MaxPoolOverPoints {
    pub fn new() -> Self {
        MaxPoolOverPoints { cache: None }
    }

    pub fn forward_cached<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
        x.expect_rank(2, "maxpool input")?;
        let (n, c) = (x.dim(0), x.dim(1));
        if n == 0 {
            return Err(Error::DegenerateInput("max pooling over zero points".into()));
        }
        let d = x.data();
        let mut best: Vec<T> = d[..c].to_vec();
        let mut arg = vec![0usize; c];
        for i in 1..n {
            let row = &d[i * c..(i + 1) * c];
            for j in 0..c {
                if row[j] > best[j] {
                    best[j] = row[j];
                    arg[j] = i;
                }
            }
        }
        Ok((Tensor::from_vec(&[c], best)?, arg))
    }

    /// Scatters `gy: [C]` back to the arg-max rows of an `[n, C]` gradient.
    pub fn backward<T: Scalar>(n: usize, argmax: &[usize], gy: &Tensor<T>) -> Result<Tensor<T>> {
        let c = argmax.len();
        gy.expect_shape(&[c], "maxpool upstream")?;
        let mut gx = Tensor::zeros(&[n, c]);
        for (j, &i) in argmax.iter().enumerate() {
            gx.data_mut()[i * c + j] += gy.data()[j];
        }
        Ok(gx)
    }
}

impl<T: Scalar> DifferentiableOp<T> for MaxPoolOverPoints {
    fn kind(&self) -> OpKind {
        OpKind::MaxPoolOverPoints
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let (y, arg) = Self::forward_cached(inputs[0])?;
        self.cache = Some((inputs[0].dim(0), arg));
        Ok(y)
    }

    fn backward(&self, upstream: &Tensor<T>) -> Result<Gradients<T>> {
        let (n, arg) = self.cache.as_ref().ok_or_else(not_run)?;
        Ok(Gradients {
            inputs: vec![Self::backward(*n, arg, upstream)?],
            params: vec![],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_columnwise_maximum() {
        let x = Tensor::from_vec(&[3, 2], vec![1.0f32, 5.0, 4.0, -1.0, 2.0, 5.0]).unwrap();
        let (y, arg) = MaxPoolOverPoints::forward_cached(&x).unwrap();
        assert_eq!(y.data(), &[4.0, 5.0]);
        assert_eq!(arg, vec![1, 0]);
    }

    #[test]
    fn permutation_is_bit_identical() {
        let rows: Vec<[f32; 3]> = (0..50).map(|i| [(i as f32 * 0.7).sin(), (i as f32).cos(), i as f32 * 1e-3]).collect();
        let flat = |r: &[[f32; 3]]| Tensor::from_vec(&[r.len(), 3], r.iter().flatten().copied().collect()).unwrap();
        let (a, _) = MaxPoolOverPoints::forward_cached(&flat(&rows)).unwrap();
        let mut rev = rows.clone();
        rev.reverse();
        rev.swap(3, 17);
        let (b, _) = MaxPoolOverPoints::forward_cached(&flat(&rev)).unwrap();
        assert_eq!(a, b);
    }
}
