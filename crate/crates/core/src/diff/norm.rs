use super::{not_run, DifferentiableOp, Gradients, OpKind, Scalar, Tensor};
use crate::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Batch normalization over `[B, C, ...spatial]`, statistics per channel
/// across batch and space. Training mode normalizes with batch statistics and
/// updates the running estimates by an exponential moving average; eval mode
/// uses the running estimates and is an error before the first training step.
#[derive(Clone, Debug)]
pub struct BatchNorm3d<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    /// True once running statistics hold at least one batch (or were loaded).
    pub stats_ready: bool,
    pub training: bool,
    cache: Option<BatchNormCache<T>>,
}

#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    shape: Vec<usize>,
    /// Normalized input (batch statistics in training, running ones in eval).
    xhat: Vec<T>,
    inv_std: Vec<T>,
    training: bool,
}

impl<T: Scalar> BatchNorm3d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm3d {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            stats_ready: false,
            training: true,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn set_running_stats(&mut self, mean: Tensor<T>, var: Tensor<T>) -> Result<()> {
        mean.expect_shape(&[self.channels()], "running mean")?;
        var.expect_shape(&[self.channels()], "running var")?;
        self.running_mean = mean;
        self.running_var = var;
        self.stats_ready = true;
        Ok(())
    }

    fn layout(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        if x.shape().len() < 2 || x.dim(1) != self.channels() {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm over {} channels got input {:?}",
                self.channels(),
                x.shape()
            )));
        }
        let spatial: usize = x.shape()[2..].iter().product();
        Ok((x.dim(0), self.channels(), spatial))
    }

    /// Forward pass. In training mode this updates the running statistics.
    pub fn forward_cached(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, BatchNormCache<T>)> {
        let (b, c, s) = self.layout(x)?;
        let n = b * s;
        let eps = T::lit(BN_EPS);
        let xd = x.data();
        let mut y = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); c];
        let mut xhat = vec![T::zero(); xd.len()];
        if self.training {
            let m = T::lit(BN_MOMENTUM);
            for ch in 0..c {
                let mut sum = 0.0f64;
                for bi in 0..b {
                    let base = (bi * c + ch) * s;
                    sum += xd[base..base + s].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mean = sum / n as f64;
                let mut sq = 0.0f64;
                for bi in 0..b {
                    let base = (bi * c + ch) * s;
                    sq += xd[base..base + s]
                        .iter()
                        .map(|v| (v.as_f64() - mean).powi(2))
                        .sum::<f64>();
                }
                let var = sq / n as f64;
                let is = T::one() / (T::lit(var) + eps).sqrt();
                inv_std[ch] = is;
                let (g, bt, mu) = (self.gamma.data()[ch], self.beta.data()[ch], T::lit(mean));
                for bi in 0..b {
                    let base = (bi * c + ch) * s;
                    for i in base..base + s {
                        let h = (xd[i] - mu) * is;
                        xhat[i] = h;
                        y[i] = g * h + bt;
                    }
                }
                let unbiased = if n > 1 { var * n as f64 / (n - 1) as f64 } else { var };
                let rm = &mut self.running_mean.data_mut()[ch];
                *rm = (T::one() - m) * *rm + m * mu;
                let rv = &mut self.running_var.data_mut()[ch];
                *rv = (T::one() - m) * *rv + m * T::lit(unbiased);
            }
            self.stats_ready = true;
        } else {
            if !self.stats_ready {
                return Err(Error::InvalidState(
                    "batchnorm in eval mode before any training step".into(),
                ));
            }
            for ch in 0..c {
                let is = T::one() / (self.running_var.data()[ch] + eps).sqrt();
                inv_std[ch] = is;
                let (g, bt, mu) = (self.gamma.data()[ch], self.beta.data()[ch], self.running_mean.data()[ch]);
                for bi in 0..b {
                    let base = (bi * c + ch) * s;
                    for i in base..base + s {
                        let h = (xd[i] - mu) * is;
                        xhat[i] = h;
                        y[i] = g * h + bt;
                    }
                }
            }
        }
        let cache = BatchNormCache {
            shape: x.shape().to_vec(),
            xhat,
            inv_std,
            training: self.training,
        };
        Ok((Tensor::from_vec(x.shape(), y)?, cache))
    }

    /// Eval-mode forward without touching any state.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut copy = self.clone();
        copy.training = false;
        copy.cache = None;
        Ok(copy.forward_cached(x)?.0)
    }

    /// Returns `(dx, dgamma, dbeta)`.
    pub fn backward(
        &self,
        cache: &BatchNormCache<T>,
        gy: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        gy.expect_shape(&cache.shape, "batchnorm upstream")?;
        let (b, c) = (cache.shape[0], cache.shape[1]);
        let s: usize = cache.shape[2..].iter().product();
        let n = T::lit((b * s) as f64);
        let g = gy.data();
        let mut gx = vec![T::zero(); g.len()];
        let mut ggamma = vec![T::zero(); c];
        let mut gbeta = vec![T::zero(); c];
        for ch in 0..c {
            let gamma = self.gamma.data()[ch];
            let is = cache.inv_std[ch];
            let idx = (0..b).flat_map(|bi| {
                let base = (bi * c + ch) * s;
                base..base + s
            });
            if cache.training {
                let (mut sg, mut sgx) = (T::zero(), T::zero());
                for i in idx.clone() {
                    sg += g[i];
                    sgx += g[i] * cache.xhat[i];
                }
                ggamma[ch] = sgx;
                gbeta[ch] = sg;
                let k = gamma * is / n;
                for i in idx {
                    gx[i] = k * (n * g[i] - sg - cache.xhat[i] * sgx);
                }
            } else {
                let (mut sg, mut sgx) = (T::zero(), T::zero());
                for i in idx {
                    sg += g[i];
                    sgx += g[i] * cache.xhat[i];
                    gx[i] = g[i] * gamma * is;
                }
                ggamma[ch] = sgx;
                gbeta[ch] = sg;
            }
        }
        Ok((
            Tensor::from_vec(&cache.shape, gx)?,
            Tensor::from_vec(&[c], ggamma)?,
            Tensor::from_vec(&[c], gbeta)?,
        ))
    }
}

impl<T: Scalar> DifferentiableOp<T> for BatchNorm3d<T> {
    fn kind(&self) -> OpKind {
        OpKind::BatchNorm3d
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let (y, cache) = self.forward_cached(inputs[0])?;
        self.cache = Some(cache);
        Ok(y)
    }

    fn backward(&self, upstream: &Tensor<T>) -> Result<Gradients<T>> {
        let cache = self.cache.as_ref().ok_or_else(not_run)?;
        let (gx, gg, gb) = BatchNorm3d::backward(self, cache, upstream)?;
        Ok(Gradients {
            inputs: vec![gx],
            params: vec![gg, gb],
        })
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn training_output_is_standardized() {
        let mut bn = BatchNorm3d::<f64>::new(2);
        let x = Tensor::from_vec(&[2, 2, 2], vec![1.0, 3.0, 10.0, 10.0, 5.0, 7.0, 20.0, 40.0]).unwrap();
        let (y, _) = bn.forward_cached(&x).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..2).flat_map(|b| (0..2).map(move |s| (b, s))).map(|(b, s)| y.data()[(b * 2 + ch) * 2 + s]).collect();
            let mean: f64 = vals.iter().sum::<f64>() / 4.0;
            let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
        // running mean moved 10% toward the batch mean (channel 0 mean = 4).
        assert!((bn.running_mean.data()[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn eval_before_training_is_an_error() {
        let mut bn = BatchNorm3d::<f32>::new(3);
        bn.training = false;
        assert!(bn.forward_cached(&Tensor::zeros(&[1, 3, 2])).is_err());
    }

    #[test]
    fn eval_with_zero_stats_keeps_zeros() {
        let mut bn = BatchNorm3d::<f32>::new(2);
        bn.training = false;
        bn.set_running_stats(Tensor::zeros(&[2]), Tensor::full(&[2], 1.0)).unwrap();
        let (y, _) = bn.forward_cached(&Tensor::zeros(&[1, 2, 8])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
