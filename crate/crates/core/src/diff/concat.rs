use super::{not_run, DifferentiableOp, Gradients, OpKind, Scalar, Tensor};
use crate::{Error, Result};

/// Concatenation of `[Q, a_i]` tensors along the feature axis.
#[derive(Clone, Debug, Default)]
pub struct Concat {
    widths: Vec<usize>,
}

impl Concat {
    pub fn new() -> Self {
        Concat { widths: Vec::new() }
    }

    pub fn concat<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::ShapeMismatch("concat of zero tensors".into()))?;
        let q = first.dim(0);
        for p in parts {
            p.expect_rank(2, "concat input")?;
            if p.dim(0) != q {
                return Err(Error::ShapeMismatch(format!(
                    "concat row counts differ: {q} vs {}",
                    p.dim(0)
                )));
            }
        }
        let total: usize = parts.iter().map(|p| p.dim(1)).sum();
        let mut out = Vec::with_capacity(q * total);
        for r in 0..q {
            for p in parts {
                let w = p.dim(1);
                out.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
            }
        }
        Tensor::from_vec(&[q, total], out)
    }

    pub fn split<T: Scalar>(gy: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
        let total: usize = widths.iter().sum();
        gy.expect_rank(2, "concat upstream")?;
        if gy.dim(1) != total {
            return Err(Error::ShapeMismatch("concat upstream width".into()));
        }
        let q = gy.dim(0);
        let mut offset = 0;
        let mut out = Vec::with_capacity(widths.len());
        for &w in widths {
            let mut d = Vec::with_capacity(q * w);
            for r in 0..q {
                d.extend_from_slice(&gy.data()[r * total + offset..r * total + offset + w]);
            }
            out.push(Tensor::from_vec(&[q, w], d)?);
            offset += w;
        }
        Ok(out)
    }
}

impl<T: Scalar> DifferentiableOp<T> for Concat {
    fn kind(&self) -> OpKind {
        OpKind::Concat
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let y = Self::concat(inputs)?;
        self.widths = inputs.iter().map(|p| p.dim(1)).collect();
        Ok(y)
    }

    fn backward(&self, upstream: &Tensor<T>) -> Result<Gradients<T>> {
        if self.widths.is_empty() {
            return Err(not_run());
        }
        Ok(Gradients {
            inputs: Self::split(upstream, &self.widths)?,
            params: vec![],
        })
    }
}

/// Explicit channel concatenation of a `[B, C, ...]` grid with `[B, Cb]`
/// vectors repeated over every spatial cell. Reference for the fused path in
/// [`super::Conv3d`].
pub fn concat_broadcast_channels<T: Scalar>(grid: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c) = (grid.dim(0), grid.dim(1));
    v.expect_rank(2, "broadcast vector")?;
    if v.dim(0) != b {
        return Err(Error::ShapeMismatch("broadcast batch size".into()));
    }
    let cb = v.dim(1);
    let s: usize = grid.shape()[2..].iter().product();
    let mut out = Vec::with_capacity(b * (c + cb) * s);
    for bi in 0..b {
        out.extend_from_slice(&grid.data()[bi * c * s..(bi + 1) * c * s]);
        for ci in 0..cb {
            out.extend(std::iter::repeat_n(v.data()[bi * cb + ci], s));
        }
    }
    let mut shape = grid.shape().to_vec();
    shape[1] = c + cb;
    Tensor::from_vec(&shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_split_restores_parts() {
        let a = Tensor::from_vec(&[2, 1], vec![1.0f64, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = Concat::concat(&[&a, &b]).unwrap();
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let parts = Concat::split(&c, &[1, 2]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn row_mismatch_is_rejected() {
        let a = Tensor::<f32>::zeros(&[2, 1]);
        let b = Tensor::<f32>::zeros(&[3, 1]);
        assert!(Concat::concat(&[&a, &b]).is_err());
    }
}
