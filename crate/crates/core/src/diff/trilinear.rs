use super::{not_run, DifferentiableOp, Gradients, OpKind, Scalar, Tensor};
use crate::Result;

/// Interpolation stencil along one axis.
#[derive(Clone, Copy, Debug)]
struct Axis<T> {
    i0: usize,
    i1: usize,
    frac: T,
    /// False when the coordinate was clamped (or the axis has one sample), in
    /// which case the value does not depend on it.
    moves: bool,
}

fn axis<T: Scalar>(u: T, len: usize) -> Axis<T> {
    if len == 1 {
        return Axis {
            i0: 0,
            i1: 0,
            frac: T::zero(),
            moves: false,
        };
    }
    let hi = T::lit((len - 1) as f64);
    let moves = u >= T::zero() && u <= hi;
    let uc = u.max(T::zero()).min(hi);
    let i0 = (uc.floor().as_f64() as usize).min(len - 2);
    Axis {
        i0,
        i1: i0 + 1,
        frac: uc - T::lit(i0 as f64),
        moves,
    }
}

#[inline]
fn corner_base(dims: [usize; 3], c: usize, x: usize, y: usize, z: usize) -> usize {
    ((x * dims[1] + y) * dims[2] + z) * c
}

/// Trilinear interpolation of a channels-last grid `[X, Y, Z, C]` at
/// continuous index coordinate `u` (cell centers at integers). Coordinates
/// are clamped to `[0, len - 1]` per axis. Writes `C` values into `out`.
pub fn sample_trilinear<T: Scalar>(grid: &[T], dims: [usize; 3], c: usize, u: [T; 3], out: &mut [T]) {
    let [ax, ay, az] = [axis(u[0], dims[0]), axis(u[1], dims[1]), axis(u[2], dims[2])];
    let one = T::one();
    let wx = [one - ax.frac, ax.frac];
    let wy = [one - ay.frac, ay.frac];
    let wz = [one - az.frac, az.frac];
    let xs = [ax.i0, ax.i1];
    let ys = [ay.i0, ay.i1];
    let zs = [az.i0, az.i1];
    out[..c].fill(T::zero());
    for a in 0..2 {
        for b in 0..2 {
            for d in 0..2 {
                let w = wx[a] * wy[b] * wz[d];
                let base = corner_base(dims, c, xs[a], ys[b], zs[d]);
                for (o, g) in out[..c].iter_mut().zip(&grid[base..base + c]) {
                    *o += w * *g;
                }
            }
        }
    }
}

/// Backward of [`sample_trilinear`]: accumulates `dL/dgrid` into `grad_grid`
/// (when given) and returns `dL/du`.
pub fn sample_trilinear_backward<T: Scalar>(
    grid: &[T],
    dims: [usize; 3],
    c: usize,
    u: [T; 3],
    gy: &[T],
    grad_grid: Option<&mut [T]>,
) -> [T; 3] {
    let [ax, ay, az] = [axis(u[0], dims[0]), axis(u[1], dims[1]), axis(u[2], dims[2])];
    let one = T::one();
    let w = [
        [one - ax.frac, ax.frac],
        [one - ay.frac, ay.frac],
        [one - az.frac, az.frac],
    ];
    let sign = [-one, one];
    let xs = [ax.i0, ax.i1];
    let ys = [ay.i0, ay.i1];
    let zs = [az.i0, az.i1];
    let mut gu = [T::zero(); 3];
    let mut grad_grid = grad_grid;
    for a in 0..2 {
        for b in 0..2 {
            for d in 0..2 {
                let base = corner_base(dims, c, xs[a], ys[b], zs[d]);
                let mut dot = T::zero();
                for (g, v) in gy[..c].iter().zip(&grid[base..base + c]) {
                    dot += *g * *v;
                }
                gu[0] += sign[a] * w[1][b] * w[2][d] * dot;
                gu[1] += w[0][a] * sign[b] * w[2][d] * dot;
                gu[2] += w[0][a] * w[1][b] * sign[d] * dot;
                if let Some(gg) = grad_grid.as_deref_mut() {
                    let wt = w[0][a] * w[1][b] * w[2][d];
                    for (dst, g) in gg[base..base + c].iter_mut().zip(&gy[..c]) {
                        *dst += wt * *g;
                    }
                }
            }
        }
    }
    for (g, ax) in gu.iter_mut().zip([ax, ay, az]) {
        if !ax.moves {
            *g = T::zero();
        }
    }
    gu
}

/// Op form: inputs `[grid: [X, Y, Z, C], coords: [Q, 3]]`, output `[Q, C]`.
#[derive(Clone, Debug, Default)]
pub struct TrilinearSample<T> {
    cache: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> TrilinearSample<T> {
    pub fn new() -> Self {
        TrilinearSample { cache: None }
    }

    pub fn apply(grid: &Tensor<T>, coords: &Tensor<T>) -> Result<Tensor<T>> {
        grid.expect_rank(4, "trilinear grid")?;
        coords.expect_rank(2, "trilinear coords")?;
        if coords.dim(1) != 3 {
            return Err(crate::Error::ShapeMismatch("coords must be [Q, 3]".into()));
        }
        let dims = [grid.dim(0), grid.dim(1), grid.dim(2)];
        let c = grid.dim(3);
        let q = coords.dim(0);
        let mut out = vec![T::zero(); q * c];
        for (i, row) in out.chunks_exact_mut(c.max(1)).enumerate().take(q) {
            let p = &coords.data()[3 * i..3 * i + 3];
            sample_trilinear(grid.data(), dims, c, [p[0], p[1], p[2]], row);
        }
        Tensor::from_vec(&[q, c], out)
    }
}

impl<T: Scalar> DifferentiableOp<T> for TrilinearSample<T> {
    fn kind(&self) -> OpKind {
        OpKind::TrilinearSample
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let y = Self::apply(inputs[0], inputs[1])?;
        self.cache = Some((inputs[0].clone(), inputs[1].clone()));
        Ok(y)
    }

    fn backward(&self, upstream: &Tensor<T>) -> Result<Gradients<T>> {
        let (grid, coords) = self.cache.as_ref().ok_or_else(not_run)?;
        let dims = [grid.dim(0), grid.dim(1), grid.dim(2)];
        let c = grid.dim(3);
        let q = coords.dim(0);
        upstream.expect_shape(&[q, c], "trilinear upstream")?;
        let mut gg = Tensor::zeros(grid.shape());
        let mut gc = Tensor::zeros(coords.shape());
        for i in 0..q {
            let p = &coords.data()[3 * i..3 * i + 3];
            let gu = sample_trilinear_backward(
                grid.data(),
                dims,
                c,
                [p[0], p[1], p[2]],
                &upstream.data()[i * c..(i + 1) * c],
                Some(gg.data_mut()),
            );
            gc.data_mut()[3 * i..3 * i + 3].copy_from_slice(&gu);
        }
        Ok(Gradients {
            inputs: vec![gg, gc],
            params: vec![],
        })
    }
}
