use super::gemm::gemm_lda;
use super::{not_run, DifferentiableOp, Gradients, OpKind, Scalar, Tensor};
use crate::{Error, Result};
use rand::Rng;
use std::collections::HashMap;

/// 3D convolution over `[B, C, X, Y, Z]` inputs with cubic kernels, zero
/// padding and a uniform stride.
///
/// The input channels may be split into a spatial part and a trailing
/// broadcast part: `forward(x, Some(v))` computes exactly
/// `conv(concat(x, broadcast(v)))` where `v: [B, Cb]` is repeated over every
/// spatial cell, without materializing the broadcast channels. Padding
/// applies to the broadcast channels like any other channel.
#[derive(Clone, Debug)]
pub struct Conv3d<T> {
    /// `[C_out, C_in, k, k, k]` with `C_in = C_grid + C_broadcast`.
    pub weight: Tensor<T>,
    /// `[C_out]`
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
    /// Number of trailing input channels fed by broadcast vectors.
    pub broadcast_channels: usize,
    cache: Option<Conv3dCache<T>>,
}

#[derive(Clone, Debug)]
pub struct Conv3dCache<T> {
    geom: ConvGeometry,
    batch: usize,
    cols: Vec<Vec<T>>,
    broadcast: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
struct AxisPlan {
    len_in: usize,
    len_out: usize,
    /// Per output index: class id into `masks`.
    class: Vec<usize>,
    /// Distinct tap-validity bitmasks.
    masks: Vec<u32>,
}

impl AxisPlan {
    fn new(len_in: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if len_in + 2 * pad < k {
            return None;
        }
        let len_out = (len_in + 2 * pad - k) / stride + 1;
        let mut masks = Vec::new();
        let mut class = Vec::with_capacity(len_out);
        for o in 0..len_out {
            let mut m = 0u32;
            for t in 0..k {
                let i = (o * stride + t) as isize - pad as isize;
                if i >= 0 && (i as usize) < len_in {
                    m |= 1 << t;
                }
            }
            let id = masks.iter().position(|&x| x == m).unwrap_or_else(|| {
                masks.push(m);
                masks.len() - 1
            });
            class.push(id);
        }
        Some(AxisPlan {
            len_in,
            len_out,
            class,
            masks,
        })
    }
}

#[derive(Clone, Debug)]
struct ConvGeometry {
    k: usize,
    stride: usize,
    pad: usize,
    axes: [AxisPlan; 3],
}

impl ConvGeometry {
    fn out_shape(&self) -> [usize; 3] {
        [self.axes[0].len_out, self.axes[1].len_out, self.axes[2].len_out]
    }

    fn in_cells(&self) -> usize {
        self.axes.iter().map(|a| a.len_in).product()
    }

    fn out_cells(&self) -> usize {
        self.axes.iter().map(|a| a.len_out).product()
    }

    fn taps(&self) -> usize {
        self.k * self.k * self.k
    }

    /// Combination class of every output cell and the tap-validity of each class.
    fn border_classes(&self) -> (Vec<usize>, Vec<Vec<bool>>) {
        let k = self.k;
        let mut ids: HashMap<(usize, usize, usize), usize> = HashMap::new();
        let mut valid: Vec<Vec<bool>> = Vec::new();
        let [ax, ay, az] = &self.axes;
        let mut cell_class = Vec::with_capacity(self.out_cells());
        for ox in 0..ax.len_out {
            for oy in 0..ay.len_out {
                for oz in 0..az.len_out {
                    let key = (ax.class[ox], ay.class[oy], az.class[oz]);
                    let id = *ids.entry(key).or_insert_with(|| {
                        let (mx, my, mz) = (ax.masks[key.0], ay.masks[key.1], az.masks[key.2]);
                        let mut v = vec![false; k * k * k];
                        for tx in 0..k {
                            for ty in 0..k {
                                for tz in 0..k {
                                    v[(tx * k + ty) * k + tz] = mx & (1 << tx) != 0
                                        && my & (1 << ty) != 0
                                        && mz & (1 << tz) != 0;
                                }
                            }
                        }
                        valid.push(v);
                        valid.len() - 1
                    });
                    cell_class.push(id);
                }
            }
        }
        (cell_class, valid)
    }
}

impl<T: Scalar> Conv3d<T> {
    pub fn new(
        weight: Tensor<T>,
        bias: Tensor<T>,
        stride: usize,
        padding: usize,
        broadcast_channels: usize,
    ) -> Result<Self> {
        weight.expect_rank(5, "conv3d weight")?;
        let k = weight.dim(2);
        if weight.dim(3) != k || weight.dim(4) != k || k == 0 || k > 31 {
            return Err(Error::ShapeMismatch(format!(
                "conv3d kernel must be cubic, got {:?}",
                weight.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidConfig("conv3d stride must be >= 1".into()));
        }
        if broadcast_channels > weight.dim(1) {
            return Err(Error::ShapeMismatch(
                "more broadcast channels than input channels".into(),
            ));
        }
        bias.expect_shape(&[weight.dim(0)], "conv3d bias")?;
        Ok(Conv3d {
            weight,
            bias,
            stride,
            padding,
            broadcast_channels,
            cache: None,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        grid_channels: usize,
        broadcast_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let cin = grid_channels + broadcast_channels;
        let bound = 1.0 / ((cin * kernel.pow(3)) as f64).sqrt();
        Conv3d::new(
            Tensor::uniform(&[out_channels, cin, kernel, kernel, kernel], bound, rng),
            Tensor::uniform(&[out_channels], bound, rng),
            stride,
            padding,
            broadcast_channels,
        )
        .expect("valid conv3d configuration")
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim(2)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn grid_channels(&self) -> usize {
        self.in_channels() - self.broadcast_channels
    }

    pub fn output_side(&self, input_side: usize) -> Option<usize> {
        AxisPlan::new(input_side, self.kernel(), self.stride, self.padding).map(|a| a.len_out)
    }

    fn geometry(&self, x: &Tensor<T>, broadcast: Option<&Tensor<T>>) -> Result<ConvGeometry> {
        x.expect_rank(5, "conv3d input")?;
        if x.dim(1) != self.grid_channels() {
            return Err(Error::ShapeMismatch(format!(
                "conv3d expects {} spatial input channels, got {}",
                self.grid_channels(),
                x.dim(1)
            )));
        }
        match (broadcast, self.broadcast_channels) {
            (None, 0) => {}
            (Some(v), cb) if cb > 0 => v.expect_shape(&[x.dim(0), cb], "conv3d broadcast input")?,
            (_, cb) => {
                return Err(Error::ShapeMismatch(format!(
                    "conv3d configured for {cb} broadcast channels but broadcast input presence differs"
                )))
            }
        }
        let k = self.kernel();
        let plan = |d: usize| {
            AxisPlan::new(x.dim(d), k, self.stride, self.padding).ok_or_else(|| {
                Error::ShapeMismatch(format!("conv3d input side {} smaller than kernel", x.dim(d)))
            })
        };
        Ok(ConvGeometry {
            k,
            stride: self.stride,
            pad: self.padding,
            axes: [plan(2)?, plan(3)?, plan(4)?],
        })
    }

    fn im2col(geom: &ConvGeometry, x: &[T], channels: usize) -> Vec<T> {
        let k = geom.k;
        let [ax, ay, az] = &geom.axes;
        let (yz_in, z_in) = (ay.len_in * az.len_in, az.len_in);
        let o_cells = geom.out_cells();
        let mut cols = vec![T::zero(); channels * geom.taps() * o_cells];
        let cell_in = geom.in_cells();
        for c in 0..channels {
            let xc = &x[c * cell_in..(c + 1) * cell_in];
            for tx in 0..k {
                for ty in 0..k {
                    for tz in 0..k {
                        let row = c * geom.taps() + (tx * k + ty) * k + tz;
                        let dst = &mut cols[row * o_cells..(row + 1) * o_cells];
                        for ox in 0..ax.len_out {
                            let ix = (ox * geom.stride + tx) as isize - geom.pad as isize;
                            if ix < 0 || ix as usize >= ax.len_in {
                                continue;
                            }
                            for oy in 0..ay.len_out {
                                let iy = (oy * geom.stride + ty) as isize - geom.pad as isize;
                                if iy < 0 || iy as usize >= ay.len_in {
                                    continue;
                                }
                                let src_base = ix as usize * yz_in + iy as usize * z_in;
                                let dst_base = (ox * ay.len_out + oy) * az.len_out;
                                for oz in 0..az.len_out {
                                    let iz = (oz * geom.stride + tz) as isize - geom.pad as isize;
                                    if iz >= 0 && (iz as usize) < az.len_in {
                                        dst[dst_base + oz] = xc[src_base + iz as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(geom: &ConvGeometry, cols: &[T], channels: usize, gx: &mut [T]) {
        let k = geom.k;
        let [ax, ay, az] = &geom.axes;
        let (yz_in, z_in) = (ay.len_in * az.len_in, az.len_in);
        let o_cells = geom.out_cells();
        let cell_in = geom.in_cells();
        for c in 0..channels {
            let gxc = &mut gx[c * cell_in..(c + 1) * cell_in];
            for tx in 0..k {
                for ty in 0..k {
                    for tz in 0..k {
                        let row = c * geom.taps() + (tx * k + ty) * k + tz;
                        let src = &cols[row * o_cells..(row + 1) * o_cells];
                        for ox in 0..ax.len_out {
                            let ix = (ox * geom.stride + tx) as isize - geom.pad as isize;
                            if ix < 0 || ix as usize >= ax.len_in {
                                continue;
                            }
                            for oy in 0..ay.len_out {
                                let iy = (oy * geom.stride + ty) as isize - geom.pad as isize;
                                if iy < 0 || iy as usize >= ay.len_in {
                                    continue;
                                }
                                let dst_base = ix as usize * yz_in + iy as usize * z_in;
                                let src_base = (ox * ay.len_out + oy) * az.len_out;
                                for oz in 0..az.len_out {
                                    let iz = (oz * geom.stride + tz) as isize - geom.pad as isize;
                                    if iz >= 0 && (iz as usize) < az.len_in {
                                        gxc[dst_base + iz as usize] += src[src_base + oz];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Per-tap broadcast contribution `U[co, t] = sum_c W[co, Cg + c, t] * v[c]`.
    fn broadcast_taps(&self, v: &[T]) -> Vec<T> {
        let (cout, cin, taps) = (self.out_channels(), self.in_channels(), self.kernel().pow(3));
        let cg = self.grid_channels();
        let w = self.weight.data();
        let mut u = vec![T::zero(); cout * taps];
        for co in 0..cout {
            for (c, &vc) in v.iter().enumerate() {
                let wrow = &w[(co * cin + cg + c) * taps..(co * cin + cg + c + 1) * taps];
                for t in 0..taps {
                    u[co * taps + t] += wrow[t] * vc;
                }
            }
        }
        u
    }

    pub fn forward_cached(
        &self,
        x: &Tensor<T>,
        broadcast: Option<&Tensor<T>>,
    ) -> Result<(Tensor<T>, Conv3dCache<T>)> {
        let geom = self.geometry(x, broadcast)?;
        let (b, cg, cout) = (x.dim(0), self.grid_channels(), self.out_channels());
        let taps = geom.taps();
        let (cells_in, cells_out) = (geom.in_cells(), geom.out_cells());
        let lda = self.in_channels() * taps;
        let mut out = vec![T::zero(); b * cout * cells_out];
        let mut all_cols = Vec::with_capacity(b);
        let border = if self.broadcast_channels > 0 {
            Some(geom.border_classes())
        } else {
            None
        };
        for bi in 0..b {
            let ob = &mut out[bi * cout * cells_out..(bi + 1) * cout * cells_out];
            for (co, chunk) in ob.chunks_exact_mut(cells_out).enumerate() {
                chunk.fill(self.bias.data()[co]);
            }
            let cols = Self::im2col(&geom, &x.data()[bi * cg * cells_in..(bi + 1) * cg * cells_in], cg);
            gemm_lda(false, cout, cells_out, cg * taps, self.weight.data(), lda, &cols, false, T::one(), ob, cells_out);
            if let (Some(v), Some((cell_class, valid))) = (broadcast, border.as_ref()) {
                let cb = self.broadcast_channels;
                let u = self.broadcast_taps(&v.data()[bi * cb..(bi + 1) * cb]);
                let sums: Vec<Vec<T>> = valid
                    .iter()
                    .map(|vmask| {
                        (0..cout)
                            .map(|co| {
                                let mut s = T::zero();
                                for t in 0..taps {
                                    if vmask[t] {
                                        s += u[co * taps + t];
                                    }
                                }
                                s
                            })
                            .collect()
                    })
                    .collect();
                for (co, chunk) in ob.chunks_exact_mut(cells_out).enumerate() {
                    for (o, val) in chunk.iter_mut().enumerate() {
                        *val += sums[cell_class[o]][co];
                    }
                }
            }
            all_cols.push(cols);
        }
        let [ox, oy, oz] = geom.out_shape();
        let y = Tensor::from_vec(&[b, cout, ox, oy, oz], out)?;
        Ok((
            y,
            Conv3dCache {
                geom,
                batch: b,
                cols: all_cols,
                broadcast: broadcast.cloned(),
            },
        ))
    }

    /// Returns `(dx, d_broadcast, dW, db)`.
    #[allow(clippy::type_complexity)]
    pub fn backward(
        &self,
        cache: &Conv3dCache<T>,
        gy: &Tensor<T>,
        need_input_grad: bool,
    ) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
        let geom = &cache.geom;
        let (b, cg, cout, cin) = (cache.batch, self.grid_channels(), self.out_channels(), self.in_channels());
        let taps = geom.taps();
        let (cells_in, cells_out) = (geom.in_cells(), geom.out_cells());
        let [ox, oy, oz] = geom.out_shape();
        gy.expect_shape(&[b, cout, ox, oy, oz], "conv3d upstream")?;
        let lda = cin * taps;

        let mut gw = vec![T::zero(); cout * cin * taps];
        let mut gb = vec![T::zero(); cout];
        let mut gx = if need_input_grad {
            Some(vec![T::zero(); b * cg * cells_in])
        } else {
            None
        };
        let cb = self.broadcast_channels;
        let mut gv = vec![T::zero(); b * cb];
        let border = if cb > 0 { Some(geom.border_classes()) } else { None };

        for bi in 0..b {
            let gyb = &gy.data()[bi * cout * cells_out..(bi + 1) * cout * cells_out];
            for (co, chunk) in gyb.chunks_exact(cells_out).enumerate() {
                let mut s = T::zero();
                for v in chunk {
                    s += *v;
                }
                gb[co] += s;
            }
            // dW_grid += gy_b [Cout, O] * cols^T [O, Cg*K]
            let cols = &cache.cols[bi];
            gemm_lda(false, cout, cg * taps, cells_out, gyb, cells_out, cols, true, T::one(), &mut gw, lda);
            if let Some(gx) = gx.as_mut() {
                // dcols = W_grid^T [Cg*K, Cout] * gy_b [Cout, O]
                let mut gcols = vec![T::zero(); cg * taps * cells_out];
                gemm_lda(true, cg * taps, cells_out, cout, self.weight.data(), lda, gyb, false, T::zero(), &mut gcols, cells_out);
                Self::col2im(geom, &gcols, cg, &mut gx[bi * cg * cells_in..(bi + 1) * cg * cells_in]);
            }
            if let (Some(v), Some((cell_class, valid))) = (cache.broadcast.as_ref(), border.as_ref()) {
                let vb = &v.data()[bi * cb..(bi + 1) * cb];
                let mut class_sums = vec![vec![T::zero(); cout]; valid.len()];
                for (co, chunk) in gyb.chunks_exact(cells_out).enumerate() {
                    for (o, g) in chunk.iter().enumerate() {
                        class_sums[cell_class[o]][co] += *g;
                    }
                }
                let mut gu = vec![T::zero(); cout * taps];
                for (cls, vmask) in valid.iter().enumerate() {
                    for co in 0..cout {
                        let s = class_sums[cls][co];
                        for t in 0..taps {
                            if vmask[t] {
                                gu[co * taps + t] += s;
                            }
                        }
                    }
                }
                let w = self.weight.data();
                for co in 0..cout {
                    for c in 0..cb {
                        let base = (co * cin + cg + c) * taps;
                        let mut acc = T::zero();
                        for t in 0..taps {
                            let g = gu[co * taps + t];
                            gw[base + t] += g * vb[c];
                            acc += w[base + t] * g;
                        }
                        gv[bi * cb + c] += acc;
                    }
                }
            }
        }
        let gx = match gx {
            Some(d) => Some(Tensor::from_vec(
                &[b, cg, geom.axes[0].len_in, geom.axes[1].len_in, geom.axes[2].len_in],
                d,
            )?),
            None => None,
        };
        let gv = if cb > 0 {
            Some(Tensor::from_vec(&[b, cb], gv)?)
        } else {
            None
        };
        Ok((gx, gv, Tensor::from_vec(self.weight.shape(), gw)?, Tensor::from_vec(&[cout], gb)?))
    }
}

impl<T: Scalar> DifferentiableOp<T> for Conv3d<T> {
    fn kind(&self) -> OpKind {
        OpKind::Conv3d
    }

    /// Inputs: `[x]` or `[x, broadcast]`.
    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let (y, cache) = self.forward_cached(inputs[0], inputs.get(1).copied())?;
        self.cache = Some(cache);
        Ok(y)
    }

    fn backward(&self, upstream: &Tensor<T>) -> Result<Gradients<T>> {
        let cache = self.cache.as_ref().ok_or_else(not_run)?;
        let (gx, gv, gw, gb) = Conv3d::backward(self, cache, upstream, true)?;
        let mut inputs = vec![gx.expect("input gradient requested")];
        inputs.extend(gv);
        Ok(Gradients {
            inputs,
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
