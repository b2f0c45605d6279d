use super::config::{ModelConfig, POINT_LAYERS};
use super::latent::{feature_coord_grad, sample_features, scatter_feature_grad, FeatureGrid, Latent};
use crate::diff::checkpoint::Checkpoint;
use crate::diff::{
    relu_backward_in_place, BatchNorm3d, BatchNormCache, Conv3d, Conv3dCache, Linear, MaxPoolOverPoints, Scalar,
    Tensor,
};
use crate::geom::{PointCloud, Vec3, VoxelGrid};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Queries decoded per batch in evaluation.
pub const DECODE_CHUNK: usize = 1024;

/// One shape as seen by the encoders.
#[derive(Clone, Debug)]
pub struct EncoderInput<T> {
    /// `[N, 3]` normalized points.
    pub points: Tensor<T>,
    pub occupancy: FeatureGrid<T>,
}

impl<T: Scalar> EncoderInput<T> {
    pub fn new(cloud: &PointCloud, grid: &VoxelGrid) -> Self {
        let data: Vec<T> = cloud
            .points()
            .iter()
            .flat_map(|p| [T::lit(p.x), T::lit(p.y), T::lit(p.z)])
            .collect();
        EncoderInput {
            points: Tensor::from_vec(&[cloud.len(), 3], data).expect("3 coordinates per point"),
            occupancy: FeatureGrid::from_occupancy(grid),
        }
    }
}

#[derive(Clone, Debug)]
pub struct VoxelBlock<T> {
    pub conv1: Conv3d<T>,
    pub bn1: BatchNorm3d<T>,
    pub conv2: Conv3d<T>,
    pub bn2: BatchNorm3d<T>,
}

/// The full network: point encoder, fused voxel encoder and decoder.
#[derive(Clone, Debug)]
pub struct UdfModel<T> {
    cfg: ModelConfig,
    /// Seven layers; empty in `wp` mode.
    pub point_layers: Vec<Linear<T>>,
    pub blocks: Vec<VoxelBlock<T>>,
    /// Hidden layers followed by the scalar output layer.
    pub decoder: Vec<Linear<T>>,
}

struct PointTape<T> {
    /// Outputs of the seven layers (post-ReLU except the last).
    acts: Vec<Tensor<T>>,
    argmax: Vec<Vec<usize>>,
}

struct BlockTape<T> {
    c1: Conv3dCache<T>,
    r1: Tensor<T>,
    b1: BatchNormCache<T>,
    c2: Conv3dCache<T>,
    r2: Tensor<T>,
    b2: BatchNormCache<T>,
}

/// Everything the training backward pass needs.
pub struct TrainTape<T> {
    inputs_n: Vec<usize>,
    point_inputs: Vec<Tensor<T>>,
    points: Vec<PointTape<T>>,
    blocks: Vec<BlockTape<T>>,
    latents: Vec<Latent<T>>,
    /// Query offsets per shape into the flattened query list.
    bounds: Vec<usize>,
    queries: Vec<[T; 3]>,
    /// Input of each decoder layer.
    dec_in: Vec<Tensor<T>>,
}

fn to_t<T: Scalar>(p: &Vec3) -> [T; 3] {
    [T::lit(p.x), T::lit(p.y), T::lit(p.z)]
}

fn relu_in_place<T: Scalar>(t: &mut Tensor<T>) {
    t.data_mut().iter_mut().for_each(|v| {
        if *v <= T::zero() {
            *v = T::zero()
        }
    });
}

impl<T: Scalar> UdfModel<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut point_layers = Vec::new();
        if cfg.has_point_encoder() {
            let mut width = 3;
            for &w in &cfg.point.layer_widths {
                point_layers.push(Linear::init(width, w, &mut rng));
                width = w;
            }
        }
        let blocks = cfg
            .block_plans()
            .iter()
            .map(|p| VoxelBlock {
                conv1: Conv3d::init(p.in_channels, p.fused_width, p.out_channels, 3, 1, 1, &mut rng),
                bn1: BatchNorm3d::new(p.out_channels),
                conv2: Conv3d::init(p.out_channels, 0, p.out_channels, 3, p.stride, 1, &mut rng),
                bn2: BatchNorm3d::new(p.out_channels),
            })
            .collect();
        let mut decoder = Vec::new();
        let mut width = cfg.feature_width();
        for &w in &cfg.decoder.layer_widths {
            decoder.push(Linear::init(width, w, &mut rng));
            width = w;
        }
        decoder.push(Linear::init(width, 1, &mut rng));
        Ok(UdfModel {
            cfg,
            point_layers,
            blocks,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn d(&self) -> T {
        T::lit(self.cfg.decoder.neighborhood_distance)
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.point_layers.len() {
            names.push(format!("point.{i}.weight"));
            names.push(format!("point.{i}.bias"));
        }
        for i in 0..self.blocks.len() {
            for part in [
                "conv1.weight",
                "conv1.bias",
                "bn1.gamma",
                "bn1.beta",
                "conv2.weight",
                "conv2.bias",
                "bn2.gamma",
                "bn2.beta",
            ] {
                names.push(format!("voxel.{i}.{part}"));
            }
        }
        for i in 0..self.decoder.len() {
            names.push(format!("decoder.{i}.weight"));
            names.push(format!("decoder.{i}.bias"));
        }
        names
    }

    /// Learnable tensors in the order of [`Self::param_names`].
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for l in &self.point_layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        for b in &self.blocks {
            out.extend([
                &b.conv1.weight,
                &b.conv1.bias,
                &b.bn1.gamma,
                &b.bn1.beta,
                &b.conv2.weight,
                &b.conv2.bias,
                &b.bn2.gamma,
                &b.bn2.beta,
            ]);
        }
        for l in &self.decoder {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.point_layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        for b in &mut self.blocks {
            out.extend([
                &mut b.conv1.weight,
                &mut b.conv1.bias,
                &mut b.bn1.gamma,
                &mut b.bn1.beta,
                &mut b.conv2.weight,
                &mut b.conv2.bias,
                &mut b.bn2.gamma,
                &mut b.bn2.beta,
            ]);
        }
        for l in &mut self.decoder {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    fn batch_norms(&self) -> impl Iterator<Item = (String, &BatchNorm3d<T>)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| [(format!("voxel.{i}.bn1"), &b.bn1), (format!("voxel.{i}.bn2"), &b.bn2)])
    }

    fn batch_norms_mut(&mut self) -> impl Iterator<Item = (String, &mut BatchNorm3d<T>)> {
        self.blocks
            .iter_mut()
            .enumerate()
            .flat_map(|(i, b)| [(format!("voxel.{i}.bn1"), &mut b.bn1), (format!("voxel.{i}.bn2"), &mut b.bn2)])
    }

    /// True once batch-norm running statistics exist, i.e. after a training
    /// step or a load.
    pub fn stats_ready(&self) -> bool {
        self.blocks.iter().all(|b| b.bn1.stats_ready && b.bn2.stats_ready)
    }

    /// Sets batch-norm running statistics to mean 0, variance 1 and marks
    /// them ready, making an untrained model usable in eval mode.
    pub fn reset_running_stats(&mut self) {
        for (_, bn) in self.batch_norms_mut() {
            let c = bn.channels();
            bn.set_running_stats(Tensor::zeros(&[c]), Tensor::full(&[c], T::one()))
                .expect("matching channel count");
        }
    }

    fn check_input(&self, input: &EncoderInput<T>) -> Result<()> {
        if input.occupancy.side != self.cfg.voxel.resolution || input.occupancy.channels != 1 {
            return Err(Error::ShapeMismatch(format!(
                "model expects a {}^3 occupancy grid, got {}^3",
                self.cfg.voxel.resolution, input.occupancy.side
            )));
        }
        input.points.expect_rank(2, "point input")?;
        if input.points.dim(1) != 3 {
            return Err(Error::ShapeMismatch("points must be [N, 3]".into()));
        }
        if input.points.dim(0) == 0 {
            return Err(Error::DegenerateInput("empty point cloud".into()));
        }
        Ok(())
    }

    fn point_forward(&self, x: &Tensor<T>) -> Result<PointTape<T>> {
        let mut acts = Vec::with_capacity(POINT_LAYERS);
        let mut argmax = Vec::with_capacity(POINT_LAYERS);
        for (i, layer) in self.point_layers.iter().enumerate() {
            let mut h = layer.forward_eval(acts.last().unwrap_or(x))?;
            if i + 1 < POINT_LAYERS {
                relu_in_place(&mut h);
            }
            let (_, arg) = MaxPoolOverPoints::forward_cached(&h)?;
            argmax.push(arg);
            acts.push(h);
        }
        Ok(PointTape { acts, argmax })
    }

    fn pooled(tape: &PointTape<T>, layer: usize) -> Vec<T> {
        let h = &tape.acts[layer];
        let c = h.dim(1);
        tape.argmax[layer]
            .iter()
            .enumerate()
            .map(|(j, &i)| h.data()[i * c + j])
            .collect()
    }

    /// Multi-level point features: the max-pooled output of every layer.
    pub fn encode_points(&self, points: &Tensor<T>) -> Result<Vec<Vec<T>>> {
        if !self.cfg.has_point_encoder() {
            return Err(Error::InvalidState("model has no point encoder (wp mode)".into()));
        }
        let tape = self.point_forward(points)?;
        Ok((0..POINT_LAYERS).map(|l| Self::pooled(&tape, l)).collect())
    }

    fn tap_batch(&self, pooled: &[Vec<Vec<T>>], block: usize) -> Result<Option<Tensor<T>>> {
        let Some(layer) = self.cfg.block_plans()[block].tap_layer else {
            return Ok(None);
        };
        let w = self.cfg.point.layer_widths[layer];
        let data: Vec<T> = pooled.iter().flat_map(|p| p[layer].iter().copied()).collect();
        Ok(Some(Tensor::from_vec(&[pooled.len(), w], data)?))
    }

    fn occupancy_batch(inputs: &[&EncoderInput<T>]) -> Result<Tensor<T>> {
        let m = inputs[0].occupancy.side;
        let data: Vec<T> = inputs.iter().flat_map(|i| i.occupancy.data.iter().copied()).collect();
        Tensor::from_vec(&[inputs.len(), 1, m, m, m], data)
    }

    /// Voxel encoder in eval mode. Returns every block's output `[B, C, D, D, D]`.
    pub fn encode_point_voxel(&self, occupancy: &Tensor<T>, pooled: &[Vec<Vec<T>>]) -> Result<Vec<Tensor<T>>> {
        if !self.stats_ready() {
            return Err(Error::InvalidState(
                "batch-norm running statistics are not initialized; train or load the model first".into(),
            ));
        }
        let mut x = occupancy.clone();
        let mut outs = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let tap = self.tap_batch(pooled, i)?;
            let (mut h, _) = b.conv1.forward_cached(&x, tap.as_ref())?;
            relu_in_place(&mut h);
            let h = b.bn1.forward_eval(&h)?;
            let (mut h, _) = b.conv2.forward_cached(&h, None)?;
            relu_in_place(&mut h);
            x = b.bn2.forward_eval(&h)?;
            outs.push(x.clone());
        }
        Ok(outs)
    }

    fn latent_from(
        &self,
        global: Option<Vec<T>>,
        block_outs: &[Tensor<T>],
        b: usize,
        occupancy: &FeatureGrid<T>,
    ) -> Result<Latent<T>> {
        let mut grids = Vec::new();
        for &bi in &self.cfg.latent_blocks() {
            let t = &block_outs[bi];
            let (c, s) = (t.dim(1), t.dim(2));
            let n = c * s * s * s;
            grids.push(FeatureGrid::from_channels_first(c, s, &t.data()[b * n..(b + 1) * n])?);
        }
        Ok(Latent::new(global, grids, occupancy.clone()))
    }

    /// Encodes one shape into its latent (eval mode).
    pub fn encode(&self, input: &EncoderInput<T>) -> Result<Latent<T>> {
        self.check_input(input)?;
        let (pooled, global) = if self.cfg.has_point_encoder() {
            let p = self.encode_points(&input.points)?;
            let g = p[POINT_LAYERS - 1].clone();
            (vec![p], Some(g))
        } else {
            (vec![Vec::new()], None)
        };
        let occ = Self::occupancy_batch(&[input])?;
        let outs = self.encode_point_voxel(&occ, &pooled)?;
        self.latent_from(global, &outs, 0, &input.occupancy)
    }

    fn decode_rows(&self, latent: &Latent<T>, pts: &[Vec3], want_grad: bool) -> Result<(Vec<T>, Vec<[T; 3]>)> {
        let w = self.cfg.feature_width();
        if latent.feature_width() != w {
            return Err(Error::ShapeMismatch(format!(
                "latent has feature width {}, decoder expects {w}",
                latent.feature_width()
            )));
        }
        let d = self.d();
        let q = pts.len();
        let mut f = vec![T::zero(); q * w];
        for (row, p) in f.chunks_exact_mut(w).zip(pts) {
            sample_features(latent, to_t(p), d, row)?;
        }
        let mut acts = vec![Tensor::from_vec(&[q, w], f)?];
        let last = self.decoder.len() - 1;
        for (i, layer) in self.decoder.iter().enumerate() {
            let mut h = layer.forward_eval(acts.last().expect("input"))?;
            if i < last {
                relu_in_place(&mut h);
            }
            acts.push(h);
        }
        let values = acts.pop().expect("output").into_data();
        if !want_grad {
            return Ok((values, Vec::new()));
        }
        let mut g = Tensor::full(&[q, 1], T::one());
        for (i, layer) in self.decoder.iter().enumerate().rev() {
            g = layer.backward_input(&g)?;
            if i > 0 {
                relu_in_place_mask(&acts[i], &mut g);
            }
        }
        let grads = pts
            .iter()
            .zip(g.data().chunks_exact(w))
            .map(|(p, row)| feature_coord_grad(latent, to_t(p), d, row))
            .collect();
        Ok((values, grads))
    }

    /// UDF estimates at `pts` from a cached latent.
    pub fn decode(&self, latent: &Latent<T>, pts: &[Vec3]) -> Result<Vec<T>> {
        let parts: Result<Vec<Vec<T>>> = pts
            .par_chunks(DECODE_CHUNK)
            .map(|c| self.decode_rows(latent, c, false).map(|r| r.0))
            .collect();
        Ok(parts?.concat())
    }

    /// UDF estimates and their gradients with respect to the query position.
    pub fn decode_with_grad(&self, latent: &Latent<T>, pts: &[Vec3]) -> Result<(Vec<T>, Vec<[T; 3]>)> {
        let parts: Result<Vec<(Vec<T>, Vec<[T; 3]>)>> = pts
            .par_chunks(DECODE_CHUNK)
            .map(|c| self.decode_rows(latent, c, true))
            .collect();
        let mut values = Vec::with_capacity(pts.len());
        let mut grads = Vec::with_capacity(pts.len());
        for (v, g) in parts? {
            values.extend(v);
            grads.extend(g);
        }
        Ok((values, grads))
    }

    /// Full pipeline for one shape: encode, then decode every query.
    pub fn forward_udf(&self, input: &EncoderInput<T>, pts: &[Vec3]) -> Result<Vec<T>> {
        let latent = self.encode(input)?;
        self.decode(&latent, pts)
    }

    /// Training-mode forward over a batch of shapes, each with its own
    /// queries. Batch norm uses batch statistics and updates running ones.
    pub fn forward_train(
        &mut self,
        inputs: &[&EncoderInput<T>],
        queries: &[Vec<Vec3>],
    ) -> Result<(Vec<T>, TrainTape<T>)> {
        if inputs.is_empty() || inputs.len() != queries.len() {
            return Err(Error::ShapeMismatch("need one query list per input shape".into()));
        }
        for i in inputs {
            self.check_input(i)?;
        }
        let mut point_tapes = Vec::new();
        let mut pooled = Vec::new();
        for inp in inputs {
            if self.cfg.has_point_encoder() {
                let t = self.point_forward(&inp.points)?;
                pooled.push((0..POINT_LAYERS).map(|l| Self::pooled(&t, l)).collect::<Vec<_>>());
                point_tapes.push(t);
            } else {
                pooled.push(Vec::new());
            }
        }
        let mut x = Self::occupancy_batch(inputs)?;
        let mut block_tapes = Vec::with_capacity(self.blocks.len());
        let mut outs = Vec::with_capacity(self.blocks.len());
        let taps: Vec<Option<Tensor<T>>> = (0..self.blocks.len())
            .map(|i| self.tap_batch(&pooled, i))
            .collect::<Result<_>>()?;
        for (b, tap) in self.blocks.iter_mut().zip(&taps) {
            b.bn1.training = true;
            b.bn2.training = true;
            let (mut h, c1) = b.conv1.forward_cached(&x, tap.as_ref())?;
            relu_in_place(&mut h);
            let (h2, b1) = b.bn1.forward_cached(&h)?;
            let r1 = h;
            let (mut h, c2) = b.conv2.forward_cached(&h2, None)?;
            relu_in_place(&mut h);
            let (y, b2) = b.bn2.forward_cached(&h)?;
            block_tapes.push(BlockTape {
                c1,
                r1,
                b1,
                c2,
                r2: h,
                b2,
            });
            outs.push(y.clone());
            x = y;
        }
        let mut latents = Vec::with_capacity(inputs.len());
        for (bi, inp) in inputs.iter().enumerate() {
            let global = if self.cfg.has_point_encoder() {
                Some(pooled[bi][POINT_LAYERS - 1].clone())
            } else {
                None
            };
            latents.push(self.latent_from(global, &outs, bi, &inp.occupancy)?);
        }

        let w = self.cfg.feature_width();
        let d = self.d();
        let mut bounds = vec![0];
        let mut flat = Vec::new();
        for qs in queries {
            flat.extend(qs.iter().map(to_t::<T>));
            bounds.push(flat.len());
        }
        let mut f = vec![T::zero(); flat.len() * w];
        for (s, latent) in latents.iter().enumerate() {
            for qi in bounds[s]..bounds[s + 1] {
                sample_features(latent, flat[qi], d, &mut f[qi * w..(qi + 1) * w])?;
            }
        }
        let mut dec_in = vec![Tensor::from_vec(&[flat.len(), w], f)?];
        let last = self.decoder.len() - 1;
        let mut out = None;
        for (i, layer) in self.decoder.iter().enumerate() {
            let mut h = layer.forward_eval(dec_in.last().expect("input"))?;
            if i < last {
                relu_in_place(&mut h);
                dec_in.push(h);
            } else {
                out = Some(h);
            }
        }
        let preds = out.expect("output layer").into_data();
        let tape = TrainTape {
            inputs_n: inputs.iter().map(|i| i.points.dim(0)).collect(),
            point_inputs: inputs.iter().map(|i| i.points.clone()).collect(),
            points: point_tapes,
            blocks: block_tapes,
            latents,
            bounds,
            queries: flat,
            dec_in,
        };
        Ok((preds, tape))
    }

    /// Gradients of `sum_i d_pred[i] * pred[i]` with respect to every
    /// parameter, in [`Self::params`] order.
    pub fn backward_train(&self, tape: &TrainTape<T>, d_pred: &[T]) -> Result<Vec<Tensor<T>>> {
        let nq = tape.queries.len();
        if d_pred.len() != nq {
            return Err(Error::ShapeMismatch(format!("{} prediction gradients for {nq} queries", d_pred.len())));
        }
        let nshapes = tape.latents.len();
        let w = self.cfg.feature_width();
        let d = self.d();

        // Decoder.
        let mut dec_grads = Vec::with_capacity(2 * self.decoder.len());
        let mut g = Tensor::from_vec(&[nq, 1], d_pred.to_vec())?;
        for (i, layer) in self.decoder.iter().enumerate().rev() {
            let (gw, gb) = layer.param_grads(&tape.dec_in[i], &g);
            dec_grads.push(gb);
            dec_grads.push(gw);
            g = layer.backward_input(&g)?;
            if i > 0 {
                relu_in_place_mask(&tape.dec_in[i], &mut g);
            }
        }
        dec_grads.reverse();

        // Feature sampling into latent grids and the global feature.
        let gw_global = self.cfg.global_width();
        let mut grid_grads: Vec<Vec<Vec<T>>> = tape
            .latents
            .iter()
            .map(|l| l.grids.iter().map(|g| vec![T::zero(); g.data.len()]).collect())
            .collect();
        let mut global_grads = vec![vec![T::zero(); gw_global]; nshapes];
        for s in 0..nshapes {
            for qi in tape.bounds[s]..tape.bounds[s + 1] {
                let row = &g.data()[qi * w..(qi + 1) * w];
                let gg = if gw_global > 0 {
                    Some(global_grads[s].as_mut_slice())
                } else {
                    None
                };
                scatter_feature_grad(&tape.latents[s], tape.queries[qi], d, row, &mut grid_grads[s], gg);
            }
        }

        // Voxel encoder.
        let plans = self.cfg.block_plans();
        let mut out_grads: Vec<Tensor<T>> = plans
            .iter()
            .map(|p| Tensor::zeros(&[nshapes, p.out_channels, p.out_side, p.out_side, p.out_side]))
            .collect();
        for (j, &bi) in self.cfg.latent_blocks().iter().enumerate() {
            let p = &plans[bi];
            let n = p.out_channels * p.out_side.pow(3);
            for s in 0..nshapes {
                let grid = FeatureGrid {
                    side: p.out_side,
                    channels: p.out_channels,
                    data: std::mem::take(&mut grid_grads[s][j]),
                };
                let cf = grid.to_channels_first();
                for (a, b) in out_grads[bi].data_mut()[s * n..(s + 1) * n].iter_mut().zip(&cf) {
                    *a += *b;
                }
            }
        }
        let mut block_grads: Vec<Vec<Tensor<T>>> = vec![Vec::new(); self.blocks.len()];
        let mut tap_grads: Vec<Option<Tensor<T>>> = vec![None; self.blocks.len()];
        for i in (0..self.blocks.len()).rev() {
            let b = &self.blocks[i];
            let t = &tape.blocks[i];
            let gout = std::mem::replace(&mut out_grads[i], Tensor::zeros(&[0]));
            let (mut gx, gg2, gb2) = b.bn2.backward(&t.b2, &gout)?;
            relu_backward_in_place(t.r2.data(), gx.data_mut());
            let (dx2, _, gw2, gbias2) = b.conv2.backward(&t.c2, &gx, true)?;
            let (mut gx, gg1, gb1) = b.bn1.backward(&t.b1, &dx2.expect("requested"))?;
            relu_backward_in_place(t.r1.data(), gx.data_mut());
            let (dx1, dtap, gw1, gbias1) = b.conv1.backward(&t.c1, &gx, i > 0)?;
            if i > 0 {
                out_grads[i - 1].add_assign(&dx1.expect("requested"));
            }
            tap_grads[i] = dtap;
            block_grads[i] = vec![gw1, gbias1, gg1, gb1, gw2, gbias2, gg2, gb2];
        }

        // Point encoder.
        let mut point_grads: Vec<Tensor<T>> = self
            .point_layers
            .iter()
            .flat_map(|l| [Tensor::zeros(l.weight.shape()), Tensor::zeros(l.bias.shape())])
            .collect();
        if self.cfg.has_point_encoder() {
            for s in 0..nshapes {
                let pt = &tape.points[s];
                let n = tape.inputs_n[s];
                let mut pool_grads: Vec<Vec<T>> = self
                    .cfg
                    .point
                    .layer_widths
                    .iter()
                    .map(|&w| vec![T::zero(); w])
                    .collect();
                for (i, p) in plans.iter().enumerate() {
                    if let (Some(l), Some(gt)) = (p.tap_layer, &tap_grads[i]) {
                        let wl = gt.dim(1);
                        for (a, b) in pool_grads[l].iter_mut().zip(&gt.data()[s * wl..(s + 1) * wl]) {
                            *a += *b;
                        }
                    }
                }
                for (a, b) in pool_grads[POINT_LAYERS - 1].iter_mut().zip(&global_grads[s]) {
                    *a += *b;
                }
                let pool_back = |l: usize, pool_grads: &[Vec<T>]| -> Result<Tensor<T>> {
                    let gy = Tensor::from_vec(&[pool_grads[l].len()], pool_grads[l].clone())?;
                    MaxPoolOverPoints::backward(n, &pt.argmax[l], &gy)
                };
                let mut gz = pool_back(POINT_LAYERS - 1, &pool_grads)?;
                for l in (0..POINT_LAYERS).rev() {
                    let layer = &self.point_layers[l];
                    let x_in = if l == 0 { &tape.point_inputs[s] } else { &pt.acts[l - 1] };
                    let (gw, gb) = layer.param_grads(x_in, &gz);
                    point_grads[2 * l].add_assign(&gw);
                    point_grads[2 * l + 1].add_assign(&gb);
                    if l > 0 {
                        let mut gprev = layer.backward_input(&gz)?;
                        gprev.add_assign(&pool_back(l - 1, &pool_grads)?);
                        relu_backward_in_place(pt.acts[l - 1].data(), gprev.data_mut());
                        gz = gprev;
                    }
                }
            }
        }

        let mut grads = point_grads;
        grads.extend(block_grads.into_iter().flatten());
        grads.extend(dec_grads);
        Ok(grads)
    }

    /// Serializes architecture and weights into a checkpoint container.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({
            "format": "pvudf-model",
            "model": self.cfg,
            "bn_stats_ready": self.stats_ready(),
        }));
        for (name, t) in self.param_names().iter().zip(self.params()) {
            ck.push(name, t);
        }
        for (name, bn) in self.batch_norms() {
            ck.push(&format!("{name}.running_mean"), &bn.running_mean);
            ck.push(&format!("{name}.running_var"), &bn.running_var);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_value(
            ck.manifest
                .get("model")
                .cloned()
                .ok_or_else(|| Error::Format("checkpoint manifest has no model descriptor".into()))?,
        )
        .map_err(|e| Error::Format(format!("bad model descriptor: {e}")))?;
        let stats_ready = ck.manifest.get("bn_stats_ready").and_then(|v| v.as_bool()).unwrap_or(false);
        let mut model = UdfModel::new(cfg, 0)?;
        let names = model.param_names();
        for (name, t) in names.iter().zip(model.params_mut()) {
            let loaded: Tensor<T> = ck.tensor(name)?;
            loaded.expect_shape(t.shape(), name)?;
            *t = loaded;
        }
        for (name, bn) in model.batch_norms_mut() {
            let mean: Tensor<T> = ck.tensor(&format!("{name}.running_mean"))?;
            let var: Tensor<T> = ck.tensor(&format!("{name}.running_var"))?;
            bn.set_running_stats(mean, var)?;
            bn.stats_ready = stats_ready;
        }
        Ok(model)
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> UdfModel<U> {
        let ck = self.to_checkpoint();
        UdfModel::<U>::from_checkpoint(&ck).expect("round trip of own checkpoint")
    }
}

fn relu_in_place_mask<T: Scalar>(act: &Tensor<T>, g: &mut Tensor<T>) {
    relu_backward_in_place(act.data(), g.data_mut());
}
