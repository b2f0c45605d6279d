//! The UDF network: a point encoder whose max-pooled multi-level features are
//! fused into a convolutional voxel encoder, a latent of feature grids plus
//! the raw occupancy and global point feature, a neighborhood feature sampler
//! and an MLP decoder regressing the unsigned distance.

mod config;
mod latent;
mod network;

pub use config::{
    conv_out_side, default_downsample_factors, BlockPlan, DecoderConfig, ModelConfig, PointEncoderConfig,
    VoxelEncoderConfig, POINT_LAYERS, VOXEL_BLOCKS,
};
pub use latent::{
    feature_coord_grad, neighborhood_offsets, sample_features, scatter_feature_grad, FeatureGrid, Latent,
};
pub use network::{EncoderInput, TrainTape, UdfModel, VoxelBlock, DECODE_CHUNK};

/// Implicit-surface representations. Only the unsigned distance variant is
/// learned here; the others are listed for reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImplicitKind {
    /// Inside/outside indicator of a closed surface.
    Occupancy,
    /// Signed distance, negative inside a closed surface.
    SignedDistance,
    /// Unsigned distance; represents open surfaces.
    UnsignedDistance,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tensor;
    use crate::geom::{voxelize, PointCloud, Vec3};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| {
                    let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    Vec3::new(0.4 * a.cos(), 0.4 * a.sin(), rng.random_range(-0.3..0.3))
                })
                .collect(),
        )
        .unwrap()
    }

    fn ready_model(cfg: ModelConfig, seed: u64) -> UdfModel<f32> {
        let mut m = UdfModel::new(cfg, seed).unwrap();
        m.reset_running_stats();
        m
    }

    fn input(c: &PointCloud, m: usize) -> EncoderInput<f32> {
        EncoderInput::new(c, &voxelize(c, m).unwrap())
    }

    #[test]
    fn point_features_ignore_order_and_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = ready_model(ModelConfig::tiny(32), 3);
        let c = cloud(&mut rng, 300);
        let base = model.encode_points(&input(&c, 32).points).unwrap();
        let mut pts = c.points().to_vec();
        pts.shuffle(&mut rng);
        let shuffled = model.encode_points(&input(&PointCloud::new(pts.clone()).unwrap(), 32).points).unwrap();
        assert_eq!(base, shuffled);
        pts.extend(pts.clone());
        let doubled = model.encode_points(&input(&PointCloud::new(pts).unwrap(), 32).points).unwrap();
        assert_eq!(base, doubled);
    }

    #[test]
    fn singleton_features_are_the_layer_outputs() {
        let model = ready_model(ModelConfig::tiny(32), 4);
        let p = Tensor::<f32>::from_vec(&[1, 3], vec![0.1, -0.2, 0.3]).unwrap();
        let feats = model.encode_points(&p).unwrap();
        let mut h = p.clone();
        for (i, layer) in model.point_layers.iter().enumerate() {
            h = layer.forward_eval(&h).unwrap();
            if i < 6 {
                h = crate::diff::relu(&h);
            }
            assert_eq!(h.data(), &feats[i][..]);
        }
    }

    #[test]
    fn zero_occupancy_in_wp_mode_gives_zero_grids() {
        let mut cfg = ModelConfig::tiny(32);
        cfg.wp = true;
        let mut model = ready_model(cfg, 5);
        for b in &mut model.blocks {
            b.conv1.bias.fill(0.0);
            b.conv2.bias.fill(0.0);
        }
        let occ = Tensor::zeros(&[1, 1, 32, 32, 32]);
        for g in model.encode_point_voxel(&occ, &[Vec::new()]).unwrap() {
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn wp_keeps_grid_shapes_and_has_fewer_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = cloud(&mut rng, 200);
        let full = ready_model(ModelConfig::tiny(32), 1);
        let mut cfg = ModelConfig::tiny(32);
        cfg.wp = true;
        let wp = ready_model(cfg, 1);
        let lf = full.encode(&input(&c, 32)).unwrap();
        let lw = wp.encode(&input(&c, 32)).unwrap();
        assert_eq!(lf.groups(), 3);
        assert_eq!(lw.groups(), 2);
        for (a, b) in lf.grids.iter().zip(&lw.grids) {
            assert_eq!((a.side, a.channels), (b.side, b.channels));
        }
        assert!(wp.num_params() < full.num_params());
    }

    #[test]
    fn default_grid_sides_at_64() {
        let cfg = ModelConfig::default();
        let sides: Vec<usize> = cfg.block_plans().iter().map(|p| p.out_side).collect();
        assert_eq!(sides, vec![32, 16, 8, 4, 2, 1]);
    }

    #[test]
    fn constant_decoder_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = cloud(&mut rng, 100);
        let mut model = ready_model(ModelConfig::tiny(32), 2);
        for l in &mut model.decoder {
            l.weight.fill(0.0);
        }
        let last = model.decoder.len() - 1;
        model.decoder[last].bias.fill(0.25);
        let pts: Vec<Vec3> = (0..10).map(|i| Vec3::new(0.05 * i as f64, 0.0, -0.1)).collect();
        let out = model.forward_udf(&input(&c, 32), &pts).unwrap();
        assert!(out.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn chunked_and_cached_decoding_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = cloud(&mut rng, 150);
        let model = ready_model(ModelConfig::tiny(32), 9);
        let pts: Vec<Vec3> = (0..2500)
            .map(|_| Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)))
            .collect();
        let latent = model.encode(&input(&c, 32)).unwrap();
        let all = model.decode(&latent, &pts).unwrap();
        let again = model.encode(&input(&c, 32)).unwrap();
        assert_eq!(latent, again);
        let pieces: Vec<f32> = pts.chunks(7).flat_map(|ch| model.decode(&again, ch).unwrap()).collect();
        assert_eq!(all, pieces);
        let (vals, _) = model.decode_with_grad(&latent, &pts).unwrap();
        assert_eq!(all, vals);
    }

    #[test]
    fn untrained_model_refuses_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let c = cloud(&mut rng, 50);
        let model = UdfModel::<f32>::new(ModelConfig::tiny(32), 1).unwrap();
        assert!(model.encode(&input(&c, 32)).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = cloud(&mut rng, 80);
        let model = ready_model(ModelConfig::tiny(32), 12);
        let back = UdfModel::<f32>::from_checkpoint(&model.to_checkpoint()).unwrap();
        let pts = vec![Vec3::new(0.1, 0.2, 0.0), Vec3::new(-0.3, 0.0, 0.25)];
        assert_eq!(
            model.forward_udf(&input(&c, 32), &pts).unwrap(),
            back.forward_udf(&input(&c, 32), &pts).unwrap()
        );
    }
}
