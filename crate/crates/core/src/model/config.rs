use crate::{Error, Result};
use serde::{Deserialize, Serialize};

pub const POINT_LAYERS: usize = 7;
pub const VOXEL_BLOCKS: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PointEncoderConfig {
    /// Output widths of the seven fully-connected layers. All but the last
    /// are followed by ReLU.
    pub layer_widths: Vec<usize>,
    /// For each voxel block, the 1-based point layer whose max-pooled output
    /// is fused into that block.
    pub feature_taps: Vec<usize>,
}

impl Default for PointEncoderConfig {
    fn default() -> Self {
        PointEncoderConfig {
            layer_widths: vec![64, 128, 128, 256, 256, 512, 512],
            feature_taps: vec![1, 2, 3, 4, 5, 6],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VoxelEncoderConfig {
    /// Grid resolution M of the occupancy input.
    pub resolution: usize,
    pub block_channels: Vec<usize>,
    /// Whether point features are concatenated at each block's first conv.
    pub fusion_points: Vec<bool>,
    /// Stride of each block's second conv. Empty selects the default: 2 per
    /// block, with leading blocks at 1 when M is too small for six halvings.
    pub downsample_factors: Vec<usize>,
    /// 0-based indices of the blocks whose outputs enter the latent. Empty
    /// selects every block whose output side exceeds 1.
    pub latent_blocks: Vec<usize>,
}

impl Default for VoxelEncoderConfig {
    fn default() -> Self {
        VoxelEncoderConfig {
            resolution: 64,
            block_channels: vec![16, 32, 64, 128, 128, 128],
            fusion_points: vec![true; VOXEL_BLOCKS],
            downsample_factors: Vec::new(),
            latent_blocks: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Hidden widths, each followed by ReLU; a linear layer to one output follows.
    pub layer_widths: Vec<usize>,
    /// Neighborhood distance d in normalized units.
    pub neighborhood_distance: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            layer_widths: vec![512, 512, 512],
            neighborhood_distance: 0.0723,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub point: PointEncoderConfig,
    pub voxel: VoxelEncoderConfig,
    pub decoder: DecoderConfig,
    /// Ablation without the point encoder and point-feature fusion.
    pub wp: bool,
}

/// Per-block shape bookkeeping after defaults are resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockPlan {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Width of the fused point feature, 0 when not fused.
    pub fused_width: usize,
    /// 0-based point layer feeding this block, when fused.
    pub tap_layer: Option<usize>,
    pub stride: usize,
    pub in_side: usize,
    pub out_side: usize,
}

pub fn default_downsample_factors(resolution: usize) -> Vec<usize> {
    let mut halvings = 0;
    let mut side = resolution;
    while side > 1 {
        side = (side - 1) / 2 + 1;
        halvings += 1;
    }
    let ones = VOXEL_BLOCKS.saturating_sub(halvings);
    (0..VOXEL_BLOCKS).map(|i| if i < ones { 1 } else { 2 }).collect()
}

/// Output side of a kernel-3, padding-1 convolution.
pub fn conv_out_side(side: usize, stride: usize) -> usize {
    (side - 1) / stride + 1
}

impl ModelConfig {
    /// A small configuration for tests and smoke runs.
    pub fn tiny(resolution: usize) -> Self {
        ModelConfig {
            point: PointEncoderConfig {
                layer_widths: vec![8, 8, 12, 12, 16, 16, 16],
                feature_taps: vec![1, 2, 3, 4, 5, 6],
            },
            voxel: VoxelEncoderConfig {
                resolution,
                block_channels: vec![2, 3, 4, 4, 4, 4],
                ..Default::default()
            },
            decoder: DecoderConfig {
                layer_widths: vec![16, 16, 16],
                neighborhood_distance: 0.0723,
            },
            wp: false,
        }
    }

    pub fn downsample_factors(&self) -> Vec<usize> {
        if self.voxel.downsample_factors.is_empty() {
            default_downsample_factors(self.voxel.resolution)
        } else {
            self.voxel.downsample_factors.clone()
        }
    }

    pub fn fused(&self, block: usize) -> bool {
        !self.wp && self.voxel.fusion_points[block]
    }

    pub fn block_plans(&self) -> Vec<BlockPlan> {
        let factors = self.downsample_factors();
        let mut side = self.voxel.resolution;
        let mut in_ch = 1;
        let mut plans = Vec::with_capacity(VOXEL_BLOCKS);
        for b in 0..VOXEL_BLOCKS {
            let tap = if self.fused(b) {
                Some(self.point.feature_taps[b] - 1)
            } else {
                None
            };
            let out_side = conv_out_side(side, factors[b]);
            plans.push(BlockPlan {
                in_channels: in_ch,
                out_channels: self.voxel.block_channels[b],
                fused_width: tap.map_or(0, |l| self.point.layer_widths[l]),
                tap_layer: tap,
                stride: factors[b],
                in_side: side,
                out_side,
            });
            in_ch = self.voxel.block_channels[b];
            side = out_side;
        }
        plans
    }

    pub fn latent_blocks(&self) -> Vec<usize> {
        if self.voxel.latent_blocks.is_empty() {
            self.block_plans()
                .iter()
                .enumerate()
                .filter(|(_, p)| p.out_side > 1)
                .map(|(i, _)| i)
                .collect()
        } else {
            self.voxel.latent_blocks.clone()
        }
    }

    pub fn has_point_encoder(&self) -> bool {
        !self.wp
    }

    pub fn global_width(&self) -> usize {
        if self.wp {
            0
        } else {
            self.point.layer_widths[POINT_LAYERS - 1]
        }
    }

    /// Channels of each latent grid in sampling order: selected blocks, then
    /// the raw occupancy.
    pub fn latent_channels(&self) -> Vec<usize> {
        let mut ch: Vec<usize> = self
            .latent_blocks()
            .iter()
            .map(|&b| self.voxel.block_channels[b])
            .collect();
        ch.push(1);
        ch
    }

    /// Width of the sampled feature vector F_p.
    pub fn feature_width(&self) -> usize {
        7 * self.latent_channels().iter().sum::<usize>() + self.global_width()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let p = &self.point;
        let v = &self.voxel;
        if p.layer_widths.len() != POINT_LAYERS {
            return bad(format!("point encoder needs exactly {POINT_LAYERS} layers, got {}", p.layer_widths.len()));
        }
        if p.layer_widths.contains(&0) {
            return bad("point encoder widths must be positive".into());
        }
        if p.feature_taps.len() != VOXEL_BLOCKS {
            return bad(format!("need one feature tap per voxel block, got {}", p.feature_taps.len()));
        }
        if p.feature_taps.iter().any(|&t| t == 0 || t > POINT_LAYERS) {
            return bad("feature taps must be point layer numbers in 1..=7".into());
        }
        if v.block_channels.len() != VOXEL_BLOCKS || v.block_channels.contains(&0) {
            return bad(format!("voxel encoder needs exactly {VOXEL_BLOCKS} positive block widths"));
        }
        if v.fusion_points.len() != VOXEL_BLOCKS {
            return bad("fusion_points needs one flag per voxel block".into());
        }
        if v.resolution < 2 {
            return bad("voxel resolution must be at least 2".into());
        }
        let factors = self.downsample_factors();
        if factors.len() != VOXEL_BLOCKS || factors.contains(&0) {
            return bad("downsample_factors needs six positive entries".into());
        }
        let plans = self.block_plans();
        for w in plans.windows(2) {
            if w[1].out_side >= w[0].out_side {
                return bad(format!(
                    "voxel grid sides must strictly decrease block to block, got {:?} (resolution {} too small?)",
                    plans.iter().map(|p| p.out_side).collect::<Vec<_>>(),
                    v.resolution
                ));
            }
        }
        let latent = self.latent_blocks();
        if latent.iter().any(|&b| b >= VOXEL_BLOCKS) || latent.windows(2).any(|w| w[0] >= w[1]) {
            return bad("latent_blocks must be increasing block indices below 6".into());
        }
        let d = &self.decoder;
        if d.layer_widths.is_empty() || d.layer_widths.contains(&0) {
            return bad("decoder needs at least one positive hidden width".into());
        }
        if !(d.neighborhood_distance > 0.0 && d.neighborhood_distance.is_finite()) {
            return bad("neighborhood distance must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_sides_halve_from_64() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        let sides: Vec<usize> = cfg.block_plans().iter().map(|p| p.out_side).collect();
        assert_eq!(sides, vec![32, 16, 8, 4, 2, 1]);
        assert_eq!(cfg.latent_blocks(), vec![0, 1, 2, 3, 4]);
        assert_eq!(cfg.feature_width(), 7 * (16 + 32 + 64 + 128 + 128 + 1) + 512);
    }

    #[test]
    fn resolution_32_keeps_full_res_first_block() {
        let mut cfg = ModelConfig::default();
        cfg.voxel.resolution = 32;
        cfg.validate().unwrap();
        assert_eq!(cfg.downsample_factors(), vec![1, 2, 2, 2, 2, 2]);
        let sides: Vec<usize> = cfg.block_plans().iter().map(|p| p.out_side).collect();
        assert_eq!(sides, vec![32, 16, 8, 4, 2, 1]);
    }

    #[test]
    fn too_small_resolution_is_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.voxel.resolution = 16;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn wp_changes_only_fusion_widths() {
        let full = ModelConfig::default();
        let wp = ModelConfig { wp: true, ..ModelConfig::default() };
        for (a, b) in full.block_plans().iter().zip(wp.block_plans()) {
            assert_eq!((a.in_side, a.out_side, a.out_channels), (b.in_side, b.out_side, b.out_channels));
            assert_eq!(b.fused_width, 0);
            assert!(a.fused_width > 0);
        }
        assert_eq!(full.feature_width() - wp.feature_width(), 512);
    }
}
