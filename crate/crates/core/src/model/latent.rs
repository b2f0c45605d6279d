use crate::diff::{sample_trilinear, sample_trilinear_backward, Scalar, Tensor};
use crate::geom::{Vec3, VoxelGrid};
use crate::{Error, Result};

/// Dense feature grid stored channels-last, `[side, side, side, channels]`,
/// covering the unit cube with cell centers at `(i + 0.5) / side - 0.5`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid<T> {
    pub side: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureGrid<T> {
    /// From a channels-first `[C, D, D, D]` slice.
    pub fn from_channels_first(channels: usize, side: usize, data: &[T]) -> Result<Self> {
        let t = Tensor::from_vec(&[channels, side, side, side], data.to_vec())?.to_channels_last()?;
        Ok(FeatureGrid {
            side,
            channels,
            data: t.into_data(),
        })
    }

    pub fn from_occupancy(v: &VoxelGrid) -> Self {
        FeatureGrid {
            side: v.resolution(),
            channels: 1,
            data: v
                .occupancy()
                .iter()
                .map(|&o| if o { T::one() } else { T::zero() })
                .collect(),
        }
    }

    /// Channels-first copy `[C, D, D, D]`.
    pub fn to_channels_first(&self) -> Vec<T> {
        let s = self.side;
        Tensor::from_vec(&[s, s, s, self.channels], self.data.clone())
            .and_then(|t| t.to_channels_first())
            .expect("consistent grid")
            .into_data()
    }

    /// Continuous index coordinate of a world position along one axis.
    #[inline]
    pub fn index_coord(&self, x: T) -> T {
        (x + T::lit(0.5)) * T::lit(self.side as f64) - T::lit(0.5)
    }

    #[inline]
    fn index_point(&self, p: [T; 3]) -> [T; 3] {
        [self.index_coord(p[0]), self.index_coord(p[1]), self.index_coord(p[2])]
    }

    pub fn sample(&self, p: [T; 3], out: &mut [T]) {
        let s = self.side;
        sample_trilinear(&self.data, [s, s, s], self.channels, self.index_point(p), out);
    }
}

/// The latent representation: the global point feature (absent in `wp`
/// mode), the selected block output grids and the raw occupancy grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent<T> {
    pub global: Option<Vec<T>>,
    pub grids: Vec<FeatureGrid<T>>,
    pub occupancy: FeatureGrid<T>,
}

impl<T: Scalar> Latent<T> {
    pub fn new(global: Option<Vec<T>>, grids: Vec<FeatureGrid<T>>, occupancy: FeatureGrid<T>) -> Self {
        Latent {
            global,
            grids,
            occupancy,
        }
    }

    /// Number of component groups: global feature, feature grids, occupancy.
    pub fn groups(&self) -> usize {
        usize::from(self.global.is_some()) + usize::from(!self.grids.is_empty()) + 1
    }

    /// All sampled grids in feature order.
    pub fn sampled_grids(&self) -> impl Iterator<Item = &FeatureGrid<T>> {
        self.grids.iter().chain(std::iter::once(&self.occupancy))
    }

    pub fn feature_width(&self) -> usize {
        7 * self.sampled_grids().map(|g| g.channels).sum::<usize>() + self.global.as_ref().map_or(0, |g| g.len())
    }
}

/// The center and its six axis neighbors at distance `d`, in the order
/// `p, p+dx, p-dx, p+dy, p-dy, p+dz, p-dz`.
pub fn neighborhood_offsets(p: &Vec3, d: f64) -> [Vec3; 7] {
    let mut out = [*p; 7];
    for axis in 0..3 {
        out[1 + 2 * axis][axis] += d;
        out[2 + 2 * axis][axis] -= d;
    }
    out
}

fn offsets_t<T: Scalar>(p: [T; 3], d: T) -> [[T; 3]; 7] {
    let mut out = [p; 7];
    for axis in 0..3 {
        out[1 + 2 * axis][axis] += d;
        out[2 + 2 * axis][axis] = out[2 + 2 * axis][axis] - d;
    }
    out
}

/// Writes F_p for one query into `row`: for each grid, the samples at the
/// seven offsets, then the global feature.
pub fn sample_features<T: Scalar>(latent: &Latent<T>, p: [T; 3], d: T, row: &mut [T]) -> Result<()> {
    if row.len() != latent.feature_width() {
        return Err(Error::ShapeMismatch(format!(
            "feature row has {} slots, latent produces {}",
            row.len(),
            latent.feature_width()
        )));
    }
    let offs = offsets_t(p, d);
    let mut at = 0;
    for g in latent.sampled_grids() {
        for q in &offs {
            g.sample(*q, &mut row[at..at + g.channels]);
            at += g.channels;
        }
    }
    if let Some(gf) = &latent.global {
        row[at..].copy_from_slice(gf);
    }
    Ok(())
}

/// Gradient of `<F_p, g_row>` with respect to `p`.
pub fn feature_coord_grad<T: Scalar>(latent: &Latent<T>, p: [T; 3], d: T, g_row: &[T]) -> [T; 3] {
    let offs = offsets_t(p, d);
    let mut grad = [T::zero(); 3];
    let mut at = 0;
    for g in latent.sampled_grids() {
        let s = g.side;
        let scale = T::lit(s as f64);
        for q in &offs {
            let u = g.index_point(*q);
            let gu = sample_trilinear_backward(&g.data, [s, s, s], g.channels, u, &g_row[at..at + g.channels], None);
            for a in 0..3 {
                grad[a] += gu[a] * scale;
            }
            at += g.channels;
        }
    }
    grad
}

/// Accumulates the gradient of `<F_p, g_row>` with respect to the feature
/// grids (channels-last buffers matching `latent.grids`) and the global
/// feature. The occupancy grid is an input and receives nothing.
pub fn scatter_feature_grad<T: Scalar>(
    latent: &Latent<T>,
    p: [T; 3],
    d: T,
    g_row: &[T],
    grid_grads: &mut [Vec<T>],
    global_grad: Option<&mut [T]>,
) {
    let offs = offsets_t(p, d);
    let mut at = 0;
    for (g, gg) in latent.grids.iter().zip(grid_grads.iter_mut()) {
        let s = g.side;
        for q in &offs {
            let u = g.index_point(*q);
            sample_trilinear_backward(&g.data, [s, s, s], g.channels, u, &g_row[at..at + g.channels], Some(gg));
            at += g.channels;
        }
    }
    at += 7 * latent.occupancy.channels;
    if let (Some(dst), Some(_)) = (global_grad, &latent.global) {
        for (a, b) in dst.iter_mut().zip(&g_row[at..]) {
            *a += *b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_latent(rng: &mut ChaCha8Rng) -> Latent<f64> {
        let grid = |side: usize, channels: usize, rng: &mut ChaCha8Rng| FeatureGrid {
            side,
            channels,
            data: (0..side * side * side * channels).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        Latent::new(
            Some(vec![0.5, -0.25]),
            vec![grid(8, 3, rng), grid(4, 2, rng)],
            grid(16, 1, rng),
        )
    }

    #[test]
    fn offsets_are_seven_symmetric_points() {
        let o = neighborhood_offsets(&Vec3::zeros(), 0.1);
        assert_eq!(o.len(), 7);
        assert_eq!(o[0], Vec3::zeros());
        for v in &o[1..] {
            assert!(o.iter().any(|w| (w + v).norm() < 1e-15));
            assert!((v.norm() - 0.1).abs() < 1e-15);
        }
        for i in 0..7 {
            for j in 0..i {
                assert_ne!(o[i], o[j]);
            }
        }
    }

    #[test]
    fn width_and_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut l = random_latent(&mut rng);
        assert_eq!(l.feature_width(), 7 * (3 + 2 + 1) + 2);
        assert_eq!(l.groups(), 3);
        l.global = None;
        assert_eq!(l.groups(), 2);
    }

    #[test]
    fn constant_grids_give_constant_features() {
        let g = FeatureGrid { side: 4, channels: 2, data: vec![0.75; 128] };
        let l = Latent::new(None, vec![g.clone()], FeatureGrid { side: 4, channels: 1, data: vec![1.0; 64] });
        let mut a = vec![0.0f64; l.feature_width()];
        let mut b = a.clone();
        sample_features(&l, [0.1, -0.2, 0.3], 0.07, &mut a).unwrap();
        sample_features(&l, [-0.4, 0.45, 0.0], 0.07, &mut b).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn shifted_grid_and_point_sample_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let side = 8;
        let c = 2;
        let base: Vec<f64> = (0..side * side * side * c).map(|_| rng.random()).collect();
        // shifted[x] = base[x - 1] along x.
        let mut shifted = vec![0.0; base.len()];
        for x in 1..side {
            let row = side * side * c;
            shifted[x * row..(x + 1) * row].copy_from_slice(&base[(x - 1) * row..x * row]);
        }
        let a = FeatureGrid { side, channels: c, data: base };
        let b = FeatureGrid { side, channels: c, data: shifted };
        let cell = 1.0 / side as f64;
        let mut va = [0.0; 2];
        let mut vb = [0.0; 2];
        for _ in 0..50 {
            let p = [rng.random_range(-0.4..0.2), rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)];
            a.sample(p, &mut va);
            b.sample([p[0] + cell, p[1], p[2]], &mut vb);
            assert!((va[0] - vb[0]).abs() < 1e-12 && (va[1] - vb[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn coordinate_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = random_latent(&mut rng);
        let w = l.feature_width();
        let g_row: Vec<f64> = (0..w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let obj = |p: [f64; 3]| {
            let mut row = vec![0.0; w];
            sample_features(&l, p, 0.05, &mut row).unwrap();
            row.iter().zip(&g_row).map(|(a, b)| a * b).sum::<f64>()
        };
        for _ in 0..20 {
            let p = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
            let g = feature_coord_grad(&l, p, 0.05, &g_row);
            for a in 0..3 {
                let h = 1e-7;
                let mut pp = p;
                let mut pm = p;
                pp[a] += h;
                pm[a] -= h;
                let fd = (obj(pp) - obj(pm)) / (2.0 * h);
                assert!((fd - g[a]).abs() < 1e-5 * (1.0 + fd.abs()), "{fd} vs {}", g[a]);
            }
        }
    }
}
