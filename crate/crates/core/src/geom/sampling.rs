use super::{PointCloud, TriangleMesh, Vec3};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Draws `n` points uniformly over the mesh surface (faces chosen with
/// probability proportional to area, uniform barycentric placement).
pub fn sample_surface_points(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (points, _) = sample_with_faces(mesh, n, &mut rng)?;
    PointCloud::new(points)
}

/// Area-weighted random point generator over a mesh surface.
#[derive(Clone, Debug)]
pub struct SurfaceSampler<'a> {
    mesh: &'a TriangleMesh,
    cdf: Vec<f64>,
}

impl<'a> SurfaceSampler<'a> {
    pub fn new(mesh: &'a TriangleMesh) -> Result<Self> {
        let mut cdf = Vec::with_capacity(mesh.faces().len());
        let mut acc = 0.0;
        for f in 0..mesh.faces().len() {
            acc += mesh.face_area(f);
            cdf.push(acc);
        }
        if !(acc > 0.0) {
            return Err(Error::DegenerateInput("mesh has zero surface area".into()));
        }
        Ok(SurfaceSampler { mesh, cdf })
    }

    /// One uniform surface point and the face it lies on.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> (Vec3, usize) {
        let total = *self.cdf.last().expect("non-empty cdf");
        let u = rng.random::<f64>() * total;
        let f = self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1);
        let [a, b, c] = self.mesh.triangle(f);
        let s = rng.random::<f64>().sqrt();
        let r = rng.random::<f64>();
        (a * (1.0 - s) + b * (s * (1.0 - r)) + c * (s * r), f)
    }
}

/// Samples surface points and reports the face each one came from.
pub(crate) fn sample_with_faces<R: Rng>(
    mesh: &TriangleMesh,
    n: usize,
    rng: &mut R,
) -> Result<(Vec<Vec3>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::InvalidConfig("sample count must be at least 1".into()));
    }
    let sampler = SurfaceSampler::new(mesh)?;
    Ok((0..n).map(|_| sampler.sample(rng)).unzip())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_square() -> TriangleMesh {
        TriangleMesh::new(
            vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(1.0, 1.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap()
    }

    #[test]
    fn face_counts_follow_binomial_bound() {
        let mesh = unit_square();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (_, faces) = sample_with_faces(&mesh, 10_000, &mut rng).unwrap();
        let first = faces.iter().filter(|&&f| f == 0).count() as f64;
        // Binomial(10000, 0.5): sigma = 50.
        assert!((first - 5000.0).abs() <= 150.0, "{first}");
    }

    #[test]
    fn samples_lie_inside_their_triangle() {
        let mesh = TriangleMesh::new(
            vec![Vec3::new(0.2, -1.0, 3.0), Vec3::new(2.0, 0.5, 1.0), Vec3::new(-1.0, 1.0, 0.0)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let cloud = sample_surface_points(&mesh, 3, 9).unwrap();
        let [a, b, c] = mesh.triangle(0);
        let n = (b - a).cross(&(c - a));
        for p in cloud.points() {
            let u = (b - p).cross(&(c - p)).dot(&n) / n.norm_squared();
            let v = (c - p).cross(&(a - p)).dot(&n) / n.norm_squared();
            let w = 1.0 - u - v;
            assert!(u >= -1e-12 && v >= -1e-12 && w >= -1e-12);
            assert!((p - a).dot(&n).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let mesh = unit_square();
        let a = sample_surface_points(&mesh, 100, 42).unwrap();
        let b = sample_surface_points(&mesh, 100, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_surface_points(&mesh, 100, 43).unwrap();
        assert_ne!(a, c);
    }
}
