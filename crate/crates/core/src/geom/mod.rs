//! Geometry substrate: point clouds, triangle meshes, unit-cube normalization,
//! exact unsigned distance queries, surface sampling and voxelization.

mod bvh;
pub mod io;
mod sampling;
mod voxel;

pub use bvh::{closest_point_on_triangle, point_triangle_distance, DistanceIndex, SurfaceHit};
pub use sampling::{sample_surface_points, SurfaceSampler};
pub use voxel::{lost_point_fraction, voxelize, GridTransform, VoxelGrid};

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

pub type Vec3 = nalgebra::Vector3<f64>;

/// Half-width of the normalized cube. Normalized shapes live in `[-0.5, 0.5]^3`.
pub const UNIT_HALF_EXTENT: f64 = 0.5;

/// Slack allowed on the unit-cube bounds when checking that an input is
/// normalized; the forward transform can round a coordinate past 0.5 by an ulp.
pub const NORMALIZED_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn empty() -> Self {
        Aabb {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Self {
        let mut b = Aabb::empty();
        for p in points {
            b.grow(p);
        }
        b
    }

    pub fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&other.min),
            max: self.max.sup(&other.max),
        }
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Squared distance from `p` to the box (zero inside).
    pub fn distance_squared(&self, p: &Vec3) -> f64 {
        let mut d = 0.0;
        for i in 0..3 {
            let v = if p[i] < self.min[i] {
                self.min[i] - p[i]
            } else if p[i] > self.max[i] {
                p[i] - self.max[i]
            } else {
                0.0
            };
            d += v * v;
        }
        d
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::DegenerateInput("point cloud is empty".into()));
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::DegenerateInput(format!(
                "point {i} has a non-finite coordinate"
            )));
        }
        Ok(PointCloud { points })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Vec3> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bounds(&self) -> Aabb {
        Aabb::from_points(&self.points)
    }

    /// True when every coordinate lies in the unit cube (within [`NORMALIZED_TOLERANCE`]).
    pub fn is_normalized(&self) -> bool {
        let lim = UNIT_HALF_EXTENT + NORMALIZED_TOLERANCE;
        self.points
            .iter()
            .all(|p| p.iter().all(|c| c.abs() <= lim))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
}

impl TriangleMesh {
    /// Builds a mesh, dropping zero-area faces. Face indices must be valid.
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Result<Self> {
        let (mesh, dropped) = Self::with_cleanup(vertices, faces)?;
        if dropped > 0 {
            log::warn!("dropped {dropped} degenerate faces at ingestion");
        }
        Ok(mesh)
    }

    /// Like [`TriangleMesh::new`] but also returns the number of degenerate faces removed.
    pub fn with_cleanup(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Result<(Self, usize)> {
        if let Some(i) = vertices.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::DegenerateInput(format!(
                "vertex {i} has a non-finite coordinate"
            )));
        }
        let nv = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            if f.iter().any(|&i| i as usize >= nv) {
                return Err(Error::DegenerateInput(format!(
                    "face {fi} references a vertex out of range ({nv} vertices)"
                )));
            }
        }
        let before = faces.len();
        let faces: Vec<[u32; 3]> = faces
            .into_iter()
            .filter(|f| {
                let [a, b, c] = f.map(|i| vertices[i as usize]);
                let area2 = (b - a).cross(&(c - a)).norm();
                let scale = (b - a).norm().max((c - a).norm()).max(f64::MIN_POSITIVE);
                area2 > 1e-14 * scale * scale
            })
            .collect();
        let dropped = before - faces.len();
        if faces.is_empty() {
            return Err(Error::DegenerateInput("mesh has no non-degenerate faces".into()));
        }
        Ok((TriangleMesh { vertices, faces }, dropped))
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn triangle(&self, face: usize) -> [Vec3; 3] {
        self.faces[face].map(|i| self.vertices[i as usize])
    }

    pub fn face_area(&self, face: usize) -> f64 {
        let [a, b, c] = self.triangle(face);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    pub fn bounds(&self) -> Aabb {
        Aabb::from_points(&self.vertices)
    }

    /// Number of edges used by exactly one face. Non-zero for open surfaces.
    pub fn boundary_edge_count(&self) -> usize {
        let mut counts = std::collections::HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0usize) += 1;
            }
        }
        counts.values().filter(|&&c| c == 1).count()
    }

    pub fn map_vertices(&self, f: impl Fn(&Vec3) -> Vec3) -> TriangleMesh {
        TriangleMesh {
            vertices: self.vertices.iter().map(f).collect(),
            faces: self.faces.clone(),
        }
    }
}

/// Affine map `normalized = (world - offset) * scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationTransform {
    pub scale: f64,
    pub offset: [f64; 3],
}

impl NormalizationTransform {
    pub fn identity() -> Self {
        NormalizationTransform {
            scale: 1.0,
            offset: [0.0; 3],
        }
    }

    /// Maps the longest bounding-box axis of `points` to length 1, centered at the origin.
    pub fn fit(points: &[Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::DegenerateInput("cannot normalize an empty input".into()));
        }
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::DegenerateInput("input has non-finite coordinates".into()));
        }
        let b = Aabb::from_points(points);
        let longest = b.extent().max();
        if longest <= 0.0 {
            return Err(Error::DegenerateInput(
                "bounding box has zero extent".into(),
            ));
        }
        let c = b.center();
        Ok(NormalizationTransform {
            scale: 1.0 / longest,
            offset: [c.x, c.y, c.z],
        })
    }

    pub fn offset(&self) -> Vec3 {
        Vec3::from(self.offset)
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        (p - self.offset()) * self.scale
    }

    pub fn invert(&self, q: &Vec3) -> Vec3 {
        q / self.scale + self.offset()
    }

    /// Converts a length in normalized units back to world units.
    pub fn invert_length(&self, len: f64) -> f64 {
        len / self.scale
    }
}

pub fn normalize_cloud(cloud: &PointCloud) -> Result<(PointCloud, NormalizationTransform)> {
    let t = NormalizationTransform::fit(cloud.points())?;
    let pts = cloud.points().iter().map(|p| t.apply(p)).collect();
    Ok((PointCloud::new(pts)?, t))
}

pub fn normalize_mesh(mesh: &TriangleMesh) -> Result<(TriangleMesh, NormalizationTransform)> {
    let t = NormalizationTransform::fit(mesh.vertices())?;
    Ok((mesh.map_vertices(|p| t.apply(p)), t))
}
