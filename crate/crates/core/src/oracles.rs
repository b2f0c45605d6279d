//! Closed-form unsigned distance fields and matching tessellated meshes.
//!
//! Every field is centered at the origin. Distances are exact; gradients are
//! the unit vector from the closest surface point to the query and are
//! reported as undefined on the surface and within [`CUT_LOCUS_BAND`] of a
//! locus of equidistant closest points.

use crate::geom::{TriangleMesh, Vec3};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::f64::consts::PI;

/// Queries closer than this to a cut locus get no gradient.
pub const CUT_LOCUS_BAND: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnalyticField {
    /// Sphere of the given radius.
    Sphere { radius: f64 },
    /// The infinite plane `z = 0`.
    Plane,
    /// Lateral surface of a cylinder about the z axis, `|z| <= height / 2`,
    /// open at both ends.
    OpenCylinder { radius: f64, height: f64 },
    /// Square `[-side/2, side/2]^2` in the plane `z = 0` with a circular hole
    /// of radius `hole_radius` at the center.
    PlateWithHole { side: f64, hole_radius: f64 },
    /// Upper half (`z >= 0`) of a sphere, open along the equator.
    Hemisphere { radius: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldSample {
    pub distance: f64,
    pub closest: Vec3,
    /// `None` on the surface or near a cut locus.
    pub gradient: Option<Vec3>,
}

/// A tessellation of an analytic surface together with the bound on
/// `|analytic distance - mesh distance|` that holds for every query.
#[derive(Clone, Debug)]
pub struct OracleMesh {
    pub mesh: TriangleMesh,
    pub bound: f64,
}

impl AnalyticField {
    /// The acceptance plate: unit side with a 0.2 hole.
    pub fn default_plate() -> Self {
        AnalyticField::PlateWithHole {
            side: 1.0,
            hole_radius: 0.2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AnalyticField::Sphere { .. } => "sphere",
            AnalyticField::Plane => "plane",
            AnalyticField::OpenCylinder { .. } => "open_cylinder",
            AnalyticField::PlateWithHole { .. } => "plate_with_hole",
            AnalyticField::Hemisphere { .. } => "hemisphere",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("{}: {m}", self.name())));
        match *self {
            AnalyticField::Sphere { radius } | AnalyticField::Hemisphere { radius } => {
                if !(radius > 0.0 && radius.is_finite()) {
                    return bad("radius must be positive");
                }
            }
            AnalyticField::Plane => {}
            AnalyticField::OpenCylinder { radius, height } => {
                if !(radius > 0.0 && height > 0.0 && radius.is_finite() && height.is_finite()) {
                    return bad("radius and height must be positive");
                }
            }
            AnalyticField::PlateWithHole { side, hole_radius } => {
                if !(side > 0.0 && hole_radius > 0.0 && side.is_finite()) {
                    return bad("side and hole radius must be positive");
                }
                if hole_radius >= side / 2.0 {
                    return bad("hole must lie strictly inside the plate");
                }
            }
        }
        Ok(())
    }

    pub fn distance(&self, p: &Vec3) -> f64 {
        self.eval(p).distance
    }

    pub fn eval(&self, p: &Vec3) -> FieldSample {
        let (closest, near_cut_locus) = self.closest_point(p);
        let diff = p - closest;
        let distance = diff.norm();
        let gradient = if distance > 0.0 && !near_cut_locus {
            Some(diff / distance)
        } else {
            None
        };
        FieldSample {
            distance,
            closest,
            gradient,
        }
    }

    /// Closest surface point, and whether `p` lies within the cut-locus band.
    pub fn closest_point(&self, p: &Vec3) -> (Vec3, bool) {
        let rho = p.x.hypot(p.y);
        match *self {
            AnalyticField::Sphere { radius } => {
                let n = p.norm();
                if n == 0.0 {
                    (Vec3::new(radius, 0.0, 0.0), true)
                } else {
                    (p * (radius / n), n < CUT_LOCUS_BAND)
                }
            }
            AnalyticField::Plane => (Vec3::new(p.x, p.y, 0.0), false),
            AnalyticField::OpenCylinder { radius, height } => {
                let z = p.z.clamp(-height / 2.0, height / 2.0);
                if rho == 0.0 {
                    (Vec3::new(radius, 0.0, z), true)
                } else {
                    (Vec3::new(p.x * radius / rho, p.y * radius / rho, z), rho < CUT_LOCUS_BAND)
                }
            }
            AnalyticField::PlateWithHole { side, hole_radius } => {
                let h = side / 2.0;
                let (x, y) = (p.x.clamp(-h, h), p.y.clamp(-h, h));
                let r = x.hypot(y);
                if r >= hole_radius {
                    (Vec3::new(x, y, 0.0), false)
                } else if r == 0.0 {
                    (Vec3::new(hole_radius, 0.0, 0.0), true)
                } else {
                    // Only reachable from inside the hole cylinder, where the
                    // clamp is the identity.
                    let s = hole_radius / r;
                    (Vec3::new(x * s, y * s, 0.0), r < CUT_LOCUS_BAND)
                }
            }
            AnalyticField::Hemisphere { radius } => {
                if p.z >= 0.0 {
                    let n = p.norm();
                    if n == 0.0 {
                        (Vec3::new(radius, 0.0, 0.0), true)
                    } else {
                        (p * (radius / n), n < CUT_LOCUS_BAND)
                    }
                } else if rho == 0.0 {
                    (Vec3::new(radius, 0.0, 0.0), true)
                } else {
                    // Below the equator the closest point is on the rim.
                    (Vec3::new(p.x * radius / rho, p.y * radius / rho, 0.0), rho < CUT_LOCUS_BAND)
                }
            }
        }
    }

    /// Tessellates the surface; finer with larger `level` (at least 1).
    ///
    /// Bounds on `|analytic - mesh|` distance, all via the Hausdorff distance
    /// between surface and mesh:
    /// - sphere, hemisphere: vertices lie on the sphere, so the bound is
    ///   `r - min_f dist(center, plane_f)`, computed from the faces;
    /// - open cylinder: vertices on the lateral surface, bound is the sagitta
    ///   `r (1 - cos(pi / n))` for `n` segments around;
    /// - plate with hole: the hole is an `n`-gon circumscribing the circle,
    ///   so the mesh is a subset of the plate and the bound is
    ///   `rho (sec(pi / n) - 1)`;
    /// - plane: a unit square patch, exact for queries over the patch
    ///   (bound 0 there).
    pub fn make_mesh(&self, level: usize) -> Result<OracleMesh> {
        self.validate()?;
        if level == 0 {
            return Err(Error::InvalidConfig("tessellation level must be >= 1".into()));
        }
        match *self {
            AnalyticField::Sphere { radius } => {
                let (v, f) = icosphere(level);
                let v: Vec<Vec3> = v.into_iter().map(|p| p * radius).collect();
                let mesh = TriangleMesh::new(v, f)?;
                let bound = radius - min_plane_distance(&mesh);
                Ok(OracleMesh { mesh, bound })
            }
            AnalyticField::Hemisphere { radius } => {
                let mesh = hemisphere_mesh(radius, 4 * level, 16 * level)?;
                let bound = radius - min_plane_distance(&mesh);
                Ok(OracleMesh { mesh, bound })
            }
            AnalyticField::Plane => {
                let (v, f) = grid_patch(0.5, 4 * level);
                Ok(OracleMesh {
                    mesh: TriangleMesh::new(v, f)?,
                    bound: 0.0,
                })
            }
            AnalyticField::OpenCylinder { radius, height } => {
                let n = 16 * level;
                let (v, f) = cylinder_patch(radius, height, n, 4 * level);
                Ok(OracleMesh {
                    mesh: TriangleMesh::new(v, f)?,
                    bound: radius * (1.0 - (PI / n as f64).cos()),
                })
            }
            AnalyticField::PlateWithHole { side, hole_radius } => {
                let n = 16 * level;
                let (v, f) = plate_patch(side, hole_radius, n, 2 * level);
                Ok(OracleMesh {
                    mesh: TriangleMesh::new(v, f)?,
                    bound: hole_radius * (1.0 / (PI / n as f64).cos() - 1.0),
                })
            }
        }
    }
}

fn min_plane_distance(mesh: &TriangleMesh) -> f64 {
    (0..mesh.faces().len())
        .map(|f| {
            let [a, b, c] = mesh.triangle(f);
            let n = (b - a).cross(&(c - a)).normalize();
            n.dot(&a).abs()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Unit icosphere after `subdivisions` rounds of midpoint subdivision.
fn icosphere(subdivisions: usize) -> (Vec<Vec3>, Vec<[u32; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut v: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut f: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut mid: HashMap<(u32, u32), u32> = HashMap::new();
        let mut midpoint = |a: u32, b: u32, v: &mut Vec<Vec3>| -> u32 {
            let key = (a.min(b), a.max(b));
            *mid.entry(key).or_insert_with(|| {
                v.push(((v[a as usize] + v[b as usize]) / 2.0).normalize());
                (v.len() - 1) as u32
            })
        };
        let mut next = Vec::with_capacity(f.len() * 4);
        for [a, b, c] in f {
            let ab = midpoint(a, b, &mut v);
            let bc = midpoint(b, c, &mut v);
            let ca = midpoint(c, a, &mut v);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        f = next;
    }
    (v, f)
}

fn hemisphere_mesh(radius: f64, rings: usize, segments: usize) -> Result<TriangleMesh> {
    let mut v = vec![Vec3::new(0.0, 0.0, radius)];
    for i in 1..=rings {
        let theta = (PI / 2.0) * i as f64 / rings as f64;
        let (z, s) = if i == rings { (0.0, 1.0) } else { (theta.cos(), theta.sin()) };
        for j in 0..segments {
            let phi = 2.0 * PI * j as f64 / segments as f64;
            v.push(Vec3::new(radius * s * phi.cos(), radius * s * phi.sin(), radius * z));
        }
    }
    let ring = |i: usize, j: usize| (1 + (i - 1) * segments + j % segments) as u32;
    let mut f = Vec::new();
    for j in 0..segments {
        f.push([0, ring(1, j), ring(1, j + 1)]);
    }
    for i in 1..rings {
        for j in 0..segments {
            let (a, b, c, d) = (ring(i, j), ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1));
            f.push([a, c, d]);
            f.push([a, d, b]);
        }
    }
    TriangleMesh::new(v, f)
}

/// Square patch `[-h, h]^2` at `z = 0` split into `n x n` quads.
fn grid_patch(h: f64, n: usize) -> (Vec<Vec3>, Vec<[u32; 3]>) {
    let mut v = Vec::with_capacity((n + 1) * (n + 1));
    for i in 0..=n {
        for j in 0..=n {
            let x = -h + 2.0 * h * i as f64 / n as f64;
            let y = -h + 2.0 * h * j as f64 / n as f64;
            v.push(Vec3::new(x, y, 0.0));
        }
    }
    let id = |i: usize, j: usize| (i * (n + 1) + j) as u32;
    let mut f = Vec::with_capacity(2 * n * n);
    for i in 0..n {
        for j in 0..n {
            f.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
            f.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }
    (v, f)
}

/// Lateral cylinder surface about z with `segments` around and `rows` bands.
fn cylinder_patch(radius: f64, height: f64, segments: usize, rows: usize) -> (Vec<Vec3>, Vec<[u32; 3]>) {
    let mut v = Vec::with_capacity((rows + 1) * segments);
    for i in 0..=rows {
        let z = -height / 2.0 + height * i as f64 / rows as f64;
        for j in 0..segments {
            let phi = 2.0 * PI * j as f64 / segments as f64;
            v.push(Vec3::new(radius * phi.cos(), radius * phi.sin(), z));
        }
    }
    let id = |i: usize, j: usize| (i * segments + j % segments) as u32;
    let mut f = Vec::with_capacity(2 * rows * segments);
    for i in 0..rows {
        for j in 0..segments {
            f.push([id(i, j), id(i, j + 1), id(i + 1, j + 1)]);
            f.push([id(i, j), id(i + 1, j + 1), id(i + 1, j)]);
        }
    }
    (v, f)
}

/// Plate with a polygonal hole. Rings interpolate between the hole polygon
/// (circumscribing the circle) and the square boundary along rays at the
/// polygon's vertex angles. `segments` is a multiple of 8 so the square's
/// corners are ray targets and the outer ring traces the square exactly.
fn plate_patch(side: f64, hole_radius: f64, segments: usize, rows: usize) -> (Vec<Vec3>, Vec<[u32; 3]>) {
    debug_assert_eq!(segments % 8, 0);
    let h = side / 2.0;
    let r_poly = hole_radius / (PI / segments as f64).cos();
    let mut v = Vec::with_capacity((rows + 1) * segments);
    for i in 0..=rows {
        let t = i as f64 / rows as f64;
        for j in 0..segments {
            let phi = 2.0 * PI * j as f64 / segments as f64;
            let (c, s) = (phi.cos(), phi.sin());
            let inner = Vec3::new(r_poly * c, r_poly * s, 0.0);
            let scale = h / c.abs().max(s.abs());
            // Snap to the boundary so corner and edge vertices are exact.
            let outer = Vec3::new((scale * c).clamp(-h, h), (scale * s).clamp(-h, h), 0.0);
            let outer = if i == rows {
                Vec3::new(snap(outer.x, h), snap(outer.y, h), 0.0)
            } else {
                outer
            };
            v.push(inner * (1.0 - t) + outer * t);
        }
    }
    let id = |i: usize, j: usize| (i * segments + j % segments) as u32;
    let mut f = Vec::with_capacity(2 * rows * segments);
    for i in 0..rows {
        for j in 0..segments {
            f.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
            f.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }
    (v, f)
}

fn snap(x: f64, h: f64) -> f64 {
    if (x.abs() - h).abs() < 1e-12 {
        h.copysign(x)
    } else {
        x
    }
}

fn push_part(v: &mut Vec<Vec3>, f: &mut Vec<[u32; 3]>, pv: Vec<Vec3>, pf: Vec<[u32; 3]>) {
    let base = v.len() as u32;
    v.extend(pv);
    f.extend(pf.into_iter().map(|t| t.map(|i| i + base)));
}

fn box_surface(min: Vec3, max: Vec3, open_bottom: bool) -> (Vec<Vec3>, Vec<[u32; 3]>) {
    let corner = |i: u32| {
        Vec3::new(
            if i & 4 != 0 { max.x } else { min.x },
            if i & 2 != 0 { max.y } else { min.y },
            if i & 1 != 0 { max.z } else { min.z },
        )
    };
    let v: Vec<Vec3> = (0..8).map(corner).collect();
    let mut quads = vec![
        [1, 3, 7, 5], // top
        [0, 1, 5, 4], // y min
        [2, 6, 7, 3], // y max
        [0, 2, 3, 1], // x min
        [4, 5, 7, 6], // x max
    ];
    if !open_bottom {
        quads.push([0, 4, 6, 2]);
    }
    let f = quads
        .iter()
        .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
        .collect();
    (v, f)
}

/// A toy car: open-bottomed body and cabin boxes plus four open wheel
/// cylinders with axes along y. Not normalized.
pub fn car_like_mesh(level: usize) -> Result<TriangleMesh> {
    let level = level.max(1);
    let mut v = Vec::new();
    let mut f = Vec::new();
    let (bv, bf) = box_surface(Vec3::new(-1.0, -0.42, 0.12), Vec3::new(1.0, 0.42, 0.42), true);
    push_part(&mut v, &mut f, bv, bf);
    let (cv, cf) = box_surface(Vec3::new(-0.55, -0.36, 0.42), Vec3::new(0.35, 0.36, 0.68), true);
    push_part(&mut v, &mut f, cv, cf);
    for (cx, cy) in [(-0.6, -0.45), (-0.6, 0.45), (0.6, -0.45), (0.6, 0.45)] {
        let (wv, wf) = cylinder_patch(0.17, 0.12, 16 * level, 2);
        // Rotate the z axis onto y and place the wheel.
        let wv = wv.into_iter().map(|p| Vec3::new(p.x + cx, p.z + cy, p.y + 0.17)).collect();
        push_part(&mut v, &mut f, wv, wf);
    }
    TriangleMesh::new(v, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::DistanceIndex;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn all_fields() -> Vec<AnalyticField> {
        vec![
            AnalyticField::Sphere { radius: 0.4 },
            AnalyticField::Plane,
            AnalyticField::OpenCylinder { radius: 0.3, height: 0.6 },
            AnalyticField::default_plate(),
            AnalyticField::Hemisphere { radius: 0.4 },
        ]
    }

    fn random_point(rng: &mut ChaCha8Rng, h: f64) -> Vec3 {
        Vec3::new(rng.random_range(-h..h), rng.random_range(-h..h), rng.random_range(-h..h))
    }

    #[test]
    fn radial_sphere_sample() {
        let s = AnalyticField::Sphere { radius: 1.0 }.eval(&Vec3::new(2.0, 0.0, 0.0));
        assert_eq!(s.distance, 1.0);
        assert_eq!(s.gradient, Some(Vec3::new(1.0, 0.0, 0.0)));
    }

    #[test]
    fn plate_center_distance_reaches_the_rim() {
        let f = AnalyticField::PlateWithHole { side: 1.0, hole_radius: 0.2 };
        let s = f.eval(&Vec3::new(0.0, 0.0, 0.3));
        assert!((s.distance - (0.3f64.powi(2) + 0.04).sqrt()).abs() < 1e-15);
        assert!(s.gradient.is_none(), "center axis is a cut locus");
        // Inside the hole off-axis: sqrt(h^2 + (rho - r)^2).
        let s = f.eval(&Vec3::new(0.05, 0.0, 0.1));
        assert!((s.distance - (0.01f64 + 0.15 * 0.15).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn hemisphere_below_rim_measures_to_the_circle() {
        let f = AnalyticField::Hemisphere { radius: 1.0 };
        let s = f.eval(&Vec3::new(2.0, 0.0, -1.0));
        assert!((s.distance - 2f64.sqrt()).abs() < 1e-15);
        let s = f.eval(&Vec3::new(2.0, 0.0, 0.0));
        assert!((s.distance - 1.0).abs() < 1e-15);
    }

    #[test]
    fn eikonal_and_one_step_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for field in all_fields() {
            for _ in 0..2000 {
                let p = random_point(&mut rng, 0.75);
                let s = field.eval(&p);
                let Some(g) = s.gradient else { continue };
                assert!((g.norm() - 1.0).abs() < 1e-9);
                let q = p - s.distance * g;
                assert!(field.distance(&q) < 1e-9, "{} {p:?}", field.name());
            }
        }
    }

    #[test]
    fn mesh_distance_within_documented_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for field in all_fields() {
            let om = field.make_mesh(2).unwrap();
            let index = DistanceIndex::from_mesh(om.mesh.clone());
            for _ in 0..1000 {
                let mut p = random_point(&mut rng, 0.75);
                if field == AnalyticField::Plane {
                    p.x *= 0.5 / 0.75;
                    p.y *= 0.5 / 0.75;
                }
                let err = (field.distance(&p) - index.distance(&p)).abs();
                assert!(err <= om.bound + 1e-12, "{}: {err} > {}", field.name(), om.bound);
            }
        }
    }

    #[test]
    fn open_meshes_have_boundaries() {
        let hemi = AnalyticField::Hemisphere { radius: 1.0 }.make_mesh(1).unwrap();
        assert!(hemi.mesh.boundary_edge_count() > 0);
        let sphere = AnalyticField::Sphere { radius: 1.0 }.make_mesh(2).unwrap();
        assert_eq!(sphere.mesh.boundary_edge_count(), 0);
    }

    #[test]
    fn plate_faces_avoid_the_hole_disk() {
        let rho = 0.2;
        let om = AnalyticField::default_plate().make_mesh(2).unwrap();
        for fi in 0..om.mesh.faces().len() {
            let [a, b, c] = om.mesh.triangle(fi);
            // Distance from the disk center to the triangle (2D) must reach the rim.
            let d = crate::geom::point_triangle_distance(&Vec3::zeros(), &a, &b, &c);
            assert!(d >= rho - 1e-12, "face {fi} enters the hole: {d}");
        }
        let area = om.mesh.surface_area();
        let poly = 16.0 * 2.0 * rho * rho * (PI / 32.0).tan();
        assert!((area - (1.0 - poly)).abs() < 1e-12);
    }

    #[test]
    fn car_like_mesh_is_open_and_normalizable() {
        let m = car_like_mesh(1).unwrap();
        assert!(m.boundary_edge_count() > 0);
        let (n, _) = crate::geom::normalize_mesh(&m).unwrap();
        let b = n.bounds();
        assert!((b.extent().max() - 1.0).abs() < 1e-12);
    }
}
