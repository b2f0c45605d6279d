use super::{Aabb, TriangleMesh, Vec3};
use std::sync::Arc;

const LEAF_SIZE: usize = 4;

/// Closest point to `p` on triangle `abc` (Voronoi-region walk).
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

pub fn point_triangle_distance(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    (p - closest_point_on_triangle(p, a, b, c)).norm()
}

#[derive(Clone, Debug)]
enum Node {
    Leaf { bounds: Aabb, start: usize, end: usize },
    Inner { bounds: Aabb, left: usize, right: usize },
}

impl Node {
    fn bounds(&self) -> &Aabb {
        match self {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }
}

/// Result of a closest-point query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceHit {
    pub distance: f64,
    pub point: Vec3,
    pub face: usize,
}

/// Bounding-volume hierarchy over the faces of a triangle mesh answering exact
/// unsigned point-to-surface distance queries. Immutable once built.
#[derive(Clone, Debug)]
pub struct DistanceIndex {
    mesh: Arc<TriangleMesh>,
    nodes: Vec<Node>,
    order: Vec<usize>,
    tris: Vec<[Vec3; 3]>,
}

impl DistanceIndex {
    pub fn build(mesh: Arc<TriangleMesh>) -> Self {
        let n = mesh.faces().len();
        let tris: Vec<[Vec3; 3]> = (0..n).map(|f| mesh.triangle(f)).collect();
        let boxes: Vec<Aabb> = tris.iter().map(|t| Aabb::from_points(t.iter())).collect();
        let centroids: Vec<Vec3> = boxes.iter().map(|b| b.center()).collect();
        let mut order: Vec<usize> = (0..n).collect();
        let mut nodes = Vec::with_capacity(2 * n / LEAF_SIZE + 1);
        build_node(&mut nodes, &mut order, 0, n, &boxes, &centroids);
        DistanceIndex {
            mesh,
            nodes,
            order,
            tris,
        }
    }

    pub fn from_mesh(mesh: TriangleMesh) -> Self {
        Self::build(Arc::new(mesh))
    }

    pub fn mesh(&self) -> &TriangleMesh {
        &self.mesh
    }

    /// Exact unsigned distance from `p` to the mesh surface.
    pub fn distance(&self, p: &Vec3) -> f64 {
        self.closest(p).distance
    }

    pub fn closest(&self, p: &Vec3) -> SurfaceHit {
        let mut best = SurfaceHit {
            distance: f64::INFINITY,
            point: *p,
            face: usize::MAX,
        };
        let mut best_sq = f64::INFINITY;
        let mut stack: Vec<usize> = Vec::with_capacity(64);
        stack.push(0);
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            if node.bounds().distance_squared(p) >= best_sq {
                continue;
            }
            match *node {
                Node::Leaf { start, end, .. } => {
                    for &f in &self.order[start..end] {
                        let [a, b, c] = &self.tris[f];
                        let q = closest_point_on_triangle(p, a, b, c);
                        let d = (p - q).norm_squared();
                        if d < best_sq || (d == best_sq && f < best.face) {
                            best_sq = d;
                            best = SurfaceHit {
                                distance: 0.0,
                                point: q,
                                face: f,
                            };
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    let dl = self.nodes[left].bounds().distance_squared(p);
                    let dr = self.nodes[right].bounds().distance_squared(p);
                    // Push the farther child first so the nearer one is visited next.
                    if dl <= dr {
                        stack.push(right);
                        stack.push(left);
                    } else {
                        stack.push(left);
                        stack.push(right);
                    }
                }
            }
        }
        best.distance = (p - best.point).norm();
        best
    }

    /// Reference answer by scanning every face.
    pub fn brute_force_distance(&self, p: &Vec3) -> f64 {
        self.tris
            .iter()
            .map(|[a, b, c]| point_triangle_distance(p, a, b, c))
            .fold(f64::INFINITY, f64::min)
    }
}

fn build_node(
    nodes: &mut Vec<Node>,
    order: &mut [usize],
    start: usize,
    end: usize,
    boxes: &[Aabb],
    centroids: &[Vec3],
) -> usize {
    let bounds = order[start..end]
        .iter()
        .fold(Aabb::empty(), |acc, &f| acc.union(&boxes[f]));
    let idx = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { bounds, start, end });
        return idx;
    }
    let cb = Aabb::from_points(order[start..end].iter().map(|&f| &centroids[f]));
    let ext = cb.extent();
    let axis = if ext.x >= ext.y && ext.x >= ext.z {
        0
    } else if ext.y >= ext.z {
        1
    } else {
        2
    };
    let mid = start + (end - start) / 2;
    order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
        centroids[a][axis]
            .total_cmp(&centroids[b][axis])
            .then(a.cmp(&b))
    });
    nodes.push(Node::Leaf {
        bounds,
        start,
        end,
    });
    let left = build_node(nodes, order, start, mid, boxes, centroids);
    let right = build_node(nodes, order, mid, end, boxes, centroids);
    nodes[idx] = Node::Inner {
        bounds,
        left,
        right,
    };
    idx
}
