//! Point-cloud reconstruction metrics: chamfer-L2, precision, recall and
//! F-score, backed by a kd-tree for nearest-neighbor queries.

use crate::geom::{Aabb, Vec3};
use crate::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Default F-score thresholds as fractions of the ground-truth bounding-box
/// diagonal (0.1% and 0.05%).
pub const DEFAULT_THRESHOLDS: [f64; 2] = [0.001, 0.0005];

const LEAF_SIZE: usize = 8;

#[derive(Clone, Debug)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Static 3D kd-tree over a point set.
#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Vec3>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn build(points: &[Vec3]) -> Self {
        let mut pts = points.to_vec();
        let mut nodes = Vec::new();
        if !pts.is_empty() {
            let n = pts.len();
            build(&mut nodes, &mut pts, 0, n);
        }
        KdTree { points: pts, nodes }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Squared distance from `q` to the nearest stored point.
    pub fn nearest_squared(&self, q: &Vec3) -> f64 {
        let mut best = f64::INFINITY;
        if !self.nodes.is_empty() {
            self.search(0, q, &mut best);
        }
        best
    }

    fn search(&self, node: usize, q: &Vec3, best: &mut f64) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for p in &self.points[start..end] {
                    let d = (p - q).norm_squared();
                    if d < *best {
                        *best = d;
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                if diff * diff < *best {
                    self.search(far, q, best);
                }
            }
        }
    }
}

fn build(nodes: &mut Vec<Node>, pts: &mut [Vec3], start: usize, end: usize) -> usize {
    let id = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let bounds = Aabb::from_points(pts[start..end].iter());
    let axis = bounds.extent().imax();
    let mid = (start + end) / 2;
    pts[start..end].select_nth_unstable_by(mid - start, |a, b| a[axis].total_cmp(&b[axis]));
    let value = pts[mid][axis];
    nodes.push(Node::Leaf { start, end });
    // Left holds [start, mid) with coords <= value, right [mid, end) with >= value.
    let left = build(nodes, pts, start, mid);
    let right = build(nodes, pts, mid, end);
    nodes[id] = Node::Split { axis, value, left, right };
    id
}

/// Squared nearest-neighbor distance from each query to `tree`.
pub fn nearest_squared_distances(queries: &[Vec3], tree: &KdTree) -> Vec<f64> {
    queries.par_iter().map(|q| tree.nearest_squared(q)).collect()
}

/// Both chamfer conventions: per-cloud means and plain sums of squared
/// nearest-neighbor distances, each added over the two directions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chamfer {
    pub mean: f64,
    pub sum: f64,
}

fn check_nonempty(y: &[Vec3], y_gt: &[Vec3]) -> Result<()> {
    if y.is_empty() || y_gt.is_empty() {
        return Err(Error::DegenerateInput("metric inputs must be non-empty".into()));
    }
    Ok(())
}

struct Pairing {
    /// Squared distances from Y to Y_gt.
    forward: Vec<f64>,
    /// Squared distances from Y_gt to Y.
    backward: Vec<f64>,
}

impl Pairing {
    fn new(y: &[Vec3], y_gt: &[Vec3]) -> Result<Self> {
        check_nonempty(y, y_gt)?;
        Ok(Pairing {
            forward: nearest_squared_distances(y, &KdTree::build(y_gt)),
            backward: nearest_squared_distances(y_gt, &KdTree::build(y)),
        })
    }

    fn chamfer(&self) -> Chamfer {
        let sf: f64 = self.forward.iter().sum();
        let sb: f64 = self.backward.iter().sum();
        Chamfer {
            mean: sf / self.forward.len() as f64 + sb / self.backward.len() as f64,
            sum: sf + sb,
        }
    }

    fn precision_recall(&self, d: f64) -> (f64, f64) {
        let d2 = d * d;
        let frac = |v: &[f64]| v.iter().filter(|&&x| x < d2).count() as f64 / v.len() as f64;
        (frac(&self.forward), frac(&self.backward))
    }
}

pub fn chamfer_l2(y: &[Vec3], y_gt: &[Vec3]) -> Result<Chamfer> {
    Ok(Pairing::new(y, y_gt)?.chamfer())
}

/// Fractions of `y` within `d` of `y_gt` (precision) and of `y_gt` within `d`
/// of `y` (recall), with strict inequality.
pub fn precision_recall(y: &[Vec3], y_gt: &[Vec3], d: f64) -> Result<(f64, f64)> {
    if !(d > 0.0) {
        return Err(Error::InvalidConfig(format!("threshold must be positive, got {d}")));
    }
    Ok(Pairing::new(y, y_gt)?.precision_recall(d))
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn fscore(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdScore {
    /// Threshold as a fraction of the ground-truth bounding-box diagonal.
    pub fraction: f64,
    /// Threshold in the clouds' units.
    pub distance: f64,
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub chamfer_mean: f64,
    pub chamfer_sum: f64,
    /// `chamfer_mean` expressed in units of 1e-4.
    pub chamfer_mean_e4: f64,
    pub scores: Vec<ThresholdScore>,
}

/// Full evaluation; thresholds are fractions of the ground-truth diagonal.
pub fn evaluate(y: &[Vec3], y_gt: &[Vec3], fractions: &[f64]) -> Result<MetricReport> {
    let pairing = Pairing::new(y, y_gt)?;
    let diag = Aabb::from_points(y_gt.iter()).diagonal();
    let ch = pairing.chamfer();
    let mut scores = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        if !(fraction > 0.0) {
            return Err(Error::InvalidConfig(format!("threshold fraction must be positive, got {fraction}")));
        }
        // A single-point ground truth has zero diagonal; fall back to the raw value.
        let distance = if diag > 0.0 { fraction * diag } else { fraction };
        let (precision, recall) = pairing.precision_recall(distance);
        scores.push(ThresholdScore {
            fraction,
            distance,
            precision,
            recall,
            fscore: fscore(precision, recall),
        });
    }
    Ok(MetricReport {
        chamfer_mean: ch.mean,
        chamfer_sum: ch.sum,
        chamfer_mean_e4: ch.mean * 1e4,
        scores,
    })
}
