//! Oracle checks that need no dataset or trained model. Every output is a
//! function of the seed alone, so two runs can be compared byte for byte.

use crate::error::{CliError, CliResult};
use crate::lock::DirLock;
use crate::write_atomic;
use pvudf::geom::io::write_ply_points;
use pvudf::geom::{lost_point_fraction, point_triangle_distance, sample_surface_points, DistanceIndex, TriangleMesh, Vec3};
use pvudf::inference::{infer_surface, outlier_rate, project, InferenceConfig};
use pvudf::metrics::chamfer_l2;
use pvudf::oracles::{car_like_mesh, AnalyticField};
use pvudf::training::clamped_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::path::Path;

pub const SUMMARY_FILE: &str = "selftest.json";

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct SelfTestReport {
    pub seed: u64,
    pub checks: Vec<Check>,
}

impl SelfTestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn fields() -> Vec<AnalyticField> {
    vec![
        AnalyticField::Sphere { radius: 0.4 },
        AnalyticField::Plane,
        AnalyticField::default_plate(),
        AnalyticField::OpenCylinder { radius: 0.3, height: 0.6 },
        AnalyticField::Hemisphere { radius: 0.4 },
    ]
}

fn random_point(rng: &mut ChaCha8Rng, h: f64) -> Vec3 {
    Vec3::new(rng.random_range(-h..h), rng.random_range(-h..h), rng.random_range(-h..h))
}

fn distance_index_check(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let nv = 300;
        let v: Vec<Vec3> = (0..nv).map(|_| random_point(&mut rng, 0.5)).collect();
        let f: Vec<[u32; 3]> = (0..500)
            .map(|_| {
                let a = rng.random_range(0..nv as u32);
                let b = (a + rng.random_range(1..nv as u32)) % nv as u32;
                let mut c = rng.random_range(0..nv as u32);
                while c == a || c == b {
                    c = rng.random_range(0..nv as u32);
                }
                [a, b, c]
            })
            .collect();
        let mesh = match TriangleMesh::new(v, f) {
            Ok(m) => m,
            Err(e) => {
                return Check {
                    name: "distance_index".into(),
                    passed: false,
                    detail: e.to_string(),
                }
            }
        };
        let index = DistanceIndex::from_mesh(mesh.clone());
        for _ in 0..100 {
            let q = random_point(&mut rng, 0.8);
            let brute = (0..mesh.faces().len())
                .map(|k| {
                    let [a, b, c] = mesh.triangle(k);
                    point_triangle_distance(&q, &a, &b, &c)
                })
                .fold(f64::INFINITY, f64::min);
            worst = worst.max((index.distance(&q) - brute).abs());
        }
    }
    Check {
        name: "distance_index".into(),
        passed: worst <= 1e-12,
        detail: format!("max deviation from brute force {worst:e} over 500 queries"),
    }
}

fn projection_check(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let mut worst = 0.0f64;
    let mut used = 0;
    for f in fields() {
        let starts: Vec<Vec3> = (0..2000)
            .map(|_| random_point(&mut rng, 0.75))
            .filter(|p| f.eval(p).gradient.is_some())
            .collect();
        used += starts.len();
        match project(&starts, &f, 1) {
            Ok(q) => worst = q.iter().map(|p| f.distance(p)).fold(worst, f64::max),
            Err(e) => {
                return Check {
                    name: "projection".into(),
                    passed: false,
                    detail: e.to_string(),
                }
            }
        }
    }
    Check {
        name: "projection".into(),
        passed: worst < 1e-9,
        detail: format!("max residual after one step {worst:e} over {used} starts"),
    }
}

fn pipeline_check(seed: u64, out: &Path) -> CliResult<Check> {
    let cfg = InferenceConfig {
        out_res: 20_000,
        seed,
        ..InferenceConfig::default()
    };
    let mut passed = true;
    let mut notes = Vec::new();
    for (k, f) in fields().into_iter().enumerate() {
        let om = f.make_mesh(4)?;
        let input = sample_surface_points(&om.mesh, 2000, seed.wrapping_add(k as u64))?;
        let r = infer_surface(&f, input.points(), &cfg)?;
        let worst = r.output.iter().map(|p| f.distance(p)).fold(0.0, f64::max);
        // The plane is unbounded while its mesh is a finite patch.
        let rate = if f == AnalyticField::Plane {
            0.0
        } else {
            outlier_rate(&r.output, &DistanceIndex::from_mesh(om.mesh), 0.02)
        };
        let ok = worst < cfg.max_dist && rate == 0.0;
        passed &= ok;
        notes.push(format!("{}: {} points, max distance {worst:e}, outlier rate {rate}", f.name(), r.output.len()));
        let mut ply = Vec::new();
        write_ply_points(&r.output, &[("residual", &r.residuals)], &mut ply)?;
        write_atomic(&out.join(format!("{}.ply", f.name())), &ply)?;
    }
    Ok(Check {
        name: "pipeline".into(),
        passed,
        detail: notes.join("; "),
    })
}

fn metric_check(seed: u64) -> CliResult<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let a: Vec<Vec3> = (0..400).map(|_| random_point(&mut rng, 1.0)).collect();
        let b: Vec<Vec3> = (0..300).map(|_| random_point(&mut rng, 1.0)).collect();
        let nn = |x: &[Vec3], y: &[Vec3]| {
            x.iter()
                .map(|p| y.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / x.len() as f64
        };
        let brute = nn(&a, &b) + nn(&b, &a);
        worst = worst.max((chamfer_l2(&a, &b)?.mean - brute).abs());
    }
    Ok(Check {
        name: "chamfer".into(),
        passed: worst <= 1e-10,
        detail: format!("max deviation from brute force {worst:e}"),
    })
}

fn loss_check() -> CliResult<Check> {
    let d = 0.1;
    let same = clamped_loss(&[5.0 * d], &[2.0 * d], d)?;
    let diff = clamped_loss(&[0.5 * d], &[0.1 * d], d)?;
    Ok(Check {
        name: "clamped_loss".into(),
        passed: same == 0.0 && (diff - 0.4 * d).abs() < 1e-15,
        detail: format!("clamped pair {same}, unclamped pair {diff}"),
    })
}

fn lost_points_check(seed: u64) -> CliResult<Check> {
    let mesh = car_like_mesh(2)?;
    let (mesh, _) = pvudf::geom::normalize_mesh(&mesh)?;
    let cloud = sample_surface_points(&mesh, 10_000, seed ^ 3)?;
    let fr = [32, 64, 128, 256]
        .iter()
        .map(|&m| lost_point_fraction(&cloud, m))
        .collect::<pvudf::Result<Vec<f64>>>()?;
    Ok(Check {
        name: "lost_points".into(),
        passed: fr.windows(2).all(|w| w[1] < w[0]),
        detail: format!("fractions at M = 32, 64, 128, 256: {fr:?}"),
    })
}

/// Runs every check, writing per-field reconstructions and the summary into `out`.
pub fn run(out: &Path, seed: u64) -> CliResult<SelfTestReport> {
    let _lock = DirLock::acquire(out)?;
    let checks = vec![
        distance_index_check(seed),
        projection_check(seed),
        pipeline_check(seed, out)?,
        metric_check(seed)?,
        loss_check()?,
        lost_points_check(seed)?,
    ];
    let report = SelfTestReport { seed, checks };
    for c in &report.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_atomic(&out.join(SUMMARY_FILE), json.as_bytes())?;
    if report.passed() {
        Ok(report)
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Err(CliError::SelfTest(failed.join(", ")))
    }
}
