//! Runs the binary on small TOML configs.

use pvudf::geom::io::save_mesh;
use pvudf::oracles::AnalyticField;
use std::path::Path;
use std::process::{Command, Output};

fn pvudf(args: &[&str], config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pvudf"))
        .args(args)
        .arg(config)
        .env("PVUDF_THREADS", "1")
        .output()
        .expect("spawn pvudf")
}

#[test]
fn oracle_reconstruction_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    save_mesh(d.join("sphere.obj"), &AnalyticField::Sphere { radius: 0.4 }.make_mesh(4).unwrap().mesh).unwrap();
    std::fs::write(
        d.join("recon.toml"),
        format!(
            r#"config_version = 1
output = "{}"
oracle = {{ kind = "sphere", radius = 0.4 }}
oracle_samples = 2000

[inference]
out_res = 20000
seed = 3
"#,
            d.join("out/sphere.ply").display()
        ),
    )
    .unwrap();
    let out = pvudf(&["reconstruct"], &d.join("recon.toml"));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("out/sphere.json")).unwrap()).unwrap();
    assert_eq!(report["output_points"], 20000);
    assert_eq!(report["source"], "oracle:sphere");

    std::fs::write(
        d.join("eval.toml"),
        format!(
            r#"config_version = 1
output = "{}"
gt_samples = 20000

[[pairs]]
id = "sphere"
reconstruction = "{}"
ground_truth = "{}"
"#,
            d.join("scores.csv").display(),
            d.join("out/sphere.ply").display(),
            d.join("sphere.obj").display()
        ),
    )
    .unwrap();
    let out = pvudf(&["eval"], &d.join("eval.toml"));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(d.join("scores.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("id,points,chamfer_mean"));
    assert!(lines[1].starts_with("sphere,20000,"));
    assert!(lines[2].starts_with("mean,"));
    // The mesh is a faceted approximation, so the score is small but not zero.
    let cd: f64 = lines[1].split(',').nth(2).unwrap().parse().unwrap();
    assert!(cd > 0.0 && cd < 1e-4, "chamfer {cd}");
}

#[test]
fn bad_configs_exit_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cases = [
        ("version.toml", "config_version = 2\noutput = \"x.ply\"\noracle = { kind = \"plane\" }\n"),
        ("unknown.toml", "config_version = 1\noutput = \"x.ply\"\noracle = { kind = \"plane\" }\ncolour = 1\n"),
        ("neither.toml", "config_version = 1\noutput = \"x.ply\"\n"),
    ];
    for (name, text) in cases {
        std::fs::write(d.join(name), text).unwrap();
        let out = pvudf(&["reconstruct"], &d.join(name));
        assert_eq!(out.status.code(), Some(1), "{name}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn missing_input_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("r.toml"),
        format!(
            "config_version = 1\ninput = \"{}\"\noutput = \"{}\"\noracle = {{ kind = \"plane\" }}\n",
            d.join("absent.ply").display(),
            d.join("x.ply").display()
        ),
    )
    .unwrap();
    let out = pvudf(&["reconstruct"], &d.join("r.toml"));
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join(".pvudf.lock"), "").unwrap();
    std::fs::write(
        d.join("r.toml"),
        format!(
            "config_version = 1\noutput = \"{}\"\noracle = {{ kind = \"plane\" }}\n",
            d.join("x.ply").display()
        ),
    )
    .unwrap();
    let out = pvudf(&["reconstruct"], &d.join("r.toml"));
    assert_eq!(out.status.code(), Some(1));
    assert!(!d.join("x.ply").exists());
}
