//! Prepared dataset layout: normalized meshes, surface samples per density,
//! occupancy grids per density and resolution, and query archives, listed in
//! a TOML manifest.

use super::queries::{generate_training_queries, QueryBatch};
use super::trainer::TrainingShape;
use super::TrainConfig;
use crate::diff::checkpoint::Checkpoint;
use crate::geom::io::{read_mesh, read_points, save_mesh, save_points};
use crate::geom::{normalize_mesh, sample_surface_points, voxelize, DistanceIndex, NormalizationTransform, VoxelGrid};
use crate::model::EncoderInput;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

pub const DATASET_MANIFEST: &str = "dataset.toml";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One mesh to be prepared.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceShape {
    pub id: String,
    pub path: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityFile {
    pub n: usize,
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    pub n: usize,
    pub resolution: usize,
    pub path: String,
}

/// A prepared shape. Paths are relative to the dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeRecord {
    pub id: String,
    pub source: PathBuf,
    pub split: Split,
    /// Maps source coordinates into the unit cube.
    pub transform: NormalizationTransform,
    pub mesh: String,
    pub points: Vec<DensityFile>,
    pub grids: Vec<GridFile>,
    pub queries: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub config_version: u32,
    pub seed: u64,
    pub densities: Vec<usize>,
    pub resolutions: Vec<usize>,
    pub queries_per_shape: usize,
    pub shapes: Vec<ShapeRecord>,
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(DATASET_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: DatasetManifest = toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        if m.config_version != DATASET_VERSION {
            return Err(Error::Format(format!(
                "dataset manifest version {} (expected {DATASET_VERSION})",
                m.config_version
            )));
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        write_atomic(&dir.join(DATASET_MANIFEST), text.as_bytes())
    }

    pub fn shape(&self, id: &str) -> Option<&ShapeRecord> {
        self.shapes.iter().find(|s| s.id == id)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrepareOptions {
    /// Surface sample counts N.
    pub densities: Vec<usize>,
    /// Grid resolutions M.
    pub resolutions: Vec<usize>,
    /// Query sampling settings (sigmas, weights, uniform share, count).
    pub queries: TrainConfig,
    pub seed: u64,
}

impl PrepareOptions {
    pub fn validate(&self) -> Result<()> {
        if self.densities.is_empty() || self.densities.contains(&0) {
            return Err(Error::InvalidConfig("densities must be a non-empty list of positive counts".into()));
        }
        if self.resolutions.is_empty() || self.resolutions.iter().any(|&m| !(2..=512).contains(&m)) {
            return Err(Error::InvalidConfig("resolutions must be a non-empty list within [2, 512]".into()));
        }
        self.queries.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkippedShape {
    pub id: String,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct PrepareOutcome {
    pub manifest: DatasetManifest,
    pub skipped: Vec<SkippedShape>,
}

/// Seed for the shape at `index` derived from the dataset seed.
pub fn shape_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64 + 1)
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) && !id.starts_with('.')
}

/// Validates sources and options without touching the filesystem.
pub fn check_sources(sources: &[SourceShape]) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for s in sources {
        if !valid_id(&s.id) {
            return Err(Error::InvalidConfig(format!("shape id {:?} must be non-empty [A-Za-z0-9._-]", s.id)));
        }
        if !seen.insert(&s.id) {
            return Err(Error::InvalidConfig(format!("duplicate shape id {:?}", s.id)));
        }
    }
    Ok(())
}

fn prepare_shape(out: &Path, src: &SourceShape, index: usize, opts: &PrepareOptions) -> Result<ShapeRecord> {
    let raw = read_mesh(&src.path)?;
    let (mesh, transform) = normalize_mesh(&raw)?;
    if mesh.surface_area() <= 0.0 {
        return Err(Error::DegenerateInput("zero surface area".into()));
    }
    let seed = shape_seed(opts.seed, index);
    let dir = out.join(&src.id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let rel = |name: String| format!("{}/{name}", src.id);

    let mesh_name = rel("mesh.obj".into());
    save_mesh(out.join(&mesh_name), &mesh)?;
    let mut points = Vec::new();
    let mut grids = Vec::new();
    for &n in &opts.densities {
        let cloud = sample_surface_points(&mesh, n, seed ^ n as u64)?;
        let p = rel(format!("points_{n}.ply"));
        save_points(out.join(&p), cloud.points(), &[])?;
        // Grids are built from the stored cloud so they match what loaders see.
        let stored = read_points(out.join(&p))?;
        points.push(DensityFile { n, path: p });
        for &m in &opts.resolutions {
            let grid = voxelize(&stored, m)?;
            let g = rel(format!("grid_{n}_{m}.bin"));
            let path = out.join(&g);
            let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
            grid.write_to(BufWriter::new(f)).map_err(|e| Error::io(&path, e))?;
            grids.push(GridFile {
                n,
                resolution: m,
                path: g,
            });
        }
    }
    let index_ = DistanceIndex::from_mesh(mesh.clone());
    let queries = generate_training_queries(&mesh, &index_, &opts.queries, seed)?;
    let q = rel("queries.bin".into());
    queries.to_checkpoint(&src.id).save(&out.join(&q))?;
    Ok(ShapeRecord {
        id: src.id.clone(),
        source: src.path.clone(),
        split: src.split,
        transform,
        mesh: mesh_name,
        points,
        grids,
        queries: q,
    })
}

/// Prepares every source into `out`. Unreadable or degenerate meshes are
/// skipped with a logged reason.
pub fn prepare_dataset(sources: &[SourceShape], out: &Path, opts: &PrepareOptions) -> Result<PrepareOutcome> {
    opts.validate()?;
    check_sources(sources)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut shapes = Vec::new();
    let mut skipped = Vec::new();
    for (i, src) in sources.iter().enumerate() {
        match prepare_shape(out, src, i, opts) {
            Ok(rec) => {
                log::info!("prepared {}", src.id);
                shapes.push(rec);
            }
            Err(e @ Error::InvalidConfig(_)) => return Err(e),
            Err(e) => {
                log::warn!("skipping {}: {e}", src.id);
                skipped.push(SkippedShape {
                    id: src.id.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    let manifest = DatasetManifest {
        config_version: DATASET_VERSION,
        seed: opts.seed,
        densities: opts.densities.clone(),
        resolutions: opts.resolutions.clone(),
        queries_per_shape: opts.queries.queries_per_shape,
        shapes,
    };
    manifest.save(out)?;
    Ok(PrepareOutcome { manifest, skipped })
}

/// Loads the shapes of one split at density `n` and resolution `m`.
pub fn load_shapes(dir: &Path, manifest: &DatasetManifest, split: Split, n: usize, m: usize) -> Result<Vec<TrainingShape>> {
    let mut out = Vec::new();
    for rec in manifest.shapes.iter().filter(|s| s.split == split) {
        let pts = rec
            .points
            .iter()
            .find(|d| d.n == n)
            .ok_or_else(|| Error::InvalidConfig(format!("shape {} has no samples at N={n}", rec.id)))?;
        let grid = rec
            .grids
            .iter()
            .find(|g| g.n == n && g.resolution == m)
            .ok_or_else(|| Error::InvalidConfig(format!("shape {} has no grid at N={n}, M={m}", rec.id)))?;
        let cloud = read_points(dir.join(&pts.path))?;
        let gpath = dir.join(&grid.path);
        let f = File::open(&gpath).map_err(|e| Error::io(&gpath, e))?;
        let grid = VoxelGrid::read_from(BufReader::new(f))?;
        let queries = QueryBatch::from_checkpoint(&Checkpoint::load(&dir.join(&rec.queries))?)?;
        out.push(TrainingShape {
            id: rec.id.clone(),
            input: EncoderInput::new(&cloud, &grid),
            queries,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::AnalyticField;

    fn opts() -> PrepareOptions {
        PrepareOptions {
            densities: vec![300],
            resolutions: vec![32],
            queries: TrainConfig {
                queries_per_shape: 500,
                ..TrainConfig::default()
            },
            seed: 5,
        }
    }

    fn write_sources(dir: &Path) -> Vec<SourceShape> {
        let plate = AnalyticField::default_plate().make_mesh(1).unwrap().mesh;
        let p = dir.join("plate.obj");
        save_mesh(&p, &plate).unwrap();
        let bad = dir.join("broken.obj");
        fs::write(&bad, "v 0 0 0\nf 1 2 3\n").unwrap();
        vec![
            SourceShape {
                id: "plate".into(),
                path: p,
                split: Split::Train,
            },
            SourceShape {
                id: "broken".into(),
                path: bad,
                split: Split::Train,
            },
        ]
    }

    #[test]
    fn prepare_is_deterministic_and_skips_bad_meshes() {
        let tmp = tempfile::tempdir().unwrap();
        let sources = write_sources(tmp.path());
        let a = tmp.path().join("a");
        let b = tmp.path().join("b");
        let out = prepare_dataset(&sources, &a, &opts()).unwrap();
        prepare_dataset(&sources, &b, &opts()).unwrap();
        assert_eq!(out.manifest.shapes.len(), 1);
        assert_eq!(out.skipped.len(), 1);
        for f in ["plate/mesh.obj", "plate/points_300.ply", "plate/grid_300_32.bin", "plate/queries.bin"] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
        }
        let m = DatasetManifest::load(&a).unwrap();
        assert_eq!(m, out.manifest);
        let shapes = load_shapes(&a, &m, Split::Train, 300, 32).unwrap();
        assert_eq!(shapes.len(), 1);
        assert_eq!(shapes[0].queries.len(), 500);
        assert!(load_shapes(&a, &m, Split::Train, 300, 64).is_err());
    }

    #[test]
    fn invalid_options_touch_nothing() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("never");
        let mut o = opts();
        o.resolutions = vec![];
        assert!(prepare_dataset(&[], &out, &o).is_err());
        assert!(!out.exists());
        let dup = vec![
            SourceShape {
                id: "a".into(),
                path: "x".into(),
                split: Split::Train,
            };
            2
        ];
        assert!(prepare_dataset(&dup, &out, &opts()).is_err());
        assert!(!out.exists());
    }
}
