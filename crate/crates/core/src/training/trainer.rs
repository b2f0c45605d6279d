use super::adam::Adam;
use super::dataset::write_atomic;
use super::loss::{clamped_loss, clamped_loss_grad};
use super::queries::{generate_training_queries, QueryBatch};
use crate::rng::stream_rng;
use super::TrainConfig;
use crate::diff::checkpoint::Checkpoint;
use crate::diff::{Scalar, Tensor};
use crate::geom::{sample_surface_points, voxelize, DistanceIndex, TriangleMesh, Vec3};
use crate::model::{EncoderInput, ModelConfig, UdfModel};
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const LOSS_CSV: &str = "loss.csv";
const LATEST: &str = "latest.ckpt";
const BEST: &str = "best.ckpt";
/// Separates the batch-selection stream from query-generation streams.
const STEP_SALT: u64 = 0x57E9_0000_0000_0001;

/// One training shape: encoder input and its query pool.
#[derive(Clone, Debug)]
pub struct TrainingShape {
    pub id: String,
    pub input: EncoderInput<f32>,
    pub queries: QueryBatch,
}

impl TrainingShape {
    /// Samples `n` input points from a normalized mesh, voxelizes them at
    /// `resolution` and generates the query pool, all from `seed`.
    pub fn from_mesh(id: &str, mesh: &TriangleMesh, n: usize, resolution: usize, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        let cloud = sample_surface_points(mesh, n, seed)?;
        let grid = voxelize(&cloud, resolution)?;
        let index = DistanceIndex::from_mesh(mesh.clone());
        let queries = generate_training_queries(mesh, &index, cfg, seed)?;
        Ok(TrainingShape {
            id: id.to_string(),
            input: EncoderInput::new(&cloud, &grid),
            queries,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    /// Mean clamped loss per query of the step's batch.
    pub train_loss: f64,
    /// Mean clamped loss per validation query, on evaluation steps.
    pub val_loss: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    Plateau,
    TimeBudget,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: u64,
    pub stop: StopReason,
    pub final_train_loss: Option<f64>,
    pub best_val_loss: Option<f64>,
    pub seconds: f64,
}

/// Query indices of a shape usable for training or validation.
struct Pool<'a> {
    shape: &'a TrainingShape,
    range: Range<usize>,
}

/// Model, optimizer and bookkeeping; everything needed for a bit-identical
/// resume lives in its checkpoint.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: UdfModel<f32>,
    pub adam: Adam<f32>,
    pub step: u64,
    pub best_val: Option<f64>,
    pub since_best: usize,
    pub history: Vec<LossRecord>,
    /// Where a failing batch is written on a non-finite loss.
    pub dump_dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct FailedBatch<'a> {
    step: u64,
    shapes: Vec<&'a str>,
    points: Vec<[f64; 3]>,
    targets: Vec<f64>,
    predictions: Vec<f64>,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = UdfModel::new(model_cfg, cfg.seed)?;
        Ok(Self::with_model(model, cfg))
    }

    pub fn with_model(model: UdfModel<f32>, cfg: TrainConfig) -> Self {
        let shapes: Vec<Vec<usize>> = model.params().iter().map(|t| t.shape().to_vec()).collect();
        let refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        let adam = Adam::new(&refs, cfg.learning_rate);
        Trainer {
            cfg,
            model,
            adam,
            step: 0,
            best_val: None,
            since_best: 0,
            history: Vec::new(),
            dump_dir: None,
        }
    }

    fn split_pools<'a>(&self, train: &'a [TrainingShape], val: &'a [TrainingShape]) -> Result<(Vec<Pool<'a>>, Vec<Pool<'a>>)> {
        if train.is_empty() {
            return Err(Error::InvalidConfig("no training shapes".into()));
        }
        for s in train.iter().chain(val) {
            if s.queries.is_empty() {
                return Err(Error::DegenerateInput(format!("shape {} has no queries", s.id)));
            }
        }
        if !val.is_empty() {
            let t = train.iter().map(|s| Pool { shape: s, range: 0..s.queries.len() }).collect();
            let v = val.iter().map(|s| Pool { shape: s, range: 0..s.queries.len() }).collect();
            return Ok((t, v));
        }
        // No validation shapes: hold out the tail of every query pool.
        let mut t = Vec::new();
        let mut v = Vec::new();
        for s in train {
            let n = s.queries.len();
            let held = ((n as f64 * self.cfg.holdout_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
            if n < 2 {
                return Err(Error::DegenerateInput(format!("shape {} needs at least 2 queries for a holdout", s.id)));
            }
            t.push(Pool { shape: s, range: 0..n - held });
            v.push(Pool { shape: s, range: n - held..n });
        }
        Ok((t, v))
    }

    /// Shapes and query indices of the batch for step `step`.
    fn batch<'a>(&self, pools: &'a [Pool<'a>], step: u64) -> Vec<(&'a Pool<'a>, Vec<usize>)> {
        let mut rng = stream_rng(self.cfg.seed ^ STEP_SALT, step);
        let k = self.cfg.batch_size.min(pools.len());
        let chosen = rand::seq::index::sample(&mut rng, pools.len(), k).into_vec();
        chosen
            .into_iter()
            .map(|i| {
                let p = &pools[i];
                let idx = (0..self.cfg.queries_per_batch)
                    .map(|_| rng.random_range(p.range.clone()))
                    .collect();
                (p, idx)
            })
            .collect()
    }

    fn gather<'a>(batch: &[(&'a Pool<'a>, Vec<usize>)]) -> (Vec<&'a EncoderInput<f32>>, Vec<Vec<Vec3>>, Vec<f64>) {
        let inputs = batch.iter().map(|(p, _)| &p.shape.input).collect();
        let queries = batch
            .iter()
            .map(|(p, idx)| idx.iter().map(|&i| p.shape.queries.points[i]).collect())
            .collect();
        let targets = batch
            .iter()
            .flat_map(|(p, idx)| idx.iter().map(|&i| p.shape.queries.targets[i]))
            .collect();
        (inputs, queries, targets)
    }

    fn dump_failed(&self, batch: &[(&Pool<'_>, Vec<usize>)], queries: &[Vec<Vec3>], targets: &[f64], preds: &[f32]) -> String {
        let Some(dir) = &self.dump_dir else {
            return "no dump directory configured".into();
        };
        let record = FailedBatch {
            step: self.step,
            shapes: batch.iter().map(|(p, _)| p.shape.id.as_str()).collect(),
            points: queries.iter().flatten().map(|p| [p.x, p.y, p.z]).collect(),
            targets: targets.to_vec(),
            predictions: preds.iter().map(|v| v.as_f64()).collect(),
        };
        let path = dir.join(format!("failed_batch_step{}.json", self.step));
        let written = serde_json::to_vec(&record)
            .map_err(|e| Error::Format(e.to_string()))
            .and_then(|bytes| write_atomic(&path, &bytes));
        match written {
            Ok(()) => format!("batch written to {}", path.display()),
            Err(e) => format!("could not write batch: {e}"),
        }
    }

    fn run_step(&mut self, pools: &[Pool<'_>]) -> Result<f64> {
        let batch = self.batch(pools, self.step);
        let (inputs, queries, targets) = Self::gather(&batch);
        let (preds, tape) = self.model.forward_train(&inputs, &queries)?;
        let (loss, grad) = clamped_loss_grad(&preds, &targets, self.cfg.delta)?;
        let ids: Vec<&str> = batch.iter().map(|(p, _)| p.shape.id.as_str()).collect();
        if !loss.is_finite() {
            let where_ = self.dump_failed(&batch, &queries, &targets, &preds);
            return Err(Error::Numerical(format!(
                "non-finite loss at step {} on shapes {ids:?}; {where_}",
                self.step
            )));
        }
        let grads = self.model.backward_train(&tape, &grad)?;
        if !grads.iter().all(|g| g.is_finite()) {
            let where_ = self.dump_failed(&batch, &queries, &targets, &preds);
            return Err(Error::Numerical(format!(
                "non-finite gradient at step {} on shapes {ids:?}; {where_}",
                self.step
            )));
        }
        self.adam.lr = self.cfg.learning_rate;
        self.adam.step(self.model.params_mut(), &grads)?;
        self.step += 1;
        Ok(loss / targets.len() as f64)
    }

    /// Mean clamped loss of the batch that step `step` would draw, without
    /// updating anything but a scratch copy of the batch-norm statistics.
    pub fn batch_loss(&self, train: &[TrainingShape], step: u64) -> Result<f64> {
        let (pools, _) = self.split_pools(train, &[])?;
        let batch = self.batch(&pools, step);
        let (inputs, queries, targets) = Self::gather(&batch);
        let mut scratch = self.model.clone();
        let (preds, _) = scratch.forward_train(&inputs, &queries)?;
        Ok(clamped_loss(&preds, &targets, self.cfg.delta)? / targets.len() as f64)
    }

    /// One optimizer step on `train` with the configured holdout.
    pub fn step_once(&mut self, train: &[TrainingShape]) -> Result<f64> {
        let (pools, _) = self.split_pools(train, &[])?;
        self.run_step(&pools)
    }

    fn validation_loss(&self, pools: &[Pool<'_>]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for p in pools {
            let end = p.range.start + self.cfg.val_queries.min(p.range.len());
            let q = &p.shape.queries;
            let latent = self.model.encode(&p.shape.input)?;
            let preds = self.model.decode(&latent, &q.points[p.range.start..end])?;
            total += clamped_loss(&preds, &q.targets[p.range.start..end], self.cfg.delta)?;
            count += end - p.range.start;
        }
        Ok(total / count as f64)
    }

    /// Trains until `max_steps`, a validation plateau or the time budget.
    /// With `out`, writes the loss CSV, `latest.ckpt` and `best.ckpt` there.
    pub fn fit(&mut self, train: &[TrainingShape], val: &[TrainingShape], out: Option<&Path>) -> Result<TrainSummary> {
        self.cfg.validate()?;
        let (train_pools, val_pools) = self.split_pools(train, val)?;
        if let Some(dir) = out {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            if self.dump_dir.is_none() {
                self.dump_dir = Some(dir.to_path_buf());
            }
        }
        let start = Instant::now();
        let mut stop = StopReason::MaxSteps;
        while self.step < self.cfg.max_steps {
            if let Some(budget) = self.cfg.max_seconds {
                if start.elapsed().as_secs_f64() >= budget {
                    stop = StopReason::TimeBudget;
                    break;
                }
            }
            let train_loss = self.run_step(&train_pools)?;
            let mut rec = LossRecord {
                step: self.step,
                train_loss,
                val_loss: None,
            };
            let mut plateau = false;
            if self.step % self.cfg.eval_every == 0 {
                let v = self.validation_loss(&val_pools)?;
                rec.val_loss = Some(v);
                log::info!("step {} train {train_loss:.6} val {v:.6}", self.step);
                if self.best_val.is_none_or(|b| v < b) {
                    self.best_val = Some(v);
                    self.since_best = 0;
                    if let Some(dir) = out {
                        self.to_checkpoint().save(&dir.join(BEST))?;
                    }
                } else {
                    self.since_best += 1;
                    plateau = self.since_best >= self.cfg.patience;
                }
            }
            self.history.push(rec);
            if let Some(dir) = out {
                if self.step % self.cfg.checkpoint_every == 0 {
                    self.save_outputs(dir)?;
                }
            }
            if plateau {
                stop = StopReason::Plateau;
                break;
            }
        }
        if let Some(dir) = out {
            self.save_outputs(dir)?;
        }
        Ok(TrainSummary {
            steps: self.step,
            stop,
            final_train_loss: self.history.last().map(|r| r.train_loss),
            best_val_loss: self.best_val,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    fn save_outputs(&self, dir: &Path) -> Result<()> {
        self.to_checkpoint().save(&dir.join(LATEST))?;
        write_atomic(&dir.join(LOSS_CSV), self.loss_csv().as_bytes())
    }

    /// Loss curve as CSV with header `step,train_loss,val_loss`.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,train_loss,val_loss\n");
        for r in &self.history {
            let v = r.val_loss.map(|v| format!("{v:e}")).unwrap_or_default();
            s.push_str(&format!("{},{:e},{v}\n", r.step, r.train_loss));
        }
        s
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        let obj = ck.manifest.as_object_mut().expect("model manifest is an object");
        obj.insert("format".into(), "pvudf-train".into());
        obj.insert("train".into(), serde_json::to_value(&self.cfg).expect("serializable config"));
        obj.insert("step".into(), self.step.into());
        obj.insert("adam_t".into(), self.adam.t.into());
        obj.insert("best_val".into(), serde_json::to_value(self.best_val).expect("finite or null"));
        obj.insert("since_best".into(), self.since_best.into());
        obj.insert("history".into(), serde_json::to_value(&self.history).expect("serializable history"));
        for (name, (m, v)) in self.model.param_names().iter().zip(self.adam.m.iter().zip(&self.adam.v)) {
            ck.push(&format!("adam.m.{name}"), m);
            ck.push(&format!("adam.v.{name}"), v);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let field = |k: &str| {
            ck.manifest
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("training checkpoint has no {k:?}")))
        };
        let bad = |e: serde_json::Error| Error::Format(format!("bad training checkpoint: {e}"));
        let cfg: TrainConfig = serde_json::from_value(field("train")?).map_err(bad)?;
        let model = UdfModel::<f32>::from_checkpoint(ck)?;
        let mut t = Trainer::with_model(model, cfg);
        t.step = serde_json::from_value(field("step")?).map_err(bad)?;
        t.adam.t = serde_json::from_value(field("adam_t")?).map_err(bad)?;
        t.best_val = serde_json::from_value(field("best_val")?).map_err(bad)?;
        t.since_best = serde_json::from_value(field("since_best")?).map_err(bad)?;
        t.history = serde_json::from_value(field("history")?).map_err(bad)?;
        let names = t.model.param_names();
        for (i, name) in names.iter().enumerate() {
            let m: Tensor<f32> = ck.tensor(&format!("adam.m.{name}"))?;
            let v: Tensor<f32> = ck.tensor(&format!("adam.v.{name}"))?;
            m.expect_shape(t.adam.m[i].shape(), name)?;
            v.expect_shape(t.adam.v[i].shape(), name)?;
            t.adam.m[i] = m;
            t.adam.v[i] = v;
        }
        Ok(t)
    }
}
