//! The training loop.
//!
//! Every epoch draws a fresh permutation of the training set, generates one
//! mask per image from `(seed, MASK, step, image)`, and takes
//! `steps_per_epoch` AdamW steps on the batch-mean objective. Per-image
//! forward/backward passes may run on several threads; results are collected
//! in batch order and summed in that order, so the outcome does not depend
//! on the thread count.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{TeacherSource, TrainConfig};
use super::data::{Dataset, LabeledImages};
use super::knn::{knn_eval, KnnResult};
use super::optim::{clip_grad_norm, lr_at, AdamW};
use crate::cluster::{
    attention_distance, combine_distance, em_cluster, hierarchical_cluster_with, position_bias_matrix,
    AttentionMap, ClusterAssignment,
};
use crate::error::{Error, Result};
use crate::masking::{
    alpha_schedule, block_mask, cluster_count, evolved_mask, grid_mask, random_mask, BinaryMask, MaskStrategy,
    PatchGrid,
};
use crate::model::{
    patchify, read_teacher_features, save_checkpoint, Checkpoint, Image, ModelConfig, ParamSet, Pooling, Student,
    TeacherOutputs, TeacherProvider,
};
use crate::objectives::LossBreakdown;
use crate::rng::{substream, tag};
use crate::tensor::{Tape, Tensor};

/// One line of `metrics.jsonl`, written at the end of every epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// 1-based epoch that just finished.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
    /// Epoch means of the batch-mean losses.
    pub rep: f64,
    pub disc: f64,
    pub pixel: f64,
    pub total: f64,
    pub knn_top1: Option<f64>,
    pub knn_top5: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
    pub config_hash: String,
    pub seed: u64,
}

/// One line of `steps.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    /// 1-based optimizer step.
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub rep: f64,
    pub disc: f64,
    pub pixel: f64,
    pub total: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub hash: String,
    pub metrics: Vec<MetricsRow>,
    pub steps: Vec<StepRow>,
    pub params: ParamSet<f64>,
    pub final_knn: KnnResult,
    /// Cluster assignment used for the final epoch's masks, if any.
    pub assignment: Option<ClusterAssignment>,
}

impl TrainReport {
    pub fn first_loss(&self) -> f64 {
        self.steps.first().map_or(f64::NAN, |s| s.total)
    }

    pub fn last_loss(&self) -> f64 {
        self.steps.last().map_or(f64::NAN, |s| s.total)
    }

    /// Best kNN top-1 with its top-5 and epoch; earlier epochs win ties.
    pub fn best_knn(&self) -> Option<(KnnResult, usize)> {
        let mut best: Option<(KnnResult, usize)> = None;
        for m in &self.metrics {
            if let (Some(top1), Some(top5)) = (m.knn_top1, m.knn_top5) {
                if best.is_none_or(|(b, _)| top1 > b.top1) {
                    best = Some((KnnResult { top1, top5 }, m.epoch));
                }
            }
        }
        best
    }
}

/// Output file names inside a run directory.
pub mod files {
    pub const CONFIG: &str = "config.json";
    pub const METRICS: &str = "metrics.jsonl";
    pub const STEPS: &str = "steps.jsonl";
    pub const CHECKPOINT: &str = "checkpoint.medc";
    pub const ASSIGNMENT: &str = "clusters.csv";
}

pub(crate) fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Teacher targets for a set of images, from the configured source.
pub fn teacher_targets(cfg: &TrainConfig, images: &[Image]) -> Result<Vec<TeacherOutputs>> {
    let provider = match &cfg.teacher {
        TeacherSource::Synthetic => TeacherProvider::synthetic(&cfg.model)?,
        TeacherSource::File { path } => {
            let feats = read_teacher_features(path)?;
            if feats.patches() != cfg.model.num_patches() || feats.dim() != cfg.model.teacher_dim {
                return Err(Error::Version(format!(
                    "teacher file {} has {} patches × {} dims, model expects {} × {}",
                    path.display(),
                    feats.patches(),
                    feats.dim(),
                    cfg.model.num_patches(),
                    cfg.model.teacher_dim
                )));
            }
            TeacherProvider::File(feats)
        }
    };
    images.par_iter().map(|img| provider.forward(img)).collect()
}

fn patchify_all(images: &[Image], patch: usize) -> Result<Vec<Tensor>> {
    images.par_iter().map(|img| patchify(img, patch)).collect()
}

/// Frozen embeddings for `images`, one row per image in input order.
pub fn embed_images(
    student: &Student,
    params: &ParamSet<f64>,
    images: &[Image],
    pooling: Pooling,
) -> Result<Vec<Vec<f64>>> {
    let p = student.config().patch_size;
    images
        .par_iter()
        .map(|img| student.embed(params, &patchify(img, p)?, pooling))
        .collect()
}

/// Embeddings from a saved checkpoint. The checkpoint must have been
/// written for `model`.
pub fn extract_embeddings(
    model: &ModelConfig,
    checkpoint: &Checkpoint,
    images: &[Image],
    pooling: Pooling,
) -> Result<Vec<Vec<f64>>> {
    let expected = serde_json::to_value(model)?;
    match checkpoint.config.get("model") {
        Some(m) if *m == expected => {}
        _ => return Err(Error::Version("checkpoint was written for a different model config".into())),
    }
    let student = Student::new(model)?;
    student
        .layout()
        .check(&checkpoint.params)
        .map_err(|e| Error::Version(e.to_string()))?;
    embed_images(&student, &checkpoint.params, images, pooling)
}

pub fn evaluate_knn(
    student: &Student,
    params: &ParamSet<f64>,
    data: &Dataset,
    k: usize,
    pooling: Pooling,
) -> Result<KnnResult> {
    let train = embed_images(student, params, &data.train.images, pooling)?;
    let test = embed_images(student, params, &data.test.images, pooling)?;
    knn_eval(&train, &data.train.labels, &test, &data.test.labels, k)
}

/// Head-averaged last-block attention, averaged again over the probe images.
pub fn probe_attention(
    student: &Student,
    params: &ParamSet<f64>,
    probe: &LabeledImages,
    renormalize: bool,
) -> Result<AttentionMap> {
    let p = student.config().patch_size;
    let maps = probe
        .images
        .par_iter()
        .map(|img| student.probe_attention(params, &patchify(img, p)?, renormalize))
        .collect::<Result<Vec<_>>>()?;
    AttentionMap::average(&maps)
}

/// Cluster assignment that drives the masks of `epoch` (0-based), computed
/// from `attention` with `C = cluster_count(α(epoch))` clusters.
pub fn cluster_for_epoch(
    cfg: &TrainConfig,
    grid: &PatchGrid,
    attention: &AttentionMap,
    epoch: usize,
) -> Result<ClusterAssignment> {
    let alpha = alpha_schedule(epoch, &cfg.mask)?;
    let c = cluster_count(alpha, &cfg.mask).min(grid.len());
    match cfg.mask.strategy {
        MaskStrategy::EvolvedEm => {
            let mut rng = substream(cfg.seed, &[tag::CLUSTER, epoch as u64]);
            em_cluster(attention, c, cfg.clustering.em_iters, &mut rng)
        }
        _ => {
            let d = combine_distance(&attention_distance(attention), &position_bias_matrix(grid), cfg.mask.zeta)?;
            hierarchical_cluster_with(&d, c, cfg.clustering.linkage)
        }
    }
}

/// Mask for one training image. `step` is the 0-based global step.
pub fn training_mask(
    cfg: &TrainConfig,
    grid: &PatchGrid,
    epoch: usize,
    step: usize,
    image: usize,
    assignment: Option<&ClusterAssignment>,
) -> Result<BinaryMask> {
    let mut rng = substream(cfg.seed, &[tag::MASK, step as u64, image as u64]);
    let ratio = cfg.mask.ratio;
    match cfg.mask.strategy {
        MaskStrategy::Grid => grid_mask(grid, ratio),
        MaskStrategy::Random => random_mask(grid, ratio, &mut rng),
        MaskStrategy::Block => block_mask(grid, ratio, &mut rng),
        MaskStrategy::EvolvedHc | MaskStrategy::EvolvedEm => evolved_mask(grid, &cfg.mask, epoch, assignment, &mut rng),
    }
}

struct Sample {
    breakdown: LossBreakdown,
    grads: Vec<Tensor>,
}

fn sample_grad(
    student: &Student,
    params: &ParamSet<f64>,
    patches: &Tensor,
    teacher: &TeacherOutputs,
    mask: &BinaryMask,
    cfg: &TrainConfig,
) -> Result<Sample> {
    let mut tape = Tape::new();
    let vars = student.register(&mut tape, params, true)?;
    let out = student.losses(&mut tape, &vars, patches, teacher, mask, &cfg.loss)?;
    if !out.breakdown.is_finite() {
        return Ok(Sample {
            breakdown: out.breakdown,
            grads: Vec::new(),
        });
    }
    let mut g = tape.backward(out.loss)?;
    Ok(Sample {
        breakdown: out.breakdown,
        grads: vars.iter().map(|&v| g.take(v)).collect(),
    })
}

struct Sinks {
    dir: PathBuf,
    metrics: std::fs::File,
    steps: std::fs::File,
}

impl Sinks {
    fn open(dir: &Path, cfg: &TrainConfig) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let config_path = dir.join(files::CONFIG);
        let text = serde_json::to_string_pretty(&cfg.to_value())?;
        std::fs::write(&config_path, text + "\n").map_err(|e| Error::io(&config_path, e))?;
        let create = |name: &str| {
            let p = dir.join(name);
            std::fs::File::create(&p).map_err(|e| Error::io(p, e))
        };
        Ok(Sinks {
            dir: dir.to_path_buf(),
            metrics: create(files::METRICS)?,
            steps: create(files::STEPS)?,
        })
    }

    fn line(file: &mut std::fs::File, dir: &Path, name: &str, row: &impl Serialize) -> Result<()> {
        let mut s = serde_json::to_string(row)?;
        s.push('\n');
        file.write_all(s.as_bytes())
            .map_err(|e| Error::io(dir.join(name), e))
    }
}

/// Runs training. With `out`, writes config, metrics, per-step losses and
/// checkpoints there as it goes.
pub fn train(cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainReport> {
    let mut cfg = cfg.clone();
    cfg.normalize();
    cfg.validate()?;
    let pool = thread_pool(cfg.threads)?;
    pool.install(|| run(&cfg, out))
}

fn run(cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainReport> {
    let started = Instant::now();
    let hash = cfg.hash();
    let model = &cfg.model;
    let grid = model.grid()?;
    let student = Student::new(model)?;
    let mut params = student.init(&mut substream(cfg.seed, &[tag::INIT]));
    let mut opt = AdamW::new(&cfg.optimizer, student.layout());

    let data = Dataset::generate(&cfg.data, model.image_size, cfg.seed)?;
    let patches = patchify_all(&data.train.images, model.patch_size)?;
    let targets = teacher_targets(cfg, &data.train.images)?;

    let mut sinks = out.map(|d| Sinks::open(d, cfg)).transpose()?;

    let steps_per_epoch = cfg.steps_per_epoch();
    let total_steps = cfg.total_steps();
    let warmup = cfg.lr.warmup_epochs * steps_per_epoch;
    let n = data.train.len();
    let b = cfg.batch_size;
    let knn_every = cfg.knn_every();

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::with_capacity(total_steps);
    let mut assignment: Option<ClusterAssignment> = None;
    let mut final_knn = None;
    let mut global = 0usize;

    for epoch in 0..cfg.epochs {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut substream(cfg.seed, &[tag::SHUFFLE, epoch as u64]));
        let mut epoch_losses = Vec::with_capacity(steps_per_epoch);
        let mut lr = 0.0;

        for j in 0..steps_per_epoch {
            lr = lr_at(&cfg.lr, global, warmup, total_steps);
            let batch: Vec<usize> = (0..b).map(|i| perm[(j * b + i) % n]).collect();
            let samples = batch
                .par_iter()
                .map(|&img| {
                    let mask = training_mask(cfg, &grid, epoch, global, img, assignment.as_ref())?;
                    sample_grad(&student, &params, &patches[img], &targets[img], &mask, cfg)
                })
                .collect::<Result<Vec<_>>>()?;

            if let Some(bad) = samples.iter().position(|s| !s.breakdown.is_finite()) {
                return Err(Error::NumericAbort {
                    step: global + 1,
                    batch_index: bad,
                    breakdown: samples[bad].breakdown,
                });
            }

            let inv = 1.0 / b as f64;
            let mut grads = samples[0].grads.clone();
            for s in &samples[1..] {
                for (acc, g) in grads.iter_mut().zip(&s.grads) {
                    acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, v)| *a += v);
                }
            }
            grads
                .iter_mut()
                .for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= inv));
            let grad_norm = match cfg.optimizer.grad_clip {
                Some(c) => clip_grad_norm(&mut grads, c),
                None => super::optim::global_norm(&grads),
            };
            if !grad_norm.is_finite() {
                return Err(Error::NumericAbort {
                    step: global + 1,
                    batch_index: 0,
                    breakdown: LossBreakdown::mean(&samples.iter().map(|s| s.breakdown).collect::<Vec<_>>()),
                });
            }
            opt.step(&mut params, &grads, lr);

            let mean = LossBreakdown::mean(&samples.iter().map(|s| s.breakdown).collect::<Vec<_>>());
            global += 1;
            let row = StepRow {
                step: global,
                epoch: epoch + 1,
                lr,
                rep: mean.rep,
                disc: mean.disc,
                pixel: mean.pixel,
                total: mean.total,
                grad_norm,
            };
            if let Some(s) = sinks.as_mut() {
                Sinks::line(&mut s.steps, &s.dir, files::STEPS, &row)?;
            }
            steps.push(row);
            epoch_losses.push(mean);
        }

        let last = epoch + 1 == cfg.epochs;
        let knn = if last || (epoch + 1) % knn_every == 0 {
            let r = evaluate_knn(&student, &params, &data, cfg.eval.knn_k, cfg.eval.pooling)?;
            if last {
                final_knn = Some(r);
            }
            Some(r)
        } else {
            None
        };

        if cfg.mask.strategy.is_evolved() && !last {
            let attn = probe_attention(&student, &params, &data.probe, cfg.clustering.renormalize_attention)?;
            assignment = Some(cluster_for_epoch(cfg, &grid, &attn, epoch + 1)?);
        }

        let mean = LossBreakdown::mean(&epoch_losses);
        let row = MetricsRow {
            epoch: epoch + 1,
            step: global,
            lr,
            rep: mean.rep,
            disc: mean.disc,
            pixel: mean.pixel,
            total: mean.total,
            knn_top1: knn.map(|r| r.top1),
            knn_top5: knn.map(|r| r.top5),
            wall_time: cfg.record_wall_time.then(|| started.elapsed().as_secs_f64()),
            config_hash: hash.clone(),
            seed: cfg.seed,
        };
        if let Some(s) = sinks.as_mut() {
            Sinks::line(&mut s.metrics, &s.dir, files::METRICS, &row)?;
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 && !last {
                let p = s.dir.join(format!("checkpoint_e{:03}.medc", epoch + 1));
                save_checkpoint(&p, &Checkpoint { params: params.clone(), config: cfg.to_value() })?;
            }
        }
        metrics.push(row);
    }

    if let Some(s) = &sinks {
        save_checkpoint(
            &s.dir.join(files::CHECKPOINT),
            &Checkpoint {
                params: params.clone(),
                config: cfg.to_value(),
            },
        )?;
        if let Some(a) = &assignment {
            let p = s.dir.join(files::ASSIGNMENT);
            std::fs::write(&p, a.to_csv()).map_err(|e| Error::io(p, e))?;
        }
    }

    Ok(TrainReport {
        config: cfg.clone(),
        hash,
        metrics,
        steps,
        params,
        final_knn: final_knn.expect("the last epoch always evaluates"),
        assignment,
    })
}
