//! The training loop, per-task baselines, and fine-tuning.
//!
//! Each iteration samples one task, draws a batch from that task's training
//! split uniformly with replacement, and takes one AdamW step through the
//! backbone and that task's head. An epoch is `ceil(total train / batch)`
//! iterations regardless of which tasks are drawn.

pub mod checkpoint;
mod lr;
mod model;

pub use lr::{LrKind, LrPolicy};
pub use model::{HeadSpec, ModelConfig, MtlModel, HEAD_PREFIX};

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::InputSequence;
use crate::datagen::{select_tasks, MultiTaskDataset};
use crate::error::{Error, Result};
use crate::evalsuite::{evaluate, CohortBasis, MetricReport};
use crate::heads::HeadAllocation;
use crate::ndcore::{AdamW, AdamWConfig, Tape};
use crate::sampler::{AlphaSchedule, SamplingPolicy};
use crate::{derive_seed, name_stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluations spread evenly over the run; the last is at the end.
    pub eval_points: usize,
    pub sampling: AlphaSchedule,
    /// Consecutive iterations that reuse one sampled task.
    pub repetition: usize,
    pub lr: LrPolicy,
    pub optimizer: AdamWConfig,
    pub cohort: CohortBasis,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 8,
            seed: 0,
            eval_points: 10,
            sampling: AlphaSchedule::default(),
            repetition: 1,
            lr: LrPolicy::default(),
            optimizer: AdamWConfig::default(),
            cohort: CohortBasis::Train,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_points == 0 {
            return Err(Error::Config("epochs, batch_size and eval_points must be positive".into()));
        }
        if self.repetition == 0 {
            return Err(Error::Config("repetition must be at least 1".into()));
        }
        self.sampling.validate()?;
        self.lr.validate()?;
        self.model.backbone.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Converged,
    Diverged,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub epoch_fraction: f64,
    pub alpha: f64,
    pub lr: f64,
    /// Mean training loss since the previous record; absent when no step
    /// since then produced a finite loss.
    pub loss: Option<f64>,
    pub mean_acc: f64,
    pub t10_acc: f64,
    pub b10_acc: f64,
}

pub struct TrainOutcome {
    pub status: RunStatus,
    pub iterations_run: usize,
    pub total_iterations: usize,
    pub log: Vec<MetricsRecord>,
    pub report: MetricReport,
    pub model: MtlModel,
    /// What went non-finite, for diverged runs.
    pub divergence: Option<String>,
}

pub fn iterations_per_epoch(ds: &MultiTaskDataset, batch_size: usize) -> usize {
    ds.total_train().div_ceil(batch_size)
}

pub fn total_iterations(ds: &MultiTaskDataset, cfg: &TrainConfig) -> usize {
    cfg.epochs * iterations_per_epoch(ds, cfg.batch_size)
}

/// Whether an evaluation falls after iteration `it` (0-based).
fn eval_due(it: usize, total: usize, points: usize) -> bool {
    (it + 1) * points / total > it * points / total || it + 1 == total
}

/// Build a model for `ds` and train it.
pub fn train(ds: &MultiTaskDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = MtlModel::for_dataset(&cfg.model, ds, derive_seed(cfg.seed, name_stream("init")))?;
    train_model(model, ds, cfg)
}

/// Train an existing model (one head per task of `ds`).
pub fn train_model(mut model: MtlModel, ds: &MultiTaskDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    ds.validate()?;
    cfg.model.check_dataset(ds)?;
    if model.heads.len() != ds.num_tasks() {
        return Err(Error::Config(format!(
            "model has {} heads for {} tasks",
            model.heads.len(),
            ds.num_tasks()
        )));
    }
    let sizes = ds.train_sizes();
    if let Some(t) = sizes.iter().position(|&n| n == 0) {
        return Err(Error::Dataset(format!("task {t} has no training examples")));
    }
    let per_epoch = iterations_per_epoch(ds, cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let train_seqs: Vec<Vec<InputSequence>> = ds
        .train
        .iter()
        .map(|exs| model.assemble(exs))
        .collect::<Result<_>>()?;

    let mut sampler = SamplingPolicy::new(
        cfg.sampling,
        cfg.repetition,
        derive_seed(cfg.seed, name_stream("sampler")),
    )?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, name_stream("batches")));
    let mut opt = AdamW::new(cfg.optimizer);
    let mut frozen: Option<bool> = None;
    let mut log = Vec::new();
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    let mut status = RunStatus::Running;
    let mut divergence = None;
    let mut iterations_run = 0;
    let mut last_report = None;

    for it in 0..total {
        let p = SamplingPolicy::progress(it, total)?;
        let (lr, freeze) = cfg.lr.lr_at(p)?;
        if frozen != Some(freeze) {
            model.set_frozen(freeze);
            frozen = Some(freeze);
        }
        let task = sampler.next_task(&sizes, it, total)?;
        let pool = &train_seqs[task];
        let idx: Vec<usize> = (0..cfg.batch_size.min(pool.len()))
            .map(|_| batch_rng.random_range(0..pool.len()))
            .collect();
        let batch: Vec<InputSequence> = idx.iter().map(|&i| pool[i].clone()).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| ds.train[task][i].label).collect();
        let step = train_step(&mut model, &mut opt, task, &batch, &labels, lr);
        iterations_run = it + 1;
        match step {
            Ok(loss) => {
                loss_sum += loss;
                loss_n += 1;
            }
            Err(Error::Divergence { param, step }) => {
                status = RunStatus::Diverged;
                divergence = Some(format!("{param} at step {step}"));
            }
            Err(e) => return Err(e),
        }
        if status == RunStatus::Diverged || eval_due(it, total, cfg.eval_points) {
            let report = evaluate(&model, ds, cfg.cohort)?;
            log.push(MetricsRecord {
                iteration: it + 1,
                epoch_fraction: (it + 1) as f64 / per_epoch as f64,
                alpha: cfg.sampling.alpha_at(p)?,
                lr,
                loss: (loss_n > 0).then(|| loss_sum / loss_n as f64),
                mean_acc: report.mean_acc,
                t10_acc: report.t10_acc,
                b10_acc: report.b10_acc,
            });
            loss_sum = 0.0;
            loss_n = 0;
            last_report = Some(report);
        }
        if status == RunStatus::Diverged {
            break;
        }
    }
    if status == RunStatus::Running {
        status = RunStatus::Converged;
    }
    model.set_frozen(false);
    let report = match last_report {
        Some(r) => r,
        None => evaluate(&model, ds, cfg.cohort)?,
    };
    Ok(TrainOutcome {
        status,
        iterations_run,
        total_iterations: total,
        log,
        report,
        model,
        divergence,
    })
}

/// One forward/backward/update on a single-task batch; returns the loss.
fn train_step(
    model: &mut MtlModel,
    opt: &mut AdamW,
    task: usize,
    batch: &[InputSequence],
    labels: &[usize],
    lr: f64,
) -> Result<f64> {
    let (loss, grads) = {
        let mut tape = Tape::new(&model.store);
        let logits = model.logits(&mut tape, task, batch)?;
        let loss = tape.softmax_xent(logits, labels)?;
        let value = tape.value(loss).data()[0];
        (value, tape.backward(loss)?)
    };
    let step = opt.steps() + 1;
    if !loss.is_finite() {
        return Err(Error::Divergence { param: "loss".into(), step });
    }
    if let Some((id, _)) = grads.iter().find(|(_, g)| g.iter().any(|x| !x.is_finite())) {
        return Err(Error::Divergence {
            param: format!("grad of {}", model.store.get(id).name),
            step,
        });
    }
    opt.step(&mut model.store, &grads, lr)?;
    Ok(loss)
}

/// Result of training one task alone.
pub struct BaselineOutcome {
    pub task_id: usize,
    pub accuracy: f64,
    pub outcome: TrainOutcome,
}

/// Train a single-task model on `task_id` with the architecture the task
/// would get in the multi-task model (same backbone, same head), for the
/// same number of epochs over its own data.
pub fn train_baseline(ds: &MultiTaskDataset, task_id: usize, cfg: &TrainConfig) -> Result<BaselineOutcome> {
    cfg.validate()?;
    if task_id >= ds.num_tasks() {
        return Err(Error::Dataset(format!("no task {task_id}")));
    }
    cfg.model.check_dataset(ds)?;
    let (alloc, _) = cfg.model.allocate(ds)?;
    let single = select_tasks(ds, &[task_id])?;
    let model = MtlModel::new(
        cfg.model.clone(),
        HeadAllocation {
            heads: vec![alloc.heads[task_id]],
        },
        derive_seed(cfg.seed, name_stream("init")),
    )?;
    let outcome = train_model(model, &single, cfg)?;
    Ok(BaselineOutcome {
        task_id,
        accuracy: outcome.report.tasks[0].accuracy,
        outcome,
    })
}

/// Fine-tune on `ds` starting from `source`'s shared parameters (or from
/// scratch when `None`), with fresh heads for every task of `ds`.
pub fn finetune(source: Option<&MtlModel>, ds: &MultiTaskDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = MtlModel::for_dataset(&cfg.model, ds, derive_seed(cfg.seed, name_stream("init")))?;
    if let Some(src) = source {
        if src.config.backbone != cfg.model.backbone {
            return Err(Error::Checkpoint(format!(
                "checkpoint backbone {:?} differs from requested {:?}",
                src.config.backbone, cfg.model.backbone
            )));
        }
        for id in model.backbone.all_ids() {
            let name = model.store.get(id).name.clone();
            let src_id = src
                .store
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks `{name}`")))?;
            model.store.get_mut(id).value = src.store.value(src_id).clone();
        }
    }
    train_model(model, ds, cfg)
}

struct HashWriter<'a>(&'a mut Sha256);

impl Write for HashWriter<'_> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

/// SHA-256 over a value's JSON encoding.
pub fn digest_json<T: Serialize>(value: &T) -> Result<String> {
    let mut h = Sha256::new();
    serde_json::to_writer(HashWriter(&mut h), value)
        .map_err(|e| Error::Config(format!("cannot hash value: {e}")))?;
    Ok(hex::encode(h.finalize()))
}

/// Fingerprint of a run: its resolved config plus the dataset contents.
pub fn fingerprint<C: Serialize>(config: &C, ds: &MultiTaskDataset) -> Result<String> {
    digest_json(&(digest_json(config)?, digest_json(ds)?))
}

/// Write the metrics log as one JSON record per line.
pub fn write_metrics_log(path: &Path, log: &[MetricsRecord]) -> Result<()> {
    let mut out = Vec::new();
    for rec in log {
        serde_json::to_writer(&mut out, rec).map_err(|e| Error::io(path, e.into()))?;
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_metrics_log(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Ingest {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}
