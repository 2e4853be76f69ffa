//! Synthetic correlated task collections and their train/test splits.
//!
//! Each task owns `C_t` class prototypes on the unit sphere of a latent
//! space. With probability `rho` a prototype is a noisy copy of an entry in a
//! global pool shared by all tasks, which is what makes tasks correlated.
//! An example is a jittered prototype rendered two ways: text tokens that
//! quantize the latent coordinates, and image vectors from a fixed affine map.

mod io;

pub use io::{export, ingest, EXAMPLES_FILE, FORMAT_VERSION, MANIFEST_FILE};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dypa::TaskStats;
use crate::error::{Error, Result};
use crate::{derive_seed, name_stream};

pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub name: String,
    pub num_classes: usize,
    /// Train plus test.
    pub num_examples: usize,
    pub group_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub task_id: usize,
    pub label: usize,
    pub text_tokens: Vec<usize>,
    pub image_embeddings: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub num_tasks: usize,
    pub latent_dim: usize,
    pub vocab_size: usize,
    pub image_dim: usize,
    /// Probability that a class prototype comes from the shared pool.
    pub rho: f64,
    /// Median of the log-normal task size distribution.
    pub size_median: f64,
    pub size_sigma: f64,
    pub classes_min: usize,
    pub classes_max: usize,
    pub label_noise: f64,
    /// Per-coordinate std of example jitter around the prototype; also the
    /// std of additive image noise.
    pub noise: f64,
    /// Per-coordinate std of the per-task perturbation of shared prototypes.
    pub proto_noise: f64,
    pub tokens_per_example: usize,
    pub images_min: usize,
    pub images_max: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_tasks: 100,
            latent_dim: 16,
            vocab_size: 512,
            image_dim: 32,
            rho: 0.7,
            size_median: 1000.0,
            size_sigma: 1.0,
            classes_min: 4,
            classes_max: 128,
            label_noise: 0.05,
            noise: 0.15,
            proto_noise: 0.1,
            tokens_per_example: 16,
            images_min: 0,
            images_max: 2,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_tasks == 0 {
            return fail("num_tasks must be positive".into());
        }
        if self.latent_dim == 0 || self.image_dim == 0 {
            return fail("latent and image dimensions must be positive".into());
        }
        if self.vocab_size < 2 * self.latent_dim {
            return fail(format!(
                "vocab_size {} leaves fewer than 2 bins per latent coordinate ({})",
                self.vocab_size, self.latent_dim
            ));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return fail(format!("rho {} outside [0, 1]", self.rho));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return fail(format!("label_noise {} outside [0, 0.5)", self.label_noise));
        }
        if !(self.size_median >= 2.0 && self.size_median.is_finite()) {
            return fail(format!("size_median {} below 2", self.size_median));
        }
        if !(self.size_sigma > 0.0 && self.size_sigma.is_finite()) {
            return fail(format!("size_sigma {} must be positive", self.size_sigma));
        }
        if self.classes_min < 2 || self.classes_min > self.classes_max {
            return fail(format!(
                "class range [{}, {}] invalid",
                self.classes_min, self.classes_max
            ));
        }
        if self.classes_max > self.vocab_size {
            return fail(format!(
                "classes_max {} exceeds vocab_size {}",
                self.classes_max, self.vocab_size
            ));
        }
        if !(self.noise >= 0.0 && self.proto_noise >= 0.0) {
            return fail("noise scales must be non-negative".into());
        }
        if self.tokens_per_example == 0 {
            return fail("tokens_per_example must be positive".into());
        }
        if self.images_min > self.images_max {
            return fail(format!(
                "image range [{}, {}] invalid",
                self.images_min, self.images_max
            ));
        }
        Ok(())
    }

    fn bins(&self) -> usize {
        self.vocab_size / self.latent_dim
    }

    /// Half-width of the quantized latent range.
    fn token_range(&self) -> f64 {
        3.0 * (1.0 / self.latent_dim as f64 + self.noise * self.noise).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskDataset {
    pub tasks: Vec<TaskSpec>,
    pub train: Vec<Vec<Example>>,
    pub test: Vec<Vec<Example>>,
    pub vocab_size: usize,
    pub image_dim: usize,
    pub max_text_len: usize,
    pub test_fraction: f64,
    pub split_seed: u64,
    /// Present when the dataset was generated here.
    pub generation: Option<GenConfig>,
}

impl MultiTaskDataset {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn train_sizes(&self) -> Vec<usize> {
        self.train.iter().map(Vec::len).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.num_classes).collect()
    }

    pub fn task_stats(&self) -> Vec<TaskStats> {
        self.tasks
            .iter()
            .map(|t| TaskStats {
                task_id: t.task_id,
                train_examples: self.train[t.task_id].len(),
                num_classes: t.num_classes,
            })
            .collect()
    }

    pub fn total_train(&self) -> usize {
        self.train.iter().map(Vec::len).sum()
    }

    /// Check every dataset invariant.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Dataset(m));
        if self.tasks.is_empty() {
            return fail("dataset has no tasks".into());
        }
        if self.train.len() != self.tasks.len() || self.test.len() != self.tasks.len() {
            return fail("split stores do not match task list".into());
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if t.task_id != i {
                return fail(format!("task ids not dense: position {i} has id {}", t.task_id));
            }
            if t.num_classes < 2 || t.num_examples < t.num_classes {
                return fail(format!(
                    "task {i}: {} examples for {} classes",
                    t.num_examples, t.num_classes
                ));
            }
            let want_test = test_size(t.num_examples, self.test_fraction);
            if self.test[i].len() != want_test
                || self.train[i].len() + self.test[i].len() != t.num_examples
            {
                return fail(format!(
                    "task {i}: split {}/{} does not match {} examples at test fraction {}",
                    self.train[i].len(),
                    self.test[i].len(),
                    t.num_examples,
                    self.test_fraction
                ));
            }
            for ex in self.train[i].iter().chain(&self.test[i]) {
                self.check_example(ex, t)?;
            }
        }
        Ok(())
    }

    pub(crate) fn check_example(&self, ex: &Example, t: &TaskSpec) -> Result<()> {
        let fail = |m: String| Err(Error::Dataset(m));
        if ex.task_id != t.task_id {
            return fail(format!("example filed under task {} has task_id {}", t.task_id, ex.task_id));
        }
        if ex.label >= t.num_classes {
            return fail(format!(
                "label {} out of range for task {} with {} classes",
                ex.label, t.task_id, t.num_classes
            ));
        }
        if ex.text_tokens.len() > self.max_text_len {
            return fail(format!(
                "{} text tokens exceed max_text_len {}",
                ex.text_tokens.len(),
                self.max_text_len
            ));
        }
        if let Some(&tok) = ex.text_tokens.iter().find(|&&tok| tok >= self.vocab_size) {
            return fail(format!("token {tok} outside vocabulary of {}", self.vocab_size));
        }
        if let Some(v) = ex.image_embeddings.iter().find(|v| v.len() != self.image_dim) {
            return fail(format!(
                "image embedding width {} differs from {}",
                v.len(),
                self.image_dim
            ));
        }
        if ex.image_embeddings.iter().flatten().any(|x| !x.is_finite()) {
            return fail("non-finite image embedding".into());
        }
        Ok(())
    }
}

pub fn test_size(num_examples: usize, fraction: f64) -> usize {
    (fraction * num_examples as f64).round() as usize
}

/// Shared state drawn once per seed: the prototype pool and the image map.
#[derive(Clone, Debug)]
pub struct Globals {
    pub pool: Vec<Vec<f64>>,
    /// `image_dim x latent_dim`, row-major.
    pub image_map: Vec<f64>,
    pub image_bias: Vec<f64>,
}

impl Globals {
    pub fn new(cfg: &GenConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, name_stream("globals")));
        let pool = (0..cfg.classes_max)
            .map(|_| unit(gaussian(&mut rng, cfg.latent_dim)))
            .collect();
        let image_map = gaussian(&mut rng, cfg.image_dim * cfg.latent_dim);
        let image_bias = gaussian(&mut rng, cfg.image_dim)
            .into_iter()
            .map(|x| 0.1 * x)
            .collect();
        Self {
            pool,
            image_map,
            image_bias,
        }
    }
}

/// How one task's prototypes were built.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeRecord {
    /// Pool index for shared classes, `None` for private ones.
    pub pool_index: Option<usize>,
    /// Shared pool entry or a fresh direction.
    pub base: Vec<f64>,
    /// Per-task perturbation added to `base` (zero for private classes).
    pub noise: Vec<f64>,
    /// `normalize(base + noise)`.
    pub prototype: Vec<f64>,
}

fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

fn task_rng(cfg: &GenConfig, task_id: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, task_id as u64 + 1))
}

fn draw_classes(cfg: &GenConfig, rng: &mut impl Rng) -> usize {
    let (lo, hi) = ((cfg.classes_min as f64).ln(), (cfg.classes_max as f64 + 1.0).ln());
    let c = rng.random_range(lo..hi).exp().floor() as usize;
    c.clamp(cfg.classes_min, cfg.classes_max)
}

fn draw_size(cfg: &GenConfig, rng: &mut impl Rng, classes: usize) -> usize {
    let dist = LogNormal::new(cfg.size_median.ln(), cfg.size_sigma).expect("validated sigma");
    let n = dist.sample(rng).round() as usize;
    n.max(classes).max(2)
}

/// Class prototypes for one task, with construction bookkeeping.
fn prototypes(cfg: &GenConfig, g: &Globals, rng: &mut impl Rng, classes: usize) -> Vec<PrototypeRecord> {
    (0..classes)
        .map(|c| {
            let shared = rng.random::<f64>() < cfg.rho;
            let (pool_index, base, noise) = if shared {
                let noise = gaussian(rng, cfg.latent_dim)
                    .into_iter()
                    .map(|x| x * cfg.proto_noise)
                    .collect();
                (Some(c), g.pool[c].clone(), noise)
            } else {
                (None, unit(gaussian(rng, cfg.latent_dim)), vec![0.0; cfg.latent_dim])
            };
            let prototype = unit(base.iter().zip(&noise).map(|(b, n)| b + n).collect());
            PrototypeRecord {
                pool_index,
                base,
                noise,
                prototype,
            }
        })
        .collect()
}

/// Per-task draws in a fixed order so any task can be regenerated alone.
struct TaskDraw {
    classes: usize,
    size: usize,
    protos: Vec<PrototypeRecord>,
    rng: ChaCha8Rng,
}

fn draw_task(cfg: &GenConfig, g: &Globals, task_id: usize, size: Option<usize>) -> TaskDraw {
    let mut rng = task_rng(cfg, task_id);
    let classes = draw_classes(cfg, &mut rng);
    let drawn = draw_size(cfg, &mut rng, classes);
    let size = size.unwrap_or(drawn).max(classes).max(2);
    let protos = prototypes(cfg, g, &mut rng, classes);
    TaskDraw {
        classes,
        size,
        protos,
        rng,
    }
}

/// Prototype bookkeeping for `task_id`, as `generate` builds it.
pub fn task_prototypes(cfg: &GenConfig, task_id: usize) -> Vec<PrototypeRecord> {
    draw_task(cfg, &Globals::new(cfg), task_id, None).protos
}

fn render(cfg: &GenConfig, g: &Globals, rng: &mut impl Rng, z: &[f64]) -> (Vec<usize>, Vec<Vec<f64>>) {
    let bins = cfg.bins();
    let r = cfg.token_range();
    let tokens = (0..cfg.tokens_per_example)
        .map(|j| {
            let coord = j % cfg.latent_dim;
            let t = (z[coord] + r) / (2.0 * r);
            let bin = ((t * bins as f64).floor().max(0.0) as usize).min(bins - 1);
            coord * bins + bin
        })
        .collect();
    let images = rng.random_range(cfg.images_min..=cfg.images_max);
    let embeddings = (0..images)
        .map(|_| {
            (0..cfg.image_dim)
                .map(|i| {
                    let row = &g.image_map[i * cfg.latent_dim..(i + 1) * cfg.latent_dim];
                    let dot: f64 = row.iter().zip(z).map(|(a, b)| a * b).sum();
                    let n: f64 = StandardNormal.sample(rng);
                    dot + g.image_bias[i] + cfg.noise * n
                })
                .collect()
        })
        .collect();
    (tokens, embeddings)
}

fn generate_task(cfg: &GenConfig, g: &Globals, task_id: usize, size: Option<usize>) -> (TaskSpec, Vec<Example>) {
    let TaskDraw {
        classes,
        size,
        protos,
        mut rng,
    } = draw_task(cfg, g, task_id, size);
    let examples = (0..size)
        .map(|i| {
            let class = i % classes;
            let z: Vec<f64> = protos[class]
                .prototype
                .iter()
                .map(|p| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    p + cfg.noise * n
                })
                .collect();
            let (text_tokens, image_embeddings) = render(cfg, g, &mut rng, &z);
            let mut label = class;
            if rng.random::<f64>() < cfg.label_noise {
                label = (class + rng.random_range(1..classes)) % classes;
            }
            Example {
                task_id,
                label,
                text_tokens,
                image_embeddings,
            }
        })
        .collect();
    let spec = TaskSpec {
        task_id,
        name: format!("task_{task_id:03}"),
        num_classes: classes,
        num_examples: size,
        group_id: task_id / 2,
    };
    (spec, examples)
}

/// Split one task's examples (in generation order) into train and test.
fn split_task(
    examples: Vec<Example>,
    task_id: usize,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<Example>, Vec<Example>)> {
    let n = examples.len();
    if n < 2 {
        return Err(Error::Dataset(format!("task {task_id} has {n} examples; need 2")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ name_stream("split"), task_id as u64));
    order.shuffle(&mut rng);
    let mut is_test = vec![false; n];
    for &i in &order[..test_size(n, fraction)] {
        is_test[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (ex, t) in examples.into_iter().zip(is_test) {
        if t {
            test.push(ex);
        } else {
            train.push(ex);
        }
    }
    Ok((train, test))
}

pub fn generate(cfg: &GenConfig) -> Result<MultiTaskDataset> {
    cfg.validate()?;
    let g = Globals::new(cfg);
    let tasks: Vec<(TaskSpec, Vec<Example>)> = (0..cfg.num_tasks)
        .into_par_iter()
        .map(|t| generate_task(cfg, &g, t, None))
        .collect();
    let mut ds = MultiTaskDataset {
        tasks: Vec::with_capacity(cfg.num_tasks),
        train: Vec::with_capacity(cfg.num_tasks),
        test: Vec::with_capacity(cfg.num_tasks),
        vocab_size: cfg.vocab_size,
        image_dim: cfg.image_dim,
        max_text_len: cfg.tokens_per_example,
        test_fraction: DEFAULT_TEST_FRACTION,
        split_seed: cfg.seed,
        generation: Some(cfg.clone()),
    };
    for (spec, examples) in tasks {
        let (train, test) = split_task(examples, spec.task_id, ds.test_fraction, ds.split_seed)?;
        ds.tasks.push(spec);
        ds.train.push(train);
        ds.test.push(test);
    }
    Ok(ds)
}

/// Re-split every task with a new seed and fraction. Original generation
/// order within each task is preserved on both sides.
pub fn split(ds: &MultiTaskDataset, fraction: f64, seed: u64) -> Result<MultiTaskDataset> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("test fraction {fraction} outside (0, 1)")));
    }
    let mut out = ds.clone();
    out.test_fraction = fraction;
    out.split_seed = seed;
    for t in 0..ds.num_tasks() {
        let merged = merge_in_order(ds, t, ds.split_seed);
        let (train, test) = split_task(merged, t, fraction, seed)?;
        out.train[t] = train;
        out.test[t] = test;
    }
    Ok(out)
}

/// Recover a task's generation order from its current split.
fn merge_in_order(ds: &MultiTaskDataset, t: usize, seed: u64) -> Vec<Example> {
    let n = ds.train[t].len() + ds.test[t].len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ name_stream("split"), t as u64));
    order.shuffle(&mut rng);
    let k = ds.test[t].len();
    let mut is_test = vec![false; n];
    if k == test_size(n, ds.test_fraction) {
        for &i in &order[..k] {
            is_test[i] = true;
        }
    } else {
        // Unknown provenance: treat train then test as the order.
        is_test[n - k..].iter_mut().for_each(|b| *b = true);
    }
    let (mut tr, mut te) = (ds.train[t].iter(), ds.test[t].iter());
    is_test
        .into_iter()
        .map(|b| if b { te.next() } else { tr.next() })
        .map(|e| e.expect("split sizes checked").clone())
        .collect()
}

/// Keep only `ids`, renumbered densely in the given order.
pub fn select_tasks(ds: &MultiTaskDataset, ids: &[usize]) -> Result<MultiTaskDataset> {
    if ids.is_empty() {
        return Err(Error::Dataset("no tasks selected".into()));
    }
    let mut seen = vec![false; ds.num_tasks()];
    let mut out = MultiTaskDataset {
        tasks: Vec::new(),
        train: Vec::new(),
        test: Vec::new(),
        ..ds.clone()
    };
    for (new_id, &old) in ids.iter().enumerate() {
        if old >= ds.num_tasks() || std::mem::replace(&mut seen[old], true) {
            return Err(Error::Dataset(format!("task {old} missing or selected twice")));
        }
        let relabel = |exs: &[Example]| -> Vec<Example> {
            exs.iter()
                .map(|e| Example {
                    task_id: new_id,
                    ..e.clone()
                })
                .collect()
        };
        out.tasks.push(TaskSpec {
            task_id: new_id,
            ..ds.tasks[old].clone()
        });
        out.train.push(relabel(&ds.train[old]));
        out.test.push(relabel(&ds.test[old]));
    }
    Ok(out)
}

/// Append one task `scale_factor` times larger than the current largest.
/// Uses the stored generation parameters, or defaults matched to the
/// dataset's shape when it was ingested from elsewhere.
pub fn add_oversized_task(ds: &MultiTaskDataset, scale_factor: usize) -> Result<MultiTaskDataset> {
    if scale_factor < 1 {
        return Err(Error::Config("scale factor must be at least 1".into()));
    }
    let cfg = match &ds.generation {
        Some(c) => c.clone(),
        None => {
            let mut c = GenConfig {
                vocab_size: ds.vocab_size,
                image_dim: ds.image_dim,
                tokens_per_example: ds.max_text_len.max(1),
                seed: ds.split_seed,
                ..GenConfig::default()
            };
            c.latent_dim = c.latent_dim.min(c.vocab_size / 2).max(1);
            c.classes_max = c.classes_max.min(c.vocab_size);
            c.classes_min = c.classes_min.min(c.classes_max);
            c
        }
    };
    cfg.validate()?;
    let largest = ds.tasks.iter().map(|t| t.num_examples).max().unwrap_or(2);
    let new_id = ds.num_tasks();
    let g = Globals::new(&cfg);
    let (spec, examples) = generate_task(&cfg, &g, new_id, Some(scale_factor * largest));
    let (train, test) = split_task(examples, new_id, ds.test_fraction, ds.split_seed)?;
    let mut out = ds.clone();
    out.tasks.push(spec);
    out.train.push(train);
    out.test.push(test);
    Ok(out)
}

#[cfg(test)]
mod tests;
