//! Experiment configuration: one TOML document with a section per module.
//!
//! Resolution order is defaults, then an optional preset, then the config
//! file, then `section.key=value` overrides (command-line flags are turned
//! into overrides). Every key exists in the default document, so unknown
//! keys are rejected by name and override strings are coerced to the type
//! of the default value.

use std::path::{Path, PathBuf};

use mtl_core::backbone::BackboneConfig;
use mtl_core::datagen::{add_oversized_task, generate, ingest, select_tasks, GenConfig, MultiTaskDataset};
use mtl_core::dypa::{ComplexitySource, DypaConfig};
use mtl_core::evalsuite::CohortBasis;
use mtl_core::heads::HeadKind;
use mtl_core::ndcore::AdamWConfig;
use mtl_core::sampler::{AlphaSchedule, ScheduleKind};
use mtl_core::trainer::{HeadSpec, LrKind, LrPolicy, ModelConfig, TrainConfig};
use mtl_core::{Error, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const OUTPUT_ROOT_ENV: &str = "MTL_OUTPUT_ROOT";
const DEFAULT_OUTPUT_ROOT: &str = "runs";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub name: String,
    /// Empty: `$MTL_OUTPUT_ROOT`, else `runs`.
    pub output_dir: String,
    pub seeds: Vec<u64>,
    /// Concurrent runs for grids and multi-seed commands.
    pub jobs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Dataset directory to ingest; empty means generate from `[generate]`.
    pub path: String,
    /// Task ids to keep, e.g. `0-19,25`; empty keeps all.
    pub tasks: String,
    /// Append a task this many times larger than the largest one (0: off).
    pub oversized: usize,
    /// Offset the generation seed by the run seed, so each seed sees a
    /// fresh dataset drawn from the same distribution.
    pub vary_with_seed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff: usize,
    pub max_len: usize,
    pub max_images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DypaSection {
    pub enabled: bool,
    pub base_dt: usize,
    pub growth: usize,
    pub attn_heads: usize,
    pub source: ComplexitySource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub schedule: ScheduleKind,
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub exp_rate: f64,
    pub demon_ref: f64,
    pub repetition: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSection {
    pub policy: LrKind,
    pub low: f64,
    pub high: f64,
    pub decay: f64,
    pub breakpoints: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_points: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub cohort: CohortBasis,
    pub freeze_embeddings: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    /// Tasks to train alone, same syntax as `data.tasks`; empty: all.
    pub tasks: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    /// `random` or checkpoint paths; one arm each.
    pub init: Vec<String>,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    pub variants: Vec<String>,
    pub task_counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub generate: GenConfig,
    pub backbone: BackboneSection,
    pub heads: HeadSpec,
    pub dypa: DypaSection,
    pub sampler: SamplerSection,
    pub lr: LrSection,
    pub train: TrainSection,
    pub baseline: BaselineSection,
    pub finetune: FinetuneSection,
    pub ablate: AblateSection,
}

impl Default for ExperimentConfig {
    /// Desk-scale defaults: the 64-wide backbone, 8/16/32/64 quartile
    /// ladder, exponential decay 1.0 -> 0.1, and learning rates scaled up
    /// for training from random initialization.
    fn default() -> Self {
        let b = BackboneConfig::default();
        let alpha = AlphaSchedule::default();
        let opt = AdamWConfig::default();
        let lr = LrPolicy::default();
        Self {
            run: RunSection {
                name: "run".into(),
                output_dir: String::new(),
                seeds: vec![0],
                jobs: 1,
            },
            data: DataSection {
                path: String::new(),
                tasks: String::new(),
                oversized: 0,
                vary_with_seed: false,
            },
            generate: GenConfig::default(),
            backbone: BackboneSection {
                layers: b.layers,
                hidden: b.hidden,
                heads: b.heads,
                ff: b.ff,
                max_len: b.max_len,
                max_images: b.max_images,
            },
            heads: HeadSpec::default(),
            dypa: DypaSection {
                enabled: false,
                base_dt: 8,
                growth: 2,
                attn_heads: 2,
                source: ComplexitySource::ExampleCount,
            },
            sampler: SamplerSection {
                schedule: alpha.kind,
                alpha_start: alpha.alpha_start,
                alpha_end: alpha.alpha_end,
                exp_rate: alpha.exp_rate,
                demon_ref: alpha.demon_ref,
                repetition: 1,
            },
            lr: LrSection {
                policy: LrKind::WarmupStep,
                low: 3e-4,
                high: 3e-3,
                decay: lr.decay,
                breakpoints: lr.breakpoints,
            },
            train: TrainSection {
                epochs: 15,
                batch_size: 8,
                eval_points: 10,
                weight_decay: opt.weight_decay,
                beta1: opt.beta1,
                beta2: opt.beta2,
                eps: opt.eps,
                cohort: CohortBasis::Train,
                freeze_embeddings: false,
            },
            baseline: BaselineSection { tasks: String::new() },
            finetune: FinetuneSection {
                init: vec!["random".into()],
                epochs: 10,
            },
            ablate: AblateSection {
                variants: vec!["vanilla".into(), "alpha_decay".into(), "alpha_decay_dypa".into()],
                task_counts: vec![10, 25],
            },
        }
    }
}

/// The 20-task synthetic benchmark. Task 20 is generated alongside and
/// held out for transfer experiments.
pub fn bench_preset() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.run.name = "bench".into();
    c.run.seeds = vec![0, 1, 2];
    c.data.tasks = "0-19".into();
    c.data.vary_with_seed = true;
    c.generate = GenConfig {
        num_tasks: 21,
        latent_dim: 8,
        vocab_size: 128,
        image_dim: 16,
        rho: 0.7,
        size_median: 400.0,
        size_sigma: 1.2,
        classes_min: 4,
        classes_max: 16,
        label_noise: 0.05,
        noise: 0.3,
        proto_noise: 0.1,
        tokens_per_example: 8,
        images_min: 0,
        images_max: 2,
        seed: 0,
    };
    c.backbone = BackboneSection {
        layers: 2,
        hidden: 32,
        heads: 4,
        ff: 64,
        max_len: 16,
        max_images: 2,
    };
    c.heads = HeadSpec {
        kind: HeadKind::Attention,
        d_t: 8,
        attn_heads: 2,
    };
    c.dypa.enabled = true;
    c.train.epochs = 5;
    c.train.eval_points = 2;
    c
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    match name {
        "default" => Ok(ExperimentConfig::default()),
        "bench" => Ok(bench_preset()),
        other => Err(Error::Config(format!("unknown preset `{other}` (expected default or bench)"))),
    }
}

fn to_table(cfg: &ExperimentConfig) -> Result<Table> {
    Table::try_from(cfg).map_err(|e| Error::Config(format!("cannot encode config: {e}")))
}

fn type_name(v: &Value) -> &'static str {
    v.type_str()
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "on" | "true" | "yes" | "1" => Some(true),
        "off" | "false" | "no" | "0" => Some(false),
        _ => None,
    }
}

/// Parse an override value as a TOML literal, falling back to a bare string.
fn parse_literal(raw: &str) -> Value {
    let raw = raw.trim();
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Convert `given` to the type of `default`, or explain why not.
fn coerce(default: &Value, given: Value, key: &str) -> Result<Value> {
    let bad = |given: &Value| {
        Error::Config(format!(
            "`{key}` expects {}, got {} `{given}`",
            type_name(default),
            type_name(given)
        ))
    };
    Ok(match (default, given) {
        (Value::Table(d), Value::Table(g)) => {
            let mut out = d.clone();
            merge_into(&mut out, g, key)?;
            Value::Table(out)
        }
        (Value::Boolean(_), Value::String(s)) => Value::Boolean(parse_bool(&s).ok_or_else(|| bad(&Value::String(s)))?),
        (Value::Boolean(_), Value::Integer(i)) if i == 0 || i == 1 => Value::Boolean(i == 1),
        (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
        (Value::Float(_), Value::String(s)) => {
            Value::Float(s.trim().parse::<f64>().map_err(|_| bad(&Value::String(s.clone())))?)
        }
        (Value::Integer(_), Value::String(s)) => {
            Value::Integer(s.trim().parse::<i64>().map_err(|_| bad(&Value::String(s.clone())))?)
        }
        (Value::String(_), Value::String(s)) => Value::String(s),
        (Value::String(_), v @ (Value::Integer(_) | Value::Float(_) | Value::Boolean(_))) => Value::String(v.to_string()),
        (Value::Array(d), Value::Array(items)) => {
            let elem = d.first();
            Value::Array(
                items
                    .into_iter()
                    .map(|v| match elem {
                        Some(e) => coerce(e, v, key),
                        None => Ok(v),
                    })
                    .collect::<Result<_>>()?,
            )
        }
        (Value::Array(d), Value::String(s)) => {
            let items = s
                .split(',')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .map(parse_literal)
                .collect();
            coerce(&Value::Array(d.clone()), Value::Array(items), key)?
        }
        (Value::Array(d), scalar) => coerce(&Value::Array(d.clone()), Value::Array(vec![scalar]), key)?,
        (d, g) if std::mem::discriminant(d) == std::mem::discriminant(&g) => g,
        (_, g) => return Err(bad(&g)),
    })
}

fn merge_into(base: &mut Table, overlay: Table, prefix: &str) -> Result<()> {
    for (k, v) in overlay {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let slot = base
            .get_mut(&k)
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        *slot = coerce(slot, v, &key)?;
    }
    Ok(())
}

/// Apply one `section.key=value` override.
fn set_key(table: &mut Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let path = path.trim();
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().filter(|l| !l.is_empty());
    let last = last.ok_or_else(|| Error::Config(format!("empty key in `{assignment}`")))?;
    let mut node = &mut *table;
    for p in parts {
        node = match node.get_mut(p) {
            Some(Value::Table(t)) => t,
            _ => return Err(Error::Config(format!("unknown config key `{path}`"))),
        };
    }
    let slot = node
        .get_mut(last)
        .ok_or_else(|| Error::Config(format!("unknown config key `{path}`")))?;
    if slot.is_table() {
        return Err(Error::Config(format!("`{path}` is a section, not a key")));
    }
    *slot = coerce(slot, parse_literal(raw), path)?;
    Ok(())
}

/// Resolve a configuration from a base, config file text, and overrides.
pub fn resolve(base: &ExperimentConfig, file: Option<(&Path, &str)>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table = to_table(base)?;
    if let Some((path, text)) = file {
        let parsed: Table = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            Error::Config(format!("{}:{line}: {}", path.display(), e.message().trim()))
        })?;
        merge_into(&mut table, parsed, "")?;
    }
    for o in overrides {
        set_key(&mut table, o)?;
    }
    let cfg: ExperimentConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parse `0-19,25` style id lists.
pub fn parse_ids(spec: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("bad id list `{spec}`"));
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    Ok(out)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.run.name.is_empty() || self.run.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("run name `{}` must be a plain non-empty name", self.run.name)));
        }
        if self.run.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.run.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        parse_ids(&self.data.tasks)?;
        parse_ids(&self.baseline.tasks)?;
        if self.data.path.is_empty() {
            self.generate.validate()?;
        }
        if self.dypa.enabled {
            self.dypa_config().validate(self.backbone.hidden)?;
        }
        if self.finetune.init.is_empty() || self.finetune.epochs == 0 {
            return Err(Error::Config("finetune needs at least one init and one epoch".into()));
        }
        self.training_template().validate()
    }

    pub fn output_root(&self) -> PathBuf {
        if !self.run.output_dir.is_empty() {
            return PathBuf::from(&self.run.output_dir);
        }
        std::env::var_os(OUTPUT_ROOT_ENV)
            .filter(|v| !v.is_empty())
            .map_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT), PathBuf::from)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_root().join(&self.run.name)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot encode config: {e}")))
    }

    fn dypa_config(&self) -> DypaConfig {
        DypaConfig {
            base_dt: self.dypa.base_dt,
            growth: self.dypa.growth,
            attn_heads: self.dypa.attn_heads,
            source: self.dypa.source,
        }
    }

    /// Dataset for one seed: ingest or generate, keep `data.tasks`, then
    /// append the oversized task if requested.
    pub fn dataset(&self, seed: u64) -> Result<MultiTaskDataset> {
        let mut ds = if self.data.path.is_empty() {
            let mut g = self.generate.clone();
            if self.data.vary_with_seed {
                g.seed = g.seed.wrapping_add(seed);
            }
            generate(&g)?
        } else {
            ingest(Path::new(&self.data.path))?
        };
        let ids = parse_ids(&self.data.tasks)?;
        if !ids.is_empty() {
            ds = select_tasks(&ds, &ids)?;
        }
        if self.data.oversized > 0 {
            ds = add_oversized_task(&ds, self.data.oversized)?;
        }
        Ok(ds)
    }

    /// Training config with placeholder vocabulary and image width; see
    /// [`ExperimentConfig::train_config`].
    fn training_template(&self) -> TrainConfig {
        let b = &self.backbone;
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed: 0,
            eval_points: self.train.eval_points,
            sampling: AlphaSchedule {
                kind: self.sampler.schedule,
                alpha_start: self.sampler.alpha_start,
                alpha_end: self.sampler.alpha_end,
                exp_rate: self.sampler.exp_rate,
                demon_ref: self.sampler.demon_ref,
            },
            repetition: self.sampler.repetition,
            lr: LrPolicy {
                kind: self.lr.policy,
                low: self.lr.low,
                high: self.lr.high,
                decay: self.lr.decay,
                breakpoints: self.lr.breakpoints,
            },
            optimizer: AdamWConfig {
                beta1: self.train.beta1,
                beta2: self.train.beta2,
                eps: self.train.eps,
                weight_decay: self.train.weight_decay,
            },
            cohort: self.train.cohort,
            model: ModelConfig {
                backbone: BackboneConfig {
                    layers: b.layers,
                    hidden: b.hidden,
                    heads: b.heads,
                    ff: b.ff,
                    vocab_size: self.generate.vocab_size,
                    max_len: b.max_len,
                    max_images: b.max_images,
                    image_dim: self.generate.image_dim,
                },
                head: self.heads,
                dypa: self.dypa.enabled.then(|| self.dypa_config()),
                freeze_embeddings: self.train.freeze_embeddings,
            },
        }
    }

    /// Trainer config for `seed`, with the input widths taken from `ds`.
    pub fn train_config(&self, seed: u64, ds: &MultiTaskDataset) -> TrainConfig {
        let mut t = self.training_template();
        t.seed = seed;
        t.model.backbone.vocab_size = ds.vocab_size;
        t.model.backbone.image_dim = ds.image_dim;
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn over(sets: &[&str]) -> Result<ExperimentConfig> {
        let sets: Vec<String> = sets.iter().map(|s| s.to_string()).collect();
        resolve(&ExperimentConfig::default(), None, &sets)
    }

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = resolve(&ExperimentConfig::default(), Some((Path::new("c.toml"), &text)), &[]).unwrap();
        assert_eq!(back, cfg);
        let bench = bench_preset();
        let back = resolve(&ExperimentConfig::default(), Some((Path::new("c.toml"), &bench.to_toml().unwrap())), &[]).unwrap();
        assert_eq!(back, bench);
    }

    #[test]
    fn overrides_are_coerced() {
        let c = over(&[
            "dypa.enabled=on",
            "run.seeds=1,2,3",
            "sampler.alpha_end=0",
            "sampler.schedule=linear",
            "lr.low=1e-3",
            "run.name=42",
            "finetune.init=a.ckpt",
        ])
        .unwrap();
        assert!(c.dypa.enabled);
        assert_eq!(c.run.seeds, vec![1, 2, 3]);
        assert_eq!(c.sampler.alpha_end, 0.0);
        assert_eq!(c.sampler.schedule, ScheduleKind::Linear);
        assert_eq!(c.lr.low, 1e-3);
        assert_eq!(c.run.name, "42");
        assert_eq!(c.finetune.init, vec!["a.ckpt".to_string()]);
    }

    #[test]
    fn unknown_and_mistyped_keys_rejected() {
        assert!(matches!(over(&["run.colour=red"]), Err(Error::Config(m)) if m.contains("run.colour")));
        assert!(matches!(over(&["nosection.x=1"]), Err(Error::Config(_))));
        assert!(matches!(over(&["train.epochs=many"]), Err(Error::Config(_))));
        assert!(matches!(over(&["dypa.enabled=maybe"]), Err(Error::Config(_))));
        assert!(matches!(over(&["sampler.schedule=zigzag"]), Err(Error::Config(_))));
        assert!(matches!(over(&["train"]), Err(Error::Config(_))));
        let file = "[run]\nname = \"x\"\n[train]\nepoch = 3\n";
        let r = resolve(&ExperimentConfig::default(), Some((Path::new("f.toml"), file)), &[]);
        assert!(matches!(r, Err(Error::Config(m)) if m.contains("train.epoch")));
    }

    #[test]
    fn file_then_overrides() {
        let file = "[train]\nepochs = 3\nbatch_size = 4\n";
        let c = resolve(&bench_preset(), Some((Path::new("f.toml"), file)), &["train.epochs=7".into()]).unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.train.batch_size, 4);
        assert_eq!(c.generate.num_tasks, 21);
    }

    #[test]
    fn malformed_file_reports_line() {
        let file = "[train]\nepochs = 3\nbatch_size = = 4\n";
        match resolve(&ExperimentConfig::default(), Some((Path::new("f.toml"), file)), &[]) {
            Err(Error::Config(m)) => assert!(m.starts_with("f.toml:3:"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_combinations_rejected() {
        // 8 * 2^3 = 64 exceeds twice a 16-wide backbone.
        assert!(over(&["dypa.enabled=on", "backbone.hidden=16", "backbone.heads=2"]).is_err());
        assert!(over(&["run.seeds=[]"]).is_err());
        assert!(over(&["lr.breakpoints=0.5,0.4,0.9"]).is_err());
        assert!(over(&["data.tasks=5-2"]).is_err());
    }

    #[test]
    fn id_lists() {
        assert_eq!(parse_ids("0-3, 7").unwrap(), vec![0, 1, 2, 3, 7]);
        assert_eq!(parse_ids("").unwrap(), Vec::<usize>::new());
        assert!(parse_ids("a").is_err());
    }

    #[test]
    fn dataset_selection_and_oversized() {
        let mut c = bench_preset();
        c.generate.size_median = 20.0;
        let ds = c.dataset(0).unwrap();
        assert_eq!(ds.num_tasks(), 20);
        c.data.oversized = 3;
        let ds2 = c.dataset(0).unwrap();
        assert_eq!(ds2.num_tasks(), 21);
        assert_ne!(c.dataset(1).unwrap(), c.dataset(0).unwrap());
        c.data.vary_with_seed = false;
        assert_eq!(c.dataset(1).unwrap(), c.dataset(0).unwrap());
    }
}
