//! Subcommand implementations. Each writes its outputs below the run
//! directory and returns a summary for printing.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mtl_core::datagen::{export, select_tasks, MultiTaskDataset};
use mtl_core::evalsuite::{compare, summarize, CohortBasis, Comparison, MetricReport, SeedSummary, TaskAccuracy};
use mtl_core::sampler::ScheduleKind;
use mtl_core::trainer::{
    self, checkpoint, finetune, train, train_baseline, write_metrics_log, MtlModel, RunStatus, TrainConfig,
    TrainOutcome,
};
use mtl_core::{Error, Result};
use rayon::prelude::*;

use crate::config::{parse_ids, ExperimentConfig};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.toml";
pub const REPORT_CSV: &str = "report.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const STATUS_FILE: &str = "status";
pub const FINGERPRINT_FILE: &str = "fingerprint";
pub const SUMMARY_FILE: &str = "summary.toml";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn seed_dir(base: &Path, seed: u64) -> PathBuf {
    base.join(format!("seed-{seed}"))
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))
}

fn status_name(s: RunStatus) -> &'static str {
    match s {
        RunStatus::Running => "running",
        RunStatus::Converged => "converged",
        RunStatus::Diverged => "diverged",
    }
}

fn read_report(dir: &Path) -> Result<MetricReport> {
    let path = dir.join(REPORT_FILE);
    toml::from_str(&read(&path)?).map_err(|e| Error::Ingest {
        path,
        line: 0,
        reason: e.message().to_string(),
    })
}

/// One finished training run.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub seed: u64,
    pub dir: PathBuf,
    pub status: RunStatus,
    pub report: MetricReport,
    pub divergence: Option<String>,
}

/// Persist a finished run: resolved config, metrics log, reports,
/// checkpoint, fingerprint and status.
fn write_run(dir: &Path, cfg: &ExperimentConfig, seed: u64, fp: &str, out: &TrainOutcome) -> Result<RunRecord> {
    let mut resolved = cfg.clone();
    resolved.run.seeds = vec![seed];
    write(&dir.join(CONFIG_FILE), resolved.to_toml()?)?;
    write_metrics_log(&dir.join(METRICS_FILE), &out.log)?;
    let mut report = out.report.clone();
    report.fingerprint = fp.to_string();
    write(&dir.join(REPORT_FILE), report.to_toml()?)?;
    write(&dir.join(REPORT_CSV), report.to_csv())?;
    checkpoint::save(&dir.join(CHECKPOINT_FILE), &out.model, fp)?;
    write(&dir.join(FINGERPRINT_FILE), format!("{fp}\n"))?;
    let mut status = status_name(out.status).to_string();
    if let Some(d) = &out.divergence {
        let _ = write!(status, ": {d}");
    }
    write(&dir.join(STATUS_FILE), format!("{status}\n"))?;
    Ok(RunRecord {
        seed,
        dir: dir.to_path_buf(),
        status: out.status,
        report,
        divergence: out.divergence.clone(),
    })
}

fn summary_text(label: &str, s: &SeedSummary) -> String {
    format!(
        "{label}: {} run(s)  mean {:.4} ± {:.4}  t10 {:.4} ± {:.4}  b10 {:.4} ± {:.4}",
        s.runs, s.mean_acc.0, s.mean_acc.1, s.t10_acc.0, s.t10_acc.1, s.b10_acc.0, s.b10_acc.1
    )
}

fn write_summary(dir: &Path, s: &SeedSummary) -> Result<()> {
    let text = toml::to_string(s).map_err(|e| Error::Evaluation(format!("cannot encode summary: {e}")))?;
    write(&dir.join(SUMMARY_FILE), text)
}

/// Generate (or ingest), select and export the dataset for the first seed.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<(PathBuf, MultiTaskDataset)> {
    let ds = cfg.dataset(cfg.run.seeds[0])?;
    let dir = cfg.run_dir();
    export(&ds, &dir)?;
    Ok((dir, ds))
}

pub struct TrainSummary {
    pub runs: Vec<RunRecord>,
    pub summary: SeedSummary,
}

impl TrainSummary {
    pub fn any_diverged(&self) -> bool {
        self.runs.iter().any(|r| r.status == RunStatus::Diverged)
    }

    pub fn text(&self, label: &str) -> String {
        let mut out = String::new();
        for r in &self.runs {
            let _ = writeln!(
                out,
                "seed {}: {}  mean {:.4}  t10 {:.4}  b10 {:.4}  -> {}",
                r.seed,
                status_name(r.status),
                r.report.mean_acc,
                r.report.t10_acc,
                r.report.b10_acc,
                r.dir.display()
            );
        }
        out + &summary_text(label, &self.summary)
    }
}

fn train_seed(cfg: &ExperimentConfig, base: &Path, seed: u64) -> Result<RunRecord> {
    let ds = cfg.dataset(seed)?;
    let tcfg = cfg.train_config(seed, &ds);
    let fp = trainer::fingerprint(&tcfg, &ds)?;
    let out = train(&ds, &tcfg)?;
    write_run(&seed_dir(base, seed), cfg, seed, &fp, &out)
}

/// Train one model per seed and aggregate mean ± std over seeds.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    let base = cfg.run_dir();
    let runs = pool(cfg.run.jobs)?.install(|| {
        cfg.run
            .seeds
            .par_iter()
            .map(|&s| train_seed(cfg, &base, s))
            .collect::<Result<Vec<_>>>()
    })?;
    let reports: Vec<MetricReport> = runs.iter().map(|r| r.report.clone()).collect();
    let summary = summarize(&reports)?;
    write(&base.join(CONFIG_FILE), cfg.to_toml()?)?;
    write_summary(&base, &summary)?;
    Ok(TrainSummary { runs, summary })
}

fn cohort_size_of(ds: &MultiTaskDataset, task: usize, basis: CohortBasis) -> usize {
    match basis {
        CohortBasis::Train => ds.train[task].len(),
        CohortBasis::Total => ds.tasks[task].num_examples,
    }
}

/// Train each selected task alone, per seed. Reports hold one accuracy per
/// trained task.
pub fn cmd_baseline(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    let base = cfg.run_dir();
    let jobs = pool(cfg.run.jobs)?;
    let mut runs = Vec::new();
    for &seed in &cfg.run.seeds {
        let ds = cfg.dataset(seed)?;
        let tcfg = cfg.train_config(seed, &ds);
        let fp = trainer::fingerprint(&tcfg, &ds)?;
        let mut ids = parse_ids(&cfg.baseline.tasks)?;
        if ids.is_empty() {
            ids = (0..ds.num_tasks()).collect();
        }
        let dir = seed_dir(&base, seed);
        let results = jobs.install(|| {
            ids.par_iter()
                .map(|&t| {
                    let b = train_baseline(&ds, t, &tcfg)?;
                    let tdir = dir.join(format!("task-{t:03}"));
                    fs::create_dir_all(&tdir).map_err(|e| Error::Io {
                        path: tdir.clone(),
                        source: e,
                    })?;
                    write_metrics_log(&tdir.join(METRICS_FILE), &b.outcome.log)?;
                    checkpoint::save(&tdir.join(CHECKPOINT_FILE), &b.outcome.model, &fp)?;
                    Ok((b.outcome.status, b.outcome.divergence.clone(), TaskAccuracy {
                        task_id: t,
                        name: ds.tasks[t].name.clone(),
                        size: cohort_size_of(&ds, t, tcfg.cohort),
                        accuracy: b.accuracy,
                    }))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let diverged: Vec<String> = results
            .iter()
            .filter(|r| r.0 == RunStatus::Diverged)
            .map(|r| format!("task {}: {}", r.2.task_id, r.1.as_deref().unwrap_or("non-finite")))
            .collect();
        let status = if diverged.is_empty() { RunStatus::Converged } else { RunStatus::Diverged };
        let report = MetricReport::from_tasks(results.into_iter().map(|r| r.2).collect(), fp.clone())?;
        let mut resolved = cfg.clone();
        resolved.run.seeds = vec![seed];
        write(&dir.join(CONFIG_FILE), resolved.to_toml()?)?;
        write(&dir.join(REPORT_FILE), report.to_toml()?)?;
        write(&dir.join(REPORT_CSV), report.to_csv())?;
        write(&dir.join(FINGERPRINT_FILE), format!("{fp}\n"))?;
        let mut line = status_name(status).to_string();
        if !diverged.is_empty() {
            let _ = write!(line, ": {}", diverged.join("; "));
        }
        write(&dir.join(STATUS_FILE), format!("{line}\n"))?;
        runs.push(RunRecord {
            seed,
            dir,
            status,
            report,
            divergence: (!diverged.is_empty()).then(|| diverged.join("; ")),
        });
    }
    let reports: Vec<MetricReport> = runs.iter().map(|r| r.report.clone()).collect();
    let summary = summarize(&reports)?;
    write(&base.join(CONFIG_FILE), cfg.to_toml()?)?;
    write_summary(&base, &summary)?;
    Ok(TrainSummary { runs, summary })
}

/// Names accepted in `ablate.variants`.
pub const VARIANTS: [&str; 3] = ["vanilla", "alpha_decay", "alpha_decay_dypa"];

/// Apply an ablation variant. `vanilla` samples uniformly with fixed head
/// widths; `alpha_decay` uses the configured decay schedule with fixed
/// widths; `alpha_decay_dypa` adds quartile widths.
pub fn apply_variant(cfg: &ExperimentConfig, variant: &str) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    match variant {
        "vanilla" => {
            c.sampler.schedule = ScheduleKind::Constant;
            c.sampler.alpha_start = 0.0;
            c.sampler.alpha_end = 0.0;
            c.dypa.enabled = false;
        }
        "alpha_decay" => c.dypa.enabled = false,
        "alpha_decay_dypa" => c.dypa.enabled = true,
        other => {
            return Err(Error::Config(format!(
                "unknown ablation variant `{other}` (expected one of {})",
                VARIANTS.join(", ")
            )))
        }
    }
    c.validate()?;
    Ok(c)
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub status: RunStatus,
    pub report: MetricReport,
    /// Reused from a previous invocation with the same fingerprint.
    pub cached: bool,
}

#[derive(Clone, Debug)]
pub struct AblationCell {
    pub task_count: usize,
    pub variant: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub result: std::result::Result<CellResult, String>,
}

pub struct AblationResult {
    pub cells: Vec<AblationCell>,
    /// Per `(task_count, seed)`: variants compared against the first.
    pub comparisons: Vec<(usize, u64, Comparison)>,
}

impl AblationResult {
    /// Variant with the highest mean accuracy in one cell of the grid.
    pub fn best_variant(&self, task_count: usize, seed: u64) -> Option<&str> {
        let (_, _, c) = self.comparisons.iter().find(|(k, s, _)| *k == task_count && *s == seed)?;
        c.rows
            .iter()
            .max_by(|a, b| a.mean_acc.total_cmp(&b.mean_acc))
            .map(|r| r.label.as_str())
    }

    pub fn failures(&self) -> impl Iterator<Item = &AblationCell> {
        self.cells.iter().filter(|c| c.result.is_err())
    }

    pub fn text(&self) -> String {
        let mut out = String::new();
        for (k, s, c) in &self.comparisons {
            let _ = writeln!(out, "tasks {k}, seed {s}:");
            out += &c.to_text();
            out.push('\n');
        }
        for c in self.failures() {
            let _ = writeln!(
                out,
                "failed: tasks {} {} seed {}: {}",
                c.task_count,
                c.variant,
                c.seed,
                c.result.as_ref().err().map_or("", String::as_str)
            );
        }
        out
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("task_count,seed,label,mean_acc,t10_acc,b10_acc,delta_mean,delta_t10,delta_b10\n");
        for (k, s, c) in &self.comparisons {
            for line in c.to_csv().lines().skip(1) {
                let _ = writeln!(out, "{k},{s},{line}");
            }
        }
        out
    }
}

fn cached_cell(dir: &Path, fp: &str) -> Option<CellResult> {
    let stored = fs::read_to_string(dir.join(FINGERPRINT_FILE)).ok()?;
    if stored.trim() != fp {
        return None;
    }
    let status = match fs::read_to_string(dir.join(STATUS_FILE)).ok()?.split(':').next()?.trim() {
        "converged" => RunStatus::Converged,
        "diverged" => RunStatus::Diverged,
        _ => return None,
    };
    let report = read_report(dir).ok()?;
    Some(CellResult {
        status,
        report,
        cached: true,
    })
}

fn run_cell(cfg: &ExperimentConfig, task_count: usize, seed: u64, dir: &Path) -> Result<CellResult> {
    let full = cfg.dataset(seed)?;
    if task_count > full.num_tasks() {
        return Err(Error::Config(format!(
            "grid asks for {task_count} tasks, dataset has {}",
            full.num_tasks()
        )));
    }
    let ds = select_tasks(&full, &(0..task_count).collect::<Vec<_>>())?;
    let tcfg = cfg.train_config(seed, &ds);
    let fp = trainer::fingerprint(&tcfg, &ds)?;
    if let Some(hit) = cached_cell(dir, &fp) {
        return Ok(hit);
    }
    let out = train(&ds, &tcfg)?;
    let rec = write_run(dir, cfg, seed, &fp, &out)?;
    Ok(CellResult {
        status: rec.status,
        report: rec.report,
        cached: false,
    })
}

/// Run every (task count, variant, seed) cell. A failing cell is recorded
/// and the grid continues; completed cells with a matching fingerprint are
/// reused.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<AblationResult> {
    let base = cfg.run_dir();
    let variants = cfg
        .ablate
        .variants
        .iter()
        .map(|v| Ok((v.clone(), apply_variant(cfg, v)?)))
        .collect::<Result<Vec<_>>>()?;
    if variants.is_empty() || cfg.ablate.task_counts.is_empty() {
        return Err(Error::Config("ablation needs variants and task counts".into()));
    }
    let mut plan = Vec::new();
    for &k in &cfg.ablate.task_counts {
        for (name, vcfg) in &variants {
            for &seed in &cfg.run.seeds {
                plan.push((k, name.clone(), vcfg, seed));
            }
        }
    }
    let cells: Vec<AblationCell> = pool(cfg.run.jobs)?.install(|| {
        plan.par_iter()
            .map(|(k, name, vcfg, seed)| {
                let dir = seed_dir(&base.join(format!("k{k}")).join(name), *seed);
                let result = run_cell(vcfg, *k, *seed, &dir).map_err(|e| {
                    let msg = e.to_string();
                    let _ = write(&dir.join(STATUS_FILE), format!("failed: {msg}\n"));
                    msg
                });
                AblationCell {
                    task_count: *k,
                    variant: name.clone(),
                    seed: *seed,
                    dir,
                    result,
                }
            })
            .collect()
    });
    let mut comparisons = Vec::new();
    for &k in &cfg.ablate.task_counts {
        for &seed in &cfg.run.seeds {
            let reports: Vec<(String, MetricReport)> = cells
                .iter()
                .filter(|c| c.task_count == k && c.seed == seed)
                .filter_map(|c| c.result.as_ref().ok().map(|r| (c.variant.clone(), r.report.clone())))
                .collect();
            if !reports.is_empty() {
                comparisons.push((k, seed, compare(&reports)?));
            }
        }
    }
    let result = AblationResult { cells, comparisons };
    write(&base.join(CONFIG_FILE), cfg.to_toml()?)?;
    write(&base.join("comparison.txt"), result.text())?;
    write(&base.join("comparison.csv"), result.csv())?;
    Ok(result)
}

pub struct FinetuneArm {
    pub init: String,
    pub runs: Vec<RunRecord>,
    pub summary: SeedSummary,
}

pub struct FinetuneSummary {
    pub arms: Vec<FinetuneArm>,
}

impl FinetuneSummary {
    pub fn text(&self) -> String {
        let mut out = String::new();
        let base = self.arms.first().map_or(0.0, |a| a.summary.mean_acc.0);
        for a in &self.arms {
            let _ = writeln!(
                out,
                "{}  (delta mean {:+.4})",
                summary_text(&a.init, &a.summary),
                a.summary.mean_acc.0 - base
            );
        }
        out
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("init,runs,mean_acc,mean_std,t10_acc,t10_std,b10_acc,b10_std\n");
        for a in &self.arms {
            let s = &a.summary;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                a.init, s.runs, s.mean_acc.0, s.mean_acc.1, s.t10_acc.0, s.t10_acc.1, s.b10_acc.0, s.b10_acc.1
            );
        }
        out
    }
}

/// Checkpoint path for an init entry; `{seed}` is replaced by the seed.
fn init_path(init: &str, seed: u64) -> PathBuf {
    PathBuf::from(init.replace("{seed}", &seed.to_string()))
}

fn arm_label(i: usize, init: &str) -> String {
    if init == "random" {
        return "random".into();
    }
    let stem: String = init
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("init{i}-{}", stem.trim_matches('_'))
}

/// Fine-tune one model per (init, seed): shared weights from the checkpoint
/// or random, fresh heads, all parameters trained.
pub fn cmd_finetune(cfg: &ExperimentConfig) -> Result<FinetuneSummary> {
    let base = cfg.run_dir();
    let mut arms = Vec::new();
    for (i, init) in cfg.finetune.init.iter().enumerate() {
        let label = arm_label(i, init);
        let mut runs = Vec::new();
        for &seed in &cfg.run.seeds {
            let source: Option<MtlModel> = if init == "random" {
                None
            } else {
                Some(checkpoint::load(&init_path(init, seed))?.model)
            };
            let ds = cfg.dataset(seed)?;
            let tcfg = TrainConfig {
                epochs: cfg.finetune.epochs,
                ..cfg.train_config(seed, &ds)
            };
            let fp = trainer::fingerprint(&(&tcfg, init), &ds)?;
            let out = finetune(source.as_ref(), &ds, &tcfg)?;
            runs.push(write_run(&seed_dir(&base.join(&label), seed), cfg, seed, &fp, &out)?);
        }
        let reports: Vec<MetricReport> = runs.iter().map(|r| r.report.clone()).collect();
        arms.push(FinetuneArm {
            init: init.clone(),
            summary: summarize(&reports)?,
            runs,
        });
    }
    let result = FinetuneSummary { arms };
    write(&base.join(CONFIG_FILE), cfg.to_toml()?)?;
    write(&base.join("transfer.txt"), result.text())?;
    write(&base.join("transfer.csv"), result.csv())?;
    Ok(result)
}

/// Reports found at `path`: its own `report.toml`, or one per `seed-*`
/// subdirectory.
fn collect_reports(path: &Path) -> Result<Vec<(String, MetricReport)>> {
    let name = path
        .file_name()
        .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
    if path.join(REPORT_FILE).is_file() {
        return Ok(vec![(name, read_report(path)?)]);
    }
    let entries = fs::read_dir(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut seeds: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("seed-")) && p.join(REPORT_FILE).is_file()
        })
        .collect();
    seeds.sort();
    if seeds.is_empty() {
        return Err(Error::Evaluation(format!("no {REPORT_FILE} under {}", path.display())));
    }
    seeds
        .iter()
        .map(|p| {
            let seed = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((format!("{name}/{seed}"), read_report(p)?))
        })
        .collect()
}

/// Compare finished runs; the first path is the baseline row. Writes
/// `comparison.txt` and `comparison.csv` into `out` when given.
pub fn cmd_report(paths: &[PathBuf], out: Option<&Path>) -> Result<String> {
    let mut reports = Vec::new();
    for p in paths {
        reports.extend(collect_reports(p)?);
    }
    let cmp = compare(&reports)?;
    let text = cmp.to_text();
    if let Some(dir) = out {
        write(&dir.join("comparison.txt"), &text)?;
        write(&dir.join("comparison.csv"), cmp.to_csv())?;
    }
    Ok(text)
}
