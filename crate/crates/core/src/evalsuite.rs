//! Per-task accuracy, the mean/T10/B10 aggregates, and run comparisons.
//!
//! T10 and B10 average the tasks in the top and bottom `ceil(0.1 K)` by
//! training-example count, ties going to the lower task id.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{Example, MultiTaskDataset};
use crate::error::{Error, Result};

/// Anything that can label a task's examples.
pub trait Classifier: Sync {
    fn num_heads(&self) -> usize;
    fn predict(&self, task_id: usize, examples: &[Example]) -> Result<Vec<usize>>;
}

/// Which example count ranks tasks into the T10/B10 cohorts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CohortBasis {
    #[default]
    Train,
    Total,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracy {
    pub task_id: usize,
    pub name: String,
    /// Count used for cohort ranking.
    pub size: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tasks: Vec<TaskAccuracy>,
    pub mean_acc: f64,
    pub t10_acc: f64,
    pub b10_acc: f64,
    pub t10_tasks: Vec<usize>,
    pub b10_tasks: Vec<usize>,
    pub timestamp: u64,
    pub fingerprint: String,
}

pub fn cohort_size(k: usize) -> usize {
    k.div_ceil(10)
}

/// Indices into `sizes` of the largest and smallest `ceil(0.1 K)` entries.
/// Ties are broken by ascending index in both cohorts.
pub fn cohorts(sizes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let n = cohort_size(sizes.len());
    let mut desc: Vec<usize> = (0..sizes.len()).collect();
    desc.sort_by_key(|&i| (std::cmp::Reverse(sizes[i]), i));
    let mut asc: Vec<usize> = (0..sizes.len()).collect();
    asc.sort_by_key(|&i| (sizes[i], i));
    let mut top = desc[..n].to_vec();
    let mut bottom = asc[..n].to_vec();
    top.sort_unstable();
    bottom.sort_unstable();
    (top, bottom)
}

impl MetricReport {
    /// Aggregate per-task accuracies into a report.
    pub fn from_tasks(tasks: Vec<TaskAccuracy>, fingerprint: impl Into<String>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Evaluation("no tasks to report".into()));
        }
        let sizes: Vec<usize> = tasks.iter().map(|t| t.size).collect();
        let (top, bottom) = cohorts(&sizes);
        let avg = |idx: &[usize]| idx.iter().map(|&i| tasks[i].accuracy).sum::<f64>() / idx.len() as f64;
        let all: Vec<usize> = (0..tasks.len()).collect();
        Ok(Self {
            mean_acc: avg(&all),
            t10_acc: avg(&top),
            b10_acc: avg(&bottom),
            t10_tasks: top.iter().map(|&i| tasks[i].task_id).collect(),
            b10_tasks: bottom.iter().map(|&i| tasks[i].task_id).collect(),
            tasks,
            timestamp: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            fingerprint: fingerprint.into(),
        })
    }

    /// The same per-task results restricted to tasks named in `names`.
    pub fn restrict(&self, names: &[String]) -> Result<Self> {
        let tasks: Vec<TaskAccuracy> = self
            .tasks
            .iter()
            .filter(|t| names.contains(&t.name))
            .cloned()
            .collect();
        let mut r = Self::from_tasks(tasks, self.fingerprint.clone())?;
        r.timestamp = self.timestamp;
        Ok(r)
    }

    pub fn accuracy_of(&self, task_id: usize) -> Option<f64> {
        self.tasks.iter().find(|t| t.task_id == task_id).map(|t| t.accuracy)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Evaluation(format!("cannot encode report: {e}")))
    }

    /// `task_id,name,size,accuracy,cohort` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task_id,name,size,accuracy,cohort\n");
        for t in &self.tasks {
            let cohort = if self.t10_tasks.contains(&t.task_id) {
                "t10"
            } else if self.b10_tasks.contains(&t.task_id) {
                "b10"
            } else {
                ""
            };
            let _ = writeln!(out, "{},{},{},{},{}", t.task_id, t.name, t.size, t.accuracy, cohort);
        }
        out
    }
}

pub fn accuracy(predictions: &[usize], examples: &[Example]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(examples).filter(|(p, e)| **p == e.label).count();
    hits as f64 / examples.len() as f64
}

/// Test-split accuracy of every task.
pub fn evaluate(model: &impl Classifier, ds: &MultiTaskDataset, basis: CohortBasis) -> Result<MetricReport> {
    evaluate_split(model, ds, &ds.test, basis)
}

/// Accuracy over an arbitrary per-task example store (e.g. the train split).
pub fn evaluate_split(
    model: &impl Classifier,
    ds: &MultiTaskDataset,
    split: &[Vec<Example>],
    basis: CohortBasis,
) -> Result<MetricReport> {
    if model.num_heads() < ds.num_tasks() {
        return Err(Error::Evaluation(format!(
            "model has {} heads for {} tasks",
            model.num_heads(),
            ds.num_tasks()
        )));
    }
    let tasks = ds
        .tasks
        .par_iter()
        .map(|t| {
            let exs = &split[t.task_id];
            let acc = if exs.is_empty() {
                0.0
            } else {
                accuracy(&model.predict(t.task_id, exs)?, exs)
            };
            Ok(TaskAccuracy {
                task_id: t.task_id,
                name: t.name.clone(),
                size: match basis {
                    CohortBasis::Train => ds.train[t.task_id].len(),
                    CohortBasis::Total => t.num_examples,
                },
                accuracy: acc,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_tasks(tasks, "")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub mean_acc: f64,
    pub t10_acc: f64,
    pub b10_acc: f64,
    pub delta_mean: f64,
    pub delta_t10: f64,
    pub delta_b10: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Task names every report covers; metrics are recomputed over these.
    pub common_tasks: Vec<String>,
    /// First row is the baseline.
    pub rows: Vec<ComparisonRow>,
}

/// Align reports on their common tasks and take deltas against the first.
pub fn compare(reports: &[(String, MetricReport)]) -> Result<Comparison> {
    let Some((_, first)) = reports.first() else {
        return Err(Error::Comparison("nothing to compare".into()));
    };
    let mut common: Vec<String> = first.tasks.iter().map(|t| t.name.clone()).collect();
    for (_, r) in &reports[1..] {
        common.retain(|n| r.tasks.iter().any(|t| &t.name == n));
    }
    if common.is_empty() {
        return Err(Error::Comparison("reports share no tasks".into()));
    }
    let restricted = reports
        .iter()
        .map(|(l, r)| Ok((l.clone(), r.restrict(&common)?)))
        .collect::<Result<Vec<_>>>()?;
    let base = &restricted[0].1;
    let rows = restricted
        .iter()
        .map(|(label, r)| ComparisonRow {
            label: label.clone(),
            mean_acc: r.mean_acc,
            t10_acc: r.t10_acc,
            b10_acc: r.b10_acc,
            delta_mean: r.mean_acc - base.mean_acc,
            delta_t10: r.t10_acc - base.t10_acc,
            delta_b10: r.b10_acc - base.b10_acc,
        })
        .collect();
    Ok(Comparison {
        common_tasks: common,
        rows,
    })
}

impl Comparison {
    pub fn to_text(&self) -> String {
        let w = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
        let mut out = format!(
            "{:<w$}  {:>8} {:>8} {:>8}  {:>8} {:>8} {:>8}\n",
            "run", "mean", "t10", "b10", "d_mean", "d_t10", "d_b10"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<w$}  {:>8.4} {:>8.4} {:>8.4}  {:>+8.4} {:>+8.4} {:>+8.4}",
                r.label, r.mean_acc, r.t10_acc, r.b10_acc, r.delta_mean, r.delta_t10, r.delta_b10
            );
        }
        let _ = writeln!(out, "tasks compared: {}", self.common_tasks.len());
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,mean_acc,t10_acc,b10_acc,delta_mean,delta_t10,delta_b10\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.label, r.mean_acc, r.t10_acc, r.b10_acc, r.delta_mean, r.delta_t10, r.delta_b10
            );
        }
        out
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Seed-level summary of several reports of the same configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub runs: usize,
    pub mean_acc: (f64, f64),
    pub t10_acc: (f64, f64),
    pub b10_acc: (f64, f64),
    /// Per-task accuracy averaged over runs, keyed by task name.
    pub per_task: BTreeMap<String, f64>,
}

pub fn summarize(reports: &[MetricReport]) -> Result<SeedSummary> {
    if reports.is_empty() {
        return Err(Error::Evaluation("no reports to summarize".into()));
    }
    let col = |f: fn(&MetricReport) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>());
    let mut per_task: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in reports {
        for t in &r.tasks {
            let e = per_task.entry(t.name.clone()).or_default();
            e.0 += t.accuracy;
            e.1 += 1;
        }
    }
    Ok(SeedSummary {
        runs: reports.len(),
        mean_acc: col(|r| r.mean_acc),
        t10_acc: col(|r| r.t10_acc),
        b10_acc: col(|r| r.b10_acc),
        per_task: per_task.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
    })
}
