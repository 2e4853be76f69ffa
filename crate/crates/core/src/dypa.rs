//! Per-task head widths chosen by complexity quartile.
//!
//! Tasks are ranked by a raw complexity count (training examples by default,
//! output classes optionally), split into four near-equal bins, and the task
//! in bin `q` gets an attention head of width `base_dt * growth^(q-1)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{HeadAllocation, HeadConfig, MAX_WIDTH_RATIO};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComplexitySource {
    #[default]
    ExampleCount,
    ClassCount,
}

impl fmt::Display for ComplexitySource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ExampleCount => "example_count",
            Self::ClassCount => "class_count",
        })
    }
}

impl FromStr for ComplexitySource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "example_count" => Ok(Self::ExampleCount),
            "class_count" => Ok(Self::ClassCount),
            other => Err(Error::Config(format!("unknown complexity source `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DypaConfig {
    pub base_dt: usize,
    pub growth: usize,
    pub attn_heads: usize,
    pub source: ComplexitySource,
}

impl Default for DypaConfig {
    fn default() -> Self {
        Self {
            base_dt: 128,
            growth: 2,
            attn_heads: 2,
            source: ComplexitySource::ExampleCount,
        }
    }
}

impl DypaConfig {
    /// Width assigned to quartile `q` in `1..=4`.
    pub fn width(&self, q: u8) -> usize {
        self.base_dt * self.growth.pow(u32::from(q) - 1)
    }

    pub fn validate(&self, d_backbone: usize) -> Result<()> {
        if self.growth < 1 {
            return Err(Error::Config("dypa growth must be at least 1".into()));
        }
        if self.base_dt == 0 {
            return Err(Error::Config("dypa base width must be positive".into()));
        }
        let top = self.width(4);
        if top > MAX_WIDTH_RATIO * d_backbone {
            return Err(Error::Config(format!(
                "dypa top width {top} exceeds {MAX_WIDTH_RATIO}x backbone width {d_backbone}"
            )));
        }
        for q in 1..=4 {
            let w = self.width(q);
            if self.attn_heads == 0 || w % self.attn_heads != 0 {
                return Err(Error::Config(format!(
                    "dypa width {w} not divisible by {} attention heads",
                    self.attn_heads
                )));
            }
        }
        Ok(())
    }
}

/// What the scorer needs to know about a task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskStats {
    pub task_id: usize,
    pub train_examples: usize,
    pub num_classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityScore {
    pub task_id: usize,
    pub raw: usize,
    /// z-score of `ln(raw)` across tasks. Reported only; binning uses ranks.
    pub normalized: f64,
    pub quartile: u8,
}

pub fn score_tasks(tasks: &[TaskStats], source: ComplexitySource) -> Result<Vec<ComplexityScore>> {
    let k = tasks.len();
    if k < 4 {
        return Err(Error::Config(format!(
            "quartile allocation needs at least 4 tasks, got {k}"
        )));
    }
    let raw: Vec<usize> = tasks
        .iter()
        .map(|t| match source {
            ComplexitySource::ExampleCount => t.train_examples,
            ComplexitySource::ClassCount => t.num_classes,
        })
        .collect();
    if let Some(t) = tasks.iter().zip(&raw).find(|(_, &r)| r == 0) {
        return Err(Error::Config(format!(
            "task {} has zero {source}",
            t.0.task_id
        )));
    }
    let logs: Vec<f64> = raw.iter().map(|&r| (r as f64).ln()).collect();
    let mean = logs.iter().sum::<f64>() / k as f64;
    let sd = (logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / k as f64).sqrt();

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by_key(|&i| (raw[i], tasks[i].task_id));
    let mut quartile = vec![0u8; k];
    for (rank, &i) in order.iter().enumerate() {
        quartile[i] = (rank * 4 / k) as u8 + 1;
    }

    Ok(tasks
        .iter()
        .enumerate()
        .map(|(i, t)| ComplexityScore {
            task_id: t.task_id,
            raw: raw[i],
            normalized: if sd > 0.0 { (logs[i] - mean) / sd } else { 0.0 },
            quartile: quartile[i],
        })
        .collect())
}

/// Attention heads sized by quartile. `num_classes[task_id]` gives each
/// task's output size; the allocation is indexed by task id.
pub fn allocate(
    scores: &[ComplexityScore],
    num_classes: &[usize],
    cfg: &DypaConfig,
    d_backbone: usize,
) -> Result<HeadAllocation> {
    cfg.validate(d_backbone)?;
    let mut heads: Vec<Option<HeadConfig>> = vec![None; num_classes.len()];
    for s in scores {
        if !(1..=4).contains(&s.quartile) {
            return Err(Error::Config(format!("task {} has quartile {}", s.task_id, s.quartile)));
        }
        let slot = heads.get_mut(s.task_id).ok_or_else(|| {
            Error::Config(format!("score for unknown task {}", s.task_id))
        })?;
        let cfg = HeadConfig::attention(
            d_backbone,
            cfg.width(s.quartile),
            cfg.attn_heads,
            num_classes[s.task_id],
        );
        cfg.validate()?;
        *slot = Some(cfg);
    }
    let heads = heads
        .into_iter()
        .enumerate()
        .map(|(t, h)| h.ok_or_else(|| Error::Config(format!("task {t} has no complexity score"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(HeadAllocation { heads })
}

pub fn allocation_param_total(alloc: &HeadAllocation) -> usize {
    alloc.total_params()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::param_count;
    use proptest::prelude::*;

    fn stats(counts: &[usize]) -> Vec<TaskStats> {
        counts
            .iter()
            .enumerate()
            .map(|(i, &n)| TaskStats {
                task_id: i,
                train_examples: n,
                num_classes: 10,
            })
            .collect()
    }

    fn quartiles(counts: &[usize]) -> Vec<u8> {
        score_tasks(&stats(counts), ComplexitySource::ExampleCount)
            .unwrap()
            .iter()
            .map(|s| s.quartile)
            .collect()
    }

    #[test]
    fn four_tasks_one_per_quartile() {
        assert_eq!(quartiles(&[10, 20, 30, 40]), vec![1, 2, 3, 4]);
        assert_eq!(quartiles(&[40, 10, 30, 20]), vec![4, 1, 3, 2]);
    }

    #[test]
    fn eight_tasks_two_per_quartile() {
        let q = quartiles(&[5, 80, 3, 9, 100, 40, 7, 60]);
        for b in 1..=4 {
            assert_eq!(q.iter().filter(|&&x| x == b).count(), 2);
        }
    }

    #[test]
    fn ties_broken_by_task_id() {
        assert_eq!(quartiles(&[7, 7, 7, 7]), vec![1, 2, 3, 4]);
    }

    #[test]
    fn too_few_tasks() {
        let err = score_tasks(&stats(&[1, 2, 3]), ComplexitySource::ExampleCount);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn class_count_source() {
        let tasks: Vec<TaskStats> = [(100, 2), (10, 9), (50, 5), (20, 20)]
            .iter()
            .enumerate()
            .map(|(i, &(n, c))| TaskStats { task_id: i, train_examples: n, num_classes: c })
            .collect();
        let q: Vec<u8> = score_tasks(&tasks, ComplexitySource::ClassCount)
            .unwrap()
            .iter()
            .map(|s| s.quartile)
            .collect();
        assert_eq!(q, vec![1, 3, 2, 4]);
    }

    #[test]
    fn normalized_scores_are_z_scores_of_logs() {
        let s = score_tasks(&stats(&[1, 10, 100, 1000]), ComplexitySource::ExampleCount).unwrap();
        // ln values are evenly spaced: z = (-3,-1,1,3)/sqrt(5).
        let r5 = 5f64.sqrt();
        for (got, want) in s.iter().zip([-3.0 / r5, -1.0 / r5, 1.0 / r5, 3.0 / r5]) {
            assert!((got.normalized - want).abs() < 1e-12);
        }
    }

    #[test]
    fn width_ladders() {
        let cfg = DypaConfig::default();
        assert_eq!((1..=4).map(|q| cfg.width(q)).collect::<Vec<_>>(), vec![128, 256, 512, 1024]);
        let desk = DypaConfig { base_dt: 8, ..cfg };
        assert_eq!((1..=4).map(|q| desk.width(q)).collect::<Vec<_>>(), vec![8, 16, 32, 64]);
        let flat = DypaConfig { base_dt: 64, growth: 1, ..cfg };
        assert!((1..=4).all(|q| flat.width(q) == 64));
    }

    #[test]
    fn rejects_bad_configs() {
        let odd = DypaConfig { base_dt: 6, growth: 2, attn_heads: 4, ..Default::default() };
        assert!(odd.validate(64).is_err());
        let huge = DypaConfig { base_dt: 128, ..Default::default() };
        assert!(huge.validate(256).is_err());
        assert!(huge.validate(768).is_ok());
        let zero = DypaConfig { growth: 0, ..Default::default() };
        assert!(zero.validate(768).is_err());
    }

    fn hundred_task_alloc(cfg: &DypaConfig) -> HeadAllocation {
        let counts: Vec<usize> = (1..=100).collect();
        let scores = score_tasks(&stats(&counts), cfg.source).unwrap();
        allocate(&scores, &[10; 100], cfg, 768).unwrap()
    }

    #[test]
    fn hundred_task_totals() {
        let alloc = hundred_task_alloc(&DypaConfig::default());
        let pc = |dt| param_count(&HeadConfig::attention(768, dt, 2, 10));
        // Independent evaluation of each width's count.
        let by_hand = |dt: usize| 768 * dt + dt + 4 * (dt * dt + dt) + dt * 10 + 10;
        for dt in [128, 256, 512, 1024] {
            assert_eq!(pc(dt), by_hand(dt));
        }
        assert_eq!(pc(128), 165_770);
        assert_eq!(pc(1024), 4_996_106);
        let total = allocation_param_total(&alloc);
        assert_eq!(total, 25 * (pc(128) + pc(256) + pc(512) + pc(1024)));
        assert_eq!(total, 176_849_000);
        let fc_total = 100 * param_count(&HeadConfig::fc(768, 10));
        let ratio = total as f64 / fc_total as f64;
        assert!((ratio - 2.956).abs() < 1e-3, "{ratio}");
    }

    #[test]
    fn degenerate_allocations() {
        let flat = DypaConfig { base_dt: 64, growth: 1, ..Default::default() };
        let alloc = hundred_task_alloc(&flat);
        assert_eq!(
            allocation_param_total(&alloc),
            100 * param_count(&HeadConfig::attention(768, 64, 2, 10))
        );
        assert_eq!(allocation_param_total(&HeadAllocation::default()), 0);
    }

    #[test]
    fn missing_scores_rejected() {
        let scores = score_tasks(&stats(&[1, 2, 3, 4]), ComplexitySource::ExampleCount).unwrap();
        let cfg = DypaConfig { base_dt: 8, ..Default::default() };
        assert!(allocate(&scores, &[3; 5], &cfg, 32).is_err());
        assert!(allocate(&scores, &[3; 4], &cfg, 32).is_ok());
    }

    proptest! {
        #[test]
        fn quartiles_balanced_and_monotone(counts in prop::collection::vec(1usize..500, 4..60)) {
            let q = quartiles(&counts);
            let sizes: Vec<usize> = (1..=4).map(|b| q.iter().filter(|&&x| x == b).count()).collect();
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
            for i in 0..counts.len() {
                for j in 0..counts.len() {
                    if counts[i] < counts[j] {
                        prop_assert!(q[i] <= q[j]);
                    }
                }
            }
        }

        #[test]
        fn quartiles_invariant_under_monotone_maps(counts in prop::collection::vec(1usize..300, 4..40)) {
            let squared: Vec<usize> = counts.iter().map(|c| c * c).collect();
            let shifted: Vec<usize> = counts.iter().map(|c| 3 * c + 7).collect();
            prop_assert_eq!(quartiles(&counts), quartiles(&squared));
            prop_assert_eq!(quartiles(&counts), quartiles(&shifted));
        }

        #[test]
        fn widths_follow_quartiles(counts in prop::collection::vec(1usize..300, 4..40), growth in 1usize..3) {
            let cfg = DypaConfig { base_dt: 8, growth, attn_heads: 2, source: ComplexitySource::ExampleCount };
            let scores = score_tasks(&stats(&counts), cfg.source).unwrap();
            let alloc = allocate(&scores, &vec![4; counts.len()], &cfg, 64).unwrap();
            for s in &scores {
                prop_assert_eq!(alloc.heads[s.task_id].d_t, cfg.width(s.quartile));
            }
            let mut distinct: Vec<usize> = alloc.heads.iter().map(|h| h.d_t).collect();
            distinct.sort_unstable();
            distinct.dedup();
            prop_assert_eq!(distinct.len(), if growth > 1 { 4 } else { 1 });
        }
    }
}
