//! Task sampling for single-task batches.
//!
//! Each batch comes from one task drawn with probability
//! `N_T^alpha / sum_t N_t^alpha`, where `alpha` follows a decay schedule
//! over training progress. `alpha = 1` samples proportionally to data size,
//! `alpha = 0` uniformly.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    Linear,
    Exponential,
    Cosine,
    Demon,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 5] = [
        ScheduleKind::Constant,
        ScheduleKind::Linear,
        ScheduleKind::Exponential,
        ScheduleKind::Cosine,
        ScheduleKind::Demon,
    ];
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ScheduleKind::Constant => "constant",
            ScheduleKind::Linear => "linear",
            ScheduleKind::Exponential => "exponential",
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Demon => "demon",
        };
        f.write_str(s)
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "linear" => Ok(Self::Linear),
            "exponential" => Ok(Self::Exponential),
            "cosine" => Ok(Self::Cosine),
            "demon" => Ok(Self::Demon),
            other => Err(Error::Config(format!("unknown schedule kind `{other}`"))),
        }
    }
}

/// Decay of the sampling exponent from `alpha_start` (p = 0) to
/// `alpha_end` (p = 1). Every kind hits both endpoints exactly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    pub kind: ScheduleKind,
    pub alpha_start: f64,
    pub alpha_end: f64,
    /// Rate `c` of the exponential kind.
    pub exp_rate: f64,
    /// Reference momentum of the Demon kind, in (0, 1).
    pub demon_ref: f64,
}

impl Default for AlphaSchedule {
    /// Exponential decay 1.0 -> 0.1.
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Exponential,
            alpha_start: 1.0,
            alpha_end: 0.1,
            exp_rate: 5.0,
            demon_ref: 0.9,
        }
    }
}

impl AlphaSchedule {
    pub fn constant(alpha: f64) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            alpha_start: alpha,
            alpha_end: alpha,
            ..Self::default()
        }
    }

    pub fn decay(kind: ScheduleKind, alpha_start: f64, alpha_end: f64) -> Self {
        Self {
            kind,
            alpha_start,
            alpha_end,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.alpha_start) || !unit.contains(&self.alpha_end) {
            return Err(Error::Config(format!(
                "alpha range {} -> {} outside [0, 1]",
                self.alpha_start, self.alpha_end
            )));
        }
        if self.kind == ScheduleKind::Constant && self.alpha_start != self.alpha_end {
            return Err(Error::Config(format!(
                "constant schedule needs alpha_start == alpha_end, got {} and {}",
                self.alpha_start, self.alpha_end
            )));
        }
        if self.kind != ScheduleKind::Constant && self.alpha_start < self.alpha_end {
            return Err(Error::Config(format!(
                "alpha schedule must decay: start {} < end {}",
                self.alpha_start, self.alpha_end
            )));
        }
        if self.kind == ScheduleKind::Exponential && !(self.exp_rate > 0.0) {
            return Err(Error::Config("exponential rate must be positive".into()));
        }
        if self.kind == ScheduleKind::Demon && !(self.demon_ref > 0.0 && self.demon_ref < 1.0) {
            return Err(Error::Config("demon reference must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// The exponent at training progress `p`.
    pub fn alpha_at(&self, p: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Progress(p));
        }
        let (start, end) = (self.alpha_start, self.alpha_end);
        let span = start - end;
        let alpha = match self.kind {
            ScheduleKind::Constant => return Ok(start),
            ScheduleKind::Linear => start + (end - start) * p,
            ScheduleKind::Cosine => end + span * (1.0 + (PI * p).cos()) / 2.0,
            ScheduleKind::Exponential => {
                let c = self.exp_rate;
                let floor = (-c).exp();
                end + span * ((-c * p).exp() - floor) / (1.0 - floor)
            }
            ScheduleKind::Demon => {
                let b = self.demon_ref;
                let rest = 1.0 - p;
                end + span * rest / ((1.0 - b) + b * rest)
            }
        };
        // Pin the endpoints against rounding in the closed forms.
        Ok(if p == 0.0 {
            start
        } else if p == 1.0 {
            end
        } else {
            alpha
        })
    }
}

/// `P(T) = N_T^alpha / sum_t N_t^alpha`.
pub fn task_distribution(sizes: &[usize], alpha: f64) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::Config("task distribution over no tasks".into()));
    }
    if let Some(pos) = sizes.iter().position(|&n| n == 0) {
        return Err(Error::Config(format!("task {pos} has no training examples")));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    // Normalize by the largest size first; N^alpha is homogeneous, so this
    // leaves the result unchanged while keeping powers in range.
    let max = *sizes.iter().max().expect("non-empty") as f64;
    let weights: Vec<f64> = sizes
        .iter()
        .map(|&n| if alpha == 0.0 { 1.0 } else { (n as f64 / max).powf(alpha) })
        .collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Stateful per-run sampler: schedule, repetition count `k`, RNG.
#[derive(Clone, Debug)]
pub struct SamplingPolicy {
    pub schedule: AlphaSchedule,
    pub repetition: usize,
    rng: ChaCha8Rng,
    current: Option<usize>,
    cache: Option<(u64, Vec<f64>)>,
}

impl SamplingPolicy {
    pub fn new(schedule: AlphaSchedule, repetition: usize, seed: u64) -> Result<Self> {
        schedule.validate()?;
        if repetition == 0 {
            return Err(Error::Config("repetition k must be at least 1".into()));
        }
        Ok(Self {
            schedule,
            repetition,
            rng: ChaCha8Rng::seed_from_u64(seed),
            current: None,
            cache: None,
        })
    }

    pub fn progress(iteration: usize, total_iterations: usize) -> Result<f64> {
        if total_iterations == 0 {
            return Err(Error::Config("total iterations must be at least 1".into()));
        }
        if iteration > total_iterations {
            return Err(Error::Progress(iteration as f64 / total_iterations as f64));
        }
        Ok(iteration as f64 / total_iterations as f64)
    }

    /// Task for `iteration` (0-based). A fresh draw happens when
    /// `iteration % k == 0`; otherwise the previous task repeats.
    pub fn next_task(
        &mut self,
        sizes: &[usize],
        iteration: usize,
        total_iterations: usize,
    ) -> Result<usize> {
        let p = Self::progress(iteration, total_iterations)?;
        if iteration >= total_iterations {
            return Err(Error::Progress(p));
        }
        if iteration % self.repetition != 0 {
            if let Some(t) = self.current {
                return Ok(t);
            }
        }
        let alpha = self.schedule.alpha_at(p)?;
        let task = self.draw(sizes, alpha)?;
        self.current = Some(task);
        Ok(task)
    }

    /// One draw from `task_distribution(sizes, alpha)` by inverse CDF.
    pub fn draw(&mut self, sizes: &[usize], alpha: f64) -> Result<usize> {
        let key = alpha.to_bits();
        let cdf = match &self.cache {
            Some((k, cdf)) if *k == key && cdf.len() == sizes.len() => cdf,
            _ => {
                let probs = task_distribution(sizes, alpha)?;
                let mut acc = 0.0;
                let cdf = probs
                    .iter()
                    .map(|p| {
                        acc += p;
                        acc
                    })
                    .collect();
                self.cache = Some((key, cdf));
                &self.cache.as_ref().expect("just set").1
            }
        };
        let u: f64 = self.rng.random();
        let idx = cdf.partition_point(|&c| c <= u);
        Ok(idx.min(cdf.len() - 1))
    }
}
