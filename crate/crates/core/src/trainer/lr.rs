//! Learning-rate strategies over training progress `p` in `[0, 1]`.
//!
//! Breakpoints are fractions of training, so the shapes rescale with the
//! epoch count. With the default rates and breakpoints at 4/15, 8/15, 12/15:
//!
//! - `fixed`: `low` throughout.
//! - `freeze_then_unfreeze`: `high` with the backbone frozen until the first
//!   breakpoint, then `low` and unfrozen.
//! - `warmup_step`: linear `low -> high` until the first breakpoint, `high`
//!   until the second, `low` until the third, then `low / decay`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrKind {
    Fixed,
    FreezeThenUnfreeze,
    WarmupStep,
}

impl fmt::Display for LrKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fixed => "fixed",
            Self::FreezeThenUnfreeze => "freeze_then_unfreeze",
            Self::WarmupStep => "warmup_step",
        })
    }
}

impl FromStr for LrKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "freeze_then_unfreeze" | "freeze" => Ok(Self::FreezeThenUnfreeze),
            "warmup_step" | "warmup" => Ok(Self::WarmupStep),
            other => Err(Error::Config(format!("unknown lr policy `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrPolicy {
    pub kind: LrKind,
    pub low: f64,
    pub high: f64,
    /// Divisor applied to `low` after the last breakpoint.
    pub decay: f64,
    pub breakpoints: [f64; 3],
}

impl Default for LrPolicy {
    fn default() -> Self {
        Self {
            kind: LrKind::WarmupStep,
            low: 1e-5,
            high: 1e-4,
            decay: 10.0,
            breakpoints: [4.0 / 15.0, 8.0 / 15.0, 12.0 / 15.0],
        }
    }
}

impl LrPolicy {
    pub fn with_kind(kind: LrKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [a, b, c] = self.breakpoints;
        if !(0.0 < a && a < b && b < c && c < 1.0) {
            return Err(Error::Config(format!(
                "lr breakpoints {:?} not strictly increasing in (0, 1)",
                self.breakpoints
            )));
        }
        let positive = |x: f64| x > 0.0 && x.is_finite();
        if !(positive(self.low) && positive(self.high) && self.decay >= 1.0 && self.decay.is_finite()) {
            return Err(Error::Config(format!(
                "lr rates low={} high={} decay={} invalid",
                self.low, self.high, self.decay
            )));
        }
        Ok(())
    }

    /// Learning rate and whether the backbone is frozen at progress `p`.
    pub fn lr_at(&self, p: f64) -> Result<(f64, bool)> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Progress(p));
        }
        let [b1, b2, b3] = self.breakpoints;
        Ok(match self.kind {
            LrKind::Fixed => (self.low, false),
            LrKind::FreezeThenUnfreeze if p < b1 => (self.high, true),
            LrKind::FreezeThenUnfreeze => (self.low, false),
            LrKind::WarmupStep if p < b1 => (self.low + (self.high - self.low) * p / b1, false),
            LrKind::WarmupStep if p < b2 => (self.high, false),
            LrKind::WarmupStep if p < b3 => (self.low, false),
            LrKind::WarmupStep => (self.low / self.decay, false),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs().max(1e-300)
    }

    #[test]
    fn warmup_step_values() {
        let p = LrPolicy::with_kind(LrKind::WarmupStep);
        assert!(close(p.lr_at(0.0).unwrap().0, 1e-5));
        assert!(close(p.lr_at(4.0 / 15.0).unwrap().0, 1e-4));
        assert!(close(p.lr_at(2.0 / 15.0).unwrap().0, 5.5e-5));
        assert!(close(p.lr_at(9.0 / 15.0).unwrap().0, 1e-5));
        assert!(close(p.lr_at(13.0 / 15.0).unwrap().0, 1e-6));
        assert!(close(p.lr_at(1.0).unwrap().0, 1e-6));
        assert!(!p.lr_at(0.1).unwrap().1);
    }

    #[test]
    fn freeze_values() {
        let p = LrPolicy::with_kind(LrKind::FreezeThenUnfreeze);
        assert_eq!(p.lr_at(0.1).unwrap(), (1e-4, true));
        assert_eq!(p.lr_at(0.5).unwrap(), (1e-5, false));
        assert_eq!(p.lr_at(4.0 / 15.0).unwrap(), (1e-5, false));
    }

    #[test]
    fn fixed_values() {
        let p = LrPolicy::with_kind(LrKind::Fixed);
        for x in [0.0, 0.3, 1.0] {
            assert_eq!(p.lr_at(x).unwrap(), (1e-5, false));
        }
    }

    #[test]
    fn progress_checked() {
        let p = LrPolicy::default();
        assert!(matches!(p.lr_at(-0.01), Err(Error::Progress(_))));
        assert!(matches!(p.lr_at(1.01), Err(Error::Progress(_))));
        assert!(p.lr_at(f64::NAN).is_err());
    }

    #[test]
    fn breakpoints_validated() {
        let mut p = LrPolicy::default();
        assert!(p.validate().is_ok());
        p.breakpoints = [0.5, 0.4, 0.8];
        assert!(p.validate().is_err());
        p.breakpoints = [0.0, 0.4, 0.8];
        assert!(p.validate().is_err());
        p.breakpoints = [0.2, 0.4, 1.0];
        assert!(p.validate().is_err());
    }

    #[test]
    fn rescaling_breakpoints() {
        let p = LrPolicy { breakpoints: [0.2, 0.5, 0.7], ..LrPolicy::default() };
        assert!(close(p.lr_at(0.2).unwrap().0, 1e-4));
        assert!(close(p.lr_at(0.6).unwrap().0, 1e-5));
    }
}
