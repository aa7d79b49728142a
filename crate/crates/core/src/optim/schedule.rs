use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleShape {
    /// Linear warmup, then cosine decay to zero at `total_steps`.
    WarmupCosine,
    /// Linear warmup, then constant.
    WarmupConstant,
}

impl FromStr for ScheduleShape {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "cosine" => Ok(ScheduleShape::WarmupCosine),
            "constant" => Ok(ScheduleShape::WarmupConstant),
            other => Err(Error::Config(format!("unknown schedule `{other}` (cosine|constant)"))),
        }
    }
}

impl fmt::Display for ScheduleShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleShape::WarmupCosine => "cosine",
            ScheduleShape::WarmupConstant => "constant",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub shape: ScheduleShape,
}

impl Schedule {
    pub fn constant(lr: f64) -> Self {
        Schedule {
            base_lr: lr,
            warmup_steps: 0,
            total_steps: 0,
            shape: ScheduleShape::WarmupConstant,
        }
    }

    /// Learning rate at zero-based step `t`.
    pub fn lr(&self, t: u64) -> f64 {
        if t < self.warmup_steps {
            return self.base_lr * t as f64 / self.warmup_steps as f64;
        }
        match self.shape {
            ScheduleShape::WarmupConstant => self.base_lr,
            ScheduleShape::WarmupCosine => {
                let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
                let progress = ((t - self.warmup_steps) as f64 / span as f64).min(1.0);
                self.base_lr * 0.5 * (1.0 + (PI * progress).cos())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine() -> Schedule {
        Schedule {
            base_lr: 1e-3,
            warmup_steps: 100,
            total_steps: 1000,
            shape: ScheduleShape::WarmupCosine,
        }
    }

    #[test]
    fn warmup_boundaries() {
        let s = cosine();
        assert_eq!(s.lr(0), 0.0);
        assert_eq!(s.lr(100), 1e-3);
        assert!((s.lr(99) - s.lr(100)).abs() < 1.1e-5);
        assert!((s.lr(101) - s.lr(100)).abs() < 1e-6);
    }

    #[test]
    fn cosine_is_nonincreasing_after_warmup() {
        let s = cosine();
        let mut prev = s.lr(100);
        for t in 101..=1200 {
            let lr = s.lr(t);
            assert!(lr <= prev);
            prev = lr;
        }
        assert!(s.lr(1000).abs() < 1e-18);
    }

    #[test]
    fn constant_after_warmup() {
        let s = Schedule {
            shape: ScheduleShape::WarmupConstant,
            ..cosine()
        };
        assert_eq!(s.lr(50), 5e-4);
        assert_eq!(s.lr(5000), 1e-3);
    }
}
