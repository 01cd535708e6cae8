//! Gradual freezing of the up-projection `B`.
//!
//! Rows freeze from the last one to the first, so row 0 (the component
//! with the largest singular value) stays trainable longest. The number of
//! live rows ramps linearly from `r` to zero over the first `t_i`
//! iterations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the linear ramp is turned into an integer row count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleRule {
    /// Ramp sampled at the iteration midpoint, rounded half-to-even:
    /// `round(r · (t_i − t − ½) / t_i)`. Summed over the horizon it is
    /// within half a row of `r · t_i / 2`.
    #[default]
    Linear,
    /// `floor(r · (1 − t / t_i))`.
    Floor,
    /// `int(r − t / t_i)`: drops by at most one row over the horizon.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreezeSchedule {
    pub rank: usize,
    pub horizon: usize,
    pub total_iters: usize,
    pub rule: ScheduleRule,
}

impl FreezeSchedule {
    pub fn new(rank: usize, horizon: usize, total_iters: usize) -> Result<Self> {
        FreezeSchedule::with_rule(rank, horizon, total_iters, ScheduleRule::Linear)
    }

    pub fn with_rule(
        rank: usize,
        horizon: usize,
        total_iters: usize,
        rule: ScheduleRule,
    ) -> Result<Self> {
        if horizon > total_iters {
            return Err(Error::config(format!(
                "freeze horizon {horizon} exceeds total iterations {total_iters}"
            )));
        }
        Ok(FreezeSchedule {
            rank,
            horizon,
            total_iters,
            rule,
        })
    }

    /// Horizon from a fraction of the total iterations, rounded to the
    /// nearest iteration.
    pub fn from_fraction(rank: usize, fraction: f64, total_iters: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::config(format!(
                "freeze fraction {fraction} outside [0, 1]"
            )));
        }
        let horizon = (fraction * total_iters as f64).round() as usize;
        FreezeSchedule::new(rank, horizon, total_iters)
    }

    /// Trainable rows of `B` during iteration `t`.
    pub fn trainable_rows(&self, t: usize) -> Result<usize> {
        if t > self.total_iters {
            return Err(Error::Contract(format!(
                "iteration {t} beyond total {}",
                self.total_iters
            )));
        }
        if self.horizon == 0 || t >= self.horizon {
            return Ok(0);
        }
        let (r, t, ti) = (self.rank as u128, t as u128, self.horizon as u128);
        let rows = match self.rule {
            ScheduleRule::Linear => {
                // r(2ti − 2t − 1) / 2ti, half-to-even
                let num = r * (2 * ti - 2 * t - 1);
                let den = 2 * ti;
                let (q, rem) = (num / den, num % den);
                match (2 * rem).cmp(&den) {
                    std::cmp::Ordering::Less => q,
                    std::cmp::Ordering::Greater => q + 1,
                    std::cmp::Ordering::Equal => q + (q & 1),
                }
            }
            ScheduleRule::Floor => r * (ti - t) / ti,
            ScheduleRule::Literal => {
                // int() truncates toward zero; r − t/ti ≥ r − 1 here.
                (r * ti).saturating_sub(t) / ti
            }
        };
        Ok(rows as usize)
    }

    /// Mean of `trainable_rows` over iterations `0..total_iters`.
    pub fn mean_trainable_rows(&self) -> f64 {
        if self.total_iters == 0 {
            return 0.0;
        }
        let sum: usize = (0..self.total_iters)
            .map(|t| self.trainable_rows(t).expect("t within range"))
            .sum();
        sum as f64 / self.total_iters as f64
    }
}

/// Order in which rows of `B` freeze: last row first.
pub fn freeze_order(rank: usize) -> Vec<usize> {
    (0..rank).rev().collect()
}

/// Rows that freeze when the live count drops from `from` to `to`.
pub fn rows_frozen_between(from: usize, to: usize) -> std::ops::Range<usize> {
    to.min(from)..from
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = FreezeSchedule::new(32, 300, 1000).unwrap();
        assert_eq!(s.trainable_rows(0).unwrap(), 32);
        assert_eq!(s.trainable_rows(150).unwrap(), 16);
        assert_eq!(s.trainable_rows(300).unwrap(), 0);
        assert_eq!(s.trainable_rows(1000).unwrap(), 0);
        assert!(s.trainable_rows(1001).is_err());
    }

    #[test]
    fn floor_rule_matches_formula() {
        let s = FreezeSchedule::with_rule(32, 300, 1000, ScheduleRule::Floor).unwrap();
        for t in 0..300 {
            let expect = (32.0 * (1.0 - t as f64 / 300.0)).floor() as usize;
            assert_eq!(s.trainable_rows(t).unwrap(), expect);
        }
    }

    #[test]
    fn literal_rule_barely_moves() {
        let s = FreezeSchedule::with_rule(32, 300, 1000, ScheduleRule::Literal).unwrap();
        assert_eq!(s.trainable_rows(0).unwrap(), 32);
        assert_eq!(s.trainable_rows(1).unwrap(), 31);
        assert_eq!(s.trainable_rows(299).unwrap(), 31);
        assert_eq!(s.trainable_rows(300).unwrap(), 0);
    }

    #[test]
    fn zero_horizon_is_lda_only() {
        let s = FreezeSchedule::new(8, 0, 100).unwrap();
        assert!((0..=100).all(|t| s.trainable_rows(t).unwrap() == 0));
    }

    #[test]
    fn horizon_beyond_total_rejected() {
        assert!(FreezeSchedule::new(8, 101, 100).is_err());
        assert!(FreezeSchedule::from_fraction(8, 1.5, 100).is_err());
    }

    #[test]
    fn linear_rule_time_average_is_half_rank() {
        for &(r, ti) in &[(8usize, 600usize), (32, 300), (5, 7), (1, 1), (7, 1000)] {
            let s = FreezeSchedule::new(r, ti, ti).unwrap();
            let sum: usize = (0..ti).map(|t| s.trainable_rows(t).unwrap()).sum();
            assert!((2 * sum).abs_diff(r * ti) <= 1, "r={r} ti={ti}");
        }
    }

    #[test]
    fn order() {
        assert_eq!(freeze_order(3), vec![2, 1, 0]);
        assert_eq!(freeze_order(1), vec![0]);
        assert_eq!(rows_frozen_between(8, 5), 5..8);
    }
}
