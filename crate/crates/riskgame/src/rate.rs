use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Deterministic riskless rate r(t), piecewise constant on a declared grid.
///
/// `values[i]` applies on the interval `(grid[i], grid[i+1]]` (left-continuous
/// convention); `r(grid[0]) = values[0]`. The last value extends to the
/// horizon. This representation integrates exactly, which the coefficient
/// solver and the wealth simulation both rely on.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RateSchedule {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

impl RateSchedule {
    pub fn constant(r: f64) -> Self {
        Self {
            grid: vec![0.0],
            values: vec![r],
        }
    }

    pub fn new(grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if grid.is_empty() || grid.len() != values.len() {
            return Err(Error::Config(format!(
                "rate schedule needs equal-length non-empty grid/values, got {}/{}",
                grid.len(),
                values.len()
            )));
        }
        if grid[0] != 0.0 {
            return Err(Error::Config("rate grid must start at t = 0".into()));
        }
        if grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("rate grid must be strictly increasing".into()));
        }
        if grid.iter().chain(values.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Config("rate schedule contains non-finite entries".into()));
        }
        Ok(Self { grid, values })
    }

    /// Rate at time `t`.
    pub fn at(&self, t: f64) -> f64 {
        // partition_point returns the first index with grid[i] >= t; the
        // left-continuous segment owning t is the one before it.
        let idx = self.grid.partition_point(|&g| g < t);
        self.values[idx.saturating_sub(1).min(self.values.len() - 1)]
    }

    /// Exact integral of r over [t0, t1] (t0 <= t1).
    pub fn integral(&self, t0: f64, t1: f64) -> f64 {
        debug_assert!(t1 >= t0);
        let mut total = 0.0;
        for (i, &v) in self.values.iter().enumerate() {
            let seg_start = self.grid[i];
            let seg_end = self.grid.get(i + 1).copied().unwrap_or(f64::INFINITY);
            let lo = seg_start.max(t0);
            let hi = seg_end.min(t1);
            if hi > lo {
                total += v * (hi - lo);
            }
        }
        total
    }
}
