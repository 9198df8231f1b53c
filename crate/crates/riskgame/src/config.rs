//! Model and run configuration, read from a JSON file.
//!
//! Top-level model keys: `m, n, a, A, b, B, Sigma, Lambda, theta, T, v, x0,
//! rate {grid, values}`; matrices are row-major arrays of arrays. An
//! optional `run` section carries the numeric options shared by the
//! subcommands. Malformed input is rejected with a field-precise message.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MarketModel;
use crate::rate::RateSchedule;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateConfig {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

/// Numeric options for a pipeline run; every field has a documented default
/// and can be overridden per-run from the command line.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Backward integration steps for the coefficient solver.
    pub steps: usize,
    /// Monte Carlo path count.
    pub paths: usize,
    /// Simulation step count per path.
    pub sim_steps: usize,
    /// Base seed; path i uses substream (seed, i).
    pub seed: u64,
    /// Classification tolerance on the MMM residual norms.
    pub tol: f64,
    /// Output directory for CSV artifacts.
    pub out: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            paths: 10_000,
            sim_steps: 500,
            seed: 42,
            tol: 1e-7,
            out: "out".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub m: usize,
    pub n: usize,
    pub a: Vec<f64>,
    #[serde(rename = "A")]
    pub a_loading: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    #[serde(rename = "B")]
    pub b_feedback: Vec<Vec<f64>>,
    #[serde(rename = "Sigma")]
    pub sigma: Vec<Vec<f64>>,
    #[serde(rename = "Lambda")]
    pub lambda: Vec<Vec<f64>>,
    pub theta: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub v: f64,
    pub x0: Vec<f64>,
    pub rate: RateConfig,
    #[serde(default)]
    pub run: Option<RunConfig>,
}

fn matrix_from_rows(field: &'static str, rows: &[Vec<f64>], ncols: usize) -> Result<DMatrix<f64>> {
    for (i, row) in rows.iter().enumerate() {
        if row.len() != ncols {
            return Err(Error::Config(format!(
                "field `{field}` row {i} has length {}, expected {ncols}",
                row.len()
            )));
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config(format!(
                "field `{field}` row {i} contains a non-finite value"
            )));
        }
    }
    let flat: Vec<f64> = rows.iter().flatten().cloned().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

fn vector(field: &'static str, data: &[f64], len: usize) -> Result<DVector<f64>> {
    if data.len() != len {
        return Err(Error::Config(format!(
            "field `{field}` has length {}, expected {len}",
            data.len()
        )));
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::Config(format!(
            "field `{field}` contains a non-finite value"
        )));
    }
    Ok(DVector::from_column_slice(data))
}

impl ModelConfig {
    pub fn into_market_model(&self) -> Result<MarketModel> {
        let (m, n) = (self.m, self.n);
        if self.a_loading.len() != m {
            return Err(Error::Config(format!(
                "field `A` has {} rows, expected {m}",
                self.a_loading.len()
            )));
        }
        if self.b_feedback.len() != n {
            return Err(Error::Config(format!(
                "field `B` has {} rows, expected {n}",
                self.b_feedback.len()
            )));
        }
        if self.sigma.len() != m {
            return Err(Error::Config(format!(
                "field `Sigma` has {} rows, expected {m}",
                self.sigma.len()
            )));
        }
        if self.lambda.len() != n {
            return Err(Error::Config(format!(
                "field `Lambda` has {} rows, expected {n}",
                self.lambda.len()
            )));
        }
        Ok(MarketModel {
            num_assets: m,
            num_factors: n,
            drift_base: vector("a", &self.a, m)?,
            drift_loading: matrix_from_rows("A", &self.a_loading, n)?,
            factor_base: vector("b", &self.b, n)?,
            factor_feedback: matrix_from_rows("B", &self.b_feedback, n)?,
            asset_vol: matrix_from_rows("Sigma", &self.sigma, n + m)?,
            factor_vol: matrix_from_rows("Lambda", &self.lambda, n + m)?,
            rate: RateSchedule::new(self.rate.grid.clone(), self.rate.values.clone())?,
            theta: self.theta,
            horizon: self.horizon,
            initial_wealth: self.v,
            x0: vector("x0", &self.x0, n)?,
        })
    }
}

/// Parses a config file; serde errors carry line/column positions.
pub fn load(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse(&text)
}

pub fn parse(text: &str) -> Result<ModelConfig> {
    serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
}
