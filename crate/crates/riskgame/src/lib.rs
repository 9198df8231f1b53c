//! Risk-sensitive asset management as a worst-case (zero-sum) market game.
//!
//! An investor allocates wealth across m risky securities and a riskless
//! account while an adversarial market picks an equivalent probability
//! measure through deterministic Girsanov shifts of the driving Brownian
//! motion. This crate solves the coupled Riccati/linear/scalar backward
//! system for the quadratic value function of the game, constructs the
//! saddle-point strategies of both players, detects when the market's
//! equilibrium measure is the Föllmer-Schweizer minimal martingale measure,
//! and verifies the theory numerically: HJB residuals, density martingale
//! checks, game-value Monte Carlo, saddle probes, and a pathwise Itô
//! identity.
//!
//! Start from the runnable examples (`cargo run --release --example ...`):
//! each one demonstrates a major capability end to end. The `riskgame`
//! binary exposes the same pipeline as batch subcommands
//! (`solve | verify | simulate | value | probe | report`).

pub mod coeffs;
pub mod config;
pub mod equilibrium;
pub mod error;
pub mod game;
pub mod linalg;
pub mod model;
pub mod ode;
pub mod rate;
pub mod report;
pub mod simulate;

pub mod cli;

pub use error::{Error, Result};
pub use model::{validate_model, MarketModel, Model};
