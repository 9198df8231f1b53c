//! Perturb both players around the saddle point with common random numbers:
//! investor deviations may only lower the tilted criterion, market
//! deviations may only raise it. At the no-regret equilibrium the market
//! side is exactly flat: holding only the riskless account makes the wealth
//! immune to the market's choice of measure.
//!
//! ```bash
//! cargo run --release --example saddle_probe
//! ```

use std::path::Path;
use std::sync::Arc;

use riskgame::coeffs::solve_coefficients;
use riskgame::game::{saddle_probe, ProbeSide, ProbeSpec};
use riskgame::model::Model;
use riskgame::simulate::{Measure, SimulationSpec};
use riskgame::{config, Result};

fn main() -> Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let cfg = config::load(&dir.join("correlated.json"))?;
    let model = Model::new(cfg.into_market_model()?)?;
    let coeffs = Arc::new(solve_coefficients(&model, 1000)?);

    let spec = SimulationSpec::new(5000, 200, 42, Measure::Market);
    let probe = ProbeSpec {
        n_directions: 6,
        epsilons: vec![0.05, 0.1, 0.2],
        direction_seed: 1234,
    };
    let report = saddle_probe(&model, &spec, &coeffs, &probe)?;

    println!(
        "equilibrium estimate {:.8} vs closed form {:.8}",
        report.equilibrium.estimate, report.equilibrium.closed_form
    );
    println!("side      dir  eps    diff            3*se_diff       violation");
    for row in &report.rows {
        println!(
            "{:<9} {:<4} {:<6} {:<15.6e} {:<15.6e} {}",
            match row.side {
                ProbeSide::Investor => "investor",
                ProbeSide::Market => "market",
            },
            row.direction,
            row.eps,
            row.diff,
            3.0 * row.se_diff,
            row.violation
        );
    }
    println!(
        "violations: {} / {} (empirical continuity constant max |diff|/eps = {:.3e})",
        report.violations,
        report.rows.len(),
        report.max_diff_over_eps
    );
    Ok(())
}
