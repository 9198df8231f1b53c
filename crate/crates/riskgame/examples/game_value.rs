//! Estimate the game criteria by Monte Carlo and compare with the closed
//! form 1/2 x0'Q(0)x0 + q'(0)x0 + k(0): the tilted criterion at the saddle
//! point, the physical-measure criterion, the exponentially transformed
//! criterion with its riskless bound, and the density certificate behind
//! the value representation.
//!
//! ```bash
//! cargo run --release --example game_value
//! ```

use std::path::Path;
use std::sync::Arc;

use riskgame::coeffs::solve_coefficients;
use riskgame::game::{
    closed_form_value, combined_density_check, criterion_j, criterion_j_tilde, u_tilde_estimate,
    BoundStatus,
};
use riskgame::model::Model;
use riskgame::simulate::{InvestorSpec, MarketSpec, Measure, SimulationSpec};
use riskgame::{config, Result};

fn main() -> Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let cfg = config::load(&dir.join("correlated.json"))?;
    let model = Model::new(cfg.into_market_model()?)?;
    let coeffs = Arc::new(solve_coefficients(&model, 2000)?);
    let closed = closed_form_value(&coeffs, &model)?;
    println!("closed-form game value u(0, x0) = {closed}");

    let spec = SimulationSpec::new(100_000, 500, 42, Measure::Market);
    let investor = InvestorSpec::Equilibrium(coeffs.clone());
    let market = MarketSpec::Equilibrium(coeffs.clone());

    let jt = criterion_j_tilde(&model, &spec, &investor, &market, closed)?;
    println!(
        "tilted criterion at the saddle: {:.10} +- {:.2e} (z = {:.2}) {}",
        jt.estimate,
        jt.std_error,
        jt.z_score,
        if jt.pass_3se { "ok" } else { "FAIL" }
    );

    let j = criterion_j(&model, &spec, &investor, closed)?;
    println!(
        "physical-measure criterion:      {:.10} +- {:.2e} (z = {:.2}) {}",
        j.estimate,
        j.std_error,
        j.z_score,
        if j.pass_3se { "ok" } else { "FAIL" }
    );

    let ut = u_tilde_estimate(&model, &spec, &investor, &market, &coeffs, 0.0, model.x0())?;
    println!(
        "transformed criterion: {:.10} (closed form {:.10}, riskless bound {:.10})",
        ut.estimate, ut.closed_form, ut.upper_bound
    );
    println!(
        "bound status: {}",
        match ut.bound_status {
            BoundStatus::StrictlyInside => "strictly inside (0, bound)",
            BoundStatus::AttainedAtNoRegret =>
                "attained: the no-regret strategy is optimal, so the bounding policy is not suboptimal",
            BoundStatus::Violated => "VIOLATED",
        }
    );

    let density = combined_density_check(&model, &spec, &coeffs, &investor, &market)?;
    println!(
        "combined density mean = {} +- {:.2e} (flagged {}) {}",
        density.mean,
        density.std_error,
        density.flagged,
        if density.pass { "ok" } else { "FAIL" }
    );
    Ok(())
}
