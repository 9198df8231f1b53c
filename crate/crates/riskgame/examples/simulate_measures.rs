//! Simulate the factor and wealth processes under the physical, market, and
//! fully tilted measures; verify the density martingale properties and the
//! change-of-measure identity E_P[D f(X_T)] = E_tilted[f(X_T)]; and watch a
//! stable two-factor model settle at its stationary mean under the MMM.
//!
//! ```bash
//! cargo run --release --example simulate_measures
//! ```

use std::path::Path;

use riskgame::model::{Model, STABILITY_TOL};
use riskgame::simulate::{
    estimate, run_paths, screen_paths, InvestorSpec, MarketSpec, Measure, SimContext,
    SimulationSpec,
};
use riskgame::{config, Result};

fn main() -> Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");

    // density martingale property on the correlated scalar model
    let cfg = config::load(&dir.join("correlated.json"))?;
    let model = Model::new(cfg.into_market_model()?)?;
    let spec = SimulationSpec::new(50_000, 250, 42, Measure::Physical);
    let ctx = SimContext::over_horizon(&model, &spec, &MarketSpec::Mmm, &InvestorSpec::Zero, None)?;
    let (paths, flagged) = screen_paths(run_paths(&ctx, spec.n_paths))?;
    let (mean, se) = estimate(&paths, |p| p.log_density_market.exp());
    println!("E[D(T)] = {mean:.6} +- {se:.6} (flagged {flagged}) -> martingale check {}",
        if (mean - 1.0).abs() <= 3.0 * se { "ok" } else { "FAIL" });

    // Girsanov identity: physical paths weighted by D vs tilted paths
    let tilted_spec = SimulationSpec::new(50_000, 250, 43, Measure::Market);
    let tilted_ctx =
        SimContext::over_horizon(&model, &tilted_spec, &MarketSpec::Mmm, &InvestorSpec::Zero, None)?;
    let (tilted_paths, _) = screen_paths(run_paths(&tilted_ctx, tilted_spec.n_paths))?;
    let (lhs, se_l) = estimate(&paths, |p| p.log_density_market.exp() * p.x_terminal[0]);
    let (rhs, se_r) = estimate(&tilted_paths, |p| p.x_terminal[0]);
    println!(
        "E_P[D X_T] = {lhs:.6} vs E_tilted[X_T] = {rhs:.6} (combined se {:.6})",
        (se_l * se_l + se_r * se_r).sqrt()
    );

    // stationary behavior of the stable two-factor model under the MMM
    let cfg = config::load(&dir.join("two_factor.json"))?;
    let model = Model::new(cfg.into_market_model()?)?;
    let stability = model.is_mmm_stable(STABILITY_TOL)?;
    let target = stability.stationary_mean.as_ref().expect("stable model");
    let spec = SimulationSpec::new(4000, 2500, 7, Measure::Market);
    let ctx = SimContext::over_horizon(&model, &spec, &MarketSpec::Mmm, &InvestorSpec::Zero, None)?;
    let (paths, flagged) = screen_paths(run_paths(&ctx, spec.n_paths))?;
    for i in 0..model.num_factors() {
        let (mean, se) = estimate(&paths, |p| p.x_terminal[i]);
        println!(
            "factor {i}: sample mean {mean:.5} +- {se:.5}, stationary mean {:.5}",
            target[i]
        );
    }
    println!("flagged paths: {flagged}");
    Ok(())
}
