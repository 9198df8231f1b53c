//! Build the saddle-point strategies from solved coefficients and classify
//! the equilibrium: is the market's measure the minimal martingale measure,
//! and is the investor's strategy the no-regret (riskless-only) allocation?
//! Also sweeps the verification-lemma conditions on sampled states.
//!
//! ```bash
//! cargo run --release --example classify_equilibrium
//! ```

use std::path::Path;
use std::sync::Arc;

use nalgebra::DVector;
use riskgame::coeffs::solve_coefficients;
use riskgame::equilibrium::{
    classify_equilibrium, optimal_h, optimal_market_controls, verification_conditions, SampleSpec,
    StrategyPair,
};
use riskgame::model::Model;
use riskgame::{config, Result};

fn main() -> Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    for name in ["scalar.json", "correlated.json"] {
        let cfg = config::load(&dir.join(name))?;
        let model = Model::new(cfg.into_market_model()?)?;
        let coeffs = Arc::new(solve_coefficients(&model, 2000)?);
        println!("== {name} ==");

        let x = DVector::from_vec(vec![0.5]);
        let h = optimal_h(&coeffs, &model, 0.0, &x)?;
        let (eta, xi) = optimal_market_controls(&coeffs, &model, 0.0)?;
        let (eta_mmm, xi_mmm) = model.mmm_controls(0.0)?;
        println!("  investor control at (0, 0.5): {:?}", h.iter().collect::<Vec<_>>());
        println!("  |eta_hat - eta_mmm| = {:.3e}", (eta - eta_mmm).norm());
        println!("  |xi_hat - xi_mmm|  = {:.3e}", (xi - xi_mmm).norm());

        let pair = StrategyPair::new(coeffs.clone());
        let sub = pair.substitution_residual(&model, 0.4, &x)?;
        println!("  substitution identity residual at (0.4, 0.5): {sub:.3e}");

        let diag = classify_equilibrium(&coeffs, &model, 1e-7)?;
        println!(
            "  is_mmm={} is_no_regret={} (max |h| = {:.3e}, max |h'Sigma| = {:.3e})",
            diag.is_mmm, diag.is_no_regret, diag.max_h_norm, diag.max_h_sigma_norm
        );

        let cond = verification_conditions(&coeffs, &model, &SampleSpec::quick(&model))?;
        println!("  HJB residual at the saddle: {:.3e}", cond.hjb_residual_max);
        println!("  investor-side max operator: {:.3e}", cond.investor_max_operator);
        println!("  market-side max |operator|: {:.3e}", cond.market_max_abs_operator);
        println!("  h-gradient at the saddle:   {:.3e}", cond.h_gradient_max);
        println!();
    }
    Ok(())
}
