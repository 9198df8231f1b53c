//! Load a model config, run every standing-assumption check, and inspect
//! the minimal-martingale-measure objects: the tilting controls, the tilted
//! factor drift matrix, its spectrum, and the stationary mean when stable.
//!
//! ```bash
//! cargo run --release --example validate_model
//! ```

use std::path::Path;

use riskgame::model::{validate_model, Model, STABILITY_TOL};
use riskgame::{config, Result};

fn main() -> Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    for name in ["scalar.json", "correlated.json", "two_factor.json"] {
        let cfg = config::load(&dir.join(name))?;
        let raw = cfg.into_market_model()?;
        println!("== {name} ==");
        let report = validate_model(&raw)?;
        for check in &report.checks {
            println!(
                "  [{}] {} = {:.6e} ({})",
                if check.pass { "ok" } else { "FAIL" },
                check.name,
                check.measured,
                check.detail
            );
        }

        let model = Model::new(raw)?;
        let (eta, xi) = model.mmm_controls(0.0)?;
        println!("  MMM eta (row 0): {:?}", eta.row(0).iter().collect::<Vec<_>>());
        println!("  MMM xi: {:?}", xi.iter().collect::<Vec<_>>());

        let stability = model.is_mmm_stable(STABILITY_TOL)?;
        println!(
            "  tilted drift eigenvalues: {:?}",
            stability
                .eigenvalues
                .iter()
                .map(|z| format!("{:.4}{:+.4}i", z.re, z.im))
                .collect::<Vec<_>>()
        );
        println!("  stable under the MMM: {}", stability.stable);
        if let Some(mean) = &stability.stationary_mean {
            println!("  stationary factor mean: {:?}", mean.iter().collect::<Vec<_>>());
        }
        println!();
    }
    Ok(())
}
