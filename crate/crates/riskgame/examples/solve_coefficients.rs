//! Integrate the backward system for the value coefficients Q(t), q(t),
//! k(t), check symmetry and equation residuals, and export the grids to
//! CSV. The value function of the worst-case game is
//! u(t,x) = 1/2 x'Q(t)x + q'(t)x + k(t).
//!
//! ```bash
//! cargo run --release --example solve_coefficients
//! ```

use std::path::Path;

use riskgame::coeffs::{k0_matrix, k1_matrix, solve_coefficients};
use riskgame::model::Model;
use riskgame::{config, Result};

fn main() -> Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let cfg = config::load(&dir.join("correlated.json"))?;
    let model = Model::new(cfg.into_market_model()?)?;

    println!("K0 = {}", k0_matrix(&model));
    println!(
        "K1 (any Q) = {}  <- equals the MMM drift matrix {}",
        k1_matrix(&model, &nalgebra::DMatrix::zeros(1, 1)),
        model.mmm_drift_matrix()
    );

    let coeffs = solve_coefficients(&model, 2000)?;
    let (q0, qv0, k0) = coeffs.node(0);
    println!("Q(0) = {}", q0);
    println!("q(0) = {}", qv0);
    println!("k(0) = {k0}");
    println!("max symmetry residual over grid: {:.3e}", coeffs.max_symmetry_residual());

    for &t in &[0.13, 0.5, 0.77] {
        let (rq, rqv, rk) = coeffs.ode_residual(&model, t)?;
        println!("equation residuals at t={t}: Q {rq:.3e}, q {rqv:.3e}, k {rk:.3e}");
    }

    let x = nalgebra::DVector::from_vec(vec![0.5]);
    println!(
        "u(0, x0) = {}  (riskless growth log v + int r = {})",
        coeffs.value_u(0.0, &x)?,
        model.initial_wealth().ln() + model.rate().integral(0.0, model.horizon())
    );

    let out = Path::new("out");
    std::fs::create_dir_all(out)?;
    let mut file = std::fs::File::create(out.join("coefficients.csv"))?;
    coeffs.write_csv(&mut file)?;
    println!("wrote out/coefficients.csv ({} grid rows)", coeffs.grid().len());
    Ok(())
}
