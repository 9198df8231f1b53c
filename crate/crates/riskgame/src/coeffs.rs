//! Backward solver for the value-function coefficients.
//!
//! The quadratic value ansatz u(t,x) = 1/2 x'Q(t)x + q'(t)x + k(t) closes the
//! worst-case game once the market's equilibrium controls are substituted
//! self-consistently: Q solves a symmetric matrix Riccati equation, q a
//! linear ODE, k a scalar quadrature. All three are integrated together,
//! backward from the terminal data Q(T) = 0, q(T) = 0, k(T) = log v, with a
//! fixed-step fourth-order scheme (no adaptivity, reproducible output).

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::Model;
use crate::ode::{self, OdeSolution};
use crate::report::fmt_f64;

/// Quadratic-term coefficient of the Riccati equation:
/// K0 = (theta/2) Λ (I - ((theta-2)/theta) Σ'(ΣΣ')⁻¹Σ) Λ'.
pub fn k0_matrix(model: &Model) -> DMatrix<f64> {
    let theta = model.theta();
    let lam_sig_t = model.sigma_lambda_t().transpose(); // ΛΣ' (n x m)
    let projected = &lam_sig_t * model.gram().solve(model.sigma_lambda_t()); // ΛΣ'(ΣΣ')⁻¹ΣΛ'
    let mut k0 = model.lambda_gram() * (theta / 2.0) - projected * ((theta - 2.0) / 2.0);
    linalg::symmetrize(&mut k0);
    k0
}

/// Linear-term coefficient of the Riccati equation with the equilibrium
/// market control substituted:
/// K1 = B - Λ η̂' - ΛΣ'(ΣΣ')⁻¹A + ΛΣ'(ΣΣ')⁻¹Σ η̂',   η̂' = Σ'(ΣΣ')⁻¹(ΣΛ'Q + A).
///
/// Because η̂' has all columns in the range of Σ', the η̂ terms cancel and the
/// result equals the MMM drift matrix B - ΛΣ'(ΣΣ')⁻¹A for every Q; the
/// expression is still evaluated term by term so the cancellation is a
/// checked property rather than an assumption.
pub fn k1_matrix(model: &Model, q_mat: &DMatrix<f64>) -> DMatrix<f64> {
    let p = model.params();
    let lam_sig_t = model.sigma_lambda_t().transpose(); // ΛΣ' (n x m)
    let inner = model.sigma_lambda_t() * q_mat + &p.drift_loading; // ΣΛ'Q + A (m x n)
    let eta_hat_t = p.asset_vol.transpose() * model.gram().solve(&inner); // (n+m) x n
    let lam_eta = &p.factor_vol * &eta_hat_t;
    let lam_proj_a = &lam_sig_t * model.gram().solve(&p.drift_loading);
    let lam_proj_eta = &lam_sig_t * model.gram().solve(&(&p.asset_vol * &eta_hat_t));
    &p.factor_feedback - lam_eta - lam_proj_a + lam_proj_eta
}

/// Equilibrium xi as a column vector: ξ̂' = Σ'(ΣΣ')⁻¹((a - r 1) + ΣΛ'q).
fn xi_hat_col(model: &Model, q_vec: &DVector<f64>, r_t: f64) -> DVector<f64> {
    let p = model.params();
    let mut excess = p.drift_base.clone();
    excess.add_scalar_mut(-r_t);
    let rhs = excess + model.sigma_lambda_t() * q_vec;
    p.asset_vol.transpose() * model.gram().solve_vec(&rhs)
}

/// Right-hand sides (dQ/dt, dq/dt, dk/dt) of the coupled backward system at
/// time t, with the equilibrium market controls substituted.
pub fn coefficient_rhs(
    model: &Model,
    t: f64,
    q_mat: &DMatrix<f64>,
    q_vec: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>, f64) {
    let p = model.params();
    let theta = model.theta();
    let r_t = model.rate_at(t);
    let k0 = k0_matrix(model);
    let k1 = k1_matrix(model, q_mat);
    let lam_sig_t = model.sigma_lambda_t().transpose(); // ΛΣ'

    // dQ/dt = Q K0 Q - K1' Q - Q K1
    let dq_mat = q_mat * &k0 * q_mat - k1.transpose() * q_mat - q_mat * &k1;

    // dq/dt = -(K1' - Q K0) q - Q b + Q ΛΣ'(ΣΣ')⁻¹(a - r 1)
    //         - Q ΛΣ'(ΣΣ')⁻¹Σ ξ̂' + Q Λ ξ̂'
    let mut excess = p.drift_base.clone();
    excess.add_scalar_mut(-r_t);
    let solved_excess = model.gram().solve_vec(&excess);
    let xi_hat = xi_hat_col(model, q_vec, r_t);
    let sig_xi = &p.asset_vol * &xi_hat;
    let dq_vec = -(k1.transpose() - q_mat * &k0) * q_vec - q_mat * &p.factor_base
        + q_mat * &lam_sig_t * &solved_excess
        - q_mat * &lam_sig_t * model.gram().solve_vec(&sig_xi)
        + q_mat * (&p.factor_vol * &xi_hat);

    // dk/dt = -( b'q + (theta-2)/4 q'ΛΣ'(ΣΣ')⁻¹ΣΛ'q + r
    //            - q'ΛΣ'(ΣΣ')⁻¹(a - r 1) + q'ΛΣ'(ΣΣ')⁻¹Σ ξ̂'
    //            - ξ̂ Λ' q + (2-theta)/4 q'ΛΛ'q )
    let sig_lam_q = model.sigma_lambda_t() * q_vec; // ΣΛ'q (m)
    let proj_quad = sig_lam_q.dot(&model.gram().solve_vec(&sig_lam_q));
    let lam_t_q = p.factor_vol.transpose() * q_vec; // Λ'q (n+m)
    let dk = -(p.factor_base.dot(q_vec)
        + 0.25 * (theta - 2.0) * proj_quad
        + r_t
        - sig_lam_q.dot(&solved_excess)
        + sig_lam_q.dot(&model.gram().solve_vec(&sig_xi))
        - xi_hat.dot(&lam_t_q)
        + 0.25 * (2.0 - theta) * q_vec.dot(&(model.lambda_gram() * q_vec)));

    (dq_mat, dq_vec, dk)
}

/// Time grids of Q(t), q(t), k(t) plus their stored derivatives, defining
/// u(t,x) = 1/2 x'Q(t)x + q'(t)x + k(t) with cubic Hermite interpolation
/// between nodes.
#[derive(Debug, Clone)]
pub struct ValueCoefficients {
    n: usize,
    sol: OdeSolution,
}

/// Interpolated coefficient state at one time.
#[derive(Debug, Clone)]
pub struct CoeffPoint {
    pub q_mat: DMatrix<f64>,
    pub q_vec: DVector<f64>,
    pub k: f64,
    pub dq_mat: DMatrix<f64>,
    pub dq_vec: DVector<f64>,
    pub dk: f64,
}

fn pack(q_mat: &DMatrix<f64>, q_vec: &DVector<f64>, k: f64) -> DVector<f64> {
    let n = q_vec.len();
    let mut out = DVector::zeros(n * n + n + 1);
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = q_mat[(i, j)];
        }
    }
    for i in 0..n {
        out[n * n + i] = q_vec[i];
    }
    out[n * n + n] = k;
    out
}

fn unpack(state: &DVector<f64>, n: usize) -> (DMatrix<f64>, DVector<f64>, f64) {
    let q_mat = DMatrix::from_fn(n, n, |i, j| state[i * n + j]);
    let q_vec = DVector::from_fn(n, |i, _| state[n * n + i]);
    (q_mat, q_vec, state[n * n + n])
}

/// Integrates the coefficient system backward from t = T with the classic
/// fourth-order scheme on a uniform grid of `steps` steps, re-symmetrizing Q
/// after every step. Any non-finite entry aborts with the failure time
/// (finite escape of the Riccati solution: the quadratic value
/// representation does not exist on the full horizon for this model).
pub fn solve_coefficients(model: &Model, steps: usize) -> Result<ValueCoefficients> {
    if steps < 10 {
        return Err(Error::Parameter {
            field: "steps",
            reason: format!("need at least 10 integration steps, got {steps}"),
        });
    }
    let n = model.num_factors();
    let terminal = pack(
        &DMatrix::zeros(n, n),
        &DVector::zeros(n),
        model.initial_wealth().ln(),
    );
    let rhs = |t: f64, state: &DVector<f64>| {
        let (q_mat, q_vec, _) = unpack(state, n);
        let (dq_mat, dq_vec, dk) = coefficient_rhs(model, t, &q_mat, &q_vec);
        pack(&dq_mat, &dq_vec, dk)
    };
    let resym = |state: &mut DVector<f64>| {
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (state[i * n + j] + state[j * n + i]);
                state[i * n + j] = avg;
                state[j * n + i] = avg;
            }
        }
    };
    let sol = ode::integrate_fixed(rhs, resym, model.horizon(), 0.0, terminal, steps)?;
    Ok(ValueCoefficients { n, sol })
}

impl ValueCoefficients {
    /// Builds a candidate coefficient set directly from node values and node
    /// derivatives on an ascending grid. The verification operators accept
    /// any candidate quadratic value function, not only solver output; this
    /// is the entry point for testing such candidates.
    pub fn from_nodes(
        grid: Vec<f64>,
        nodes: Vec<(DMatrix<f64>, DVector<f64>, f64)>,
        derivs: Vec<(DMatrix<f64>, DVector<f64>, f64)>,
    ) -> Result<Self> {
        if grid.len() < 2 || grid.len() != nodes.len() || grid.len() != derivs.len() {
            return Err(Error::Parameter {
                field: "grid",
                reason: "need equal-length grid/nodes/derivs with at least two nodes".into(),
            });
        }
        if grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Parameter {
                field: "grid",
                reason: "grid must be strictly increasing".into(),
            });
        }
        let n = nodes[0].1.len();
        let states = nodes.iter().map(|(q, qv, k)| pack(q, qv, *k)).collect();
        let derivs = derivs.iter().map(|(q, qv, k)| pack(q, qv, *k)).collect();
        Ok(Self {
            n,
            sol: OdeSolution {
                grid,
                states,
                derivs,
            },
        })
    }

    pub fn num_factors(&self) -> usize {
        self.n
    }

    pub fn grid(&self) -> &[f64] {
        &self.sol.grid
    }

    pub fn node(&self, i: usize) -> (DMatrix<f64>, DVector<f64>, f64) {
        unpack(&self.sol.states[i], self.n)
    }

    pub fn node_deriv(&self, i: usize) -> (DMatrix<f64>, DVector<f64>, f64) {
        unpack(&self.sol.derivs[i], self.n)
    }

    /// Interpolated coefficients and derivatives at any t in [0, T].
    pub fn at(&self, t: f64) -> Result<CoeffPoint> {
        let state = self.sol.eval(t)?;
        let deriv = self.sol.eval_deriv(t)?;
        let (q_mat, q_vec, k) = unpack(&state, self.n);
        let (dq_mat, dq_vec, dk) = unpack(&deriv, self.n);
        Ok(CoeffPoint {
            q_mat,
            q_vec,
            k,
            dq_mat,
            dq_vec,
            dk,
        })
    }

    /// u(t, x) = 1/2 x'Qx + q'x + k.
    pub fn value_u(&self, t: f64, x: &DVector<f64>) -> Result<f64> {
        let c = self.at(t)?;
        Ok(0.5 * x.dot(&(&c.q_mat * x)) + c.q_vec.dot(x) + c.k)
    }

    /// Du(t, x) = Qx + q.
    pub fn grad_u(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        let c = self.at(t)?;
        Ok(&c.q_mat * x + &c.q_vec)
    }

    /// du/dt(t, x) = 1/2 x'Q̇x + q̇'x + k̇ from the stored derivatives.
    pub fn time_deriv_u(&self, t: f64, x: &DVector<f64>) -> Result<f64> {
        let c = self.at(t)?;
        Ok(0.5 * x.dot(&(&c.dq_mat * x)) + c.dq_vec.dot(x) + c.dk)
    }

    /// Max symmetry residual ‖Q - Q'‖ / (1 + ‖Q‖) over all grid nodes.
    pub fn max_symmetry_residual(&self) -> f64 {
        (0..self.grid().len())
            .map(|i| {
                let (q_mat, _, _) = self.node(i);
                linalg::symmetry_residual(&q_mat)
            })
            .fold(0.0, f64::max)
    }

    /// All coefficient entries finite at every node.
    pub fn all_finite(&self) -> bool {
        self.sol
            .states
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Residuals of the three coefficient equations at time t, evaluated on
    /// the interpolated state and its interpolated derivative: max-norm of
    /// (Q̇ - rhs_Q, q̇ - rhs_q, k̇ - rhs_k).
    pub fn ode_residual(&self, model: &Model, t: f64) -> Result<(f64, f64, f64)> {
        let c = self.at(t)?;
        let (rhs_q_mat, rhs_q_vec, rhs_k) = coefficient_rhs(model, t, &c.q_mat, &c.q_vec);
        let res_q = (&c.dq_mat - rhs_q_mat).amax();
        let res_qv = (&c.dq_vec - rhs_q_vec).amax();
        let res_k = (c.dk - rhs_k).abs();
        Ok((res_q, res_qv, res_k))
    }

    /// CSV export: one row per grid time, flattened Q (row-major), q, k.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let n = self.n;
        let mut header = String::from("t");
        for i in 0..n {
            for j in 0..n {
                header.push_str(&format!(",Q_{i}_{j}"));
            }
        }
        for i in 0..n {
            header.push_str(&format!(",q_{i}"));
        }
        header.push_str(",k");
        writeln!(out, "{header}")?;
        for (idx, &t) in self.grid().iter().enumerate() {
            let (q_mat, q_vec, k) = self.node(idx);
            let mut row = fmt_f64(t);
            for i in 0..n {
                for j in 0..n {
                    row.push(',');
                    row.push_str(&fmt_f64(q_mat[(i, j)]));
                }
            }
            for i in 0..n {
                row.push(',');
                row.push_str(&fmt_f64(q_vec[i]));
            }
            row.push(',');
            row.push_str(&fmt_f64(k));
            writeln!(out, "{row}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MarketModel;
    use crate::rate::RateSchedule;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// The reference scalar instance used throughout the test suite:
    /// one asset, one factor, independent noise blocks.
    pub fn oracle_scalar_raw() -> MarketModel {
        MarketModel {
            num_assets: 1,
            num_factors: 1,
            drift_base: DVector::from_vec(vec![0.06]),
            drift_loading: DMatrix::from_row_slice(1, 1, &[0.8]),
            factor_base: DVector::from_vec(vec![0.0]),
            factor_feedback: DMatrix::from_row_slice(1, 1, &[-0.5]),
            asset_vol: DMatrix::from_row_slice(1, 2, &[0.2, 0.0]),
            factor_vol: DMatrix::from_row_slice(1, 2, &[0.0, 0.3]),
            rate: RateSchedule::constant(0.02),
            theta: 1.0,
            horizon: 1.0,
            initial_wealth: 1.0,
            x0: DVector::from_vec(vec![0.5]),
        }
    }

    fn correlated_scalar_raw() -> MarketModel {
        let mut raw = oracle_scalar_raw();
        raw.asset_vol = DMatrix::from_row_slice(1, 2, &[0.2, 0.05]);
        raw.factor_vol = DMatrix::from_row_slice(1, 2, &[0.1, 0.3]);
        raw
    }

    #[test]
    fn k0_independent_noise_identity() {
        // ΣΛ' = 0, theta = 2, ΛΛ' = I -> K0 = I.
        let mut raw = oracle_scalar_raw();
        raw.theta = 2.0;
        raw.factor_vol = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let model = Model::new(raw).unwrap();
        let k0 = k0_matrix(&model);
        assert_relative_eq!(k0[(0, 0)], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn k0_theta_two_drops_projector() {
        // theta = 2 -> (theta-2)/theta = 0 -> K0 = ΛΛ' for any Σ.
        let mut raw = correlated_scalar_raw();
        raw.theta = 2.0;
        let model = Model::new(raw).unwrap();
        let k0 = k0_matrix(&model);
        let ll = model.lambda_gram();
        assert_relative_eq!(k0[(0, 0)], ll[(0, 0)], epsilon = 1e-14);
    }

    #[test]
    fn k0_scalar_expansion_oracle() {
        // m = n = 1, Σ = [1, 0], Λ = [rho, lam], theta = 1 -> K0 = rho^2 + lam^2/2.
        let (rho, lam) = (0.3, 0.7);
        let mut raw = oracle_scalar_raw();
        raw.asset_vol = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        raw.factor_vol = DMatrix::from_row_slice(1, 2, &[rho, lam]);
        let model = Model::new(raw).unwrap();
        let k0 = k0_matrix(&model);
        assert_relative_eq!(k0[(0, 0)], rho * rho + lam * lam / 2.0, epsilon = 1e-14);
    }

    #[test]
    fn k1_zero_lambda_is_feedback() {
        let mut raw = oracle_scalar_raw();
        raw.factor_vol = DMatrix::zeros(1, 2);
        let model = Model::new(raw).unwrap();
        let k1 = k1_matrix(&model, &DMatrix::zeros(1, 1));
        assert_relative_eq!(k1[(0, 0)], -0.5, epsilon = 1e-15);
    }

    #[test]
    fn k1_at_zero_q_is_mmm_drift_matrix() {
        let model = Model::new(correlated_scalar_raw()).unwrap();
        let k1 = k1_matrix(&model, &DMatrix::zeros(1, 1));
        let expected = model.mmm_drift_matrix();
        assert!((k1 - expected).norm() < 1e-13);
    }

    #[test]
    fn k1_term_by_term_oracle_and_collapse() {
        // Literal expansion with an explicit inverse must agree; and because
        // η̂' lies in the range of Σ', K1 is independent of Q.
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let model = Model::new(correlated_scalar_raw()).unwrap();
        let p = model.params();
        let ginv = 1.0 / (&p.asset_vol * p.asset_vol.transpose())[(0, 0)];
        for _ in 0..5 {
            let q = DMatrix::from_row_slice(1, 1, &[4.0 * (rng.random::<f64>() - 0.5)]);
            let got = k1_matrix(&model, &q);

            let sig_lam_q = model.sigma_lambda_t() * &q + &p.drift_loading;
            let eta_hat_t = p.asset_vol.transpose() * (&sig_lam_q * ginv);
            let expected = &p.factor_feedback
                - &p.factor_vol * &eta_hat_t
                - &p.factor_vol * p.asset_vol.transpose() * ginv * &p.drift_loading
                + &p.factor_vol * p.asset_vol.transpose() * ginv * (&p.asset_vol * &eta_hat_t);
            assert!((got.clone() - expected).norm() < 1e-13);

            let at_zero = k1_matrix(&model, &DMatrix::zeros(1, 1));
            assert!((got - at_zero).norm() < 1e-13);
        }
    }

    #[test]
    fn terminal_data_is_assigned_bitwise() {
        let model = Model::new(correlated_scalar_raw()).unwrap();
        let coeffs = solve_coefficients(&model, 64).unwrap();
        let last = coeffs.grid().len() - 1;
        assert_eq!(coeffs.grid()[last], 1.0);
        let (q_mat, q_vec, k) = coeffs.node(last);
        assert_eq!(q_mat[(0, 0)], 0.0);
        assert_eq!(q_vec[0], 0.0);
        assert_eq!(k, model.initial_wealth().ln());
    }

    #[test]
    fn degenerate_model_has_pure_discount_value() {
        // A = 0, a = r 1, b = 0: Q = 0 and q = 0 solve the system identically,
        // and k(t) = log v + integral of r over [t, T].
        let mut raw = correlated_scalar_raw();
        raw.drift_loading = DMatrix::zeros(1, 1);
        raw.drift_base = DVector::from_vec(vec![0.02]);
        raw.factor_base = DVector::zeros(1);
        raw.initial_wealth = 2.0;
        let model = Model::new(raw).unwrap();
        let coeffs = solve_coefficients(&model, 128).unwrap();
        for (i, &t) in coeffs.grid().iter().enumerate() {
            let (q_mat, q_vec, k) = coeffs.node(i);
            assert_eq!(q_mat[(0, 0)], 0.0);
            assert_eq!(q_vec[0], 0.0);
            let expected = 2.0f64.ln() + model.rate().integral(t, 1.0);
            assert_relative_eq!(k, expected, epsilon = 1e-12);
        }
    }

    /// Independent very-fine-step scalar integrator for the reference scalar
    /// model: explicit Euler on the literal scalar equations, no shared code
    /// with the production solver.
    fn scalar_euler_oracle(raw: &MarketModel, steps: usize) -> (f64, f64, f64) {
        let sigma = [raw.asset_vol[(0, 0)], raw.asset_vol[(0, 1)]];
        let lambda = [raw.factor_vol[(0, 0)], raw.factor_vol[(0, 1)]];
        let s2 = sigma[0] * sigma[0] + sigma[1] * sigma[1];
        let c = sigma[0] * lambda[0] + sigma[1] * lambda[1];
        let l2 = lambda[0] * lambda[0] + lambda[1] * lambda[1];
        let theta = raw.theta;
        let alpha = raw.drift_loading[(0, 0)];
        let a0 = raw.drift_base[0];
        let b0 = raw.factor_base[0];
        let beta = raw.factor_feedback[(0, 0)];
        let t_end = raw.horizon;
        let k0 = 0.5 * theta * l2 - 0.5 * (theta - 2.0) * c * c / s2;

        let (mut q, mut qv, mut k) = (0.0f64, 0.0f64, raw.initial_wealth.ln());
        let dt = t_end / steps as f64;
        for i in (0..steps).rev() {
            let t = (i as f64 + 1.0) * dt;
            let r = raw.rate.at(t);
            // literal per-term evaluation, including the ξ̂ terms that cancel
            let eta_term = c * (c * q + alpha) / s2;
            let k1 = beta - eta_term - c * alpha / s2 + eta_term;
            let sig_xi = (a0 - r) + c * qv;
            let dq = k0 * q * q - 2.0 * k1 * q;
            let dqv = -(k1 - q * k0) * qv - q * b0 + q * c * (a0 - r) / s2
                - q * c * sig_xi / s2
                + q * c * sig_xi / s2;
            let dk = -(b0 * qv
                + 0.25 * (theta - 2.0) * c * c / s2 * qv * qv
                + r
                - qv * c * (a0 - r) / s2
                + qv * c * sig_xi / s2
                - qv * c * sig_xi / s2
                + 0.25 * (2.0 - theta) * l2 * qv * qv);
            q -= dt * dq;
            qv -= dt * dqv;
            k -= dt * dk;
        }
        (q, qv, k)
    }

    #[test]
    fn oracle_scalar_model_frozen_values() {
        // Values tabulated by the independent fine-step oracle: the
        // self-consistent system is homogeneous in (Q, q), so from zero
        // terminal data Q(0) = 0, q(0) = 0, and k(0) = log v + r T = 0.02.
        let raw = oracle_scalar_raw();
        let (oq, oqv, ok) = scalar_euler_oracle(&raw, 1_000_000);
        assert!(oq.abs() < 1e-12, "oracle Q(0) = {oq}");
        assert!(oqv.abs() < 1e-12, "oracle q(0) = {oqv}");
        assert_relative_eq!(ok, 0.02, epsilon = 1e-9);

        let model = Model::new(raw).unwrap();
        let coeffs = solve_coefficients(&model, 2000).unwrap();
        let (q_mat, q_vec, k) = coeffs.node(0);
        assert!((q_mat[(0, 0)] - oq).abs() < 1e-9);
        assert!((q_vec[0] - oqv).abs() < 1e-9);
        assert!((k - ok).abs() < 1e-8);
        // Frozen expected values.
        assert_eq!(q_mat[(0, 0)], 0.0);
        assert_eq!(q_vec[0], 0.0);
        assert_relative_eq!(k, 0.02, epsilon = 1e-12);
    }

    #[test]
    fn correlated_scalar_model_agrees_with_oracle() {
        let raw = correlated_scalar_raw();
        let (oq, oqv, ok) = scalar_euler_oracle(&raw, 1_000_000);
        let model = Model::new(raw).unwrap();
        let coeffs = solve_coefficients(&model, 2000).unwrap();
        let (q_mat, q_vec, k) = coeffs.node(0);
        assert!((q_mat[(0, 0)] - oq).abs() < 1e-9);
        assert!((q_vec[0] - oqv).abs() < 1e-9);
        assert!((k - ok).abs() < 1e-8);
    }

    #[test]
    fn symmetry_and_residuals_on_grid() {
        let model = Model::new(correlated_scalar_raw()).unwrap();
        let coeffs = solve_coefficients(&model, 200).unwrap();
        assert!(coeffs.max_symmetry_residual() <= 1e-10);
        assert!(coeffs.all_finite());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let t = rng.random::<f64>() * 0.98 + 0.01;
            let (rq, rqv, rk) = coeffs.ode_residual(&model, t).unwrap();
            assert!(rq.max(rqv).max(rk) <= 1e-6, "residual at {t}: {rq} {rqv} {rk}");
        }
    }

    #[test]
    fn interpolation_evaluations() {
        let model = Model::new(correlated_scalar_raw()).unwrap();
        let coeffs = solve_coefficients(&model, 100).unwrap();
        // x = 0: u = k(t), Du = q(t).
        let x0 = DVector::zeros(1);
        let c = coeffs.at(0.37).unwrap();
        assert_relative_eq!(coeffs.value_u(0.37, &x0).unwrap(), c.k, epsilon = 1e-15);
        assert_relative_eq!(coeffs.grad_u(0.37, &x0).unwrap()[0], c.q_vec[0], epsilon = 1e-15);
        // t = T: u = log v for all x.
        let x = DVector::from_vec(vec![1.7]);
        assert_relative_eq!(coeffs.value_u(1.0, &x).unwrap(), 0.0, epsilon = 1e-15);
        // outside the horizon: domain error
        assert!(coeffs.value_u(1.2, &x).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let model = Model::new(correlated_scalar_raw()).unwrap();
        let coeffs = solve_coefficients(&model, 100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let t = rng.random::<f64>();
            let x = DVector::from_vec(vec![4.0 * (rng.random::<f64>() - 0.5)]);
            let grad = coeffs.grad_u(t, &x).unwrap();
            let eps = 1e-5;
            let mut xp = x.clone();
            xp[0] += eps;
            let mut xm = x.clone();
            xm[0] -= eps;
            let fd =
                (coeffs.value_u(t, &xp).unwrap() - coeffs.value_u(t, &xm).unwrap()) / (2.0 * eps);
            let denom = 1.0f64.max(grad[0].abs());
            assert!((grad[0] - fd).abs() / denom < 1e-6);
        }
    }

    #[test]
    fn csv_header_and_terminal_row() {
        let model = Model::new(oracle_scalar_raw()).unwrap();
        let coeffs = solve_coefficients(&model, 10).unwrap();
        let mut buf = Vec::new();
        coeffs.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,Q_0_0,q_0,k");
        // last row is the terminal condition Q(T) = 0, q(T) = 0, k(T) = 0
        let last = text.lines().last().unwrap();
        assert_eq!(last, "1.0,0.0,0.0,0.0");
    }

    #[test]
    fn rejects_too_few_steps() {
        let model = Model::new(oracle_scalar_raw()).unwrap();
        assert!(solve_coefficients(&model, 5).is_err());
    }
}
