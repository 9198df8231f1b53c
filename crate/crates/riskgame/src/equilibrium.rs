//! Saddle-point strategies and equilibrium diagnostics.
//!
//! Given solved value coefficients, this module evaluates the investor's
//! feedback control, the market's equilibrium Girsanov shifts, and the
//! worst-case HJBI operator; it checks the verification-lemma conditions on
//! sampled states and classifies the equilibrium measure (minimal martingale
//! measure or not, no-regret or not).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::coeffs::ValueCoefficients;
use crate::error::Result;
use crate::linalg;
use crate::model::{market_shift, Model};

/// Investor feedback control at the saddle point:
/// h(t, x) = -(ΣΣ')⁻¹ ΣΛ' (Q(t) x + q(t)).
///
/// Identically zero whenever ΣΛ' = 0 (independent noise) or the coefficients
/// vanish.
pub fn optimal_h(coeffs: &ValueCoefficients, model: &Model, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
    let du = coeffs.grad_u(t, x)?;
    Ok(-model.gram().solve_vec(&(model.sigma_lambda_t() * du)))
}

/// First-order condition for the investor against arbitrary market controls:
/// h = 2/(theta+2) (ΣΣ')⁻¹ [delta - Σ(eta'x + xi') - (theta/2) ΣΛ' Du].
///
/// At the equilibrium market controls this coincides with [`optimal_h`].
pub fn first_order_h(
    coeffs: &ValueCoefficients,
    model: &Model,
    t: f64,
    x: &DVector<f64>,
    eta_t: &DMatrix<f64>,
    xi_t: &RowDVector<f64>,
) -> Result<DVector<f64>> {
    let theta = model.theta();
    let du = coeffs.grad_u(t, x)?;
    let delta = model.excess_return(t, x)?;
    let phi = market_shift(eta_t, xi_t, x);
    let rhs = delta
        - &model.params().asset_vol * phi
        - model.sigma_lambda_t() * du * (theta / 2.0);
    Ok(model.gram().solve_vec(&rhs) * (2.0 / (theta + 2.0)))
}

/// Market equilibrium controls built from the solved coefficients:
/// eta(t) = (Q'ΛΣ' + A')(ΣΣ')⁻¹Σ and xi(t) = ((a - r(t)1)' + q'ΛΣ')(ΣΣ')⁻¹Σ.
///
/// When ΣΛ' = 0 or the coefficients vanish these are exactly the
/// minimal-martingale-measure controls.
pub fn optimal_market_controls(
    coeffs: &ValueCoefficients,
    model: &Model,
    t: f64,
) -> Result<(DMatrix<f64>, RowDVector<f64>)> {
    let c = coeffs.at(t)?;
    let p = model.params();
    // eta' = Σ'(ΣΣ')⁻¹(ΣΛ'Q + A); return eta = its transpose.
    let inner = model.sigma_lambda_t() * &c.q_mat + &p.drift_loading;
    let eta = model.gram().solve(&inner).transpose() * &p.asset_vol;
    let mut excess = p.drift_base.clone();
    excess.add_scalar_mut(-model.rate_at(t));
    let rhs = excess + model.sigma_lambda_t() * &c.q_vec;
    let solved = model.gram().solve_vec(&rhs);
    let xi = RowDVector::from_iterator(
        model.num_drivers(),
        (solved.transpose() * &p.asset_vol).iter().cloned(),
    );
    Ok((eta, xi))
}

/// The saddle-point strategy pair, keeping a link to the coefficients that
/// produced it.
#[derive(Clone, Debug)]
pub struct StrategyPair {
    pub coeffs: Arc<ValueCoefficients>,
}

impl StrategyPair {
    pub fn new(coeffs: Arc<ValueCoefficients>) -> Self {
        Self { coeffs }
    }

    pub fn h_hat(&self, model: &Model, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        optimal_h(&self.coeffs, model, t, x)
    }

    pub fn market(&self, model: &Model, t: f64) -> Result<(DMatrix<f64>, RowDVector<f64>)> {
        optimal_market_controls(&self.coeffs, model, t)
    }

    /// Residual of the defining substitution identity
    /// -ΣΛ'(Qx + q) = delta - Σ(eta'x + xi') at one point.
    pub fn substitution_residual(&self, model: &Model, t: f64, x: &DVector<f64>) -> Result<f64> {
        let du = self.coeffs.grad_u(t, x)?;
        let lhs = -(model.sigma_lambda_t() * du);
        let (eta, xi) = self.market(model, t)?;
        let delta = model.excess_return(t, x)?;
        let rhs = delta - &model.params().asset_vol * market_shift(&eta, &xi, x);
        Ok((lhs - rhs).norm())
    }
}

/// Full worst-case HJBI operator applied to the quadratic value function at
/// one point, for arbitrary controls:
///
/// A u = u_t + (b + Bx - Λ(eta'x + xi') - (theta/2)ΛΣ'h)'Du
///       + 1/2 tr(ΛΛ'Q) - (theta/4)(Du)'ΛΛ'Du - g.
///
/// Zero at the saddle point (within interpolation tolerance).
pub fn hjb_operator(
    coeffs: &ValueCoefficients,
    model: &Model,
    t: f64,
    x: &DVector<f64>,
    h: &DVector<f64>,
    eta_t: &DMatrix<f64>,
    xi_t: &RowDVector<f64>,
) -> Result<f64> {
    let c = coeffs.at(t)?;
    let p = model.params();
    let theta = model.theta();
    let r_t = model.rate_at(t);
    let du = &c.q_mat * x + &c.q_vec;
    let u_t = 0.5 * x.dot(&(&c.dq_mat * x)) + c.dq_vec.dot(x) + c.dk;
    let phi = market_shift(eta_t, xi_t, x);
    let drift = &p.factor_base + &p.factor_feedback * x
        - &p.factor_vol * phi
        - model.sigma_lambda_t().transpose() * h * (theta / 2.0);
    let trace = 0.5 * model.lambda_gram().component_mul(&c.q_mat).sum();
    let risk = -0.25 * theta * du.dot(&(model.lambda_gram() * &du));
    let g = model.running_cost_g(x, h, eta_t, xi_t, r_t);
    Ok(u_t + drift.dot(&du) + trace + risk - g)
}

/// Analytic gradient of the operator in the investor control:
/// dA/dh = delta - Σ(eta'x + xi') - (theta/2)ΣΛ'Du - (theta/2 + 1)ΣΣ'h.
pub fn hjb_h_gradient(
    coeffs: &ValueCoefficients,
    model: &Model,
    t: f64,
    x: &DVector<f64>,
    h: &DVector<f64>,
    eta_t: &DMatrix<f64>,
    xi_t: &RowDVector<f64>,
) -> Result<DVector<f64>> {
    let theta = model.theta();
    let du = coeffs.grad_u(t, x)?;
    let delta = model.excess_return(t, x)?;
    let p = model.params();
    let phi = market_shift(eta_t, xi_t, x);
    let gram_h = (&p.asset_vol * p.asset_vol.transpose()) * h;
    Ok(delta
        - &p.asset_vol * phi
        - model.sigma_lambda_t() * du * (theta / 2.0)
        - gram_h * (theta / 2.0 + 1.0))
}

/// Exact linear coefficient of the operator in the market shift: perturbing
/// (eta, xi) by (E, F) changes the operator by -(E'x + F')' c with
/// c = Λ'Du + Σ'h. Its component in the range of Σ' vanishes at the
/// equilibrium investor control by construction.
pub fn market_shift_coefficient(
    coeffs: &ValueCoefficients,
    model: &Model,
    t: f64,
    x: &DVector<f64>,
    h: &DVector<f64>,
) -> Result<DVector<f64>> {
    let du = coeffs.grad_u(t, x)?;
    let p = model.params();
    Ok(p.factor_vol.transpose() * du + p.asset_vol.transpose() * h)
}

/// Sampling plan for the verification-condition sweeps.
#[derive(Debug, Clone)]
pub struct SampleSpec {
    pub n_times: usize,
    pub n_points: usize,
    pub radius: f64,
    pub n_controls: usize,
    pub seed: u64,
}

impl SampleSpec {
    pub fn defaults_for(model: &Model) -> Self {
        Self {
            n_times: 21,
            n_points: 100,
            radius: 5.0 * model.x0().norm() + 1.0,
            n_controls: 50,
            seed: 0x5eed,
        }
    }

    /// A lighter sweep for interactive use.
    pub fn quick(model: &Model) -> Self {
        Self {
            n_times: 7,
            n_points: 20,
            radius: 5.0 * model.x0().norm() + 1.0,
            n_controls: 10,
            seed: 0x5eed,
        }
    }
}

/// Margins of the verification-lemma conditions measured on sampled states
/// and controls. Signs are in terms of the game payoff u: the investor-side
/// operator is maximized (condition 1), the operator is flat in the market
/// controls (condition 2), zero at the saddle (condition 3), and the
/// terminal slice is exact (condition 4). The integrability condition (5) is
/// delegated to the simulation module's density checks.
#[derive(Debug, Clone)]
pub struct ConditionReport {
    /// Condition 1: max over random h of A^{h, eta_hat, xi_hat} u.
    pub investor_max_operator: f64,
    /// Condition 2: max |A^{h_hat, eta, xi} u| over random market controls.
    pub market_max_abs_operator: f64,
    /// Condition 3: max |A| at the saddle point over the (t, x) grid.
    pub hjb_residual_max: f64,
    /// Condition 4: max |u(T, x) - log v| over sampled x.
    pub terminal_max_error: f64,
    /// First-order condition: max norm of the h-gradient at h_hat.
    pub h_gradient_max: f64,
    /// Max norm of the market-shift coefficient c = Λ'Du + Σ'h at h_hat.
    pub market_coeff_max: f64,
    /// Max norm of Σ'c (the range component), which must vanish at h_hat.
    pub market_coeff_range_max: f64,
    /// Worst (t, x) for condition 3.
    pub worst_point: (f64, Vec<f64>),
}

/// Sweeps the verification-lemma conditions over sampled (t, x, controls).
pub fn verification_conditions(
    coeffs: &ValueCoefficients,
    model: &Model,
    spec: &SampleSpec,
) -> Result<ConditionReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = model.num_factors();
    let m = model.num_assets();
    let d = model.num_drivers();
    let t_end = model.horizon();

    let mut investor_max = f64::NEG_INFINITY;
    let mut market_max_abs: f64 = 0.0;
    let mut residual_max: f64 = 0.0;
    let mut grad_max: f64 = 0.0;
    let mut coeff_max: f64 = 0.0;
    let mut coeff_range_max: f64 = 0.0;
    let mut worst = (0.0, vec![0.0; n]);

    for ti in 0..spec.n_times {
        let t = t_end * ti as f64 / (spec.n_times - 1).max(1) as f64;
        let (eta_hat, xi_hat) = optimal_market_controls(coeffs, model, t)?;
        for _ in 0..spec.n_points {
            let x = sample_ball(&mut rng, n, spec.radius);
            let h_hat = optimal_h(coeffs, model, t, &x)?;

            let at_saddle = hjb_operator(coeffs, model, t, &x, &h_hat, &eta_hat, &xi_hat)?;
            if at_saddle.abs() > residual_max {
                residual_max = at_saddle.abs();
                worst = (t, x.iter().cloned().collect());
            }

            let grad = hjb_h_gradient(coeffs, model, t, &x, &h_hat, &eta_hat, &xi_hat)?;
            grad_max = grad_max.max(grad.norm());

            let c = market_shift_coefficient(coeffs, model, t, &x, &h_hat)?;
            coeff_max = coeff_max.max(c.norm());
            coeff_range_max = coeff_range_max.max((&model.params().asset_vol * &c).norm());

            for _ in 0..spec.n_controls {
                let h = &h_hat + sample_ball(&mut rng, m, 1.0);
                let v = hjb_operator(coeffs, model, t, &x, &h, &eta_hat, &xi_hat)?;
                investor_max = investor_max.max(v);

                let eta = &eta_hat + DMatrix::from_fn(n, d, |_, _| rng.random::<f64>() - 0.5);
                let xi = &xi_hat + RowDVector::from_fn(d, |_, _| rng.random::<f64>() - 0.5);
                let w = hjb_operator(coeffs, model, t, &x, &h_hat, &eta, &xi)?;
                market_max_abs = market_max_abs.max(w.abs());
            }
        }
    }

    // Condition 4 is exact by construction: the terminal node is assigned.
    let mut terminal_max: f64 = 0.0;
    for _ in 0..spec.n_points {
        let x = sample_ball(&mut rng, n, spec.radius);
        let u_t = coeffs.value_u(t_end, &x)?;
        terminal_max = terminal_max.max((u_t - model.initial_wealth().ln()).abs());
    }

    Ok(ConditionReport {
        investor_max_operator: investor_max,
        market_max_abs_operator: market_max_abs,
        hjb_residual_max: residual_max,
        terminal_max_error: terminal_max,
        h_gradient_max: grad_max,
        market_coeff_max: coeff_max,
        market_coeff_range_max: coeff_range_max,
        worst_point: worst,
    })
}

fn sample_ball(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> DVector<f64> {
    use rand_distr::StandardNormal;
    let mut v = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = v.norm();
    if norm > 0.0 {
        let u: f64 = rng.random();
        v *= radius * u.powf(1.0 / dim as f64) / norm;
    }
    v
}

/// Equilibrium classification per the minimal-martingale-measure and
/// no-regret characterizations.
#[derive(Debug, Clone)]
pub struct EquilibriumDiagnostics {
    /// True iff Q'ΛΣ'(ΣΣ')⁻¹Σ and q'ΛΣ'(ΣΣ')⁻¹Σ vanish (within tol) at every
    /// grid time, i.e. the market's equilibrium measure is the MMM.
    pub is_mmm: bool,
    /// Spectral norm of Q'ΛΣ'(ΣΣ')⁻¹Σ per grid node.
    pub mmm_residual_eta: Vec<f64>,
    /// Euclidean norm of q'ΛΣ'(ΣΣ')⁻¹Σ per grid node.
    pub mmm_residual_xi: Vec<f64>,
    /// True iff the investor's saddle strategy is the riskless-only
    /// allocation at every sampled state.
    pub is_no_regret: bool,
    pub max_h_norm: f64,
    /// Max |h'Σ| over the samples; must vanish whenever is_mmm holds.
    pub max_h_sigma_norm: f64,
    /// Componentwise sign summary of the sampled investor control (-1, 0, +1
    /// per asset), the short-selling report.
    pub h_sign_report: Vec<i8>,
    pub tol: f64,
}

/// Classifies the equilibrium measure and strategy.
pub fn classify_equilibrium(
    coeffs: &ValueCoefficients,
    model: &Model,
    tol: f64,
) -> Result<EquilibriumDiagnostics> {
    let p = model.params();
    let mut res_eta = Vec::with_capacity(coeffs.grid().len());
    let mut res_xi = Vec::with_capacity(coeffs.grid().len());
    for i in 0..coeffs.grid().len() {
        let (q_mat, q_vec, _) = coeffs.node(i);
        // Q'ΛΣ'(ΣΣ')⁻¹Σ, evaluated by solve: (ΣΣ')⁻¹(ΣΛ'Q) then Σ-multiply.
        let solved = model.gram().solve(&(model.sigma_lambda_t() * &q_mat));
        let residual_eta = (p.asset_vol.transpose() * solved).transpose();
        res_eta.push(linalg::spectral_norm(&residual_eta));
        let solved_v = model.gram().solve_vec(&(model.sigma_lambda_t() * &q_vec));
        let residual_xi = p.asset_vol.transpose() * solved_v;
        res_xi.push(residual_xi.norm());
    }
    let is_mmm = res_eta.iter().chain(res_xi.iter()).all(|&r| r <= tol);

    let mut rng = ChaCha8Rng::seed_from_u64(0x0c1a55);
    let n = model.num_factors();
    let radius = 5.0 * model.x0().norm() + 1.0;
    let mut max_h: f64 = 0.0;
    let mut max_h_sigma: f64 = 0.0;
    let mut signs = vec![0i8; model.num_assets()];
    for (i, &t) in coeffs.grid().iter().enumerate() {
        if i % (coeffs.grid().len() / 20).max(1) != 0 && i != coeffs.grid().len() - 1 {
            continue;
        }
        for _ in 0..25 {
            let x = sample_ball(&mut rng, n, radius);
            let h = optimal_h(coeffs, model, t, &x)?;
            max_h = max_h.max(h.amax());
            max_h_sigma = max_h_sigma.max((p.asset_vol.transpose() * &h).norm());
            for (j, s) in signs.iter_mut().enumerate() {
                if h[j] > tol {
                    *s = if *s == -1 { 2 } else { 1.max(*s) };
                } else if h[j] < -tol {
                    *s = if *s == 1 { 2 } else { (-1).min(*s) };
                }
            }
        }
    }
    let is_no_regret = max_h <= tol;

    Ok(EquilibriumDiagnostics {
        is_mmm,
        mmm_residual_eta: res_eta,
        mmm_residual_xi: res_xi,
        is_no_regret,
        max_h_norm: max_h,
        max_h_sigma_norm: max_h_sigma,
        h_sign_report: signs,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::solve_coefficients;
    use crate::model::{MarketModel, Model};
    use crate::rate::RateSchedule;
    use approx::assert_relative_eq;

    fn scalar(sigma: [f64; 2], lambda: [f64; 2]) -> Model {
        Model::new(MarketModel {
            num_assets: 1,
            num_factors: 1,
            drift_base: DVector::from_vec(vec![0.06]),
            drift_loading: DMatrix::from_row_slice(1, 1, &[0.8]),
            factor_base: DVector::from_vec(vec![0.0]),
            factor_feedback: DMatrix::from_row_slice(1, 1, &[-0.5]),
            asset_vol: DMatrix::from_row_slice(1, 2, &sigma),
            factor_vol: DMatrix::from_row_slice(1, 2, &lambda),
            rate: RateSchedule::constant(0.02),
            theta: 1.0,
            horizon: 1.0,
            initial_wealth: 1.0,
            x0: DVector::from_vec(vec![0.5]),
        })
        .unwrap()
    }

    fn with_coefficients(model: &Model) -> Arc<ValueCoefficients> {
        Arc::new(solve_coefficients(model, 200).unwrap())
    }

    #[test]
    fn independent_noise_gives_zero_h() {
        let model = scalar([0.2, 0.0], [0.0, 0.3]);
        let coeffs = with_coefficients(&model);
        for &t in &[0.0, 0.3, 1.0] {
            let h = optimal_h(&coeffs, &model, t, &DVector::from_vec(vec![0.7])).unwrap();
            assert_eq!(h[0], 0.0);
        }
    }

    #[test]
    fn terminal_h_is_zero() {
        let model = scalar([0.2, 0.05], [0.1, 0.3]);
        let coeffs = with_coefficients(&model);
        let h = optimal_h(&coeffs, &model, 1.0, &DVector::from_vec(vec![2.0])).unwrap();
        assert_eq!(h[0], 0.0);
    }

    #[test]
    fn scalar_chain_value_from_oracle() {
        // Q(0) = q(0) = 0 from the coefficient oracle, so the feedback
        // control at (0, 0.5) is zero.
        let model = scalar([0.2, 0.0], [0.0, 0.3]);
        let coeffs = with_coefficients(&model);
        let h = optimal_h(&coeffs, &model, 0.0, &DVector::from_vec(vec![0.5])).unwrap();
        assert_eq!(h[0], 0.0);
    }

    #[test]
    fn first_order_h_consistency_at_equilibrium() {
        let model = scalar([0.2, 0.05], [0.1, 0.3]);
        let coeffs = with_coefficients(&model);
        for &t in &[0.0, 0.41, 0.97] {
            let (eta, xi) = optimal_market_controls(&coeffs, &model, t).unwrap();
            let x = DVector::from_vec(vec![0.8]);
            let foc = first_order_h(&coeffs, &model, t, &x, &eta, &xi).unwrap();
            let hat = optimal_h(&coeffs, &model, t, &x).unwrap();
            assert!((foc - hat).norm() < 1e-8);
        }
    }

    #[test]
    fn first_order_h_zero_numerator() {
        // delta - Σ(eta'x + xi') = 0 and Du = 0 -> h = 0. At t = T the
        // coefficients vanish, so pick the MMM controls which null delta.
        let model = scalar([0.2, 0.05], [0.1, 0.3]);
        let coeffs = with_coefficients(&model);
        let (eta, xi) = model.mmm_controls(1.0).unwrap();
        let x = DVector::from_vec(vec![0.4]);
        let h = first_order_h(&coeffs, &model, 1.0, &x, &eta, &xi).unwrap();
        assert!(h.norm() < 1e-13);
    }

    #[test]
    fn first_order_h_beats_random_samples() {
        // Brute-force: the operator is strictly concave in h, so no sampled h
        // may exceed the first-order point, at any market controls.
        let model = scalar([0.2, 0.05], [0.1, 0.3]);
        let coeffs = with_coefficients(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let t = 0.35;
        let x = DVector::from_vec(vec![-0.6]);
        let eta = DMatrix::from_fn(1, 2, |_, _| rng.random::<f64>() - 0.5);
        let xi = RowDVector::from_fn(2, |_, _| rng.random::<f64>() - 0.5);
        let h_star = first_order_h(&coeffs, &model, t, &x, &eta, &xi).unwrap();
        let best = hjb_operator(&coeffs, &model, t, &x, &h_star, &eta, &xi).unwrap();
        for _ in 0..1000 {
            let h = &h_star + DVector::from_fn(1, |_, _| 6.0 * (rng.random::<f64>() - 0.5));
            let v = hjb_operator(&coeffs, &model, t, &x, &h, &eta, &xi).unwrap();
            assert!(v <= best + 1e-8, "sampled {v} beats {best}");
        }
    }

    #[test]
    fn equilibrium_controls_reduce_to_mmm() {
        // With zero coefficients (and for any ΣΛ' = 0 model) the equilibrium
        // market controls coincide with the MMM controls.
        let model = scalar([0.2, 0.0], [0.0, 0.3]);
        let coeffs = with_coefficients(&model);
        for &t in &[0.0, 0.5, 1.0] {
            let (eta, xi) = optimal_market_controls(&coeffs, &model, t).unwrap();
            let (eta_mmm, xi_mmm) = model.mmm_controls(t).unwrap();
            assert!((eta - eta_mmm).norm() < 1e-10);
            assert!((xi - xi_mmm).norm() < 1e-10);
        }
    }

    #[test]
    fn substitution_identity_residual() {
        let model = scalar([0.2, 0.05], [0.1, 0.3]);
        let pair = StrategyPair::new(with_coefficients(&model));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let t = rng.random::<f64>();
            let x = DVector::from_vec(vec![6.0 * (rng.random::<f64>() - 0.5)]);
            assert!(pair.substitution_residual(&model, t, &x).unwrap() < 1e-8);
        }
    }

    #[test]
    fn operator_zero_at_saddle_on_grid() {
        let model = scalar([0.2, 0.05], [0.1, 0.3]);
        let coeffs = with_coefficients(&model);
        for ti in 0..10 {
            let t = ti as f64 / 9.0;
            let (eta, xi) = optimal_market_controls(&coeffs, &model, t).unwrap();
            for xi_idx in 0..10 {
                let x = DVector::from_vec(vec![xi_idx as f64 * 0.3 - 1.5]);
                let h = optimal_h(&coeffs, &model, t, &x).unwrap();
                let v = hjb_operator(&coeffs, &model, t, &x, &h, &eta, &xi).unwrap();
                assert!(v.abs() <= 1e-6, "operator {v} at t={t}");
            }
        }
    }

    #[test]
    fn operator_concavity_under_h_perturbation() {
        let model = scalar([0.2, 0.05], [0.1, 0.3]);
        let coeffs = with_coefficients(&model);
        let t = 0.2;
        let x = DVector::from_vec(vec![0.9]);
        let (eta, xi) = optimal_market_controls(&coeffs, &model, t).unwrap();
        let h_hat = optimal_h(&coeffs, &model, t, &x).unwrap();
        let base = hjb_operator(&coeffs, &model, t, &x, &h_hat, &eta, &xi).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let d = DVector::from_fn(1, |_, _| rng.random::<f64>() - 0.5);
            let v = hjb_operator(&coeffs, &model, t, &x, &(&h_hat + &d), &eta, &xi).unwrap();
            // quadratic drop with curvature (theta/2 + 1) ΣΣ'
            let sig_d = model.params().asset_vol.transpose() * &d;
            let expected_drop = 0.5 * (model.theta() / 2.0 + 1.0) * sig_d.dot(&sig_d);
            assert_relative_eq!(base - v, expected_drop, epsilon = 1e-9);
        }
    }

    #[test]
    fn operator_is_exactly_linear_in_market_controls() {
        // Two-point expansion recovers the analytic shift coefficient.
        let model = scalar([0.2, 0.05], [0.1, 0.3]);
        let coeffs = with_coefficients(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let t = 0.63;
        let x = DVector::from_vec(vec![1.1]);
        let h = DVector::from_vec(vec![0.4]); // arbitrary investor control
        let (eta, xi) = optimal_market_controls(&coeffs, &model, t).unwrap();
        let base = hjb_operator(&coeffs, &model, t, &x, &h, &eta, &xi).unwrap();
        let c = market_shift_coefficient(&coeffs, &model, t, &x, &h).unwrap();
        for _ in 0..20 {
            let e = DMatrix::from_fn(1, 2, |_, _| rng.random::<f64>() - 0.5);
            let f = RowDVector::from_fn(2, |_, _| rng.random::<f64>() - 0.5);
            let v = hjb_operator(&coeffs, &model, t, &x, &h, &(&eta + &e), &(&xi + &f)).unwrap();
            let shift = market_shift(&e, &f, &x);
            let predicted = base - shift.dot(&c);
            assert_relative_eq!(v, predicted, epsilon = 1e-10);
        }
    }

    #[test]
    fn market_coefficient_range_component_vanishes_at_h_hat() {
        // Σ(Λ'Du + Σ'h_hat) = 0 by construction of the feedback control, so
        // the operator is stationary under any market perturbation whose
        // shift lies in the range of Σ'.
        let model = scalar([0.2, 0.05], [0.1, 0.3]);
        let coeffs = with_coefficients(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..30 {
            let t = rng.random::<f64>();
            let x = DVector::from_vec(vec![4.0 * (rng.random::<f64>() - 0.5)]);
            let h = optimal_h(&coeffs, &model, t, &x).unwrap();
            let c = market_shift_coefficient(&coeffs, &model, t, &x, &h).unwrap();
            let range_part = &model.params().asset_vol * &c;
            assert!(range_part.norm() < 1e-12);
        }
    }

    #[test]
    fn h_sigma_matches_mmm_residual_matrices() {
        // Σ'h_hat(t,x) = -(R_eta' x + R_xi') where R are the MMM residual
        // matrices, so their norms agree with the wealth-exposure
        // coefficients exactly.
        let model = scalar([0.2, 0.05], [0.1, 0.3]);
        let coeffs = with_coefficients(&model);
        let p = model.params();
        for i in [0usize, 50, 150] {
            let t = coeffs.grid()[i];
            let (q_mat, q_vec, _) = coeffs.node(i);
            let r_eta = (p.asset_vol.transpose()
                * model.gram().solve(&(model.sigma_lambda_t() * &q_mat)))
            .transpose();
            let r_xi = p.asset_vol.transpose()
                * model.gram().solve_vec(&(model.sigma_lambda_t() * &q_vec));
            // reconstruct Σ'h at a random x and compare
            let x = DVector::from_vec(vec![0.77]);
            let h = optimal_h(&coeffs, &model, t, &x).unwrap();
            let lhs = p.asset_vol.transpose() * h;
            let rhs = -(r_eta.transpose() * &x + r_xi);
            assert!((lhs - rhs).norm() < 1e-12);
        }
    }

    #[test]
    fn classification_on_independent_noise_model() {
        let model = scalar([0.2, 0.0], [0.0, 0.3]);
        let coeffs = with_coefficients(&model);
        let diag = classify_equilibrium(&coeffs, &model, 1e-7).unwrap();
        assert!(diag.is_mmm);
        assert!(diag.is_no_regret);
        assert!(diag.max_h_norm <= 1e-12);
        assert!(diag.max_h_sigma_norm <= 10.0 * diag.tol);
    }

    #[test]
    fn classification_on_zero_lambda_model() {
        let mut raw = crate::model::MarketModel {
            num_assets: 1,
            num_factors: 1,
            drift_base: DVector::from_vec(vec![0.06]),
            drift_loading: DMatrix::from_row_slice(1, 1, &[0.8]),
            factor_base: DVector::from_vec(vec![0.0]),
            factor_feedback: DMatrix::from_row_slice(1, 1, &[-0.5]),
            asset_vol: DMatrix::from_row_slice(1, 2, &[0.2, 0.05]),
            factor_vol: DMatrix::zeros(1, 2),
            rate: RateSchedule::constant(0.02),
            theta: 1.0,
            horizon: 1.0,
            initial_wealth: 1.0,
            x0: DVector::from_vec(vec![0.5]),
        };
        raw.factor_vol = DMatrix::zeros(1, 2);
        let model = Model::new(raw).unwrap();
        let coeffs = with_coefficients(&model);
        let diag = classify_equilibrium(&coeffs, &model, 1e-7).unwrap();
        assert!(diag.is_mmm);
        assert!(diag.is_no_regret);
        let (eta, xi) = optimal_market_controls(&coeffs, &model, 0.4).unwrap();
        let (eta_mmm, xi_mmm) = model.mmm_controls(0.4).unwrap();
        assert!((eta - eta_mmm).norm() < 1e-12);
        assert!((xi - xi_mmm).norm() < 1e-12);
    }

    #[test]
    fn classification_on_correlated_model_from_solved_coefficients() {
        // Derived on the correlated scalar instance: the self-consistent
        // system keeps Q and q at zero, so the equilibrium measure is the
        // MMM and the strategy is no-regret here as well.
        let model = scalar([0.2, 0.05], [0.1, 0.3]);
        let coeffs = with_coefficients(&model);
        let diag = classify_equilibrium(&coeffs, &model, 1e-7).unwrap();
        assert!(diag.is_mmm);
        assert!(diag.is_no_regret);
    }

    #[test]
    fn verification_conditions_hold_on_scalar_model() {
        let model = scalar([0.2, 0.05], [0.1, 0.3]);
        let coeffs = with_coefficients(&model);
        let report = verification_conditions(&coeffs, &model, &SampleSpec::quick(&model)).unwrap();
        assert!(report.hjb_residual_max <= 1e-6, "{report:?}");
        assert!(report.investor_max_operator <= 1e-6, "{report:?}");
        assert!(report.market_max_abs_operator <= 1e-6, "{report:?}");
        assert!(report.terminal_max_error == 0.0);
        assert!(report.h_gradient_max <= 1e-6);
        assert!(report.market_coeff_range_max <= 1e-10);
    }
}
