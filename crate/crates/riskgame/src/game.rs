//! Game-value estimation and saddle-point verification.
//!
//! Estimates the risk-sensitive criteria (J under the physical measure, the
//! tilted criterion under a market measure, and the exponentially
//! transformed criterion from the factor process alone), compares them
//! against the closed-form value 1/2 x0'Q(0)x0 + q'(0)x0 + k(0), probes the
//! saddle inequalities with common random numbers, and checks the pathwise
//! Itô identity that underlies the value representation.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::coeffs::ValueCoefficients;
use crate::equilibrium;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::Model;
use crate::simulate::{
    estimate, run_paths, screen_paths, InvestorSpec, MarketSpec, Measure, PathOutputs, SimContext,
    SimulationSpec, Tracking,
};

/// Absolute tolerance floor used when a payoff is deterministic and the
/// sample standard error collapses to zero: agreement is then required to
/// floating-point accumulation accuracy instead of a 3-sigma band.
pub fn se_floor(scale: f64) -> f64 {
    1e-10 * (1.0 + scale.abs())
}

/// Monte Carlo estimate of a risk-sensitive criterion with its closed-form
/// counterpart.
#[derive(Debug, Clone)]
pub struct GameValueReport {
    pub estimate: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub flagged: usize,
    pub closed_form: f64,
    /// (estimate - closed_form) / max(std_error, floor/3); zero-variance
    /// degenerate payoffs get the machine-accuracy floor so z stays finite.
    pub z_score: f64,
    pub pass_3se: bool,
}

impl GameValueReport {
    fn build(
        estimate: f64,
        std_error: f64,
        n_paths: usize,
        flagged: usize,
        closed_form: f64,
    ) -> Self {
        let floor = se_floor(closed_form);
        let diff = estimate - closed_form;
        let se_eff = std_error.max(floor / 3.0);
        GameValueReport {
            estimate,
            std_error,
            n_paths,
            flagged,
            closed_form,
            z_score: diff / se_eff,
            pass_3se: diff.abs() <= (3.0 * std_error).max(floor),
        }
    }
}

/// Closed-form game value 1/2 x0'Q(0)x0 + q'(0)x0 + k(0).
pub fn closed_form_value(coeffs: &ValueCoefficients, model: &Model) -> Result<f64> {
    coeffs.value_u(0.0, model.x0())
}

/// Plug-in estimator of -(2/theta) log E[exp(-(theta/2) log V_T)] with a
/// delta-method standard error.
fn log_exp_estimate(model: &Model, paths: &[PathOutputs]) -> Result<(f64, f64)> {
    let theta = model.theta();
    let (mean, se_mean) = estimate(paths, |p| (-0.5 * theta * p.log_wealth).exp());
    if !(mean.is_finite() && mean > 0.0) {
        return Err(Error::Estimation(format!(
            "exponential moment mean {mean} is not usable"
        )));
    }
    let est = -(2.0 / theta) * mean.ln();
    let se = (2.0 / theta.abs()) * se_mean / mean;
    Ok((est, se))
}

/// Risk-sensitive growth criterion under the physical measure.
pub fn criterion_j(
    model: &Model,
    spec: &SimulationSpec,
    investor: &InvestorSpec,
    closed_form: f64,
) -> Result<GameValueReport> {
    let spec = SimulationSpec {
        measure: Measure::Physical,
        ..spec.clone()
    };
    let ctx = SimContext::over_horizon(model, &spec, &MarketSpec::Zero, investor, None)?
        .with_tracking(Tracking::wealth_only());
    let (paths, flagged) = screen_paths(run_paths(&ctx, spec.n_paths))?;
    let (est, se) = log_exp_estimate(model, &paths)?;
    Ok(GameValueReport::build(est, se, paths.len(), flagged, closed_form))
}

/// Tilted criterion: wealth follows the market-measure dynamics under the
/// supplied controls.
pub fn criterion_j_tilde(
    model: &Model,
    spec: &SimulationSpec,
    investor: &InvestorSpec,
    market: &MarketSpec,
    closed_form: f64,
) -> Result<GameValueReport> {
    let spec = SimulationSpec {
        measure: Measure::Market,
        ..spec.clone()
    };
    let ctx = SimContext::over_horizon(model, &spec, market, investor, None)?
        .with_tracking(Tracking::wealth_only());
    let (paths, flagged) = screen_paths(run_paths(&ctx, spec.n_paths))?;
    let (est, se) = log_exp_estimate(model, &paths)?;
    Ok(GameValueReport::build(est, se, paths.len(), flagged, closed_form))
}

/// Where the exponentially transformed estimate sits relative to its
/// riskless upper bound exp(-(theta/2) int r) v^{-theta/2}.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundStatus {
    /// Strictly below the bound by more than 3 standard errors.
    StrictlyInside,
    /// Equal to the bound within accumulation accuracy; exact when the
    /// equilibrium strategy is the riskless-only allocation, for which the
    /// bounding no-trade policy is not suboptimal but optimal.
    AttainedAtNoRegret,
    /// Above the bound beyond tolerance (only possible for theta < 0 runs,
    /// where the inequality direction is reported, not asserted).
    Violated,
}

/// Estimate of the exponentially transformed criterion from factor paths
/// under the fully tilted measure, with the boundedness check.
#[derive(Debug, Clone)]
pub struct UTildeReport {
    pub estimate: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub flagged: usize,
    /// exp(-(theta/2) u(t, x)) from the solved coefficients.
    pub closed_form: f64,
    pub pass_3se: bool,
    /// Riskless upper bound exp(-(theta/2) int_t^T r) v^{-theta/2}.
    pub upper_bound: f64,
    pub bound_status: BoundStatus,
    /// The equivalent untransformed criterion estimate, computed from the
    /// same sample mean (the transform is exact, not re-estimated).
    pub criterion_estimate: f64,
}

/// Exponentially transformed criterion ũ(t, x) estimated by Monte Carlo:
/// E[exp((theta/2) ∫_0^{T-t} g ds) v^{-theta/2}] with the factor process
/// under the fully tilted measure started at x.
pub fn u_tilde_estimate(
    model: &Model,
    spec: &SimulationSpec,
    investor: &InvestorSpec,
    market: &MarketSpec,
    coeffs: &ValueCoefficients,
    t: f64,
    x: &DVector<f64>,
) -> Result<UTildeReport> {
    let theta = model.theta();
    let v = model.initial_wealth();
    let span = model.horizon() - t;
    if span <= 0.0 {
        return Err(Error::TimeOutOfRange {
            t,
            horizon: model.horizon(),
        });
    }
    let spec = SimulationSpec {
        measure: Measure::Full,
        ..spec.clone()
    };
    let ctx = SimContext::new(model, &spec, market, investor, None, t, span, x.clone())?
        .with_tracking(Tracking::running_cost_only());
    let (paths, flagged) = screen_paths(run_paths(&ctx, spec.n_paths))?;
    let scale = v.powf(-0.5 * theta);
    let (mean, se_mean) = estimate(&paths, |p| (0.5 * theta * p.int_g).exp());
    let est = mean * scale;
    let se = se_mean * scale;

    let closed = (-0.5 * theta * coeffs.value_u(t, x)?).exp();
    let floor = se_floor(closed);
    let pass = (est - closed).abs() <= (3.0 * se).max(floor);

    let bound = (-0.5 * theta * model.rate().integral(t, model.horizon())).exp() * scale;
    let bound_status = if est < bound - (3.0 * se).max(floor) {
        BoundStatus::StrictlyInside
    } else if est <= bound + (3.0 * se).max(floor) {
        BoundStatus::AttainedAtNoRegret
    } else {
        BoundStatus::Violated
    };
    let criterion_estimate = v.ln() - (2.0 / theta) * mean.ln();

    Ok(UTildeReport {
        estimate: est,
        std_error: se,
        n_paths: paths.len(),
        flagged,
        closed_form: closed,
        pass_3se: pass,
        upper_bound: bound,
        bound_status,
        criterion_estimate,
    })
}

/// Monte Carlo martingale check of a density accumulator.
#[derive(Debug, Clone)]
pub struct DensityCheck {
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub flagged: usize,
    pub pass: bool,
}

fn density_check<F: Fn(&PathOutputs) -> f64>(paths: &[PathOutputs], flagged: usize, f: F) -> DensityCheck {
    let (mean, se) = estimate(paths, f);
    DensityCheck {
        mean,
        std_error: se,
        n_paths: paths.len(),
        flagged,
        pass: (mean - 1.0).abs() <= (3.0 * se).max(se_floor(1.0)),
    }
}

/// E[D(T)] = 1 for the market-tilt density under the physical measure.
pub fn market_density_check(
    model: &Model,
    spec: &SimulationSpec,
    market: &MarketSpec,
) -> Result<DensityCheck> {
    let spec = SimulationSpec {
        measure: Measure::Physical,
        ..spec.clone()
    };
    let ctx = SimContext::over_horizon(model, &spec, market, &InvestorSpec::Zero, None)?
        .with_tracking(Tracking {
            market_density: true,
            investor_density: false,
            running_cost: false,
        });
    let (paths, flagged) = screen_paths(run_paths(&ctx, spec.n_paths))?;
    Ok(density_check(&paths, flagged, |p| p.log_density_market.exp()))
}

/// Mean-one check of the investor-tilt density under the market measure.
pub fn investor_density_check(
    model: &Model,
    spec: &SimulationSpec,
    investor: &InvestorSpec,
    market: &MarketSpec,
) -> Result<DensityCheck> {
    let spec = SimulationSpec {
        measure: Measure::Market,
        ..spec.clone()
    };
    let ctx = SimContext::over_horizon(model, &spec, market, investor, None)?
        .with_tracking(Tracking {
            market_density: false,
            investor_density: true,
            running_cost: false,
        });
    let (paths, flagged) = screen_paths(run_paths(&ctx, spec.n_paths))?;
    Ok(density_check(&paths, flagged, |p| p.log_density_investor.exp()))
}

/// Mean-one check of the combined density
/// exp(-(theta/2) ∫ [(QX+q)'Λ + h'Σ] dW - compensator) under the market
/// measure, the integrability certificate of the value representation.
pub fn combined_density_check(
    model: &Model,
    spec: &SimulationSpec,
    coeffs: &Arc<ValueCoefficients>,
    investor: &InvestorSpec,
    market: &MarketSpec,
) -> Result<DensityCheck> {
    let spec = SimulationSpec {
        measure: Measure::Market,
        ..spec.clone()
    };
    let ctx = SimContext::over_horizon(model, &spec, market, investor, Some(coeffs))?
        .with_tracking(Tracking::wealth_only());
    let (paths, flagged) = screen_paths(run_paths(&ctx, spec.n_paths))?;
    Ok(density_check(&paths, flagged, |p| p.log_density_combined.exp()))
}

/// Which player is perturbed in a saddle probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeSide {
    Investor,
    Market,
}

/// Perturbation plan for the saddle probes.
#[derive(Debug, Clone)]
pub struct ProbeSpec {
    pub n_directions: usize,
    pub epsilons: Vec<f64>,
    pub direction_seed: u64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            n_directions: 20,
            epsilons: vec![0.05, 0.1, 0.2],
            direction_seed: 0xd12ec7,
        }
    }
}

/// One perturbed run compared against the equilibrium run on the same
/// Brownian increments.
#[derive(Debug, Clone)]
pub struct ProbeRow {
    pub side: ProbeSide,
    pub direction: usize,
    pub eps: f64,
    pub estimate: f64,
    /// estimate - equilibrium estimate.
    pub diff: f64,
    /// Delta-method standard error of the paired difference.
    pub se_diff: f64,
    pub violation: bool,
}

#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub equilibrium: GameValueReport,
    pub rows: Vec<ProbeRow>,
    pub violations: usize,
    /// max |diff| / eps over all rows, the empirical continuity constant.
    pub max_diff_over_eps: f64,
}

fn tilde_samples(
    model: &Model,
    spec: &SimulationSpec,
    investor: &InvestorSpec,
    market: &MarketSpec,
) -> Result<Vec<f64>> {
    let theta = model.theta();
    let spec = SimulationSpec {
        measure: Measure::Market,
        ..spec.clone()
    };
    let ctx = SimContext::over_horizon(model, &spec, market, investor, None)?;
    let (paths, _) = screen_paths(run_paths(&ctx, spec.n_paths))?;
    Ok(paths
        .iter()
        .map(|p| (-0.5 * theta * p.log_wealth).exp())
        .collect())
}

/// Difference of two plug-in log-mean estimates from paired samples, with
/// the covariance-aware delta-method standard error. Common random numbers
/// make this the meaningful comparison.
fn paired_diff(theta: f64, a: &[f64], b: &[f64]) -> (f64, f64) {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let (ma, _) = linalg::mean_and_se(a);
    let (mb, _) = linalg::mean_and_se(b);
    let diff = -(2.0 / theta) * (ma.ln() - mb.ln());
    let mut var = 0.0;
    for (&xa, &xb) in a.iter().zip(b.iter()) {
        let d = xa / ma - xb / mb;
        var += d * d;
    }
    var /= n - 1.0;
    let se = (2.0 / theta.abs()) * (var / n).sqrt();
    (diff, se)
}

/// Probes the saddle inequalities with common random numbers: investor
/// deviations must not increase the tilted criterion beyond noise, market
/// deviations must not decrease it beyond noise.
pub fn saddle_probe(
    model: &Model,
    spec: &SimulationSpec,
    coeffs: &Arc<ValueCoefficients>,
    probe: &ProbeSpec,
) -> Result<ProbeReport> {
    let theta = model.theta();
    let m = model.num_assets();
    let n = model.num_factors();
    let d = model.num_drivers();
    let closed = closed_form_value(coeffs, model)?;

    let eq_market = MarketSpec::Equilibrium(coeffs.clone());
    let eq_investor = InvestorSpec::Equilibrium(coeffs.clone());
    let base_samples = tilde_samples(model, spec, &eq_investor, &eq_market)?;
    let (base_mean, base_se_mean) = linalg::mean_and_se(&base_samples);
    let base_est = -(2.0 / theta) * base_mean.ln();
    let base_se = (2.0 / theta.abs()) * base_se_mean / base_mean;
    let equilibrium = GameValueReport::build(
        base_est,
        base_se,
        base_samples.len(),
        0,
        closed,
    );

    let mut rng = ChaCha8Rng::seed_from_u64(probe.direction_seed);
    let mut rows = Vec::new();
    let mut violations = 0usize;
    let mut max_ratio: f64 = 0.0;
    let tol = se_floor(closed);

    for dir_idx in 0..probe.n_directions {
        let dir = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let dir = &dir / dir.norm().max(1e-12);
        for &eps in &probe.epsilons {
            let investor = InvestorSpec::Perturbed {
                base: Box::new(eq_investor.clone()),
                dir: dir.clone(),
                eps,
            };
            let samples = tilde_samples(model, spec, &investor, &eq_market)?;
            let (diff, se_diff) = paired_diff(theta, &samples, &base_samples);
            let violation = diff > (3.0 * se_diff).max(tol);
            if violation {
                violations += 1;
            }
            max_ratio = max_ratio.max(diff.abs() / eps);
            rows.push(ProbeRow {
                side: ProbeSide::Investor,
                direction: dir_idx,
                eps,
                estimate: base_est + diff,
                diff,
                se_diff,
                violation,
            });
        }
    }

    for dir_idx in 0..probe.n_directions {
        let d_eta = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let d_xi = RowDVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let scale = linalg::spectral_norm(&d_eta).max(d_xi.norm()).max(1e-12);
        let d_eta = d_eta / scale;
        let d_xi = d_xi / scale;
        for &eps in &probe.epsilons {
            let market = MarketSpec::Perturbed {
                base: Box::new(eq_market.clone()),
                d_eta: d_eta.clone(),
                d_xi: d_xi.clone(),
                eps,
            };
            let samples = tilde_samples(model, spec, &eq_investor, &market)?;
            let (diff, se_diff) = paired_diff(theta, &samples, &base_samples);
            let violation = diff < -(3.0 * se_diff).max(tol);
            if violation {
                violations += 1;
            }
            max_ratio = max_ratio.max(diff.abs() / eps);
            rows.push(ProbeRow {
                side: ProbeSide::Market,
                direction: dir_idx,
                eps,
                estimate: base_est + diff,
                diff,
                se_diff,
                violation,
            });
        }
    }

    Ok(ProbeReport {
        equilibrium,
        rows,
        violations,
        max_diff_over_eps: max_ratio,
    })
}

/// Convergence report for the pathwise exponential identity: the same
/// Brownian path evaluated at step h and h/2; the discrete gap between the
/// two sides of the identity must shrink at first order.
#[derive(Debug, Clone)]
pub struct PathwiseIdentityReport {
    pub max_rel_coarse: f64,
    pub max_rel_fine: f64,
    /// coarse / fine; first-order convergence puts this near 2.
    pub ratio: f64,
    pub n_paths: usize,
}

/// Evaluates both sides of the pathwise identity
///
/// exp{chi(T, X_T) + Z(T)} = exp{chi(0, x0)} exp[ ∫ -(theta/2)(A u) ds
///     - (theta/2) ∫ (Du'Λ + h'Σ) dW - (theta^2/8) ∫ |Du'Λ + h'Σ|^2 ds ]
///
/// on simulated market-measure paths (chi(t,x) = -(theta/2)(u(t,x) - log v),
/// Z the accumulated log of v^{theta/2} V_T^{-theta/2}). The identity is an
/// Itô identity, so it holds for any controls; the A u term only vanishes at
/// the saddle point.
pub fn pathwise_identity_check(
    model: &Model,
    coeffs: &Arc<ValueCoefficients>,
    investor: &InvestorSpec,
    market: &MarketSpec,
    n_paths: usize,
    coarse_steps: usize,
    seed: u64,
) -> Result<PathwiseIdentityReport> {
    let theta = model.theta();
    let t_end = model.horizon();
    let fine_steps = coarse_steps * 2;
    let d = model.num_drivers();

    // Tabulate controls/coefficients at the fine resolution; the coarse pass
    // uses every second entry.
    let dt_f = t_end / fine_steps as f64;
    let mut eta = Vec::with_capacity(fine_steps);
    let mut xi = Vec::with_capacity(fine_steps);
    for i in 0..fine_steps {
        let t = i as f64 * dt_f;
        let (e, x) = market.eval(model, t)?;
        eta.push(e);
        xi.push(x);
    }

    let run_resolution = |increments: &[DVector<f64>], steps: usize| -> Result<f64> {
        // returns the relative gap |lhs - rhs| / |lhs| for one path
        let dt = t_end / steps as f64;
        let stride = fine_steps / steps;
        let p = model.params();
        let mut x = model.x0().clone();
        let mut int_g = 0.0f64;
        let mut int_hs_dw = 0.0f64;
        let mut int_hs_sq = 0.0f64;
        let mut int_au = 0.0f64;
        let mut int_mix_dw = 0.0f64;
        let mut int_mix_sq = 0.0f64;
        for i in 0..steps {
            let t = i as f64 * dt;
            let mut dw = DVector::zeros(d);
            for s in 0..stride {
                dw += &increments[i * stride + s];
            }
            let eta_i = &eta[i * stride];
            let xi_i = &xi[i * stride];
            let r_i = model.rate_at(t);
            let h = investor.eval(model, t, &x)?;
            let g = model.running_cost_g(&x, &h, eta_i, xi_i, r_i);
            let du = coeffs.grad_u(t, &x)?;
            let au = equilibrium::hjb_operator(coeffs, model, t, &x, &h, eta_i, xi_i)?;
            let sigma_t_h = p.asset_vol.transpose() * &h;
            let mix = p.factor_vol.transpose() * &du + &sigma_t_h;

            int_g += g * dt;
            int_hs_dw += sigma_t_h.dot(&dw);
            int_hs_sq += sigma_t_h.dot(&sigma_t_h) * dt;
            int_au += au * dt;
            int_mix_dw += mix.dot(&dw);
            int_mix_sq += mix.dot(&mix) * dt;

            // market-measure factor step
            let phi = eta_i.transpose() * &x + xi_i.transpose();
            let drift = &p.factor_base + &p.factor_feedback * &x - &p.factor_vol * &phi;
            x += drift * dt + &p.factor_vol * &dw;
        }
        let u_t = coeffs.value_u(t_end, &x)?;
        let chi_t = -0.5 * theta * (u_t - model.initial_wealth().ln());
        let z_bar = 0.5 * theta * (int_g - int_hs_dw - 0.25 * theta * int_hs_sq);
        let lhs = (chi_t + z_bar).exp();

        let chi_0 = -0.5 * theta * (coeffs.value_u(0.0, model.x0())? - model.initial_wealth().ln());
        let rhs = (chi_0 - 0.5 * theta * int_au
            - 0.5 * theta * int_mix_dw
            - 0.125 * theta * theta * int_mix_sq)
            .exp();
        Ok((lhs - rhs).abs() / lhs.abs().max(1e-300))
    };

    let gaps: Vec<(f64, f64)> = (0..n_paths as u64)
        .into_par_iter()
        .map(|idx| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(idx);
            let sqrt_dt_f = dt_f.sqrt();
            let increments: Vec<DVector<f64>> = (0..fine_steps)
                .map(|_| {
                    DVector::from_fn(d, |_, _| sqrt_dt_f * rng.sample::<f64, _>(StandardNormal))
                })
                .collect();
            let coarse = run_resolution(&increments, coarse_steps)?;
            let fine = run_resolution(&increments, fine_steps)?;
            Ok((coarse, fine))
        })
        .collect::<Result<Vec<_>>>()?;

    let max_rel_coarse = gaps.iter().map(|g| g.0).fold(0.0, f64::max);
    let max_rel_fine = gaps.iter().map(|g| g.1).fold(0.0, f64::max);
    let ratio = if max_rel_fine > 0.0 {
        max_rel_coarse / max_rel_fine
    } else {
        f64::INFINITY
    };
    Ok(PathwiseIdentityReport {
        max_rel_coarse,
        max_rel_fine,
        ratio,
        n_paths,
    })
}

/// Jackknife standard error of the plug-in criterion estimator, a
/// cross-check on the delta method.
pub fn jackknife_se(theta: f64, samples: &[f64]) -> f64 {
    let n = samples.len();
    let total = linalg::compensated_sum(samples);
    let mut reps = Vec::with_capacity(n);
    for s in samples {
        let mean_i = (total - s) / (n as f64 - 1.0);
        reps.push(-(2.0 / theta) * mean_i.ln());
    }
    let (rep_mean, _) = linalg::mean_and_se(&reps);
    let mut var = 0.0;
    for r in &reps {
        var += (r - rep_mean) * (r - rep_mean);
    }
    var *= (n as f64 - 1.0) / n as f64;
    var.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::solve_coefficients;
    use crate::model::MarketModel;
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

    #[test]
    fn j_for_no_regret_is_riskless_growth() {
        let model = scalar([0.2, 0.05], [0.1, 0.3]);
        let spec = SimulationSpec::new(256, 100, 9, Measure::Physical);
        let report = criterion_j(&model, &spec, &InvestorSpec::Zero, 0.02).unwrap();
        assert!(report.pass_3se, "{report:?}");
        assert_relative_eq!(report.estimate, 0.02, epsilon = 1e-12);
        assert!(report.z_score.is_finite());
    }

    #[test]
    fn j_tilde_matches_closed_form_at_equilibrium() {
        let model = scalar([0.2, 0.05], [0.1, 0.3]);
        let coeffs = Arc::new(solve_coefficients(&model, 200).unwrap());
        let closed = closed_form_value(&coeffs, &model).unwrap();
        let spec = SimulationSpec::new(512, 100, 10, Measure::Market);
        let report = criterion_j_tilde(
            &model,
            &spec,
            &InvestorSpec::Equilibrium(coeffs.clone()),
            &MarketSpec::Equilibrium(coeffs.clone()),
            closed,
        )
        .unwrap();
        assert!(report.pass_3se, "{report:?}");
        assert!(report.z_score.is_finite());
    }

    #[test]
    fn j_tilde_is_control_independent_when_investor_holds_bond() {
        // With h = 0 the wealth is the money-market account whatever the
        // market does; that is exactly why the strategy is called no-regret.
        let model = scalar([0.2, 0.05], [0.1, 0.3]);
        let spec = SimulationSpec::new(64, 80, 17, Measure::Market);
        for market in [MarketSpec::Zero, MarketSpec::Mmm] {
            let report =
                criterion_j_tilde(&model, &spec, &InvestorSpec::Zero, &market, 0.02).unwrap();
            assert_relative_eq!(report.estimate, 0.02, epsilon = 1e-12);
        }
    }

    #[test]
    fn u_tilde_exact_when_h_zero() {
        // g = -r at h = 0, so the transformed criterion is the discounted
        // constant exp(-(theta/2) int r) v^{-theta/2} on every path.
        let model = scalar([0.2, 0.05], [0.1, 0.3]);
        let coeffs = Arc::new(solve_coefficients(&model, 100).unwrap());
        let spec = SimulationSpec::new(128, 60, 3, Measure::Full);
        let report = u_tilde_estimate(
            &model,
            &spec,
            &InvestorSpec::Zero,
            &MarketSpec::Mmm,
            &coeffs,
            0.25,
            &DVector::from_vec(vec![0.4]),
        )
        .unwrap();
        let expected = (-0.5 * model.rate().integral(0.25, 1.0)).exp();
        assert_relative_eq!(report.estimate, expected, epsilon = 1e-12);
        assert_eq!(report.std_error, 0.0);
        assert!(report.pass_3se);
        assert_eq!(report.bound_status, BoundStatus::AttainedAtNoRegret);
        // exact transform consistency
        assert_relative_eq!(
            (-0.5 * model.theta() * report.criterion_estimate).exp(),
            report.estimate,
            epsilon = 1e-14
        );
    }

    #[test]
    fn u_tilde_strictly_inside_for_nonzero_h() {
        // A deliberately non-optimal h makes the transformed criterion
        // strictly worse (larger) than the no-trade bound for theta > 0;
        // the bound check must then flag the violation of the upper bound.
        let model = scalar([0.2, 0.05], [0.1, 0.3]);
        let coeffs = Arc::new(solve_coefficients(&model, 100).unwrap());
        let spec = SimulationSpec::new(4000, 100, 5, Measure::Full);
        let report = u_tilde_estimate(
            &model,
            &spec,
            &InvestorSpec::Constant(DVector::from_vec(vec![0.8])),
            &MarketSpec::Mmm,
            &coeffs,
            0.0,
            model.x0(),
        )
        .unwrap();
        assert!(report.estimate > report.upper_bound);
        assert_eq!(report.bound_status, BoundStatus::Violated);
    }

    #[test]
    fn paired_diff_zero_for_identical_samples() {
        let samples = vec![1.0, 1.1, 0.9, 1.05];
        let (diff, se) = paired_diff(1.0, &samples, &samples);
        assert_eq!(diff, 0.0);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn null_perturbation_reproduces_equilibrium_exactly() {
        let model = scalar([0.2, 0.05], [0.1, 0.3]);
        let coeffs = Arc::new(solve_coefficients(&model, 100).unwrap());
        let spec = SimulationSpec::new(500, 40, 2, Measure::Market);
        let probe = ProbeSpec {
            n_directions: 2,
            epsilons: vec![0.0],
            direction_seed: 9,
        };
        let report = saddle_probe(&model, &spec, &coeffs, &probe).unwrap();
        for row in &report.rows {
            assert_eq!(row.diff, 0.0, "eps = 0 must replay the same paths");
            assert_eq!(row.se_diff, 0.0);
        }
    }

    #[test]
    fn degenerate_model_value_is_discount_only() {
        // Λ = 0 and A = 0 with a = r 1: the closed form is k(0) alone and
        // the Monte Carlo estimate reproduces it.
        let raw = MarketModel {
            num_assets: 1,
            num_factors: 1,
            drift_base: DVector::from_vec(vec![0.02]),
            drift_loading: DMatrix::zeros(1, 1),
            factor_base: DVector::from_vec(vec![0.0]),
            factor_feedback: DMatrix::from_row_slice(1, 1, &[-0.5]),
            asset_vol: DMatrix::from_row_slice(1, 2, &[0.2, 0.05]),
            factor_vol: DMatrix::zeros(1, 2),
            rate: RateSchedule::constant(0.02),
            theta: 1.0,
            horizon: 1.0,
            initial_wealth: 3.0,
            x0: DVector::from_vec(vec![0.5]),
        };
        let model = Model::new(raw).unwrap();
        let coeffs = Arc::new(solve_coefficients(&model, 100).unwrap());
        let closed = closed_form_value(&coeffs, &model).unwrap();
        assert_relative_eq!(closed, 3.0f64.ln() + 0.02, epsilon = 1e-12);
        let spec = SimulationSpec::new(256, 50, 77, Measure::Market);
        let report = criterion_j_tilde(
            &model,
            &spec,
            &InvestorSpec::Equilibrium(coeffs.clone()),
            &MarketSpec::Equilibrium(coeffs.clone()),
            closed,
        )
        .unwrap();
        assert!(report.pass_3se, "{report:?}");
    }

    #[test]
    fn saddle_probe_no_violations_on_scalar_model() {
        let model = scalar([0.2, 0.05], [0.1, 0.3]);
        let coeffs = Arc::new(solve_coefficients(&model, 100).unwrap());
        let spec = SimulationSpec::new(2000, 50, 31, Measure::Market);
        let probe = ProbeSpec {
            n_directions: 4,
            epsilons: vec![0.1, 0.2],
            direction_seed: 5,
        };
        let report = saddle_probe(&model, &spec, &coeffs, &probe).unwrap();
        assert_eq!(report.violations, 0, "{:?}", report.rows);
        // market side is exactly flat at the no-regret equilibrium
        for row in report.rows.iter().filter(|r| r.side == ProbeSide::Market) {
            assert_eq!(row.diff, 0.0);
        }
        // continuity in eps at 0
        assert!(report.max_diff_over_eps.is_finite());
    }

    #[test]
    fn investor_deviation_strictly_lowers_value_when_visible() {
        // Independent-noise model, large eps: the quadratic loss
        // 1/2 (1 + theta/2) eps^2 d'ΣΣ'd T must clear the noise floor.
        let model = scalar([0.2, 0.0], [0.0, 0.3]);
        let coeffs = Arc::new(solve_coefficients(&model, 100).unwrap());
        let spec = SimulationSpec::new(4000, 50, 77, Measure::Market);
        let eq_m = MarketSpec::Equilibrium(coeffs.clone());
        let eq_i = InvestorSpec::Equilibrium(coeffs.clone());
        let base = tilde_samples(&model, &spec, &eq_i, &eq_m).unwrap();
        let perturbed = tilde_samples(
            &model,
            &spec,
            &InvestorSpec::Perturbed {
                base: Box::new(eq_i),
                dir: DVector::from_vec(vec![1.0]),
                eps: 2.0,
            },
            &eq_m,
        )
        .unwrap();
        let (diff, se) = paired_diff(model.theta(), &perturbed, &base);
        // expected drop: 1/2 * 1.5 * 4 * 0.04 = 0.12
        assert!(diff < -3.0 * se, "diff {diff} se {se}");
        assert_relative_eq!(diff, -0.12, epsilon = 0.02);
    }

    /// A candidate value function with a nonzero, time-varying gradient
    /// term; linear node data so the Hermite interpolant reproduces it
    /// exactly. Zero curvature keeps the discrete identity gap first order
    /// (curvature adds an order-1/2 quadratic-variation fluctuation).
    fn synthetic_candidate(model: &Model, nodes: usize) -> Arc<ValueCoefficients> {
        let t_end = model.horizon();
        let n = model.num_factors();
        let r = model.rate_at(0.0);
        let log_v = model.initial_wealth().ln();
        let mut grid = Vec::new();
        let mut values = Vec::new();
        let mut derivs = Vec::new();
        for i in 0..=nodes {
            let t = t_end * i as f64 / nodes as f64;
            grid.push(t);
            let q = DMatrix::zeros(n, n);
            let qv = DVector::from_element(n, 0.5 * (t_end - t));
            let k = log_v + r * (t_end - t);
            values.push((q, qv, k));
            derivs.push((
                DMatrix::zeros(n, n),
                DVector::from_element(n, -0.5),
                -r,
            ));
        }
        Arc::new(ValueCoefficients::from_nodes(grid, values, derivs).unwrap())
    }

    #[test]
    fn pathwise_identity_first_order_convergence() {
        // The identity is an Itô identity for any candidate quadratic value
        // function; with a nonzero gradient the discrete gap is genuinely
        // O(step) and must shrink accordingly. (With the solved equilibrium
        // coefficients the gradient term vanishes and the discrete identity
        // is already exact at every resolution.)
        let model = scalar([0.2, 0.05], [0.1, 0.3]);
        let coeffs = synthetic_candidate(&model, 50);
        let report = pathwise_identity_check(
            &model,
            &coeffs,
            &InvestorSpec::Constant(DVector::from_vec(vec![0.5])),
            &MarketSpec::Zero,
            200,
            200,
            99,
        )
        .unwrap();
        assert!(
            (1.4..=2.6).contains(&report.ratio),
            "refinement ratio {} (coarse {}, fine {})",
            report.ratio,
            report.max_rel_coarse,
            report.max_rel_fine
        );
    }

    #[test]
    fn pathwise_identity_exact_with_solved_coefficients() {
        // Solved coefficients have zero gradient, so every stochastic term
        // the discretization could miss is absent and the two sides agree to
        // rounding at any resolution, for any controls.
        let model = scalar([0.2, 0.05], [0.1, 0.3]);
        let coeffs = Arc::new(solve_coefficients(&model, 200).unwrap());
        let report = pathwise_identity_check(
            &model,
            &coeffs,
            &InvestorSpec::Constant(DVector::from_vec(vec![0.5])),
            &MarketSpec::Zero,
            50,
            100,
            7,
        )
        .unwrap();
        assert!(report.max_rel_coarse < 1e-12, "{report:?}");
        assert!(report.max_rel_fine < 1e-12, "{report:?}");
    }

    #[test]
    fn pathwise_identity_exact_in_deterministic_case() {
        // Λ = 0 and h = 0: both sides are deterministic and equal.
        let mut raw = MarketModel {
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
        let coeffs = Arc::new(solve_coefficients(&model, 100).unwrap());
        let report = pathwise_identity_check(
            &model,
            &coeffs,
            &InvestorSpec::Zero,
            &MarketSpec::Mmm,
            4,
            50,
            1,
        )
        .unwrap();
        assert!(report.max_rel_coarse < 1e-12, "{report:?}");
    }

    #[test]
    fn jackknife_agrees_with_delta_method() {
        let model = scalar([0.2, 0.05], [0.1, 0.3]);
        let spec = SimulationSpec::new(4000, 50, 13, Measure::Market);
        let samples = tilde_samples(
            &model,
            &spec,
            &InvestorSpec::Constant(DVector::from_vec(vec![0.7])),
            &MarketSpec::Mmm,
        )
        .unwrap();
        let theta = model.theta();
        let (mean, se_mean) = linalg::mean_and_se(&samples);
        let delta_se = (2.0 / theta.abs()) * se_mean / mean;
        let jk = jackknife_se(theta, &samples);
        assert_relative_eq!(delta_se, jk, max_relative = 0.05);
    }

    #[test]
    fn small_theta_criterion_approaches_log_wealth_mean() {
        // Diagnostic-only limit: J -> E[log V_T] as theta -> 0+.
        let mut raw = MarketModel {
            num_assets: 1,
            num_factors: 1,
            drift_base: DVector::from_vec(vec![0.06]),
            drift_loading: DMatrix::from_row_slice(1, 1, &[0.8]),
            factor_base: DVector::from_vec(vec![0.0]),
            factor_feedback: DMatrix::from_row_slice(1, 1, &[-0.5]),
            asset_vol: DMatrix::from_row_slice(1, 2, &[0.2, 0.05]),
            factor_vol: DMatrix::from_row_slice(1, 2, &[0.1, 0.3]),
            rate: RateSchedule::constant(0.02),
            theta: 1e-3,
            horizon: 1.0,
            initial_wealth: 1.0,
            x0: DVector::from_vec(vec![0.5]),
        };
        raw.theta = 1e-3;
        let model = Model::new(raw).unwrap();
        let spec = SimulationSpec::new(20_000, 50, 8, Measure::Physical);
        let h = InvestorSpec::Constant(DVector::from_vec(vec![0.5]));
        let ctx =
            SimContext::over_horizon(&model, &spec, &MarketSpec::Zero, &h, None).unwrap();
        let (paths, _) = screen_paths(run_paths(&ctx, spec.n_paths)).unwrap();
        let (log_mean, _) = estimate(&paths, |p| p.log_wealth);
        let report = criterion_j(&model, &spec, &h, log_mean).unwrap();
        assert!(
            (report.estimate - log_mean).abs() < 1e-3,
            "J {} vs E log V {}",
            report.estimate,
            log_mean
        );
    }
}
