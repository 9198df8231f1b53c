//! Path simulation under the physical measure, the market-tilted measure,
//! and the fully tilted measure, with the Radon-Nikodym density
//! accumulators needed for the martingale and game-value checks.
//!
//! Conventions fixed here:
//! - The factor drift under the market measure is b + BX - Λ(eta'X + xi'),
//!   so the density of the tilted measure w.r.t. the physical one is the
//!   stochastic exponential of MINUS the shift: log D accumulates
//!   -phi'dW - 1/2 |phi|^2 dt. This is the sign that makes the MMM controls
//!   reproduce both the MMM density and the tilted drift matrix
//!   B - ΛΣ'(ΣΣ')⁻¹A; the importance-sampling tests pin it down.
//! - Wealth is simulated in log space (d log V = (r + h'delta_tilted
//!   - 1/2 h'ΣΣ'h)dt + h'Σ dW), which keeps V strictly positive.
//! - Every path derives its own generator from (seed, path index), so runs
//!   are bit-reproducible for any worker count, and statistics are reduced
//!   in path order with compensated summation.

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
use crate::model::{MarketControls, Model};

/// Which measure drives the Brownian increments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Measure {
    /// Physical measure: factor drift b + BX.
    Physical,
    /// Market-tilted measure: drift b + BX - Λ(eta'X + xi').
    Market,
    /// Fully tilted measure: additionally - (theta/2) ΛΣ'h.
    Full,
}

impl Measure {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "physical" => Ok(Measure::Physical),
            "market" => Ok(Measure::Market),
            "full" => Ok(Measure::Full),
            other => Err(Error::Config(format!(
                "unknown measure `{other}` (expected physical|market|full)"
            ))),
        }
    }
}

/// Market control selection for a run.
#[derive(Clone, Debug)]
pub enum MarketSpec {
    /// eta = 0, xi = 0.
    Zero,
    /// Minimal-martingale-measure controls.
    Mmm,
    /// Saddle-point controls from solved coefficients.
    Equilibrium(Arc<ValueCoefficients>),
    /// Explicit controls.
    Explicit(MarketControls),
    /// A perturbed base: (eta + eps d_eta, xi + eps d_xi).
    Perturbed {
        base: Box<MarketSpec>,
        d_eta: DMatrix<f64>,
        d_xi: RowDVector<f64>,
        eps: f64,
    },
}

impl MarketSpec {
    pub fn eval(&self, model: &Model, t: f64) -> Result<(DMatrix<f64>, RowDVector<f64>)> {
        match self {
            MarketSpec::Zero => Ok((
                DMatrix::zeros(model.num_factors(), model.num_drivers()),
                RowDVector::zeros(model.num_drivers()),
            )),
            MarketSpec::Mmm => Ok((model.mmm_eta(), model.mmm_xi_with_rate(model.rate_at(t)))),
            MarketSpec::Equilibrium(coeffs) => {
                equilibrium::optimal_market_controls(coeffs, model, t)
            }
            MarketSpec::Explicit(controls) => Ok(controls.eval(model, t)),
            MarketSpec::Perturbed {
                base,
                d_eta,
                d_xi,
                eps,
            } => {
                let (eta, xi) = base.eval(model, t)?;
                Ok((eta + d_eta * *eps, xi + d_xi * *eps))
            }
        }
    }
}

/// Investor control selection for a run.
#[derive(Clone, Debug)]
pub enum InvestorSpec {
    /// No-regret strategy: everything in the riskless account.
    Zero,
    /// Constant allocation.
    Constant(DVector<f64>),
    /// Saddle-point feedback from solved coefficients.
    Equilibrium(Arc<ValueCoefficients>),
    /// A perturbed base: h + eps d.
    Perturbed {
        base: Box<InvestorSpec>,
        dir: DVector<f64>,
        eps: f64,
    },
}

impl InvestorSpec {
    /// Evaluates the allocation at one (t, x).
    pub fn eval(&self, model: &Model, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            InvestorSpec::Zero => Ok(DVector::zeros(model.num_assets())),
            InvestorSpec::Constant(h) => Ok(h.clone()),
            InvestorSpec::Equilibrium(coeffs) => equilibrium::optimal_h(coeffs, model, t, x),
            InvestorSpec::Perturbed { base, dir, eps } => {
                Ok(base.eval(model, t, x)? + dir * *eps)
            }
        }
    }

    /// Admissibility proxy: the largest h'ΣΣ'h over a time grid and a set of
    /// factor states. Must be finite for a usable control.
    pub fn max_quadratic_exposure(
        &self,
        model: &Model,
        times: &[f64],
        states: &[DVector<f64>],
    ) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for &t in times {
            for x in states {
                let h = self.eval(model, t, x)?;
                let sig_h = model.params().asset_vol.transpose() * h;
                worst = worst.max(sig_h.dot(&sig_h));
            }
        }
        Ok(worst)
    }
}

/// Simulation request: path count, step count, seed, measure.
#[derive(Debug, Clone)]
pub struct SimulationSpec {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub measure: Measure,
}

impl SimulationSpec {
    pub fn new(n_paths: usize, n_steps: usize, seed: u64, measure: Measure) -> Self {
        assert!(n_paths >= 1 && n_steps >= 1);
        Self {
            n_paths,
            n_steps,
            seed,
            measure,
        }
    }
}

/// Fraction of flagged (non-finite) paths tolerated before a run fails.
pub const FLAGGED_LIMIT: f64 = 0.001;

/// Which per-path accumulators a run keeps. Skipping unused ones matters on
/// large path counts.
#[derive(Debug, Clone, Copy)]
pub struct Tracking {
    pub market_density: bool,
    pub investor_density: bool,
    pub running_cost: bool,
}

impl Tracking {
    pub fn all() -> Self {
        Self {
            market_density: true,
            investor_density: true,
            running_cost: true,
        }
    }

    /// Wealth-only runs (game criteria).
    pub fn wealth_only() -> Self {
        Self {
            market_density: false,
            investor_density: false,
            running_cost: false,
        }
    }

    pub fn running_cost_only() -> Self {
        Self {
            market_density: false,
            investor_density: false,
            running_cost: true,
        }
    }
}

type CoeffNodes = (Vec<DMatrix<f64>>, Vec<DVector<f64>>);

enum TabInvestor {
    Zero,
    Constant(DVector<f64>),
    Feedback {
        /// (ΣΣ')⁻¹ΣΛ', solved once.
        solve_map: DMatrix<f64>,
        q_mats: Vec<DMatrix<f64>>,
        q_vecs: Vec<DVector<f64>>,
        shift: Option<(DVector<f64>, f64)>,
    },
}

/// Per-run immutable context with all controls tabulated at the step left
/// endpoints, so the hot loop is allocation-free.
pub struct SimContext<'m> {
    model: &'m Model,
    measure: Measure,
    dt: f64,
    n_steps: usize,
    seed: u64,
    x_init: DVector<f64>,
    /// Absolute-time origin: step i sits at t_offset + i dt.
    t_offset: f64,
    eta: Vec<DMatrix<f64>>,
    xi_col: Vec<DVector<f64>>,
    r: Vec<f64>,
    investor: TabInvestor,
    /// Q(t_i), q(t_i) for the combined density accumulator.
    coeff_nodes: Option<CoeffNodes>,
    tracking: Tracking,
}

impl<'m> SimContext<'m> {
    /// Builds the tabulated context for paths over [t_offset, t_offset + span].
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: &'m Model,
        spec: &SimulationSpec,
        market: &MarketSpec,
        investor: &InvestorSpec,
        coeffs_for_combined: Option<&Arc<ValueCoefficients>>,
        t_offset: f64,
        span: f64,
        x_init: DVector<f64>,
    ) -> Result<Self> {
        let dt = span / spec.n_steps as f64;
        let mut eta = Vec::with_capacity(spec.n_steps);
        let mut xi_col = Vec::with_capacity(spec.n_steps);
        let mut r = Vec::with_capacity(spec.n_steps);
        for i in 0..spec.n_steps {
            let t = t_offset + i as f64 * dt;
            let (e, x) = market.eval(model, t)?;
            eta.push(e);
            xi_col.push(x.transpose());
            r.push(model.rate_at(t));
        }
        let investor = build_investor(model, investor, t_offset, dt, spec.n_steps)?;
        let coeff_nodes = match coeffs_for_combined {
            Some(c) => {
                let mut qs = Vec::with_capacity(spec.n_steps);
                let mut qv = Vec::with_capacity(spec.n_steps);
                for i in 0..spec.n_steps {
                    let t = t_offset + i as f64 * dt;
                    let point = c.at(t)?;
                    qs.push(point.q_mat);
                    qv.push(point.q_vec);
                }
                Some((qs, qv))
            }
            None => None,
        };
        Ok(Self {
            model,
            measure: spec.measure,
            dt,
            n_steps: spec.n_steps,
            seed: spec.seed,
            x_init,
            t_offset,
            eta,
            xi_col,
            r,
            investor,
            coeff_nodes,
            tracking: Tracking::all(),
        })
    }

    pub fn with_tracking(mut self, tracking: Tracking) -> Self {
        self.tracking = tracking;
        self
    }

    /// Standard context over the whole horizon from the model's x0.
    pub fn over_horizon(
        model: &'m Model,
        spec: &SimulationSpec,
        market: &MarketSpec,
        investor: &InvestorSpec,
        coeffs_for_combined: Option<&Arc<ValueCoefficients>>,
    ) -> Result<Self> {
        Self::new(
            model,
            spec,
            market,
            investor,
            coeffs_for_combined,
            0.0,
            model.horizon(),
            model.x0().clone(),
        )
    }
}

fn build_investor(
    model: &Model,
    spec: &InvestorSpec,
    t_offset: f64,
    dt: f64,
    n_steps: usize,
) -> Result<TabInvestor> {
    match spec {
        InvestorSpec::Zero => Ok(TabInvestor::Zero),
        InvestorSpec::Constant(h) => {
            if h.len() != model.num_assets() {
                return Err(Error::Dimension {
                    field: "h",
                    expected: format!("{}x1", model.num_assets()),
                    got: format!("{}x1", h.len()),
                });
            }
            if !h.iter().all(|v| v.is_finite()) {
                return Err(Error::Parameter {
                    field: "h",
                    reason: "non-finite allocation".into(),
                });
            }
            Ok(TabInvestor::Constant(h.clone()))
        }
        InvestorSpec::Equilibrium(coeffs) => {
            let solve_map = model.gram().solve(model.sigma_lambda_t());
            let mut q_mats = Vec::with_capacity(n_steps);
            let mut q_vecs = Vec::with_capacity(n_steps);
            for i in 0..n_steps {
                let t = t_offset + i as f64 * dt;
                let point = coeffs.at(t)?;
                q_mats.push(point.q_mat);
                q_vecs.push(point.q_vec);
            }
            Ok(TabInvestor::Feedback {
                solve_map,
                q_mats,
                q_vecs,
                shift: None,
            })
        }
        InvestorSpec::Perturbed { base, dir, eps } => {
            let built = build_investor(model, base, t_offset, dt, n_steps)?;
            match built {
                TabInvestor::Zero => Ok(TabInvestor::Constant(dir * *eps)),
                TabInvestor::Constant(h) => Ok(TabInvestor::Constant(h + dir * *eps)),
                TabInvestor::Feedback {
                    solve_map,
                    q_mats,
                    q_vecs,
                    ..
                } => Ok(TabInvestor::Feedback {
                    solve_map,
                    q_mats,
                    q_vecs,
                    shift: Some((dir.clone(), *eps)),
                }),
            }
        }
    }
}

/// Terminal summary of one simulated path.
#[derive(Debug, Clone)]
pub struct PathOutputs {
    pub x_terminal: DVector<f64>,
    pub log_wealth: f64,
    /// log of the market-tilt density d P^{eta,xi} / d P along the path
    /// (meaningful on physical-measure paths).
    pub log_density_market: f64,
    /// log of the investor-tilt density (meaningful on market-measure paths).
    pub log_density_investor: f64,
    /// log of the combined density accumulator
    /// -(theta/2) [ (QX+q)'Λ + h'Σ ] dW - compensator.
    pub log_density_combined: f64,
    /// Integral of the running cost g along the path.
    pub int_g: f64,
    pub ok: bool,
}

/// One fully recorded trajectory.
#[derive(Debug, Clone)]
pub struct PathBundle {
    pub times: Vec<f64>,
    pub increments: Vec<DVector<f64>>,
    pub factor: Vec<DVector<f64>>,
    pub wealth: Vec<f64>,
    pub log_density_market: Vec<f64>,
    pub log_density_investor: Vec<f64>,
}

trait Recorder {
    fn init(&mut self, ctx: &SimContext, x: &DVector<f64>, v: f64);
    fn step(
        &mut self,
        t_next: f64,
        dw: &DVector<f64>,
        x: &DVector<f64>,
        log_v: f64,
        log_d_market: f64,
        log_d_investor: f64,
    );
}

struct NoRecord;

impl Recorder for NoRecord {
    fn init(&mut self, _: &SimContext, _: &DVector<f64>, _: f64) {}
    fn step(&mut self, _: f64, _: &DVector<f64>, _: &DVector<f64>, _: f64, _: f64, _: f64, ) {}
}

impl Recorder for PathBundle {
    fn init(&mut self, ctx: &SimContext, x: &DVector<f64>, v: f64) {
        self.times.push(ctx.t_offset);
        self.factor.push(x.clone());
        self.wealth.push(v);
        self.log_density_market.push(0.0);
        self.log_density_investor.push(0.0);
    }

    fn step(
        &mut self,
        t_next: f64,
        dw: &DVector<f64>,
        x: &DVector<f64>,
        log_v: f64,
        log_d_market: f64,
        log_d_investor: f64,
    ) {
        self.times.push(t_next);
        self.increments.push(dw.clone());
        self.factor.push(x.clone());
        self.wealth.push(log_v.exp());
        self.log_density_market.push(log_d_market);
        self.log_density_investor.push(log_d_investor);
    }
}

/// Advances one path; all scratch vectors are reused across steps.
fn run_path<R: Recorder>(ctx: &SimContext, path_idx: u64, rec: &mut R) -> PathOutputs {
    let model = ctx.model;
    let p = model.params();
    let n = model.num_factors();
    let m = model.num_assets();
    let d = model.num_drivers();
    let theta = model.theta();
    let dt = ctx.dt;
    let sqrt_dt = dt.sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    rng.set_stream(path_idx);

    let lam_sig = model.sigma_lambda_t().transpose(); // ΛΣ' (n x m)
    let mut x = ctx.x_init.clone();
    let mut log_v = model.initial_wealth().ln();
    let mut log_d_market = 0.0f64;
    let mut log_d_investor = 0.0f64;
    let mut log_d_combined = 0.0f64;
    let mut int_g = 0.0f64;
    let mut ok = true;

    let mut dw = DVector::zeros(d);
    let mut phi = DVector::zeros(d);
    let mut h = DVector::zeros(m);
    let mut sigma_t_h = DVector::zeros(d);
    let mut delta = DVector::zeros(m);
    let mut drift = DVector::zeros(n);
    let mut tmp_n = DVector::zeros(n);
    let mut tmp_m = DVector::zeros(m);
    let mut gamma = DVector::zeros(d);

    rec.init(ctx, &x, log_v.exp());

    let h_is_zero = matches!(ctx.investor, TabInvestor::Zero);
    let track = ctx.tracking;
    let need_phi = ctx.measure != Measure::Physical
        || track.market_density
        || track.running_cost
        || !h_is_zero;

    for i in 0..ctx.n_steps {
        for k in 0..d {
            dw[k] = sqrt_dt * rng.sample::<f64, _>(StandardNormal);
        }
        let r_i = ctx.r[i];
        let eta_i = &ctx.eta[i];
        let xi_i = &ctx.xi_col[i];

        // phi = eta' x + xi'
        if need_phi {
            phi.copy_from(xi_i);
            phi.gemv_tr(1.0, eta_i, &x, 1.0);
        }

        // investor control at (t_i, x)
        let (h_gram_h, sh_dw) = if h_is_zero {
            (0.0, 0.0)
        } else {
            match &ctx.investor {
                TabInvestor::Zero => unreachable!(),
                TabInvestor::Constant(hc) => h.copy_from(hc),
                TabInvestor::Feedback {
                    solve_map,
                    q_mats,
                    q_vecs,
                    shift,
                } => {
                    tmp_n.copy_from(&q_vecs[i]);
                    tmp_n.gemv(1.0, &q_mats[i], &x, 1.0);
                    h.gemv(-1.0, solve_map, &tmp_n, 0.0);
                    if let Some((dir, eps)) = shift {
                        h.axpy(*eps, dir, 1.0);
                    }
                }
            }
            sigma_t_h.gemv_tr(1.0, &p.asset_vol, &h, 0.0);
            (sigma_t_h.dot(&sigma_t_h), sigma_t_h.dot(&dw))
        };

        // wealth drift: r + h'(delta - Σ phi) - 1/2 h'ΣΣ'h, with the plain
        // delta under the physical measure.
        let wealth_drift = if h_is_zero {
            r_i
        } else {
            delta.copy_from(&p.drift_base);
            delta.gemv(1.0, &p.drift_loading, &x, 1.0);
            delta.add_scalar_mut(-r_i);
            tmp_m.copy_from(&delta);
            if ctx.measure != Measure::Physical {
                tmp_m.gemv(-1.0, &p.asset_vol, &phi, 1.0);
            }
            r_i + h.dot(&tmp_m) - 0.5 * h_gram_h
        };
        log_v += wealth_drift * dt + sh_dw;

        // running cost of the game: g = -r at h = 0, and otherwise uses the
        // market-tilted excess return delta - Σ phi regardless of measure.
        if track.running_cost {
            let g_i = if h_is_zero {
                -r_i
            } else {
                delta.copy_from(&p.drift_base);
                delta.gemv(1.0, &p.drift_loading, &x, 1.0);
                delta.add_scalar_mut(-r_i);
                delta.gemv(-1.0, &p.asset_vol, &phi, 1.0);
                0.5 * (0.5 * theta + 1.0) * h_gram_h - r_i - h.dot(&delta)
            };
            int_g += g_i * dt;
        }

        // densities (log-space Doleans-Dade, left-endpoint integrands)
        if track.market_density {
            log_d_market += -phi.dot(&dw) - 0.5 * phi.dot(&phi) * dt;
        }
        if track.investor_density {
            log_d_investor += -0.5 * theta * sh_dw - 0.125 * theta * theta * h_gram_h * dt;
        }
        if let Some((q_mats, q_vecs)) = &ctx.coeff_nodes {
            // gamma = -(theta/2) [ Λ'(Qx+q) + Σ'h ]
            tmp_n.copy_from(&q_vecs[i]);
            tmp_n.gemv(1.0, &q_mats[i], &x, 1.0);
            gamma.gemv_tr(1.0, &p.factor_vol, &tmp_n, 0.0);
            if !h_is_zero {
                gamma += &sigma_t_h;
            }
            gamma *= -0.5 * theta;
            log_d_combined += gamma.dot(&dw) - 0.5 * gamma.dot(&gamma) * dt;
        }

        // factor drift per measure
        drift.copy_from(&p.factor_base);
        drift.gemv(1.0, &p.factor_feedback, &x, 1.0);
        if ctx.measure != Measure::Physical {
            drift.gemv(-1.0, &p.factor_vol, &phi, 1.0);
        }
        if ctx.measure == Measure::Full && !h_is_zero {
            drift.gemv(-0.5 * theta, &lam_sig, &h, 1.0);
        }
        x.axpy(dt, &drift, 1.0);
        x.gemv(1.0, &p.factor_vol, &dw, 1.0);

        if !(x.iter().all(|v| v.is_finite()) && log_v.is_finite()) {
            ok = false;
            break;
        }
        rec.step(
            ctx.t_offset + (i + 1) as f64 * dt,
            &dw,
            &x,
            log_v,
            log_d_market,
            log_d_investor,
        );
    }

    PathOutputs {
        x_terminal: x,
        log_wealth: log_v,
        log_density_market: log_d_market,
        log_density_investor: log_d_investor,
        log_density_combined: log_d_combined,
        int_g,
        ok,
    }
}

/// Runs `n_paths` independent paths in parallel; the output is ordered by
/// path index and bit-identical for any worker count.
pub fn run_paths(ctx: &SimContext, n_paths: usize) -> Vec<PathOutputs> {
    (0..n_paths as u64)
        .into_par_iter()
        .map(|idx| run_path(ctx, idx, &mut NoRecord))
        .collect()
}

/// Runs one path with full trajectory recording.
pub fn run_bundle(ctx: &SimContext, path_idx: u64) -> (PathBundle, PathOutputs) {
    let mut bundle = PathBundle {
        times: Vec::new(),
        increments: Vec::new(),
        factor: Vec::new(),
        wealth: Vec::new(),
        log_density_market: Vec::new(),
        log_density_investor: Vec::new(),
    };
    let out = run_path(ctx, path_idx, &mut bundle);
    (bundle, out)
}

/// Splits outputs into usable paths and a flagged count, failing when the
/// flagged fraction exceeds [`FLAGGED_LIMIT`]. Silent exclusion would bias
/// means, so the count is always surfaced.
pub fn screen_paths(outputs: Vec<PathOutputs>) -> Result<(Vec<PathOutputs>, usize)> {
    let total = outputs.len();
    let kept: Vec<PathOutputs> = outputs.into_iter().filter(|o| o.ok).collect();
    let flagged = total - kept.len();
    if (flagged as f64) > FLAGGED_LIMIT * total as f64 {
        return Err(Error::TooManyFlagged {
            flagged,
            total,
            limit: (FLAGGED_LIMIT * total as f64).floor() as usize,
        });
    }
    if kept.is_empty() {
        return Err(Error::Estimation("all paths flagged".into()));
    }
    Ok((kept, flagged))
}

/// Monte Carlo mean and standard error of a per-path functional, reduced in
/// path order.
pub fn estimate<F: Fn(&PathOutputs) -> f64>(paths: &[PathOutputs], f: F) -> (f64, f64) {
    let samples: Vec<f64> = paths.iter().map(f).collect();
    linalg::mean_and_se(&samples)
}
