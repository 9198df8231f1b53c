//! Market and factor model: m risky securities plus a riskless account,
//! driven by n linear Gaussian factors and an (n+m)-dimensional Brownian
//! motion. Also hosts the running cost of the worst-case game and the
//! minimal-martingale-measure objects.

use nalgebra::{Complex, DMatrix, DVector, RowDVector};

use crate::error::{Error, Result};
use crate::linalg::{self, GramSolver};
use crate::rate::RateSchedule;

/// Raw model parameters, as read from a config file. Validate into a
/// [`Model`] before use.
#[derive(Debug, Clone)]
pub struct MarketModel {
    /// Number of risky securities (m >= 1).
    pub num_assets: usize,
    /// Number of factors (n >= 1).
    pub num_factors: usize,
    /// Baseline security drift a (length m).
    pub drift_base: DVector<f64>,
    /// Factor loading of the security drift A (m x n).
    pub drift_loading: DMatrix<f64>,
    /// Baseline factor drift b (length n).
    pub factor_base: DVector<f64>,
    /// Factor feedback matrix B (n x n).
    pub factor_feedback: DMatrix<f64>,
    /// Security volatility Sigma (m x (n+m)).
    pub asset_vol: DMatrix<f64>,
    /// Factor volatility Lambda (n x (n+m)).
    pub factor_vol: DMatrix<f64>,
    /// Riskless rate schedule.
    pub rate: RateSchedule,
    /// Risk-sensitivity parameter theta, theta > -2 and theta != 0.
    pub theta: f64,
    /// Horizon T > 0.
    pub horizon: f64,
    /// Initial wealth v > 0.
    pub initial_wealth: f64,
    /// Initial factor state (length n).
    pub x0: DVector<f64>,
}

/// One validation check with its measured quantity.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub measured: f64,
    pub detail: String,
}

/// Outcome of [`validate_model`]: every standing assumption with a
/// pass/fail flag and the quantity that was measured.
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Minimum eigenvalue of ΣΣ' accepted as positive definite.
pub const PD_TOL: f64 = 1e-12;

/// Default tolerance on the max real eigenvalue part in stability checks.
pub const STABILITY_TOL: f64 = 1e-9;

fn dim_err(field: &'static str, expected: (usize, usize), got: (usize, usize)) -> Error {
    Error::Dimension {
        field,
        expected: format!("{}x{}", expected.0, expected.1),
        got: format!("{}x{}", got.0, got.1),
    }
}

/// Checks every standing assumption of the model and reports each one.
///
/// Structural failures (dimension mismatches, theta out of range) are
/// returned as errors naming the offending field; soft quantitative checks
/// land in the report.
pub fn validate_model(model: &MarketModel) -> Result<ValidationReport> {
    let m = model.num_assets;
    let n = model.num_factors;
    if m < 1 {
        return Err(Error::Parameter {
            field: "m",
            reason: "need at least one risky security".into(),
        });
    }
    if n < 1 {
        return Err(Error::Parameter {
            field: "n",
            reason: "need at least one factor".into(),
        });
    }
    if model.drift_base.len() != m {
        return Err(dim_err("a", (m, 1), (model.drift_base.len(), 1)));
    }
    if model.drift_loading.shape() != (m, n) {
        return Err(dim_err("A", (m, n), model.drift_loading.shape()));
    }
    if model.factor_base.len() != n {
        return Err(dim_err("b", (n, 1), (model.factor_base.len(), 1)));
    }
    if model.factor_feedback.shape() != (n, n) {
        return Err(dim_err("B", (n, n), model.factor_feedback.shape()));
    }
    if model.asset_vol.shape() != (m, n + m) {
        return Err(dim_err("Sigma", (m, n + m), model.asset_vol.shape()));
    }
    if model.factor_vol.shape() != (n, n + m) {
        return Err(dim_err("Lambda", (n, n + m), model.factor_vol.shape()));
    }
    if model.x0.len() != n {
        return Err(dim_err("x0", (n, 1), (model.x0.len(), 1)));
    }
    if model.theta == 0.0 {
        return Err(Error::Parameter {
            field: "theta",
            reason: "theta must be nonzero".into(),
        });
    }
    if model.theta <= -2.0 {
        return Err(Error::Parameter {
            field: "theta",
            reason: format!("theta must exceed -2, got {}", model.theta),
        });
    }
    let finite = model
        .drift_base
        .iter()
        .chain(model.drift_loading.iter())
        .chain(model.factor_base.iter())
        .chain(model.factor_feedback.iter())
        .chain(model.asset_vol.iter())
        .chain(model.factor_vol.iter())
        .chain(model.x0.iter())
        .all(|x| x.is_finite());
    if !finite {
        return Err(Error::Parameter {
            field: "matrices",
            reason: "non-finite entry in model data".into(),
        });
    }

    let gram = &model.asset_vol * model.asset_vol.transpose();
    let lambda_min = linalg::min_symmetric_eigenvalue(&gram);
    let mut checks = vec![
        Check {
            name: "sigma_gram_positive_definite".into(),
            pass: lambda_min > PD_TOL,
            measured: lambda_min,
            detail: "min eigenvalue of Sigma Sigma'".into(),
        },
        Check {
            name: "theta_admissible".into(),
            pass: model.theta > -2.0 && model.theta != 0.0,
            measured: model.theta,
            detail: "theta in (-2, 0) or (0, inf)".into(),
        },
        Check {
            name: "horizon_positive".into(),
            pass: model.horizon > 0.0 && model.horizon.is_finite(),
            measured: model.horizon,
            detail: "T".into(),
        },
        Check {
            name: "initial_wealth_positive".into(),
            pass: model.initial_wealth > 0.0 && model.initial_wealth.is_finite(),
            measured: model.initial_wealth,
            detail: "v".into(),
        },
    ];
    if model.theta < 0.0 {
        checks.push(Check {
            name: "risk_seeking_theta".into(),
            pass: true,
            measured: model.theta,
            detail: "theta < 0: risk-seeking, heavy-tail warning for simulations".into(),
        });
    }
    Ok(ValidationReport { checks })
}

/// Validated, immutable model. Holds the Cholesky factor of ΣΣ' so all
/// downstream (ΣΣ')⁻¹-applications are factorization-based solves.
#[derive(Clone, Debug)]
pub struct Model {
    params: MarketModel,
    gram: GramSolver,
    /// Σ Λ' (m x n), cached; zero iff security and factor noise independent.
    sigma_lambda_t: DMatrix<f64>,
    /// Λ Λ' (n x n), cached.
    lambda_gram: DMatrix<f64>,
}

impl Model {
    pub fn new(params: MarketModel) -> Result<Self> {
        let report = validate_model(&params)?;
        if !report.all_pass() {
            let failed: Vec<&str> = report
                .checks
                .iter()
                .filter(|c| !c.pass)
                .map(|c| c.name.as_str())
                .collect();
            return Err(Error::Parameter {
                field: "model",
                reason: format!("validation failed: {}", failed.join(", ")),
            });
        }
        let gram = GramSolver::new(&params.asset_vol * params.asset_vol.transpose())?;
        let sigma_lambda_t = &params.asset_vol * params.factor_vol.transpose();
        let lambda_gram = &params.factor_vol * params.factor_vol.transpose();
        Ok(Self {
            params,
            gram,
            sigma_lambda_t,
            lambda_gram,
        })
    }

    pub fn params(&self) -> &MarketModel {
        &self.params
    }

    pub fn num_assets(&self) -> usize {
        self.params.num_assets
    }

    pub fn num_factors(&self) -> usize {
        self.params.num_factors
    }

    /// Number of Brownian drivers, n + m.
    pub fn num_drivers(&self) -> usize {
        self.params.num_assets + self.params.num_factors
    }

    pub fn theta(&self) -> f64 {
        self.params.theta
    }

    pub fn horizon(&self) -> f64 {
        self.params.horizon
    }

    pub fn initial_wealth(&self) -> f64 {
        self.params.initial_wealth
    }

    pub fn x0(&self) -> &DVector<f64> {
        &self.params.x0
    }

    pub fn rate(&self) -> &RateSchedule {
        &self.params.rate
    }

    pub fn rate_at(&self, t: f64) -> f64 {
        self.params.rate.at(t)
    }

    pub fn gram(&self) -> &GramSolver {
        &self.gram
    }

    /// Σ Λ' (m x n).
    pub fn sigma_lambda_t(&self) -> &DMatrix<f64> {
        &self.sigma_lambda_t
    }

    /// Λ Λ' (n x n).
    pub fn lambda_gram(&self) -> &DMatrix<f64> {
        &self.lambda_gram
    }

    /// Σ' (ΣΣ')⁻¹ M, evaluated by solve-then-multiply.
    pub fn sigma_pinv_apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.params.asset_vol.transpose() * self.gram.solve(m)
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=self.params.horizon).contains(&t) {
            return Err(Error::TimeOutOfRange {
                t,
                horizon: self.params.horizon,
            });
        }
        Ok(())
    }

    /// Excess return over the riskless rate: a + A x - r(t) 1.
    pub fn excess_return(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_time(t)?;
        if x.len() != self.num_factors() {
            return Err(dim_err("x", (self.num_factors(), 1), (x.len(), 1)));
        }
        Ok(self.excess_return_with_rate(x, self.rate_at(t)))
    }

    /// Excess return with an explicit rate value (no time-domain check).
    pub fn excess_return_with_rate(&self, x: &DVector<f64>, r_t: f64) -> DVector<f64> {
        let mut delta = &self.params.drift_base + &self.params.drift_loading * x;
        delta.add_scalar_mut(-r_t);
        delta
    }

    /// Running cost of the exponential-of-integral game criterion:
    ///
    /// g = 1/2 (theta/2 + 1) h'ΣΣ'h - r - h'(delta - Σ(eta' x + xi')).
    ///
    /// Equals -r exactly when h = 0.
    pub fn running_cost_g(
        &self,
        x: &DVector<f64>,
        h: &DVector<f64>,
        eta_t: &DMatrix<f64>,
        xi_t: &RowDVector<f64>,
        r_t: f64,
    ) -> f64 {
        let sigma = &self.params.asset_vol;
        let sig_h = sigma.transpose() * h;
        let quad = sig_h.dot(&sig_h);
        let delta = self.excess_return_with_rate(x, r_t);
        let phi = market_shift(eta_t, xi_t, x);
        let tilted = delta - sigma * phi;
        0.5 * (0.5 * self.theta() + 1.0) * quad - r_t - h.dot(&tilted)
    }

    /// Market controls that make the tilted measure the minimal martingale
    /// measure: eta = A'(ΣΣ')⁻¹Σ (constant) and xi(t) = (a - r(t)1)'(ΣΣ')⁻¹Σ.
    pub fn mmm_controls(&self, t: f64) -> Result<(DMatrix<f64>, RowDVector<f64>)> {
        self.check_time(t)?;
        Ok((self.mmm_eta(), self.mmm_xi_with_rate(self.rate_at(t))))
    }

    /// The time-independent MMM eta.
    pub fn mmm_eta(&self) -> DMatrix<f64> {
        // A'(ΣΣ')⁻¹Σ = [(ΣΣ')⁻¹ A]' Σ
        self.gram.solve(&self.params.drift_loading).transpose() * &self.params.asset_vol
    }

    /// MMM xi for an explicit rate value.
    pub fn mmm_xi_with_rate(&self, r_t: f64) -> RowDVector<f64> {
        let mut excess = self.params.drift_base.clone();
        excess.add_scalar_mut(-r_t);
        let solved = self.gram.solve_vec(&excess);
        RowDVector::from_iterator(
            self.num_drivers(),
            (solved.transpose() * &self.params.asset_vol).iter().cloned(),
        )
    }

    /// Factor drift matrix under the minimal martingale measure:
    /// B - ΛΣ'(ΣΣ')⁻¹A.
    pub fn mmm_drift_matrix(&self) -> DMatrix<f64> {
        let lam_sig_t = self.sigma_lambda_t.transpose(); // Λ Σ' (n x m)
        &self.params.factor_feedback - lam_sig_t * self.gram.solve(&self.params.drift_loading)
    }

    /// Constant part of the factor drift under the MMM for a fixed rate:
    /// b - ΛΣ'(ΣΣ')⁻¹(a - r 1).
    pub fn mmm_drift_const(&self, r_bar: f64) -> DVector<f64> {
        let mut excess = self.params.drift_base.clone();
        excess.add_scalar_mut(-r_bar);
        &self.params.factor_base
            - self.sigma_lambda_t.transpose() * self.gram.solve_vec(&excess)
    }

    /// Eigenvalue stability of the MMM factor drift matrix, plus the
    /// stationary mean when stable (evaluated at the rate r(0)).
    pub fn is_mmm_stable(&self, tol: f64) -> Result<StabilityReport> {
        let drift = self.mmm_drift_matrix();
        let eigenvalues = linalg::eigenvalues(&drift)?;
        let max_real = eigenvalues.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
        let stable = max_real < -tol;
        // m solves (B - ΛΣ'(ΣΣ')⁻¹A) m + const = 0
        let stationary_mean = if stable {
            let rhs = -self.mmm_drift_const(self.rate_at(0.0));
            drift.lu().solve(&rhs)
        } else {
            None
        };
        Ok(StabilityReport {
            eigenvalues,
            max_real_part: max_real,
            stable,
            tol,
            stationary_mean,
        })
    }
}

/// eta' x + xi' : the (n+m)-dimensional Girsanov shift selected by the
/// market at factor state x.
pub fn market_shift(eta_t: &DMatrix<f64>, xi_t: &RowDVector<f64>, x: &DVector<f64>) -> DVector<f64> {
    eta_t.transpose() * x + xi_t.transpose()
}

/// Implied weight of the riskless account, 1 - sum of the risky weights.
pub fn riskless_weight(h: &DVector<f64>) -> f64 {
    1.0 - h.sum()
}

/// Spectrum of the MMM factor drift matrix with the stability verdict.
#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub eigenvalues: Vec<Complex<f64>>,
    pub max_real_part: f64,
    pub stable: bool,
    pub tol: f64,
    /// Long-run fixed point -(B - ΛΣ'(ΣΣ')⁻¹A)⁻¹ (b - ΛΣ'(ΣΣ')⁻¹(a - r̄ 1)),
    /// present only when stable.
    pub stationary_mean: Option<DVector<f64>>,
}

/// Deterministic market controls (eta(t), xi(t)), evaluable on [0, T].
///
/// Named constructions evaluate exactly; `Sampled` interpolates linearly on
/// its grid (the representation for explicit user-supplied controls).
#[derive(Clone, Debug)]
pub enum MarketControls {
    /// eta = 0, xi = 0: the tilted measure is the physical measure.
    Zero,
    /// Minimal-martingale-measure controls.
    Mmm,
    /// Piecewise-linear controls tabulated on a grid.
    Sampled {
        grid: Vec<f64>,
        eta: Vec<DMatrix<f64>>,
        xi: Vec<RowDVector<f64>>,
    },
}

impl MarketControls {
    pub fn eval(&self, model: &Model, t: f64) -> (DMatrix<f64>, RowDVector<f64>) {
        match self {
            MarketControls::Zero => (
                DMatrix::zeros(model.num_factors(), model.num_drivers()),
                RowDVector::zeros(model.num_drivers()),
            ),
            MarketControls::Mmm => (model.mmm_eta(), model.mmm_xi_with_rate(model.rate_at(t))),
            MarketControls::Sampled { grid, eta, xi } => {
                let (i, w) = locate(grid, t);
                if w == 0.0 || i + 1 >= grid.len() {
                    (eta[i].clone(), xi[i].clone())
                } else {
                    (
                        &eta[i] * (1.0 - w) + &eta[i + 1] * w,
                        &xi[i] * (1.0 - w) + &xi[i + 1] * w,
                    )
                }
            }
        }
    }

    /// Max over the grid of the spectral/Euclidean norms; the boundedness
    /// proxy for admissibility.
    pub fn max_norm(&self, model: &Model, grid: &[f64]) -> f64 {
        grid.iter()
            .map(|&t| {
                let (eta, xi) = self.eval(model, t);
                linalg::spectral_norm(&eta).max(xi.norm())
            })
            .fold(0.0, f64::max)
    }
}

fn locate(grid: &[f64], t: f64) -> (usize, f64) {
    if t <= grid[0] {
        return (0, 0.0);
    }
    if t >= *grid.last().unwrap() {
        return (grid.len() - 1, 0.0);
    }
    let hi = grid.partition_point(|&g| g <= t);
    let i = hi - 1;
    let w = (t - grid[i]) / (grid[hi] - grid[i]);
    (i, w)
}
