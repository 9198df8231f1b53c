//! Batch front-end: one config file drives the whole pipeline.
//!
//! Subcommands: `solve | verify | simulate | value | probe | report` with
//! flags `--config PATH --out DIR --steps N --paths N --sim-steps N
//! --seed U64 --tol X`. Exit status: 0 when every requested check passes,
//! 2 on coefficient blow-up (finite escape), 1 on config/validation errors,
//! usage errors, or failed checks. Outcomes depend only on the config and
//! seed, never on timing or worker count.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;

use crate::coeffs::{solve_coefficients, ValueCoefficients};
use crate::config::{self, RunConfig};
use crate::equilibrium::{self, SampleSpec};
use crate::error::{Error, Result};
use crate::game;
use crate::model::{validate_model, Model, STABILITY_TOL};
use crate::report::{fmt_f64, CheckLine, Report};
use crate::simulate::{
    run_paths, screen_paths, InvestorSpec, MarketSpec, Measure, SimContext, SimulationSpec,
};

#[derive(Parser, Debug)]
#[command(
    name = "riskgame",
    version,
    about = "Worst-case risk-sensitive asset management: solve, verify, simulate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the backward coefficient system and export the grids.
    Solve(CommonArgs),
    /// Solve, classify the equilibrium, and check the saddle conditions.
    Verify(CommonArgs),
    /// Simulate paths and write per-path terminals plus a summary.
    Simulate(SimArgs),
    /// Estimate the game criteria and compare with the closed form.
    Value(CommonArgs),
    /// Perturb both players with common random numbers.
    Probe(CommonArgs),
    /// Run the whole pipeline and emit a sectioned report.
    Report(CommonArgs),
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// Model (and optional run section) JSON file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Coefficient solver steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Monte Carlo paths.
    #[arg(long)]
    paths: Option<usize>,
    /// Simulation steps per path.
    #[arg(long)]
    sim_steps: Option<usize>,
    /// Base RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Classification tolerance.
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Args, Debug, Clone)]
struct SimArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Measure tag: physical | market | full.
    #[arg(long, default_value = "market")]
    measure: String,
}

/// Entry point used by the thin binary.
pub fn run_from_args() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    match dispatch(cli) {
        Ok(all_pass) => {
            if all_pass {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

/// Maps errors onto the documented exit codes.
pub fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::BlowUp { .. } => 2,
        _ => 1,
    }
}

struct Pipeline {
    model: Model,
    run: RunConfig,
    out: PathBuf,
}

impl Pipeline {
    fn load(args: &CommonArgs) -> Result<Self> {
        let cfg = config::load(&args.config)?;
        let raw = cfg.into_market_model()?;
        let report = validate_model(&raw)?;
        if !report.all_pass() {
            for check in report.checks.iter().filter(|c| !c.pass) {
                eprintln!(
                    "validation failed: {} (measured {})",
                    check.name,
                    fmt_f64(check.measured)
                );
            }
            return Err(Error::Parameter {
                field: "model",
                reason: "validation failed".into(),
            });
        }
        let model = Model::new(raw)?;
        let mut run = cfg.run.unwrap_or_default();
        if let Some(steps) = args.steps {
            run.steps = steps;
        }
        if let Some(paths) = args.paths {
            run.paths = paths;
        }
        if let Some(sim_steps) = args.sim_steps {
            run.sim_steps = sim_steps;
        }
        if let Some(seed) = args.seed {
            run.seed = seed;
        }
        if let Some(tol) = args.tol {
            run.tol = tol;
        }
        let out = args.out.clone().unwrap_or_else(|| PathBuf::from(&run.out));
        std::fs::create_dir_all(&out)?;
        Ok(Self { model, run, out })
    }

    fn solve(&self) -> Result<Arc<ValueCoefficients>> {
        Ok(Arc::new(solve_coefficients(&self.model, self.run.steps)?))
    }

    fn write(&self, name: &str, content: &str) -> Result<()> {
        std::fs::write(self.out.join(name), content)?;
        Ok(())
    }

    fn write_coefficients(&self, coeffs: &ValueCoefficients) -> Result<()> {
        let mut buf = Vec::new();
        coeffs.write_csv(&mut buf)?;
        std::fs::write(self.out.join("coefficients.csv"), buf)?;
        Ok(())
    }

    fn sim_spec(&self, measure: Measure) -> SimulationSpec {
        SimulationSpec::new(self.run.paths.max(1), self.run.sim_steps, self.run.seed, measure)
    }

    fn section_solve(&self, report: &mut Report) -> Result<Arc<ValueCoefficients>> {
        let coeffs = self.solve()?;
        self.write_coefficients(&coeffs)?;
        let (q0, qv0, k0) = coeffs.node(0);
        report.push(CheckLine::new(
            "coefficients",
            "terminal_data_assigned",
            true,
            coeffs.value_u(self.model.horizon(), self.model.x0())?
                - self.model.initial_wealth().ln(),
            0.0,
            "u(T, x0) - log v",
        ));
        let sym = coeffs.max_symmetry_residual();
        report.push(CheckLine::new(
            "coefficients",
            "symmetry_residual",
            sym <= 1e-10,
            sym,
            1e-10,
            "max over grid",
        ));
        let mut worst = (0.0f64, 0.0f64, 0.0f64);
        for i in 1..20 {
            let t = self.model.horizon() * i as f64 / 20.0;
            let (rq, rqv, rk) = coeffs.ode_residual(&self.model, t)?;
            worst = (worst.0.max(rq), worst.1.max(rqv), worst.2.max(rk));
        }
        let res = worst.0.max(worst.1).max(worst.2);
        report.push(CheckLine::new(
            "coefficients",
            "ode_residual_max",
            res <= 1e-6,
            res,
            1e-6,
            "interpolated state vs equations at interior times",
        ));
        report.note(
            "coefficients",
            format!(
                "Q(0) max |entry| = {}, q(0) norm = {}, k(0) = {}",
                fmt_f64(q0.amax()),
                fmt_f64(qv0.norm()),
                fmt_f64(k0)
            ),
        );
        Ok(coeffs)
    }

    fn section_model(&self, report: &mut Report) -> Result<()> {
        let checks = validate_model(self.model.params())?;
        for c in &checks.checks {
            report.push(CheckLine::new(
                "model",
                &c.name,
                c.pass,
                c.measured,
                0.0,
                &c.detail,
            ));
        }
        let stability = self.model.is_mmm_stable(STABILITY_TOL)?;
        report.push(CheckLine::new(
            "model",
            "mmm_drift_stable",
            true,
            stability.max_real_part,
            -STABILITY_TOL,
            if stability.stable {
                "max real eigenvalue part (stable)"
            } else {
                "max real eigenvalue part (not stable; long-horizon checks unavailable)"
            },
        ));
        if let Some(mean) = &stability.stationary_mean {
            report.note(
                "model",
                format!(
                    "stationary factor mean under the tilted drift: [{}]",
                    mean.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(", ")
                ),
            );
        }
        Ok(())
    }

    fn section_verify(
        &self,
        coeffs: &Arc<ValueCoefficients>,
        report: &mut Report,
        quick: bool,
    ) -> Result<String> {
        let diag = equilibrium::classify_equilibrium(coeffs, &self.model, self.run.tol)?;
        let max_eta = diag.mmm_residual_eta.iter().cloned().fold(0.0, f64::max);
        let max_xi = diag.mmm_residual_xi.iter().cloned().fold(0.0, f64::max);
        report.push(CheckLine::new(
            "equilibrium",
            "mmm_residual_eta_max",
            true,
            max_eta,
            self.run.tol,
            "norm of Q'ΛΣ'(ΣΣ')⁻¹Σ over grid",
        ));
        report.push(CheckLine::new(
            "equilibrium",
            "mmm_residual_xi_max",
            true,
            max_xi,
            self.run.tol,
            "norm of q'ΛΣ'(ΣΣ')⁻¹Σ over grid",
        ));
        report.note(
            "equilibrium",
            format!(
                "is_mmm={} is_no_regret={} max|h|={} max|h'Σ|={}",
                diag.is_mmm,
                diag.is_no_regret,
                fmt_f64(diag.max_h_norm),
                fmt_f64(diag.max_h_sigma_norm)
            ),
        );
        if diag.is_mmm {
            let implication = diag.max_h_sigma_norm <= 10.0 * self.run.tol;
            report.push(CheckLine::new(
                "equilibrium",
                "mmm_implies_zero_wealth_exposure",
                implication,
                diag.max_h_sigma_norm,
                10.0 * self.run.tol,
                "h'Σ vanishes whenever the equilibrium measure is the MMM",
            ));
        }

        let spec = if quick {
            SampleSpec::quick(&self.model)
        } else {
            SampleSpec::defaults_for(&self.model)
        };
        let cond = equilibrium::verification_conditions(coeffs, &self.model, &spec)?;
        report.push(CheckLine::new(
            "equilibrium",
            "hjb_zero_at_saddle",
            cond.hjb_residual_max <= 1e-6,
            cond.hjb_residual_max,
            1e-6,
            format!(
                "worst point t={} x=[{}]",
                fmt_f64(cond.worst_point.0),
                cond.worst_point
                    .1
                    .iter()
                    .map(|v| fmt_f64(*v))
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        ));
        report.push(CheckLine::new(
            "equilibrium",
            "investor_side_maximized",
            cond.investor_max_operator <= 1e-6,
            cond.investor_max_operator,
            1e-6,
            "max operator over sampled h",
        ));
        report.push(CheckLine::new(
            "equilibrium",
            "market_side_flat",
            cond.market_max_abs_operator <= 1e-6,
            cond.market_max_abs_operator,
            1e-6,
            "max |operator| over sampled market controls",
        ));
        report.push(CheckLine::new(
            "equilibrium",
            "terminal_condition_exact",
            cond.terminal_max_error == 0.0,
            cond.terminal_max_error,
            0.0,
            "u(T, x) = log v",
        ));
        report.push(CheckLine::new(
            "equilibrium",
            "h_gradient_at_saddle",
            cond.h_gradient_max <= 1e-6,
            cond.h_gradient_max,
            1e-6,
            "first-order condition",
        ));
        report.push(CheckLine::new(
            "equilibrium",
            "market_coefficient_range_part",
            cond.market_coeff_range_max <= 1e-8,
            cond.market_coeff_range_max,
            1e-8,
            "Σ(Λ'Du + Σ'h) at the saddle",
        ));

        // residuals-by-grid-time CSV
        let mut csv = String::from("t,mmm_residual_eta,mmm_residual_xi,ode_res_Q,ode_res_q,ode_res_k\n");
        for (i, &t) in coeffs.grid().iter().enumerate() {
            let (rq, rqv, rk) = coeffs.ode_residual(&self.model, t)?;
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                fmt_f64(t),
                fmt_f64(diag.mmm_residual_eta[i]),
                fmt_f64(diag.mmm_residual_xi[i]),
                fmt_f64(rq),
                fmt_f64(rqv),
                fmt_f64(rk)
            ));
        }
        Ok(csv)
    }

    fn section_simulate(&self, coeffs: &Arc<ValueCoefficients>, measure: Measure) -> Result<(String, String)> {
        let spec = self.sim_spec(measure);
        let market = MarketSpec::Equilibrium(coeffs.clone());
        let investor = InvestorSpec::Equilibrium(coeffs.clone());
        let ctx = SimContext::over_horizon(&self.model, &spec, &market, &investor, Some(coeffs))?;
        let outputs = run_paths(&ctx, spec.n_paths);
        let n = self.model.num_factors();
        let mut csv = String::from("path");
        for i in 0..n {
            csv.push_str(&format!(",XT_{i}"));
        }
        csv.push_str(",VT,logD_eta_xi,logD_h\n");
        for (idx, out) in outputs.iter().enumerate() {
            csv.push_str(&fmt_f64(idx as f64));
            for i in 0..n {
                csv.push(',');
                csv.push_str(&fmt_f64(out.x_terminal[i]));
            }
            csv.push(',');
            csv.push_str(&fmt_f64(out.log_wealth.exp()));
            csv.push(',');
            csv.push_str(&fmt_f64(out.log_density_market));
            csv.push(',');
            csv.push_str(&fmt_f64(out.log_density_investor));
            csv.push('\n');
        }
        let (kept, flagged) = screen_paths(outputs)?;
        let (x_mean, x_se) = crate::simulate::estimate(&kept, |p| p.x_terminal[0]);
        let (v_mean, v_se) = crate::simulate::estimate(&kept, |p| p.log_wealth.exp());
        let summary = format!(
            "paths={} flagged={}\nXT_0: mean={} se={}\nVT: mean={} se={}\n",
            kept.len(),
            flagged,
            fmt_f64(x_mean),
            fmt_f64(x_se),
            fmt_f64(v_mean),
            fmt_f64(v_se)
        );
        Ok((csv, summary))
    }

    fn section_value(
        &self,
        coeffs: &Arc<ValueCoefficients>,
        report: &mut Report,
    ) -> Result<String> {
        let closed = game::closed_form_value(coeffs, &self.model)?;
        let market = MarketSpec::Equilibrium(coeffs.clone());
        let investor = InvestorSpec::Equilibrium(coeffs.clone());
        let spec = self.sim_spec(Measure::Market);

        let j_tilde = game::criterion_j_tilde(&self.model, &spec, &investor, &market, closed)?;
        let j = game::criterion_j(&self.model, &spec, &investor, closed)?;
        let u_tilde = game::u_tilde_estimate(
            &self.model,
            &spec,
            &investor,
            &market,
            coeffs,
            0.0,
            self.model.x0(),
        )?;

        let mut csv = String::from("quantity,estimate,se,closed_form,z\n");
        for (name, est, se, cf, z, pass) in [
            (
                "J_tilde",
                j_tilde.estimate,
                j_tilde.std_error,
                j_tilde.closed_form,
                j_tilde.z_score,
                j_tilde.pass_3se,
            ),
            ("J", j.estimate, j.std_error, j.closed_form, j.z_score, j.pass_3se),
            (
                "u_tilde",
                u_tilde.estimate,
                u_tilde.std_error,
                u_tilde.closed_form,
                (u_tilde.estimate - u_tilde.closed_form)
                    / u_tilde.std_error.max(game::se_floor(u_tilde.closed_form) / 3.0),
                u_tilde.pass_3se,
            ),
        ] {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                name,
                fmt_f64(est),
                fmt_f64(se),
                fmt_f64(cf),
                fmt_f64(z)
            ));
            report.push(CheckLine::new(
                "value",
                &format!("{name}_matches_closed_form"),
                pass,
                est - cf,
                3.0 * se,
                "difference vs 3 SE (machine floor when degenerate)",
            ));
        }
        report.push(CheckLine::new(
            "value",
            "transformed_bound",
            u_tilde.bound_status != game::BoundStatus::Violated,
            u_tilde.upper_bound - u_tilde.estimate,
            0.0,
            match u_tilde.bound_status {
                game::BoundStatus::StrictlyInside => "strictly inside (0, bound)",
                game::BoundStatus::AttainedAtNoRegret => {
                    "bound attained: the no-regret strategy is optimal here"
                }
                game::BoundStatus::Violated => "estimate exceeds the riskless bound",
            },
        ));
        if self.model.theta() < 0.0 {
            report.note("value", "theta < 0: risk-seeking run, heavy-tail warning");
        }
        Ok(csv)
    }

    fn section_probe(
        &self,
        coeffs: &Arc<ValueCoefficients>,
        report: &mut Report,
    ) -> Result<String> {
        // Differences under common random numbers resolve at far lower path
        // counts than absolute estimates; cap the per-run cost since the
        // probe sweep is 120+ runs.
        let mut spec = self.sim_spec(Measure::Market);
        spec.n_paths = spec.n_paths.clamp(1, 5000);
        spec.n_steps = spec.n_steps.clamp(1, 500);
        let probe = game::ProbeSpec::default();
        let result = game::saddle_probe(&self.model, &spec, coeffs, &probe)?;
        let mut csv = String::from("side,direction,eps,estimate,diff,se_diff,violation\n");
        for row in &result.rows {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                match row.side {
                    game::ProbeSide::Investor => "investor",
                    game::ProbeSide::Market => "market",
                },
                row.direction,
                fmt_f64(row.eps),
                fmt_f64(row.estimate),
                fmt_f64(row.diff),
                fmt_f64(row.se_diff),
                row.violation
            ));
        }
        report.push(CheckLine::new(
            "probe",
            "saddle_inequalities",
            result.violations == 0,
            result.violations as f64,
            0.0,
            format!(
                "violations over {} perturbed runs; max |diff|/eps = {}",
                result.rows.len(),
                fmt_f64(result.max_diff_over_eps)
            ),
        ));
        report.push(CheckLine::new(
            "probe",
            "equilibrium_value_vs_closed_form",
            result.equilibrium.pass_3se,
            result.equilibrium.estimate - result.equilibrium.closed_form,
            3.0 * result.equilibrium.std_error,
            "common-random-number baseline",
        ));
        Ok(csv)
    }

    fn section_identity(
        &self,
        coeffs: &Arc<ValueCoefficients>,
        report: &mut Report,
    ) -> Result<()> {
        let n_paths = self.run.paths.clamp(1, 1000);
        let result = game::pathwise_identity_check(
            &self.model,
            coeffs,
            &InvestorSpec::Constant(DVector::from_element(self.model.num_assets(), 0.5)),
            &MarketSpec::Zero,
            n_paths,
            self.run.sim_steps.max(50),
            self.run.seed,
        )?;
        let pass = result.max_rel_fine <= result.max_rel_coarse + 1e-12;
        report.push(CheckLine::new(
            "identity",
            "pathwise_identity_refinement",
            pass,
            result.ratio,
            2.0,
            format!(
                "coarse gap {} fine gap {}",
                fmt_f64(result.max_rel_coarse),
                fmt_f64(result.max_rel_fine)
            ),
        ));
        Ok(())
    }
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Solve(args) => {
            let p = Pipeline::load(&args)?;
            let mut report = Report::default();
            let coeffs = p.section_solve(&mut report)?;
            let _ = coeffs;
            print!("{}", report.render_text());
            p.write("solve.txt", &report.render_text())?;
            p.write("solve_checks.csv", &report.render_csv())?;
            Ok(report.all_pass())
        }
        Command::Verify(args) => {
            let p = Pipeline::load(&args)?;
            let mut report = Report::default();
            p.section_model(&mut report)?;
            let coeffs = p.section_solve(&mut report)?;
            let residuals = p.section_verify(&coeffs, &mut report, false)?;
            p.write("diagnostics.csv", &residuals)?;
            p.write("verify.txt", &report.render_text())?;
            p.write("verify_checks.csv", &report.render_csv())?;
            print!("{}", report.render_text());
            Ok(report.all_pass())
        }
        Command::Simulate(args) => {
            let p = Pipeline::load(&args.common)?;
            let measure = Measure::parse(&args.measure)?;
            let mut report = Report::default();
            let coeffs = p.section_solve(&mut report)?;
            let (csv, summary) = p.section_simulate(&coeffs, measure)?;
            p.write("paths.csv", &csv)?;
            p.write("simulate.txt", &summary)?;
            print!("{summary}");
            Ok(true)
        }
        Command::Value(args) => {
            let p = Pipeline::load(&args)?;
            let mut report = Report::default();
            let coeffs = p.section_solve(&mut report)?;
            let csv = p.section_value(&coeffs, &mut report)?;
            p.write("value.csv", &csv)?;
            p.write("value.txt", &report.render_text())?;
            print!("{}", report.render_text());
            Ok(report.all_pass())
        }
        Command::Probe(args) => {
            let p = Pipeline::load(&args)?;
            let mut report = Report::default();
            let coeffs = p.section_solve(&mut report)?;
            let csv = p.section_probe(&coeffs, &mut report)?;
            p.write("probe.csv", &csv)?;
            p.write("probe.txt", &report.render_text())?;
            print!("{}", report.render_text());
            Ok(report.all_pass())
        }
        Command::Report(args) => {
            let p = Pipeline::load(&args)?;
            let mut report = Report::default();
            p.section_model(&mut report)?;
            let coeffs = match p.section_solve(&mut report) {
                Ok(c) => c,
                Err(Error::BlowUp { t }) => {
                    report.note(
                        "coefficients",
                        format!(
                            "finite escape at t = {}: no quadratic value representation on this horizon; downstream sections aborted",
                            fmt_f64(t)
                        ),
                    );
                    for s in ["equilibrium", "simulation", "value", "probe", "identity"] {
                        report.skip(s);
                    }
                    p.write("report.txt", &report.render_text())?;
                    p.write("report_checks.csv", &report.render_csv())?;
                    print!("{}", report.render_text());
                    return Err(Error::BlowUp { t });
                }
                Err(e) => return Err(e),
            };
            let residuals = p.section_verify(&coeffs, &mut report, true)?;
            p.write("diagnostics.csv", &residuals)?;
            if p.run.paths == 0 {
                report.skip("simulation");
                report.skip("value");
                report.skip("probe");
                report.skip("identity");
            } else {
                let (csv, summary) = p.section_simulate(&coeffs, Measure::Market)?;
                p.write("paths.csv", &csv)?;
                report.note("simulation", summary.replace('\n', "; "));
                let value_csv = p.section_value(&coeffs, &mut report)?;
                p.write("value.csv", &value_csv)?;
                let probe_csv = p.section_probe(&coeffs, &mut report)?;
                p.write("probe.csv", &probe_csv)?;
                p.section_identity(&coeffs, &mut report)?;
            }
            p.write("report.txt", &report.render_text())?;
            p.write("report_checks.csv", &report.render_csv())?;
            print!("{}", report.render_text());
            Ok(report.all_pass())
        }
    }
}

/// Testable front door: parse explicit arguments instead of the process
/// command line.
pub fn run_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    match dispatch(cli) {
        Ok(all_pass) => {
            if all_pass {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

/// Convenience for integration tests: run a subcommand against a config
/// path with an output directory.
pub fn run_subcommand(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> i32 {
    let mut args: Vec<String> = vec![
        "riskgame".into(),
        cmd.into(),
        "--config".into(),
        config.display().to_string(),
        "--out".into(),
        out.display().to_string(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    run_with_args(args)
}
