//! Subcommand pipelines. Each returns its results as JSON plus in-memory
//! artifacts; nothing here depends on wall-clock time or worker count.

use std::fmt;

use ebsde_core::bsde::{martingale_residuals, solve_finite_horizon};
use ebsde_core::control::{evaluate_policy, solve_ergodic_control, Policy, PolicyEvaluation};
use ebsde_core::discounted::{horizon_convergence_study, solve_discounted};
use ebsde_core::ebsde::{lambda_via_invariant_measure, periodicity_check, vanishing_discount, EbsdeResult};
use ebsde_core::ergodicity::{coupling_decay, harvest_invariant, hitting_times};
use ebsde_core::forward::{moment_bound_report, simulate, simulate_recorded, SimulationSpec};
use ebsde_core::pide::{pide_oracle_1d, SpaceGrid, TimeGrid};
use ebsde_core::powerplant::{monotonicity_study, plant_value, worst_case_lambda};
use ebsde_core::stats::{estimate, Estimate};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{parse_test_function, state_fn, ExperimentConfig};
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Subcommand {
    Simulate,
    Ergodicity,
    Bsde,
    Discounted,
    Ebsde,
    Control,
    Powerplant,
}

impl fmt::Display for Subcommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Subcommand::Simulate => "simulate",
            Subcommand::Ergodicity => "ergodicity",
            Subcommand::Bsde => "bsde",
            Subcommand::Discounted => "discounted",
            Subcommand::Ebsde => "ebsde",
            Subcommand::Control => "control",
            Subcommand::Powerplant => "powerplant",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub results: serde_json::Map<String, Value>,
    pub artifacts: Vec<Artifact>,
    /// Failed diagnostics, one message each.
    pub failures: Vec<String>,
}

impl Outcome {
    fn put(&mut self, key: &str, v: impl Serialize) {
        let v = serde_json::to_value(v).unwrap_or(Value::Null);
        self.results.insert(key.to_string(), v);
    }

    fn csv(&mut self, name: &str, write: impl FnOnce(&mut Vec<u8>) -> ebsde_core::Result<()>) -> Result<(), CliError> {
        let mut bytes = Vec::new();
        write(&mut bytes)?;
        self.artifacts.push(Artifact { name: name.to_string(), bytes });
        Ok(())
    }

    fn fail(&mut self, msg: impl Into<String>) {
        self.failures.push(msg.into());
    }
}

fn f(v: f64) -> String {
    format!("{v:.12e}")
}

pub fn execute(sub: Subcommand, cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let mut out = Outcome::default();
    match sub {
        Subcommand::Simulate => run_simulate(cfg, &mut out)?,
        Subcommand::Ergodicity => run_ergodicity(cfg, &mut out)?,
        Subcommand::Bsde => run_bsde(cfg, &mut out)?,
        Subcommand::Discounted => run_discounted(cfg, &mut out)?,
        Subcommand::Ebsde => run_ebsde(cfg, &mut out)?,
        Subcommand::Control => run_control(cfg, &mut out)?,
        Subcommand::Powerplant => run_powerplant(cfg, &mut out)?,
    }
    Ok(out)
}

fn sim_spec(cfg: &ExperimentConfig, t_end: f64) -> SimulationSpec {
    let s = &cfg.simulation;
    SimulationSpec::new(s.t_start, t_end, s.dt, s.n_paths, cfg.seed)
}

/// Sample variance with the standard error of `(x - mean)^2`.
fn variance_estimate(xs: &[f64]) -> Estimate {
    let m = ebsde_core::stats::mean(xs);
    let sq: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
    let e = estimate(&sq);
    let n = xs.len() as f64;
    Estimate::new(e.mean * n / (n - 1.0).max(1.0), e.stderr)
}

fn run_simulate(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), CliError> {
    let coeffs = cfg.coefficients()?;
    let noise = cfg.noise()?;
    let s = &cfg.simulation;
    let ens = simulate_recorded(&coeffs, &noise, &s.x0, &sim_spec(cfg, s.t_end), s.record_every)?;
    out.csv("summary.csv", |w| ens.write_summary_csv(w))?;
    if cfg.output.ensemble_binary {
        out.csv("ensemble.bin", |w| ens.write_binary(w))?;
    }
    let last = ens.n_times() - 1;
    let vars: Vec<Estimate> = (0..ens.dim()).map(|k| variance_estimate(&ens.marginal(last, k))).collect();
    out.put("t_end", ens.grid()[last]);
    out.put("stationary_variance", &vars);
    let report = moment_bound_report(&ens, &coeffs, &noise);
    out.csv("moments.csv", |w| {
        use std::io::Write;
        writeln!(w, "t,second_moment,stderr,theory_bound")?;
        let x2 = report.moments[0].mean;
        for (t, m) in report.times.iter().zip(&report.moments) {
            let a = x2 * (-2.0 * report.mu * (t - report.times[0])).exp();
            writeln!(w, "{},{},{},{}", f(*t), f(m.mean), f(m.stderr), f(report.theory_d * (a + report.theory_c)))?;
        }
        Ok(())
    })?;
    out.put(
        "moment_bound",
        json!({
            "mu": report.mu,
            "fitted_d": report.fitted_d,
            "fitted_c": report.fitted_c,
            "theory_d": report.theory_d,
            "theory_c": report.theory_c,
            "violations": report.violations,
        }),
    );
    if !report.violations.is_empty() {
        out.fail(format!("second moment exceeds the theory bound at {} grid times", report.violations.len()));
    }
    Ok(())
}

fn run_ergodicity(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), CliError> {
    let Some(erg) = &cfg.ergodicity else {
        return Err(CliError::MissingSection("ergodicity".into()));
    };
    let coeffs = cfg.coefficients()?;
    let noise = cfg.noise()?;
    let s = &cfg.simulation;
    let d = cfg.model.dim;
    if let Some(c) = &erg.coupling {
        let psis = c.test_functions.iter().map(|t| parse_test_function(t, d)).collect::<Result<Vec<_>, _>>()?;
        let fit = coupling_decay(&coeffs, &noise, &c.x, &c.y, &psis, c.horizon, s.dt, s.n_paths, cfg.seed, c.record_every)?;
        out.csv("coupling.csv", |w| fit.write_csv(w))?;
        out.put(
            "coupling",
            json!({
                "rho_hat": fit.rho_hat,
                "rho_stderr": fit.rho_stderr,
                "c_hat": fit.c_hat,
                "r_squared": fit.r_squared,
                "degenerate": fit.degenerate,
                "fits": fit.fits,
            }),
        );
        if fit.degenerate || !(fit.rho_hat > 0.0) {
            out.fail("coupling gaps show no exponential decay");
        }
    }
    if let Some(h) = &erg.hitting {
        let st = hitting_times(&coeffs, &noise, &h.x, &h.center, h.radius, h.horizon, s.dt, s.n_paths, cfg.seed)?;
        out.csv("survival.csv", |w| st.write_survival_csv(w))?;
        let hit: Vec<f64> = st.samples.iter().flatten().cloned().collect();
        out.put(
            "hitting",
            json!({
                "survival_at_horizon": st.survival_at(h.horizon),
                "censored": st.censored,
                "mean_hitting_time_uncensored": if hit.is_empty() { Value::Null } else { json!(ebsde_core::stats::mean(&hit)) },
            }),
        );
    }
    if let Some(inv) = &erg.invariant {
        let sample = harvest_invariant(&coeffs, &noise, inv.burn_in, inv.horizon, inv.thinning, inv.dt.unwrap_or(s.dt), cfg.seed)?;
        out.csv("invariant.csv", |w| sample.write_csv(w))?;
        let period = coeffs.period();
        let ks: Vec<Value> = (0..d)
            .map(|k| {
                let (stat, p) = sample.periodicity_ks(k, 0.0, period);
                json!({"coordinate": k, "statistic": stat, "p_value": p})
            })
            .collect();
        let means: Vec<Estimate> = (0..d).map(|k| sample.integrate(|_, x| x[k])).collect::<ebsde_core::Result<_>>()?;
        out.put("invariant", json!({"n_samples": sample.len(), "mean": means, "period_ks": ks}));
    }
    Ok(())
}

fn run_bsde(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), CliError> {
    let Some(b) = &cfg.bsde else {
        return Err(CliError::MissingSection("bsde".into()));
    };
    let driver = cfg.driver()?;
    let coeffs = cfg.coefficients()?;
    let noise = cfg.noise()?;
    let s = &cfg.simulation;
    let terminal = state_fn(&b.terminal, cfg.model.dim, "bsde.terminal")?;
    let t_end = s.t_start + b.horizon;
    let ens = simulate(&coeffs, &noise, &s.x0, &sim_spec(cfg, t_end))?;
    let sol = solve_finite_horizon(&driver, &ens, &coeffs, &noise, &terminal, &cfg.basis())?;
    out.csv("coefficients.csv", |w| sol.write_coefficients_csv(w))?;
    out.put("y0", sol.y0());
    out.put("ill_conditioned_steps", &sol.ill_conditioned_steps);
    if b.residuals {
        let res = martingale_residuals(&sol, &driver, &ens, &coeffs, &noise)?;
        let bad: Vec<usize> = res
            .iter()
            .enumerate()
            .filter(|(_, r)| r.mean.abs() > 4.0 * r.stderr + 1e-12)
            .map(|(n, _)| n)
            .collect();
        out.csv("residuals.csv", |w| {
            use std::io::Write;
            writeln!(w, "t,mean,stderr")?;
            for (n, r) in res.iter().enumerate() {
                writeln!(w, "{},{},{}", f(sol.grid[n]), f(r.mean), f(r.stderr))?;
            }
            Ok(())
        })?;
        out.put("residual_failures", &bad);
        if !bad.is_empty() {
            out.fail(format!("martingale residual mean exceeds 4 standard errors at {} steps", bad.len()));
        }
    }
    if let Some(p) = &b.pide {
        if cfg.model.dim != 1 {
            return Err(CliError::Config { key: "bsde.pide".into(), msg: "the PIDE oracle is one-dimensional".into() });
        }
        let space = SpaceGrid { x_min: p.x_min, x_max: p.x_max, n_x: p.n_x };
        let time = TimeGrid { t_start: s.t_start, t_end, n_steps: p.n_steps, record_every: (p.n_steps / 50).max(1) };
        let oracle = pide_oracle_1d(&driver, &coeffs, &noise, &terminal, &space, &time)?;
        let quarter = 0.25 * (p.x_max - p.x_min);
        let (lo, hi) = (p.x_min + quarter, p.x_max - quarter);
        let n = ens.n_times() - 1;
        let mut rows = Vec::new();
        let (mut num, mut den) = (0.0, 0.0);
        for i in (n / 10..=(9 * n) / 10).step_by((n / 20).max(1)) {
            let t = ens.grid()[i];
            let xs: Vec<f64> = ens.states_at(i).iter().cloned().filter(|x| *x >= lo && *x <= hi).collect();
            let stride = (xs.len() / p.n_compare.max(1)).max(1);
            for &x in xs.iter().step_by(stride) {
                let (r, o) = (sol.y(t, &[x]), oracle.value(t, x));
                num += (r - o) * (r - o);
                den += o * o;
                rows.push((t, x, r, o));
            }
        }
        let y0 = sol.y0();
        let o0 = oracle.value(s.t_start, s.x0[0]);
        out.csv("pide_comparison.csv", |w| {
            use std::io::Write;
            writeln!(w, "t,x,regression,oracle")?;
            for (t, x, r, o) in &rows {
                writeln!(w, "{},{},{},{}", f(*t), f(*x), f(*r), f(*o))?;
            }
            Ok(())
        })?;
        out.put(
            "pide",
            json!({
                "relative_rms": if den > 0.0 { (num / den).sqrt() } else { num.sqrt() },
                "n_points": rows.len(),
                "y0_oracle": o0,
                "y0_gap": (y0.mean - o0).abs(),
            }),
        );
    }
    Ok(())
}

fn run_discounted(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), CliError> {
    let Some(ds) = &cfg.discounted else {
        return Err(CliError::MissingSection("discounted".into()));
    };
    let driver = cfg.driver()?;
    let coeffs = cfg.coefficients()?;
    let noise = cfg.noise()?;
    let x = ds.x.clone().unwrap_or_else(|| cfg.simulation.x0.clone());
    let num = cfg.numerics();
    let r = solve_discounted(&driver, &coeffs, &noise, ds.alpha, ds.s, &x, ds.epsilon_trunc, &num)?;
    out.put("alpha", r.alpha);
    out.put("value", r.value);
    out.put("truncation_t", r.truncation_t);
    out.put("bound_check", r.bound_check);
    out.put("zero_bound", r.zero_bound);
    out.csv("coefficients.csv", |w| r.solution.write_coefficients_csv(w))?;
    if r.bound_check.violated {
        out.fail(format!("max |Y| = {} exceeds C/alpha + eps = {}", r.bound_check.max_abs_y, r.bound_check.limit));
    }
    if r.zero_bound.violations > 0 {
        out.fail(format!("|f(x, 0, 0)| exceeds the declared bound at {} sampled states", r.zero_bound.violations));
    }
    if !ds.horizons.is_empty() {
        let rows = horizon_convergence_study(&driver, &coeffs, &noise, ds.alpha, ds.s, &x, &ds.horizons, &num)?;
        let over: Vec<f64> = rows.iter().filter(|r| r.gap > r.bound + 3.0 * r.gap_stderr).map(|r| r.horizon).collect();
        out.csv("horizons.csv", |w| {
            use std::io::Write;
            writeln!(w, "T,value,gap,gap_stderr,bound")?;
            for r in &rows {
                writeln!(w, "{},{},{},{},{}", f(r.horizon), f(r.value), f(r.gap), f(r.gap_stderr), f(r.bound))?;
            }
            Ok(())
        })?;
        out.put("horizon_study", &rows);
        if !over.is_empty() {
            out.fail(format!("horizon gaps exceed the convergence bound at T = {over:?}"));
        }
    }
    Ok(())
}

fn export_points(cfg: &ExperimentConfig, listed: &[Vec<f64>]) -> Vec<Vec<f64>> {
    if !listed.is_empty() {
        return listed.to_vec();
    }
    let e = cfg.ebsde.as_ref();
    match e {
        Some(e) if !e.export_x.is_empty() => e.export_x.clone(),
        Some(e) if !e.probes.is_empty() => e.probes.clone(),
        _ => vec![vec![0.0; cfg.model.dim]],
    }
}

fn phases(period: f64, n: usize) -> Vec<f64> {
    (0..n.max(1)).map(|i| period * i as f64 / n.max(1) as f64).collect()
}

/// Shared tail of `ebsde`, `control` and `powerplant`.
fn report_ebsde(cfg: &ExperimentConfig, result: &EbsdeResult, xs: &[Vec<f64>], n_phases: usize, out: &mut Outcome) -> Result<(), CliError> {
    out.put("lambda_hat", result.lambda_hat);
    out.put("lambda_stderr", result.lambda_stderr);
    out.put("ebsde", result);
    out.csv("per_alpha.csv", |w| result.write_per_alpha_csv(w))?;
    out.csv("v.csv", |w| result.write_v_csv(w, &phases(result.period, n_phases), xs))?;
    if result.has_failure() {
        out.fail("discounted bound or declared zero bound violated in the vanishing-discount sweep");
    }
    let Some(e) = &cfg.ebsde else {
        return Ok(());
    };
    if let Some(p) = &e.periodicity {
        let rep = periodicity_check(result, xs, p.phases, p.tol);
        out.put("periodicity", &rep);
        if !rep.pass {
            out.fail(format!("v differs across one period by {} (range {})", rep.max_deviation, rep.v_range));
        }
    }
    Ok(())
}

fn invariant_cross_check(
    cfg: &ExperimentConfig,
    driver: &ebsde_core::bsde::Driver,
    result: &EbsdeResult,
    out: &mut Outcome,
) -> Result<(), CliError> {
    let Some(inv) = cfg.ebsde.as_ref().and_then(|e| e.invariant_check) else {
        return Ok(());
    };
    let coeffs = cfg.coefficients()?;
    let noise = cfg.noise()?;
    let sample = harvest_invariant(&coeffs, &noise, inv.burn_in, inv.horizon, inv.thinning, inv.dt.unwrap_or(cfg.simulation.dt), cfg.seed)?;
    let l2 = lambda_via_invariant_measure(driver, result, &sample)?;
    let se = result.lambda_stderr.hypot(l2.stderr);
    let gap = (result.lambda_hat - l2.mean).abs();
    out.put("lambda_invariant", json!({"estimate": l2, "gap": gap, "combined_stderr": se, "n_samples": sample.len()}));
    if gap > 2.0 * se {
        out.fail(format!("lambda from the invariant measure differs by {gap} > 2 x {se}"));
    }
    Ok(())
}

fn run_ebsde(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), CliError> {
    let driver = cfg.driver()?;
    let opts = cfg.vanishing_options()?;
    let coeffs = cfg.coefficients()?;
    let noise = cfg.noise()?;
    let result = vanishing_discount(&driver, &coeffs, &noise, &opts)?;
    let e = cfg.ebsde.as_ref().expect("checked by vanishing_options");
    report_ebsde(cfg, &result, &export_points(cfg, &[]), e.export_phases, out)?;
    invariant_cross_check(cfg, &driver, &result, out)
}

fn run_control(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), CliError> {
    let problem = cfg.control_problem()?;
    let c = cfg.control.as_ref().expect("checked by control_problem");
    let opts = cfg.vanishing_options()?;
    let coeffs = cfg.coefficients()?;
    let noise = cfg.noise()?;
    let (result, policy) = solve_ergodic_control(&problem, &coeffs, &noise, &opts)?;
    let xs = export_points(cfg, &c.export_x);
    report_ebsde(cfg, &result, &xs, c.export_phases, out)?;
    out.csv("policy.csv", |w| policy.write_csv(w, &problem, &noise, &phases(coeffs.period(), c.export_phases), &xs))?;

    let ev = &c.evaluation;
    let x0 = ev.x0.clone().unwrap_or_else(|| cfg.simulation.x0.clone());
    let eval = |p: &Policy| evaluate_policy(&problem, p, &coeffs, &noise, &x0, ev.burn_in, ev.horizon, ev.dt.unwrap_or(cfg.simulation.dt), ev.n_paths, cfg.seed);
    let feedback = eval(&policy)?;
    let mut constant: Vec<(String, PolicyEvaluation)> = Vec::new();
    if ev.constant_controls {
        for (i, l) in problem.labels.iter().enumerate() {
            constant.push((l.clone(), eval(&Policy::Constant(i))?));
        }
    }
    let lam = Estimate::new(result.lambda_hat, result.lambda_stderr);
    let se = lam.stderr.hypot(feedback.stderr);
    if (feedback.j_hat - lam.mean).abs() > 2.0 * se {
        out.fail(format!("extracted policy cost {} differs from lambda {} by more than 2 x {se}", feedback.j_hat, lam.mean));
    }
    for (l, e) in &constant {
        let se = lam.stderr.hypot(e.stderr);
        if lam.mean > e.j_hat + 2.0 * se {
            out.fail(format!("lambda {} exceeds the cost {} of constant control {l}", lam.mean, e.j_hat));
        }
    }
    let report = json!({
        "lambda": lam,
        "feedback": feedback,
        "constant": constant.iter().map(|(l, e)| json!({"control": l, "evaluation": e})).collect::<Vec<_>>(),
    });
    let bytes = serde_json::to_vec_pretty(&report).map_err(|e| CliError::Io(e.to_string()))?;
    out.artifacts.push(Artifact { name: "evaluation.json".into(), bytes });
    out.put("evaluation", report);
    let driver = ebsde_core::control::hamiltonian_driver(&problem, &noise)?;
    invariant_cross_check(cfg, &driver, &result, out)
}

fn run_powerplant(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), CliError> {
    let model = cfg.spark_spread()?;
    let p = cfg.powerplant.as_ref().expect("checked by spark_spread");
    let opts = cfg.vanishing_options()?;
    let wc = worst_case_lambda(&model, &opts)?;
    let e = cfg.ebsde.as_ref().expect("checked by vanishing_options");
    report_ebsde(cfg, &wc.result, &export_points(cfg, &[]), e.export_phases, out)?;
    let lam = wc.lambda;
    let values: Vec<(f64, f64, f64, f64)> = p
        .lifetimes
        .iter()
        .map(|&n| -> Result<_, CliError> {
            Ok((
                n,
                plant_value(lam.mean, &p.discount, n)?,
                plant_value(lam.mean - 2.0 * lam.stderr, &p.discount, n)?,
                plant_value(lam.mean + 2.0 * lam.stderr, &p.discount, n)?,
            ))
        })
        .collect::<Result<_, _>>()?;
    out.csv("sensitivity.csv", |w| {
        use std::io::Write;
        writeln!(w, "N,value,value_low,value_high")?;
        for (n, v, lo, hi) in &values {
            writeln!(w, "{},{},{},{}", f(*n), f(*v), f(*lo), f(*hi))?;
        }
        Ok(())
    })?;
    let mut report = json!({
        "lambda_hat": lam.mean,
        "lambda_stderr": lam.stderr,
        "adversarial_scenario": wc.adversarial_scenario(),
        "scenario_usage": wc.scenario_usage,
        "values": values.iter().map(|(n, v, _, _)| json!({"N": n, "value": v})).collect::<Vec<_>>(),
    });
    if p.monotonicity {
        let nested = monotonicity_study(&model, &opts)?;
        for (i, w) in nested.windows(2).enumerate() {
            if w[1].mean > w[0].mean + 2.0 * w[0].stderr.hypot(w[1].stderr) {
                out.fail(format!("adding scenario {} raised the worst-case lambda", i + 2));
            }
        }
        report["nested_lambda"] = json!(nested);
    }
    let bytes = serde_json::to_vec_pretty(&report).map_err(|e| CliError::Io(e.to_string()))?;
    out.artifacts.push(Artifact { name: "valuation.json".into(), bytes });
    out.put("valuation", report);
    let driver = ebsde_core::control::hamiltonian_driver(&wc.problem, &cfg.noise()?)?;
    invariant_cross_check(cfg, &driver, &wc.result, out)
}
