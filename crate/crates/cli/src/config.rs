//! Experiment configuration: TOML sections, `key=value` overrides, and the
//! builders that turn sections into library objects.
//!
//! Units: times and horizons are in the model's time unit (the coefficient
//! period is one such unit unless set otherwise), rates are per time unit.

use std::path::Path;
use std::sync::Arc;

use ebsde_core::bsde::{Driver, StateFn};
use ebsde_core::coefficients::{CoefficientBounds, DriftFn, MatrixFn, PeriodicCoefficients};
use ebsde_core::control::ControlProblem;
use ebsde_core::discounted::{Numerics, MAX_ALPHA_DT};
use ebsde_core::ebsde::{geometric_schedule, ProbePoint, VanishingOptions};
use ebsde_core::ergodicity::BoundedFn;
use ebsde_core::levy::{JumpMark, LevyModel};
use ebsde_core::powerplant::{Payoff, RateFn, Scenario, Seasonal, SparkSpreadModel};
use ebsde_core::regression::{BasisFamily, RegressionBasis};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub coefficients: Option<CoefficientsSection>,
    pub simulation: SimulationSection,
    pub ergodicity: Option<ErgodicitySection>,
    pub driver: Option<DriverSpec>,
    pub bsde: Option<BsdeSection>,
    pub discounted: Option<DiscountedSection>,
    pub ebsde: Option<EbsdeSection>,
    pub control: Option<ControlSection>,
    pub powerplant: Option<PowerplantSection>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub dim: usize,
    /// Diffusion covariance `Q`, row-major.
    pub covariance: Vec<f64>,
    #[serde(default)]
    pub jumps: Vec<JumpSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpSpec {
    pub mark: Vec<f64>,
    /// Jumps per time unit.
    pub intensity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientsSection {
    #[serde(default = "one")]
    pub period: f64,
    pub a: MatrixSpec,
    #[serde(default)]
    pub f: DriftSpec,
    pub g: MatrixSpec,
    pub bounds: BoundsSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum MatrixSpec {
    /// Row-major entries.
    Constant { matrix: Vec<f64> },
    SinusoidalDiagonal {
        base: Vec<f64>,
        amplitude: Vec<f64>,
        #[serde(default)]
        phase: f64,
    },
    /// One row-major matrix per knot in `[0, period)`.
    Tabulated { knots: Vec<f64>, matrices: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftSpec {
    #[default]
    Zero,
    Constant { values: Vec<f64> },
    Sinusoidal {
        base: Vec<f64>,
        amplitude: Vec<f64>,
        #[serde(default)]
        phase: f64,
    },
    Tanh { scale: Vec<f64>, width: f64 },
    Tabulated { knots: Vec<f64>, values: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSpec {
    pub f_sup: f64,
    pub stability_mu: f64,
    #[serde(default = "one")]
    pub stability_m: f64,
    pub ginv_bound: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    pub x0: Vec<f64>,
    #[serde(default)]
    pub t_start: f64,
    pub t_end: f64,
    pub dt: f64,
    pub n_paths: usize,
    /// Stride of the stored time grid for `simulate` and `ergodicity`.
    #[serde(default = "one_usize")]
    pub record_every: usize,
    #[serde(default = "three")]
    pub basis_degree: usize,
    #[serde(default = "polynomial")]
    pub basis: BasisFamily,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErgodicitySection {
    pub coupling: Option<CouplingSpec>,
    pub hitting: Option<HittingSpec>,
    pub invariant: Option<InvariantSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingSpec {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// `sin:k` or `cos:k`, optionally scaled as `2*sin:0`.
    pub test_functions: Vec<String>,
    pub horizon: f64,
    #[serde(default = "ten")]
    pub record_every: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HittingSpec {
    pub x: Vec<f64>,
    pub center: Vec<f64>,
    pub radius: f64,
    pub horizon: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvariantSpec {
    pub burn_in: f64,
    pub horizon: f64,
    #[serde(default = "ten")]
    pub thinning: usize,
    /// Step for the harvest; defaults to `simulation.dt`.
    pub dt: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriverSpec {
    Constant {
        value: f64,
    },
    /// `scale |x|^2`
    Quadratic {
        #[serde(default = "one")]
        scale: f64,
        zero_bound: f64,
    },
    /// `weights . x + offset`
    Linear {
        weights: Vec<f64>,
        #[serde(default)]
        offset: f64,
        zero_bound: f64,
    },
    /// `x_k^+`
    PositivePart {
        #[serde(default)]
        coordinate: usize,
        zero_bound: f64,
    },
    /// `x_amp sum sin(x_k) + z_amp sum tanh(z_k) + sum_i w_i lambda_i u_i`
    Bounded {
        x_amp: f64,
        #[serde(default)]
        z_amp: f64,
        #[serde(default)]
        u_weights: Vec<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum StateSpec {
    Constant {
        value: f64,
    },
    Linear {
        weights: Vec<f64>,
        #[serde(default)]
        offset: f64,
    },
    Quadratic {
        #[serde(default = "one")]
        scale: f64,
    },
    PositivePart {
        #[serde(default)]
        coordinate: usize,
    },
    /// `1 / (1 + exp(-(x_k - center) / width))`
    Logistic {
        center: f64,
        width: f64,
        #[serde(default)]
        coordinate: usize,
    },
    Sin {
        #[serde(default)]
        coordinate: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BsdeSection {
    pub horizon: f64,
    pub terminal: StateSpec,
    #[serde(default = "yes")]
    pub residuals: bool,
    pub pide: Option<PideSpec>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PideSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub n_x: usize,
    pub n_steps: usize,
    /// Comparison points: the central half of the grid, this many of them.
    #[serde(default = "twenty_five")]
    pub n_compare: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscountedSection {
    pub alpha: f64,
    #[serde(default)]
    pub s: f64,
    /// Defaults to `simulation.x0`.
    pub x: Option<Vec<f64>>,
    pub epsilon_trunc: f64,
    /// Horizon lengths for the convergence study; empty skips it.
    #[serde(default)]
    pub horizons: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EbsdeSection {
    /// Explicit decreasing schedule; otherwise `alpha_first 2^{-n}`.
    pub alpha_schedule: Option<Vec<f64>>,
    pub alpha_first: Option<f64>,
    pub levels: Option<usize>,
    pub epsilon_trunc: f64,
    #[serde(default)]
    pub probes: Vec<Vec<f64>>,
    #[serde(default)]
    pub probe_phase: f64,
    pub base_point: Option<Vec<f64>>,
    #[serde(default)]
    pub base_phase: f64,
    /// Points for the `v` surface export; defaults to the probes.
    #[serde(default)]
    pub export_x: Vec<Vec<f64>>,
    #[serde(default = "four")]
    pub export_phases: usize,
    pub invariant_check: Option<InvariantSpec>,
    pub periodicity: Option<PeriodicitySpec>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeriodicitySpec {
    pub phases: usize,
    pub tol: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSection {
    pub controls: Vec<ControlSpec>,
    /// State part of the running cost; each control adds its penalty.
    pub cost: StateSpec,
    pub cost_bound: f64,
    #[serde(default)]
    pub cost_lipschitz: f64,
    pub evaluation: EvaluationSpec,
    #[serde(default)]
    pub export_x: Vec<Vec<f64>>,
    #[serde(default = "four")]
    pub export_phases: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSpec {
    pub label: String,
    /// Drift shift `R(c)`.
    pub drift: Vec<f64>,
    #[serde(default)]
    pub penalty: f64,
    #[serde(default)]
    pub gamma: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSpec {
    pub x0: Option<Vec<f64>>,
    pub burn_in: f64,
    pub horizon: f64,
    pub n_paths: usize,
    /// Step for the controlled simulation; defaults to `simulation.dt`.
    pub dt: Option<f64>,
    /// Also evaluate every constant control.
    #[serde(default = "yes")]
    pub constant_controls: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerplantSection {
    pub theta: Seasonal,
    pub kappa: Seasonal,
    pub vol: f64,
    #[serde(default = "one")]
    pub period: f64,
    #[serde(default = "base_scenarios")]
    pub scenarios: Vec<Scenario>,
    #[serde(default = "positive_part")]
    pub payoff: Payoff,
    pub payoff_bound: Option<f64>,
    pub discount: RateFn,
    /// Plant lifetimes in years.
    pub lifetimes: Vec<f64>,
    /// Also solve the nested scenario sets.
    #[serde(default)]
    pub monotonicity: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<String>,
    #[serde(default)]
    pub ensemble_binary: bool,
}

fn one() -> f64 {
    1.0
}
fn one_usize() -> usize {
    1
}
fn three() -> usize {
    3
}
fn four() -> usize {
    4
}
fn ten() -> usize {
    10
}
fn twenty_five() -> usize {
    25
}
fn yes() -> bool {
    true
}
fn polynomial() -> BasisFamily {
    BasisFamily::Polynomial
}
fn base_scenarios() -> Vec<Scenario> {
    vec![Scenario::base()]
}
fn positive_part() -> Payoff {
    Payoff::PositivePart
}

fn bad<T>(key: &str, msg: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::Config {
        key: key.to_string(),
        msg: msg.into(),
    })
}

/// Raw TOML text with overrides applied.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub raw: Vec<u8>,
    pub resolved: toml::Table,
    pub config: ExperimentConfig,
}

pub fn load(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<LoadedConfig, CliError> {
    let raw = std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let text = String::from_utf8(raw.clone()).map_err(|_| CliError::Io(format!("{} is not UTF-8", path.display())))?;
    parse(&text, raw, overrides, seed)
}

pub fn parse(text: &str, raw: Vec<u8>, overrides: &[String], seed: Option<u64>) -> Result<LoadedConfig, CliError> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Parse(e.to_string()))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    if let Some(s) = seed {
        let v = i64::try_from(s).map_err(|_| CliError::Config { key: "seed".into(), msg: "seed exceeds i64".into() })?;
        table.insert("seed".into(), toml::Value::Integer(v));
    }
    let config: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(table.clone())).map_err(|e| {
        let key = e.path().to_string();
        CliError::Config {
            key: if key == "." { "<root>".into() } else { key },
            msg: e.into_inner().to_string(),
        }
    })?;
    config.validate()?;
    Ok(LoadedConfig { raw, resolved: table, config })
}

/// `section.key=value`, with `value` parsed as a TOML value and read as a
/// string when that fails.
pub fn apply_override(table: &mut toml::Table, item: &str) -> Result<(), CliError> {
    let Some((key, value)) = item.split_once('=') else {
        return bad(item, "override must look like section.key=value");
    };
    let key = key.trim();
    let parsed: toml::Value = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.trim().to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return bad(key, "empty key segment in override");
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return bad(key, format!("`{p}` is not a section")),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let d = self.model.dim;
        if d == 0 || d > ebsde_core::MAX_DIM {
            return bad("model.dim", format!("must be in 1..={}", ebsde_core::MAX_DIM));
        }
        if self.model.covariance.len() != d * d {
            return bad("model.covariance", format!("needs {} entries (row-major {d}x{d})", d * d));
        }
        for (i, j) in self.model.jumps.iter().enumerate() {
            if j.mark.len() != d {
                return bad(&format!("model.jumps[{i}].mark"), format!("needs {d} entries"));
            }
        }
        let s = &self.simulation;
        if s.x0.len() != d {
            return bad("simulation.x0", format!("needs {d} entries"));
        }
        if !(s.dt > 0.0) {
            return bad("simulation.dt", "must be positive");
        }
        if !(s.t_end > s.t_start) {
            return bad("simulation.t_end", "must exceed t_start");
        }
        if s.n_paths == 0 {
            return bad("simulation.n_paths", "must be positive");
        }
        if s.record_every == 0 {
            return bad("simulation.record_every", "must be positive");
        }
        let check_alpha = |key: &str, a: f64| -> Result<(), CliError> {
            if !(a > 0.0) {
                return bad(key, "discount rates must be positive");
            }
            if a * s.dt > MAX_ALPHA_DT * (1.0 + 1e-12) {
                return bad(key, format!("alpha * dt = {} exceeds {MAX_ALPHA_DT}; lower simulation.dt", a * s.dt));
            }
            Ok(())
        };
        if let Some(ds) = &self.discounted {
            check_alpha("discounted.alpha", ds.alpha)?;
            if ds.x.as_ref().is_some_and(|x| x.len() != d) {
                return bad("discounted.x", format!("needs {d} entries"));
            }
            if ds.horizons.windows(2).any(|w| w[1] <= w[0]) || ds.horizons.iter().any(|h| !(*h > 0.0)) {
                return bad("discounted.horizons", "must be positive and strictly increasing");
            }
        }
        if let Some(e) = &self.ebsde {
            let sched = e.schedule()?;
            for a in &sched {
                check_alpha("ebsde.alpha_schedule", *a)?;
            }
            if sched.len() < 2 || sched.windows(2).any(|w| w[1] >= w[0]) {
                return bad("ebsde.alpha_schedule", "needs at least two strictly decreasing rates");
            }
            for (i, p) in e.probes.iter().chain(&e.export_x).enumerate() {
                if p.len() != d {
                    return bad(&format!("ebsde.probes[{i}]"), format!("needs {d} entries"));
                }
            }
            if e.base_point.as_ref().is_some_and(|x| x.len() != d) {
                return bad("ebsde.base_point", format!("needs {d} entries"));
            }
            if let Some(inv) = &e.invariant_check {
                check_window("ebsde.invariant_check", inv.burn_in, inv.horizon)?;
            }
        }
        if let Some(erg) = &self.ergodicity {
            if let Some(inv) = &erg.invariant {
                check_window("ergodicity.invariant", inv.burn_in, inv.horizon)?;
            }
            if let Some(c) = &erg.coupling {
                if c.x.len() != d || c.y.len() != d {
                    return bad("ergodicity.coupling", format!("x and y need {d} entries"));
                }
                for t in &c.test_functions {
                    parse_test_function(t, d)?;
                }
            }
            if let Some(h) = &erg.hitting {
                if h.x.len() != d || h.center.len() != d {
                    return bad("ergodicity.hitting", format!("x and center need {d} entries"));
                }
            }
        }
        if let Some(c) = &self.control {
            if c.controls.is_empty() {
                return bad("control.controls", "at least one control is needed");
            }
            for (i, u) in c.controls.iter().enumerate() {
                if u.drift.len() != d {
                    return bad(&format!("control.controls[{i}].drift"), format!("needs {d} entries"));
                }
                if !u.gamma.is_empty() && u.gamma.len() != self.model.jumps.len() {
                    return bad(&format!("control.controls[{i}].gamma"), "needs one entry per jump mark");
                }
            }
            check_window("control.evaluation", c.evaluation.burn_in, c.evaluation.horizon)?;
        }
        if let Some(p) = &self.powerplant {
            if d != 1 {
                return bad("model.dim", "the power plant model is one-dimensional");
            }
            if p.lifetimes.iter().any(|n| !(*n > 0.0)) {
                return bad("powerplant.lifetimes", "lifetimes must be positive");
            }
        }
        Ok(())
    }

    pub fn noise(&self) -> Result<LevyModel, CliError> {
        let d = self.model.dim;
        let q = DMatrix::from_row_slice(d, d, &self.model.covariance);
        let marks = self
            .model
            .jumps
            .iter()
            .map(|j| JumpMark { mark: j.mark.clone(), intensity: j.intensity })
            .collect();
        LevyModel::new(q, marks).map_err(|e| CliError::Check { section: "model".into(), source: e })
    }

    /// From `[coefficients]`, or from `[powerplant]` when only that is given.
    pub fn coefficients(&self) -> Result<PeriodicCoefficients, CliError> {
        let Some(c) = &self.coefficients else {
            if self.powerplant.is_some() {
                return self
                    .spark_spread()?
                    .coefficients()
                    .map_err(|e| CliError::Check { section: "powerplant".into(), source: e });
            }
            return Err(CliError::MissingSection("coefficients".into()));
        };
        let d = self.model.dim;
        let wrap = |e| CliError::Check { section: "coefficients".into(), source: e };
        PeriodicCoefficients::new(
            d,
            c.period,
            matrix_fn(&c.a, d, "coefficients.a")?,
            drift_fn(&c.f),
            matrix_fn(&c.g, d, "coefficients.g")?,
            CoefficientBounds {
                f_sup: c.bounds.f_sup,
                stability_mu: c.bounds.stability_mu,
                stability_m: c.bounds.stability_m,
                ginv_bound: c.bounds.ginv_bound,
            },
        )
        .map_err(wrap)
    }

    pub fn basis(&self) -> RegressionBasis {
        RegressionBasis {
            family: self.simulation.basis,
            degree: self.simulation.basis_degree,
            normalize: true,
        }
    }

    pub fn numerics(&self) -> Numerics {
        Numerics {
            dt: self.simulation.dt,
            n_paths: self.simulation.n_paths,
            basis: self.basis(),
            seed: self.seed,
        }
    }

    pub fn driver(&self) -> Result<Driver, CliError> {
        let Some(spec) = &self.driver else {
            return Err(CliError::MissingSection("driver".into()));
        };
        let d = self.model.dim;
        let wrap = |e| CliError::Check { section: "driver".into(), source: e };
        match spec.clone() {
            DriverSpec::Constant { value } => Ok(Driver::constant(value)),
            DriverSpec::Quadratic { scale, zero_bound } => {
                Driver::state_only("quadratic", move |x| scale * x.iter().map(|v| v * v).sum::<f64>(), zero_bound).map_err(wrap)
            }
            DriverSpec::Linear { weights, offset, zero_bound } => {
                if weights.len() != d {
                    return bad("driver.weights", format!("needs {d} entries"));
                }
                Driver::state_only("linear", move |x| offset + x.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>(), zero_bound)
                    .map_err(wrap)
            }
            DriverSpec::PositivePart { coordinate, zero_bound } => {
                if coordinate >= d {
                    return bad("driver.coordinate", "out of range");
                }
                Driver::state_only("positive_part", move |x| x[coordinate].max(0.0), zero_bound).map_err(wrap)
            }
            DriverSpec::Bounded { x_amp, z_amp, u_weights } => {
                let k = self.model.jumps.len();
                let w = if u_weights.is_empty() { vec![0.0; k] } else { u_weights };
                if w.len() != k {
                    return bad("driver.u_weights", "needs one entry per jump mark");
                }
                if w.iter().any(|v| !(v.abs() < 1.0)) {
                    return bad("driver.u_weights", "entries must lie in (-1, 1)");
                }
                let lam: Vec<f64> = self.model.jumps.iter().map(|j| j.intensity).collect();
                let coef: Vec<f64> = w.iter().zip(&lam).map(|(a, b)| a * b).collect();
                let k_u = w.iter().zip(&lam).map(|(a, l)| a * a * l).sum::<f64>().sqrt();
                let lo = w.iter().cloned().fold(0.0, f64::min);
                let hi = w.iter().cloned().fold(0.0, f64::max);
                Driver::new(
                    "bounded",
                    Arc::new(move |x: &[f64], z: &[f64], u: &[f64]| {
                        x_amp * x.iter().map(|v| v.sin()).sum::<f64>()
                            + z_amp * z.iter().map(|v| v.tanh()).sum::<f64>()
                            + coef.iter().zip(u).map(|(c, v)| c * v).sum::<f64>()
                    }),
                    (z_amp.abs() * (d as f64).sqrt()).max(k_u),
                    x_amp.abs() * d as f64,
                    (lo, hi),
                )
                .map_err(wrap)
            }
        }
    }

    pub fn vanishing_options(&self) -> Result<VanishingOptions, CliError> {
        let Some(e) = &self.ebsde else {
            return Err(CliError::MissingSection("ebsde".into()));
        };
        let d = self.model.dim;
        let probes = e.probes.iter().map(|x| ProbePoint::new(e.probe_phase, x.clone())).collect();
        let mut o = VanishingOptions::new(d, e.schedule()?, probes, e.epsilon_trunc, self.numerics());
        if let Some(b) = &e.base_point {
            o.base_point = ProbePoint::new(e.base_phase, b.clone());
        } else {
            o.base_point.s = e.base_phase;
        }
        Ok(o)
    }

    pub fn control_problem(&self) -> Result<ControlProblem, CliError> {
        let Some(c) = &self.control else {
            return Err(CliError::MissingSection("control".into()));
        };
        let k = self.model.jumps.len();
        let base = state_fn(&c.cost, self.model.dim, "control.cost")?;
        let pens: Vec<f64> = c.controls.iter().map(|u| u.penalty).collect();
        let drifts: Vec<Vec<f64>> = c.controls.iter().map(|u| u.drift.clone()).collect();
        let r_bound = drifts.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max);
        let gamma = c
            .controls
            .iter()
            .map(|u| if u.gamma.is_empty() { vec![0.0; k] } else { u.gamma.clone() })
            .collect();
        ControlProblem::new(
            c.controls.iter().map(|u| u.label.clone()).collect(),
            Arc::new(move |x, u| base.eval(x) + pens[u]),
            c.cost_bound,
            c.cost_lipschitz,
            Arc::new(move |_x, u, out| out.copy_from_slice(&drifts[u])),
            r_bound,
            gamma,
            k,
        )
        .map_err(|e| CliError::Check { section: "control".into(), source: e })
    }

    pub fn spark_spread(&self) -> Result<SparkSpreadModel, CliError> {
        let Some(p) = &self.powerplant else {
            return Err(CliError::MissingSection("powerplant".into()));
        };
        let m = SparkSpreadModel {
            theta: p.theta,
            kappa: p.kappa,
            vol: p.vol,
            period: p.period,
            jumps: self.noise()?,
            scenarios: p.scenarios.clone(),
            payoff: p.payoff,
            payoff_bound: p.payoff_bound,
        };
        m.validate().map_err(|e| CliError::Check { section: "powerplant".into(), source: e })?;
        Ok(m)
    }
}

fn check_window(key: &str, burn_in: f64, horizon: f64) -> Result<(), CliError> {
    if !(burn_in >= 0.0) || !(horizon > burn_in) {
        return bad(key, format!("need 0 <= burn_in < horizon, got {burn_in} and {horizon}"));
    }
    Ok(())
}

impl EbsdeSection {
    pub fn schedule(&self) -> Result<Vec<f64>, CliError> {
        match (&self.alpha_schedule, self.alpha_first, self.levels) {
            (Some(s), None, None) => Ok(s.clone()),
            (None, Some(a), Some(n)) => Ok(geometric_schedule(a, n)),
            _ => bad("ebsde.alpha_schedule", "give either alpha_schedule or both alpha_first and levels"),
        }
    }
}

fn matrix_fn(spec: &MatrixSpec, d: usize, key: &str) -> Result<MatrixFn, CliError> {
    Ok(match spec {
        MatrixSpec::Constant { matrix } => {
            if matrix.len() != d * d {
                return bad(key, format!("needs {} entries", d * d));
            }
            MatrixFn::Constant(DMatrix::from_row_slice(d, d, matrix))
        }
        MatrixSpec::SinusoidalDiagonal { base, amplitude, phase } => MatrixFn::SinusoidalDiagonal {
            base: base.clone(),
            amplitude: amplitude.clone(),
            phase: *phase,
        },
        MatrixSpec::Tabulated { knots, matrices } => {
            if matrices.len() != knots.len() || matrices.iter().any(|m| m.len() != d * d) {
                return bad(key, format!("needs one {}-entry matrix per knot", d * d));
            }
            MatrixFn::Tabulated {
                knots: knots.clone(),
                values: matrices.iter().map(|m| DMatrix::from_row_slice(d, d, m)).collect(),
            }
        }
    })
}

fn drift_fn(spec: &DriftSpec) -> DriftFn {
    match spec.clone() {
        DriftSpec::Zero => DriftFn::Zero,
        DriftSpec::Constant { values } => DriftFn::Constant(values),
        DriftSpec::Sinusoidal { base, amplitude, phase } => DriftFn::Sinusoidal { base, amplitude, phase },
        DriftSpec::Tanh { scale, width } => DriftFn::Tanh { scale, width },
        DriftSpec::Tabulated { knots, values } => DriftFn::Tabulated { knots, values },
    }
}

pub fn state_fn(spec: &StateSpec, d: usize, key: &str) -> Result<StateFn, CliError> {
    let coord = |k: usize| if k < d { Ok(k) } else { bad(key, format!("coordinate {k} out of range")) };
    Ok(match spec.clone() {
        StateSpec::Constant { value } => StateFn::constant(value),
        StateSpec::Linear { weights, offset } => {
            if weights.len() != d {
                return bad(key, format!("weights need {d} entries"));
            }
            StateFn::new("linear", move |x| offset + x.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>())
        }
        StateSpec::Quadratic { scale } => StateFn::new("quadratic", move |x| scale * x.iter().map(|v| v * v).sum::<f64>()),
        StateSpec::PositivePart { coordinate } => {
            let k = coord(coordinate)?;
            StateFn::new("positive_part", move |x| x[k].max(0.0))
        }
        StateSpec::Logistic { center, width, coordinate } => {
            let k = coord(coordinate)?;
            if !(width > 0.0) {
                return bad(key, "logistic width must be positive");
            }
            StateFn::new("logistic", move |x| 1.0 / (1.0 + (-(x[k] - center) / width).exp()))
        }
        StateSpec::Sin { coordinate } => {
            let k = coord(coordinate)?;
            StateFn::new("sin", move |x| x[k].sin())
        }
    })
}

/// `sin:k`, `cos:k`, optionally prefixed by a scale as in `2*sin:0`.
pub fn parse_test_function(s: &str, d: usize) -> Result<BoundedFn, CliError> {
    let key = "ergodicity.coupling.test_functions";
    let (scale, body) = match s.split_once('*') {
        Some((k, b)) => match k.trim().parse::<f64>() {
            Ok(k) => (k, b.trim()),
            Err(_) => return bad(key, format!("bad scale in `{s}`")),
        },
        None => (1.0, s.trim()),
    };
    let Some((name, idx)) = body.split_once(':') else {
        return bad(key, format!("`{s}` should look like sin:0"));
    };
    let Ok(k) = idx.parse::<usize>() else {
        return bad(key, format!("bad coordinate in `{s}`"));
    };
    if k >= d {
        return bad(key, format!("coordinate {k} out of range in `{s}`"));
    }
    let f = match name {
        "sin" => BoundedFn::sin(k),
        "cos" => BoundedFn::cos(k),
        _ => return bad(key, format!("unknown test function `{name}`")),
    };
    Ok(if scale == 1.0 { f } else { f.scaled(scale) })
}
