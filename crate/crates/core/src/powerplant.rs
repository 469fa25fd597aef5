//! Robust long-run valuation of a power plant whose margin is the spark
//! spread `dX = theta_t (kappa_t - X) dt + sigma dL`, with seasonal
//! `theta`, `kappa` and a finite grid of parameter scenarios chosen by an
//! adversary.
//!
//! Jump marks are taken as given: a mark `m` moves the spread by `sigma m`.

use std::f64::consts::TAU;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::coefficients::{CoefficientBounds, DriftFn, MatrixFn, PeriodicCoefficients};
use crate::control::{solve_ergodic_control, ControlProblem, Policy};
use crate::ebsde::{EbsdeResult, VanishingOptions};
use crate::error::{argument, Result};
use crate::levy::LevyModel;
use crate::stats::Estimate;

/// `mean + amplitude sin(2 pi t / period + phase)`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seasonal {
    pub mean: f64,
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default)]
    pub phase: f64,
}

impl Seasonal {
    pub fn constant(v: f64) -> Self {
        Self { mean: v, amplitude: 0.0, phase: 0.0 }
    }

    pub fn at(&self, t: f64, period: f64) -> f64 {
        self.mean + self.amplitude * (TAU * t / period + self.phase).sin()
    }

    pub fn min(&self) -> f64 {
        self.mean - self.amplitude.abs()
    }

    pub fn max(&self) -> f64 {
        self.mean + self.amplitude.abs()
    }

    /// `int_0^t`
    pub fn integral(&self, t: f64, period: f64) -> f64 {
        let w = TAU / period;
        self.mean * t + self.amplitude / w * (self.phase.cos() - (w * t + self.phase).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub label: String,
    /// Additive change of the reversion rate.
    #[serde(default)]
    pub theta_shift: f64,
    /// Additive change of the mean level.
    #[serde(default)]
    pub kappa_shift: f64,
    /// Jump intensity tilt per mark.
    #[serde(default)]
    pub gamma: Vec<f64>,
    #[serde(default)]
    pub penalty: f64,
}

impl Scenario {
    pub fn base() -> Self {
        Self {
            label: "base".into(),
            theta_shift: 0.0,
            kappa_shift: 0.0,
            gamma: Vec::new(),
            penalty: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payoff {
    PositivePart,
    Constant(f64),
}

#[derive(Debug, Clone)]
pub struct SparkSpreadModel {
    pub theta: Seasonal,
    pub kappa: Seasonal,
    pub vol: f64,
    pub period: f64,
    pub jumps: LevyModel,
    pub scenarios: Vec<Scenario>,
    pub payoff: Payoff,
    /// Declared bound on `|L|` over the plausible spread range; `None` takes
    /// `max kappa + 6 s + max penalty` with `s` the stationary spread scale.
    pub payoff_bound: Option<f64>,
}

impl SparkSpreadModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta.min() > 0.0) {
            return argument(format!("theta must stay positive, min is {}", self.theta.min()));
        }
        if !(self.kappa.min() >= 0.0) {
            return argument("kappa must stay non-negative");
        }
        if !(self.vol > 0.0) || !(self.period > 0.0) {
            return argument("vol and period must be positive");
        }
        if self.jumps.dim() != 1 {
            return argument("the spread is one-dimensional");
        }
        if self.scenarios.is_empty() {
            return argument("at least one scenario is needed");
        }
        for s in &self.scenarios {
            if !(self.theta.min() + s.theta_shift > 0.0) {
                return argument(format!("scenario {} makes theta non-positive", s.label));
            }
            if !s.penalty.is_finite() {
                return argument(format!("scenario {} has a non-finite penalty", s.label));
            }
            if !s.gamma.is_empty() && s.gamma.len() != self.jumps.n_marks() {
                return argument(format!("scenario {} needs one gamma per mark", s.label));
            }
        }
        Ok(())
    }

    /// Stationary standard deviation of the diffusive part at the slowest
    /// reversion.
    pub fn spread_scale(&self) -> f64 {
        let q = self.jumps.diffusion_cov()[(0, 0)] + self.jumps.jump_second_moment();
        self.vol * (q / (2.0 * self.theta.min())).sqrt()
    }

    pub fn coefficients(&self) -> Result<PeriodicCoefficients> {
        let (theta, kappa, period) = (self.theta, self.kappa, self.period);
        PeriodicCoefficients::new(
            1,
            period,
            MatrixFn::SinusoidalDiagonal {
                base: vec![-theta.mean],
                amplitude: vec![-theta.amplitude],
                phase: theta.phase,
            },
            DriftFn::Custom(Arc::new(move |t, _x, out| out[0] = theta.at(t, period) * kappa.at(t, period))),
            MatrixFn::Constant(DMatrix::from_element(1, 1, self.vol)),
            CoefficientBounds {
                f_sup: theta.max() * kappa.max(),
                stability_mu: theta.min(),
                stability_m: 1.0,
                ginv_bound: 1.0 / self.vol,
            },
        )
    }

    fn declared_bound(&self) -> f64 {
        let pen = self.scenarios.iter().map(|s| s.penalty.abs()).fold(0.0, f64::max);
        match (self.payoff_bound, self.payoff) {
            (Some(c), _) => c,
            (None, Payoff::Constant(c)) => c.abs() + pen,
            (None, Payoff::PositivePart) => {
                let k = self.kappa.max() + self.scenarios.iter().map(|s| s.kappa_shift.abs()).fold(0.0, f64::max);
                k + 6.0 * self.spread_scale() + pen
            }
        }
    }

    /// Scenario `c` replaces `(theta, kappa)` by `(theta + dtheta, kappa +
    /// dkappa)` around the period averages, so the drift changes by
    /// `dtheta (kappa_bar - x) + (theta_bar + dtheta) dkappa`.
    pub fn control_problem(&self) -> Result<ControlProblem> {
        self.validate()?;
        let k = self.jumps.n_marks();
        let pens: Vec<f64> = self.scenarios.iter().map(|s| s.penalty).collect();
        let payoff = self.payoff;
        let cost = Arc::new(move |x: &[f64], c: usize| {
            let base = match payoff {
                Payoff::PositivePart => x[0].max(0.0),
                Payoff::Constant(v) => v,
            };
            base + pens[c]
        });
        let shifts: Vec<(f64, f64)> = self
            .scenarios
            .iter()
            .map(|s| (s.theta_shift, (self.theta.mean + s.theta_shift) * s.kappa_shift))
            .collect();
        let kbar = self.kappa.mean;
        let x_cap = kbar.abs() + 10.0 * self.spread_scale();
        let r_bound = shifts.iter().map(|(a, b)| a.abs() * (kbar.abs() + x_cap) + b.abs()).fold(0.0, f64::max);
        let drift = Arc::new(move |x: &[f64], c: usize, out: &mut [f64]| {
            let (a, b) = shifts[c];
            out[0] = a * (kbar - x[0]) + b;
        });
        let gamma = self
            .scenarios
            .iter()
            .map(|s| if s.gamma.is_empty() { vec![0.0; k] } else { s.gamma.clone() })
            .collect();
        ControlProblem::new(
            self.scenarios.iter().map(|s| s.label.clone()).collect(),
            cost,
            self.declared_bound(),
            if matches!(payoff, Payoff::PositivePart) { 1.0 } else { 0.0 },
            drift,
            r_bound,
            gamma,
            k,
        )
    }

    /// The model restricted to its first `n` scenarios.
    pub fn with_first_scenarios(&self, n: usize) -> Self {
        let mut m = self.clone();
        m.scenarios.truncate(n.max(1));
        m.payoff_bound = Some(self.declared_bound());
        m
    }
}

#[derive(Debug, Clone)]
pub struct WorstCase {
    pub lambda: Estimate,
    pub result: Arc<EbsdeResult>,
    pub policy: Policy,
    pub problem: ControlProblem,
    /// How often each scenario is chosen on a phase/spread probe grid.
    pub scenario_usage: Vec<(String, f64)>,
}

impl WorstCase {
    /// Scenario chosen most often on the probe grid.
    pub fn adversarial_scenario(&self) -> &str {
        let mut best = &self.scenario_usage[0];
        for s in &self.scenario_usage[1..] {
            if s.1 > best.1 {
                best = s;
            }
        }
        &best.0
    }
}

pub fn worst_case_lambda(model: &SparkSpreadModel, opts: &VanishingOptions) -> Result<WorstCase> {
    let problem = model.control_problem()?;
    let coeffs = model.coefficients()?;
    let (result, policy) = solve_ergodic_control(&problem, &coeffs, &model.jumps, opts)?;
    let s = model.spread_scale();
    let mut counts = vec![0usize; problem.n_controls()];
    let mut z = [0.0];
    let mut u = vec![0.0; model.jumps.n_marks()];
    let mut total = 0;
    for p in 0..12 {
        let phase = model.period * p as f64 / 12.0;
        for j in 0..=12 {
            let x = [model.kappa.at(phase, model.period) + s * (-3.0 + 0.5 * j as f64)];
            counts[policy.choose(&problem, &model.jumps, phase, &x, &mut z, &mut u)] += 1;
            total += 1;
        }
    }
    let scenario_usage = problem
        .labels
        .iter()
        .zip(counts)
        .map(|(l, c)| (l.clone(), c as f64 / total as f64))
        .collect();
    Ok(WorstCase {
        lambda: Estimate::new(result.lambda_hat, result.lambda_stderr),
        result,
        policy,
        problem,
        scenario_usage,
    })
}

/// Worst-case `lambda` for the nested scenario sets `{1}, {1, 2}, ...`, all
/// on the same seed.
pub fn monotonicity_study(model: &SparkSpreadModel, opts: &VanishingOptions) -> Result<Vec<Estimate>> {
    (1..=model.scenarios.len())
        .map(|n| worst_case_lambda(&model.with_first_scenarios(n), opts).map(|w| w.lambda))
        .collect()
}

/// Spot discount rate `r(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateFn {
    Constant(f64),
    Seasonal { rate: Seasonal, period: f64 },
}

impl RateFn {
    pub fn min(&self) -> f64 {
        match self {
            RateFn::Constant(r) => *r,
            RateFn::Seasonal { rate, .. } => rate.min(),
        }
    }

    /// `int_0^t r`
    pub fn accumulated(&self, t: f64) -> f64 {
        match self {
            RateFn::Constant(r) => r * t,
            RateFn::Seasonal { rate, period } => rate.integral(t, *period),
        }
    }
}

const SIMPSON_RTOL: f64 = 1e-10;

/// `v(N) = lambda int_0^N exp(-int_0^t r) dt` by composite Simpson, doubling
/// until the relative change drops below `1e-10`.
pub fn plant_value(lambda: f64, rate: &RateFn, years: f64) -> Result<f64> {
    if !(years > 0.0) || !years.is_finite() {
        return argument(format!("lifetime must be positive, got {years}"));
    }
    if !(rate.min() >= 0.0) {
        return argument("discount rate must be non-negative");
    }
    if lambda == 0.0 {
        return Ok(0.0);
    }
    if let RateFn::Constant(r) = rate {
        if *r == 0.0 {
            return Ok(lambda * years);
        }
    }
    let g = |t: f64| (-rate.accumulated(t)).exp();
    let simpson = |n: usize| {
        let h = years / n as f64;
        let mut acc = g(0.0) + g(years);
        for i in 1..n {
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * g(i as f64 * h);
        }
        acc * h / 3.0
    };
    let mut n = 64;
    let mut prev = simpson(n);
    loop {
        n *= 2;
        let cur = simpson(n);
        if (cur - prev).abs() <= SIMPSON_RTOL * cur.abs() || n >= 1 << 22 {
            return Ok(lambda * cur);
        }
        prev = cur;
    }
}

/// `E[X^+]` for `X ~ N(m, s^2)`.
pub fn gaussian_positive_part(m: f64, s: f64) -> f64 {
    let z = m / s;
    let pdf = (-0.5 * z * z).exp() / (TAU).sqrt();
    let cdf = 0.5 * erfc(-z / std::f64::consts::SQRT_2);
    m * cdf + s * pdf
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discounted::Numerics;
    use crate::ebsde::{geometric_schedule, ProbePoint};
    use crate::regression::RegressionBasis;

    fn gaussian_model(kappa: f64) -> SparkSpreadModel {
        SparkSpreadModel {
            theta: Seasonal::constant(1.0),
            kappa: Seasonal::constant(kappa),
            vol: 1.0,
            period: 1.0,
            jumps: LevyModel::scalar(1.0, vec![]).unwrap(),
            scenarios: vec![Scenario::base()],
            payoff: Payoff::PositivePart,
            payoff_bound: None,
        }
    }

    fn opts(n_paths: usize) -> VanishingOptions {
        VanishingOptions::new(
            1,
            geometric_schedule(0.4, 4),
            vec![ProbePoint::new(0.0, vec![0.5])],
            0.05,
            Numerics { dt: 0.02, n_paths, basis: RegressionBasis::polynomial(4), seed: 5 },
        )
    }

    #[test]
    fn plant_value_closed_forms() {
        let v = plant_value(1.0, &RateFn::Constant(0.05), 20.0).unwrap();
        assert!((v - (1.0 - (-1.0f64).exp()) / 0.05).abs() < 1e-6, "{v}");
        assert_eq!(plant_value(0.7, &RateFn::Constant(0.0), 30.0).unwrap(), 21.0);
        assert_eq!(plant_value(0.0, &RateFn::Constant(0.05), 30.0).unwrap(), 0.0);
        let a = plant_value(1.0, &RateFn::Constant(0.03), 10.0).unwrap();
        let b = plant_value(2.5, &RateFn::Constant(0.03), 10.0).unwrap();
        assert!((b - 2.5 * a).abs() < 1e-12 * b);
        let seasonal = RateFn::Seasonal { rate: Seasonal { mean: 0.05, amplitude: 0.0, phase: 0.3 }, period: 1.0 };
        assert!((plant_value(1.0, &seasonal, 20.0).unwrap() - v).abs() < 1e-9);
        assert!(plant_value(1.0, &RateFn::Constant(-0.1), 5.0).is_err());
        assert!(plant_value(1.0, &RateFn::Constant(0.1), 0.0).is_err());
    }

    #[test]
    fn positive_part_formula() {
        assert!((gaussian_positive_part(0.0, 0.5f64.sqrt()) - 0.28209).abs() < 1e-5);
        assert!((gaussian_positive_part(10.0, 1.0) - 10.0).abs() < 1e-9);
        assert!(gaussian_positive_part(-10.0, 1.0) < 1e-20);
    }

    #[test]
    fn rejects_bad_models() {
        let mut m = gaussian_model(0.0);
        m.theta = Seasonal { mean: 0.5, amplitude: 0.6, phase: 0.0 };
        assert!(m.validate().is_err());
        let mut m = gaussian_model(0.0);
        m.scenarios.push(Scenario { theta_shift: -2.0, ..Scenario::base() });
        assert!(m.control_problem().is_err());
    }

    #[test]
    fn constant_payoff_is_exact() {
        let mut m = gaussian_model(0.0);
        m.payoff = Payoff::Constant(1.3);
        let w = worst_case_lambda(&m, &opts(200)).unwrap();
        assert!((w.lambda.mean - 1.3).abs() < 1e-3, "{:?}", w.lambda);
    }

    #[test]
    fn gaussian_benchmark() {
        let s = 0.5f64.sqrt();
        let kappa = 0.4;
        let w = worst_case_lambda(&gaussian_model(kappa), &opts(1000)).unwrap();
        let exact = gaussian_positive_part(kappa, s);
        assert!((w.lambda.mean - exact).abs() < 0.05 * exact, "{:?} vs {exact}", w.lambda);
        assert_eq!(w.adversarial_scenario(), "base");
    }
}
