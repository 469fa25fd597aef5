//! Vanishing-discount construction of the ergodic pair `(v, lambda)`.
//!
//! Every probe point gets one ensemble long enough for the smallest discount
//! rate; each rate is solved on a prefix of it, so all rates and all probes
//! share random numbers. `lambda` is the intercept of a straight-line fit of
//! `alpha v^alpha(s0, x0)` in `alpha`; `v` at a probe is the intercept of the
//! same fit applied to `v^alpha(s, x) - v^alpha(s0, x0)`.
//!
//! Surfaces are read at `anchor + phase`, where the anchor is the first
//! multiple of the period past five relaxation times `1 / mu`, so the base
//! ensemble has spread over the invariant law.

use std::io::Write;

use serde::Serialize;

use crate::bsde::Driver;
use crate::coefficients::PeriodicCoefficients;
use crate::discounted::{check_alpha, solve_on_prefix, steps_for, truncation_horizon, DiscountedSolve, Numerics};
use crate::ergodicity::InvariantSample;
use crate::error::{argument, Result};
use crate::forward::{fmt_f64, simulate, PathEnsemble, SimulationSpec};
use crate::levy::LevyModel;
use crate::rng::channel;
use crate::stats::{estimate, intercept_weights, Estimate};
use crate::MAX_DIM;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbePoint {
    pub s: f64,
    pub x: Vec<f64>,
}

impl ProbePoint {
    pub fn new(s: f64, x: Vec<f64>) -> Self {
        Self { s, x }
    }
}

/// Geometric schedule `alpha_n = first * 2^{-n}`.
pub fn geometric_schedule(first: f64, levels: usize) -> Vec<f64> {
    (0..levels).map(|n| first * 0.5f64.powi(n as i32)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VanishingOptions {
    pub alpha_schedule: Vec<f64>,
    pub probe_points: Vec<ProbePoint>,
    pub epsilon_trunc: f64,
    /// Normalisation point `v(s0, x0) = 0`; defaults to the origin at time 0.
    pub base_point: ProbePoint,
    pub numerics: Numerics,
}

impl VanishingOptions {
    pub fn new(dim: usize, alpha_schedule: Vec<f64>, probe_points: Vec<ProbePoint>, epsilon_trunc: f64, numerics: Numerics) -> Self {
        Self {
            alpha_schedule,
            probe_points,
            epsilon_trunc,
            base_point: ProbePoint::new(0.0, vec![0.0; dim]),
            numerics,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub horizon: f64,
    /// `alpha v^alpha(s0, x0)`
    pub alpha_v_base: Estimate,
    /// `v^alpha(s, x) - v^alpha(s0, x0)` per probe, in probe order.
    pub probe_differences: Vec<Estimate>,
    pub max_abs_y: f64,
    pub bound_violated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Extrapolation {
    pub method: &'static str,
    pub lambda: f64,
    pub slope: f64,
    pub r_squared: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EbsdeResult {
    pub lambda_hat: f64,
    pub lambda_stderr: f64,
    pub alpha_schedule: Vec<f64>,
    pub base_point: ProbePoint,
    pub probe_points: Vec<ProbePoint>,
    pub per_alpha: Vec<AlphaRow>,
    /// Extrapolated `v` at each probe point.
    pub v_probes: Vec<Estimate>,
    pub extrapolation: Extrapolation,
    pub warnings: Vec<String>,
    /// `|alpha v^alpha(s0, x0)| <= C` failed at some rate.
    pub zero_bound_violation: bool,
    pub period: f64,
    pub anchor: f64,
    pub dim: usize,
    pub n_marks: usize,
    #[serde(skip)]
    base_solves: Vec<DiscountedSolve>,
    #[serde(skip)]
    weights: Vec<f64>,
}

impl EbsdeResult {
    fn surface_time(&self, phase: f64) -> f64 {
        self.anchor + phase.rem_euclid(self.period)
    }

    /// `v(phase, x)` from the extrapolated combination of base-point
    /// surfaces.
    pub fn v(&self, phase: f64, x: &[f64]) -> f64 {
        let t = self.surface_time(phase);
        self.v_at_time(t, x)
    }

    fn v_at_time(&self, t: f64, x: &[f64]) -> f64 {
        self.base_solves
            .iter()
            .zip(&self.weights)
            .map(|(s, w)| w * (s.solution.y(t, x) - s.value.mean))
            .sum()
    }

    /// `xi(phase, x)`, extrapolated with the same weights as `v`.
    pub fn zbar(&self, phase: f64, x: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.dim];
        let mut u = vec![0.0; self.n_marks];
        self.zu_into(phase, x, &mut z, &mut u);
        z
    }

    /// `psi(phase, x)`, extrapolated with the same weights as `v`.
    pub fn ubar(&self, phase: f64, x: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.dim];
        let mut u = vec![0.0; self.n_marks];
        self.zu_into(phase, x, &mut z, &mut u);
        u
    }

    pub fn zu_into(&self, phase: f64, x: &[f64], z: &mut [f64], u: &mut [f64]) {
        let t = self.surface_time(phase);
        z.fill(0.0);
        u.fill(0.0);
        let mut zk = [0.0; MAX_DIM];
        let mut uk = vec![0.0; u.len()];
        for (s, w) in self.base_solves.iter().zip(&self.weights) {
            s.solution.zu_into(t, x, &mut zk[..z.len()], &mut uk);
            for (a, b) in z.iter_mut().zip(&zk) {
                *a += w * b;
            }
            for (a, b) in u.iter_mut().zip(&uk) {
                *a += w * b;
            }
        }
    }

    pub fn has_failure(&self) -> bool {
        self.zero_bound_violation || self.per_alpha.iter().any(|r| r.bound_violated)
    }

    /// CSV of `v` on a probe list: `phase,x1..xd,v`.
    pub fn write_v_csv<W: Write>(&self, mut w: W, phases: &[f64], xs: &[Vec<f64>]) -> Result<()> {
        let cols: Vec<String> = (0..self.dim).map(|k| format!("x{}", k + 1)).collect();
        writeln!(w, "phase,{},v", cols.join(","))?;
        for &ph in phases {
            for x in xs {
                let xv: Vec<String> = x.iter().map(|v| fmt_f64(*v)).collect();
                writeln!(w, "{},{},{}", fmt_f64(ph), xv.join(","), fmt_f64(self.v(ph, x)))?;
            }
        }
        Ok(())
    }

    pub fn write_per_alpha_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "alpha,T,alpha_v_base,stderr,max_abs_y,bound_violated")?;
        for r in &self.per_alpha {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                fmt_f64(r.alpha),
                fmt_f64(r.horizon),
                fmt_f64(r.alpha_v_base.mean),
                fmt_f64(r.alpha_v_base.stderr),
                fmt_f64(r.max_abs_y),
                r.bound_violated
            )?;
        }
        Ok(())
    }
}

/// First multiple of the period at or beyond `5 / mu`.
pub fn anchor_time(period: f64, mu: f64) -> f64 {
    let relax = 5.0 / mu;
    (relax / period - 1e-12).ceil().max(1.0) * period
}

pub fn vanishing_discount(
    driver: &Driver,
    coeffs: &PeriodicCoefficients,
    noise: &LevyModel,
    opts: &VanishingOptions,
) -> Result<EbsdeResult> {
    let sched = &opts.alpha_schedule;
    if sched.len() < 2 {
        return argument("the alpha schedule needs at least two rates");
    }
    if sched.windows(2).any(|w| w[1] >= w[0]) {
        return argument("the alpha schedule must be strictly decreasing");
    }
    let dt = opts.numerics.dt;
    for &a in sched {
        check_alpha(a, dt)?;
    }
    let d = coeffs.dim();
    if opts.base_point.x.len() != d || opts.probe_points.iter().any(|p| p.x.len() != d) {
        return argument("probe points must match the state dimension");
    }
    let steps: Vec<usize> = sched
        .iter()
        .map(|&a| steps_for(truncation_horizon(a, driver.zero_bound, opts.epsilon_trunc), dt))
        .collect();
    let n_max = *steps.last().expect("non-empty");
    let period = coeffs.period();
    let anchor = anchor_time(period, coeffs.bounds().stability_mu);
    if anchor + 2.0 * period > steps[0] as f64 * dt {
        return argument(format!(
            "horizon {} at alpha = {} is too short for the surface anchor {anchor}; lower epsilon_trunc or the largest rate",
            steps[0] as f64 * dt,
            sched[0]
        ));
    }
    let weights = intercept_weights(sched);

    let run = |p: &ProbePoint| -> Result<Vec<DiscountedSolve>> {
        let spec = SimulationSpec::new(p.s, p.s + n_max as f64 * dt, dt, opts.numerics.n_paths, opts.numerics.seed)
            .with_channel(channel::FORWARD);
        let e = simulate(coeffs, noise, &p.x, &spec)?;
        sched
            .iter()
            .zip(&steps)
            .map(|(&a, &n)| solve_on_prefix(driver, &e, coeffs, noise, a, opts.epsilon_trunc, n, &opts.numerics.basis))
            .collect()
    };

    let base = run(&opts.base_point)?;
    let m = opts.numerics.n_paths;
    // pathwise lambda combination
    let lam_paths: Vec<f64> = (0..m)
        .map(|r| {
            base.iter()
                .zip(&weights)
                .map(|(s, w)| w * s.alpha * s.solution.realized[r])
                .sum()
        })
        .collect();
    let lam = estimate(&lam_paths);

    let mut diffs: Vec<Vec<Estimate>> = vec![Vec::new(); sched.len()];
    let mut v_probes = Vec::with_capacity(opts.probe_points.len());
    for p in &opts.probe_points {
        let owned;
        let solves: &[DiscountedSolve] = if *p == opts.base_point {
            &base
        } else {
            owned = run(p)?;
            &owned
        };
        let mut combo = vec![0.0; m];
        for (k, (s, b)) in solves.iter().zip(&base).enumerate() {
            let dpath: Vec<f64> = s.solution.realized.iter().zip(&b.solution.realized).map(|(a, c)| a - c).collect();
            for (acc, v) in combo.iter_mut().zip(&dpath) {
                *acc += weights[k] * v;
            }
            diffs[k].push(estimate(&dpath));
        }
        v_probes.push(estimate(&combo));
    }

    let ys: Vec<f64> = base.iter().map(|s| s.alpha * s.value.mean).collect();
    let fit = crate::stats::fit_line(sched, &ys).expect("at least two distinct rates");
    let mut warnings = Vec::new();
    // successive alpha v^alpha differences, stderr from the pathwise pairing
    let succ: Vec<Estimate> = base
        .windows(2)
        .map(|w| {
            let dp: Vec<f64> = w[0]
                .solution
                .realized
                .iter()
                .zip(&w[1].solution.realized)
                .map(|(a, b)| w[0].alpha * a - w[1].alpha * b)
                .collect();
            estimate(&dp)
        })
        .collect();
    let signs: Vec<i32> = succ
        .iter()
        .filter(|e| e.mean.abs() > 2.0 * e.stderr)
        .map(|e| e.mean.signum() as i32)
        .collect();
    if signs.windows(2).any(|w| w[0] != w[1]) {
        warnings.push("alpha v^alpha is not monotone in alpha beyond noise; the extrapolated lambda may not be a limit".into());
    }
    let zero_bound_violation = ys.iter().any(|y| y.abs() > driver.zero_bound * (1.0 + 1e-9) + 1e-12);
    if zero_bound_violation {
        warnings.push("|alpha v^alpha(s0, x0)| exceeds the declared zero bound".into());
    }
    for s in &base {
        if s.zero_bound.violations > 0 {
            warnings.push(format!(
                "declared zero bound {} below sampled sup |f(x, 0, 0)| = {} at alpha = {}",
                s.zero_bound.declared, s.zero_bound.sampled_max, s.alpha
            ));
            break;
        }
    }
    let per_alpha: Vec<AlphaRow> = base
        .iter()
        .zip(diffs)
        .map(|(s, pd)| AlphaRow {
            alpha: s.alpha,
            horizon: s.truncation_t,
            alpha_v_base: Estimate::new(s.alpha * s.value.mean, s.alpha * s.value.stderr),
            probe_differences: pd,
            max_abs_y: s.bound_check.max_abs_y,
            bound_violated: s.bound_check.violated,
        })
        .collect();
    Ok(EbsdeResult {
        lambda_hat: lam.mean,
        lambda_stderr: lam.stderr,
        alpha_schedule: sched.clone(),
        base_point: opts.base_point.clone(),
        probe_points: opts.probe_points.clone(),
        per_alpha,
        v_probes,
        extrapolation: Extrapolation {
            method: "linear-in-alpha intercept",
            lambda: fit.intercept,
            slope: fit.slope,
            r_squared: fit.r_squared,
        },
        warnings,
        zero_bound_violation,
        period,
        anchor,
        dim: d,
        n_marks: noise.n_marks(),
        base_solves: base,
        weights,
    })
}

/// `lambda = int f(x, xi(t, x), psi(t, x)) mu(dt, dx)` over a harvest.
pub fn lambda_via_invariant_measure(driver: &Driver, result: &EbsdeResult, inv: &InvariantSample) -> Result<Estimate> {
    if inv.is_empty() {
        return argument("invariant sample is empty");
    }
    if inv.dim != result.dim {
        return argument("invariant sample dimension does not match the result");
    }
    let d = result.dim;
    let k = result.n_marks;
    let mut u = vec![0.0; k];
    inv.integrate(|phase, x| {
        let mut z = [0.0; MAX_DIM];
        result.zu_into(phase, x, &mut z[..d], &mut u);
        driver.eval(x, &z[..d], &u)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrowthReport {
    /// Smallest `c` with `|v(t mod T*, X_t)| <= c (1 + |X_t|^2)` on the
    /// ensemble.
    pub fitted_c: f64,
    pub declared_c: Option<f64>,
    pub violations: usize,
    pub n_points: usize,
}

pub fn growth_diagnostic(result: &EbsdeResult, ensemble: &PathEnsemble, declared_c: Option<f64>) -> GrowthReport {
    let d = ensemble.dim();
    let mut c: f64 = 0.0;
    let mut violations = 0;
    let mut n_points = 0;
    for (n, &t) in ensemble.grid().iter().enumerate() {
        for x in ensemble.states_at(n).chunks(d) {
            let ratio = result.v(t, x).abs() / (1.0 + x.iter().map(|v| v * v).sum::<f64>());
            c = c.max(ratio);
            n_points += 1;
            if let Some(dc) = declared_c {
                if ratio > dc {
                    violations += 1;
                }
            }
        }
    }
    GrowthReport {
        fitted_c: c,
        declared_c,
        violations,
        n_points,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeriodicityReport {
    pub max_deviation: f64,
    pub v_range: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Compares `v` at `anchor + phase` and `anchor + phase + T*` on the probe
/// grid; passes if the largest deviation is within `tol` times the range of
/// `v` on the grid.
pub fn periodicity_check(result: &EbsdeResult, probe_x: &[Vec<f64>], n_phases: usize, tol: f64) -> PeriodicityReport {
    let mut max_dev: f64 = 0.0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..n_phases.max(1) {
        let ph = result.period * i as f64 / n_phases.max(1) as f64;
        let t = result.anchor + ph;
        for x in probe_x {
            let a = result.v_at_time(t, x);
            let b = result.v_at_time(t + result.period, x);
            max_dev = max_dev.max((a - b).abs());
            lo = lo.min(a.min(b));
            hi = hi.max(a.max(b));
        }
    }
    let range = (hi - lo).max(0.0);
    PeriodicityReport {
        max_deviation: max_dev,
        v_range: range,
        tol,
        pass: max_dev <= tol * range.max(f64::MIN_POSITIVE),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ergodicity::harvest_invariant;
    use crate::regression::RegressionBasis;

    fn opts(dim: usize, probes: Vec<ProbePoint>, n_paths: usize) -> VanishingOptions {
        VanishingOptions::new(
            dim,
            geometric_schedule(0.4, 4),
            probes,
            0.01,
            Numerics {
                dt: 0.02,
                n_paths,
                basis: RegressionBasis::polynomial(3),
                seed: 21,
            },
        )
    }

    #[test]
    fn anchor_is_a_period_multiple() {
        assert_eq!(anchor_time(1.0, 1.0), 5.0);
        assert_eq!(anchor_time(2.0, 0.5), 10.0);
        assert_eq!(anchor_time(10.0, 5.0), 10.0);
    }

    #[test]
    fn constant_driver_gives_exact_pair() {
        let c = PeriodicCoefficients::ou_1d(1.0, 1.0).unwrap();
        let n = LevyModel::scalar(1.0, vec![(0.5, 1.0)]).unwrap();
        let probes = vec![ProbePoint::new(0.0, vec![0.0]), ProbePoint::new(0.0, vec![1.0])];
        let mut o = opts(1, probes, 100);
        o.epsilon_trunc = 1e-10;
        let r = vanishing_discount(&Driver::constant(0.7), &c, &n, &o).unwrap();
        assert!((r.lambda_hat - 0.7).abs() < 1e-9, "{}", r.lambda_hat);
        assert!(r.v_probes.iter().all(|v| v.mean.abs() < 1e-9));
        assert!(r.v(0.3, &[0.5]).abs() < 1e-9);
        assert!(!r.has_failure());
        let inv = harvest_invariant(&c, &n, 5.0, 105.0, 10, 0.02, 1).unwrap();
        let l2 = lambda_via_invariant_measure(&Driver::constant(0.7), &r, &inv).unwrap();
        assert!((l2.mean - 0.7).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_schedule() {
        let c = PeriodicCoefficients::ou_1d(1.0, 1.0).unwrap();
        let n = LevyModel::scalar(1.0, vec![]).unwrap();
        let mut o = opts(1, vec![], 10);
        o.alpha_schedule = vec![0.1, 0.2];
        assert!(vanishing_discount(&Driver::constant(1.0), &c, &n, &o).is_err());
    }

    #[test]
    fn shift_moves_lambda_only() {
        let c = PeriodicCoefficients::ou_1d(1.0, 1.0).unwrap();
        let n = LevyModel::scalar(1.0, vec![]).unwrap();
        let f = Driver::state_only("cos", |x| x[0].cos(), 1.0).unwrap();
        let probes = vec![ProbePoint::new(0.0, vec![1.0])];
        let mut o = opts(1, probes, 300);
        o.alpha_schedule = vec![0.4, 0.2];
        o.epsilon_trunc = 1e-10;
        let a = vanishing_discount(&f, &c, &n, &o).unwrap();
        let b = vanishing_discount(&f.shifted(2.0), &c, &n, &o).unwrap();
        assert!((b.lambda_hat - a.lambda_hat - 2.0).abs() < 1e-6);
        assert!((b.v_probes[0].mean - a.v_probes[0].mean).abs() < 1e-6);
        let g = growth_diagnostic(&a, &crate::forward::simulate_recorded(&c, &n, &[0.0], &SimulationSpec::new(0.0, 5.0, 0.02, 50, 1), 10).unwrap(), Some(10.0));
        assert!(g.fitted_c.is_finite() && g.violations == 0);
        let p = periodicity_check(&a, &[vec![-1.0], vec![0.0], vec![1.0]], 4, 0.02);
        assert!(p.max_deviation.is_finite());
    }
}
