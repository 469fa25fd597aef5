//! Infinite-horizon discounted BSDEs
//! `Y_t = Y_T + int_t^T (f(X, Z, U) - alpha Y) ds - ...` truncated at a horizon
//! taken from the geometric convergence bound `2 C e^{-alpha (T - t)} / alpha`.

use serde::{Deserialize, Serialize};

use crate::bsde::{backward, BackwardOptions, BsdeSolution, Driver, StateFn, ZeroBoundCheck};
use crate::coefficients::PeriodicCoefficients;
use crate::error::{argument, Result};
use crate::forward::{simulate, PathEnsemble, SimulationSpec};
use crate::levy::LevyModel;
use crate::regression::RegressionBasis;
use crate::rng::channel;
use crate::stats::{estimate, Estimate};

/// Safety factor applied to the horizon from the convergence bound.
pub const HORIZON_SAFETY: f64 = 1.5;
/// Largest admissible `alpha dt`.
pub const MAX_ALPHA_DT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Numerics {
    pub dt: f64,
    pub n_paths: usize,
    pub basis: RegressionBasis,
    pub seed: u64,
}

/// Horizon length `T - s` with `2 C e^{-alpha (T - s)} / alpha <= eps`, times
/// the safety factor; at least `1 / alpha`.
pub fn truncation_horizon(alpha: f64, bound_c: f64, epsilon: f64) -> f64 {
    let ratio = 2.0 * bound_c / (alpha * epsilon);
    let raw = if ratio > 1.0 { ratio.ln() / alpha } else { 0.0 };
    (HORIZON_SAFETY * raw).max(1.0 / alpha)
}

pub(crate) fn check_alpha(alpha: f64, dt: f64) -> Result<()> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return argument(format!("discount rate must be positive, got {alpha}"));
    }
    if alpha * dt > MAX_ALPHA_DT * (1.0 + 1e-12) {
        return argument(format!(
            "alpha * dt = {} exceeds {MAX_ALPHA_DT}; reduce dt below {}",
            alpha * dt,
            MAX_ALPHA_DT / alpha
        ));
    }
    Ok(())
}

pub(crate) fn steps_for(horizon: f64, dt: f64) -> usize {
    (horizon / dt - 1e-9).ceil().max(1.0) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundCheck {
    /// `C / alpha + epsilon_trunc`
    pub limit: f64,
    pub max_abs_y: f64,
    pub violated: bool,
}

#[derive(Debug, Clone)]
pub struct DiscountedSolve {
    pub alpha: f64,
    pub s: f64,
    pub x: Vec<f64>,
    /// Horizon length actually used, a whole number of steps.
    pub truncation_t: f64,
    pub epsilon_trunc: f64,
    pub bound_c: f64,
    /// `v^alpha(s, x)`.
    pub value: Estimate,
    pub solution: BsdeSolution,
    pub bound_check: BoundCheck,
    pub zero_bound: ZeroBoundCheck,
}

impl DiscountedSolve {
    /// Regressed `v^alpha` at another query point; reliable only where the
    /// ensemble put mass.
    pub fn v_at(&self, s: f64, x: &[f64]) -> f64 {
        self.solution.y(s, x)
    }

    /// True when a diagnostic failed (bound exceeded or declared zero
    /// bound violated on the sample).
    pub fn diagnostic_failure(&self) -> bool {
        self.bound_check.violated || self.zero_bound.violations > 0
    }
}

/// Solves the discounted problem on the first `steps` steps of an ensemble
/// started at `(s, x)`, with zero terminal value.
pub(crate) fn solve_on_prefix(
    driver: &Driver,
    ensemble: &PathEnsemble,
    coeffs: &PeriodicCoefficients,
    noise: &LevyModel,
    alpha: f64,
    epsilon_trunc: f64,
    steps: usize,
    basis: &RegressionBasis,
) -> Result<DiscountedSolve> {
    let solution = backward(
        driver,
        ensemble,
        coeffs,
        noise,
        &StateFn::constant(0.0),
        basis,
        BackwardOptions {
            discount: alpha,
            keep_paths: false,
            steps: Some(steps),
        },
    )?;
    let grid = ensemble.grid();
    let limit = driver.zero_bound / alpha + epsilon_trunc;
    let bound_check = BoundCheck {
        limit,
        max_abs_y: solution.max_abs_y,
        violated: solution.max_abs_y > limit,
    };
    Ok(DiscountedSolve {
        alpha,
        s: grid[0],
        x: ensemble.state(0, 0).to_vec(),
        truncation_t: grid[steps] - grid[0],
        epsilon_trunc,
        bound_c: driver.zero_bound,
        value: solution.y0(),
        bound_check,
        zero_bound: driver.check_zero_bound(ensemble),
        solution,
    })
}

pub fn solve_discounted(
    driver: &Driver,
    coeffs: &PeriodicCoefficients,
    noise: &LevyModel,
    alpha: f64,
    s: f64,
    x: &[f64],
    epsilon_trunc: f64,
    numerics: &Numerics,
) -> Result<DiscountedSolve> {
    check_alpha(alpha, numerics.dt)?;
    if !(epsilon_trunc > 0.0) {
        return argument("truncation tolerance must be positive");
    }
    let horizon = truncation_horizon(alpha, driver.zero_bound, epsilon_trunc);
    let steps = steps_for(horizon, numerics.dt);
    let spec = SimulationSpec::new(s, s + steps as f64 * numerics.dt, numerics.dt, numerics.n_paths, numerics.seed)
        .with_channel(channel::FORWARD);
    let ensemble = simulate(coeffs, noise, x, &spec)?;
    solve_on_prefix(driver, &ensemble, coeffs, noise, alpha, epsilon_trunc, steps, &numerics.basis)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HorizonRow {
    pub horizon: f64,
    pub value: f64,
    /// `|v^{alpha,T} - v^{alpha,T_max}|` with its pathwise standard error.
    pub gap: f64,
    pub gap_stderr: f64,
    /// `2 C e^{-alpha (T - s)} / alpha`
    pub bound: f64,
}

/// Solves at each horizon (lengths after `s`) on one common ensemble and
/// reports gaps to the longest horizon against the convergence bound.
pub fn horizon_convergence_study(
    driver: &Driver,
    coeffs: &PeriodicCoefficients,
    noise: &LevyModel,
    alpha: f64,
    s: f64,
    x: &[f64],
    horizons: &[f64],
    numerics: &Numerics,
) -> Result<Vec<HorizonRow>> {
    check_alpha(alpha, numerics.dt)?;
    if horizons.is_empty() || horizons.windows(2).any(|w| w[1] <= w[0]) || horizons[0] <= 0.0 {
        return argument("horizons must be positive and strictly increasing");
    }
    let steps: Vec<usize> = horizons.iter().map(|&h| steps_for(h, numerics.dt)).collect();
    let n_max = *steps.last().expect("non-empty");
    let spec = SimulationSpec::new(s, s + n_max as f64 * numerics.dt, numerics.dt, numerics.n_paths, numerics.seed)
        .with_channel(channel::FORWARD);
    let ensemble = simulate(coeffs, noise, x, &spec)?;
    let solves: Vec<DiscountedSolve> = steps
        .iter()
        .map(|&n| solve_on_prefix(driver, &ensemble, coeffs, noise, alpha, 0.0, n, &numerics.basis))
        .collect::<Result<_>>()?;
    let reference = &solves.last().expect("non-empty").solution.realized;
    Ok(solves
        .iter()
        .zip(&steps)
        .map(|(sol, &n)| {
            let diff: Vec<f64> = sol.solution.realized.iter().zip(reference).map(|(a, b)| a - b).collect();
            let e = estimate(&diff);
            let horizon = n as f64 * numerics.dt;
            HorizonRow {
                horizon,
                value: sol.value.mean,
                gap: e.mean.abs(),
                gap_stderr: e.stderr,
                bound: 2.0 * driver.zero_bound * (-alpha * horizon).exp() / alpha,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numerics(dt: f64, n_paths: usize) -> Numerics {
        Numerics {
            dt,
            n_paths,
            basis: RegressionBasis::polynomial(3),
            seed: 11,
        }
    }

    #[test]
    fn constant_driver_is_c_over_alpha() {
        let c = PeriodicCoefficients::ou_1d(1.0, 1.0).unwrap();
        let n = LevyModel::scalar(1.0, vec![(0.5, 1.0)]).unwrap();
        for alpha in [0.4, 0.1] {
            let r = solve_discounted(&Driver::constant(2.0), &c, &n, alpha, 0.0, &[0.3], 1e-7, &numerics(0.02, 200)).unwrap();
            let exact = 2.0 / alpha;
            assert!((r.value.mean - exact).abs() < 1e-6 * exact, "{} vs {exact}", r.value.mean);
            assert!(!r.diagnostic_failure());
            assert!(r.truncation_t >= (2.0 * 2.0 / (alpha * 1e-7)).ln() / alpha);
        }
    }

    #[test]
    fn rejects_bad_alpha() {
        let c = PeriodicCoefficients::ou_1d(1.0, 1.0).unwrap();
        let n = LevyModel::scalar(1.0, vec![]).unwrap();
        let f = Driver::constant(1.0);
        assert!(solve_discounted(&f, &c, &n, 0.0, 0.0, &[0.0], 1e-3, &numerics(0.01, 10)).is_err());
        assert!(solve_discounted(&f, &c, &n, 0.5, 0.0, &[0.0], 1e-3, &numerics(0.05, 10)).is_err());
    }

    #[test]
    fn ou_linear_driver() {
        let c = PeriodicCoefficients::ou_1d(1.0, 1.0).unwrap();
        let n = LevyModel::scalar(1.0, vec![]).unwrap();
        let f = Driver::state_only("x", |x| x[0], 9.0).unwrap();
        let x0 = 5.0;
        let r = solve_discounted(&f, &c, &n, 0.1, 0.0, &[x0], 0.05, &numerics(0.05, 6000)).unwrap();
        let exact = x0 / 1.1;
        assert!((r.value.mean - exact).abs() < 0.02 * exact, "{:?} vs {exact}", r.value);
        assert!(!r.bound_check.violated);
    }

    #[test]
    fn horizon_gaps_for_constant_driver() {
        let c = PeriodicCoefficients::ou_1d(1.0, 1.0).unwrap();
        let n = LevyModel::scalar(1.0, vec![]).unwrap();
        let (a, k) = (0.2, 1.5);
        let hs = [2.0, 5.0, 10.0, 20.0];
        let rows = horizon_convergence_study(&Driver::constant(k), &c, &n, a, 0.0, &[0.0], &hs, &numerics(0.02, 50)).unwrap();
        let tmax = rows.last().unwrap().horizon;
        for r in &rows {
            let exact = (k / a) * ((-a * r.horizon).exp() - (-a * tmax).exp());
            assert!((r.gap - exact).abs() < 1e-6, "{r:?} vs {exact}");
            assert!(r.gap <= r.bound);
        }
        assert!(rows.windows(2).all(|w| w[1].gap <= w[0].gap));
    }
}
