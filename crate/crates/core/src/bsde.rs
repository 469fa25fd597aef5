//! Backward least-squares Monte Carlo for Markovian BSDEs with jumps.
//!
//! On each step `Y_{n+1}` is regressed jointly on `phi(X_n)`,
//! `phi(X_n) dW_n` and `phi(X_n) (dN_n - lambda dt)`: the first block is the
//! conditional mean, the others give `Z` and `U`.
//!
//! `Z` surfaces are stored in state coordinates: `z(t, x)` approximates the
//! spatial gradient of the value function, so a drift perturbation `R`
//! enters the driver as `z . R` and the martingale integrand against the
//! Brownian increment is `z G(t)`. `U` is a per-mark vector: `u_i(t, x) = v(t, x + G m_i) - v(t, x)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::coefficients::PeriodicCoefficients;
use crate::error::{argument, Result};
use crate::forward::{fmt_f64, PathEnsemble};
use crate::levy::LevyModel;
use crate::regression::{Design, RegressionBasis, StepBasis, CONDITION_WARN};
use crate::rng::PathStream;
use crate::stats::{estimate, Estimate};
use crate::MAX_DIM;

pub type DriverFn = Arc<dyn Fn(&[f64], &[f64], &[f64]) -> f64 + Send + Sync>;

/// Driver `f(x, z, u)` with its regularity metadata.
#[derive(Clone)]
pub struct Driver {
    pub label: String,
    f: DriverFn,
    /// Lipschitz constant in `z` and in `u` (the latter in the `L^2(nu)` norm).
    pub lipschitz_k: f64,
    /// Monotonicity constant in `y`; drivers here do not depend on `y`.
    pub monotone_alpha: f64,
    /// `C >= sup |f(x, 0, 0)|`.
    pub zero_bound: f64,
    /// `(C_1, C_2)` with `C_1 in (-1, 0]`, `C_2 >= 0` bounding the jump kernel.
    pub jump_bounds: (f64, f64),
}

impl fmt::Debug for Driver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Driver")
            .field("label", &self.label)
            .field("lipschitz_k", &self.lipschitz_k)
            .field("zero_bound", &self.zero_bound)
            .field("jump_bounds", &self.jump_bounds)
            .finish()
    }
}

impl Driver {
    pub fn new(
        label: impl Into<String>,
        f: DriverFn,
        lipschitz_k: f64,
        zero_bound: f64,
        jump_bounds: (f64, f64),
    ) -> Result<Self> {
        if !(lipschitz_k >= 0.0) || !(zero_bound >= 0.0) || !zero_bound.is_finite() {
            return argument("driver needs finite K >= 0 and zero bound C >= 0");
        }
        let (c1, c2) = jump_bounds;
        if !(c1 > -1.0 && c1 <= 0.0 && c2 >= 0.0) {
            return argument(format!("jump bounds need -1 < C1 <= 0 <= C2, got ({c1}, {c2})"));
        }
        Ok(Self {
            label: label.into(),
            f,
            lipschitz_k,
            monotone_alpha: 0.0,
            zero_bound,
            jump_bounds,
        })
    }

    /// Driver depending on the state only.
    pub fn state_only(
        label: impl Into<String>,
        f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        zero_bound: f64,
    ) -> Result<Self> {
        Self::new(label, Arc::new(move |x, _z, _u| f(x)), 0.0, zero_bound, (0.0, 0.0))
    }

    pub fn constant(c: f64) -> Self {
        Self::new(format!("constant({c})"), Arc::new(move |_, _, _| c), 0.0, c.abs(), (0.0, 0.0))
            .expect("constant driver is valid")
    }

    #[inline]
    pub fn eval(&self, x: &[f64], z: &[f64], u: &[f64]) -> f64 {
        (self.f)(x, z, u)
    }

    pub fn function(&self) -> &DriverFn {
        &self.f
    }

    /// `k f`, with metadata scaled.
    pub fn scaled(&self, k: f64) -> Self {
        let f = self.f.clone();
        Self {
            label: format!("{k} * {}", self.label),
            f: Arc::new(move |x, z, u| k * f(x, z, u)),
            lipschitz_k: self.lipschitz_k * k.abs(),
            monotone_alpha: self.monotone_alpha,
            zero_bound: self.zero_bound * k.abs(),
            jump_bounds: self.jump_bounds,
        }
    }

    /// `f + k`.
    pub fn shifted(&self, k: f64) -> Self {
        let f = self.f.clone();
        Self {
            label: format!("{} + {k}", self.label),
            f: Arc::new(move |x, z, u| f(x, z, u) + k),
            zero_bound: self.zero_bound + k.abs(),
            ..self.clone()
        }
    }

    /// Samples `f(x, 0, 0)` on every state of the ensemble.
    pub fn check_zero_bound(&self, ensemble: &PathEnsemble) -> ZeroBoundCheck {
        let d = ensemble.dim();
        let zeros = [0.0; MAX_DIM];
        let uz = vec![0.0; ensemble.n_marks()];
        let mut max_abs: f64 = 0.0;
        let mut violations = 0;
        for n in 0..ensemble.n_times() {
            for x in ensemble.states_at(n).chunks(d) {
                let v = self.eval(x, &zeros[..d], &uz).abs();
                max_abs = max_abs.max(v);
                if v > self.zero_bound * (1.0 + 1e-12) {
                    violations += 1;
                }
            }
        }
        ZeroBoundCheck {
            declared: self.zero_bound,
            sampled_max: max_abs,
            violations,
        }
    }

    /// Random finite-difference check of the declared Lipschitz constant in
    /// `(z, u)` at ensemble states.
    pub fn spot_check_lipschitz(
        &self,
        ensemble: &PathEnsemble,
        noise: &LevyModel,
        n_samples: usize,
        seed: u64,
    ) -> LipschitzCheck {
        let d = ensemble.dim();
        let k = noise.n_marks();
        let mut stream = PathStream::new(seed, 0xF1F1, 0, 4 * (2 * d + 2 * k + 2) as u64);
        let mut max_ratio: f64 = 0.0;
        let mut violations = 0;
        let n_times = ensemble.n_times();
        for s in 0..n_samples {
            stream.seek_step(s as u64);
            let n = ((stream.uniform() * n_times as f64) as usize).min(n_times - 1);
            let m = ((stream.uniform() * ensemble.n_paths() as f64) as usize).min(ensemble.n_paths() - 1);
            let x = ensemble.state(m, n);
            let mut z1 = vec![0.0; d];
            let mut z2 = vec![0.0; d];
            let mut u1 = vec![0.0; k];
            let mut u2 = vec![0.0; k];
            for i in 0..d {
                z1[i] = 4.0 * (stream.uniform() - 0.5);
                z2[i] = z1[i] + 0.2 * (stream.uniform() - 0.5);
            }
            for i in 0..k {
                u1[i] = 4.0 * (stream.uniform() - 0.5);
                u2[i] = u1[i] + 0.2 * (stream.uniform() - 0.5);
            }
            let dz: f64 = z1.iter().zip(&z2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let du: f64 = u1
                .iter()
                .zip(&u2)
                .zip(noise.marks())
                .map(|((a, b), m)| m.intensity * (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let df = (self.eval(x, &z1, &u1) - self.eval(x, &z2, &u2)).abs();
            let denom = dz + du;
            if denom > 0.0 {
                let r = df / denom;
                max_ratio = max_ratio.max(r);
                if r > self.lipschitz_k * (1.0 + 1e-9) + 1e-12 {
                    violations += 1;
                }
            }
        }
        LipschitzCheck {
            declared: self.lipschitz_k,
            max_ratio,
            violations,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ZeroBoundCheck {
    pub declared: f64,
    pub sampled_max: f64,
    pub violations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LipschitzCheck {
    pub declared: f64,
    pub max_ratio: f64,
    pub violations: usize,
}

/// Labelled scalar function of the state (terminal conditions, test
/// functions).
#[derive(Clone)]
pub struct StateFn {
    pub label: String,
    f: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
}

impl fmt::Debug for StateFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "StateFn({})", self.label)
    }
}

impl StateFn {
    pub fn new(label: impl Into<String>, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            label: label.into(),
            f: Arc::new(f),
        }
    }

    pub fn constant(c: f64) -> Self {
        Self::new(format!("constant({c})"), move |_| c)
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
}

/// Regression surfaces at one time step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepSurfaces {
    pub t: f64,
    pub basis: StepBasis,
    pub y: Vec<f64>,
    /// One coefficient vector per state coordinate.
    pub z: Vec<Vec<f64>>,
    /// One coefficient vector per jump mark.
    pub u: Vec<Vec<f64>>,
    pub condition: f64,
}

/// Realized path values, laid out like the ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct PathValues {
    /// `[time][path]`
    pub y: Vec<f64>,
    /// `[step][path][dim]`
    pub z: Vec<f64>,
    /// `[step][path][mark]`
    pub u: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BsdeSolution {
    pub grid: Vec<f64>,
    pub steps: Vec<StepSurfaces>,
    pub paths: Option<PathValues>,
    /// Pathwise discounted driver integral plus terminal value; its mean is
    /// exactly the mean of `Y` at the first grid time.
    pub realized: Vec<f64>,
    pub terminal_label: String,
    pub driver_label: String,
    pub discount: f64,
    pub z_convention: &'static str,
    pub dim: usize,
    pub n_marks: usize,
    /// Steps whose regression condition number exceeded the warning level.
    pub ill_conditioned_steps: Vec<usize>,
    /// Largest realized `|Y|` over all paths and steps.
    pub max_abs_y: f64,
}

pub const Z_CONVENTION: &str = "state-gradient: driver receives z with z.R the drift response; martingale integrand is z G(t)";

impl BsdeSolution {
    fn snap(&self, t: f64) -> usize {
        let n = self.steps.len();
        let dt = (self.grid[self.grid.len() - 1] - self.grid[0]) / n as f64;
        let idx = ((t - self.grid[0]) / dt).round();
        (idx.max(0.0) as usize).min(n - 1)
    }

    /// `y(t, x)` with `t` snapped to the nearest solved grid time.
    pub fn y(&self, t: f64, x: &[f64]) -> f64 {
        let s = &self.steps[self.snap(t)];
        s.basis.eval(&s.y, x)
    }

    pub fn z(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let s = &self.steps[self.snap(t)];
        s.z.iter().map(|c| s.basis.eval(c, x)).collect()
    }

    pub fn u(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let s = &self.steps[self.snap(t)];
        s.u.iter().map(|c| s.basis.eval(c, x)).collect()
    }

    /// Writes `z` and `u` at `(t, x)` into caller buffers.
    pub fn zu_into(&self, t: f64, x: &[f64], z: &mut [f64], u: &mut [f64]) {
        let s = &self.steps[self.snap(t)];
        let mut buf = [0.0; 128];
        let k = s.basis.len();
        s.basis.eval_into(x, &mut buf[..k]);
        let dot = |c: &[f64]| c.iter().zip(&buf[..k]).map(|(a, b)| a * b).sum::<f64>();
        for (o, c) in z.iter_mut().zip(&s.z) {
            *o = dot(c);
        }
        for (o, c) in u.iter_mut().zip(&s.u) {
            *o = dot(c);
        }
    }

    /// Mean of `Y` at the first grid time with its Monte Carlo error.
    pub fn y0(&self) -> Estimate {
        estimate(&self.realized)
    }

    /// CSV with one row per (surface, time): `surface,t,c_0,c_1,...`.
    pub fn write_coefficients_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "surface,t,coefficients")?;
        for s in &self.steps {
            let mut row = |name: String, c: &[f64]| -> std::io::Result<()> {
                let cs: Vec<String> = c.iter().map(|v| fmt_f64(*v)).collect();
                writeln!(w, "{name},{},{}", fmt_f64(s.t), cs.join(";"))
            };
            row("y".into(), &s.y)?;
            for (k, c) in s.z.iter().enumerate() {
                row(format!("z{k}"), c)?;
            }
            for (k, c) in s.u.iter().enumerate() {
                row(format!("u{k}"), c)?;
            }
        }
        Ok(())
    }
}

/// Options of the backward sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackwardOptions {
    /// Discount rate `alpha >= 0`; the `-alpha y` term is integrated exactly
    /// over each step.
    pub discount: f64,
    /// Keep realized `(Y, Z, U)` on every path and step.
    pub keep_paths: bool,
    /// Solve on the first `n` steps of the ensemble only.
    pub steps: Option<usize>,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        Self {
            discount: 0.0,
            keep_paths: true,
            steps: None,
        }
    }
}

/// Solves `Y_t = g(X_T) + int_t^T f(X, Z, U) ds - int Z dW - int U dN~` on the
/// ensemble.
pub fn solve_finite_horizon(
    driver: &Driver,
    ensemble: &PathEnsemble,
    coeffs: &PeriodicCoefficients,
    noise: &LevyModel,
    terminal: &StateFn,
    basis: &RegressionBasis,
) -> Result<BsdeSolution> {
    backward(driver, ensemble, coeffs, noise, terminal, basis, BackwardOptions::default())
}

const CHUNK: usize = 1024;

/// Backward sweep with optional exponential discounting:
/// `Y_n = e^{-alpha dt} E[Y_{n+1} | X_n] + f(X_n, Z_n, U_n) (1 - e^{-alpha dt}) / alpha`.
pub fn backward(
    driver: &Driver,
    ensemble: &PathEnsemble,
    coeffs: &PeriodicCoefficients,
    noise: &LevyModel,
    terminal: &StateFn,
    basis: &RegressionBasis,
    opts: BackwardOptions,
) -> Result<BsdeSolution> {
    if !ensemble.has_increments() {
        return argument("BSDE regression needs an ensemble with retained increments");
    }
    if ensemble.dim() != coeffs.dim() || ensemble.n_marks() != noise.n_marks() {
        return argument("ensemble does not match the coefficients and noise model");
    }
    if !(opts.discount >= 0.0) {
        return argument("discount must be non-negative");
    }
    let d = ensemble.dim();
    let k = noise.n_marks();
    let m = ensemble.n_paths();
    let full = ensemble.grid().len() - 1;
    let n_steps = opts.steps.unwrap_or(full);
    if n_steps == 0 || n_steps > full {
        return argument(format!("cannot solve on {n_steps} of {full} steps"));
    }
    let grid = ensemble.grid()[..=n_steps].to_vec();
    let dt = (grid[n_steps] - grid[0]) / n_steps as f64;
    let alpha = opts.discount;
    let disc = (-alpha * dt).exp();
    let weight = if alpha > 0.0 { -(-alpha * dt).exp_m1() / alpha } else { dt };
    let eig = nalgebra::SymmetricEigen::new(noise.diffusion_cov().clone());
    let qmax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    // noise directions carrying Brownian variance, as rows of V_r^T
    let dirs: Vec<Vec<f64>> = (0..d)
        .filter(|&k| eig.eigenvalues[k] > 1e-12 * qmax.max(1e-300) && qmax > 0.0)
        .map(|k| eig.eigenvectors.column(k).iter().cloned().collect())
        .collect();
    let nd = dirs.len();
    let rates: Vec<f64> = noise.marks().iter().map(|mk| mk.intensity).collect();

    let mut y_next: Vec<f64> = ensemble.states_at(n_steps).chunks(d).map(|x| terminal.eval(x)).collect();
    if y_next.iter().any(|v| !v.is_finite()) {
        return argument("terminal condition is not finite on the ensemble");
    }
    let mut realized: Vec<f64> = y_next.clone();
    let mut max_abs_y = y_next.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut paths = opts.keep_paths.then(|| PathValues {
        y: vec![0.0; (n_steps + 1) * m],
        z: vec![0.0; n_steps * m * d],
        u: vec![0.0; n_steps * m * k],
    });
    if let Some(p) = paths.as_mut() {
        p.y[n_steps * m..].copy_from_slice(&y_next);
    }
    let mut steps: Vec<StepSurfaces> = Vec::with_capacity(n_steps);
    let mut ill = Vec::new();
    let mut sparse_jump_steps = 0usize;
    let mut prev_u: Option<(StepBasis, Vec<Vec<f64>>)> = None;

    for n in (0..n_steps).rev() {
        let xs = ensemble.states_at(n);
        let dw = ensemble.dw_at(n).expect("increments present");
        let counts = ensemble.counts_at(n).expect("increments present");
        let mut mults: Vec<Vec<f64>> = Vec::with_capacity(nd + k);
        for v in &dirs {
            mults.push(
                dw.chunks(d)
                    .map(|w| w.iter().zip(v).map(|(a, b)| a * b).sum())
                    .collect(),
            );
        }
        // marks with too few jumps on this step cannot identify a surface
        let probe = Design::new(xs, d, basis, n)?;
        let kb = probe.n_basis();
        let mut regressed_marks = Vec::with_capacity(k);
        for (i, &rate) in rates.iter().enumerate() {
            let hits = (0..m).filter(|&r| counts[r * k + i] > 0).count();
            if hits >= 2 * kb + 2 {
                mults.push((0..m).map(|r| counts[r * k + i] as f64 - rate * dt).collect());
                regressed_marks.push(i);
            } else {
                sparse_jump_steps += 1;
            }
        }
        let design = if mults.is_empty() { probe } else { Design::with_multipliers(xs, d, basis, mults, n)? };
        if design.condition > CONDITION_WARN {
            ill.push(n);
        }
        let coef = design.solve(&y_next);
        let block = |b: usize| coef[b * kb..(b + 1) * kb].to_vec();
        let cy = block(0);

        // state gradient z = c V_r^T G^{-1}
        let g = coeffs.g_at(grid[n]);
        let ginv = g.clone().try_inverse().unwrap_or_else(|| DMatrix::zeros(d, d));
        let z_coef: Vec<Vec<f64>> = (0..d)
            .map(|j| {
                (0..kb)
                    .map(|b| {
                        (0..nd)
                            .map(|kk| {
                                let row: f64 = (0..d).map(|l| dirs[kk][l] * ginv[(l, j)]).sum();
                                coef[(1 + kk) * kb + b] * row
                            })
                            .sum()
                    })
                    .collect()
            })
            .collect();
        let mut u_coef: Vec<Vec<f64>> = vec![vec![0.0; kb]; k];
        for i in 0..k {
            if let Some(pos) = regressed_marks.iter().position(|&r| r == i) {
                u_coef[i] = block(1 + nd + pos);
            } else if let Some((pb, pu)) = prev_u.as_ref() {
                // carry the later surface forward, re-expanded on this basis
                let ys: Vec<f64> = xs.chunks(d).map(|x| pb.eval(&pu[i], x)).collect();
                u_coef[i] = design.solve(&ys)[..kb].to_vec();
            }
        }
        let design = &design;
        let chunk_results: Vec<Vec<(f64, [f64; MAX_DIM], Vec<f64>)>> = (0..m)
            .collect::<Vec<_>>()
            .par_chunks(CHUNK)
            .map(|rows| {
                rows.iter()
                    .map(|&r| {
                        let x = &xs[r * d..(r + 1) * d];
                        let mut z = [0.0; MAX_DIM];
                        for j in 0..d {
                            z[j] = design.fitted(&z_coef[j], r);
                        }
                        let u: Vec<f64> = u_coef.iter().map(|c| design.fitted(c, r)).collect();
                        let f = driver.eval(x, &z[..d], &u);
                        (f, z, u)
                    })
                    .collect()
            })
            .collect();
        let mut r = 0;
        for chunk in chunk_results {
            for (f, z, u) in chunk {
                let y_hat = design.fitted(&cy, r);
                y_next[r] = disc * y_hat + weight * f;
                realized[r] = disc * realized[r] + weight * f;
                if let Some(p) = paths.as_mut() {
                    p.z[(n * m + r) * d..(n * m + r + 1) * d].copy_from_slice(&z[..d]);
                    p.u[(n * m + r) * k..(n * m + r + 1) * k].copy_from_slice(&u);
                }
                r += 1;
            }
        }
        max_abs_y = y_next.iter().fold(max_abs_y, |a, v| a.max(v.abs()));
        if y_next.iter().any(|v| !v.is_finite()) {
            return Err(crate::LabError::SingularRegression {
                step: n,
                detail: "non-finite Y after regression".into(),
            });
        }
        if let Some(p) = paths.as_mut() {
            p.y[n * m..(n + 1) * m].copy_from_slice(&y_next);
        }
        let cy_n = design.solve(&y_next)[..kb].to_vec();
        prev_u = Some((design.basis.clone(), u_coef.clone()));
        steps.push(StepSurfaces {
            t: grid[n],
            basis: design.basis.clone(),
            y: cy_n,
            z: z_coef,
            u: u_coef,
            condition: design.condition,
        });
    }
    if sparse_jump_steps > 0 {
        log::debug!("{sparse_jump_steps} (step, mark) pairs had too few jumps to regress U");
    }
    steps.reverse();
    Ok(BsdeSolution {
        grid,
        steps,
        paths,
        realized,
        terminal_label: terminal.label.clone(),
        driver_label: driver.label.clone(),
        discount: alpha,
        z_convention: Z_CONVENTION,
        dim: d,
        n_marks: k,
        ill_conditioned_steps: ill,
        max_abs_y,
    })
}

/// Mean and standard error over paths of the one-step martingale residual
/// `e^{-a dt} (Y_{n+1} - z G dW - sum_i U_i (dN_i - lambda_i dt)) - Y_n + f w`.
pub fn martingale_residuals(
    solution: &BsdeSolution,
    driver: &Driver,
    ensemble: &PathEnsemble,
    coeffs: &PeriodicCoefficients,
    noise: &LevyModel,
) -> Result<Vec<Estimate>> {
    let p = match &solution.paths {
        Some(p) => p,
        None => return argument("solution does not retain path values"),
    };
    let d = solution.dim;
    let k = solution.n_marks;
    let m = ensemble.n_paths();
    let n_steps = solution.steps.len();
    let dt = (solution.grid[n_steps] - solution.grid[0]) / n_steps as f64;
    let alpha = solution.discount;
    let disc = (-alpha * dt).exp();
    let weight = if alpha > 0.0 { -(-alpha * dt).exp_m1() / alpha } else { dt };
    let rates: Vec<f64> = noise.marks().iter().map(|mk| mk.intensity).collect();
    let mut out = Vec::with_capacity(n_steps);
    for n in 0..n_steps {
        let g = coeffs.g_at(solution.grid[n]);
        let xs = ensemble.states_at(n);
        let dw = ensemble.dw_at(n).expect("increments");
        let counts = ensemble.counts_at(n).expect("increments");
        let res: Vec<f64> = (0..m)
            .map(|r| {
                let z = &p.z[(n * m + r) * d..(n * m + r + 1) * d];
                let u = &p.u[(n * m + r) * k..(n * m + r + 1) * k];
                let x = &xs[r * d..(r + 1) * d];
                let f = driver.eval(x, z, u);
                let mut zdw = 0.0;
                for i in 0..d {
                    let mut gdw = 0.0;
                    for j in 0..d {
                        gdw += g[(i, j)] * dw[r * d + j];
                    }
                    zdw += z[i] * gdw;
                }
                let ujump: f64 = (0..k)
                    .map(|i| u[i] * (counts[r * k + i] as f64 - rates[i] * dt))
                    .sum();
                disc * (p.y[(n + 1) * m + r] - zdw - ujump) - p.y[n * m + r] + f * weight
            })
            .collect();
        out.push(estimate(&res));
    }
    Ok(out)
}
