//! Explicit finite-difference solver for the 1-D backward PIDE
//! `u_t + L u + f(x, u_x, Du) = 0`, `u(T, .) = g`, used as an oracle for the
//! regression solver.
//!
//! `L u = (a x + F - G sum_i lambda_i m_i) u_x + G^2 Q u_xx / 2
//!        + sum_i lambda_i (u(x + G m_i) - u(x))`
//! and `Du_i = u(x + G m_i) - u(x)`. The gradient handed to the driver is
//! `u_x`, matching the state-gradient convention of [`crate::bsde`].

use serde::Serialize;

use crate::bsde::{Driver, StateFn};
use crate::coefficients::PeriodicCoefficients;
use crate::error::{argument, LabError, Result};
use crate::levy::LevyModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpaceGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub n_x: usize,
}

impl SpaceGrid {
    pub fn h(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n_x - 1) as f64
    }

    pub fn point(&self, j: usize) -> f64 {
        self.x_min + j as f64 * self.h()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeGrid {
    pub t_start: f64,
    pub t_end: f64,
    pub n_steps: usize,
    /// Store one time level every this many steps (the two endpoints are
    /// always stored).
    pub record_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PideSolution {
    pub x: Vec<f64>,
    /// Stored time levels, increasing.
    pub t: Vec<f64>,
    /// `u[level][j]`
    pub u: Vec<Vec<f64>>,
    pub dt: f64,
}

impl PideSolution {
    fn interp_level(&self, level: usize, x: f64) -> f64 {
        lin_interp(&self.x, &self.u[level], x)
    }

    /// Value at `(t, x)`, linear in both `t` (between stored levels) and `x`.
    pub fn value(&self, t: f64, x: f64) -> f64 {
        let n = self.t.len();
        if t <= self.t[0] {
            return self.interp_level(0, x);
        }
        if t >= self.t[n - 1] {
            return self.interp_level(n - 1, x);
        }
        let i = self.t.partition_point(|&s| s <= t) - 1;
        let w = (t - self.t[i]) / (self.t[i + 1] - self.t[i]);
        (1.0 - w) * self.interp_level(i, x) + w * self.interp_level(i + 1, x)
    }
}

/// Linear interpolation on a uniform grid with linear extrapolation past the
/// ends.
fn lin_interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    let h = xs[1] - xs[0];
    let s = (x - xs[0]) / h;
    let j = (s.floor().max(0.0) as usize).min(n - 2);
    let w = s - j as f64;
    (1.0 - w) * ys[j] + w * ys[j + 1]
}

pub fn pide_oracle_1d(
    driver: &Driver,
    coeffs: &PeriodicCoefficients,
    noise: &LevyModel,
    terminal: &StateFn,
    space: &SpaceGrid,
    time: &TimeGrid,
) -> Result<PideSolution> {
    if coeffs.dim() != 1 || noise.dim() != 1 {
        return argument("the PIDE oracle is one-dimensional");
    }
    if space.n_x < 5 || !(space.x_max > space.x_min) {
        return argument("space grid needs at least 5 points on a non-empty interval");
    }
    if time.n_steps == 0 || !(time.t_end > time.t_start) || time.record_every == 0 {
        return argument("time grid needs n_steps > 0, record_every > 0 and t_end > t_start");
    }
    let h = space.h();
    let nx = space.n_x;
    let dt = (time.t_end - time.t_start) / time.n_steps as f64;
    let x: Vec<f64> = (0..nx).map(|j| space.point(j)).collect();
    let q = noise.diffusion_cov()[(0, 0)];
    let marks: Vec<(f64, f64)> = noise.marks().iter().map(|m| (m.mark[0], m.intensity)).collect();
    let comp: f64 = marks.iter().map(|(m, l)| m * l).sum();
    let total_rate: f64 = marks.iter().map(|(_, l)| l).sum();

    // CFL over the whole period of the coefficients
    let mut drift_max: f64 = 0.0;
    let mut diff_max: f64 = 0.0;
    let mut fbuf = [0.0];
    for s in 0..64 {
        let t = time.t_start + (time.t_end - time.t_start) * s as f64 / 63.0;
        let a = coeffs.a_at(t)[(0, 0)];
        let g = coeffs.g_at(t)[(0, 0)];
        diff_max = diff_max.max(g * g * q);
        for &xj in [x[0], x[nx - 1]].iter().chain(x.iter().step_by((nx / 16).max(1))) {
            coeffs.drift(t, &[xj], &mut fbuf);
            drift_max = drift_max.max((a * xj + fbuf[0] - g * comp).abs());
        }
    }
    let admissible = 1.0 / (diff_max / (h * h) + drift_max / h + total_rate);
    if dt > admissible {
        return Err(LabError::Cfl { dt, admissible });
    }

    let mut u: Vec<f64> = x.iter().map(|&xj| terminal.eval(&[xj])).collect();
    let mut levels = vec![u.clone()];
    let mut times = vec![time.t_end];
    let mut next = vec![0.0; nx];
    let mut du = vec![0.0; marks.len()];
    for step in (0..time.n_steps).rev() {
        let t1 = time.t_start + (step + 1) as f64 * dt;
        let a = coeffs.a_at(t1)[(0, 0)];
        let g = coeffs.g_at(t1)[(0, 0)];
        let half_sig2 = 0.5 * g * g * q;
        for j in 1..nx - 1 {
            let xj = x[j];
            coeffs.drift(t1, &[xj], &mut fbuf);
            let b = a * xj + fbuf[0] - g * comp;
            let ux_c = (u[j + 1] - u[j - 1]) / (2.0 * h);
            // central where the cell Peclet number allows it, upwind otherwise
            let ux_up = if b.abs() * h <= 2.0 * half_sig2 {
                ux_c
            } else if b > 0.0 {
                (u[j + 1] - u[j]) / h
            } else {
                (u[j] - u[j - 1]) / h
            };
            let uxx = (u[j + 1] - 2.0 * u[j] + u[j - 1]) / (h * h);
            let mut jump = 0.0;
            for (i, (m, l)) in marks.iter().enumerate() {
                du[i] = lin_interp(&x, &u, xj + g * m) - u[j];
                jump += l * du[i];
            }
            let f = driver.eval(&[xj], &[ux_c], &du);
            next[j] = u[j] + dt * (b * ux_up + half_sig2 * uxx + jump + f);
        }
        next[0] = 2.0 * next[1] - next[2];
        next[nx - 1] = 2.0 * next[nx - 2] - next[nx - 3];
        std::mem::swap(&mut u, &mut next);
        if u.iter().any(|v| !v.is_finite()) {
            return Err(LabError::Model(format!("PIDE solution became non-finite at step {step}")));
        }
        if step % time.record_every == 0 {
            levels.push(u.clone());
            times.push(time.t_start + step as f64 * dt);
        }
    }
    levels.reverse();
    times.reverse();
    Ok(PideSolution { x, t: times, u: levels, dt })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space() -> SpaceGrid {
        SpaceGrid { x_min: -6.0, x_max: 6.0, n_x: 241 }
    }

    #[test]
    fn constant_terminal_stays_constant() {
        let c = PeriodicCoefficients::ou_1d(1.0, 1.0).unwrap();
        let n = LevyModel::scalar(1.0, vec![(0.5, 1.0)]).unwrap();
        let s = pide_oracle_1d(&Driver::constant(0.0), &c, &n, &StateFn::constant(1.7), &space(), &TimeGrid { t_start: 0.0, t_end: 1.0, n_steps: 800, record_every: 200 }).unwrap();
        assert_eq!(s.t.len(), 5);
        assert!(s.u.iter().flatten().all(|v| (v - 1.7).abs() < 1e-12));
    }

    #[test]
    fn cfl_violation_reports_admissible_step() {
        let c = PeriodicCoefficients::ou_1d(1.0, 1.0).unwrap();
        let n = LevyModel::scalar(1.0, vec![]).unwrap();
        let r = pide_oracle_1d(&Driver::constant(0.0), &c, &n, &StateFn::constant(0.0), &space(), &TimeGrid { t_start: 0.0, t_end: 1.0, n_steps: 10, record_every: 1 });
        match r {
            Err(LabError::Cfl { dt, admissible }) => assert!(admissible < dt),
            other => panic!("expected CFL error, got {other:?}"),
        }
    }

    #[test]
    fn matches_gaussian_transition_without_jumps() {
        let c = PeriodicCoefficients::ou_1d(1.0, 1.0).unwrap();
        let n = LevyModel::scalar(1.0, vec![]).unwrap();
        let g = |x: f64| 1.0 / (1.0 + (-(x - 0.3) / 0.2).exp());
        let term = StateFn::new("logistic", move |x| g(x[0]));
        let s = pide_oracle_1d(&Driver::constant(0.0), &c, &n, &term, &space(), &TimeGrid { t_start: 0.0, t_end: 1.0, n_steps: 2000, record_every: 2000 }).unwrap();
        let var = (1.0 - (-2.0f64).exp()) / 2.0;
        for k in 0..13 {
            let x0 = -1.5 + 0.25 * k as f64;
            let mean = x0 * (-1.0f64).exp();
            // Gauss-Hermite-free quadrature: fine trapezoid over 8 sd
            let sd = var.sqrt();
            let mut acc = 0.0;
            let nq = 4000;
            for i in 0..=nq {
                let z = -8.0 + 16.0 * i as f64 / nq as f64;
                let w = if i == 0 || i == nq { 0.5 } else { 1.0 };
                acc += w * g(mean + sd * z) * (-0.5 * z * z).exp();
            }
            let exact = acc * 16.0 / nq as f64 / (2.0 * std::f64::consts::PI).sqrt();
            let got = s.value(0.0, x0);
            assert!((got - exact).abs() < 0.01 * exact.max(0.05), "x0={x0}: {got} vs {exact}");
        }
    }
}
