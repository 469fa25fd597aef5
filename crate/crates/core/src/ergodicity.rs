//! Empirical checks of mixing: test-function coupling gaps, hitting times of
//! balls, and a long-run harvest of the periodic invariant measure.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::bsde::StateFn;
use crate::coefficients::PeriodicCoefficients;
use crate::error::{argument, LabError, Result};
use crate::forward::{compensator_array, fmt_f64, simulate_recorded, EulerPath, SimulationSpec};
use crate::levy::LevyModel;
use crate::rng::channel;
use crate::stats::{batch_means, estimate, ks_two_sample, Estimate};

/// Test function with a declared bound `sup |psi| <= sup`.
#[derive(Debug, Clone)]
pub struct BoundedFn {
    pub f: StateFn,
    pub sup: f64,
}

impl BoundedFn {
    pub fn new(f: StateFn, sup: f64) -> Self {
        Self { f, sup }
    }

    pub fn sin(coord: usize) -> Self {
        Self::new(StateFn::new(format!("sin(x{coord})"), move |x| x[coord].sin()), 1.0)
    }

    pub fn cos(coord: usize) -> Self {
        Self::new(StateFn::new(format!("cos(x{coord})"), move |x| x[coord].cos()), 1.0)
    }

    pub fn scaled(&self, k: f64) -> Self {
        let f = self.f.clone();
        Self::new(StateFn::new(format!("{k} * {}", f.label), move |x| k * f.eval(x)), self.sup * k.abs())
    }
}

/// Least-squares fit `log gap = log c - rho t` for one test function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateFit {
    pub rho: f64,
    pub rho_stderr: f64,
    pub c: f64,
    pub r_squared: f64,
    pub n_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayFit {
    pub test_functions: Vec<String>,
    pub times: Vec<f64>,
    /// `gaps[psi][time]`
    pub gaps: Vec<Vec<f64>>,
    pub gap_stderr: Vec<Vec<f64>>,
    /// Per test function; `None` when no time had a resolved gap.
    pub fits: Vec<Option<RateFit>>,
    pub rho_hat: f64,
    pub c_hat: f64,
    pub rho_stderr: f64,
    pub r_squared: f64,
    pub degenerate: bool,
}

impl DecayFit {
    /// The pooled rate, or a degenerate-fit error when nothing was resolved.
    pub fn rate(&self) -> Result<(f64, f64)> {
        if self.degenerate {
            Err(LabError::DegenerateFit(
                "every gap is within 3 standard errors of zero".into(),
            ))
        } else {
            Ok((self.rho_hat, self.rho_stderr))
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "psi,t,gap,stderr")?;
        for (k, label) in self.test_functions.iter().enumerate() {
            for (i, t) in self.times.iter().enumerate() {
                writeln!(w, "{label},{},{},{}", fmt_f64(*t), fmt_f64(self.gaps[k][i]), fmt_f64(self.gap_stderr[k][i]))?;
            }
        }
        Ok(())
    }
}

/// Weighted line fit of `log gap` on points resolved beyond three standard
/// errors, weights from the delta method.
pub fn fit_log_gaps(times: &[f64], gaps: &[f64], stderr: &[f64]) -> Option<RateFit> {
    let pts: Vec<(f64, f64, f64)> = times
        .iter()
        .zip(gaps)
        .zip(stderr)
        .filter(|((_, g), s)| **g > 3.0 * **s && **g > 0.0)
        .map(|((t, g), s)| {
            let rel = (s / g).max(1e-6);
            (*t, g.ln(), 1.0 / (rel * rel))
        })
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let sw: f64 = pts.iter().map(|p| p.2).sum();
    let mt = pts.iter().map(|p| p.2 * p.0).sum::<f64>() / sw;
    let my = pts.iter().map(|p| p.2 * p.1).sum::<f64>() / sw;
    let stt: f64 = pts.iter().map(|p| p.2 * (p.0 - mt).powi(2)).sum();
    if stt <= 0.0 {
        return None;
    }
    let sty: f64 = pts.iter().map(|p| p.2 * (p.0 - mt) * (p.1 - my)).sum();
    let slope = sty / stt;
    let intercept = my - slope * mt;
    let sse: f64 = pts.iter().map(|p| p.2 * (p.1 - intercept - slope * p.0).powi(2)).sum();
    let syy: f64 = pts.iter().map(|p| p.2 * (p.1 - my).powi(2)).sum();
    let dof = (pts.len() as f64 - 2.0).max(1.0);
    Some(RateFit {
        rho: -slope,
        rho_stderr: (sse / dof / stt).sqrt(),
        c: intercept.exp(),
        r_squared: if syy > 0.0 { 1.0 - sse / syy } else { 1.0 },
        n_points: pts.len(),
    })
}

#[allow(clippy::too_many_arguments)]
pub fn coupling_decay(
    coeffs: &PeriodicCoefficients,
    noise: &LevyModel,
    x: &[f64],
    y: &[f64],
    psis: &[BoundedFn],
    horizon: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
    record_every: usize,
) -> Result<DecayFit> {
    if psis.is_empty() {
        return argument("coupling decay needs at least one test function");
    }
    let spec = SimulationSpec::new(0.0, horizon, dt, n_paths, seed);
    let ex = simulate_recorded(coeffs, noise, x, &spec.with_channel(channel::FORWARD), record_every)?;
    let ey = simulate_recorded(coeffs, noise, y, &spec.with_channel(channel::COUPLING_SECOND), record_every)?;
    let d = coeffs.dim();
    let times = ex.grid().to_vec();
    let mut gaps = Vec::with_capacity(psis.len());
    let mut ses = Vec::with_capacity(psis.len());
    for psi in psis {
        let mut g = Vec::with_capacity(times.len());
        let mut s = Vec::with_capacity(times.len());
        for n in 0..times.len() {
            let vx: Vec<f64> = ex.states_at(n).chunks(d).map(|p| psi.f.eval(p)).collect();
            let vy: Vec<f64> = ey.states_at(n).chunks(d).map(|p| psi.f.eval(p)).collect();
            let (a, b) = (estimate(&vx), estimate(&vy));
            g.push((a.mean - b.mean).abs());
            s.push(a.stderr.hypot(b.stderr));
        }
        gaps.push(g);
        ses.push(s);
    }
    let fits: Vec<Option<RateFit>> = gaps.iter().zip(&ses).map(|(g, s)| fit_log_gaps(&times, g, s)).collect();
    let ok: Vec<&RateFit> = fits.iter().flatten().collect();
    let (rho_hat, c_hat, rho_stderr, r_squared, degenerate) = if ok.is_empty() {
        (f64::NAN, f64::NAN, f64::NAN, f64::NAN, true)
    } else {
        let w: Vec<f64> = ok.iter().map(|f| 1.0 / f.rho_stderr.max(1e-12).powi(2)).collect();
        let sw: f64 = w.iter().sum();
        let rho = ok.iter().zip(&w).map(|(f, w)| f.rho * w).sum::<f64>() / sw;
        let c = ok.iter().map(|f| f.c).fold(0.0, f64::max);
        let r2 = ok.iter().map(|f| f.r_squared).fold(1.0, f64::min);
        (rho, c, sw.sqrt().recip(), r2, false)
    };
    Ok(DecayFit {
        test_functions: psis.iter().map(|p| p.f.label.clone()).collect(),
        times,
        gaps,
        gap_stderr: ses,
        fits,
        rho_hat,
        c_hat,
        rho_stderr,
        r_squared,
        degenerate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HittingTimeStats {
    pub center: Vec<f64>,
    pub radius: f64,
    pub start: f64,
    pub horizon: f64,
    /// First grid time in the ball per path; `None` when censored at the
    /// horizon.
    pub samples: Vec<Option<f64>>,
    /// `(T, P(tau > T))`
    pub survival: Vec<(f64, f64)>,
    pub censored: usize,
}

impl HittingTimeStats {
    pub fn survival_at(&self, t: f64) -> f64 {
        let n = self.samples.len() as f64;
        self.samples.iter().filter(|s| s.is_none_or(|tau| tau > t)).count() as f64 / n
    }

    pub fn write_survival_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "T,survival")?;
        for (t, s) in &self.survival {
            writeln!(w, "{},{}", fmt_f64(*t), fmt_f64(*s))?;
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
pub fn hitting_times(
    coeffs: &PeriodicCoefficients,
    noise: &LevyModel,
    x: &[f64],
    center: &[f64],
    radius: f64,
    horizon: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
) -> Result<HittingTimeStats> {
    if !(radius > 0.0) {
        return argument("ball radius must be positive");
    }
    let spec = SimulationSpec::new(0.0, horizon, dt, n_paths, seed);
    let n_steps = spec.n_steps()?;
    let comp = compensator_array(noise);
    let d = coeffs.dim();
    let inside = |p: &[f64]| p.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() <= radius * radius;
    let samples: Vec<Result<Option<f64>>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut path = EulerPath::new(coeffs, noise, x, 0.0, dt, seed, channel::FORWARD, p);
            if inside(&path.x[..d]) {
                return Ok(Some(0.0));
            }
            for _ in 0..n_steps {
                path.advance(noise, &comp, None)?;
                if inside(&path.x[..d]) {
                    return Ok(Some(path.time()));
                }
            }
            Ok(None)
        })
        .collect();
    let samples: Vec<Option<f64>> = samples.into_iter().collect::<Result<_>>()?;
    let mut stats = HittingTimeStats {
        center: center.to_vec(),
        radius,
        start: 0.0,
        horizon,
        censored: samples.iter().filter(|s| s.is_none()).count(),
        samples,
        survival: Vec::new(),
    };
    let n_pts = 200.min(n_steps);
    stats.survival = (0..=n_pts)
        .map(|i| {
            let t = horizon * i as f64 / n_pts as f64;
            (t, stats.survival_at(t))
        })
        .collect();
    Ok(stats)
}

/// Empirical periodic invariant measure from one long trajectory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvariantSample {
    pub dim: usize,
    pub period: f64,
    pub burn_in: f64,
    pub thinning: usize,
    pub dt: f64,
    /// Absolute harvest times.
    pub times: Vec<f64>,
    /// `[sample][dim]`
    pub states: Vec<f64>,
}

pub const HARVEST_BATCHES: usize = 40;

impl InvariantSample {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn phase(&self, i: usize) -> f64 {
        self.times[i].rem_euclid(self.period)
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    /// `int g(phase, x) dmu` with a batch-means standard error.
    pub fn integrate(&self, mut g: impl FnMut(f64, &[f64]) -> f64) -> Result<Estimate> {
        if self.is_empty() {
            return argument("invariant sample is empty");
        }
        let v: Vec<f64> = (0..self.len()).map(|i| g(self.phase(i), self.state(i))).collect();
        Ok(batch_means(&v, HARVEST_BATCHES))
    }

    /// Two-sample KS on coordinate `k` between harvests with phase in
    /// `[lo, hi)` from even and from odd periods.
    pub fn periodicity_ks(&self, k: usize, lo: f64, hi: f64) -> (f64, f64) {
        let mut even = Vec::new();
        let mut odd = Vec::new();
        for i in 0..self.len() {
            let ph = self.phase(i);
            if ph >= lo && ph < hi {
                let period_index = (self.times[i] / self.period).floor() as i64;
                if period_index % 2 == 0 {
                    even.push(self.state(i)[k]);
                } else {
                    odd.push(self.state(i)[k]);
                }
            }
        }
        ks_two_sample(&even, &odd)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let cols: Vec<String> = (0..self.dim).map(|k| format!("x{}", k + 1)).collect();
        writeln!(w, "phase,{}", cols.join(","))?;
        for i in 0..self.len() {
            let xs: Vec<String> = self.state(i).iter().map(|v| fmt_f64(*v)).collect();
            writeln!(w, "{},{}", fmt_f64(self.phase(i)), xs.join(","))?;
        }
        Ok(())
    }
}

/// Runs one trajectory from the origin and records `(t mod T*, X_t)` every
/// `thinning` steps after `burn_in`.
pub fn harvest_invariant(
    coeffs: &PeriodicCoefficients,
    noise: &LevyModel,
    burn_in: f64,
    horizon: f64,
    thinning: usize,
    dt: f64,
    seed: u64,
) -> Result<InvariantSample> {
    if !(horizon > burn_in) || burn_in < 0.0 {
        return argument(format!("harvest needs 0 <= burn_in < horizon, got {burn_in} and {horizon}"));
    }
    if thinning == 0 {
        return argument("thinning must be positive");
    }
    let n_steps = SimulationSpec::new(0.0, horizon, dt, 1, seed).n_steps()?;
    let d = coeffs.dim();
    let comp = compensator_array(noise);
    let origin = vec![0.0; d];
    let mut path = EulerPath::new(coeffs, noise, &origin, 0.0, dt, seed, channel::HARVEST, 0);
    let first = ((burn_in / dt) - 1e-9).ceil().max(0.0) as usize;
    let mut times = Vec::new();
    let mut states = Vec::new();
    for _ in 0..n_steps {
        path.advance(noise, &comp, None)?;
        let n = path.step_index();
        if n >= first && (n - first).is_multiple_of(thinning) {
            times.push(path.time());
            states.extend_from_slice(path.state());
        }
    }
    if times.is_empty() {
        return argument("harvest window produced no samples");
    }
    Ok(InvariantSample {
        dim: d,
        period: coeffs.period(),
        burn_in,
        thinning,
        dt,
        times,
        states,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::evolution_operator;

    fn ou() -> (PeriodicCoefficients, LevyModel) {
        (PeriodicCoefficients::ou_1d(1.0, 1.0).unwrap(), LevyModel::scalar(1.0, vec![]).unwrap())
    }

    #[test]
    fn equal_starts_are_degenerate_and_gaps_bounded() {
        let (c, n) = ou();
        let f = coupling_decay(&c, &n, &[0.5], &[0.5], &[BoundedFn::sin(0)], 3.0, 0.01, 2000, 1, 10).unwrap();
        assert!(f.gaps[0].iter().zip(&f.gap_stderr[0]).all(|(g, s)| *g <= 4.0 * s + 1e-15));
        assert!(f.rate().is_err() || f.fits[0].unwrap().n_points < 5);
        let f = coupling_decay(&c, &n, &[2.0], &[-2.0], &[BoundedFn::sin(0), BoundedFn::sin(0).scaled(3.0)], 3.0, 0.01, 2000, 1, 10).unwrap();
        for (k, psi) in [1.0, 3.0].iter().enumerate() {
            assert!(f.gaps[k].iter().all(|g| *g <= 2.0 * psi));
        }
        for (a, b) in f.gaps[0].iter().zip(&f.gaps[1]) {
            assert!((3.0 * a - b).abs() <= 1e-12 * (1.0 + b));
        }
    }

    #[test]
    fn ou_gap_rate_matches_quadrature() {
        let (c, n) = ou();
        let f = coupling_decay(&c, &n, &[1.0], &[-1.0], &[BoundedFn::sin(0)], 6.0, 0.01, 40_000, 5, 20).unwrap();
        let (rho, se) = f.rate().unwrap();
        assert!(rho > 2.0 * se);
        let exact: Vec<f64> = f
            .times
            .iter()
            .map(|t| {
                let v = (1.0 - (-2.0 * t).exp()) / 2.0;
                2.0 * (-t).exp().sin() * (-v / 2.0).exp()
            })
            .collect();
        let (sel_t, sel_log): (Vec<f64>, Vec<f64>) = f
            .times
            .iter()
            .zip(&exact)
            .zip(f.gaps[0].iter().zip(&f.gap_stderr[0]))
            .filter(|(_, (g, s))| **g > 3.0 * **s)
            .map(|((t, e), _)| (*t, e.ln()))
            .unzip();
        let oracle_rho = -crate::stats::fit_line(&sel_t, &sel_log).unwrap().slope;
        assert!((rho - oracle_rho).abs() < 0.2 * oracle_rho, "{rho} vs {oracle_rho}");
        assert!(f.r_squared > 0.95);
    }

    #[test]
    fn hitting_examples() {
        let (c, n) = ou();
        let h = hitting_times(&c, &n, &[0.2], &[0.0], 0.5, 1.0, 0.01, 50, 3).unwrap();
        assert!(h.samples.iter().all(|s| *s == Some(0.0)));
        let h = hitting_times(&c, &n, &[3.0], &[0.0], 0.5, 10.0, 0.01, 2000, 3).unwrap();
        assert!(h.survival_at(10.0) < 0.05);
        assert!(h.survival.windows(2).all(|w| w[1].1 <= w[0].1));
        let quiet = LevyModel::scalar(0.0, vec![]).unwrap();
        let h = hitting_times(&c, &quiet, &[3.0], &[0.0], 0.5, 5.0, 0.001, 3, 3).unwrap();
        // root of |U(t,0) x| = eps
        let (mut lo, mut hi) = (0.0, 5.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if 3.0 * evolution_operator(&c, 0.0, mid).unwrap()[(0, 0)] > 0.5 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let tau = h.samples[0].unwrap();
        assert!((tau - lo).abs() < 0.01, "{tau} vs {lo}");
    }

    #[test]
    fn harvest_variance_and_symmetry() {
        let (c, n) = ou();
        let inv = harvest_invariant(&c, &n, 10.0, 20_010.0, 50, 0.01, 9).unwrap();
        assert!(inv.phase(0) >= 0.0 && inv.phase(0) < inv.period);
        let m = inv.integrate(|_, x| x[0]).unwrap();
        assert!(m.mean.abs() < 3.0 * m.stderr + 1e-3, "{m:?}");
        let v = inv.integrate(|_, x| x[0] * x[0]).unwrap();
        assert!((v.mean - 0.5).abs() < 3.0 * v.stderr, "{v:?}");
        let inv2 = harvest_invariant(&c, &n, 10.0, 20_010.0, 50, 0.01, 10).unwrap();
        let g = |_: f64, x: &[f64]| x[0].cos();
        let (a, b) = (inv.integrate(g).unwrap(), inv2.integrate(g).unwrap());
        assert!((a.mean - b.mean).abs() < 3.0 * a.stderr.hypot(b.stderr));
        assert!(harvest_invariant(&c, &n, 5.0, 5.0, 1, 0.01, 0).is_err());
    }
}
