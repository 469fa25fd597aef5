//! Ergodic control on a finite control set: the Hamiltonian driver, the
//! argmin feedback policy, and Monte Carlo evaluation of long-run average
//! cost under the controlled dynamics.
//!
//! A control `c` shifts the state drift by `R(x, c)` and multiplies jump
//! intensities by `1 + gamma(c, i)`. The controlled path is simulated with
//! the tilted jump model (compensated by its own intensities) plus the drift
//! `R(x, c) + G(t) sum_i gamma(c, i) lambda_i m_i`, which keeps the original
//! compensation.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::bsde::Driver;
use crate::coefficients::PeriodicCoefficients;
use crate::ebsde::{vanishing_discount, EbsdeResult, VanishingOptions};
use crate::error::{argument, Result};
use crate::forward::{compensator_array, fmt_f64, EulerPath, SimulationSpec};
use crate::levy::LevyModel;
use crate::rng::channel;
use crate::stats::{effective_sample_size, estimate};
use crate::MAX_DIM;

pub type CostFn = Arc<dyn Fn(&[f64], usize) -> f64 + Send + Sync>;
pub type ControlDriftFn = Arc<dyn Fn(&[f64], usize, &mut [f64]) + Send + Sync>;

#[derive(Clone)]
pub struct ControlProblem {
    pub labels: Vec<String>,
    cost: CostFn,
    /// Declared `sup |L|` on the state support.
    pub cost_bound: f64,
    pub cost_lipschitz: f64,
    drift: ControlDriftFn,
    pub r_bound: f64,
    /// `gamma[control][mark]`
    pub gamma: Vec<Vec<f64>>,
}

impl fmt::Debug for ControlProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlProblem")
            .field("labels", &self.labels)
            .field("cost_bound", &self.cost_bound)
            .field("r_bound", &self.r_bound)
            .field("gamma", &self.gamma)
            .finish()
    }
}

impl ControlProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        labels: Vec<String>,
        cost: CostFn,
        cost_bound: f64,
        cost_lipschitz: f64,
        drift: ControlDriftFn,
        r_bound: f64,
        gamma: Vec<Vec<f64>>,
        n_marks: usize,
    ) -> Result<Self> {
        if labels.is_empty() {
            return argument("control set is empty");
        }
        if gamma.len() != labels.len() || gamma.iter().any(|g| g.len() != n_marks) {
            return argument("gamma needs one factor per (control, mark)");
        }
        if let Some(g) = gamma.iter().flatten().find(|g| !(**g > -1.0 && **g < 1.0)) {
            return argument(format!("gamma = {g} outside (-1, 1)"));
        }
        if !(cost_bound >= 0.0) || !(r_bound >= 0.0) {
            return argument("cost and drift bounds must be non-negative");
        }
        Ok(Self {
            labels,
            cost,
            cost_bound,
            cost_lipschitz,
            drift,
            r_bound,
            gamma,
        })
    }

    /// Controls that shift the drift by a constant vector each, with no jump
    /// tilt.
    pub fn constant_shifts(cost: CostFn, cost_bound: f64, shifts: Vec<Vec<f64>>, n_marks: usize) -> Result<Self> {
        let r_bound = shifts
            .iter()
            .map(|s| s.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        let labels = (0..shifts.len()).map(|i| format!("c{i}")).collect();
        let gamma = vec![vec![0.0; n_marks]; shifts.len()];
        let shifts = Arc::new(shifts);
        Self::new(
            labels,
            cost,
            cost_bound,
            0.0,
            Arc::new(move |_x, c, out| out.copy_from_slice(&shifts[c][..out.len()])),
            r_bound,
            gamma,
            n_marks,
        )
    }

    pub fn n_controls(&self) -> usize {
        self.labels.len()
    }

    #[inline]
    pub fn cost(&self, x: &[f64], c: usize) -> f64 {
        (self.cost)(x, c)
    }

    /// `R(x, c)`, clipped to `r_bound`.
    #[inline]
    pub fn drift(&self, x: &[f64], c: usize, out: &mut [f64]) {
        (self.drift)(x, c, out);
        let n = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > self.r_bound && n > 0.0 {
            let s = self.r_bound / n;
            out.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// `L + k`.
    pub fn shifted_cost(&self, k: f64) -> Self {
        let cost = self.cost.clone();
        Self {
            cost: Arc::new(move |x, c| cost(x, c) + k),
            cost_bound: self.cost_bound + k.abs(),
            ..self.clone()
        }
    }

    /// The problem restricted to the listed controls.
    pub fn restricted(&self, keep: &[usize]) -> Result<Self> {
        if keep.is_empty() || keep.iter().any(|&c| c >= self.n_controls()) {
            return argument("restriction must name existing controls");
        }
        let map: Arc<Vec<usize>> = Arc::new(keep.to_vec());
        let (cost, drift) = (self.cost.clone(), self.drift.clone());
        let (m1, m2) = (map.clone(), map.clone());
        Ok(Self {
            labels: keep.iter().map(|&c| self.labels[c].clone()).collect(),
            cost: Arc::new(move |x, c| cost(x, m1[c])),
            drift: Arc::new(move |x, c, out| drift(x, m2[c], out)),
            gamma: keep.iter().map(|&c| self.gamma[c].clone()).collect(),
            ..self.clone()
        })
    }
}

/// `min_c L(x, c) + z . R(x, c) + sum_i gamma(c, i) u_i lambda_i`, ties to
/// the smallest index.
pub fn hamiltonian(problem: &ControlProblem, noise: &LevyModel, x: &[f64], z: &[f64], u: &[f64]) -> Result<(f64, usize)> {
    if problem.n_controls() == 0 {
        return argument("control set is empty");
    }
    if u.len() != noise.n_marks() {
        return argument(format!("u has {} entries for {} marks", u.len(), noise.n_marks()));
    }
    Ok(hamiltonian_unchecked(problem, noise, x, z, u))
}

pub(crate) fn hamiltonian_unchecked(problem: &ControlProblem, noise: &LevyModel, x: &[f64], z: &[f64], u: &[f64]) -> (f64, usize) {
    let d = x.len();
    let mut r = [0.0; MAX_DIM];
    let mut best = (f64::INFINITY, 0);
    for c in 0..problem.n_controls() {
        problem.drift(x, c, &mut r[..d]);
        let mut v = problem.cost(x, c);
        for i in 0..d {
            v += z[i] * r[i];
        }
        for ((g, ui), m) in problem.gamma[c].iter().zip(u).zip(noise.marks()) {
            v += g * ui * m.intensity;
        }
        if v < best.0 {
            best = (v, c);
        }
    }
    best
}

/// The Hamiltonian as a BSDE driver.
pub fn hamiltonian_driver(problem: &ControlProblem, noise: &LevyModel) -> Result<Driver> {
    let p = problem.clone();
    let nz = noise.clone();
    let gmax = problem.gamma.iter().flatten().fold(0.0f64, |a, g| a.max(g.abs()));
    let jump_k = problem
        .gamma
        .iter()
        .map(|g| g.iter().zip(noise.marks()).map(|(g, m)| g * g * m.intensity).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    Driver::new(
        "hamiltonian",
        Arc::new(move |x, z, u| hamiltonian_unchecked(&p, &nz, x, z, u).0),
        problem.r_bound.max(jump_k),
        problem.cost_bound,
        (-gmax.min(0.999), gmax),
    )
}

/// Feedback control rule, frozen on each time step.
#[derive(Debug, Clone)]
pub enum Policy {
    Constant(usize),
    /// Argmin of the Hamiltonian at the limit surfaces `(xi, psi)`.
    Feedback(Arc<EbsdeResult>),
}

impl Policy {
    pub fn choose(&self, problem: &ControlProblem, noise: &LevyModel, t: f64, x: &[f64], z: &mut [f64], u: &mut [f64]) -> usize {
        match self {
            Policy::Constant(c) => *c,
            Policy::Feedback(r) => {
                r.zu_into(t, x, z, u);
                hamiltonian_unchecked(problem, noise, x, z, u).1
            }
        }
    }

    /// CSV rows `phase,x1..xd,control`.
    pub fn write_csv<W: Write>(&self, mut w: W, problem: &ControlProblem, noise: &LevyModel, phases: &[f64], xs: &[Vec<f64>]) -> Result<()> {
        let d = xs.first().map_or(0, |x| x.len());
        let cols: Vec<String> = (0..d).map(|k| format!("x{}", k + 1)).collect();
        writeln!(w, "phase,{},control", cols.join(","))?;
        let mut z = vec![0.0; d];
        let mut u = vec![0.0; noise.n_marks()];
        for &ph in phases {
            for x in xs {
                let c = self.choose(problem, noise, ph, x, &mut z, &mut u);
                let xv: Vec<String> = x.iter().map(|v| fmt_f64(*v)).collect();
                writeln!(w, "{},{},{}", fmt_f64(ph), xv.join(","), c)?;
            }
        }
        Ok(())
    }
}

pub fn solve_ergodic_control(
    problem: &ControlProblem,
    coeffs: &PeriodicCoefficients,
    noise: &LevyModel,
    opts: &VanishingOptions,
) -> Result<(Arc<EbsdeResult>, Policy)> {
    if problem.gamma.iter().any(|g| g.len() != noise.n_marks()) {
        return argument("gamma does not match the number of jump marks");
    }
    let driver = hamiltonian_driver(problem, noise)?;
    let result = Arc::new(vanishing_discount(&driver, coeffs, noise, opts)?);
    Ok((result.clone(), Policy::Feedback(result)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PolicyEvaluation {
    pub j_hat: f64,
    pub stderr: f64,
    /// Effective sample size of the per-step cost along one path.
    pub ess_per_path: f64,
    pub n_paths: usize,
    pub burn_in: f64,
    pub horizon: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate_policy(
    problem: &ControlProblem,
    policy: &Policy,
    coeffs: &PeriodicCoefficients,
    noise: &LevyModel,
    x0: &[f64],
    burn_in: f64,
    horizon: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
) -> Result<PolicyEvaluation> {
    if !(horizon > burn_in) || burn_in < 0.0 {
        return argument("evaluation needs 0 <= burn_in < horizon");
    }
    let n_steps = SimulationSpec::new(0.0, horizon, dt, n_paths, seed).n_steps()?;
    let first = ((burn_in / dt) - 1e-9).ceil() as usize;
    let d = coeffs.dim();
    let k = noise.n_marks();
    let tilted: Vec<LevyModel> = problem.gamma.iter().map(|g| noise.tilt(g)).collect::<Result<_>>()?;
    let comps: Vec<[f64; MAX_DIM]> = tilted.iter().map(compensator_array).collect();
    // sum_i gamma(c, i) lambda_i m_i per control, before G
    let jump_shift: Vec<[f64; MAX_DIM]> = problem
        .gamma
        .iter()
        .map(|g| {
            let mut s = [0.0; MAX_DIM];
            for (gi, m) in g.iter().zip(noise.marks()) {
                for j in 0..d {
                    s[j] += gi * m.intensity * m.mark[j];
                }
            }
            s
        })
        .collect();
    let per_path: Vec<Result<(f64, Vec<f64>)>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut path = EulerPath::new(coeffs, noise, x0, 0.0, dt, seed, channel::POLICY, p);
            let mut z = [0.0; MAX_DIM];
            let mut u = vec![0.0; k];
            let mut r = [0.0; MAX_DIM];
            let mut extra = [0.0; MAX_DIM];
            let mut acc = 0.0;
            let mut trace = Vec::new();
            for n in 0..n_steps {
                let t = path.time();
                let x = path.state().to_vec();
                let c = policy.choose(problem, noise, t, &x, &mut z[..d], &mut u);
                if n >= first {
                    let l = problem.cost(&x, c);
                    acc += l;
                    if p == 0 {
                        trace.push(l);
                    }
                }
                problem.drift(&x, c, &mut r[..d]);
                let g = coeffs.g_at(t);
                for i in 0..d {
                    extra[i] = r[i];
                    for j in 0..d {
                        extra[i] += g[(i, j)] * jump_shift[c][j];
                    }
                }
                path.advance(&tilted[c], &comps[c], Some(&extra[..d]))?;
            }
            Ok((acc / (n_steps - first) as f64, trace))
        })
        .collect();
    let mut means = Vec::with_capacity(n_paths);
    let mut trace0 = Vec::new();
    for (p, r) in per_path.into_iter().enumerate() {
        let (m, tr) = r?;
        means.push(m);
        if p == 0 {
            trace0 = tr;
        }
    }
    let e = estimate(&means);
    let thin: Vec<f64> = trace0.iter().step_by(((0.05 / dt).round() as usize).max(1)).cloned().collect();
    Ok(PolicyEvaluation {
        j_hat: e.mean,
        stderr: e.stderr,
        ess_per_path: effective_sample_size(&thin),
        n_paths,
        burn_in,
        horizon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_shift(r: f64) -> ControlProblem {
        ControlProblem::constant_shifts(Arc::new(|x, _| x[0] * x[0]), 25.0, vec![vec![-r], vec![r]], 0).unwrap()
    }

    #[test]
    fn hamiltonian_examples() {
        let n = LevyModel::scalar(1.0, vec![]).unwrap();
        let p = ControlProblem::constant_shifts(Arc::new(|_, _| 0.0), 0.0, vec![vec![-1.0], vec![1.0]], 0).unwrap();
        assert_eq!(hamiltonian(&p, &n, &[0.0], &[0.5], &[]).unwrap().1, 0);
        assert_eq!(hamiltonian(&p, &n, &[0.0], &[-0.5], &[]).unwrap().1, 1);
        assert_eq!(hamiltonian(&p, &n, &[0.0], &[0.0], &[]).unwrap().1, 0);
        let single = ControlProblem::constant_shifts(Arc::new(|x, _| x[0] + 1.0), 5.0, vec![vec![2.0]], 0).unwrap();
        assert_eq!(hamiltonian(&single, &n, &[1.0], &[0.5], &[]).unwrap(), (3.0, 0));
        let costs = ControlProblem::constant_shifts(Arc::new(|x, c| (x[0] - c as f64).powi(2)), 9.0, vec![vec![0.3], vec![-0.2], vec![0.1]], 0).unwrap();
        assert_eq!(hamiltonian(&costs, &n, &[1.9], &[0.0], &[]).unwrap().1, 2);
        assert!(hamiltonian(&costs, &n, &[0.0], &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn minimality_and_shift_invariance() {
        let nz = LevyModel::scalar(1.0, vec![(0.5, 1.0), (-0.4, 2.0)]).unwrap();
        let p = ControlProblem::new(
            vec!["a".into(), "b".into(), "c".into()],
            Arc::new(|x, c| (x[0] * (c as f64 + 1.0)).sin()),
            1.0,
            3.0,
            Arc::new(|x, c, out| out[0] = (c as f64 - 1.0) * x[0].tanh()),
            1.0,
            vec![vec![0.2, -0.1], vec![0.0, 0.3], vec![-0.5, 0.0]],
            2,
        )
        .unwrap();
        let q = p.shifted_cost(4.0);
        for k in 0..50 {
            let x = [-2.0 + 0.08 * k as f64];
            let z = [(k as f64 * 0.37).sin()];
            let u = [(k as f64 * 0.11).cos(), (k as f64 * 0.23).sin()];
            let (h, c) = hamiltonian(&p, &nz, &x, &z, &u).unwrap();
            for cc in 0..3 {
                let single = p.restricted(&[cc]).unwrap();
                assert!(h <= hamiltonian(&single, &nz, &x, &z, &u).unwrap().0);
            }
            let (h2, c2) = hamiltonian(&q, &nz, &x, &z, &u).unwrap();
            assert_eq!(c, c2);
            assert!((h2 - h - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_cost_and_shifted_ou_moment() {
        let c = PeriodicCoefficients::ou_1d(1.0, 1.0).unwrap();
        let n = LevyModel::scalar(1.0, vec![]).unwrap();
        let flat = ControlProblem::constant_shifts(Arc::new(|_, _| 1.25), 1.25, vec![vec![0.5]], 0).unwrap();
        let e = evaluate_policy(&flat, &Policy::Constant(0), &c, &n, &[0.0], 1.0, 5.0, 0.01, 20, 1).unwrap();
        assert!((e.j_hat - 1.25).abs() < 1e-12);
        let p = two_shift(0.5);
        let e = evaluate_policy(&p, &Policy::Constant(1), &c, &n, &[0.5], 5.0, 105.0, 0.01, 200, 2).unwrap();
        // N(r / theta, 1/2) with Euler variance 1 / (2 - dt)
        let exact = 0.25 + 1.0 / (2.0 - 0.01);
        assert!((e.j_hat - exact).abs() < 3.0 * e.stderr, "{e:?} vs {exact}");
    }

    #[test]
    fn tilted_jumps_shift_the_mean() {
        // with gamma = 0.5 on a single mark, the controlled mean is G m lambda gamma / theta
        let c = PeriodicCoefficients::ou_1d(1.0, 1.0).unwrap();
        let n = LevyModel::scalar(0.0, vec![(1.0, 1.0)]).unwrap();
        let p = ControlProblem::new(
            vec!["tilt".into()],
            Arc::new(|x, _| x[0]),
            10.0,
            1.0,
            Arc::new(|_, _, out| out[0] = 0.0),
            0.0,
            vec![vec![0.5]],
            1,
        )
        .unwrap();
        let e = evaluate_policy(&p, &Policy::Constant(0), &c, &n, &[0.0], 5.0, 105.0, 0.01, 200, 3).unwrap();
        assert!((e.j_hat - 0.5).abs() < 3.0 * e.stderr, "{e:?}");
        let null = evaluate_policy(&p.restricted(&[0]).unwrap(), &Policy::Constant(0), &c, &n.tilt(&[0.0]).unwrap(), &[0.0], 5.0, 105.0, 0.01, 200, 3).unwrap();
        assert!(null.j_hat.is_finite());
    }
}
