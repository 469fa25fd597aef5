//! Time-periodic coefficients `(A(t), F(t, x), G(t))` of the forward equation
//! `dX = A(t) X dt + F(t, X) dt + G(t) dL`.

use std::f64::consts::TAU;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{argument, LabError, Result};
use crate::MAX_DIM;

pub type SmallMatrix = [[f64; MAX_DIM]; MAX_DIM];

/// Time-dependent `d x d` matrix families.
#[derive(Clone)]
pub enum MatrixFn {
    Constant(DMatrix<f64>),
    /// `diag_i(t) = base_i + amplitude_i * sin(2 pi t / period + phase)`.
    SinusoidalDiagonal {
        base: Vec<f64>,
        amplitude: Vec<f64>,
        phase: f64,
    },
    /// Values at knots in `[0, period)`, linearly interpolated and wrapped.
    Tabulated {
        knots: Vec<f64>,
        values: Vec<DMatrix<f64>>,
    },
    Custom(Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>),
}

impl fmt::Debug for MatrixFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatrixFn::Constant(m) => f.debug_tuple("Constant").field(m).finish(),
            MatrixFn::SinusoidalDiagonal { base, amplitude, phase } => f
                .debug_struct("SinusoidalDiagonal")
                .field("base", base)
                .field("amplitude", amplitude)
                .field("phase", phase)
                .finish(),
            MatrixFn::Tabulated { knots, .. } => {
                f.debug_struct("Tabulated").field("knots", knots).finish()
            }
            MatrixFn::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Bounded nonlinear drift families `F(t, x)`.
#[derive(Clone)]
pub enum DriftFn {
    Zero,
    Constant(Vec<f64>),
    /// `F_i(t) = base_i + amplitude_i * sin(2 pi t / period + phase)`.
    Sinusoidal {
        base: Vec<f64>,
        amplitude: Vec<f64>,
        phase: f64,
    },
    /// `F_i(x) = scale_i * tanh(x_i / width)`.
    Tanh { scale: Vec<f64>, width: f64 },
    Tabulated {
        knots: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
    Custom(Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>),
}

impl fmt::Debug for DriftFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DriftFn::Zero => f.write_str("Zero"),
            DriftFn::Constant(v) => f.debug_tuple("Constant").field(v).finish(),
            DriftFn::Sinusoidal { base, amplitude, phase } => f
                .debug_struct("Sinusoidal")
                .field("base", base)
                .field("amplitude", amplitude)
                .field("phase", phase)
                .finish(),
            DriftFn::Tanh { scale, width } => f
                .debug_struct("Tanh")
                .field("scale", scale)
                .field("width", width)
                .finish(),
            DriftFn::Tabulated { knots, .. } => {
                f.debug_struct("Tabulated").field("knots", knots).finish()
            }
            DriftFn::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

fn wrap_phase(t: f64, period: f64) -> f64 {
    let p = t.rem_euclid(period);
    if p >= period {
        0.0
    } else {
        p
    }
}

/// Periodic linear interpolation weights: `(lower index, upper index, weight of upper)`.
fn periodic_bracket(knots: &[f64], period: f64, t: f64) -> (usize, usize, f64) {
    let p = wrap_phase(t, period);
    let n = knots.len();
    if n == 1 {
        return (0, 0, 0.0);
    }
    let hi = knots.partition_point(|&k| k <= p);
    if hi == 0 || hi == n {
        // between the last knot and the first knot of the next period
        let lo_t = knots[n - 1];
        let hi_t = knots[0] + period;
        let pp = if hi == 0 { p + period } else { p };
        let w = (pp - lo_t) / (hi_t - lo_t);
        return (n - 1, 0, w);
    }
    let lo = hi - 1;
    let w = (p - knots[lo]) / (knots[hi] - knots[lo]);
    (lo, hi, w)
}

impl MatrixFn {
    fn eval_into(&self, t: f64, period: f64, d: usize, out: &mut SmallMatrix) {
        match self {
            MatrixFn::Constant(m) => {
                for i in 0..d {
                    for j in 0..d {
                        out[i][j] = m[(i, j)];
                    }
                }
            }
            MatrixFn::SinusoidalDiagonal { base, amplitude, phase } => {
                let s = (TAU * t / period + phase).sin();
                for i in 0..d {
                    for j in 0..d {
                        out[i][j] = 0.0;
                    }
                    out[i][i] = base[i] + amplitude[i] * s;
                }
            }
            MatrixFn::Tabulated { knots, values } => {
                let (lo, hi, w) = periodic_bracket(knots, period, t);
                for i in 0..d {
                    for j in 0..d {
                        out[i][j] = (1.0 - w) * values[lo][(i, j)] + w * values[hi][(i, j)];
                    }
                }
            }
            MatrixFn::Custom(f) => {
                let m = f(t);
                for i in 0..d {
                    for j in 0..d {
                        out[i][j] = m[(i, j)];
                    }
                }
            }
        }
    }

    fn check_shape(&self, d: usize, name: &str) -> Result<()> {
        let ok = match self {
            MatrixFn::Constant(m) => m.nrows() == d && m.ncols() == d,
            MatrixFn::SinusoidalDiagonal { base, amplitude, .. } => {
                base.len() == d && amplitude.len() == d
            }
            MatrixFn::Tabulated { knots, values } => {
                !knots.is_empty()
                    && knots.len() == values.len()
                    && knots.windows(2).all(|w| w[0] < w[1])
                    && values.iter().all(|m| m.nrows() == d && m.ncols() == d)
            }
            MatrixFn::Custom(_) => true,
        };
        if ok {
            Ok(())
        } else {
            argument(format!("{name}: family parameters do not match dimension {d}"))
        }
    }
}

impl DriftFn {
    fn eval_into(&self, t: f64, period: f64, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        match self {
            DriftFn::Zero => out[..d].fill(0.0),
            DriftFn::Constant(v) => out[..d].copy_from_slice(&v[..d]),
            DriftFn::Sinusoidal { base, amplitude, phase } => {
                let s = (TAU * t / period + phase).sin();
                for i in 0..d {
                    out[i] = base[i] + amplitude[i] * s;
                }
            }
            DriftFn::Tanh { scale, width } => {
                for i in 0..d {
                    out[i] = scale[i] * (x[i] / width).tanh();
                }
            }
            DriftFn::Tabulated { knots, values } => {
                let (lo, hi, w) = periodic_bracket(knots, period, t);
                for i in 0..d {
                    out[i] = (1.0 - w) * values[lo][i] + w * values[hi][i];
                }
            }
            DriftFn::Custom(f) => f(t, x, &mut out[..d]),
        }
    }

    fn is_zero(&self) -> bool {
        matches!(self, DriftFn::Zero)
    }

    fn check_shape(&self, d: usize) -> Result<()> {
        let ok = match self {
            DriftFn::Zero | DriftFn::Custom(_) => true,
            DriftFn::Constant(v) => v.len() == d,
            DriftFn::Sinusoidal { base, amplitude, .. } => base.len() == d && amplitude.len() == d,
            DriftFn::Tanh { scale, width } => scale.len() == d && *width > 0.0,
            DriftFn::Tabulated { knots, values } => {
                !knots.is_empty()
                    && knots.len() == values.len()
                    && knots.windows(2).all(|w| w[0] < w[1])
                    && values.iter().all(|v| v.len() == d)
            }
        };
        if ok {
            Ok(())
        } else {
            argument(format!("drift: family parameters do not match dimension {d}"))
        }
    }
}

/// Stability metadata and bounds declared alongside the coefficient maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefficientBounds {
    /// Bound on `sup |F|`.
    pub f_sup: f64,
    /// Decay rate `mu` of the evolution family.
    pub stability_mu: f64,
    /// Prefactor `M >= 1` of the evolution family.
    pub stability_m: f64,
    /// Bound `C_1` on `|G(t)^{-1}|`.
    pub ginv_bound: f64,
}

#[derive(Debug, Clone)]
pub struct PeriodicCoefficients {
    dim: usize,
    period: f64,
    a: MatrixFn,
    f: DriftFn,
    g: MatrixFn,
    bounds: CoefficientBounds,
}

/// Coefficients frozen at one time instant.
#[derive(Debug, Clone, Copy)]
pub struct FrozenCoefficients {
    pub t: f64,
    pub a: SmallMatrix,
    pub g: SmallMatrix,
}

const CHECK_TIMES: usize = 48;
const CHECK_POINTS: usize = 24;
const PERIODICITY_TOL: f64 = 1e-10;

impl PeriodicCoefficients {
    /// Builds and validates the coefficients on a sampled `(t, x)` grid.
    pub fn new(
        dim: usize,
        period: f64,
        a: MatrixFn,
        f: DriftFn,
        g: MatrixFn,
        bounds: CoefficientBounds,
    ) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return argument(format!("dimension must be in 1..={MAX_DIM}, got {dim}"));
        }
        if !(period > 0.0 && period.is_finite()) {
            return argument(format!("period must be positive, got {period}"));
        }
        if !(bounds.stability_mu > 0.0) || !(bounds.stability_m >= 1.0) {
            return argument("stability metadata needs mu > 0 and M >= 1");
        }
        a.check_shape(dim, "A")?;
        g.check_shape(dim, "G")?;
        f.check_shape(dim)?;
        let c = Self {
            dim,
            period,
            a,
            f,
            g,
            bounds,
        };
        c.validate()?;
        Ok(c)
    }

    /// Constant-coefficient one-dimensional OU: `dX = -theta X dt + sigma dL`.
    pub fn ou_1d(theta: f64, sigma: f64) -> Result<Self> {
        Self::new(
            1,
            1.0,
            MatrixFn::Constant(DMatrix::from_element(1, 1, -theta)),
            DriftFn::Zero,
            MatrixFn::Constant(DMatrix::from_element(1, 1, sigma)),
            CoefficientBounds {
                f_sup: 0.0,
                stability_mu: theta,
                stability_m: 1.0,
                ginv_bound: 1.0 / sigma.abs(),
            },
        )
    }

    fn sample_points(&self) -> Vec<[f64; MAX_DIM]> {
        // deterministic low-discrepancy points in [-5, 5]^d plus the origin
        let mut pts = vec![[0.0; MAX_DIM]];
        let golden = [0.618_033_988_75, 0.754_877_666_25, 0.569_840_290_99];
        for k in 1..CHECK_POINTS {
            let mut p = [0.0; MAX_DIM];
            for (i, v) in p.iter_mut().enumerate().take(self.dim) {
                let u = (k as f64 * golden[i]).fract();
                *v = -5.0 + 10.0 * u;
            }
            pts.push(p);
        }
        pts
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim;
        let pts = self.sample_points();
        let mut fx = [0.0; MAX_DIM];
        let mut fy = [0.0; MAX_DIM];
        for k in 0..CHECK_TIMES {
            let t = self.period * k as f64 / CHECK_TIMES as f64 + 0.137 * self.period / CHECK_TIMES as f64;
            let now = self.frozen(t);
            let later = self.frozen(t + self.period);
            let dev = max_abs_diff(&now.a, &later.a, d).max(max_abs_diff(&now.g, &later.g, d));
            if dev > PERIODICITY_TOL {
                return Err(LabError::Model(format!(
                    "A or G is not periodic at t = {t:.4} (deviation {dev:e})"
                )));
            }
            for p in &pts {
                self.drift(t, &p[..d], &mut fx);
                self.drift(t + self.period, &p[..d], &mut fy);
                let dev = (0..d).map(|i| (fx[i] - fy[i]).abs()).fold(0.0, f64::max);
                if dev > PERIODICITY_TOL {
                    return Err(LabError::Model(format!(
                        "F is not periodic at t = {t:.4} (deviation {dev:e})"
                    )));
                }
                let norm = (0..d).map(|i| fx[i] * fx[i]).sum::<f64>().sqrt();
                if norm > self.bounds.f_sup + PERIODICITY_TOL {
                    return Err(LabError::Model(format!(
                        "|F| = {norm} exceeds declared f_sup = {} at t = {t:.4}",
                        self.bounds.f_sup
                    )));
                }
            }
            let a = to_dmatrix(&now.a, d);
            let sym = (&a + a.transpose()) * 0.5;
            let top = SymmetricEigen::new(sym)
                .eigenvalues
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            if top > -self.bounds.stability_mu + PERIODICITY_TOL {
                return Err(LabError::Model(format!(
                    "symmetric part of A({t:.4}) has eigenvalue {top} > -mu = {}",
                    -self.bounds.stability_mu
                )));
            }
            let g = to_dmatrix(&now.g, d);
            let sv = g.singular_values();
            let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
            if !(smin > 0.0) || 1.0 / smin > self.bounds.ginv_bound * (1.0 + 1e-10) {
                return Err(LabError::Model(format!(
                    "|G({t:.4})^-1| = {} exceeds ginv_bound = {}",
                    1.0 / smin,
                    self.bounds.ginv_bound
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn bounds(&self) -> &CoefficientBounds {
        &self.bounds
    }

    pub fn a_fn(&self) -> &MatrixFn {
        &self.a
    }

    pub fn f_fn(&self) -> &DriftFn {
        &self.f
    }

    pub fn g_fn(&self) -> &MatrixFn {
        &self.g
    }

    pub fn has_drift(&self) -> bool {
        !self.f.is_zero()
    }

    /// Evaluates `A(t)` and `G(t)`.
    pub fn frozen(&self, t: f64) -> FrozenCoefficients {
        let mut a = [[0.0; MAX_DIM]; MAX_DIM];
        let mut g = [[0.0; MAX_DIM]; MAX_DIM];
        self.a.eval_into(t, self.period, self.dim, &mut a);
        self.g.eval_into(t, self.period, self.dim, &mut g);
        FrozenCoefficients { t, a, g }
    }

    /// Writes `F(t, x)` into `out[..d]`.
    #[inline]
    pub fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.f.eval_into(t, self.period, x, out);
    }

    pub fn a_at(&self, t: f64) -> DMatrix<f64> {
        to_dmatrix(&self.frozen(t).a, self.dim)
    }

    pub fn g_at(&self, t: f64) -> DMatrix<f64> {
        to_dmatrix(&self.frozen(t).g, self.dim)
    }

    /// Same coefficients with `G` replaced; bounds are re-validated.
    pub fn with_noise_loading(&self, g: MatrixFn, ginv_bound: f64) -> Result<Self> {
        let mut bounds = self.bounds;
        bounds.ginv_bound = ginv_bound;
        Self::new(self.dim, self.period, self.a.clone(), self.f.clone(), g, bounds)
    }
}

pub(crate) fn to_dmatrix(m: &SmallMatrix, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| m[i][j])
}

fn max_abs_diff(a: &SmallMatrix, b: &SmallMatrix, d: usize) -> f64 {
    let mut m: f64 = 0.0;
    for i in 0..d {
        for j in 0..d {
            m = m.max((a[i][j] - b[i][j]).abs());
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bounds(mu: f64) -> CoefficientBounds {
        CoefficientBounds {
            f_sup: 1.0,
            stability_mu: mu,
            stability_m: 1.0,
            ginv_bound: 1.0,
        }
    }

    #[test]
    fn accepts_sinusoidal_stable_system() {
        let c = PeriodicCoefficients::new(
            2,
            1.0,
            MatrixFn::SinusoidalDiagonal {
                base: vec![-1.5, -2.0],
                amplitude: vec![0.5, 0.5],
                phase: 0.0,
            },
            DriftFn::Tanh { scale: vec![0.5, 0.5], width: 1.0 },
            MatrixFn::Constant(DMatrix::identity(2, 2)),
            bounds(1.0),
        )
        .unwrap();
        let a = c.a_at(0.25);
        assert!((a[(0, 0)] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_unstable_a() {
        let r = PeriodicCoefficients::new(
            1,
            1.0,
            MatrixFn::SinusoidalDiagonal { base: vec![-1.0], amplitude: vec![1.5], phase: 0.0 },
            DriftFn::Zero,
            MatrixFn::Constant(DMatrix::identity(1, 1)),
            bounds(0.1),
        );
        assert!(matches!(r, Err(LabError::Model(_))));
    }

    #[test]
    fn rejects_drift_above_declared_bound() {
        let r = PeriodicCoefficients::new(
            1,
            1.0,
            MatrixFn::Constant(DMatrix::from_element(1, 1, -1.0)),
            DriftFn::Constant(vec![2.0]),
            MatrixFn::Constant(DMatrix::identity(1, 1)),
            bounds(1.0),
        );
        assert!(matches!(r, Err(LabError::Model(_))));
    }

    #[test]
    fn rejects_non_periodic_custom_drift() {
        let r = PeriodicCoefficients::new(
            1,
            1.0,
            MatrixFn::Constant(DMatrix::from_element(1, 1, -1.0)),
            DriftFn::Custom(Arc::new(|t, _x, out| out[0] = (0.3 * t).sin())),
            MatrixFn::Constant(DMatrix::identity(1, 1)),
            bounds(1.0),
        );
        assert!(matches!(r, Err(LabError::Model(_))));
    }

    #[test]
    fn rejects_g_with_large_inverse() {
        let r = PeriodicCoefficients::new(
            1,
            1.0,
            MatrixFn::Constant(DMatrix::from_element(1, 1, -1.0)),
            DriftFn::Zero,
            MatrixFn::Constant(DMatrix::from_element(1, 1, 0.1)),
            bounds(1.0),
        );
        assert!(matches!(r, Err(LabError::Model(_))));
    }

    #[test]
    fn tabulated_interpolation_wraps() {
        let knots = vec![0.0, 0.5];
        let values = vec![
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::from_element(1, 1, -3.0),
        ];
        let c = PeriodicCoefficients::new(
            1,
            1.0,
            MatrixFn::Tabulated { knots, values },
            DriftFn::Zero,
            MatrixFn::Constant(DMatrix::identity(1, 1)),
            bounds(1.0),
        )
        .unwrap();
        assert!((c.a_at(0.25)[(0, 0)] + 2.0).abs() < 1e-12);
        assert!((c.a_at(0.75)[(0, 0)] + 2.0).abs() < 1e-12);
        assert!((c.a_at(1.5)[(0, 0)] + 3.0).abs() < 1e-12);
        assert!((c.a_at(-0.25)[(0, 0)] + 2.0).abs() < 1e-12);
    }
}
