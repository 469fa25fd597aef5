//! Least-squares conditional expectations on polynomial bases.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::MAX_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisFamily {
    /// Monomials of total degree at most `degree`.
    Polynomial,
    /// Products with every coordinate degree at most `degree`.
    TensorPolynomial,
}

/// Regression basis. With `normalize`, coordinates are standardised per time
/// step and expanded in probabilists' Hermite polynomials; otherwise raw
/// monomials are used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegressionBasis {
    pub family: BasisFamily,
    pub degree: usize,
    pub normalize: bool,
}

impl RegressionBasis {
    pub fn polynomial(degree: usize) -> Self {
        Self {
            family: BasisFamily::Polynomial,
            degree,
            normalize: true,
        }
    }

    pub fn tensor(degree: usize) -> Self {
        Self {
            family: BasisFamily::TensorPolynomial,
            degree,
            normalize: true,
        }
    }

    fn exponents(&self, active: &[usize]) -> Vec<[u8; MAX_DIM]> {
        let p = self.degree as u8;
        let mut out = Vec::new();
        let mut e = [0u8; MAX_DIM];
        fn rec(
            family: BasisFamily,
            p: u8,
            active: &[usize],
            k: usize,
            used: u8,
            e: &mut [u8; MAX_DIM],
            out: &mut Vec<[u8; MAX_DIM]>,
        ) {
            if k == active.len() {
                out.push(*e);
                return;
            }
            let cap = match family {
                BasisFamily::Polynomial => p - used,
                BasisFamily::TensorPolynomial => p,
            };
            for deg in 0..=cap {
                e[active[k]] = deg;
                rec(family, p, active, k + 1, used + deg, e, out);
            }
            e[active[k]] = 0;
        }
        rec(self.family, p, active, 0, 0, &mut e, &mut out);
        out.sort_by_key(|e| (e.iter().map(|&v| v as u32).sum::<u32>(), std::cmp::Reverse(*e)));
        out
    }
}

/// Basis evaluation map frozen at one time step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepBasis {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    pub exponents: Vec<[u8; MAX_DIM]>,
    pub normalize: bool,
}

impl StepBasis {
    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    /// Writes basis values at `x` into `out[..len]`.
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.center.len();
        let p = self
            .exponents
            .iter()
            .flat_map(|e| e.iter())
            .copied()
            .max()
            .unwrap_or(0) as usize;
        let mut table = [[0.0; 8]; MAX_DIM];
        for k in 0..d {
            let z = if self.normalize {
                (x[k] - self.center[k]) / self.scale[k]
            } else {
                x[k]
            };
            table[k][0] = 1.0;
            if p >= 1 {
                table[k][1] = z;
            }
            for j in 2..=p.min(7) {
                table[k][j] = if self.normalize {
                    z * table[k][j - 1] - (j - 1) as f64 * table[k][j - 2]
                } else {
                    z * table[k][j - 1]
                };
            }
        }
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            let mut v = 1.0;
            for k in 0..d {
                v *= table[k][e[k] as usize];
            }
            *o = v;
        }
    }

    pub fn eval(&self, coeffs: &[f64], x: &[f64]) -> f64 {
        let mut buf = [0.0; 128];
        self.eval_into(x, &mut buf[..self.len()]);
        buf[..self.len()].iter().zip(coeffs).map(|(a, b)| a * b).sum()
    }
}

/// Design matrix for one step with its factorised Gram matrix.
///
/// Optional per-row multipliers `m_j` extend the column set to
/// `phi(x)`, `phi(x) m_1`, ..., `phi(x) m_J`; coefficients are returned in
/// blocks of the basis length, block `j + 1` belonging to `m_j`.
pub struct Design {
    pub basis: StepBasis,
    n_rows: usize,
    phi: Vec<f64>,
    multipliers: Vec<Vec<f64>>,
    mult_scale: Vec<f64>,
    chol: Cholesky<f64, nalgebra::Dyn>,
    pub condition: f64,
}

const SPREAD_TOL: f64 = 1e-12;
pub const CONDITION_WARN: f64 = 1e10;
const CHUNK: usize = 512;

impl Design {
    /// Builds the design on `points` (`[row][dim]`). Coordinates with no
    /// spread are dropped, which reduces a point mass to the constant basis.
    pub fn new(points: &[f64], dim: usize, basis: &RegressionBasis, step: usize) -> Result<Self> {
        Self::with_multipliers(points, dim, basis, Vec::new(), step)
    }

    pub fn with_multipliers(
        points: &[f64],
        dim: usize,
        basis: &RegressionBasis,
        multipliers: Vec<Vec<f64>>,
        step: usize,
    ) -> Result<Self> {
        let n = points.len() / dim;
        let mut center = vec![0.0; dim];
        let mut scale = vec![1.0; dim];
        let mut active = Vec::new();
        for k in 0..dim {
            let mut s = 0.0;
            let mut s2 = 0.0;
            for x in points.chunks(dim) {
                s += x[k];
            }
            let m = s / n as f64;
            for x in points.chunks(dim) {
                s2 += (x[k] - m) * (x[k] - m);
            }
            let sd = (s2 / n as f64).sqrt();
            center[k] = m;
            if sd > SPREAD_TOL * (1.0 + m.abs()) {
                scale[k] = sd;
                active.push(k);
            }
        }
        if !basis.normalize {
            center.iter_mut().for_each(|c| *c = 0.0);
            scale.iter_mut().for_each(|s| *s = 1.0);
        }
        let exponents = basis.exponents(&active);
        let step_basis = StepBasis {
            center,
            scale,
            exponents,
            normalize: basis.normalize,
        };
        let kb = step_basis.len();
        let mut phi = vec![0.0; n * kb];
        for (row, x) in phi.chunks_mut(kb).zip(points.chunks(dim)) {
            step_basis.eval_into(x, row);
        }
        let mut multipliers = multipliers;
        let mut mult_scale = Vec::with_capacity(multipliers.len());
        for m in multipliers.iter_mut() {
            let rms = (m.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
            let s = if rms > 0.0 { rms } else { 1.0 };
            m.iter_mut().for_each(|v| *v /= s);
            mult_scale.push(s);
        }
        let kdim = kb * (1 + multipliers.len());
        let partial: Vec<DMatrix<f64>> = (0..n)
            .collect::<Vec<_>>()
            .par_chunks(CHUNK)
            .map(|rows| {
                let mut g = DMatrix::<f64>::zeros(kdim, kdim);
                let mut v = vec![0.0; kdim];
                for &r in rows {
                    extended_row(&phi[r * kb..(r + 1) * kb], &multipliers, r, &mut v);
                    for i in 0..kdim {
                        let vi = v[i];
                        if vi == 0.0 {
                            continue;
                        }
                        for j in i..kdim {
                            g[(i, j)] += vi * v[j];
                        }
                    }
                }
                g
            })
            .collect();
        let mut gram = DMatrix::<f64>::zeros(kdim, kdim);
        for g in &partial {
            gram += g;
        }
        for i in 0..kdim {
            for j in 0..i {
                gram[(i, j)] = gram[(j, i)];
            }
        }
        gram /= n as f64;
        let eig = SymmetricEigen::new(gram.clone()).eigenvalues;
        let lmax = eig.iter().cloned().fold(0.0, f64::max);
        let lmin = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(lmin > lmax * 1e-24) {
            return Err(LabError::SingularRegression {
                step,
                detail: format!("Gram eigenvalues in [{lmin:e}, {lmax:e}]"),
            });
        }
        let condition = (lmax / lmin).sqrt();
        if condition > CONDITION_WARN {
            log::warn!("regression at step {step} has condition number {condition:e}");
        }
        let chol = Cholesky::new(gram).ok_or_else(|| LabError::SingularRegression {
            step,
            detail: "Gram matrix is not positive definite".into(),
        })?;
        Ok(Self {
            basis: step_basis,
            n_rows: n,
            phi,
            multipliers,
            mult_scale,
            chol,
            condition,
        })
    }

    pub fn n_basis(&self) -> usize {
        self.basis.len()
    }

    pub fn n_blocks(&self) -> usize {
        1 + self.multipliers.len()
    }

    /// Least-squares coefficients for one response vector, in blocks of
    /// `n_basis()` referring to the unscaled multipliers.
    pub fn solve(&self, y: &[f64]) -> Vec<f64> {
        let kb = self.n_basis();
        let kdim = kb * self.n_blocks();
        let partial: Vec<Vec<f64>> = (0..self.n_rows)
            .collect::<Vec<_>>()
            .par_chunks(CHUNK)
            .map(|rows| {
                let mut acc = vec![0.0; kdim];
                let mut v = vec![0.0; kdim];
                for &r in rows {
                    extended_row(&self.phi[r * kb..(r + 1) * kb], &self.multipliers, r, &mut v);
                    let yr = y[r];
                    for (a, b) in acc.iter_mut().zip(&v) {
                        *a += b * yr;
                    }
                }
                acc
            })
            .collect();
        let mut rhs = DVector::<f64>::zeros(kdim);
        for p in &partial {
            for (i, v) in p.iter().enumerate() {
                rhs[i] += v;
            }
        }
        rhs /= self.n_rows as f64;
        let mut c = self.chol.solve(&rhs).as_slice().to_vec();
        for (j, s) in self.mult_scale.iter().enumerate() {
            c[(j + 1) * kb..(j + 2) * kb].iter_mut().for_each(|v| *v /= s);
        }
        c
    }

    /// Value of the basis part (block 0) of `coeffs` on row `r`.
    #[inline]
    pub fn fitted(&self, coeffs: &[f64], r: usize) -> f64 {
        let k = self.n_basis();
        self.phi[r * k..(r + 1) * k]
            .iter()
            .zip(coeffs)
            .map(|(a, b)| a * b)
            .sum()
    }
}

fn extended_row(phi: &[f64], multipliers: &[Vec<f64>], r: usize, out: &mut [f64]) {
    let kb = phi.len();
    out[..kb].copy_from_slice(phi);
    for (j, m) in multipliers.iter().enumerate() {
        let mr = m[r];
        for (o, p) in out[(j + 1) * kb..(j + 2) * kb].iter_mut().zip(phi) {
            *o = p * mr;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_sizes() {
        let p = RegressionBasis::polynomial(3);
        assert_eq!(p.exponents(&[0]).len(), 4);
        assert_eq!(p.exponents(&[0, 1]).len(), 10);
        assert_eq!(RegressionBasis::tensor(2).exponents(&[0, 1]).len(), 9);
        assert_eq!(p.exponents(&[]).len(), 1);
    }

    #[test]
    fn recovers_cubic_exactly() {
        let xs: Vec<f64> = (0..200).map(|i| -2.0 + 4.0 * i as f64 / 199.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 - x + 0.5 * x * x * x).collect();
        for normalize in [true, false] {
            let basis = RegressionBasis { normalize, ..RegressionBasis::polynomial(3) };
            let d = Design::new(&xs, 1, &basis, 0).unwrap();
            let c = d.solve(&ys);
            for (i, y) in ys.iter().enumerate() {
                assert!((d.fitted(&c, i) - y).abs() < 1e-9);
            }
            assert!((d.basis.eval(&c, &[0.3]) - (1.0 - 0.3 + 0.5 * 0.027)).abs() < 1e-9);
        }
    }

    #[test]
    fn point_mass_reduces_to_mean() {
        let xs = vec![1.5; 10];
        let ys: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let d = Design::new(&xs, 1, &RegressionBasis::polynomial(3), 0).unwrap();
        assert_eq!(d.n_basis(), 1);
        assert!((d.solve(&ys)[0] - 4.5).abs() < 1e-12);
    }

    #[test]
    fn collinear_points_are_singular() {
        // two distinct support points cannot identify a cubic
        let xs: Vec<f64> = (0..20).map(|i| if i % 2 == 0 { 0.0 } else { 1.0 }).collect();
        let r = Design::new(&xs, 1, &RegressionBasis::polynomial(3), 7);
        assert!(matches!(r, Err(LabError::SingularRegression { step: 7, .. })));
    }

    #[test]
    fn multiplier_blocks_recover_products() {
        let n = 400;
        let xs: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect();
        let m: Vec<f64> = (0..n).map(|i| if (i * 7) % 3 == 0 { 0.02 } else { -0.01 }).collect();
        let ys: Vec<f64> = xs.iter().zip(&m).map(|(x, w)| 1.0 + x + (2.0 - x * x) * w).collect();
        let d = Design::with_multipliers(&xs, 1, &RegressionBasis::polynomial(2), vec![m.clone()], 0).unwrap();
        let c = d.solve(&ys);
        assert_eq!(c.len(), 6);
        assert!((d.basis.eval(&c[..3], &[0.4]) - 1.4).abs() < 1e-8);
        assert!((d.basis.eval(&c[3..], &[0.4]) - (2.0 - 0.16)).abs() < 1e-8);
    }
}
