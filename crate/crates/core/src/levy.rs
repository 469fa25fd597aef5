//! Driving Levy martingale: a Q-Brownian motion plus a finite-activity
//! compensated compound Poisson part with marks `m_i` and rates `lambda_i`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{argument, LabError, Result};
use crate::rng::PathStream;
use crate::MAX_DIM;

const PSD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpMark {
    pub mark: Vec<f64>,
    pub intensity: f64,
}

/// One increment of the driving noise over a step of length `dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct Increment {
    pub dw: Vec<f64>,
    pub jump_counts: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct LevyModel {
    dim: usize,
    diffusion_cov: DMatrix<f64>,
    /// `S` with `S S^T = Q`, used to colour standard normals.
    cov_root: DMatrix<f64>,
    marks: Vec<JumpMark>,
}

impl LevyModel {
    pub fn new(diffusion_cov: DMatrix<f64>, marks: Vec<JumpMark>) -> Result<Self> {
        let dim = diffusion_cov.nrows();
        if dim == 0 || dim > MAX_DIM || diffusion_cov.ncols() != dim {
            return argument(format!(
                "covariance must be square with 1 <= d <= {MAX_DIM}, got {}x{}",
                diffusion_cov.nrows(),
                diffusion_cov.ncols()
            ));
        }
        let asym = (&diffusion_cov - diffusion_cov.transpose()).abs().max();
        if asym > PSD_TOL {
            return Err(LabError::Model(format!(
                "diffusion covariance is not symmetric (max asymmetry {asym:e})"
            )));
        }
        let eig = SymmetricEigen::new(diffusion_cov.clone());
        if let Some(&min) = eig
            .eigenvalues
            .iter()
            .min_by(|a, b| a.total_cmp(b))
        {
            if min < -PSD_TOL {
                return Err(LabError::Model(format!(
                    "diffusion covariance has negative eigenvalue {min:e}"
                )));
            }
        }
        let sqrt_vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        let cov_root = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals);

        for (i, m) in marks.iter().enumerate() {
            if m.mark.len() != dim {
                return argument(format!("jump mark {i} has dimension {}, expected {dim}", m.mark.len()));
            }
            if !(m.intensity > 0.0 && m.intensity.is_finite()) {
                return Err(LabError::Model(format!(
                    "jump mark {i} has non-positive intensity {}",
                    m.intensity
                )));
            }
            if m.mark.iter().all(|&v| v == 0.0) || m.mark.iter().any(|v| !v.is_finite()) {
                return Err(LabError::Model(format!("jump mark {i} is zero or non-finite")));
            }
        }
        let model = Self {
            dim,
            diffusion_cov,
            cov_root,
            marks,
        };
        let m2 = model.jump_second_moment();
        if !m2.is_finite() {
            return Err(LabError::Model("jump second moment is not finite".into()));
        }
        Ok(model)
    }

    /// Pure Brownian model with covariance `Q`.
    pub fn brownian(diffusion_cov: DMatrix<f64>) -> Result<Self> {
        Self::new(diffusion_cov, Vec::new())
    }

    /// One-dimensional model with variance `q` per unit time.
    pub fn scalar(q: f64, marks: Vec<(f64, f64)>) -> Result<Self> {
        Self::new(
            DMatrix::from_element(1, 1, q),
            marks
                .into_iter()
                .map(|(mark, intensity)| JumpMark {
                    mark: vec![mark],
                    intensity,
                })
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_marks(&self) -> usize {
        self.marks.len()
    }

    pub fn marks(&self) -> &[JumpMark] {
        &self.marks
    }

    pub fn diffusion_cov(&self) -> &DMatrix<f64> {
        &self.diffusion_cov
    }

    pub fn cov_root(&self) -> &DMatrix<f64> {
        &self.cov_root
    }

    /// `sum_i lambda_i |m_i|^2`, the square-integrability constant of the
    /// jump measure.
    pub fn jump_second_moment(&self) -> f64 {
        self.marks
            .iter()
            .map(|m| m.intensity * m.mark.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    /// `sum_i lambda_i m_i`; subtracting `compensator * dt` from the raw jump
    /// sum gives a martingale increment.
    pub fn compensator_drift(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        for m in &self.marks {
            for (o, v) in out.iter_mut().zip(&m.mark) {
                *o += m.intensity * v;
            }
        }
        out
    }

    /// Measure change on the jump part: rates become `lambda_i (1 + gamma_i)`.
    pub fn tilt(&self, gamma: &[f64]) -> Result<Self> {
        if gamma.len() != self.marks.len() {
            return argument(format!(
                "tilt needs {} factors, got {}",
                self.marks.len(),
                gamma.len()
            ));
        }
        if let Some((i, g)) = gamma.iter().enumerate().find(|(_, g)| !(**g > -1.0)) {
            return argument(format!("tilt factor {i} = {g} makes the measure change degenerate"));
        }
        let mut out = self.clone();
        for (m, g) in out.marks.iter_mut().zip(gamma) {
            m.intensity *= 1.0 + g;
        }
        Ok(out)
    }

    /// Number of 32-bit stream words one increment consumes.
    pub fn words_per_step(&self) -> u64 {
        crate::rng::words_per_step(self.dim, self.marks.len())
    }

    /// Draws one increment from the stream's current step window.
    pub fn sample_increment(&self, dt: f64, stream: &mut PathStream) -> Result<Increment> {
        if !(dt > 0.0) {
            return argument(format!("increment needs dt > 0, got {dt}"));
        }
        let mut dw = [0.0; MAX_DIM];
        let mut counts = vec![0u32; self.marks.len()];
        self.fill_increment(dt.sqrt(), dt, stream, &mut dw, &mut counts);
        Ok(Increment {
            dw: dw[..self.dim].to_vec(),
            jump_counts: counts,
        })
    }

    /// Hot-path increment draw into caller buffers. `dw` must hold `MAX_DIM`
    /// entries; only the first `dim` are written.
    #[inline]
    pub(crate) fn fill_increment(
        &self,
        sqrt_dt: f64,
        dt: f64,
        stream: &mut PathStream,
        dw: &mut [f64; MAX_DIM],
        counts: &mut [u32],
    ) {
        let d = self.dim;
        let mut xi = [0.0; MAX_DIM + 1];
        let mut k = 0;
        while k < d {
            let (a, b) = stream.normal_pair();
            xi[k] = a;
            xi[k + 1] = b;
            k += 2;
        }
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += self.cov_root[(i, j)] * xi[j];
            }
            dw[i] = acc * sqrt_dt;
        }
        for (c, m) in counts.iter_mut().zip(&self.marks) {
            *c = stream.poisson(m.intensity * dt);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::channel;

    fn sample_many(model: &LevyModel, dt: f64, n: usize) -> Vec<Increment> {
        let mut s = PathStream::new(11, channel::FORWARD, 0, model.words_per_step());
        (0..n)
            .map(|_| {
                let inc = model.sample_increment(dt, &mut s).unwrap();
                s.next_step();
                inc
            })
            .collect()
    }

    #[test]
    fn rejects_bad_models() {
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(matches!(LevyModel::brownian(q), Err(LabError::Model(_))));
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(LevyModel::brownian(q), Err(LabError::Model(_))));
        assert!(LevyModel::scalar(1.0, vec![(0.0, 1.0)]).is_err());
        assert!(LevyModel::scalar(1.0, vec![(1.0, 0.0)]).is_err());
        assert!(LevyModel::scalar(1.0, vec![(1.0, -2.0)]).is_err());
    }

    #[test]
    fn nonpositive_dt_is_an_argument_error() {
        let m = LevyModel::scalar(1.0, vec![]).unwrap();
        let mut s = PathStream::new(0, 0, 0, m.words_per_step());
        assert!(matches!(m.sample_increment(0.0, &mut s), Err(LabError::Argument(_))));
        assert!(matches!(m.sample_increment(-1.0, &mut s), Err(LabError::Argument(_))));
    }

    #[test]
    fn tiny_dt_gives_degenerate_increment() {
        let m = LevyModel::scalar(1.0, vec![(1.0, 3.0)]).unwrap();
        for inc in sample_many(&m, 1e-14, 1000) {
            assert!(inc.dw[0].abs() < 1e-5);
            assert_eq!(inc.jump_counts[0], 0);
        }
    }

    #[test]
    fn brownian_variance_matches_dt() {
        let m = LevyModel::scalar(1.0, vec![]).unwrap();
        let n = 100_000;
        let xs: Vec<f64> = sample_many(&m, 0.01, n).into_iter().map(|i| i.dw[0]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // Var of the sample variance of a Gaussian is 2 s^4 / (n - 1).
        let se = (2.0 * 0.01f64.powi(2) / (n as f64 - 1.0)).sqrt();
        assert!((var - 0.01).abs() < 3.0 * se, "var {var}");
    }

    #[test]
    fn poisson_mean_matches_rate() {
        let m = LevyModel::scalar(0.0, vec![(1.0, 2.0)]).unwrap();
        let n = 20_000;
        let c: Vec<f64> = sample_many(&m, 0.5, n)
            .into_iter()
            .map(|i| i.jump_counts[0] as f64)
            .collect();
        let mean = c.iter().sum::<f64>() / n as f64;
        let se = (1.0f64 / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn compensator_examples() {
        let m = LevyModel::scalar(1.0, vec![]).unwrap();
        assert_eq!(m.compensator_drift()[0], 0.0);
        let m = LevyModel::scalar(1.0, vec![(1.0, 1.5), (-1.0, 1.5)]).unwrap();
        assert_eq!(m.compensator_drift()[0], 0.0);
        let m = LevyModel::new(
            DMatrix::identity(2, 2),
            vec![
                JumpMark { mark: vec![1.0, 0.0], intensity: 2.0 },
                JumpMark { mark: vec![0.0, 3.0], intensity: 1.0 },
            ],
        )
        .unwrap();
        let c = m.compensator_drift();
        assert_eq!((c[0], c[1]), (2.0, 3.0));
    }

    #[test]
    fn tilt_examples() {
        let m = LevyModel::scalar(1.0, vec![(1.0, 2.0), (-0.5, 2.0)]).unwrap();
        let same = m.tilt(&[0.0, 0.0]).unwrap();
        assert_eq!(same.marks(), m.marks());
        assert_eq!(m.tilt(&[1.0, 1.0]).unwrap().marks()[0].intensity, 4.0);
        assert_eq!(m.tilt(&[-0.5, 0.0]).unwrap().marks()[0].intensity, 1.0);
        assert!(matches!(m.tilt(&[-1.0, 0.0]), Err(LabError::Argument(_))));
        assert_eq!(same.diffusion_cov(), m.diffusion_cov());
    }

    #[test]
    fn compensated_jump_sum_is_a_martingale_increment() {
        let m = LevyModel::new(
            DMatrix::zeros(2, 2),
            vec![
                JumpMark { mark: vec![1.0, -0.5], intensity: 1.5 },
                JumpMark { mark: vec![0.3, 2.0], intensity: 0.7 },
            ],
        )
        .unwrap();
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, -0.3, 1.0]);
        let dt = 0.1;
        let comp = m.compensator_drift();
        let n = 100_000;
        let incs = sample_many(&m, dt, n);
        let mut sums = [Vec::with_capacity(n), Vec::with_capacity(n)];
        for inc in &incs {
            let mut jump = DVector::zeros(2);
            for (c, mk) in inc.jump_counts.iter().zip(m.marks()) {
                jump[0] += *c as f64 * mk.mark[0];
                jump[1] += *c as f64 * mk.mark[1];
            }
            let y = &g * (jump - &comp * dt);
            sums[0].push(y[0]);
            sums[1].push(y[1]);
        }
        for s in &sums {
            let mean = s.iter().sum::<f64>() / n as f64;
            let var = s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!(mean.abs() < 4.0 * (var / n as f64).sqrt(), "mean {mean}");
        }
    }

    proptest::proptest! {
        #[test]
        fn tilts_compose(g1 in proptest::collection::vec(-0.9f64..3.0, 2),
                         g2 in proptest::collection::vec(-0.9f64..3.0, 2)) {
            let m = LevyModel::scalar(1.0, vec![(1.0, 2.0), (-2.0, 0.5)]).unwrap();
            let t = m.tilt(&g1).unwrap().tilt(&g2).unwrap();
            for i in 0..2 {
                let expect = m.marks()[i].intensity * (1.0 + g1[i]) * (1.0 + g2[i]);
                proptest::prop_assert!((t.marks()[i].intensity - expect).abs() <= 1e-12 * expect);
            }
        }
    }
}
