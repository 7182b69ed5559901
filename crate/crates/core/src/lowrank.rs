//! Diagonal-plus-rank-one covariances and the matrix-normal distribution built
//! on them.
//!
//! `U = diag(psi) + h hᵀ` is never materialized: quadratic forms take two inner
//! products, the log-determinant comes from the matrix determinant lemma, and
//! conditioning on the last coordinate stays inside the same representation.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Symmetric positive-definite `diag(psi) + h hᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagRankOne {
    pub psi: Array1<f64>,
    pub h: Array1<f64>,
}

impl DiagRankOne {
    pub fn new(psi: Array1<f64>, h: Array1<f64>) -> Result<Self> {
        if psi.len() != h.len() {
            return Err(Error::shape(format!(
                "psi has {} entries but h has {}",
                psi.len(),
                h.len()
            )));
        }
        if psi.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::invalid("psi entries must be positive and finite"));
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("h entries must be finite"));
        }
        Ok(Self { psi, h })
    }

    pub fn dim(&self) -> usize {
        self.psi.len()
    }

    /// `aᵀ U a`.
    pub fn quad_form(&self, a: ArrayView1<f64>) -> Result<f64> {
        if a.len() != self.dim() {
            return Err(Error::shape(format!(
                "vector of length {} against {}x{} covariance",
                a.len(),
                self.dim(),
                self.dim()
            )));
        }
        let diag: f64 = self.psi.iter().zip(a).map(|(p, x)| p * x * x).sum();
        let proj = self.h.dot(&a);
        Ok(diag + proj * proj)
    }

    /// `ln |U| = ln(1 + hᵀ Ψ⁻¹ h) + Σ ln psi`.
    pub fn logdet(&self) -> f64 {
        let ratio: f64 = self.h.iter().zip(&self.psi).map(|(h, p)| h * h / p).sum();
        ratio.ln_1p() + self.psi.iter().map(|p| p.ln()).sum::<f64>()
    }

    pub fn trace(&self) -> f64 {
        self.psi.sum() + self.h.dot(&self.h)
    }

    /// Dense `m×m` form; only intended for diagnostics and tests.
    pub fn to_dense(&self) -> Array2<f64> {
        let m = self.dim();
        let mut u = Array2::from_shape_fn((m, m), |(i, j)| self.h[i] * self.h[j]);
        for i in 0..m {
            u[[i, i]] += self.psi[i];
        }
        u
    }
}

/// Matrix-normal `MN(mean, U, diag(col_var))` with diagonal-plus-rank-one row
/// covariance: the vectorized matrix has covariance `diag(col_var) ⊗ U`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixNormalStructured {
    pub mean: Array2<f64>,
    pub row_cov: DiagRankOne,
    pub col_var: Array1<f64>,
}

impl MatrixNormalStructured {
    pub fn new(mean: Array2<f64>, row_cov: DiagRankOne, col_var: Array1<f64>) -> Result<Self> {
        let (m, n) = mean.dim();
        if row_cov.dim() != m || col_var.len() != n {
            return Err(Error::shape(format!(
                "mean is {m}x{n} but U is {0}x{0} and V has {1} entries",
                row_cov.dim(),
                col_var.len()
            )));
        }
        if col_var.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("column variances must be positive"));
        }
        Ok(Self {
            mean,
            row_cov,
            col_var,
        })
    }

    pub fn rows(&self) -> usize {
        self.mean.nrows()
    }

    pub fn cols(&self) -> usize {
        self.mean.ncols()
    }

    /// `(mn/2) ln(2πe) + (m ln|V| + n ln|U|)/2`.
    pub fn entropy(&self) -> f64 {
        let (m, n) = (self.rows() as f64, self.cols() as f64);
        let ln_det_v: f64 = self.col_var.iter().map(|v| v.ln()).sum();
        0.5 * m * n * (2.0 * PI * std::f64::consts::E).ln()
            + 0.5 * (m * ln_det_v + n * self.row_cov.logdet())
    }

    /// Exact draw `M + (diag(√psi) E + h e0ᵀ) diag(√V)` from standard-normal
    /// noise `noise` (m×n) and `shared` (n).
    pub fn sample(&self, noise: ArrayView2<f64>, shared: ArrayView1<f64>) -> Result<Array2<f64>> {
        let (m, n) = self.mean.dim();
        if noise.dim() != (m, n) || shared.len() != n {
            return Err(Error::shape(format!(
                "noise is {:?} with {} shared draws, expected ({m}, {n}) and {n}",
                noise.dim(),
                shared.len()
            )));
        }
        let mut out = self.mean.clone();
        for ((i, j), o) in out.indexed_iter_mut() {
            let z = self.row_cov.psi[i].sqrt() * noise[[i, j]] + self.row_cov.h[i] * shared[j];
            *o += z * self.col_var[j].sqrt();
        }
        Ok(out)
    }

    /// Conditional law of the first `m-1` rows given the last row equals `nu`.
    ///
    /// The conditional row covariance is `Ψ_β + s h_β h_βᵀ` with
    /// `s = psi_ν / (psi_ν + h_ν²)`; it is returned as `DiagRankOne` with `h`
    /// scaled by `√s`.
    pub fn condition_on_last_row(&self, nu: ArrayView1<f64>) -> Result<(Array2<f64>, DiagRankOne)> {
        let (m, n) = self.mean.dim();
        if m < 2 {
            return Err(Error::invalid("conditioning needs at least two rows"));
        }
        if nu.len() != n {
            return Err(Error::shape(format!("nu has {} entries, expected {n}", nu.len())));
        }
        let last = m - 1;
        let psi_nu = self.row_cov.psi[last];
        let h_nu = self.row_cov.h[last];
        let u_nu = psi_nu + h_nu * h_nu;
        let h_beta = self.row_cov.h.slice(s![..last]);

        let resid = &nu - &self.mean.row(last);
        let shift = resid.mapv(|r| h_nu * r / u_nu);
        let mut mean = self.mean.slice(s![..last, ..]).to_owned();
        // rank-one update: mean += h_β ⊗ shift
        mean += &(h_beta.insert_axis(Axis(1)).to_owned() * &shift.insert_axis(Axis(0)));

        let cov = DiagRankOne {
            psi: self.row_cov.psi.slice(s![..last]).to_owned(),
            h: h_beta.mapv(|h| h * (psi_nu / u_nu).sqrt()),
        };
        Ok((mean, cov))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_u(m: usize, rng: &mut impl Rng) -> DiagRankOne {
        let psi = Array1::from_shape_fn(m, |_| rng.random_range(0.1..2.0));
        let h = Array1::from_shape_fn(m, |_| rng.random_range(-1.5..1.5));
        DiagRankOne::new(psi, h).unwrap()
    }

    fn dense(u: &DiagRankOne) -> DMatrix<f64> {
        let m = u.dim();
        DMatrix::from_fn(m, m, |i, j| {
            u.h[i] * u.h[j] + if i == j { u.psi[i] } else { 0.0 }
        })
    }

    #[test]
    fn quad_form_examples() {
        let u = DiagRankOne::new(array![1.0, 1.0], array![0.0, 0.0]).unwrap();
        assert_eq!(u.quad_form(array![3.0, 4.0].view()).unwrap(), 25.0);
        let u = DiagRankOne::new(array![1.0, 1.0], array![1.0, 0.0]).unwrap();
        assert_eq!(u.quad_form(array![1.0, 1.0].view()).unwrap(), 3.0);
        assert!(u.quad_form(array![1.0].view()).is_err());
    }

    #[test]
    fn quad_form_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = random_u(7, &mut rng);
        let a = Array1::from_shape_fn(7, |_| rng.sample::<f64, _>(StandardNormal));
        let av = DVector::from_iterator(7, a.iter().copied());
        let want = (av.transpose() * dense(&u) * &av)[(0, 0)];
        let got = u.quad_form(a.view()).unwrap();
        assert!((got - want).abs() <= 1e-12 * want.abs());
    }

    #[test]
    fn logdet_examples() {
        let u = DiagRankOne::new(array![1.0, 1.0], array![1.0, 0.0]).unwrap();
        assert!((u.logdet() - 2f64.ln()).abs() < 1e-15);
        let u = DiagRankOne::new(array![2.0, 3.0], array![0.0, 0.0]).unwrap();
        assert!((u.logdet() - 6f64.ln()).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let u = random_u(9, &mut rng);
        let want = dense(&u).determinant().ln();
        assert!((u.logdet() - want).abs() < 1e-10);
    }

    #[test]
    fn scalar_entropy_and_translation_invariance() {
        let u = DiagRankOne::new(array![1.0], array![0.0]).unwrap();
        let q = MatrixNormalStructured::new(array![[0.0]], u.clone(), array![1.0]).unwrap();
        assert!((q.entropy() - crate::scalar_dist::HALF_LN_2PI_E).abs() < 1e-14);
        let shifted = MatrixNormalStructured::new(array![[17.0]], u, array![1.0]).unwrap();
        assert_eq!(q.entropy(), shifted.entropy());
    }

    #[test]
    fn sample_examples() {
        let u = DiagRankOne::new(array![1.0, 1.0], array![0.0, 0.0]).unwrap();
        let mean = array![[1.0], [2.0]];
        let q = MatrixNormalStructured::new(mean.clone(), u, array![1.0]).unwrap();
        let zero = q
            .sample(Array2::zeros((2, 1)).view(), Array1::zeros(1).view())
            .unwrap();
        assert_eq!(zero, mean);
        let e = array![[0.3], [-1.2]];
        let out = q.sample(e.view(), array![0.7].view()).unwrap();
        assert_eq!(out, &mean + &e);
    }

    #[test]
    fn conditioning_with_zero_coupling_is_marginal() {
        let u = DiagRankOne::new(array![1.0, 2.0, 0.5], array![0.4, -0.3, 0.0]).unwrap();
        let mean = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let q = MatrixNormalStructured::new(mean.clone(), u, array![1.0, 2.0]).unwrap();
        let (mc, uc) = q.condition_on_last_row(array![9.0, -9.0].view()).unwrap();
        assert_eq!(mc, mean.slice(s![..2, ..]));
        assert_eq!(uc.psi, array![1.0, 2.0]);
        assert_eq!(uc.h, array![0.4, -0.3]);
    }

    #[test]
    fn conditioning_at_mean_keeps_mean() {
        let u = DiagRankOne::new(array![1.0, 2.0, 0.5], array![0.4, -0.3, 0.9]).unwrap();
        let mean = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let q = MatrixNormalStructured::new(mean.clone(), u, array![1.0, 2.0]).unwrap();
        let (mc, _) = q.condition_on_last_row(array![5.0, 6.0].view()).unwrap();
        assert_eq!(mc, mean.slice(s![..2, ..]));
        let single = MatrixNormalStructured::new(
            array![[1.0]],
            DiagRankOne::new(array![1.0], array![0.0]).unwrap(),
            array![1.0],
        )
        .unwrap();
        assert!(single.condition_on_last_row(array![0.0].view()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::{prop_assert, prop_assume, proptest};

        proptest! {
            #[test]
            fn quad_form_positive(
                psi in proptest::collection::vec(1e-3f64..10.0, 1..20),
                seed in 0u64..1000,
            ) {
                let m = psi.len();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let h = Array1::from_shape_fn(m, |_| rng.random_range(-3.0f64..3.0));
                let u = DiagRankOne::new(Array1::from(psi), h).unwrap();
                let a = Array1::from_shape_fn(m, |_| rng.random_range(-1.0f64..1.0));
                prop_assume!(a.iter().any(|x| x.abs() > 1e-6));
                prop_assert!(u.quad_form(a.view()).unwrap() > 0.0);
                let dense_val = {
                    let d = u.to_dense();
                    a.dot(&d.dot(&a))
                };
                prop_assert!((u.quad_form(a.view()).unwrap() - dense_val).abs() < 1e-10);
            }
        }
    }
}
