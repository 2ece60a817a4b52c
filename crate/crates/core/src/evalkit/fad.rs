//! Fréchet distance between Gaussian embedding statistics.
//!
//! `FAD = ‖μ_r − μ_g‖² + Tr(Σ_r + Σ_g − 2(Σ_r Σ_g)^{1/2})`, with the cross
//! term computed through the symmetric square root of
//! `Σ_r^{1/2} Σ_g Σ_r^{1/2}`. Covariances are regularized with `+1e-6·I`
//! before any square root, which keeps the eigensolver well-posed on
//! low-rank sample covariances.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{MageError, Result};
use crate::linalg::{jacobi_eigh, sym_sqrt, trace};

/// Ridge added to covariance diagonals before square roots.
pub const COV_REGULARIZER: f64 = 1e-6;
/// Eigenvalues may undershoot zero by this much before a covariance is
/// rejected as non-PSD.
pub const PSD_TOLERANCE: f64 = 1e-8;

/// Mean and covariance summarizing a set of embedding vectors.
#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
}

impl GaussianStats {
    /// Validates symmetry and positive semidefiniteness (within tolerance).
    pub fn validate(&self) -> Result<()> {
        let d = self.mean.len();
        if self.cov.dim() != (d, d) {
            return Err(MageError::Shape(format!(
                "covariance is {:?}, mean has dimension {d}",
                self.cov.dim()
            )));
        }
        let scale = self
            .cov
            .iter()
            .fold(0.0f64, |m, &v| m.max(v.abs()))
            .max(1.0);
        for i in 0..d {
            for j in (i + 1)..d {
                if (self.cov[(i, j)] - self.cov[(j, i)]).abs() > 1e-9 * scale {
                    return Err(MageError::Numeric(format!(
                        "covariance not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        let (vals, _) = jacobi_eigh(&self.cov)?;
        let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        if min < -PSD_TOLERANCE * scale {
            return Err(MageError::Numeric(format!(
                "covariance has eigenvalue {min}, not positive semidefinite"
            )));
        }
        Ok(())
    }

    /// Sample statistics of row-vector observations (population covariance,
    /// matching the usual embedding-distance convention).
    pub fn from_rows(rows: ArrayView2<'_, f64>) -> Result<Self> {
        let (n, d) = rows.dim();
        if n == 0 || d == 0 {
            return Err(MageError::InvalidArgument(
                "need at least one observation with at least one dimension".into(),
            ));
        }
        let mean = rows.mean_axis(ndarray::Axis(0)).expect("n > 0");
        let mut cov = Array2::<f64>::zeros((d, d));
        for row in rows.rows() {
            let centered = &row.to_owned() - &mean;
            for i in 0..d {
                for j in 0..d {
                    cov[(i, j)] += centered[i] * centered[j];
                }
            }
        }
        cov.mapv_inplace(|v| v / n as f64);
        Ok(GaussianStats { mean, cov })
    }
}

/// Fréchet distance between two Gaussian statistics.
///
/// Non-negative by construction up to numerical noise; values that
/// undershoot `-1e-8` indicate invalid inputs and are reported as errors,
/// anything above that is clamped to zero.
pub fn fad(real: &GaussianStats, generated: &GaussianStats) -> Result<f64> {
    real.validate()?;
    generated.validate()?;
    if real.mean.len() != generated.mean.len() {
        return Err(MageError::Shape(format!(
            "embedding dimensions differ: {} vs {}",
            real.mean.len(),
            generated.mean.len()
        )));
    }
    let d = real.mean.len();
    let mut sigma_r = real.cov.clone();
    let mut sigma_g = generated.cov.clone();
    for i in 0..d {
        sigma_r[(i, i)] += COV_REGULARIZER;
        sigma_g[(i, i)] += COV_REGULARIZER;
    }

    let root_r = sym_sqrt(&sigma_r, PSD_TOLERANCE)?;
    let mut inner = root_r.dot(&sigma_g).dot(&root_r);
    // Symmetrize against round-off before the second square root.
    for i in 0..d {
        for j in (i + 1)..d {
            let avg = 0.5 * (inner[(i, j)] + inner[(j, i)]);
            inner[(i, j)] = avg;
            inner[(j, i)] = avg;
        }
    }
    let cross = sym_sqrt(&inner, PSD_TOLERANCE)?;

    let diff = &real.mean - &generated.mean;
    let value = diff.dot(&diff) + trace(&sigma_r) + trace(&sigma_g) - 2.0 * trace(&cross);
    if value < -PSD_TOLERANCE {
        return Err(MageError::Numeric(format!(
            "Fréchet distance evaluated to {value}, below the numerical floor"
        )));
    }
    Ok(value.max(0.0))
}

/// Closed-form Fréchet distance for diagonal covariances (with the same
/// `+1e-6·I` regularization), used as an oracle in tests.
pub fn fad_diagonal_oracle(
    mean_r: &Array1<f64>,
    mean_g: &Array1<f64>,
    diag_r: &Array1<f64>,
    diag_g: &Array1<f64>,
) -> f64 {
    let diff = mean_r - mean_g;
    let mut acc = diff.dot(&diff);
    for (&a, &b) in diag_r.iter().zip(diag_g.iter()) {
        let (a, b) = (a + COV_REGULARIZER, b + COV_REGULARIZER);
        acc += a + b - 2.0 * (a * b).sqrt();
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::arr1;

    fn diag_stats(mean: &[f64], diag: &[f64]) -> GaussianStats {
        let d = mean.len();
        let mut cov = Array2::<f64>::zeros((d, d));
        for i in 0..d {
            cov[(i, i)] = diag[i];
        }
        GaussianStats {
            mean: arr1(mean),
            cov,
        }
    }

    #[test]
    fn identical_stats_give_zero() {
        let s = diag_stats(&[0.3, -0.2, 0.9], &[1.0, 0.5, 2.0]);
        assert_eq!(fad(&s, &s).unwrap(), 0.0);
    }

    #[test]
    fn unit_mean_shift_with_identity_covariances() {
        let r = diag_stats(&[0.0, 0.0], &[1.0, 1.0]);
        let g = diag_stats(&[1.0, 0.0], &[1.0, 1.0]);
        assert_relative_eq!(fad(&r, &g).unwrap(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn commuting_covariances_match_scalar_formula() {
        // mu equal, sigma_r = I, sigma_g = 4I in 2-D: Tr(5I - 2*2I) = 2
        // (up to the 1e-6 ridge applied to both).
        let r = diag_stats(&[0.5, 0.5], &[1.0, 1.0]);
        let g = diag_stats(&[0.5, 0.5], &[4.0, 4.0]);
        let got = fad(&r, &g).unwrap();
        assert_relative_eq!(got, 2.0, epsilon = 1e-4);
        let oracle = fad_diagonal_oracle(&r.mean, &g.mean, &arr1(&[1.0, 1.0]), &arr1(&[4.0, 4.0]));
        assert_relative_eq!(got, oracle, epsilon = 1e-8);
    }

    #[test]
    fn diagonal_oracle_agreement_on_random_stats() {
        let mut rng = crate::rng::seeded_rng(11, "fad-test", 0);
        use rand::Rng;
        for _ in 0..10 {
            let d = 6;
            let mean_r = Array1::from_iter((0..d).map(|_| rng.gen_range(-1.0..1.0)));
            let mean_g = Array1::from_iter((0..d).map(|_| rng.gen_range(-1.0..1.0)));
            let diag_r = Array1::from_iter((0..d).map(|_| rng.gen_range(0.1..3.0)));
            let diag_g = Array1::from_iter((0..d).map(|_| rng.gen_range(0.1..3.0)));
            let r = GaussianStats {
                mean: mean_r.clone(),
                cov: Array2::from_diag(&diag_r),
            };
            let g = GaussianStats {
                mean: mean_g.clone(),
                cov: Array2::from_diag(&diag_g),
            };
            let got = fad(&r, &g).unwrap();
            let want = fad_diagonal_oracle(&mean_r, &mean_g, &diag_r, &diag_g);
            assert_relative_eq!(got, want, epsilon = 1e-8);
        }
    }

    #[test]
    fn fad_is_symmetric() {
        let mut rng = crate::rng::seeded_rng(13, "fad-test", 1);
        use rand::Rng;
        let d = 5;
        let rows_a = Array2::from_shape_fn((20, d), |_| rng.gen_range(-1.0..1.0));
        let rows_b = Array2::from_shape_fn((20, d), |_| rng.gen_range(-0.5..1.5));
        let a = GaussianStats::from_rows(rows_a.view()).unwrap();
        let b = GaussianStats::from_rows(rows_b.view()).unwrap();
        let ab = fad(&a, &b).unwrap();
        let ba = fad(&b, &a).unwrap();
        assert_relative_eq!(ab, ba, epsilon = 1e-8);
        assert_relative_eq!(fad(&a, &a).unwrap(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn non_psd_covariance_is_rejected() {
        let mut s = diag_stats(&[0.0, 0.0], &[1.0, -0.5]);
        assert!(fad(&s, &s).is_err());
        // Asymmetric covariance too.
        s = diag_stats(&[0.0, 0.0], &[1.0, 1.0]);
        s.cov[(0, 1)] = 0.5;
        assert!(s.validate().is_err());
    }
}
