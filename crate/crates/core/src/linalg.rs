//! Small dense symmetric linear algebra in `f64`: cyclic-Jacobi
//! eigendecomposition, matrix square root, condition numbers, and SPD
//! solves. Metric computations need exact, dependency-free answers on
//! matrices no larger than a few dozen rows, which Jacobi handles with
//! near machine-precision accuracy.

use ndarray::{Array1, Array2};

use crate::error::{MageError, Result};

/// Eigendecomposition `a = V diag(vals) V^T` of a symmetric matrix.
///
/// Eigenvalues are returned in ascending order with matching eigenvector
/// columns. Fails if `a` is not square or not symmetric within `1e-9`
/// relative to its largest entry.
pub fn jacobi_eigh(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(MageError::Shape(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    let scale = a.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1e-300);
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > 1e-9 * scale {
                return Err(MageError::Numeric(format!(
                    "matrix not symmetric at ({i},{j}): {} vs {}",
                    a[(i, j)],
                    a[(j, i)]
                )));
            }
        }
    }

    let mut m = a.clone();
    // Enforce exact symmetry so rotations stay consistent.
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    let mut v = Array2::<f64>::eye(n);
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        if off.sqrt() <= 1e-14 * scale.max(1.0) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Apply the rotation to rows/columns p and q.
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut vals: Vec<(f64, usize)> = (0..n).map(|i| (m[(i, i)], i)).collect();
    vals.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let eigvals = Array1::from_iter(vals.iter().map(|&(val, _)| val));
    let mut eigvecs = Array2::<f64>::zeros((n, n));
    for (new_col, &(_, old_col)) in vals.iter().enumerate() {
        for r in 0..n {
            eigvecs[(r, new_col)] = v[(r, old_col)];
        }
    }
    Ok((eigvals, eigvecs))
}

/// Symmetric positive-semidefinite square root via eigendecomposition.
///
/// Eigenvalues below `-tol` are rejected; small negative values (numerical
/// noise) are clamped to zero.
pub fn sym_sqrt(a: &Array2<f64>, tol: f64) -> Result<Array2<f64>> {
    let (vals, vecs) = jacobi_eigh(a)?;
    let scale = vals.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1.0);
    if let Some(&min) = vals.iter().min_by(|a, b| a.partial_cmp(b).unwrap()) {
        if min < -tol * scale {
            return Err(MageError::Numeric(format!(
                "matrix not positive semidefinite: eigenvalue {min}"
            )));
        }
    }
    let n = a.nrows();
    let mut out = Array2::<f64>::zeros((n, n));
    for k in 0..n {
        let sq = vals[k].max(0.0).sqrt();
        for i in 0..n {
            for j in 0..n {
                out[(i, j)] += sq * vecs[(i, k)] * vecs[(j, k)];
            }
        }
    }
    Ok(out)
}

/// Condition number `|λ|_max / |λ|_min` of a symmetric matrix.
pub fn sym_condition(a: &Array2<f64>) -> Result<f64> {
    let (vals, _) = jacobi_eigh(a)?;
    let max = vals.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let min = vals.iter().fold(f64::INFINITY, |m, &v| m.min(v.abs()));
    if min == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(max / min)
}

/// Solves `a x = b` for symmetric positive-definite `a` via the
/// eigendecomposition (adequate for the tiny systems used here).
pub fn solve_sym(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let (vals, vecs) = jacobi_eigh(a)?;
    if vals.iter().any(|&v| v <= 0.0) {
        return Err(MageError::Numeric(
            "linear system is not positive definite".into(),
        ));
    }
    let n = a.nrows();
    if b.len() != n {
        return Err(MageError::Shape(format!(
            "solve dimension mismatch: {}x{n} vs {}",
            n,
            b.len()
        )));
    }
    // x = V diag(1/vals) V^T b
    let mut vtb = Array1::<f64>::zeros(n);
    for k in 0..n {
        let mut acc = 0.0;
        for i in 0..n {
            acc += vecs[(i, k)] * b[i];
        }
        vtb[k] = acc / vals[k];
    }
    let mut x = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut acc = 0.0;
        for k in 0..n {
            acc += vecs[(i, k)] * vtb[k];
        }
        x[i] = acc;
    }
    Ok(x)
}

/// Trace of a square matrix.
pub fn trace(a: &Array2<f64>) -> f64 {
    (0..a.nrows().min(a.ncols())).map(|i| a[(i, i)]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::Rng;

    fn random_symmetric(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = crate::rng::seeded_rng(seed, "linalg-test", 0);
        let mut a = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..=i {
                let v = rng.gen_range(-1.0..1.0);
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        a
    }

    #[test]
    fn eigendecomposition_matches_nalgebra() {
        for n in [2usize, 5, 16, 32] {
            let a = random_symmetric(n, n as u64);
            let (vals, vecs) = jacobi_eigh(&a).unwrap();
            let na = DMatrix::from_fn(n, n, |i, j| a[(i, j)]);
            let mut reference: Vec<f64> =
                na.symmetric_eigen().eigenvalues.iter().copied().collect();
            reference.sort_by(|x, y| x.partial_cmp(y).unwrap());
            for (got, want) in vals.iter().zip(reference.iter()) {
                assert_relative_eq!(got, want, epsilon = 1e-10, max_relative = 1e-10);
            }
            // Reconstruction: V diag V^T == a.
            let mut recon = Array2::<f64>::zeros((n, n));
            for k in 0..n {
                for i in 0..n {
                    for j in 0..n {
                        recon[(i, j)] += vals[k] * vecs[(i, k)] * vecs[(j, k)];
                    }
                }
            }
            for (r, x) in recon.iter().zip(a.iter()) {
                assert_relative_eq!(r, x, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn sqrt_squares_back() {
        let mut rng = crate::rng::seeded_rng(7, "linalg-test", 1);
        let n = 8;
        let mut b = Array2::<f64>::zeros((n, n));
        for v in b.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let psd = b.dot(&b.t()); // PSD by construction
        let root = sym_sqrt(&psd, 1e-8).unwrap();
        let squared = root.dot(&root);
        for (s, p) in squared.iter().zip(psd.iter()) {
            assert_relative_eq!(s, p, epsilon = 1e-9);
        }
    }

    #[test]
    fn sqrt_rejects_indefinite() {
        let a = ndarray::arr2(&[[1.0, 0.0], [0.0, -1.0]]);
        assert!(sym_sqrt(&a, 1e-8).is_err());
    }

    #[test]
    fn solve_recovers_known_solution() {
        let a = ndarray::arr2(&[[4.0, 1.0], [1.0, 3.0]]);
        let x_true = ndarray::arr1(&[1.5, -2.0]);
        let b = a.dot(&x_true);
        let x = solve_sym(&a, &b).unwrap();
        for (got, want) in x.iter().zip(x_true.iter()) {
            assert_relative_eq!(got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn condition_number_of_diagonal() {
        let a = ndarray::arr2(&[[10.0, 0.0], [0.0, 0.1]]);
        assert_relative_eq!(sym_condition(&a).unwrap(), 100.0, epsilon = 1e-9);
    }
}
