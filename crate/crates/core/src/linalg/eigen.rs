//! Cyclic Jacobi eigensolver for dense symmetric matrices.

use super::DenseMatrix;
use crate::error::{Error, Result};

/// Off-diagonal Frobenius norm at which sweeps stop, relative to `‖A‖_F`.
pub const JACOBI_TOL: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Relative asymmetry accepted by [`sym_eig`].
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Eigenpairs of a symmetric matrix, eigenvalues non-increasing.
#[derive(Clone, Debug)]
pub struct SpectralDecomposition {
    pub eigenvalues: Vec<f64>,
    /// Column `k` pairs with `eigenvalues[k]`.
    pub eigenvectors: DenseMatrix,
}

impl SpectralDecomposition {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvector(&self, k: usize) -> Vec<f64> {
        self.eigenvectors.column(k)
    }

    /// `V · diag(λ) · Vᵀ`
    pub fn reconstruct(&self) -> DenseMatrix {
        let n = self.dim();
        let mut scaled = self.eigenvectors.clone();
        for i in 0..n {
            for (k, &l) in self.eigenvalues.iter().enumerate() {
                scaled[(i, k)] *= l;
            }
        }
        scaled
            .matmul_t(&self.eigenvectors)
            .expect("square factors")
    }
}

fn off_diagonal_norm(a: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[i * n + j] * a[i * n + j];
            }
        }
    }
    s.sqrt()
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Eigenvalues come back sorted descending; ties keep the solver's
/// diagonal order (stable sort).
pub fn sym_eig(a: &DenseMatrix) -> Result<SpectralDecomposition> {
    if !a.is_square() {
        return Err(Error::invalid(format!(
            "sym_eig needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if !a.is_symmetric(SYMMETRY_TOL) {
        return Err(Error::invalid("sym_eig input is not symmetric"));
    }
    let n = a.rows();
    let mut m = a.symmetrized().into_vec();
    let mut v = DenseMatrix::identity(n).into_vec();

    let scale = a.frobenius_norm();
    let target = JACOBI_TOL * scale;

    for _sweep in 0..JACOBI_MAX_SWEEPS {
        if off_diagonal_norm(&m, n) <= target {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                // skip rotations that cannot change the diagonal in f64
                if apq.abs() < f64::EPSILON * 1e-3 * (app.abs() + aqq.abs()) {
                    m[p * n + q] = 0.0;
                    m[q * n + p] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let arp = m[r * n + p];
                    let arq = m[r * n + q];
                    let nrp = c * arp - s * arq;
                    let nrq = s * arp + c * arq;
                    m[r * n + p] = nrp;
                    m[p * n + r] = nrp;
                    m[r * n + q] = nrq;
                    m[q * n + r] = nrq;
                }
                m[p * n + p] = app - t * apq;
                m[q * n + q] = aqq + t * apq;
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;

                for r in 0..n {
                    let vrp = v[r * n + p];
                    let vrq = v[r * n + q];
                    v[r * n + p] = c * vrp - s * vrq;
                    v[r * n + q] = s * vrp + c * vrq;
                }
            }
        }
    }
    if off_diagonal_norm(&m, n) > target.max(1e-300) * 1e3 {
        return Err(Error::Numerical(format!(
            "Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]));
    let eigenvalues = order.iter().map(|&i| m[i * n + i]).collect();
    let vecs = DenseMatrix::from_vec_unchecked(n, n, v);
    Ok(SpectralDecomposition {
        eigenvalues,
        eigenvectors: vecs.select_columns(&order),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v: f64 = rng.random_range(-1.0..1.0);
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        a
    }

    #[test]
    fn diagonal_input() {
        let e = sym_eig(&DenseMatrix::from_diag(&[3.0, 1.0])).unwrap();
        assert_eq!(e.eigenvalues, vec![3.0, 1.0]);
        assert_eq!(e.eigenvectors, DenseMatrix::identity(2));
    }

    #[test]
    fn diagonal_input_is_sorted() {
        let e = sym_eig(&DenseMatrix::from_diag(&[1.0, 3.0])).unwrap();
        assert_eq!(e.eigenvalues, vec![3.0, 1.0]);
        assert_eq!(e.eigenvector(0), vec![0.0, 1.0]);
    }

    #[test]
    fn swap_matrix() {
        let e = sym_eig(&DenseMatrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]])).unwrap();
        assert!((e.eigenvalues[0] - 1.0).abs() < 1e-14);
        assert!((e.eigenvalues[1] + 1.0).abs() < 1e-14);
    }

    #[test]
    fn two_by_two_characteristic_polynomial() {
        // λ² − 4λ + 3 = 0
        let e = sym_eig(&DenseMatrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]])).unwrap();
        assert!((e.eigenvalues[0] - 3.0).abs() < 1e-14);
        assert!((e.eigenvalues[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            sym_eig(&DenseMatrix::zeros(2, 3)),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            sym_eig(&DenseMatrix::from_rows(&[[1.0, 2.0], [0.0, 1.0]])),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn zero_and_empty_matrices() {
        let e = sym_eig(&DenseMatrix::zeros(3, 3)).unwrap();
        assert_eq!(e.eigenvalues, vec![0.0; 3]);
        assert_eq!(sym_eig(&DenseMatrix::zeros(0, 0)).unwrap().dim(), 0);
    }

    #[test]
    fn residuals_and_orthonormality() {
        for seed in 0..20 {
            let n = 1 + (seed as usize * 7) % 40;
            let a = random_symmetric(n, seed);
            let e = sym_eig(&a).unwrap();
            let norm = a.frobenius_norm();
            for k in 0..n {
                let v = e.eigenvector(k);
                let av = a.matvec(&v);
                for i in 0..n {
                    assert!((av[i] - e.eigenvalues[k] * v[i]).abs() <= 1e-8 * norm);
                }
            }
            let vtv = e.eigenvectors.t_matmul(&e.eigenvectors).unwrap();
            for i in 0..n {
                for j in 0..n {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((vtv[(i, j)] - want).abs() < 1e-8);
                }
            }
            assert!(e.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn reconstruction_up_to_64() {
        let a = random_symmetric(64, 99);
        let e = sym_eig(&a).unwrap();
        let r = e.reconstruct().sub(&a).unwrap();
        assert!(r.frobenius_norm() <= 1e-7 * a.frobenius_norm());
    }
}
