use super::DenseMatrix;
use crate::error::{Error, Result};

/// Ridge used by [`logdet_auto`] when the plain factorization fails,
/// relative to `trace(S)/dim`.
pub const AUTO_RIDGE_FACTOR: f64 = 1e-9;

/// Lower-triangular factor `L` with `S = L·Lᵀ`.
#[derive(Clone, Debug)]
pub struct Cholesky {
    l: DenseMatrix,
}

impl Cholesky {
    /// Factors `s + ridge·I`. Only the lower triangle of `s` is read.
    pub fn factor(s: &DenseMatrix, ridge: f64) -> Result<Self> {
        if !s.is_square() {
            return Err(Error::invalid("Cholesky needs a square matrix"));
        }
        if !(ridge >= 0.0) || !ridge.is_finite() {
            return Err(Error::invalid(format!("ridge must be finite and >= 0, got {ridge}")));
        }
        let n = s.rows();
        let mut l = DenseMatrix::zeros(n, n);
        for j in 0..n {
            let mut d = s[(j, j)] + ridge;
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Singular { pivot: j });
            }
            let ljj = d.sqrt();
            l[(j, j)] = ljj;
            for i in (j + 1)..n {
                let mut v = s[(i, j)];
                for k in 0..j {
                    v -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = v / ljj;
            }
        }
        Ok(Self { l })
    }

    pub fn factor_matrix(&self) -> &DenseMatrix {
        &self.l
    }

    pub fn logdet(&self) -> f64 {
        2.0 * self.l.diag().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solves `S·X = B` for each column of `B`.
    pub fn solve(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        let n = self.l.rows();
        if b.rows() != n {
            return Err(Error::invalid("right-hand side has wrong row count"));
        }
        let mut x = b.clone();
        for c in 0..b.cols() {
            // forward: L y = b
            for i in 0..n {
                let mut v = x[(i, c)];
                for k in 0..i {
                    v -= self.l[(i, k)] * x[(k, c)];
                }
                x[(i, c)] = v / self.l[(i, i)];
            }
            // backward: Lᵀ x = y
            for i in (0..n).rev() {
                let mut v = x[(i, c)];
                for k in (i + 1)..n {
                    v -= self.l[(k, i)] * x[(k, c)];
                }
                x[(i, c)] = v / self.l[(i, i)];
            }
        }
        Ok(x)
    }

    pub fn inverse(&self) -> DenseMatrix {
        let n = self.l.rows();
        self.solve(&DenseMatrix::identity(n))
            .expect("identity has matching rows")
            .symmetrized()
    }
}

/// `ln|S + ridge·I|` through a Cholesky factorization.
pub fn cholesky_logdet(s: &DenseMatrix, ridge: f64) -> Result<f64> {
    Ok(Cholesky::factor(s, ridge)?.logdet())
}

/// `ln|S|`, retrying once with ridge `1e-9·trace(S)/dim` if `S` is not
/// numerically positive definite.
pub fn logdet_auto(s: &DenseMatrix) -> Result<f64> {
    match cholesky_logdet(s, 0.0) {
        Ok(v) => Ok(v),
        Err(Error::Singular { .. }) if s.rows() > 0 => {
            let ridge = AUTO_RIDGE_FACTOR * (s.trace() / s.rows() as f64).abs();
            cholesky_logdet(s, ridge)
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_diagonal() {
        assert_eq!(cholesky_logdet(&DenseMatrix::identity(3), 0.0).unwrap(), 0.0);
        let v = cholesky_logdet(&DenseMatrix::from_diag(&[2.0, 5.0]), 0.0).unwrap();
        assert!((v - 10f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn near_singular_two_by_two_with_ridge() {
        let s = DenseMatrix::from_rows(&[[1.0, 0.999], [0.999, 1.0]]);
        let r = 1e-6;
        let det = (1.0 + r) * (1.0 + r) - 0.999 * 0.999;
        let v = cholesky_logdet(&s, r).unwrap();
        assert!((v - det.ln()).abs() < 1e-9);
    }

    #[test]
    fn singular_reports_pivot() {
        let s = DenseMatrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]);
        match cholesky_logdet(&s, 0.0) {
            Err(Error::Singular { pivot }) => assert_eq!(pivot, 1),
            other => panic!("expected singular, got {other:?}"),
        }
        assert!(matches!(
            cholesky_logdet(&DenseMatrix::from_diag(&[-1.0]), 0.0),
            Err(Error::Singular { pivot: 0 })
        ));
        assert!(logdet_auto(&s).is_ok());
    }

    #[test]
    fn negative_ridge_rejected() {
        assert!(matches!(
            cholesky_logdet(&DenseMatrix::identity(2), -1.0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn solve_and_inverse() {
        let s = DenseMatrix::from_rows(&[[4.0, 2.0], [2.0, 3.0]]);
        let c = Cholesky::factor(&s, 0.0).unwrap();
        let inv = c.inverse();
        let prod = s.matmul(&inv).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod[(i, j)] - want).abs() < 1e-14);
            }
        }
    }
}
