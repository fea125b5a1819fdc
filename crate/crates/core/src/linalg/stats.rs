use super::DenseMatrix;
use crate::error::{Error, Result};

fn column_means(x: &DenseMatrix) -> Vec<f64> {
    let n = x.rows() as f64;
    let mut mean = vec![0.0; x.cols()];
    for i in 0..x.rows() {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Subtracts each column's mean.
pub fn center_columns(x: &DenseMatrix) -> DenseMatrix {
    if x.rows() == 0 {
        return x.clone();
    }
    let mean = column_means(x);
    let mut out = x.clone();
    for i in 0..x.rows() {
        for (v, m) in out.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    out
}

/// Unbiased sample covariance of the rows of `samples` (N x d).
pub fn covariance(samples: &DenseMatrix) -> Result<DenseMatrix> {
    let n = samples.rows();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let c = center_columns(samples);
    Ok(c.t_matmul(&c)?.scale(1.0 / (n - 1) as f64).symmetrized())
}

/// Unbiased cross-covariance `cov(X, Y)` (p x q).
pub fn cross_covariance(x: &DenseMatrix, y: &DenseMatrix) -> Result<DenseMatrix> {
    if x.rows() != y.rows() {
        return Err(Error::invalid(format!(
            "cross_covariance needs equal sample counts, got {} and {}",
            x.rows(),
            y.rows()
        )));
    }
    let n = x.rows();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let cx = center_columns(x);
    let cy = center_columns(y);
    Ok(cx.t_matmul(&cy)?.scale(1.0 / (n - 1) as f64))
}

/// Full `N x N` matrix of squared Euclidean distances between rows.
pub fn pairwise_sqdist(x: &DenseMatrix) -> DenseMatrix {
    let n = x.rows();
    let mut d = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let s: f64 = x
                .row(i)
                .iter()
                .zip(x.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d[(i, j)] = s;
            d[(j, i)] = s;
        }
    }
    d
}

/// Median of a slice; even lengths average the two middle values.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Median over all `N(N−1)/2` squared pairwise distances.
pub fn median_pairwise_sqdist(x: &DenseMatrix) -> Result<f64> {
    let n = x.rows();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let d = pairwise_sqdist(x);
    Ok(median_upper_triangle(&d))
}

pub(crate) fn median_upper_triangle(d: &DenseMatrix) -> f64 {
    let n = d.rows();
    let mut vals = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            vals.push(d[(i, j)]);
        }
    }
    median(&mut vals).unwrap_or(0.0)
}
