use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

const MAX_RESTARTS: usize = 3;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn start_vector(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Rayleigh quotients `vₖᵀ A vₖ` for each of `iters` normalized power steps.
///
/// `apply(v, out)` must write `A·v` into `out`. A start vector the operator
/// maps to zero triggers a restart from `seed + 1`; after three restarts
/// the call fails.
pub fn power_iteration_trace<F>(mut apply: F, dim: usize, iters: usize, seed: u64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    if iters == 0 {
        return Err(Error::invalid("power iteration needs iters >= 1"));
    }
    if dim == 0 {
        return Err(Error::invalid("power iteration needs dim >= 1"));
    }
    let mut out = vec![0.0; dim];
    'restart: for restart in 0..=MAX_RESTARTS {
        let mut v = start_vector(dim, seed.wrapping_add(restart as u64));
        let mut trace = Vec::with_capacity(iters);
        for _ in 0..iters {
            apply(&v, &mut out)?;
            if out.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical("operator produced non-finite values".into()));
            }
            let rq: f64 = v.iter().zip(&out).map(|(a, b)| a * b).sum();
            trace.push(rq);
            let n = norm(&out);
            if n == 0.0 {
                continue 'restart;
            }
            v.iter_mut().zip(&out).for_each(|(vi, oi)| *vi = oi / n);
        }
        return Ok(trace);
    }
    Err(Error::ZeroVector {
        restarts: MAX_RESTARTS,
    })
}

/// Dominant eigenvalue magnitude `|λ|` of a symmetric linear operator.
pub fn power_iteration_max_eig<F>(apply: F, dim: usize, iters: usize, seed: u64) -> Result<f64>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    let trace = power_iteration_trace(apply, dim, iters, seed)?;
    Ok(trace.last().copied().unwrap_or(0.0).abs())
}
