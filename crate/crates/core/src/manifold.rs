//! Diffusion-map embedding of one layer's activation cloud.
//!
//! Gaussian affinities `W_ij = exp(−‖h_i − h_j‖²/σ²)` define a random walk
//! `P = D⁻¹W`. Its eigenpairs are obtained from the symmetric conjugate
//! `D^{-1/2} W D^{-1/2}` and the embedding keeps the `k` leading non-trivial
//! eigenvectors scaled by `λ^t`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::{Tensor, TensorFile};
use crate::error::{Error, Result};
use crate::linalg::{center_columns, median_upper_triangle, pairwise_sqdist, sym_eig, DenseMatrix};
use crate::model::ActivationMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaMode {
    /// `σ²` = median pairwise squared distance.
    AutoMedian,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldConfig {
    pub sigma: SigmaMode,
    pub k: usize,
    pub t: f64,
}

impl Default for ManifoldConfig {
    fn default() -> Self {
        Self {
            sigma: SigmaMode::AutoMedian,
            k: 8,
            t: 1.0,
        }
    }
}

impl ManifoldConfig {
    pub fn validate(&self) -> Result<()> {
        if let SigmaMode::Fixed(s) = self.sigma {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::invalid(format!("fixed sigma must be > 0, got {s}")));
            }
        }
        if self.k == 0 {
            return Err(Error::invalid("embedding dimension k must be >= 1"));
        }
        if !(self.t >= 0.0) || !self.t.is_finite() {
            return Err(Error::invalid(format!("diffusion time must be >= 0, got {}", self.t)));
        }
        Ok(())
    }
}

/// `λ^t` extended to negative `λ` as `sign(λ)·|λ|^t`, so that
/// `(λ^t)² = |λ|^{2t}` for every real `t`.
pub fn signed_pow(lambda: f64, t: f64) -> f64 {
    if t == 0.0 {
        1.0
    } else {
        lambda.signum() * lambda.abs().powf(t)
    }
}

/// Gaussian affinity of mean-centered rows; returns `(W, σ)`.
pub fn build_affinity(points: &DenseMatrix, sigma: SigmaMode) -> Result<(DenseMatrix, f64)> {
    let n = points.rows();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let centered = center_columns(points);
    let d2 = pairwise_sqdist(&centered);
    let sigma2 = match sigma {
        SigmaMode::Fixed(s) => {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::invalid(format!("fixed sigma must be > 0, got {s}")));
            }
            s * s
        }
        SigmaMode::AutoMedian => {
            let m = median_upper_triangle(&d2);
            if !(m > 0.0) {
                return Err(Error::Degenerate(
                    "median pairwise distance is zero (points coincide); use a fixed sigma".into(),
                ));
            }
            m
        }
    };
    let mut w = DenseMatrix::zeros(n, n);
    for i in 0..n {
        w[(i, i)] = 1.0;
        for j in (i + 1)..n {
            let v = (-d2[(i, j)] / sigma2).exp();
            w[(i, j)] = v;
            w[(j, i)] = v;
        }
    }
    Ok((w, sigma2.sqrt()))
}

/// Spectral data of the diffusion operator `P = D⁻¹W`.
#[derive(Clone, Debug)]
pub struct DiffusionOperatorBundle {
    pub affinity: DenseMatrix,
    pub degrees: Vec<f64>,
    /// Shared by `P` and its symmetric conjugate, non-increasing.
    pub eigenvalues: Vec<f64>,
    /// Right eigenvectors of `P` as unit-norm columns; the largest-magnitude
    /// entry of each column is positive.
    pub eigenvectors: DenseMatrix,
}

impl DiffusionOperatorBundle {
    pub fn n(&self) -> usize {
        self.degrees.len()
    }

    /// `P = D⁻¹W`
    pub fn operator(&self) -> DenseMatrix {
        let n = self.n();
        let mut p = self.affinity.clone();
        for i in 0..n {
            for v in p.row_mut(i) {
                *v /= self.degrees[i];
            }
        }
        p
    }

    fn check_k(&self, k: usize) -> Result<()> {
        let n = self.n();
        if k == 0 || k + 1 > n {
            return Err(Error::invalid(format!(
                "embedding dimension {k} must be in 1..={}",
                n.saturating_sub(1)
            )));
        }
        Ok(())
    }
}

/// Largest-magnitude entry positive; first index wins ties.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

pub fn diffusion_decompose(w: &DenseMatrix) -> Result<DiffusionOperatorBundle> {
    if !w.is_square() {
        return Err(Error::invalid("affinity must be square"));
    }
    if !w.is_symmetric(1e-12) {
        return Err(Error::invalid("affinity must be symmetric"));
    }
    if w.as_slice().iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("affinity entries must be non-negative"));
    }
    let n = w.rows();
    let degrees: Vec<f64> = (0..n).map(|i| w.row(i).iter().sum()).collect();
    if let Some(i) = degrees.iter().position(|&d| !(d > 0.0)) {
        return Err(Error::Degenerate(format!("row {i} of the affinity sums to zero")));
    }
    let inv_sqrt: Vec<f64> = degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut sym = w.clone();
    for i in 0..n {
        for j in 0..n {
            sym[(i, j)] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    let sym = sym.symmetrized();
    let eig = sym_eig(&sym)?;

    let mut phi = DenseMatrix::zeros(n, n);
    for k in 0..n {
        let mut col: Vec<f64> = (0..n).map(|i| inv_sqrt[i] * eig.eigenvectors[(i, k)]).collect();
        let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        col.iter_mut().for_each(|x| *x /= norm);
        fix_sign(&mut col);
        for i in 0..n {
            phi[(i, k)] = col[i];
        }
    }
    Ok(DiffusionOperatorBundle {
        affinity: w.clone(),
        degrees,
        eigenvalues: eig.eigenvalues,
        eigenvectors: phi,
    })
}

/// Diffusion-map coordinates of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionEmbedding {
    pub layer_index: usize,
    /// `N x k`
    pub coords: DenseMatrix,
    /// `λ_2..λ_{k+1}`
    pub eigenvalues_used: Vec<f64>,
    pub t: f64,
}

impl DiffusionEmbedding {
    pub fn n(&self) -> usize {
        self.coords.rows()
    }

    pub fn k(&self) -> usize {
        self.coords.cols()
    }
}

/// Column `j` of the result is `λ_{j+2}^t · φ_{j+2}` (1-based eigen-indices;
/// the trivial pair is skipped).
pub fn diffusion_map(bundle: &DiffusionOperatorBundle, k: usize, t: f64) -> Result<DiffusionEmbedding> {
    bundle.check_k(k)?;
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::invalid(format!("diffusion time must be >= 0, got {t}")));
    }
    let n = bundle.n();
    let mut coords = DenseMatrix::zeros(n, k);
    let mut used = Vec::with_capacity(k);
    for j in 0..k {
        let lambda = bundle.eigenvalues[j + 1];
        let s = signed_pow(lambda, t);
        used.push(lambda);
        for i in 0..n {
            coords[(i, j)] = s * bundle.eigenvectors[(i, j + 1)];
        }
    }
    Ok(DiffusionEmbedding {
        layer_index: 0,
        coords,
        eigenvalues_used: used,
        t,
    })
}

/// `sqrt(Σ_{m=2}^{k+1} λ_m^{2t} (φ_m(i) − φ_m(j))²)`
pub fn diffusion_distance(bundle: &DiffusionOperatorBundle, i: usize, j: usize, k: usize, t: f64) -> Result<f64> {
    bundle.check_k(k)?;
    let n = bundle.n();
    if i >= n || j >= n {
        return Err(Error::invalid(format!("point index out of range 0..{n}")));
    }
    let mut s = 0.0;
    for m in 1..=k {
        let w = signed_pow(bundle.eigenvalues[m], t);
        let d = bundle.eigenvectors[(i, m)] - bundle.eigenvectors[(j, m)];
        s += w * w * d * d;
    }
    Ok(s.sqrt())
}

/// Per-layer record of the parameters an embedding was built with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingDiagnostics {
    pub layer_index: usize,
    pub sigma: f64,
    pub k: usize,
    pub t: f64,
    pub eigenvalues: Vec<f64>,
}

/// Affinity, decomposition and diffusion map for one activation matrix.
pub fn embed_activations(acts: &ActivationMatrix, cfg: &ManifoldConfig) -> Result<(DiffusionEmbedding, EmbeddingDiagnostics)> {
    cfg.validate()?;
    let n = acts.n_inputs();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    if cfg.k + 1 > n {
        return Err(Error::invalid(format!(
            "embedding dimension {} needs at least {} inputs, got {n}",
            cfg.k,
            cfg.k + 1
        )));
    }
    let (w, sigma) = build_affinity(&acts.data, cfg.sigma)?;
    let bundle = diffusion_decompose(&w)?;
    let mut emb = diffusion_map(&bundle, cfg.k, cfg.t)?;
    emb.layer_index = acts.layer_index;
    let diag = EmbeddingDiagnostics {
        layer_index: acts.layer_index,
        sigma,
        k: cfg.k,
        t: cfg.t,
        eigenvalues: bundle.eigenvalues[..=cfg.k].to_vec(),
    };
    Ok((emb, diag))
}

/// Embeds each layer independently (in parallel); output order matches input.
pub fn embed_layers(
    layers: &[ActivationMatrix],
    cfg: &ManifoldConfig,
) -> Result<(Vec<DiffusionEmbedding>, Vec<EmbeddingDiagnostics>)> {
    let results: Vec<_> = layers
        .par_iter()
        .map(|a| embed_activations(a, cfg))
        .collect::<Result<_>>()?;
    Ok(results.into_iter().unzip())
}

/// Container image with `layer.{i}.embedding` tensors of shape `[N, k]`.
pub fn embeddings_to_file(embs: &[DiffusionEmbedding], diags: &[EmbeddingDiagnostics], cfg: &ManifoldConfig) -> TensorFile {
    let mut f = TensorFile::new(json!({
        "kind": "embeddings",
        "sigma_mode": cfg.sigma,
        "k": cfg.k,
        "t": cfg.t,
        "layers": diags,
    }));
    for e in embs {
        f.push(
            format!("layer.{}.embedding", e.layer_index),
            Tensor::from_f64(vec![e.n(), e.k()], e.coords.as_slice()),
        );
    }
    f
}

pub fn save_embeddings(
    embs: &[DiffusionEmbedding],
    diags: &[EmbeddingDiagnostics],
    cfg: &ManifoldConfig,
    path: &Path,
) -> Result<()> {
    embeddings_to_file(embs, diags, cfg).write(path)
}
