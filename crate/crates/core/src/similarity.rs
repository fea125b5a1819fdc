//! Layer-by-layer similarity matrices and merge-candidate selection.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infotheory::{nmi, CovarianceBundle, NmiResult, Ridge};
use crate::linalg::{covariance, median, Cholesky, DenseMatrix};
use crate::manifold::DiffusionEmbedding;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Measure {
    Nmi,
    Cosine,
    EuclideanRbf,
    MahalanobisRbf,
}

impl std::str::FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nmi" => Ok(Self::Nmi),
            "cosine" => Ok(Self::Cosine),
            "euclidean-rbf" | "euclidean" => Ok(Self::EuclideanRbf),
            "mahalanobis-rbf" | "mahalanobis" => Ok(Self::MahalanobisRbf),
            other => Err(Error::invalid(format!(
                "unknown similarity measure {other:?} (expected nmi, cosine, euclidean-rbf or mahalanobis-rbf)"
            ))),
        }
    }
}

impl std::fmt::Display for Measure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Nmi => "nmi",
            Self::Cosine => "cosine",
            Self::EuclideanRbf => "euclidean-rbf",
            Self::MahalanobisRbf => "mahalanobis-rbf",
        })
    }
}

/// Which layer pairs may be merged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidatePairs {
    #[default]
    Adjacent,
    Arbitrary,
}

impl std::str::FromStr for CandidatePairs {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adjacent" => Ok(Self::Adjacent),
            "arbitrary" => Err(Error::invalid(
                "arbitrary-pair merging is not supported: a merged pair of non-adjacent layers has no \
                 position in a sequential stack, so only depth-adjacent pairs are candidates",
            )),
            other => Err(Error::invalid(format!("unknown candidate mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimilarityParams {
    pub ridge: Ridge,
}

/// Values the measure was calibrated with.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimilarityDiagnostics {
    pub ridge: Ridge,
    /// Median mean-squared distance used by the RBF measures.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rbf_scale: Option<f64>,
    /// Per upper-triangle pair `(i, j, result)` for the NMI measure.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub nmi: Vec<(usize, usize, NmiResult)>,
}

impl SimilarityDiagnostics {
    pub fn fallback_count(&self) -> usize {
        self.nmi.iter().filter(|(_, _, r)| r.fallback).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimilarityMatrix {
    /// Layer id of each row/column.
    pub layer_ids: Vec<usize>,
    pub values: DenseMatrix,
    pub measure: Measure,
    pub params: SimilarityDiagnostics,
}

impl SimilarityMatrix {
    pub fn size(&self) -> usize {
        self.layer_ids.len()
    }

    pub fn position(&self, id: usize) -> Option<usize> {
        self.layer_ids.iter().position(|&x| x == id)
    }

    /// Score between layer ids `a` and `b`.
    pub fn get(&self, a: usize, b: usize) -> Option<f64> {
        Some(self.values[(self.position(a)?, self.position(b)?)])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer");
        for id in &self.layer_ids {
            write!(s, ",{id}").unwrap();
        }
        s.push('\n');
        for (i, id) in self.layer_ids.iter().enumerate() {
            write!(s, "{id}").unwrap();
            for j in 0..self.size() {
                write!(s, ",{:.6}", self.values[(i, j)]).unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// Plain PGM (P2) heatmap with values scaled linearly to 0..=255.
    pub fn to_pgm(&self) -> String {
        let n = self.size();
        let mut s = format!("P2\n{n} {n}\n255\n");
        for i in 0..n {
            let row: Vec<String> = (0..n)
                .map(|j| ((self.values[(i, j)].clamp(0.0, 1.0) * 255.0).round() as u8).to_string())
                .collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

fn mean_cosine(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    let n = a.rows();
    let c: f64 = (0..n).map(|i| cosine(a.row(i), b.row(i))).sum::<f64>() / n as f64;
    (c + 1.0) / 2.0
}

fn mean_sq_dist(a: &DenseMatrix, b: &DenseMatrix, metric: Option<&Cholesky>) -> Result<f64> {
    let n = a.rows();
    let diff = a.sub(b)?;
    let total = match metric {
        None => diff.as_slice().iter().map(|x| x * x).sum::<f64>(),
        Some(chol) => {
            // Σ_i dᵢᵀ Σ⁻¹ dᵢ = tr(D Σ⁻¹ Dᵀ)
            let sol = chol.solve(&diff.transpose())?;
            (0..n)
                .map(|i| diff.row(i).iter().enumerate().map(|(k, v)| v * sol[(k, i)]).sum::<f64>())
                .sum()
        }
    };
    Ok(total / n as f64)
}

fn upper_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect()
}

/// `L x L` matrix of pairwise layer scores; diagonal fixed at 1.
pub fn build_similarity_matrix(
    embeddings: &[DiffusionEmbedding],
    measure: Measure,
    params: &SimilarityParams,
) -> Result<SimilarityMatrix> {
    let l = embeddings.len();
    if l < 2 {
        return Err(Error::invalid("similarity needs at least 2 layers"));
    }
    let (n, k) = (embeddings[0].n(), embeddings[0].k());
    if embeddings.iter().any(|e| e.n() != n || e.k() != k) {
        return Err(Error::invalid("all embeddings must share sample count and dimension"));
    }
    let pairs = upper_pairs(l);
    let mut diag = SimilarityDiagnostics {
        ridge: params.ridge,
        ..Default::default()
    };
    let scores: Vec<f64> = match measure {
        Measure::Nmi => {
            let results: Vec<NmiResult> = pairs
                .par_iter()
                .map(|&(i, j)| {
                    let b = CovarianceBundle::from_embeddings(&embeddings[i].coords, &embeddings[j].coords)?;
                    nmi(&b, params.ridge)
                })
                .collect::<Result<_>>()?;
            let scores = results.iter().map(|r| r.value).collect();
            diag.nmi = pairs.iter().zip(results).map(|(&(i, j), r)| (i, j, r)).collect();
            scores
        }
        Measure::Cosine => pairs
            .par_iter()
            .map(|&(i, j)| mean_cosine(&embeddings[i].coords, &embeddings[j].coords))
            .collect(),
        Measure::EuclideanRbf | Measure::MahalanobisRbf => {
            let chol = if measure == Measure::MahalanobisRbf {
                let mut pooled = DenseMatrix::zeros(k, k);
                for e in embeddings {
                    pooled = pooled.add(&covariance(&e.coords)?)?;
                }
                let pooled = pooled.scale(1.0 / l as f64);
                let r = params.ridge.resolve(&pooled);
                Some(Cholesky::factor(&pooled, r)?)
            } else {
                None
            };
            let dists: Vec<f64> = pairs
                .par_iter()
                .map(|&(i, j)| mean_sq_dist(&embeddings[i].coords, &embeddings[j].coords, chol.as_ref()))
                .collect::<Result<_>>()?;
            let scale = median(&mut dists.clone()).unwrap_or(0.0);
            diag.rbf_scale = Some(scale);
            dists
                .iter()
                .map(|&d| if d == 0.0 { 1.0 } else if scale > 0.0 { (-d / scale).exp() } else { 0.0 })
                .collect()
        }
    };

    let mut values = DenseMatrix::identity(l);
    for (&(i, j), &s) in pairs.iter().zip(&scores) {
        let s = s.clamp(0.0, 1.0);
        values[(i, j)] = s;
        values[(j, i)] = s;
    }
    Ok(SimilarityMatrix {
        layer_ids: embeddings.iter().map(|e| e.layer_index).collect(),
        values,
        measure,
        params: diag,
    })
}

/// Selected merge candidate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairChoice {
    pub lower: usize,
    pub upper: usize,
    pub score: f64,
}

/// Highest-scoring depth-adjacent pair of `active` layer ids for which
/// `allowed` holds; ties go to the deepest pair.
pub fn best_adjacent_pair_where(
    s: &SimilarityMatrix,
    active: &[usize],
    allowed: impl Fn(usize, usize) -> bool,
) -> Result<PairChoice> {
    if active.len() < 2 {
        return Err(Error::Exhausted);
    }
    let mut best: Option<PairChoice> = None;
    for w in active.windows(2) {
        let (a, b) = (w[0], w[1]);
        if !allowed(a, b) {
            continue;
        }
        let score = s
            .get(a, b)
            .ok_or_else(|| Error::invalid(format!("layer pair ({a}, {b}) is not in the similarity matrix")))?;
        if best.is_none_or(|c| score >= c.score) {
            best = Some(PairChoice {
                lower: a,
                upper: b,
                score,
            });
        }
    }
    best.ok_or(Error::Exhausted)
}

pub fn most_similar_adjacent_pair(s: &SimilarityMatrix, active: &[usize]) -> Result<PairChoice> {
    best_adjacent_pair_where(s, active, |_, _| true)
}
