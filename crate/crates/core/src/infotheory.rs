//! Gaussian entropy, mutual information, normalized MI and the Information
//! Bottleneck objective for merging two layers.
//!
//! Everything assumes the embeddings are jointly Gaussian, so all quantities
//! reduce to log-determinants of sample covariances.

use std::f64::consts::{E, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_logdet, covariance, Cholesky, DenseMatrix};

/// Diagonal regularizer added before every log-determinant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ridge {
    Absolute(f64),
    /// `factor · trace(Σ)/d`, resolved separately for each covariance block.
    Relative(f64),
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge::Relative(1e-6)
    }
}

impl From<f64> for Ridge {
    fn from(r: f64) -> Self {
        Ridge::Absolute(r)
    }
}

impl Ridge {
    pub fn resolve(&self, s: &DenseMatrix) -> f64 {
        match *self {
            Ridge::Absolute(r) => r,
            Ridge::Relative(f) => {
                if s.rows() == 0 {
                    0.0
                } else {
                    f * s.trace() / s.rows() as f64
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let v = match *self {
            Ridge::Absolute(r) | Ridge::Relative(r) => r,
        };
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::invalid(format!("ridge must be finite and >= 0, got {v}")));
        }
        Ok(())
    }
}

/// Marginal, cross and joint covariances of two embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceBundle {
    pub sigma_l: DenseMatrix,
    pub sigma_m: DenseMatrix,
    /// `Cov(Ψ^l, Ψ^m)`, `d_l x d_m`
    pub sigma_lm: DenseMatrix,
    /// `[[Σ_l, Σ_lm], [Σ_lmᵀ, Σ_m]]`
    pub joint: DenseMatrix,
    pub n: usize,
}

impl CovarianceBundle {
    pub fn from_parts(sigma_l: DenseMatrix, sigma_m: DenseMatrix, sigma_lm: DenseMatrix, n: usize) -> Result<Self> {
        let (dl, dm) = (sigma_l.rows(), sigma_m.rows());
        if !sigma_l.is_square() || !sigma_m.is_square() || sigma_lm.rows() != dl || sigma_lm.cols() != dm {
            return Err(Error::invalid("covariance blocks are not conformable"));
        }
        if !sigma_l.is_symmetric(1e-12) || !sigma_m.is_symmetric(1e-12) {
            return Err(Error::invalid("marginal covariances must be symmetric"));
        }
        let mut joint = DenseMatrix::zeros(dl + dm, dl + dm);
        joint.set_block(0, 0, &sigma_l);
        joint.set_block(0, dl, &sigma_lm);
        joint.set_block(dl, 0, &sigma_lm.transpose());
        joint.set_block(dl, dl, &sigma_m);
        Ok(Self {
            sigma_l,
            sigma_m,
            sigma_lm,
            joint,
            n,
        })
    }

    /// Sample covariances of paired rows of `a` (`N x d_l`) and `b` (`N x d_m`).
    pub fn from_embeddings(a: &DenseMatrix, b: &DenseMatrix) -> Result<Self> {
        if a.rows() != b.rows() {
            return Err(Error::invalid(format!(
                "embeddings have different sample counts ({} vs {})",
                a.rows(),
                b.rows()
            )));
        }
        let (dl, dm) = (a.cols(), b.cols());
        let n = a.rows();
        if n < 2 * (dl + dm) {
            log::warn!("covariance of {} dims from only {n} samples", dl + dm);
        }
        let joint = covariance(&a.hstack(b)?)?;
        Ok(Self {
            sigma_l: joint.block(0, 0, dl, dl),
            sigma_m: joint.block(dl, dl, dm, dm),
            sigma_lm: joint.block(0, dl, dl, dm),
            joint,
            n,
        })
    }

    pub fn swapped(&self) -> Self {
        Self::from_parts(self.sigma_m.clone(), self.sigma_l.clone(), self.sigma_lm.transpose(), self.n)
            .expect("blocks of a valid bundle")
    }

    fn ridges(&self, ridge: Ridge) -> (f64, f64) {
        (ridge.resolve(&self.sigma_l), ridge.resolve(&self.sigma_m))
    }
}

/// Covariances of a target variable `Y` with both layers.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetCovariances {
    pub sigma_y: DenseMatrix,
    /// `Cov(Ψ^l, Y)`, `d x d_y`
    pub sigma_ly: DenseMatrix,
    pub sigma_my: DenseMatrix,
}

impl TargetCovariances {
    /// Returns the pair bundle together with its target covariances.
    pub fn from_embeddings(a: &DenseMatrix, b: &DenseMatrix, y: &DenseMatrix) -> Result<(CovarianceBundle, Self)> {
        if a.rows() != y.rows() {
            return Err(Error::invalid("target has a different sample count"));
        }
        let (dl, dm, dy) = (a.cols(), b.cols(), y.cols());
        let all = covariance(&a.hstack(b)?.hstack(y)?)?;
        let bundle = CovarianceBundle::from_parts(
            all.block(0, 0, dl, dl),
            all.block(dl, dl, dm, dm),
            all.block(0, dl, dl, dm),
            a.rows(),
        )?;
        let target = Self {
            sigma_y: all.block(dl + dm, dl + dm, dy, dy),
            sigma_ly: all.block(0, dl + dm, dl, dy),
            sigma_my: all.block(dl, dl + dm, dm, dy),
        };
        Ok((bundle, target))
    }
}

/// `½[d·ln(2πe) + ln|Σ + ridge·I|]`
pub fn gaussian_entropy(sigma: &DenseMatrix, ridge: f64) -> Result<f64> {
    if !sigma.is_symmetric(1e-12) {
        return Err(Error::invalid("covariance must be symmetric"));
    }
    let d = sigma.rows() as f64;
    Ok(0.5 * (d * (2.0 * PI * E).ln() + cholesky_logdet(sigma, ridge)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MutualInformation {
    /// Clamped at 0.
    pub value: f64,
    /// Before clamping; may be slightly negative from estimation noise.
    pub raw: f64,
}

/// `½[ln|Σ_l| + ln|Σ_m| − ln|Σ_joint|]`, each block with its own ridge.
pub fn gaussian_mi(bundle: &CovarianceBundle, ridge: impl Into<Ridge>) -> Result<MutualInformation> {
    let ridge = ridge.into();
    ridge.validate()?;
    let (rl, rm) = bundle.ridges(ridge);
    let dl = bundle.sigma_l.rows();
    let mut joint = bundle.joint.clone();
    for i in 0..joint.rows() {
        joint[(i, i)] += if i < dl { rl } else { rm };
    }
    let raw = 0.5
        * (cholesky_logdet(&bundle.sigma_l, rl)? + cholesky_logdet(&bundle.sigma_m, rm)?
            - cholesky_logdet(&joint, 0.0)?);
    Ok(MutualInformation {
        value: raw.max(0.0),
        raw,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmiResult {
    pub value: f64,
    pub mi: f64,
    pub mi_raw: f64,
    pub h_l: f64,
    pub h_m: f64,
    /// Set when an entropy was ≤ 0 and `I/(I+1)` was used instead.
    pub fallback: bool,
}

/// `I/√(H_l H_m)` clamped to `[0, 1]`, or `I/(I+1)` if either entropy is ≤ 0.
pub fn nmi(bundle: &CovarianceBundle, ridge: impl Into<Ridge>) -> Result<NmiResult> {
    let ridge = ridge.into();
    let mi = gaussian_mi(bundle, ridge)?;
    let (rl, rm) = bundle.ridges(ridge);
    let h_l = gaussian_entropy(&bundle.sigma_l, rl)?;
    let h_m = gaussian_entropy(&bundle.sigma_m, rm)?;
    let i = mi.value;
    let (value, fallback) = if h_l > 0.0 && h_m > 0.0 {
        ((i / (h_l * h_m).sqrt()).clamp(0.0, 1.0), false)
    } else {
        (i / (i + 1.0), true)
    };
    Ok(NmiResult {
        value,
        mi: i,
        mi_raw: mi.raw,
        h_l,
        h_m,
        fallback,
    })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must be in [0,1], got {alpha}")));
    }
    Ok(())
}

fn same_dims(bundle: &CovarianceBundle) -> Result<()> {
    if bundle.sigma_l.rows() != bundle.sigma_m.rows() {
        return Err(Error::invalid("merging needs embeddings of equal dimension"));
    }
    Ok(())
}

/// `α²Σ_l + (1−α)²Σ_m + α(1−α)(Σ_lm + Σ_lmᵀ)`
pub fn merged_covariance(bundle: &CovarianceBundle, alpha: f64) -> Result<DenseMatrix> {
    check_alpha(alpha)?;
    same_dims(bundle)?;
    if alpha == 1.0 {
        return Ok(bundle.sigma_l.clone());
    }
    if alpha == 0.0 {
        return Ok(bundle.sigma_m.clone());
    }
    let b = 1.0 - alpha;
    let cross = bundle.sigma_lm.add(&bundle.sigma_lm.transpose())?;
    Ok(bundle
        .sigma_l
        .scale(alpha * alpha)
        .add(&bundle.sigma_m.scale(b * b))?
        .add(&cross.scale(alpha * b))?
        .symmetrized())
}

/// `Σ_c − Σ_cY (Σ_Y + ridge·I)⁻¹ Σ_cYᵀ`
pub fn conditional_covariance(
    sigma_c: &DenseMatrix,
    sigma_cy: &DenseMatrix,
    sigma_y: &DenseMatrix,
    ridge: f64,
) -> Result<DenseMatrix> {
    if sigma_cy.rows() != sigma_c.rows() || sigma_cy.cols() != sigma_y.rows() || !sigma_y.is_square() {
        return Err(Error::invalid("conditional covariance blocks are not conformable"));
    }
    let chol = Cholesky::factor(sigma_y, ridge)?;
    let k = chol.solve(&sigma_cy.transpose())?;
    Ok(sigma_c.sub(&sigma_cy.matmul(&k)?)?.symmetrized())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IBEvaluation {
    pub alpha: f64,
    pub objective: f64,
    pub logdet_c: f64,
    pub logdet_c_given_y: f64,
}

fn merged_target(target: &TargetCovariances, alpha: f64) -> Result<DenseMatrix> {
    target.sigma_ly.scale(alpha).add(&target.sigma_my.scale(1.0 - alpha))
}

/// `½[(1−β)·ln|Σ_c| + β·ln|Σ_{c|Y}|]` with `ridge` on every inverse and
/// log-determinant.
pub fn ib_objective(
    bundle: &CovarianceBundle,
    target: &TargetCovariances,
    alpha: f64,
    beta: f64,
    ridge: f64,
) -> Result<IBEvaluation> {
    if !(beta > 0.0) {
        return Err(Error::invalid(format!("beta must be > 0, got {beta}")));
    }
    let sc = merged_covariance(bundle, alpha)?;
    let scy = merged_target(target, alpha)?;
    let cond = conditional_covariance(&sc, &scy, &target.sigma_y, ridge)?;
    let logdet_c = cholesky_logdet(&sc, ridge)?;
    let logdet_c_given_y = cholesky_logdet(&cond, ridge)?;
    let objective = 0.5 * ((1.0 - beta) * logdet_c + beta * logdet_c_given_y);
    if !objective.is_finite() {
        return Err(Error::Numerical("IB objective is not finite".into()));
    }
    Ok(IBEvaluation {
        alpha,
        objective,
        logdet_c,
        logdet_c_given_y,
    })
}

fn trace_of_product(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for k in 0..n {
            s += a[(i, k)] * b[(k, i)];
        }
    }
    s
}

/// `∂L_IB/∂α` from the trace formula, with `Σ_{c|Y}` differentiated through
/// `Σ_cY`.
pub fn ib_objective_gradient(
    bundle: &CovarianceBundle,
    target: &TargetCovariances,
    alpha: f64,
    beta: f64,
    ridge: f64,
) -> Result<f64> {
    check_alpha(alpha)?;
    same_dims(bundle)?;
    let sc = merged_covariance(bundle, alpha)?;
    let cross = bundle.sigma_lm.add(&bundle.sigma_lm.transpose())?;
    let dsc = bundle
        .sigma_l
        .scale(2.0 * alpha)
        .sub(&bundle.sigma_m.scale(2.0 * (1.0 - alpha)))?
        .add(&cross.scale(1.0 - 2.0 * alpha))?;
    let scy = merged_target(target, alpha)?;
    let dscy = target.sigma_ly.sub(&target.sigma_my)?;

    let ychol = Cholesky::factor(&target.sigma_y, ridge)?;
    // (Σ_Y + r)⁻¹ Σ_cYᵀ and (Σ_Y + r)⁻¹ dΣ_cYᵀ
    let k = ychol.solve(&scy.transpose())?;
    let dk = ychol.solve(&dscy.transpose())?;
    let cond = sc.sub(&scy.matmul(&k)?)?.symmetrized();
    let dcond = dsc.sub(&dscy.matmul(&k)?)?.sub(&scy.matmul(&dk)?)?;

    let inv_c = Cholesky::factor(&sc, ridge)?.inverse();
    let inv_cond = Cholesky::factor(&cond, ridge)?.inverse();
    Ok(0.5 * ((1.0 - beta) * trace_of_product(&inv_c, &dsc) + beta * trace_of_product(&inv_cond, &dcond)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    /// `Y` is the deepest live layer's embedding.
    FinalLayerEmbedding,
    /// `Y` is the one-hot next token, randomly projected to `k` dims.
    TaskLabels,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaMode {
    NmiHeuristic,
    GridSearch(usize),
    Fixed(f64),
}

impl std::str::FromStr for AlphaMode {
    type Err = Error;

    /// `nmi`, `grid:<steps>` or `fixed:<value>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("bad alpha mode {s:?} (expected nmi, grid:<steps> or fixed:<value>)"));
        let mode = match s.split_once(':') {
            None if s == "nmi" || s == "nmi-heuristic" => AlphaMode::NmiHeuristic,
            Some(("grid", n)) => AlphaMode::GridSearch(n.parse().map_err(|_| bad())?),
            Some(("fixed", v)) => AlphaMode::Fixed(v.parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        };
        mode.validate()?;
        Ok(mode)
    }
}

impl AlphaMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AlphaMode::GridSearch(steps) if steps < 2 => Err(Error::invalid("grid search needs at least 2 steps")),
            AlphaMode::Fixed(v) if !(0.0..=1.0).contains(&v) => {
                Err(Error::invalid(format!("fixed alpha must be in [0,1], got {v}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IBConfig {
    pub beta: f64,
    pub target_mode: TargetMode,
    pub alpha_mode: AlphaMode,
}

impl Default for IBConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            target_mode: TargetMode::FinalLayerEmbedding,
            alpha_mode: AlphaMode::NmiHeuristic,
        }
    }
}

impl IBConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::invalid(format!("beta must be > 0, got {}", self.beta)));
        }
        self.alpha_mode.validate()
    }
}

/// Pair covariances plus the optional target needed by grid search.
#[derive(Clone, Debug)]
pub struct AlphaProblem<'a> {
    pub bundle: &'a CovarianceBundle,
    pub target: Option<&'a TargetCovariances>,
    pub ridge: f64,
}

pub fn select_alpha(similarity: f64, problem: &AlphaProblem<'_>, cfg: &IBConfig) -> Result<(f64, Option<IBEvaluation>)> {
    cfg.validate()?;
    match cfg.alpha_mode {
        AlphaMode::NmiHeuristic => Ok((similarity.clamp(0.0, 1.0), None)),
        AlphaMode::Fixed(v) => Ok((v, None)),
        AlphaMode::GridSearch(steps) => {
            let target = problem.target.ok_or(Error::MissingTarget)?;
            let mut best: Option<IBEvaluation> = None;
            for i in 0..steps {
                let alpha = i as f64 / (steps - 1) as f64;
                let ev = ib_objective(problem.bundle, target, alpha, cfg.beta, problem.ridge)?;
                if best.is_none_or(|b| ev.objective < b.objective) {
                    best = Some(ev);
                }
            }
            let best = best.expect("steps >= 2");
            Ok((best.alpha, Some(best)))
        }
    }
}
