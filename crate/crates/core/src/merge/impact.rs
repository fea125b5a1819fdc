use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{power_iteration_max_eig, DenseMatrix};
use crate::model::{flatten_params, loss_and_gradient, LayerParams, ModelCheckpoint, Stream, ToyTask};

/// Scalar loss over a flat parameter vector.
pub trait DifferentiableLoss {
    fn dim(&self) -> usize;
    fn loss(&self, theta: &[f64]) -> Result<f64>;
    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>>;
}

/// `½θᵀHθ`
#[derive(Clone, Debug)]
pub struct QuadraticLoss {
    pub hessian: DenseMatrix,
}

impl DifferentiableLoss for QuadraticLoss {
    fn dim(&self) -> usize {
        self.hessian.rows()
    }

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        let h = self.hessian.matvec(theta);
        Ok(0.5 * theta.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>())
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.hessian.matvec(theta))
    }
}

/// Mean next-token loss of a model architecture on fixed sequences.
pub struct ModelLoss<'a> {
    pub template: &'a ModelCheckpoint,
    pub sequences: Vec<Vec<u32>>,
}

impl DifferentiableLoss for ModelLoss<'_> {
    fn dim(&self) -> usize {
        flatten_params(self.template).len()
    }

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        Ok(loss_and_gradient(self.template, theta, &self.sequences)?.0)
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(loss_and_gradient(self.template, theta, &self.sequences)?.1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpactSettings {
    /// Sequences in the fixed evaluation batch.
    pub n_sequences: usize,
    pub power_iters: usize,
    /// Step of the central difference used for Hessian-vector products.
    pub fd_step: f64,
    pub seed: u64,
}

impl Default for ImpactSettings {
    fn default() -> Self {
        Self {
            n_sequences: 16,
            power_iters: 20,
            fd_step: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossImpactReport {
    pub delta_theta_norm: f64,
    pub lambda_max: f64,
    /// `½·λ_max·‖δθ‖²`
    pub bound: f64,
    pub observed: f64,
    pub bound_satisfied: bool,
}

/// Bound and observed loss change of moving from `theta` to `theta_new`.
pub fn loss_impact_with(
    loss: &dyn DifferentiableLoss,
    theta: &[f64],
    theta_new: &[f64],
    settings: &ImpactSettings,
) -> Result<LossImpactReport> {
    let dim = loss.dim();
    if theta.len() != dim || theta_new.len() != dim {
        return Err(Error::invalid("parameter vectors do not match the loss dimension"));
    }
    if !(settings.fd_step > 0.0) {
        return Err(Error::invalid("finite-difference step must be > 0"));
    }
    let h = settings.fd_step;
    let mut plus = theta.to_vec();
    let mut minus = theta.to_vec();
    let hvp = |v: &[f64], out: &mut [f64]| -> Result<()> {
        for i in 0..dim {
            plus[i] = theta[i] + h * v[i];
            minus[i] = theta[i] - h * v[i];
        }
        let gp = loss.gradient(&plus)?;
        let gm = loss.gradient(&minus)?;
        for i in 0..dim {
            out[i] = (gp[i] - gm[i]) / (2.0 * h);
        }
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite Hessian-vector product".into()));
        }
        Ok(())
    };
    let lambda_max = power_iteration_max_eig(hvp, dim, settings.power_iters, settings.seed)?;
    let norm = theta
        .iter()
        .zip(theta_new)
        .map(|(a, b)| (b - a) * (b - a))
        .sum::<f64>()
        .sqrt();
    let observed = loss.loss(theta_new)? - loss.loss(theta)?;
    if !observed.is_finite() {
        return Err(Error::Numerical("loss is not finite".into()));
    }
    let bound = 0.5 * lambda_max * norm * norm;
    Ok(LossImpactReport {
        delta_theta_norm: norm,
        lambda_max,
        bound,
        observed,
        bound_satisfied: observed <= bound + 1e-8 * bound.abs().max(1e-12),
    })
}

/// Places `merged` layers at their original block positions
/// (`surviving[i]` holds merged layer `i`) and zeros the deleted blocks.
pub fn align_to_original(original: &ModelCheckpoint, merged: &ModelCheckpoint, surviving: &[usize]) -> Result<ModelCheckpoint> {
    if surviving.len() != merged.n_layers() || surviving.iter().any(|&b| b >= original.n_layers()) {
        return Err(Error::invalid("surviving block list does not match the merged model"));
    }
    if surviving.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("surviving blocks must be strictly increasing"));
    }
    let mut out = merged.clone();
    out.config = original.config.clone();
    out.layers = vec![LayerParams::zeros(&original.config); original.n_layers()];
    for (layer, &b) in merged.layers.iter().zip(surviving) {
        out.layers[b] = layer.clone();
    }
    out.validate()?;
    Ok(out)
}

/// Loss-change bound for replacing `original` by `merged`, measured in the
/// original parameter space on the first `n_sequences` eval sequences.
pub fn loss_impact(
    original: &ModelCheckpoint,
    merged: &ModelCheckpoint,
    surviving: &[usize],
    task: &ToyTask,
    settings: &ImpactSettings,
) -> Result<LossImpactReport> {
    let aligned = align_to_original(original, merged, surviving)?;
    let loss = ModelLoss {
        template: original,
        sequences: task.sequences(Stream::Eval, 0, settings.n_sequences.max(1)),
    };
    loss_impact_with(&loss, &flatten_params(original), &flatten_params(&aligned), settings)
}
