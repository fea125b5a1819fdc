//! Layer merging: the similarity-driven merge loop, simple baselines,
//! compression accounting, quantization and the second-order loss bound.

mod impact;
mod quant;

use std::collections::BTreeSet;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::infotheory::{select_alpha, AlphaMode, AlphaProblem, IBConfig, IBEvaluation, TargetCovariances, TargetMode};
use crate::linalg::DenseMatrix;
use crate::manifold::{embed_layers, DiffusionEmbedding, ManifoldConfig};
use crate::model::{forward_with_capture, LayerParams, ModelCheckpoint, Pool, Stream, ToyTask};
use crate::rng;
use crate::similarity::{best_adjacent_pair_where, build_similarity_matrix, Measure, SimilarityMatrix, SimilarityParams};

pub use impact::{
    align_to_original, loss_impact, loss_impact_with, DifferentiableLoss, ImpactSettings, LossImpactReport,
    ModelLoss, QuadraticLoss,
};
pub use quant::{compression_ratio, quantize_rtn, CompressionReport, QuantBits};

/// `α·θ_l + (1−α)·θ_m` for every tensor.
pub fn fuse_layers(l: &LayerParams, m: &LayerParams, alpha: f64) -> Result<LayerParams> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must be in [0,1], got {alpha}")));
    }
    let mut out = l.clone();
    for (dst, src) in out.tensors_mut().into_iter().zip(m.tensors()) {
        if dst.shape != src.shape {
            return Err(Error::invalid(format!(
                "cannot fuse tensors of shape {:?} and {:?}",
                dst.shape, src.shape
            )));
        }
        for (a, &b) in dst.data.iter_mut().zip(&src.data) {
            *a = (alpha * f64::from(*a) + (1.0 - alpha) * f64::from(b)) as f32;
        }
    }
    Ok(out)
}

/// Sequences fed through the model to measure layer similarity.
#[derive(Clone, Debug)]
pub struct CaptureData {
    pub sequences: Vec<Vec<u32>>,
    /// Token following each sequence, used by the task-label IB target.
    pub labels: Option<Vec<u32>>,
    pub pool: Pool,
}

impl CaptureData {
    /// First `n` sequences of the task's capture stream with their next tokens.
    pub fn from_task(task: &ToyTask, n: usize, pool: Pool) -> Self {
        let longer = ToyTask {
            seq_len: task.seq_len + 1,
            ..task.clone()
        };
        let mut sequences = longer.sequences(Stream::Capture, 0, n);
        let labels = sequences.iter_mut().map(|s| s.pop().expect("non-empty")).collect();
        Self {
            sequences,
            labels: Some(labels),
            pool,
        }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopRule {
    /// Merge while the best candidate scores at least `τ`.
    Threshold(f64),
    TargetLayers(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub stop: StopRule,
    pub ib: IBConfig,
    /// A merged layer may take part in later merges.
    pub iterative: bool,
    /// Re-capture and re-embed the model after every merge.
    pub recompute_embeddings: bool,
    pub seed: u64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            stop: StopRule::TargetLayers(1),
            ib: IBConfig::default(),
            iterative: true,
            recompute_embeddings: true,
            seed: 0,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        match self.stop {
            StopRule::Threshold(tau) if !(tau > 0.0 && tau <= 1.0) => {
                return Err(Error::invalid(format!("threshold must be in (0,1], got {tau}")))
            }
            StopRule::TargetLayers(t) if t == 0 || t > n_layers => {
                return Err(Error::invalid(format!("target layers must be in 1..={n_layers}, got {t}")))
            }
            _ => {}
        }
        self.ib.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeStep {
    pub iteration: usize,
    /// Layer ids `(lower, upper)`; the merged layer keeps `lower`.
    pub pair: (usize, usize),
    /// Absent for merges that were not chosen by similarity.
    pub similarity: Option<f64>,
    pub alpha: f64,
    pub retained_after: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub nmi_fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ib: Option<IBEvaluation>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct MergeLog {
    pub config: serde_json::Value,
    pub steps: Vec<MergeStep>,
    pub notice: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub similarity_matrices: Vec<SimilarityMatrix>,
}

impl MergeLog {
    /// One config line, then one line per step.
    pub fn to_jsonl(&self) -> String {
        let mut s = serde_json::to_string(&json!({"config": self.config, "notice": self.notice}))
            .expect("json value");
        s.push('\n');
        for step in &self.steps {
            s.push_str(&serde_json::to_string(step).expect("plain struct"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let head: serde_json::Value = serde_json::from_str(lines.next().ok_or_else(|| Error::invalid("empty merge log"))?)
            .map_err(|e| Error::invalid(format!("merge log header: {e}")))?;
        let steps = lines
            .map(|l| serde_json::from_str(l).map_err(|e| Error::invalid(format!("merge log step: {e}"))))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: head["config"].clone(),
            notice: head["notice"].as_str().map(String::from),
            steps,
            similarity_matrices: Vec::new(),
        })
    }

    /// Original block indices (0-based) of the layers that survive, in order.
    pub fn surviving_blocks(&self, n_layers: usize) -> Result<Vec<usize>> {
        let mut live: Vec<usize> = (1..=n_layers).collect();
        for s in &self.steps {
            let pos = live
                .iter()
                .position(|&x| x == s.pair.1)
                .ok_or_else(|| Error::invalid(format!("merge step refers to dead layer {}", s.pair.1)))?;
            live.remove(pos);
        }
        Ok(live.into_iter().map(|id| id - 1).collect())
    }
}

/// Layer stack tracked by id while merging.
struct Stack {
    model: ModelCheckpoint,
    live: Vec<usize>,
}

impl Stack {
    fn new(ckpt: &ModelCheckpoint) -> Self {
        Self {
            model: ckpt.clone(),
            live: (1..=ckpt.n_layers()).collect(),
        }
    }

    fn merge(&mut self, lower: usize, upper: usize, alpha: f64) -> Result<()> {
        let pl = self.live.iter().position(|&x| x == lower);
        let pm = self.live.iter().position(|&x| x == upper);
        let (Some(pl), Some(pm)) = (pl, pm) else {
            return Err(Error::invalid(format!("layers ({lower}, {upper}) are not both live")));
        };
        if pm != pl + 1 {
            return Err(Error::invalid(format!("layers ({lower}, {upper}) are not adjacent")));
        }
        let fused = fuse_layers(&self.model.layers[pl], &self.model.layers[pm], alpha)?;
        self.model.layers[pl] = fused;
        self.model.layers.remove(pm);
        self.model.config.n_layers -= 1;
        self.live.remove(pm);
        Ok(())
    }
}

/// Applies logged steps to `original`.
pub fn replay(original: &ModelCheckpoint, steps: &[MergeStep]) -> Result<ModelCheckpoint> {
    original.validate()?;
    let mut stack = Stack::new(original);
    for s in steps {
        stack.merge(s.pair.0, s.pair.1, s.alpha)?;
    }
    Ok(stack.model)
}

/// Keeps the first `target_layers` blocks.
pub fn reverse_prune(ckpt: &ModelCheckpoint, target_layers: usize) -> Result<ModelCheckpoint> {
    ckpt.validate()?;
    if target_layers == 0 || target_layers > ckpt.n_layers() {
        return Err(Error::invalid(format!(
            "target layers must be in 1..={}, got {target_layers}",
            ckpt.n_layers()
        )));
    }
    let mut out = ckpt.clone();
    out.layers.truncate(target_layers);
    out.config.n_layers = target_layers;
    Ok(out)
}

/// Back-to-front adjacent merges with a constant `α = lambda_m` on the lower layer.
pub fn fixed_lambda_merge(ckpt: &ModelCheckpoint, lambda_m: f64, target_layers: usize) -> Result<(ModelCheckpoint, MergeLog)> {
    ckpt.validate()?;
    if !(0.0..=1.0).contains(&lambda_m) {
        return Err(Error::invalid(format!("lambda must be in [0,1], got {lambda_m}")));
    }
    if target_layers == 0 || target_layers > ckpt.n_layers() {
        return Err(Error::invalid(format!(
            "target layers must be in 1..={}, got {target_layers}",
            ckpt.n_layers()
        )));
    }
    let mut stack = Stack::new(ckpt);
    let mut log = MergeLog {
        config: json!({"method": "fixed-lambda", "lambda": lambda_m, "target_layers": target_layers}),
        ..Default::default()
    };
    let mut iteration = 0;
    while stack.live.len() > target_layers {
        let n = stack.live.len();
        let (lower, upper) = (stack.live[n - 2], stack.live[n - 1]);
        stack.merge(lower, upper, lambda_m)?;
        log.steps.push(MergeStep {
            iteration,
            pair: (lower, upper),
            similarity: None,
            alpha: lambda_m,
            retained_after: stack.live.len(),
            nmi_fallback: false,
            ib: None,
        });
        iteration += 1;
    }
    Ok((stack.model, log))
}

/// Random projection of one-hot labels to `k` dims.
fn label_target(labels: &[u32], vocab: usize, k: usize, seed: u64) -> Result<DenseMatrix> {
    let mut r = rng::rng_for(seed, &[0x6c61_6265_6c]);
    let normal = Normal::new(0.0, 1.0 / (k as f64).sqrt()).expect("positive std");
    let proj: Vec<f64> = (0..vocab * k).map(|_| normal.sample(&mut r)).collect();
    let mut y = DenseMatrix::zeros(labels.len(), k);
    for (i, &lab) in labels.iter().enumerate() {
        let lab = lab as usize;
        if lab >= vocab {
            return Err(Error::invalid(format!("label {lab} outside vocabulary")));
        }
        y.row_mut(i).copy_from_slice(&proj[lab * k..(lab + 1) * k]);
    }
    Ok(y)
}

struct Snapshot {
    matrix: SimilarityMatrix,
    embeddings: Vec<DiffusionEmbedding>,
}

impl Snapshot {
    fn embedding(&self, id: usize) -> &DiffusionEmbedding {
        self.embeddings
            .iter()
            .find(|e| e.layer_index == id)
            .expect("embedding for every live layer")
    }
}

fn analyse(
    stack: &Stack,
    data: &CaptureData,
    manifold: &ManifoldConfig,
    measure: Measure,
    params: &SimilarityParams,
) -> Result<Snapshot> {
    let out = forward_with_capture(&stack.model, &data.sequences, data.pool)?;
    let mut acts = out.activations;
    acts.remove(0);
    for (a, &id) in acts.iter_mut().zip(&stack.live) {
        a.layer_index = id;
    }
    let (embeddings, _) = embed_layers(&acts, manifold)?;
    let matrix = build_similarity_matrix(&embeddings, measure, params)?;
    Ok(Snapshot { matrix, embeddings })
}

/// Similarity-driven merging of adjacent layers until the stop rule fires.
pub fn mka_compress(
    ckpt: &ModelCheckpoint,
    data: &CaptureData,
    manifold: &ManifoldConfig,
    measure: Measure,
    params: &SimilarityParams,
    cfg: &MergeConfig,
) -> Result<(ModelCheckpoint, MergeLog)> {
    ckpt.validate()?;
    manifold.validate()?;
    cfg.validate(ckpt.n_layers())?;
    let needed = (2 * manifold.k + 2).max(32);
    if data.len() < needed {
        return Err(Error::InsufficientSamples {
            needed,
            got: data.len(),
        });
    }
    let grid = matches!(cfg.ib.alpha_mode, AlphaMode::GridSearch(_));
    let labels_y = match (grid, cfg.ib.target_mode) {
        (true, TargetMode::TaskLabels) => {
            let labels = data.labels.as_ref().ok_or(Error::MissingTarget)?;
            Some(label_target(labels, ckpt.config.vocab_size, manifold.k, cfg.seed)?)
        }
        _ => None,
    };

    let mut log = MergeLog {
        config: json!({
            "method": "mka",
            "merge": cfg,
            "manifold": manifold,
            "measure": measure,
            "similarity": params,
            "capture_inputs": data.len(),
            "pool": data.pool,
        }),
        ..Default::default()
    };
    let mut stack = Stack::new(ckpt);
    let mut consumed = BTreeSet::new();
    let mut snapshot: Option<Snapshot> = None;
    let mut iteration = 0;
    loop {
        if let StopRule::TargetLayers(t) = cfg.stop {
            if stack.live.len() <= t {
                break;
            }
        }
        if stack.live.len() < 2 {
            break;
        }
        if cfg.recompute_embeddings || snapshot.is_none() {
            snapshot = Some(analyse(&stack, data, manifold, measure, params)?);
            log.similarity_matrices.push(snapshot.as_ref().unwrap().matrix.clone());
        }
        let snap = snapshot.as_ref().unwrap();
        let choice = match best_adjacent_pair_where(&snap.matrix, &stack.live, |a, b| {
            cfg.iterative || !(consumed.contains(&a) || consumed.contains(&b))
        }) {
            Ok(c) => c,
            Err(Error::Exhausted) => {
                log.notice = Some(format!("no eligible adjacent pair left at {} layers", stack.live.len()));
                break;
            }
            Err(e) => return Err(e),
        };
        if let StopRule::Threshold(tau) = cfg.stop {
            if choice.score < tau {
                if log.steps.is_empty() {
                    log.notice = Some(format!(
                        "no merges: best pair ({}, {}) scores {:.6} < threshold {tau}",
                        choice.lower, choice.upper, choice.score
                    ));
                }
                break;
            }
        }

        let el = &snap.embedding(choice.lower).coords;
        let em = &snap.embedding(choice.upper).coords;
        let y = match (&labels_y, grid) {
            (Some(y), _) => Some(y.clone()),
            (None, true) => Some(snap.embedding(*stack.live.last().unwrap()).coords.clone()),
            (None, false) => None,
        };
        let (bundle, target) = match &y {
            Some(y) => {
                let (b, t) = TargetCovariances::from_embeddings(el, em, y)?;
                (b, Some(t))
            }
            None => (crate::infotheory::CovarianceBundle::from_embeddings(el, em)?, None),
        };
        let ridge = 0.5 * (params.ridge.resolve(&bundle.sigma_l) + params.ridge.resolve(&bundle.sigma_m));
        let problem = AlphaProblem {
            bundle: &bundle,
            target: target.as_ref(),
            ridge,
        };
        let (alpha, ib) = select_alpha(choice.score, &problem, &cfg.ib)?;

        stack.merge(choice.lower, choice.upper, alpha)?;
        if !cfg.iterative {
            consumed.insert(choice.lower);
            consumed.insert(choice.upper);
        }
        let nmi_fallback = measure == Measure::Nmi
            && snap.matrix.params.nmi.iter().any(|(i, j, r)| {
                r.fallback
                    && snap.matrix.layer_ids[*i] == choice.lower
                    && snap.matrix.layer_ids[*j] == choice.upper
            });
        log::info!(
            "merge {iteration}: layers ({}, {}) similarity {:.6} alpha {alpha:.6}",
            choice.lower,
            choice.upper,
            choice.score
        );
        log.steps.push(MergeStep {
            iteration,
            pair: (choice.lower, choice.upper),
            similarity: Some(choice.score),
            alpha,
            retained_after: stack.live.len(),
            nmi_fallback,
            ib,
        });
        iteration += 1;
    }
    Ok((stack.model, log))
}

#[cfg(test)]
mod tests;
