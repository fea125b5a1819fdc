//! Tiny pre-norm decoder-only transformer: checkpoints, forward pass with
//! per-layer activation capture, toy tasks, training and evaluation.

mod checkpoint;
pub(crate) mod compute;
mod config;
mod task;

use std::path::Path;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use checkpoint::{load_checkpoint, save_checkpoint, LayerParams, ModelCheckpoint, LAYER_TENSORS};
pub use config::ModelConfig;
pub use task::{Stream, TaskKind, ToyTask};

use crate::container::{Tensor, TensorFile};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::rng;
use compute::{next_token_loss, Weights};

pub const INIT_STD: f64 = 0.02;
pub const GRAD_CLIP_NORM: f64 = 1.0;

/// How a sequence's hidden states collapse to one activation vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pool {
    /// Hidden state of the final position.
    #[default]
    Last,
    /// Average over positions.
    Mean,
}

impl std::str::FromStr for Pool {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Pool::Last),
            "mean" => Ok(Pool::Mean),
            other => Err(Error::invalid(format!("unknown pool {other:?} (last|mean)"))),
        }
    }
}

/// One activation vector per input sequence for a single layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMatrix {
    /// 0 is the embedding output; `l >= 1` is the output of block `l`.
    pub layer_index: usize,
    /// `n_inputs x d_model`
    pub data: DenseMatrix,
}

impl ActivationMatrix {
    pub fn n_inputs(&self) -> usize {
        self.data.rows()
    }
}

pub fn init_model(config: &ModelConfig) -> Result<ModelCheckpoint> {
    config.validate()?;
    let (v, d, f, l) = (config.vocab_size, config.d_model, config.d_ff, config.n_layers);
    let mut r = rng::rng_for(config.seed, &[0x696e_6974]);
    let base = Normal::new(0.0, INIT_STD).expect("valid std");
    let resid = Normal::new(0.0, INIT_STD / (l as f64).sqrt()).expect("valid std");
    let mut draw = |shape: Vec<usize>, dist: &Normal<f64>| {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut r)).collect();
        Tensor::from_f64(shape, &data)
    };
    let embedding = draw(vec![v, d], &base);
    let mut layers = Vec::with_capacity(l);
    for _ in 0..l {
        layers.push(LayerParams {
            query: draw(vec![d, d], &base),
            key: draw(vec![d, d], &base),
            value: draw(vec![d, d], &base),
            output: draw(vec![d, d], &resid),
            up: draw(vec![d, f], &base),
            down: draw(vec![f, d], &resid),
            attn_norm: Tensor::new(vec![d], vec![1.0; d])?,
            ffn_norm: Tensor::new(vec![d], vec![1.0; d])?,
        });
    }
    let head = draw(vec![d, v], &base);
    Ok(ModelCheckpoint {
        config: config.clone(),
        embedding,
        layers,
        final_norm: Tensor::new(vec![d], vec![1.0; d])?,
        head,
    })
}

fn check_batch(cfg: &ModelConfig, batch: &[Vec<u32>]) -> Result<()> {
    for (i, seq) in batch.iter().enumerate() {
        if seq.is_empty() {
            return Err(Error::invalid(format!("sequence {i} is empty")));
        }
        if seq.len() > cfg.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence {i} has length {} > max_seq_len {}",
                seq.len(),
                cfg.max_seq_len
            )));
        }
        if let Some(&tok) = seq.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::invalid(format!(
                "token {tok} in sequence {i} is outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
    }
    Ok(())
}

/// Logits for the last position of each sequence and the hidden-state matrices
/// `H⁰..Hᴸ`.
#[derive(Clone, Debug)]
pub struct CaptureOutput {
    /// `N x vocab_size`
    pub logits: DenseMatrix,
    pub activations: Vec<ActivationMatrix>,
}

pub fn forward_with_capture(ckpt: &ModelCheckpoint, batch: &[Vec<u32>], pool: Pool) -> Result<CaptureOutput> {
    ckpt.validate()?;
    check_batch(&ckpt.config, batch)?;
    let w = Weights::from_checkpoint(ckpt);
    let rope = w.rope();
    let cfg = &ckpt.config;
    let d = cfg.d_model;
    let vsz = cfg.vocab_size;
    let per_seq: Vec<(Vec<f64>, Vec<Vec<f64>>)> = batch
        .par_iter()
        .map(|seq| {
            let fw = w.forward_seq(seq, &rope);
            let t = seq.len();
            let logits = fw.logits[(t - 1) * vsz..t * vsz].to_vec();
            let pooled = fw
                .hidden
                .iter()
                .map(|h| match pool {
                    Pool::Last => h[(t - 1) * d..t * d].to_vec(),
                    Pool::Mean => {
                        let mut m = vec![0.0; d];
                        for r in 0..t {
                            for j in 0..d {
                                m[j] += h[r * d + j];
                            }
                        }
                        m.iter_mut().for_each(|x| *x /= t as f64);
                        m
                    }
                })
                .collect();
            (logits, pooled)
        })
        .collect();

    let n = batch.len();
    let mut logits = Vec::with_capacity(n * vsz);
    for (l, _) in &per_seq {
        logits.extend_from_slice(l);
    }
    let activations = (0..=ckpt.n_layers())
        .map(|layer| {
            let mut data = Vec::with_capacity(n * d);
            for (_, pooled) in &per_seq {
                data.extend_from_slice(&pooled[layer]);
            }
            Ok(ActivationMatrix {
                layer_index: layer,
                data: DenseMatrix::new(n, d, data)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(CaptureOutput {
        logits: DenseMatrix::new(n, vsz, logits)?,
        activations,
    })
}

/// Full-sequence logits (`T x vocab`) for each sequence.
pub fn forward_logits(ckpt: &ModelCheckpoint, batch: &[Vec<u32>]) -> Result<Vec<DenseMatrix>> {
    ckpt.validate()?;
    check_batch(&ckpt.config, batch)?;
    let w = Weights::from_checkpoint(ckpt);
    let rope = w.rope();
    batch
        .par_iter()
        .map(|seq| {
            let fw = w.forward_seq(seq, &rope);
            DenseMatrix::new(seq.len(), ckpt.config.vocab_size, fw.logits)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub cross_entropy: f64,
    pub next_token_accuracy: f64,
}

fn check_task(cfg: &ModelConfig, task: &ToyTask) -> Result<()> {
    task.validate()?;
    if task.vocab_size != cfg.vocab_size {
        return Err(Error::invalid(format!(
            "task vocabulary {} does not match model vocabulary {}",
            task.vocab_size, cfg.vocab_size
        )));
    }
    if task.seq_len > cfg.max_seq_len {
        return Err(Error::invalid(format!(
            "task seq_len {} exceeds max_seq_len {}",
            task.seq_len, cfg.max_seq_len
        )));
    }
    Ok(())
}

/// Mean next-token cross-entropy (nats) and greedy accuracy over
/// `n_batches` batches of the task's evaluation stream.
pub fn evaluate(ckpt: &ModelCheckpoint, task: &ToyTask, n_batches: usize) -> Result<EvalMetrics> {
    ckpt.validate()?;
    check_task(&ckpt.config, task)?;
    if n_batches == 0 {
        return Err(Error::invalid("n_batches must be >= 1"));
    }
    let seqs = task.sequences(Stream::Eval, 0, n_batches * task.batch_size);
    evaluate_sequences(ckpt, &seqs)
}

pub fn evaluate_sequences(ckpt: &ModelCheckpoint, seqs: &[Vec<u32>]) -> Result<EvalMetrics> {
    check_batch(&ckpt.config, seqs)?;
    let w = Weights::from_checkpoint(ckpt);
    let rope = w.rope();
    let vsz = ckpt.config.vocab_size;
    let parts: Vec<(f64, usize, usize)> = seqs
        .par_iter()
        .map(|seq| {
            let fw = w.forward_seq(seq, &rope);
            let (loss, correct, count, _) = next_token_loss(&fw.logits, seq, vsz);
            (loss, correct, count)
        })
        .collect();
    let (loss, correct, count) = parts
        .iter()
        .fold((0.0, 0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    if count == 0 {
        return Err(Error::invalid("no next-token predictions in evaluation set"));
    }
    Ok(EvalMetrics {
        cross_entropy: loss / count as f64,
        next_token_accuracy: correct as f64 / count as f64,
    })
}

/// Mean next-token loss over `seqs` and, if requested, its gradient.
/// Per-sequence gradients are reduced in sequence order.
pub(crate) fn batch_loss(w: &Weights, seqs: &[Vec<u32>], with_grad: bool) -> (f64, Option<Weights>) {
    let rope = w.rope();
    let vsz = w.cfg.vocab_size;
    let parts: Vec<(f64, usize, Option<Weights>)> = seqs
        .par_iter()
        .map(|seq| {
            let fw = w.forward_seq(seq, &rope);
            let (loss, _, count, dlogits) = next_token_loss(&fw.logits, seq, vsz);
            let g = with_grad.then(|| w.backward_seq(seq, &fw, &dlogits, &rope));
            (loss, count, g)
        })
        .collect();
    let count: usize = parts.iter().map(|p| p.1).sum();
    let scale = 1.0 / count.max(1) as f64;
    let loss = parts.iter().map(|p| p.0).sum::<f64>() * scale;
    if !with_grad {
        return (loss, None);
    }
    let mut grad = w.zeros_like();
    for (_, _, g) in &parts {
        grad.axpy(scale, g.as_ref().expect("gradient requested"));
    }
    (loss, Some(grad))
}

/// Flat parameter vector of a checkpoint in canonical order.
pub fn flatten_params(ckpt: &ModelCheckpoint) -> Vec<f64> {
    Weights::from_checkpoint(ckpt).flatten()
}

/// Mean loss and flat gradient of `ckpt` evaluated at the flat parameters
/// `params` on `seqs`.
pub fn loss_and_gradient(ckpt: &ModelCheckpoint, params: &[f64], seqs: &[Vec<u32>]) -> Result<(f64, Vec<f64>)> {
    check_batch(&ckpt.config, seqs)?;
    let template = Weights::from_checkpoint(ckpt);
    if params.len() != template.num_params() {
        return Err(Error::invalid("parameter vector length does not match model"));
    }
    let w = Weights::from_flat(&template, params);
    let (loss, g) = batch_loss(&w, seqs, true);
    Ok((loss, g.expect("gradient requested").flatten()))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    /// Training loss of each step's batch, measured before that step's update.
    pub losses: Vec<f64>,
}

/// Fresh model from `config` trained by [`train_from`].
pub fn train_toy(config: &ModelConfig, task: &ToyTask, steps: usize, learning_rate: f64) -> Result<TrainOutcome> {
    let init = init_model(config)?;
    train_from(&init, task, steps, learning_rate)
}

/// Plain SGD on the task's training stream with gradient norm clipped to 1.
pub fn train_from(ckpt: &ModelCheckpoint, task: &ToyTask, steps: usize, learning_rate: f64) -> Result<TrainOutcome> {
    ckpt.validate()?;
    check_task(&ckpt.config, task)?;
    if !(learning_rate > 0.0) || !learning_rate.is_finite() {
        return Err(Error::invalid("learning rate must be positive"));
    }
    if steps == 0 {
        return Ok(TrainOutcome {
            checkpoint: ckpt.clone(),
            losses: Vec::new(),
        });
    }
    let mut w = Weights::from_checkpoint(ckpt);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = task.batch(Stream::Train, step);
        let (loss, grad) = batch_loss(&w, &batch, true);
        let mut grad = grad.expect("gradient requested");
        if !loss.is_finite() || !grad.all_finite() {
            return Err(Error::TrainingDiverged { step, loss });
        }
        losses.push(loss);
        let norm = grad.norm();
        if norm > GRAD_CLIP_NORM {
            grad.scale(GRAD_CLIP_NORM / norm);
        }
        w.axpy(-learning_rate, &grad);
        if step % 250 == 0 {
            log::debug!("step {step}: loss {loss:.4}");
        }
    }
    Ok(TrainOutcome {
        checkpoint: w.to_checkpoint(),
        losses,
    })
}

/// Inserts at `position` a block whose every weight (norm scales included)
/// is an i.i.d. standard normal draw times `epsilon`.
///
/// With `epsilon = 0` the block's residual branch is exactly zero.
pub fn plant_redundancy(ckpt: &ModelCheckpoint, position: usize, epsilon: f64, seed: u64) -> Result<ModelCheckpoint> {
    ckpt.validate()?;
    if position > ckpt.n_layers() {
        return Err(Error::invalid(format!(
            "plant position {position} outside 0..={}",
            ckpt.n_layers()
        )));
    }
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::invalid("epsilon must be finite and >= 0"));
    }
    let mut r = rng::rng_for(seed, &[0x706c_616e_74, position as u64]);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut block = LayerParams::zeros(&ckpt.config);
    for t in block.tensors_mut() {
        for v in t.data.iter_mut() {
            *v = (normal.sample(&mut r) * epsilon) as f32;
        }
    }
    let mut out = ckpt.clone();
    out.layers.insert(position, block);
    out.config.n_layers += 1;
    Ok(out)
}

/// Writes activations as `layer.{i}.activations` tensors of shape `[N, d_model]`.
pub fn save_activations(acts: &[ActivationMatrix], meta: serde_json::Value, path: &Path) -> Result<()> {
    activations_to_file(acts, meta).write(path)
}

pub fn activations_to_file(acts: &[ActivationMatrix], meta: serde_json::Value) -> TensorFile {
    let mut f = TensorFile::new(meta);
    for a in acts {
        f.push(
            format!("layer.{}.activations", a.layer_index),
            Tensor::from_f64(vec![a.data.rows(), a.data.cols()], a.data.as_slice()),
        );
    }
    f
}

/// Reads an activation dump, returning layers sorted by index and the meta object.
pub fn load_activations(path: &Path) -> Result<(Vec<ActivationMatrix>, serde_json::Value)> {
    let f = TensorFile::read(path)?;
    let mut acts = Vec::new();
    for (name, t) in &f.tensors {
        let idx = name
            .strip_prefix("layer.")
            .and_then(|s| s.strip_suffix(".activations"))
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::format(8, format!("unexpected tensor {name} in activation dump")))?;
        let [n, d] = t.shape[..] else {
            return Err(Error::format(8, format!("{name} must be 2-D")));
        };
        acts.push(ActivationMatrix {
            layer_index: idx,
            data: DenseMatrix::new(n, d, t.to_f64()).map_err(|e| Error::format(8, e.to_string()))?,
        });
    }
    acts.sort_by_key(|a| a.layer_index);
    Ok((acts, f.meta))
}

pub(crate) fn capture_meta(ckpt: &ModelCheckpoint, task: &ToyTask, pool: Pool) -> serde_json::Value {
    json!({
        "kind": "activations",
        "config": ckpt.config,
        "task": task,
        "pool": pool,
    })
}

/// Activations for `n_inputs` sequences of the task's capture stream.
pub fn capture_task(ckpt: &ModelCheckpoint, task: &ToyTask, n_inputs: usize, pool: Pool) -> Result<Vec<ActivationMatrix>> {
    check_task(&ckpt.config, task)?;
    if n_inputs < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: n_inputs,
        });
    }
    let seqs = task.sequences(Stream::Capture, 0, n_inputs);
    Ok(forward_with_capture(ckpt, &seqs, pool)?.activations)
}

/// Activation dump of [`capture_task`] with provenance metadata.
pub fn capture_task_file(ckpt: &ModelCheckpoint, task: &ToyTask, n_inputs: usize, pool: Pool) -> Result<TensorFile> {
    let acts = capture_task(ckpt, task, n_inputs, pool)?;
    Ok(activations_to_file(&acts, capture_meta(ckpt, task, pool)))
}
