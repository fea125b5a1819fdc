//! f64 working copy of a checkpoint plus the forward and backward passes.
//!
//! Block equations (row-vector convention, one sequence of length T):
//!
//! ```text
//! n1  = rmsnorm(x) ⊙ g_attn
//! q,k = rope(n1·Wq), rope(n1·Wk);  v = n1·Wv
//! o   = causal_softmax(q_h k_hᵀ / √d_head) v_h      (per head, concatenated)
//! y   = x + o·Wo
//! n2  = rmsnorm(y) ⊙ g_ffn
//! out = y + gelu(n2·W_up)·W_down
//! ```
//!
//! Logits are `(rmsnorm(x_L) ⊙ g_final)·W_head`.

use super::{LayerParams, ModelCheckpoint, ModelConfig};
use crate::container::Tensor;
use crate::linalg::gemm::{gemm, Op};

pub(crate) const NORM_EPS: f64 = 1e-6;
const ROPE_BASE: f64 = 10_000.0;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BlockWeights {
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    pub up: Vec<f64>,
    pub down: Vec<f64>,
    pub g_attn: Vec<f64>,
    pub g_ffn: Vec<f64>,
}

impl BlockWeights {
    fn from_params(p: &LayerParams) -> Self {
        Self {
            wq: p.query.to_f64(),
            wk: p.key.to_f64(),
            wv: p.value.to_f64(),
            wo: p.output.to_f64(),
            up: p.up.to_f64(),
            down: p.down.to_f64(),
            g_attn: p.attn_norm.to_f64(),
            g_ffn: p.ffn_norm.to_f64(),
        }
    }

    fn to_params(&self, cfg: &ModelConfig) -> LayerParams {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        LayerParams {
            query: Tensor::from_f64(vec![d, d], &self.wq),
            key: Tensor::from_f64(vec![d, d], &self.wk),
            value: Tensor::from_f64(vec![d, d], &self.wv),
            output: Tensor::from_f64(vec![d, d], &self.wo),
            up: Tensor::from_f64(vec![d, f], &self.up),
            down: Tensor::from_f64(vec![f, d], &self.down),
            attn_norm: Tensor::from_f64(vec![d], &self.g_attn),
            ffn_norm: Tensor::from_f64(vec![d], &self.g_ffn),
        }
    }

    fn fields(&self) -> [&Vec<f64>; 8] {
        [
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.up,
            &self.down,
            &self.g_attn,
            &self.g_ffn,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Vec<f64>; 8] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.up,
            &mut self.down,
            &mut self.g_attn,
            &mut self.g_ffn,
        ]
    }
}

/// Model parameters in f64; also used as the gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Weights {
    pub cfg: ModelConfig,
    pub embed: Vec<f64>,
    pub blocks: Vec<BlockWeights>,
    pub g_final: Vec<f64>,
    pub head: Vec<f64>,
}

impl Weights {
    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Self {
        Self {
            cfg: ckpt.config.clone(),
            embed: ckpt.embedding.to_f64(),
            blocks: ckpt.layers.iter().map(BlockWeights::from_params).collect(),
            g_final: ckpt.final_norm.to_f64(),
            head: ckpt.head.to_f64(),
        }
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        let cfg = &self.cfg;
        ModelCheckpoint {
            config: cfg.clone(),
            embedding: Tensor::from_f64(vec![cfg.vocab_size, cfg.d_model], &self.embed),
            layers: self.blocks.iter().map(|b| b.to_params(cfg)).collect(),
            final_norm: Tensor::from_f64(vec![cfg.d_model], &self.g_final),
            head: Tensor::from_f64(vec![cfg.d_model, cfg.vocab_size], &self.head),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|v| v.iter_mut().for_each(|x| *x = 0.0));
        z
    }

    fn for_each(&self, mut f: impl FnMut(&Vec<f64>)) {
        f(&self.embed);
        for b in &self.blocks {
            b.fields().into_iter().for_each(&mut f);
        }
        f(&self.g_final);
        f(&self.head);
    }

    fn for_each_mut(&mut self, mut f: impl FnMut(&mut Vec<f64>)) {
        f(&mut self.embed);
        for b in &mut self.blocks {
            b.fields_mut().into_iter().for_each(&mut f);
        }
        f(&mut self.g_final);
        f(&mut self.head);
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each(|v| n += v.len());
        n
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.for_each(|v| out.extend_from_slice(v));
        out
    }

    pub fn from_flat(template: &Self, flat: &[f64]) -> Self {
        assert_eq!(flat.len(), template.num_params());
        let mut w = template.clone();
        let mut at = 0;
        w.for_each_mut(|v| {
            let n = v.len();
            v.copy_from_slice(&flat[at..at + n]);
            at += n;
        });
        w
    }

    /// `self += s · other`
    pub fn axpy(&mut self, s: f64, other: &Self) {
        let flat = other.flatten();
        let mut at = 0;
        self.for_each_mut(|v| {
            for x in v.iter_mut() {
                *x += s * flat[at];
                at += 1;
            }
        });
    }

    pub fn norm(&self) -> f64 {
        let mut s = 0.0;
        self.for_each(|v| s += v.iter().map(|x| x * x).sum::<f64>());
        s.sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.for_each_mut(|v| v.iter_mut().for_each(|x| *x *= s));
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }
}

fn rmsnorm_forward(x: &[f64], g: &[f64], t: usize, d: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut inv = vec![0.0; t];
    let mut xhat = vec![0.0; t * d];
    let mut out = vec![0.0; t * d];
    for r in 0..t {
        let row = &x[r * d..(r + 1) * d];
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let s = 1.0 / (ms + NORM_EPS).sqrt();
        inv[r] = s;
        for j in 0..d {
            xhat[r * d + j] = row[j] * s;
            out[r * d + j] = row[j] * s * g[j];
        }
    }
    (inv, xhat, out)
}

/// Accumulates `dg` and returns `dx` for `out = rmsnorm(x) ⊙ g`.
fn rmsnorm_backward(
    dout: &[f64],
    xhat: &[f64],
    inv: &[f64],
    g: &[f64],
    dg: &mut [f64],
    t: usize,
    d: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; t * d];
    for r in 0..t {
        let mut dot = 0.0;
        for j in 0..d {
            let dxh = dout[r * d + j] * g[j];
            dg[j] += dout[r * d + j] * xhat[r * d + j];
            dot += dxh * xhat[r * d + j];
        }
        let mean = dot / d as f64;
        for j in 0..d {
            let dxh = dout[r * d + j] * g[j];
            dx[r * d + j] = inv[r] * (dxh - xhat[r * d + j] * mean);
        }
    }
    dx
}

pub(crate) struct Rope {
    half: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Rope {
    pub fn new(max_len: usize, head_dim: usize) -> Self {
        let half = head_dim / 2;
        let mut cos = vec![0.0; max_len * half];
        let mut sin = vec![0.0; max_len * half];
        for pos in 0..max_len {
            for i in 0..half {
                let freq = ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64);
                let a = pos as f64 * freq;
                cos[pos * half + i] = a.cos();
                sin[pos * half + i] = a.sin();
            }
        }
        Self { half, cos, sin }
    }

    /// Rotates each head's dimension pairs by position; `inverse` undoes it.
    fn apply(&self, x: &mut [f64], t: usize, d: usize, head_dim: usize, inverse: bool) {
        let heads = d / head_dim;
        for pos in 0..t {
            for h in 0..heads {
                let base = pos * d + h * head_dim;
                for i in 0..self.half {
                    let c = self.cos[pos * self.half + i];
                    let s = if inverse {
                        -self.sin[pos * self.half + i]
                    } else {
                        self.sin[pos * self.half + i]
                    };
                    let a = x[base + 2 * i];
                    let b = x[base + 2 * i + 1];
                    x[base + 2 * i] = a * c - b * s;
                    x[base + 2 * i + 1] = a * s + b * c;
                }
            }
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

struct BlockCache {
    inv1: Vec<f64>,
    xhat1: Vec<f64>,
    n1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    o: Vec<f64>,
    inv2: Vec<f64>,
    xhat2: Vec<f64>,
    n2: Vec<f64>,
    u: Vec<f64>,
    z: Vec<f64>,
}

/// Result of running one sequence through the model.
pub(crate) struct SeqForward {
    /// `L + 1` hidden states, each `T x d`; index 0 is the embedding output.
    pub hidden: Vec<Vec<f64>>,
    /// `T x vocab`
    pub logits: Vec<f64>,
    caches: Vec<BlockCache>,
    invf: Vec<f64>,
    xhatf: Vec<f64>,
    nf: Vec<f64>,
}

fn block_forward(
    w: &BlockWeights,
    x: &[f64],
    t: usize,
    cfg: &ModelConfig,
    rope: &Rope,
) -> (Vec<f64>, BlockCache) {
    let d = cfg.d_model;
    let f = cfg.d_ff;
    let hd = cfg.head_dim();
    let heads = cfg.n_heads;
    let scale = 1.0 / (hd as f64).sqrt();

    let (inv1, xhat1, n1) = rmsnorm_forward(x, &w.g_attn, t, d);
    let mut q = vec![0.0; t * d];
    let mut k = vec![0.0; t * d];
    let mut v = vec![0.0; t * d];
    gemm(t, d, d, 1.0, &n1, Op::N, &w.wq, Op::N, 0.0, &mut q);
    gemm(t, d, d, 1.0, &n1, Op::N, &w.wk, Op::N, 0.0, &mut k);
    gemm(t, d, d, 1.0, &n1, Op::N, &w.wv, Op::N, 0.0, &mut v);
    rope.apply(&mut q, t, d, hd, false);
    rope.apply(&mut k, t, d, hd, false);

    let mut probs = vec![0.0; heads * t * t];
    let mut o = vec![0.0; t * d];
    for h in 0..heads {
        let off = h * hd;
        for i in 0..t {
            let p = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
            let qi = &q[i * d + off..i * d + off + hd];
            let mut max = f64::NEG_INFINITY;
            for j in 0..=i {
                let kj = &k[j * d + off..j * d + off + hd];
                let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                p[j] = s;
                max = max.max(s);
            }
            let mut z = 0.0;
            for pj in p.iter_mut().take(i + 1) {
                *pj = (*pj - max).exp();
                z += *pj;
            }
            for j in 0..=i {
                p[j] /= z;
                let vj = &v[j * d + off..j * d + off + hd];
                let oi = &mut o[i * d + off..i * d + off + hd];
                for (oo, vv) in oi.iter_mut().zip(vj) {
                    *oo += p[j] * vv;
                }
            }
        }
    }

    let mut y = x.to_vec();
    gemm(t, d, d, 1.0, &o, Op::N, &w.wo, Op::N, 1.0, &mut y);

    let (inv2, xhat2, n2) = rmsnorm_forward(&y, &w.g_ffn, t, d);
    let mut u = vec![0.0; t * f];
    gemm(t, d, f, 1.0, &n2, Op::N, &w.up, Op::N, 0.0, &mut u);
    let z: Vec<f64> = u.iter().map(|&x| gelu(x)).collect();
    let mut out = y;
    gemm(t, f, d, 1.0, &z, Op::N, &w.down, Op::N, 1.0, &mut out);

    (
        out,
        BlockCache {
            inv1,
            xhat1,
            n1,
            q,
            k,
            v,
            probs,
            o,
            inv2,
            xhat2,
            n2,
            u,
            z,
        },
    )
}

/// Returns `dx` for the block input and accumulates parameter gradients.
fn block_backward(
    w: &BlockWeights,
    c: &BlockCache,
    dout: &[f64],
    t: usize,
    cfg: &ModelConfig,
    rope: &Rope,
    g: &mut BlockWeights,
) -> Vec<f64> {
    let d = cfg.d_model;
    let f = cfg.d_ff;
    let hd = cfg.head_dim();
    let heads = cfg.n_heads;
    let scale = 1.0 / (hd as f64).sqrt();

    // feed-forward branch
    gemm(f, t, d, 1.0, &c.z, Op::T, dout, Op::N, 1.0, &mut g.down);
    let mut dz = vec![0.0; t * f];
    gemm(t, d, f, 1.0, dout, Op::N, &w.down, Op::T, 0.0, &mut dz);
    let du: Vec<f64> = dz.iter().zip(&c.u).map(|(a, &u)| a * gelu_grad(u)).collect();
    gemm(d, t, f, 1.0, &c.n2, Op::T, &du, Op::N, 1.0, &mut g.up);
    let mut dn2 = vec![0.0; t * d];
    gemm(t, f, d, 1.0, &du, Op::N, &w.up, Op::T, 0.0, &mut dn2);
    let mut dy = rmsnorm_backward(&dn2, &c.xhat2, &c.inv2, &w.g_ffn, &mut g.g_ffn, t, d);
    dy.iter_mut().zip(dout).for_each(|(a, b)| *a += b);

    // attention branch
    gemm(d, t, d, 1.0, &c.o, Op::T, &dy, Op::N, 1.0, &mut g.wo);
    let mut d_o = vec![0.0; t * d];
    gemm(t, d, d, 1.0, &dy, Op::N, &w.wo, Op::T, 0.0, &mut d_o);

    let mut dq = vec![0.0; t * d];
    let mut dk = vec![0.0; t * d];
    let mut dv = vec![0.0; t * d];
    let mut dp = vec![0.0; t];
    for h in 0..heads {
        let off = h * hd;
        for i in 0..t {
            let p = &c.probs[(h * t + i) * t..(h * t + i + 1) * t];
            let doi = &d_o[i * d + off..i * d + off + hd];
            let mut dot = 0.0;
            for j in 0..=i {
                let vj = &c.v[j * d + off..j * d + off + hd];
                dp[j] = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                dot += p[j] * dp[j];
                let dvj = &mut dv[j * d + off..j * d + off + hd];
                for (a, b) in dvj.iter_mut().zip(doi) {
                    *a += p[j] * b;
                }
            }
            for j in 0..=i {
                let ds = p[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for e in 0..hd {
                    dq[i * d + off + e] += ds * c.k[j * d + off + e];
                    dk[j * d + off + e] += ds * c.q[i * d + off + e];
                }
            }
        }
    }
    rope.apply(&mut dq, t, d, hd, true);
    rope.apply(&mut dk, t, d, hd, true);

    gemm(d, t, d, 1.0, &c.n1, Op::T, &dq, Op::N, 1.0, &mut g.wq);
    gemm(d, t, d, 1.0, &c.n1, Op::T, &dk, Op::N, 1.0, &mut g.wk);
    gemm(d, t, d, 1.0, &c.n1, Op::T, &dv, Op::N, 1.0, &mut g.wv);
    let mut dn1 = vec![0.0; t * d];
    gemm(t, d, d, 1.0, &dq, Op::N, &w.wq, Op::T, 0.0, &mut dn1);
    gemm(t, d, d, 1.0, &dk, Op::N, &w.wk, Op::T, 1.0, &mut dn1);
    gemm(t, d, d, 1.0, &dv, Op::N, &w.wv, Op::T, 1.0, &mut dn1);
    let mut dx = rmsnorm_backward(&dn1, &c.xhat1, &c.inv1, &w.g_attn, &mut g.g_attn, t, d);
    dx.iter_mut().zip(&dy).for_each(|(a, b)| *a += b);
    dx
}

impl Weights {
    pub fn rope(&self) -> Rope {
        Rope::new(self.cfg.max_seq_len, self.cfg.head_dim())
    }

    /// Token ids must already be validated against the vocabulary.
    pub fn forward_seq(&self, tokens: &[u32], rope: &Rope) -> SeqForward {
        let cfg = &self.cfg;
        let d = cfg.d_model;
        let t = tokens.len();
        let mut x = vec![0.0; t * d];
        for (r, &tok) in tokens.iter().enumerate() {
            let tok = tok as usize;
            x[r * d..(r + 1) * d].copy_from_slice(&self.embed[tok * d..(tok + 1) * d]);
        }
        let mut hidden = Vec::with_capacity(self.blocks.len() + 1);
        let mut caches = Vec::with_capacity(self.blocks.len());
        hidden.push(x);
        for b in &self.blocks {
            let (out, cache) = block_forward(b, hidden.last().expect("non-empty"), t, cfg, rope);
            hidden.push(out);
            caches.push(cache);
        }
        let (invf, xhatf, nf) = rmsnorm_forward(hidden.last().expect("non-empty"), &self.g_final, t, d);
        let mut logits = vec![0.0; t * cfg.vocab_size];
        gemm(t, d, cfg.vocab_size, 1.0, &nf, Op::N, &self.head, Op::N, 0.0, &mut logits);
        SeqForward {
            hidden,
            logits,
            caches,
            invf,
            xhatf,
            nf,
        }
    }

    /// Backpropagates `dlogits` (`T x vocab`) through a cached forward pass.
    pub fn backward_seq(&self, tokens: &[u32], fw: &SeqForward, dlogits: &[f64], rope: &Rope) -> Weights {
        let cfg = &self.cfg;
        let d = cfg.d_model;
        let t = tokens.len();
        let vsz = cfg.vocab_size;
        let mut g = self.zeros_like();
        gemm(d, t, vsz, 1.0, &fw.nf, Op::T, dlogits, Op::N, 1.0, &mut g.head);
        let mut dnf = vec![0.0; t * d];
        gemm(t, vsz, d, 1.0, dlogits, Op::N, &self.head, Op::T, 0.0, &mut dnf);
        let mut dx = rmsnorm_backward(&dnf, &fw.xhatf, &fw.invf, &self.g_final, &mut g.g_final, t, d);
        for (li, b) in self.blocks.iter().enumerate().rev() {
            dx = block_backward(b, &fw.caches[li], &dx, t, cfg, rope, &mut g.blocks[li]);
        }
        for (r, &tok) in tokens.iter().enumerate() {
            let tok = tok as usize;
            for j in 0..d {
                g.embed[tok * d + j] += dx[r * d + j];
            }
        }
        g
    }
}

/// Summed next-token cross-entropy, correct-prediction count and number of
/// predictions for one sequence, plus `d(sum CE)/d logits`.
pub(crate) fn next_token_loss(logits: &[f64], tokens: &[u32], vocab: usize) -> (f64, usize, usize, Vec<f64>) {
    let t = tokens.len();
    let mut dlogits = vec![0.0; t * vocab];
    let mut loss = 0.0;
    let mut correct = 0;
    for pos in 0..t.saturating_sub(1) {
        let row = &logits[pos * vocab..(pos + 1) * vocab];
        let target = tokens[pos + 1] as usize;
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + z.ln();
        loss += lse - row[target];
        // ties resolve to the lowest index
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        if best == target {
            correct += 1;
        }
        let drow = &mut dlogits[pos * vocab..(pos + 1) * vocab];
        for (i, dv) in drow.iter_mut().enumerate() {
            *dv = (row[i] - lse).exp();
        }
        drow[target] -= 1.0;
    }
    (loss, correct, t.saturating_sub(1), dlogits)
}
