use layerfuse::model::{forward_logits, init_model, plant_redundancy, LayerParams, ModelCheckpoint, ModelConfig};

struct Mat {
    rows: usize,
    cols: usize,
    v: Vec<f64>,
}

impl Mat {
    fn of(t: &layerfuse::container::Tensor) -> Self {
        Mat {
            rows: t.shape[0],
            cols: t.shape[1],
            v: t.to_f64(),
        }
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.v[r * self.cols + c]
    }
}

fn matvec(x: &[f64], w: &Mat) -> Vec<f64> {
    assert_eq!(x.len(), w.rows);
    (0..w.cols).map(|c| (0..w.rows).map(|r| x[r] * w.at(r, c)).sum()).collect()
}

fn rmsnorm(x: &[f64], g: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let s = 1.0 / (ms + 1e-6).sqrt();
    x.iter().zip(g).map(|(a, b)| a * s * b).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn rotate(v: &mut [f64], pos: usize, heads: usize) {
    let hd = v.len() / heads;
    for h in 0..heads {
        for i in 0..hd / 2 {
            let theta = pos as f64 / 10_000f64.powf(2.0 * i as f64 / hd as f64);
            let (a, b) = (v[h * hd + 2 * i], v[h * hd + 2 * i + 1]);
            let z = rotate_pair(a, b, theta);
            v[h * hd + 2 * i] = z.0;
            v[h * hd + 2 * i + 1] = z.1;
        }
    }
}

// (a + ib)·e^{iθ}
fn rotate_pair(a: f64, b: f64, theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (a * c - b * s, a * s + b * c)
}

fn block(x: &[Vec<f64>], p: &LayerParams, heads: usize) -> Vec<Vec<f64>> {
    let (wq, wk, wv, wo) = (Mat::of(&p.query), Mat::of(&p.key), Mat::of(&p.value), Mat::of(&p.output));
    let (up, down) = (Mat::of(&p.up), Mat::of(&p.down));
    let (ga, gf) = (p.attn_norm.to_f64(), p.ffn_norm.to_f64());
    let d = x[0].len();
    let hd = d / heads;
    let n: Vec<Vec<f64>> = x.iter().map(|r| rmsnorm(r, &ga)).collect();
    let q: Vec<Vec<f64>> = n
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut v = matvec(r, &wq);
            rotate(&mut v, i, heads);
            v
        })
        .collect();
    let k: Vec<Vec<f64>> = n
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut v = matvec(r, &wk);
            rotate(&mut v, i, heads);
            v
        })
        .collect();
    let v: Vec<Vec<f64>> = n.iter().map(|r| matvec(r, &wv)).collect();
    let mut out = Vec::new();
    for i in 0..x.len() {
        let mut o = vec![0.0; d];
        for h in 0..heads {
            let r = h * hd..(h + 1) * hd;
            let scores: Vec<f64> = (0..=i)
                .map(|j| q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..=i {
                for c in r.clone() {
                    o[c] += e[j] / z * v[j][c];
                }
            }
        }
        let attn = matvec(&o, &wo);
        let y: Vec<f64> = x[i].iter().zip(&attn).map(|(a, b)| a + b).collect();
        let hidden: Vec<f64> = matvec(&rmsnorm(&y, &gf), &up).into_iter().map(gelu).collect();
        let ff = matvec(&hidden, &down);
        out.push(y.iter().zip(&ff).map(|(a, b)| a + b).collect());
    }
    out
}

fn oracle_logits(m: &ModelCheckpoint, tokens: &[u32]) -> Vec<Vec<f64>> {
    let emb = Mat::of(&m.embedding);
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| (0..emb.cols).map(|c| emb.at(t as usize, c)).collect())
        .collect();
    for p in &m.layers {
        x = block(&x, p, m.config.n_heads);
    }
    let head = Mat::of(&m.head);
    let g = m.final_norm.to_f64();
    x.iter().map(|r| matvec(&rmsnorm(r, &g), &head)).collect()
}

fn check(m: &ModelCheckpoint, batch: &[Vec<u32>]) {
    let fast = forward_logits(m, batch).unwrap();
    for (seq, got) in batch.iter().zip(&fast) {
        let want = oracle_logits(m, seq);
        for (t, row) in want.iter().enumerate() {
            for (v, w) in row.iter().enumerate() {
                let g = got[(t, v)];
                assert!((g - w).abs() <= 1e-9 * (1.0 + w.abs()), "pos {t} tok {v}: {g} vs {w}");
            }
        }
    }
}

#[test]
fn forward_matches_scalar_loops() {
    let cfg = ModelConfig {
        vocab_size: 11,
        d_model: 16,
        n_layers: 2,
        n_heads: 4,
        d_ff: 24,
        max_seq_len: 12,
        seed: 5,
    };
    let m = init_model(&cfg).unwrap();
    let batch = vec![vec![0, 3, 10, 2, 2, 7, 1, 9, 4, 5, 6, 8], vec![4], vec![1, 1, 1, 1, 1]];
    check(&m, &batch);
}

#[test]
fn forward_matches_scalar_loops_with_default_shape_and_plant() {
    let m = init_model(&ModelConfig::default()).unwrap();
    let m = plant_redundancy(&m, 2, 0.3, 9).unwrap();
    let batch: Vec<Vec<u32>> = (0..2).map(|s| (0..16).map(|i| ((i * 7 + s * 3) % 16) as u32).collect()).collect();
    check(&m, &batch);
}
