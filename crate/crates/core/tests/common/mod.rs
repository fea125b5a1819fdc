#![allow(dead_code)]

use std::path::PathBuf;

use layerfuse::manifold::ManifoldConfig;
use layerfuse::merge::{mka_compress, CaptureData, MergeConfig, MergeLog, StopRule};
use layerfuse::model::{
    evaluate, init_model, load_checkpoint, plant_redundancy, save_checkpoint, train_toy, ModelCheckpoint,
    ModelConfig, Pool, ToyTask,
};
use layerfuse::rng;
use layerfuse::similarity::{Measure, SimilarityParams};

pub const EPSILON: f64 = 1e-3;
pub const BASE_STEPS: usize = 300;
pub const BASE_LR: f64 = 0.05;
pub const EVAL_BATCHES: usize = 8;

pub fn task() -> ToyTask {
    ToyTask::default()
}

pub fn capture_data() -> CaptureData {
    CaptureData::from_task(&task(), 128, Pool::Last)
}

pub fn untrained(seed: u64) -> ModelCheckpoint {
    init_model(&ModelConfig {
        seed,
        ..ModelConfig::default()
    })
    .unwrap()
}

/// Default-config model trained briefly, cached on disk across test binaries.
pub fn trained_base(seed: u64) -> ModelCheckpoint {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("layerfuse-bases");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join(format!("base-{seed}-{BASE_STEPS}-{BASE_LR}.ckpt"));
    if let Ok(c) = load_checkpoint(&path) {
        return c;
    }
    let cfg = ModelConfig {
        seed,
        ..ModelConfig::default()
    };
    let c = train_toy(&cfg, &task(), BASE_STEPS, BASE_LR).unwrap().checkpoint;
    save_checkpoint(&c, &path).unwrap();
    c
}

/// Insertion index in `1..=n_layers`; the plant then follows an existing block.
pub fn plant_position(seed: u64, n_layers: usize) -> usize {
    1 + (rng::derive(seed, &[1]) % n_layers as u64) as usize
}

pub fn plant(base: &ModelCheckpoint, seed: u64, copies: usize) -> (ModelCheckpoint, usize) {
    let p = plant_position(seed, base.n_layers());
    let mut m = base.clone();
    for c in 0..copies {
        m = plant_redundancy(&m, p, EPSILON, rng::derive(seed, &[2, c as u64])).unwrap();
    }
    (m, p)
}

pub fn compress(model: &ModelCheckpoint, data: &CaptureData, target: usize, iterative: bool) -> (ModelCheckpoint, MergeLog) {
    let cfg = MergeConfig {
        stop: StopRule::TargetLayers(target),
        iterative,
        ..MergeConfig::default()
    };
    mka_compress(
        model,
        data,
        &ManifoldConfig::default(),
        Measure::Nmi,
        &SimilarityParams::default(),
        &cfg,
    )
    .unwrap()
}

pub fn cross_entropy(model: &ModelCheckpoint) -> f64 {
    evaluate(model, &task(), EVAL_BATCHES).unwrap().cross_entropy
}

/// 100 paired trials: ten shared trained bases, ten plant draws on each.
pub fn paired_trials() -> impl Iterator<Item = (u64, ModelCheckpoint)> {
    (0..10u64).flat_map(|b| {
        let base = trained_base(b);
        (0..10u64).map(move |j| (1000 + 10 * b + j, base.clone()))
    })
}
