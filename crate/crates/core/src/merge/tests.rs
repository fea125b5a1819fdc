use super::*;
use crate::model::{flatten_params, forward_logits, init_model, plant_redundancy, ModelConfig};

fn small(seed: u64) -> ModelCheckpoint {
    init_model(&ModelConfig {
        d_model: 16,
        d_ff: 32,
        n_heads: 2,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn data(n: usize) -> CaptureData {
    CaptureData::from_task(&ToyTask::default(), n, Pool::Last)
}

fn target(t: usize) -> MergeConfig {
    MergeConfig {
        stop: StopRule::TargetLayers(t),
        ..Default::default()
    }
}

fn run(ckpt: &ModelCheckpoint, cfg: &MergeConfig) -> (ModelCheckpoint, MergeLog) {
    mka_compress(
        ckpt,
        &data(48),
        &ManifoldConfig::default(),
        Measure::Nmi,
        &SimilarityParams::default(),
        cfg,
    )
    .unwrap()
}

#[test]
fn fusion_examples() {
    let m = small(1);
    let (a, b) = (&m.layers[0], &m.layers[1]);
    assert!(fuse_layers(a, a, 0.37).unwrap().bit_eq(a));
    assert!(fuse_layers(a, b, 1.0).unwrap().bit_eq(a));
    assert!(fuse_layers(a, b, 0.0).unwrap().bit_eq(b));
    let mut x = a.clone();
    let mut y = a.clone();
    x.query.data[0] = 1.0;
    y.query.data[0] = 3.0;
    assert_eq!(fuse_layers(&x, &y, 0.7).unwrap().query.data[0], 1.6f32);
    assert!(fuse_layers(a, b, 1.2).is_err());
}

#[test]
fn fusion_rejects_shape_mismatch() {
    let a = small(1).layers[0].clone();
    let mut b = a.clone();
    b.up = crate::container::Tensor::zeros(vec![16, 8]);
    assert!(matches!(fuse_layers(&a, &b, 0.5), Err(Error::InvalidInput(_))));
}

#[test]
fn target_equal_to_depth_is_a_no_op() {
    let m = small(2);
    let (out, log) = run(&m, &target(4));
    assert!(out.bit_eq(&m));
    assert!(log.steps.is_empty());
}

#[test]
fn threshold_one_never_merges() {
    let m = small(3);
    let cfg = MergeConfig {
        stop: StopRule::Threshold(1.0),
        ..Default::default()
    };
    let (out, log) = run(&m, &cfg);
    assert!(out.bit_eq(&m));
    assert!(log.steps.is_empty());
    assert!(log.notice.unwrap().contains("no merges"));
}

#[test]
fn loop_invariants_and_replay() {
    let m = small(4);
    let (out, log) = run(&m, &target(1));
    assert_eq!(log.steps.len(), 3);
    assert_eq!(out.n_layers(), 1);
    let retained: Vec<usize> = log.steps.iter().map(|s| s.retained_after).collect();
    assert_eq!(retained, vec![3, 2, 1]);
    for s in &log.steps {
        assert!((0.0..=1.0).contains(&s.alpha));
        assert!(s.pair.0 < s.pair.1);
    }
    assert!(replay(&m, &log.steps).unwrap().bit_eq(&out));

    let back = MergeLog::from_jsonl(&log.to_jsonl()).unwrap();
    assert_eq!(back.steps, log.steps);
    assert!(replay(&m, &back.steps).unwrap().bit_eq(&out));
}

#[test]
fn surviving_layers_keep_their_order() {
    let m = small(5);
    let (_, log) = run(&m, &target(2));
    let kept = log.surviving_blocks(4).unwrap();
    assert_eq!(kept.len(), 2);
    assert!(kept.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn non_iterative_mode_never_reuses_a_merged_layer() {
    let m = small(6);
    let cfg = MergeConfig {
        iterative: false,
        ..target(1)
    };
    let (out, log) = run(&m, &cfg);
    // two disjoint pairs at most from four layers
    assert!(log.steps.len() <= 2);
    let mut seen = BTreeSet::new();
    for s in &log.steps {
        assert!(seen.insert(s.pair.0) && seen.insert(s.pair.1));
    }
    assert_eq!(out.n_layers(), 4 - log.steps.len());
    assert!(log.notice.is_some());
}

#[test]
fn stale_similarity_mode_analyses_once() {
    let m = small(7);
    let cfg = MergeConfig {
        recompute_embeddings: false,
        ..target(2)
    };
    let (_, log) = run(&m, &cfg);
    assert_eq!(log.similarity_matrices.len(), 1);
    let (_, fresh) = run(&m, &target(2));
    assert_eq!(fresh.similarity_matrices.len(), 2);
}

#[test]
fn grid_alpha_modes_run() {
    let m = small(8);
    for mode in [TargetMode::FinalLayerEmbedding, TargetMode::TaskLabels] {
        let cfg = MergeConfig {
            ib: IBConfig {
                beta: 1.0,
                target_mode: mode,
                alpha_mode: AlphaMode::GridSearch(11),
            },
            ..target(3)
        };
        let (_, log) = run(&m, &cfg);
        let step = &log.steps[0];
        assert_eq!(step.ib.unwrap().alpha, step.alpha);
    }
}

#[test]
fn too_few_capture_inputs() {
    let m = small(1);
    let r = mka_compress(
        &m,
        &data(20),
        &ManifoldConfig::default(),
        Measure::Nmi,
        &SimilarityParams::default(),
        &target(2),
    );
    assert!(matches!(r, Err(Error::InsufficientSamples { needed: 32, got: 20 })));
}

#[test]
fn reverse_prune_examples() {
    let m = small(9);
    assert!(reverse_prune(&m, 4).unwrap().bit_eq(&m));
    let p = reverse_prune(&m, 2).unwrap();
    assert_eq!(p.n_layers(), 2);
    assert!(p.layers[0].bit_eq(&m.layers[0]) && p.layers[1].bit_eq(&m.layers[1]));
    assert!(reverse_prune(&m, 0).is_err() && reverse_prune(&m, 5).is_err());
}

#[test]
fn pruned_forward_is_truncated_forward() {
    let m = small(10);
    let p = reverse_prune(&m, 2).unwrap();
    // the original with blocks 2 and 3 zeroed computes the truncated forward
    let mut truncated = m.clone();
    for l in &mut truncated.layers[2..] {
        *l = LayerParams::zeros(&m.config);
    }
    let seqs = ToyTask::default().sequences(Stream::Eval, 0, 4);
    assert_eq!(forward_logits(&p, &seqs).unwrap(), forward_logits(&truncated, &seqs).unwrap());
}

#[test]
fn fixed_lambda_one_matches_reverse_prune() {
    let m = small(11);
    let (merged, log) = fixed_lambda_merge(&m, 1.0, 2).unwrap();
    assert!(merged.bit_eq(&reverse_prune(&m, 2).unwrap()));
    assert_eq!(log.steps[0].pair, (3, 4));
    assert_eq!(log.steps[1].pair, (2, 3));
}

#[test]
fn fixed_lambda_half_on_equal_layers() {
    let mut m = small(12);
    let first = m.layers[0].clone();
    m.layers.iter_mut().for_each(|l| *l = first.clone());
    let (merged, _) = fixed_lambda_merge(&m, 0.5, 1).unwrap();
    assert!(merged.layers[0].bit_eq(&first));
}

#[test]
fn removing_an_exact_plant_restores_logits() {
    let m = small(13);
    let seqs = ToyTask::default().sequences(Stream::Eval, 0, 6);
    let base = forward_logits(&m, &seqs).unwrap();
    for p in 1..=4 {
        let planted = plant_redundancy(&m, p, 0.0, 3).unwrap();
        // the plant is block p, layer id p + 1; its lower neighbour has id p
        let step = MergeStep {
            iteration: 0,
            pair: (p, p + 1),
            similarity: None,
            alpha: 1.0,
            retained_after: 4,
            nmi_fallback: false,
            ib: None,
        };
        let merged = replay(&planted, &[step]).unwrap();
        assert_eq!(forward_logits(&merged, &seqs).unwrap(), base);
    }
}

#[test]
fn quadratic_bound_examples() {
    let q = QuadraticLoss {
        hessian: DenseMatrix::from_diag(&[2.0, 4.0]),
    };
    let s = ImpactSettings::default();
    let r = loss_impact_with(&q, &[0.0, 0.0], &[1.0, 0.0], &s).unwrap();
    assert!((r.observed - 1.0).abs() < 1e-12);
    assert!((r.lambda_max - 4.0).abs() < 1e-6);
    assert!((r.bound - 2.0).abs() < 1e-6);
    assert!(r.bound_satisfied);

    let r = loss_impact_with(&q, &[0.0, 0.0], &[0.0, 1.0], &s).unwrap();
    assert!((r.observed - 2.0).abs() < 1e-12);
    assert!((r.bound - r.observed).abs() < 1e-6);
}

#[test]
fn identical_models_have_zero_impact() {
    let m = small(14);
    let s = ImpactSettings {
        n_sequences: 4,
        power_iters: 3,
        ..Default::default()
    };
    let r = loss_impact(&m, &m, &[0, 1, 2, 3], &ToyTask::default(), &s).unwrap();
    assert_eq!(r.delta_theta_norm, 0.0);
    assert_eq!(r.bound, 0.0);
    assert_eq!(r.observed, 0.0);
}

#[test]
fn alignment_counts_deleted_layers() {
    let m = small(15);
    let (merged, log) = fixed_lambda_merge(&m, 1.0, 3).unwrap();
    let kept = log.surviving_blocks(4).unwrap();
    assert_eq!(kept, vec![0, 1, 2]);
    let aligned = align_to_original(&m, &merged, &kept).unwrap();
    let d: f64 = flatten_params(&m)
        .iter()
        .zip(flatten_params(&aligned))
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let deleted: f64 = m.layers[3].flatten().iter().map(|x| x * x).sum();
    assert!((d - deleted).abs() <= 1e-12 * deleted);
}
