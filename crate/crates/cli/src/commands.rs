use std::path::{Path, PathBuf};

use layerfuse::infotheory::{AlphaMode, IBConfig, Ridge, TargetMode};
use layerfuse::manifold::{embed_layers, ManifoldConfig, SigmaMode};
use layerfuse::merge::{
    compression_ratio, fixed_lambda_merge, loss_impact, mka_compress, quantize_rtn, reverse_prune, CaptureData,
    ImpactSettings, MergeConfig, MergeLog, QuantBits, StopRule,
};
use layerfuse::model::{
    capture_task_file, evaluate, load_activations, load_checkpoint, save_checkpoint, train_toy, EvalMetrics,
    ModelCheckpoint, ModelConfig, Pool, TaskKind, ToyTask,
};
use layerfuse::similarity::{build_similarity_matrix, most_similar_adjacent_pair, Measure, SimilarityParams};
use layerfuse::{Error, Result};
use serde_json::json;

use crate::args::*;
use crate::output::{num, write_json, write_text};

fn parse<T: std::str::FromStr>(what: &str, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::InvalidInput(format!("bad value {s:?} for --{what}")))
}

fn parse_core<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<T> {
    s.parse()
}

fn task_from(args: &TaskArgs, seed: u64) -> Result<ToyTask> {
    let task = ToyTask {
        kind: parse_core::<TaskKind>(&args.task)?,
        vocab_size: args.vocab,
        seq_len: args.seq_len,
        seed,
        batch_size: args.batch_size,
    };
    task.validate()?;
    Ok(task)
}

fn manifold_from(args: &ManifoldArgs) -> Result<(ManifoldConfig, Measure, SimilarityParams)> {
    let sigma = if args.sigma == "auto" {
        SigmaMode::AutoMedian
    } else {
        SigmaMode::Fixed(parse("sigma", &args.sigma)?)
    };
    let cfg = ManifoldConfig {
        sigma,
        k: args.k,
        t: args.t,
    };
    cfg.validate()?;
    let params = SimilarityParams {
        ridge: Ridge::Relative(args.ridge),
    };
    Ok((cfg, parse_core(&args.measure)?, params))
}

fn data_from(args: &CaptureDataArgs, task: &ToyTask) -> Result<CaptureData> {
    let pool: Pool = parse_core(&args.pool)?;
    if args.n_inputs < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: args.n_inputs,
        });
    }
    Ok(CaptureData::from_task(task, args.n_inputs, pool))
}

fn load_model(path: &Path) -> Result<ModelCheckpoint> {
    load_checkpoint(path).map_err(|e| match e {
        Error::Io(io) => Error::InvalidInput(format!("cannot read checkpoint {}: {io}", path.display())),
        other => other,
    })
}

fn check_vocab(ckpt: &ModelCheckpoint, task: &ToyTask) -> Result<()> {
    if ckpt.config.vocab_size != task.vocab_size {
        return Err(Error::InvalidInput(format!(
            "model vocabulary {} does not match task vocabulary {}",
            ckpt.config.vocab_size, task.vocab_size
        )));
    }
    Ok(())
}

fn metrics_json(m: &EvalMetrics) -> serde_json::Value {
    json!({"cross_entropy": m.cross_entropy, "next_token_accuracy": m.next_token_accuracy})
}

pub fn init_train(args: &InitTrainArgs, seed: u64, out: &Path) -> Result<()> {
    let task = task_from(&args.task, seed)?;
    let config = ModelConfig {
        vocab_size: args.task.vocab,
        d_model: args.d_model,
        n_layers: args.layers,
        n_heads: args.heads,
        d_ff: args.d_ff,
        max_seq_len: args.max_seq_len,
        seed,
    };
    config.validate()?;
    let outcome = train_toy(&config, &task, args.steps, args.lr)?;
    save_checkpoint(&outcome.checkpoint, &out.join("model.ckpt"))?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{}\n", num(*l)));
    }
    write_text(&out.join("training_curve.csv"), &csv)?;
    let summary = json!({
        "checkpoint": "model.ckpt",
        "steps": args.steps,
        "initial_loss": outcome.losses.first(),
        "final_loss": outcome.losses.last(),
    });
    write_json(&out.join("training_summary.json"), &summary)?;
    println!("{}", crate::output::canonical_json(&summary).trim_end());
    Ok(())
}

pub fn capture(args: &CaptureArgs, seed: u64, out: &Path) -> Result<()> {
    let ckpt = load_model(&args.model)?;
    let task = task_from(&args.task, seed)?;
    check_vocab(&ckpt, &task)?;
    let pool: Pool = parse_core(&args.data.pool)?;
    let file = capture_task_file(&ckpt, &task, args.data.n_inputs, pool)?;
    file.write(&out.join("activations.bin"))?;
    println!(
        "wrote {} activation tensors of shape [{}, {}]",
        file.tensors.len(),
        args.data.n_inputs,
        ckpt.config.d_model
    );
    Ok(())
}

pub fn similarity(args: &SimilarityArgs, out: &Path) -> Result<()> {
    let (mut acts, _) = load_activations(&args.activations).map_err(|e| match e {
        Error::Io(io) => Error::InvalidInput(format!("cannot read {}: {io}", args.activations.display())),
        other => other,
    })?;
    if !args.include_embedding {
        acts.retain(|a| a.layer_index != 0);
    }
    let (cfg, measure, params) = manifold_from(&args.manifold)?;
    let (embs, diags) = embed_layers(&acts, &cfg)?;
    let s = build_similarity_matrix(&embs, measure, &params)?;
    let best = most_similar_adjacent_pair(&s, &s.layer_ids)?;
    write_text(&out.join("similarity.csv"), &s.to_csv())?;
    write_text(&out.join("similarity.pgm"), &s.to_pgm())?;
    let report = json!({
        "measure": measure,
        "sigma_mode": cfg.sigma,
        "k": cfg.k,
        "t": cfg.t,
        "ridge": params.ridge,
        "layers": diags,
        "rbf_scale": s.params.rbf_scale,
        "nmi_fallback_pairs": s.params.fallback_count(),
        "nmi": s.params.nmi,
        "best_adjacent_pair": best,
    });
    write_json(&out.join("similarity.json"), &report)?;
    print!("{}", s.to_csv());
    Ok(())
}

enum Method {
    Mka { iterative: bool },
    Reverse,
    Fixed(f64),
}

fn parse_method(s: &str) -> Result<Method> {
    match s {
        "mka" => Ok(Method::Mka { iterative: true }),
        "mka-noniter" => Ok(Method::Mka { iterative: false }),
        "reverse" => Ok(Method::Reverse),
        _ => match s.strip_prefix("fixed:") {
            Some(v) => Ok(Method::Fixed(parse("method", v)?)),
            None => Err(Error::InvalidInput(format!(
                "unknown method {s:?} (expected mka, reverse or fixed:<lambda>)"
            ))),
        },
    }
}

struct Outcome {
    model: ModelCheckpoint,
    log: MergeLog,
    surviving: Vec<usize>,
}

struct Pipeline<'a> {
    data: Option<CaptureData>,
    manifold: ManifoldConfig,
    measure: Measure,
    params: SimilarityParams,
    ib: IBConfig,
    recompute: bool,
    seed: u64,
    task: &'a ToyTask,
}

impl Pipeline<'_> {
    fn run(&mut self, ckpt: &ModelCheckpoint, method: &Method, stop: StopRule) -> Result<Outcome> {
        let l = ckpt.n_layers();
        let (model, log) = match *method {
            Method::Mka { iterative } => {
                let cfg = MergeConfig {
                    stop,
                    ib: self.ib,
                    iterative,
                    recompute_embeddings: self.recompute,
                    seed: self.seed,
                };
                let data = self.data.as_ref().expect("capture data for mka");
                mka_compress(ckpt, data, &self.manifold, self.measure, &self.params, &cfg)?
            }
            Method::Reverse | Method::Fixed(_) => {
                let StopRule::TargetLayers(t) = stop else {
                    return Err(Error::InvalidInput("--tau only applies to --method mka".into()));
                };
                if let Method::Fixed(lambda) = *method {
                    fixed_lambda_merge(ckpt, lambda, t)?
                } else {
                    let pruned = reverse_prune(ckpt, t)?;
                    let log = MergeLog {
                        config: json!({"method": "reverse", "target_layers": t}),
                        ..Default::default()
                    };
                    return Ok(Outcome {
                        model: pruned,
                        log,
                        surviving: (0..t).collect(),
                    });
                }
            }
        };
        let surviving = log.surviving_blocks(l)?;
        let _ = self.task;
        Ok(Outcome { model, log, surviving })
    }
}

fn ib_from(alpha_mode: &str, beta: f64, target_mode: &str) -> Result<IBConfig> {
    let target_mode = match target_mode {
        "final-layer-embedding" => TargetMode::FinalLayerEmbedding,
        "task-labels" => TargetMode::TaskLabels,
        other => return Err(Error::InvalidInput(format!("unknown target mode {other:?}"))),
    };
    let cfg = IBConfig {
        beta,
        target_mode,
        alpha_mode: parse_core::<AlphaMode>(alpha_mode)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn compress(args: &CompressArgs, seed: u64, out: &Path) -> Result<()> {
    let ckpt = load_model(&args.model)?;
    let task = task_from(&args.task, seed)?;
    check_vocab(&ckpt, &task)?;
    let method = parse_method(&args.method)?;
    let l = ckpt.n_layers();
    let stop = match (args.tau, args.target_layers) {
        (Some(_), Some(_)) => return Err(Error::InvalidInput("--tau and --target-layers are exclusive".into())),
        (Some(tau), None) => StopRule::Threshold(tau),
        (None, Some(t)) => StopRule::TargetLayers(t),
        (None, None) => StopRule::TargetLayers(l.saturating_sub(1).max(1)),
    };
    if let StopRule::TargetLayers(t) = stop {
        if t == 0 || t > l {
            return Err(Error::InvalidInput(format!("--target-layers must be in 1..={l}, got {t}")));
        }
    }
    let quant = match args.quant.as_str() {
        "none" => None,
        other => Some(parse_core::<QuantBits>(other)?),
    };
    let (manifold, measure, params) = manifold_from(&args.manifold)?;
    let data = match method {
        Method::Mka { .. } => Some(data_from(&args.data, &task)?),
        _ => None,
    };
    let method = match method {
        Method::Mka { .. } => Method::Mka {
            iterative: !args.no_iterative,
        },
        m => m,
    };
    let mut pipeline = Pipeline {
        data,
        manifold,
        measure,
        params,
        ib: ib_from(&args.alpha_mode, args.beta, &args.target_mode)?,
        recompute: !args.no_recompute,
        seed,
        task: &task,
    };

    let before = evaluate(&ckpt, &task, args.eval_batches)?;
    let outcome = pipeline.run(&ckpt, &method, stop)?;
    let (model, q) = match quant {
        Some(bits) => quantize_rtn(&outcome.model, bits)?,
        None => (outcome.model, 1.0),
    };
    let after = evaluate(&model, &task, args.eval_batches)?;
    let compression = compression_ratio(l, model.n_layers(), q)?;
    let impact = if args.loss_impact {
        let settings = ImpactSettings {
            n_sequences: args.impact_sequences,
            power_iters: args.impact_iters,
            seed,
            ..Default::default()
        };
        Some(loss_impact(&ckpt, &model, &outcome.surviving, &task, &settings)?)
    } else {
        None
    };

    save_checkpoint(&model, &out.join("compressed.ckpt"))?;
    write_text(&out.join("merge_log.jsonl"), &outcome.log.to_jsonl())?;
    let report = json!({
        "method": args.method,
        "original_layers": l,
        "retained_layers": model.n_layers(),
        "surviving_blocks": outcome.surviving,
        "compression": {
            "l_total": compression.l_total,
            "l_retained": compression.l_retained,
            "q": compression.q,
            "ratio": compression.ratio,
            "percent": compression.percent(),
        },
        "quantization": quant.map(|b| json!({
            "scheme": b,
            "q": b.q_factor(),
            "container_factor": b.container_factor(),
        })),
        "before": metrics_json(&before),
        "after": metrics_json(&after),
        "delta_cross_entropy": after.cross_entropy - before.cross_entropy,
        "steps": outcome.log.steps,
        "nmi_fallback_steps": outcome.log.steps.iter().filter(|s| s.nmi_fallback).count(),
        "notice": outcome.log.notice,
        "loss_impact": impact,
    });
    write_json(&out.join("report.json"), &report)?;
    if let Some(n) = &outcome.log.notice {
        eprintln!("notice: {n}");
    }
    println!(
        "{} -> {} layers, compression {}, cross-entropy {:.6} -> {:.6}",
        l,
        model.n_layers(),
        compression.percent(),
        before.cross_entropy,
        after.cross_entropy
    );
    Ok(())
}

pub fn evaluate_cmd(args: &EvaluateArgs, seed: u64, out: &Path) -> Result<()> {
    let ckpt = load_model(&args.model)?;
    let task = task_from(&args.task, seed)?;
    check_vocab(&ckpt, &task)?;
    let m = evaluate(&ckpt, &task, args.n_batches)?;
    let v = metrics_json(&m);
    write_json(&out.join("metrics.json"), &v)?;
    print!("{}", crate::output::canonical_json(&v));
    Ok(())
}

fn split_list(s: &str) -> Vec<&str> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).collect()
}

pub fn sweep(args: &SweepArgs, seed: u64, out: &Path) -> Result<()> {
    let ckpt = load_model(&args.model)?;
    let task = task_from(&args.task, seed)?;
    check_vocab(&ckpt, &task)?;
    let (manifold, measure, params) = manifold_from(&args.manifold)?;
    let methods = split_list(&args.methods);
    let ratios = split_list(&args.ratios);
    if methods.is_empty() || ratios.is_empty() {
        return Err(Error::InvalidInput("--methods and --ratios must be non-empty".into()));
    }
    let needs_data = methods.iter().any(|m| m.starts_with("mka"));
    let mut pipeline = Pipeline {
        data: if needs_data { Some(data_from(&args.data, &task)?) } else { None },
        manifold,
        measure,
        params,
        ib: ib_from(&args.alpha_mode, 1.0, "final-layer-embedding")?,
        recompute: true,
        seed,
        task: &task,
    };
    let l = ckpt.n_layers();
    let mut csv = String::from("method,ratio,retained,compression_ratio,cross_entropy,next_token_accuracy,error\n");
    let mut ok = 0;
    let mut first_err = None;
    for m in &methods {
        for r in &ratios {
            let row = (|| -> Result<(usize, f64, EvalMetrics)> {
                let ratio: f64 = parse("ratios", r)?;
                if !(0.0..1.0).contains(&ratio) {
                    return Err(Error::InvalidInput(format!("ratio {ratio} outside [0,1)")));
                }
                let retained = l - (ratio * l as f64).round() as usize;
                if retained == 0 {
                    return Err(Error::InvalidInput(format!("ratio {ratio} leaves no layers")));
                }
                let method = parse_method(m)?;
                let outcome = pipeline.run(&ckpt, &method, StopRule::TargetLayers(retained))?;
                let metrics = evaluate(&outcome.model, &task, args.eval_batches)?;
                let cr = compression_ratio(l, outcome.model.n_layers(), 1.0)?;
                Ok((outcome.model.n_layers(), cr.ratio, metrics))
            })();
            match row {
                Ok((retained, cr, met)) => {
                    ok += 1;
                    csv.push_str(&format!(
                        "{m},{r},{retained},{},{},{},\n",
                        num(cr),
                        num(met.cross_entropy),
                        num(met.next_token_accuracy)
                    ));
                }
                Err(e) => {
                    log::warn!("sweep row {m} @ {r} failed: {e}");
                    csv.push_str(&format!("{m},{r},,,,,\"{}\"\n", e.to_string().replace('"', "'")));
                    first_err.get_or_insert(e);
                }
            }
        }
    }
    write_text(&out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    match (ok, first_err) {
        (0, Some(e)) => Err(e),
        _ => Ok(()),
    }
}

pub fn resolved_config(cli: &crate::args::Cli) -> serde_json::Value {
    let mut v = match &cli.command {
        Command::InitTrain(a) => serde_json::to_value(a),
        Command::Capture(a) => serde_json::to_value(a),
        Command::Similarity(a) => serde_json::to_value(a),
        Command::Compress(a) => serde_json::to_value(a),
        Command::Evaluate(a) => serde_json::to_value(a),
        Command::Sweep(a) => serde_json::to_value(a),
    }
    .expect("plain args");
    let obj = v.as_object_mut().expect("args serialize to objects");
    obj.insert("command".into(), json!(cli.command.name()));
    obj.insert("seed".into(), json!(cli.seed));
    obj.insert("out".into(), json!(PathBuf::from(&cli.out)));
    v
}
