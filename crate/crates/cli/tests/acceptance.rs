//! One PASS/FAIL line per acceptance criterion. Exits non-zero if any fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use layerfuse::infotheory::{gaussian_mi, ib_objective, ib_objective_gradient, merged_covariance, nmi, CovarianceBundle, Ridge, TargetCovariances};
use layerfuse::linalg::{covariance, sym_eig, DenseMatrix};
use layerfuse::manifold::{build_affinity, diffusion_decompose, diffusion_distance, diffusion_map, embed_activations, ManifoldConfig, SigmaMode};
use layerfuse::merge::{compression_ratio, loss_impact_with, replay, ImpactSettings, MergeLog, QuadraticLoss};
use layerfuse::model::{load_checkpoint, save_checkpoint, ActivationMatrix};
use layerfuse::rng::rng_for;
use layerfuse::similarity::{build_similarity_matrix, Measure, SimilarityParams};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gauss(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::new(rows, cols, (0..rows * cols).map(|_| gauss(r)).collect()).unwrap()
}

fn compression_arithmetic() -> Outcome {
    let cases = [
        (32, 18, 1.0, 0.4375, "43.75%"),
        (32, 16, 4.0, 0.875, "87.50%"),
        (32, 18, 4.0, 0.859375, "85.94%"),
        (32, 20, 4.0, 0.84375, "84.38%"),
    ];
    let mut bad = Vec::new();
    for (l, r, q, ratio, pct) in cases {
        let c = compression_ratio(l, r, q).unwrap();
        if c.ratio != ratio || c.percent() != pct {
            bad.push(format!("({l},{r},{q}) gave {} / {}", c.ratio, c.percent()));
        }
    }
    outcome(bad.is_empty(), if bad.is_empty() { "4/4 exact".into() } else { bad.join("; ") })
}

fn diffusion_identity() -> Outcome {
    let mut worst = 0.0f64;
    for s in 0..50u64 {
        let mut r = rng_for(s, &[2]);
        let n = r.random_range(4..=64);
        let d = r.random_range(1..=6);
        let x = random_matrix(&mut r, n, d);
        let (w, _) = build_affinity(&x, SigmaMode::AutoMedian).unwrap();
        let bundle = diffusion_decompose(&w).unwrap();
        for t in [0.5, 1.0, 2.0] {
            let emb = diffusion_map(&bundle, n - 1, t).unwrap();
            for i in 0..n {
                for j in 0..n {
                    let e: f64 = (0..n - 1)
                        .map(|c| (emb.coords[(i, c)] - emb.coords[(j, c)]).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    let dd = diffusion_distance(&bundle, i, j, n - 1, t).unwrap();
                    worst = worst.max((e - dd).abs());
                }
            }
        }
    }
    outcome(worst <= 1e-10, format!("max |embedding distance - diffusion distance| = {worst:.2e}"))
}

fn gaussian_mi_oracle() -> Outcome {
    let n = 20_000;
    let mut lines = Vec::new();
    let mut pass = true;
    for (i, rho) in [0.0f64, 0.3, 0.8, 0.95].into_iter().enumerate() {
        let mut r = rng_for(3, &[i as u64]);
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        for _ in 0..n {
            let (x, z) = (gauss(&mut r), gauss(&mut r));
            a.push(x);
            b.push(rho * x + (1.0 - rho * rho).sqrt() * z);
        }
        let a = DenseMatrix::new(n, 1, a).unwrap();
        let b = DenseMatrix::new(n, 1, b).unwrap();
        let bundle = CovarianceBundle::from_embeddings(&a, &b).unwrap();
        let mi = gaussian_mi(&bundle, Ridge::default()).unwrap().value;
        let truth = 0.5 * (1.0 / (1.0 - rho * rho)).ln();
        let ok = if rho == 0.0 {
            (mi - truth).abs() <= 0.01
        } else {
            ((mi - truth) / truth).abs() <= 0.05
        };
        pass &= ok;
        lines.push(format!("rho {rho}: {mi:.4} vs {truth:.4}"));
    }
    outcome(pass, lines.join(", "))
}

fn ib_gradient_check() -> Outcome {
    let h = 1e-5;
    let ridge = 1e-9;
    let mut worst = 0.0f64;
    for s in 0..100u64 {
        let mut r = rng_for(4, &[s]);
        let d = r.random_range(1..=8);
        let dy = r.random_range(1..=8);
        let n = 4 * (2 * d + dy);
        // shared latent factors make the three blocks correlated
        let z = random_matrix(&mut r, n, 2 * d + dy);
        let mix = |r: &mut ChaCha8Rng, cols: usize| {
            let m = random_matrix(r, 2 * d + dy, cols);
            z.matmul(&m).unwrap().add(&random_matrix(r, n, cols).scale(0.3)).unwrap()
        };
        let (a, b, y) = (mix(&mut r, d), mix(&mut r, d), mix(&mut r, dy));
        let (bundle, target) = TargetCovariances::from_embeddings(&a, &b, &y).unwrap();
        let alpha = r.random_range(0.05..0.95);
        let beta = r.random_range(0.2..3.0);
        let f = |x: f64| ib_objective(&bundle, &target, x, beta, ridge).unwrap().objective;
        let fd = (f(alpha + h) - f(alpha - h)) / (2.0 * h);
        let g = ib_objective_gradient(&bundle, &target, alpha, beta, ridge).unwrap();
        worst = worst.max((g - fd).abs() / fd.abs().max(g.abs()).max(1e-8));
    }
    outcome(worst <= 1e-5, format!("max relative deviation {worst:.2e} over 100 instances"))
}

fn planted_detection() -> Outcome {
    let data = common::capture_data();
    let (mut hits, mut worst) = (0, 0.0f64);
    for seed in 0..100u64 {
        let base = common::untrained(seed);
        let (planted, p) = common::plant(&base, seed, 1);
        let (merged, log) = common::compress(&planted, &data, base.n_layers(), true);
        let pair = log.steps[0].pair;
        // the plant is block p, i.e. layer id p + 1
        if pair.0 == p + 1 || pair.1 == p + 1 {
            hits += 1;
        }
        let delta = common::cross_entropy(&merged) - common::cross_entropy(&planted);
        worst = worst.max(delta.abs());
    }
    outcome(
        hits >= 95 && worst <= 0.05,
        format!("{hits}/100 first pairs include the plant, max |dCE| {worst:.2e}"),
    )
}

fn iterative_vs_single_pass() -> Outcome {
    let data = common::capture_data();
    let mut wins = 0;
    for (seed, base) in common::paired_trials() {
        let (planted, _) = common::plant(&base, seed, 2);
        let target = base.n_layers();
        let (it, _) = common::compress(&planted, &data, target, true);
        let (once, _) = common::compress(&planted, &data, target, false);
        if common::cross_entropy(&it) <= common::cross_entropy(&once) {
            wins += 1;
        }
    }
    outcome(wins >= 80, format!("iterative <= non-iterative in {wins}/100 paired trials"))
}

fn quadratic_bound() -> Outcome {
    let settings = ImpactSettings {
        power_iters: 200,
        ..ImpactSettings::default()
    };
    let (mut always, mut worst_gap) = (true, 0.0f64);
    for s in 0..20u64 {
        let mut r = rng_for(7, &[s]);
        let dim = r.random_range(2..=12);
        let mut diag: Vec<f64> = (0..dim).map(|_| r.random_range(0.1..4.0)).collect();
        let top = r.random_range(0..dim);
        diag[top] = 5.0 + r.random_range(0.0..1.0);
        let q = QuadraticLoss {
            hessian: DenseMatrix::from_diag(&diag),
        };
        let zero = vec![0.0; dim];
        for _ in 0..5 {
            let step: Vec<f64> = (0..dim).map(|_| gauss(&mut r)).collect();
            let rep = loss_impact_with(&q, &zero, &step, &settings).unwrap();
            always &= rep.observed <= rep.bound;
        }
        let mut aligned = zero.clone();
        aligned[top] = gauss(&mut r);
        let rep = loss_impact_with(&q, &zero, &aligned, &settings).unwrap();
        always &= rep.bound_satisfied;
        worst_gap = worst_gap.max((rep.bound - rep.observed).abs());
    }
    outcome(
        always && worst_gap <= 1e-9,
        format!("bound held on all random steps; aligned-step gap {worst_gap:.2e}"),
    )
}

fn determinism_and_replay() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let base = common::untrained(42);
    let (planted, _) = common::plant(&base, 42, 1);
    let model = tmp.path().join("planted.ckpt");
    save_checkpoint(&planted, &model).unwrap();
    let run = |out: &Path| {
        let st = Command::new(env!("CARGO_BIN_EXE_layerfuse"))
            .env_remove("LAYERFUSE_THREADS")
            .args(["--seed", "42", "--out"])
            .arg(out)
            .args(["compress", "--model"])
            .arg(&model)
            .args(["--target-layers", "3"])
            .output()
            .unwrap();
        st.status.success()
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    if !run(&a) || !run(&b) {
        return outcome(false, "compress run failed");
    }
    let same = |f: &str| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap();
    let (ck, lg) = (same("compressed.ckpt"), same("merge_log.jsonl"));
    let log = MergeLog::from_jsonl(&std::fs::read_to_string(a.join("merge_log.jsonl")).unwrap()).unwrap();
    let replayed = replay(&planted, &log.steps).unwrap();
    let compressed = load_checkpoint(&a.join("compressed.ckpt")).unwrap();
    let exact = replayed.to_bytes().unwrap() == compressed.to_bytes().unwrap();
    outcome(
        ck && lg && exact,
        format!("checkpoint identical {ck}, log identical {lg}, replay bit-exact {exact}"),
    )
}

fn invariant_suites() -> Outcome {
    let mut failures: Vec<String> = Vec::new();
    let mut perm_checked = 0;
    let mut note = |ok: bool, what: &str, s: u64| {
        if !ok && failures.len() < 5 {
            failures.push(format!("{what} (instance {s})"));
        }
    };
    for s in 0..1000u64 {
        let mut r = rng_for(9, &[s]);

        let n = r.random_range(2..=10);
        let a = random_matrix(&mut r, n, n);
        let sym = a.add(&a.transpose()).unwrap();
        let eig = sym_eig(&sym).unwrap();
        let rec = eig.reconstruct().sub(&sym).unwrap().max_abs();
        let vtv = eig.eigenvectors.t_matmul(&eig.eigenvectors).unwrap().sub(&DenseMatrix::identity(n)).unwrap().max_abs();
        note(rec <= 1e-9 * (1.0 + sym.max_abs()) && vtv <= 1e-9, "eigendecomposition", s);
        note(eig.eigenvalues.windows(2).all(|w| w[0] >= w[1]), "eigenvalue order", s);
        let cov = covariance(&random_matrix(&mut r, n + 3, 3)).unwrap();
        note(cov.is_symmetric(1e-12) && sym_eig(&cov).unwrap().eigenvalues.iter().all(|&l| l >= -1e-10), "covariance PSD", s);

        let pts = r.random_range(5..=20);
        let x = random_matrix(&mut r, pts, 3);
        let (w, _) = build_affinity(&x, SigmaMode::AutoMedian).unwrap();
        let bundle = diffusion_decompose(&w).unwrap();
        note((bundle.eigenvalues[0] - 1.0).abs() <= 1e-9, "leading eigenvalue 1", s);
        note(bundle.eigenvalues.iter().all(|&l| (-1.0 - 1e-9..=1.0 + 1e-9).contains(&l)), "spectral range", s);
        let k = r.random_range(1..pts);
        let cfg = ManifoldConfig {
            sigma: SigmaMode::AutoMedian,
            k,
            t: 1.0,
        };
        let mut perm: Vec<usize> = (0..pts).collect();
        for i in (1..pts).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let act = |m: DenseMatrix| ActivationMatrix {
            layer_index: 1,
            data: m,
        };
        let (e0, _) = embed_activations(&act(x.clone()), &cfg).unwrap();
        let (e1, _) = embed_activations(&act(x.permute_rows(&perm)), &cfg).unwrap();
        let gap_ok = e0.eigenvalues_used.windows(2).all(|w| (w[0] - w[1]).abs() > 1e-6);
        if gap_ok {
            perm_checked += 1;
            let mut ok = true;
            for c in 0..k {
                let pos = (0..pts).all(|i| (e1.coords[(i, c)] - e0.coords[(perm[i], c)]).abs() <= 1e-7);
                let neg = (0..pts).all(|i| (e1.coords[(i, c)] + e0.coords[(perm[i], c)]).abs() <= 1e-7);
                ok &= pos || neg;
            }
            note(ok, "permutation equivariance", s);
        }

        let d = r.random_range(1..=4);
        let rows = 6 * d;
        let z = random_matrix(&mut r, rows, 2 * d);
        let la = z.block(0, 0, rows, d);
        let lb = z.block(0, d, rows, d).add(&la.scale(r.random_range(0.0..2.0))).unwrap();
        let cb = CovarianceBundle::from_embeddings(&la, &lb).unwrap();
        let mi = gaussian_mi(&cb, Ridge::default()).unwrap().value;
        let mi_swapped = gaussian_mi(&cb.swapped(), Ridge::default()).unwrap().value;
        note((mi - mi_swapped).abs() <= 1e-10 * (1.0 + mi.abs()), "MI symmetry", s);
        let nm = nmi(&cb, Ridge::default()).unwrap();
        note((0.0..=1.0).contains(&nm.value) && ((nm.value == 0.0) == (nm.mi == 0.0)), "NMI range", s);
        let alpha = r.random_range(0.0..=1.0);
        let mc = merged_covariance(&cb, alpha).unwrap();
        note(sym_eig(&mc).unwrap().eigenvalues.iter().all(|&l| l >= -1e-10), "merged covariance PSD", s);

        let layers = r.random_range(2..=5);
        let embs: Vec<_> = (0..layers)
            .map(|l| {
                let m = random_matrix(&mut r, 12, 3);
                let mut e = embed_activations(&act(m), &ManifoldConfig { k: 3, ..cfg }).unwrap().0;
                e.layer_index = l + 1;
                e
            })
            .collect();
        let measure = [Measure::Nmi, Measure::Cosine, Measure::EuclideanRbf, Measure::MahalanobisRbf][s as usize % 4];
        let sm = build_similarity_matrix(&embs, measure, &SimilarityParams::default()).unwrap();
        let mut ok = true;
        for i in 0..layers {
            ok &= sm.values[(i, i)] == 1.0;
            for j in 0..layers {
                ok &= sm.values[(i, j)] == sm.values[(j, i)] && (0.0..=1.0).contains(&sm.values[(i, j)]);
            }
        }
        note(ok, "similarity matrix symmetric in [0,1]", s);
    }
    let pass = failures.is_empty();
    let detail = if pass {
        format!("1000 instances per suite, permutation check on {perm_checked} with a spectral gap")
    } else {
        failures.join("; ")
    };
    outcome(pass, detail)
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 9] = [
        ("compression-ratio arithmetic", Duration::from_secs(1), compression_arithmetic),
        ("diffusion-map distance identity", Duration::from_secs(30), diffusion_identity),
        ("Gaussian MI oracle", Duration::from_secs(30), gaussian_mi_oracle),
        ("IB gradient check", Duration::from_secs(10), ib_gradient_check),
        ("planted-redundancy detection", Duration::from_secs(300), planted_detection),
        ("iterative vs non-iterative", Duration::from_secs(600), iterative_vs_single_pass),
        ("loss bound on quadratics", Duration::from_secs(1), quadratic_bound),
        ("determinism and replay", Duration::from_secs(60), determinism_and_replay),
        ("invariant suites", Duration::from_secs(120), invariant_suites),
    ];
    let only: Option<usize> = std::env::args().nth(1).and_then(|a| a.parse().ok());
    let mut failed = 0;
    for (i, (name, budget, f)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        let t0 = Instant::now();
        let o = f();
        let took = t0.elapsed();
        let pass = o.pass && took <= *budget;
        failed += !pass as usize;
        println!(
            "{} {}. {name}: {} [{:.2}s of {}s]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
