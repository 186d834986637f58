//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! `GDC_ACCEPTANCE_ONLY=1,5,8` restricts the run to the listed criteria.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use gdc_core::experiment::{replication_seeds, replication_study, write_sweep_csv};
use gdc_core::model::{forward, init_params};
use gdc_core::model::ops::{disentangle, restricted_weights};
use gdc_core::objectives::gradcheck::{gradient_check, Problem};
use gdc_core::objectives::{exact_wasserstein_1d, sinkhorn_wasserstein, LossContext};
use gdc_core::{
    aggregate_replications, ate_error, centroid_separation, pehe_sqrt, project_embeddings,
    split_units, sweep, synthesize, EmbeddingKind, Fitted, Graph, LossWeights, MetricsReport, ModelConfig,
    Neighborhoods, SinkhornConfig, Split, SynthesisConfig, TrainConfig, Variant, WeightGrid,
};
use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

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

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn complementarity() -> Outcome {
    let started = Instant::now();
    let mut worst = 0.0f64;
    for draw in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(draw);
        let n = rng.random_range(1..=64);
        let k = rng.random_range(1..=32);
        let scale = rng.random_range(0.1..10.0);
        let x = Array2::from_shape_fn((n, k), |_| scale * normal(&mut rng));
        let model = ModelConfig {
            mask_hidden: rng.random_range(1..=32),
            ..ModelConfig::default()
        };
        let gain = rng.random_range(0.5..20.0);
        let mask = init_params::<f64>(&model, k, draw).unwrap().mask;
        let mask = gdc_core::model::MaskParams {
            w1: &mask.w1 * gain,
            b1: mask.b1.mapv(|_| normal(&mut rng)),
            w2: &mask.w2 * gain,
            b2: mask.b2.mapv(|_| normal(&mut rng)),
        };
        let parts = disentangle(x.view(), &mask).unwrap();
        let err = (&parts.x_a + &parts.x_c - &x).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        worst = worst.max(err);
    }
    let t = started.elapsed();
    outcome(
        worst < 1e-6 && within(t, 5.0),
        format!("max |X_a + X_c - X| = {worst:.2e} over 100 draws (< 1e-6), {:.2}s (< 5s)", t.as_secs_f64()),
    )
}

fn attention_rows() -> Outcome {
    let started = Instant::now();
    let mut worst = 0.0f64;
    let mut support_ok = true;
    let mut rows = 0usize;
    for g in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + g);
        let n = rng.random_range(2..=100);
        let m = rng.random_range(0..=3 * n);
        let graph = Graph::from_edges_lossy(n, (0..m).map(|_| (rng.random_range(0..n), rng.random_range(0..n))));
        let t: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        let k = rng.random_range(2..=12);
        let x = Array2::from_shape_fn((n, k), |_| 3.0 * normal(&mut rng));
        let model = ModelConfig {
            hidden_dim: 8,
            mask_hidden: 4,
            head_hidden: 4,
            ..ModelConfig::default()
        };
        let mut params = init_params::<f64>(&model, k, g).unwrap();
        for att in &mut params.agg.att {
            att.mapv_inplace(|v| 5.0 * v);
        }
        let nb = Neighborhoods::new(&graph, &t).unwrap();
        let out = forward(&x, &t, &nb, &params, &model, Variant::Full).unwrap();
        let logits = &out.attention_logits;
        for (groups, name) in [(&nb.full, "full"), (&nb.same, "same"), (&nb.opposite, "opposite")] {
            let w = restricted_weights(logits, groups);
            for i in 0..n {
                let group = groups.group(i);
                let expected: Vec<usize> = nb
                    .edges
                    .pairs
                    .iter()
                    .enumerate()
                    .filter(|(_, &(ti, sj))| {
                        ti == i
                            && match name {
                                "full" => true,
                                "same" => t[sj] == t[i],
                                _ => t[sj] != t[i],
                            }
                    })
                    .map(|(e, _)| e)
                    .collect();
                let mut got = group.to_vec();
                got.sort_unstable();
                support_ok &= got == expected;
                if name == "opposite" {
                    support_ok &= group.is_empty() != nb.has_opp[i];
                }
                if group.is_empty() {
                    continue;
                }
                let s: f64 = group.iter().map(|&e| w[e]).sum();
                worst = worst.max((s - 1.0).abs());
                rows += 1;
            }
        }
    }
    let t = started.elapsed();
    outcome(
        worst < 1e-6 && support_ok && within(t, 10.0),
        format!(
            "{rows} rows, max |row sum - 1| = {worst:.2e} (< 1e-6), supports {}, {:.2}s (< 10s)",
            if support_ok { "exact" } else { "WRONG" },
            t.as_secs_f64()
        ),
    )
}

fn sinkhorn_oracle() -> Outcome {
    let started = Instant::now();
    let cfg = SinkhornConfig {
        epsilon: 0.01,
        max_iters: 5000,
        ..SinkhornConfig::default()
    };
    let mut worst = 0.0f64;
    for inst in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + inst);
        let shift = rng.random_range(-1.0..1.0);
        let a: Vec<f64> = (0..32).map(|_| normal(&mut rng)).collect();
        let b: Vec<f64> = (0..32).map(|_| shift + normal(&mut rng)).collect();
        let exact = exact_wasserstein_1d(&a, &b);
        let col = |v: &[f64]| Array2::from_shape_vec((v.len(), 1), v.to_vec()).unwrap();
        let approx = sinkhorn_wasserstein(col(&a).view(), col(&b).view(), &cfg).unwrap();
        worst = worst.max((approx - exact).abs() / exact);
    }
    let t = started.elapsed();
    outcome(
        worst < 0.05 && within(t, 30.0),
        format!("max relative error {:.3}% over 50 instances (< 5%), {:.2}s (< 30s)", 100.0 * worst, t.as_secs_f64()),
    )
}

fn gradient_checks() -> Outcome {
    let started = Instant::now();
    let (n, k) = (12, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(3000);
    let graph = Graph::from_edges_lossy(n, (0..20).map(|_| (rng.random_range(0..n), rng.random_range(0..n))));
    let t: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let x = Array2::from_shape_fn((n, k), |_| rng.random_range(-1.0..1.0));
    let y = Array1::from_shape_fn(n, |_| rng.random_range(-1.0..1.0));
    let nb = Neighborhoods::new(&graph, &t).unwrap();
    let index: Vec<usize> = (0..9).collect();
    let model = ModelConfig {
        hidden_dim: 4,
        mask_hidden: 4,
        head_hidden: 4,
        ..ModelConfig::default()
    };
    let balanced = LossWeights {
        w1: 0.5,
        w2: 0.3,
        w3: 0.7,
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (i, weights) in [LossWeights::default(), balanced].into_iter().enumerate() {
        let ctx = LossContext::new(
            &y,
            &t,
            &nb.has_opp,
            &index,
            weights,
            SinkhornConfig::default(),
            model.cf_target_gradient,
        )
        .unwrap();
        let params = init_params::<f64>(&model, k, 10 + i as u64).unwrap();
        let problem = Problem {
            features: &x,
            treatments: &t,
            neighborhoods: &nb,
            model: &model,
            variant: Variant::Full,
            ctx: &ctx,
        };
        let r = gradient_check(&problem, &params, 1e-5).unwrap();
        worst = worst.max(r.max_relative_error);
        checked += r.checked;
    }
    let t = started.elapsed();
    outcome(
        worst < 1e-4 && within(t, 60.0),
        format!(
            "max relative error {worst:.2e} over {checked} parameters (< 1e-4), {:.2}s (< 60s)",
            t.as_secs_f64()
        ),
    )
}

fn metric_oracles() -> Outcome {
    let idx = [0, 1, 2];
    let tau = array![1.0, 2.0, 3.0];
    let est = array![2.0, 0.0, 3.0];
    let zero_tau = array![0.0, 0.0, 0.0];
    let spread = array![1.0, -1.0, 2.0];
    let cases = [
        (pehe_sqrt(&est, &tau, &idx).unwrap(), (5.0f64 / 3.0).sqrt()),
        (ate_error(&est, &tau, &idx).unwrap(), 1.0 / 3.0),
        (pehe_sqrt(&spread, &zero_tau, &idx).unwrap(), 2f64.sqrt()),
        (ate_error(&spread, &zero_tau, &idx).unwrap(), 2.0 / 3.0),
        (pehe_sqrt(&tau, &tau, &idx).unwrap(), 0.0),
        (ate_error(&tau, &tau, &idx).unwrap(), 0.0),
    ];
    let worst = cases.iter().map(|(got, want)| (got - want).abs()).fold(0.0f64, f64::max);
    outcome(worst <= 1e-12, format!("max deviation {worst:.1e} from hand values (<= 1e-12), oracle scores 0"))
}

fn mean_test(reports: &[MetricsReport], variant: Variant, kappa: f64) -> Option<(f64, f64, usize)> {
    aggregate_replications(reports)
        .into_iter()
        .find(|r| r.variant == variant && r.kappa == Some(kappa) && r.split == Split::Test)
        .map(|r| (r.pehe_mean, r.ate_mean, r.count))
}

struct Replications {
    kappa2: Vec<MetricsReport>,
    kappa2_time: Duration,
    first_full: Option<Fitted>,
}

fn ablation_runs(synth: &SynthesisConfig, model: &ModelConfig, train: &TrainConfig) -> Replications {
    let started = Instant::now();
    let mut first_full = None;
    let kappa2 = replication_study(
        synth,
        2.0,
        10,
        &[Variant::Full, Variant::NoDisentangle],
        model,
        train,
        |rep, run| {
            if rep == 0 && run.trained.fitted.variant == Variant::Full {
                first_full = Some(run.trained.fitted.clone());
            }
        },
    )
    .unwrap();
    Replications {
        kappa2,
        kappa2_time: started.elapsed(),
        first_full,
    }
}

fn ablation_ordering(reps: &Replications) -> Outcome {
    let full = mean_test(&reps.kappa2, Variant::Full, 2.0);
    let ablated = mean_test(&reps.kappa2, Variant::NoDisentangle, 2.0);
    let (Some((fp, fa, nf)), Some((np, na, nn))) = (full, ablated) else {
        return outcome(false, "missing replication reports");
    };
    let t = reps.kappa2_time.as_secs_f64();
    outcome(
        fp < np && fa < na && nf == 10 && nn == 10 && t <= 1800.0,
        format!(
            "test √PEHE full {fp:.4} vs no_disentangle {np:.4}; ε_ATE full {fa:.4} vs no_disentangle {na:.4} \
             (10 reps, κ=2), {t:.0}s (<= 1800s)"
        ),
    )
}

fn confounding_sensitivity(
    reps: &Replications,
    synth: &SynthesisConfig,
    model: &ModelConfig,
    train: &TrainConfig,
) -> Outcome {
    let low = replication_study(synth, 0.5, 10, &[Variant::Full], model, train, |_, _| {}).unwrap();
    let (Some((high_pehe, _, _)), Some((low_pehe, _, n))) = (
        mean_test(&reps.kappa2, Variant::Full, 2.0),
        mean_test(&low, Variant::Full, 0.5),
    ) else {
        return outcome(false, "missing replication reports");
    };
    outcome(
        high_pehe > low_pehe && n == 10,
        format!("full test √PEHE κ=2 {high_pehe:.4} vs κ=0.5 {low_pehe:.4} (10 matched seeds)"),
    )
}

fn sweep_harness() -> Outcome {
    let started = Instant::now();
    let bundle = synthesize(&SynthesisConfig {
        n_units: 200,
        edge_budget: 1000,
        kappa: 2.0,
        ..SynthesisConfig::default()
    })
    .unwrap();
    let split = split_units(200, (0.6, 0.2, 0.2), 0).unwrap();
    let grid = WeightGrid::default();
    let rows = sweep(
        &bundle.dataset,
        &bundle.truth,
        &split,
        &ModelConfig::default(),
        &TrainConfig::default(),
        &grid,
        Some(2.0),
    )
    .unwrap();
    let sorted = rows.windows(2).all(|w| w[0].test.pehe_sqrt <= w[1].test.pehe_sqrt);
    let target = LossWeights::default();
    let rank = rows.iter().position(|r| r.weights == target);
    let well_formed = rank.is_some_and(|i| {
        let r = &rows[i];
        r.train.split == Split::Train
            && r.test.split == Split::Test
            && [r.train.pehe_sqrt, r.train.ate_error, r.test.pehe_sqrt, r.test.ate_error]
                .iter()
                .all(|v| v.is_finite() && *v >= 0.0)
    });
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("sweep.csv");
    write_sweep_csv(&csv_path, &rows).unwrap();
    let text = fs::read_to_string(&csv_path).unwrap();
    let csv_rows = text.lines().count() - 1;
    let csv_has_target = text.lines().any(|l| l.split(',').skip(1).take(3).eq(["0.0001", "0.01", "1"]));
    outcome(
        rows.len() == 36 && csv_rows == 36 && sorted && well_formed && csv_has_target,
        format!(
            "{} rows, sorted {sorted}, (1e-4, 0.01, 1) at rank {} well-formed {well_formed}, {:.0}s",
            rows.len(),
            rank.map_or("-".into(), |r| (r + 1).to_string()),
            started.elapsed().as_secs_f64()
        ),
    )
}

fn projection_property(reps: &Replications, synth: &SynthesisConfig, train: &TrainConfig) -> Outcome {
    let Some(fitted) = &reps.first_full else {
        return outcome(false, "no trained κ=2 model");
    };
    let (bundle_seed, _) = replication_seeds(synth, train, 0);
    let bundle = synthesize(&SynthesisConfig {
        kappa: 2.0,
        seed: bundle_seed,
        ..synth.clone()
    })
    .unwrap();
    let pred = fitted.predict(&bundle.dataset).unwrap();
    let points = project_embeddings(&pred.outputs, &bundle.dataset.treatments).unwrap();
    let adj = centroid_separation(&points, EmbeddingKind::Adjustment);
    let conf = centroid_separation(&points, EmbeddingKind::Confounder);
    match (adj, conf) {
        (Some(a), Some(c)) => outcome(
            a < c,
            format!("centroid separation adjustment {a:.4} vs confounder {c:.4} (κ=2, rep 0)"),
        ),
        _ => outcome(false, "a treatment group is empty"),
    }
}

const TINY: &str = r#"
kappas = [2.0]
replications = 1

[synthesis]
n_units = 80
n_features = 8
n_topics = 3
edge_budget = 240

[model]
hidden_dim = 8
mask_hidden = 4
head_hidden = 4

[train]
epochs = 5

[sweep]
w1 = [1e-4, 1e-3]
w2 = [0.01]
w3 = [1.0]
"#;

fn gdc(args: &[&str], cwd: &Path) -> bool {
    Command::new(env!("CARGO_BIN_EXE_gdc"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn determinism() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let files = [
        "b/kappa_2/rep_0/features.csv",
        "b/kappa_2/rep_0/potential.csv",
        "train/metrics.csv",
        "eval/metrics.csv",
        "sweep/sweep.csv",
        "report/summary.csv",
        "proj.csv",
    ];
    let mut snapshots = Vec::new();
    for run in ["first", "second"] {
        let root = dir.path().join(run);
        fs::create_dir_all(&root).unwrap();
        fs::write(root.join("c.toml"), TINY).unwrap();
        let bundle = "b/kappa_2/rep_0";
        let steps: [&[&str]; 6] = [
            &["synth", "--config", "c.toml", "--out", "b", "--seed", "7"],
            &["train", bundle, "--config", "c.toml", "--out", "train", "--seed", "3"],
            &["eval", bundle, "--checkpoint", "train/checkpoint.txt", "--out", "eval"],
            &["sweep", bundle, "--config", "c.toml", "--out", "sweep", "--seed", "3"],
            &["report", "train/metrics.jsonl", "eval/metrics.jsonl", "--out", "report"],
            &["project", "--checkpoint", "train/checkpoint.txt", "--bundle", bundle, "--out", "proj.csv"],
        ];
        for step in steps {
            if !gdc(step, &root) {
                return outcome(false, format!("`gdc {}` failed", step.join(" ")));
            }
        }
        snapshots.push(files.map(|f| fs::read(root.join(f)).unwrap_or_default()));
    }
    let differing: Vec<&str> = files
        .iter()
        .zip(snapshots[0].iter().zip(&snapshots[1]))
        .filter(|(_, (a, b))| a != b || a.is_empty())
        .map(|(f, _)| *f)
        .collect();
    outcome(
        differing.is_empty(),
        format!(
            "{} output files compared across two runs of synth/train/eval/sweep/report/project, {} differ{}, {:.1}s",
            files.len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(" ({})", differing.join(", ")) },
            started.elapsed().as_secs_f64()
        ),
    )
}

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("GDC_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |c: usize| only.as_ref().is_none_or(|o| o.contains(&c));
    let mut failures = 0;
    let mut report = |id: usize, name: &str, o: Outcome| {
        if !o.pass {
            failures += 1;
        }
        println!("[{}] {id:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    };

    if wanted(1) {
        report(1, "disentangle complementarity", complementarity());
    }
    if wanted(2) {
        report(2, "attention stochasticity", attention_rows());
    }
    if wanted(3) {
        report(3, "sinkhorn vs exact oracle", sinkhorn_oracle());
    }
    if wanted(4) {
        report(4, "gradient check", gradient_checks());
    }
    if wanted(5) {
        report(5, "metric oracles", metric_oracles());
    }
    if wanted(8) {
        report(8, "sweep harness", sweep_harness());
    }
    if wanted(10) {
        report(10, "determinism", determinism());
    }
    if wanted(6) || wanted(7) || wanted(9) {
        let synth = SynthesisConfig {
            n_units: 1000,
            n_features: 50,
            ..SynthesisConfig::default()
        };
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let reps = ablation_runs(&synth, &model, &train);
        if wanted(6) {
            report(6, "ablation ordering", ablation_ordering(&reps));
        }
        if wanted(9) {
            report(9, "projection property", projection_property(&reps, &synth, &train));
        }
        if wanted(7) {
            report(7, "confounding sensitivity", confounding_sensitivity(&reps, &synth, &model, &train));
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criterion(s) failed");
        ExitCode::FAILURE
    }
}
