//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::time::{Duration, Instant};

use drl::episodes::{EpisodeGenerator, Stage};
use drl::numkernel::{row_softmax, Matrix, ParamStore, Rng, Tape};
use drl::relevance::{
    drl_loss, gcn_weight_name, group_loss_iterate, Activation, MetricOptions, MetricRegistry, Propagator,
    PropagatorOptions, PropagatorRegistry, RelevanceGraph,
};
use drl::training::{evaluate, gradient_suite, run_experiment, train_stage, EvalReport, Model, TrainConfig, SUITE_TOLERANCE};
use drl_cli::args::Common;
use drl_cli::commands::cmd_train;
use drl_cli::output::mean_std;
use rayon::prelude::*;

const SEEDS: u64 = 10;

struct Verdict {
    name: &'static str,
    passed: bool,
    detail: String,
}

/// The standard synthetic setup: 5 base and 5 novel classes, K=3,
/// 32 RoIs, 16-d raws and features, radius 4, within-class std 1.5.
fn standard(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    cfg.data.base_classes = 5;
    cfg.data.novel_classes = 5;
    cfg.data.raw_dim = 16;
    cfg.data.class_mean_radius = 4.0;
    cfg.data.within_class_std = 1.5;
    cfg.model.feat_dim = 16;
    cfg.train.shots = 3;
    cfg.train.n_roi = 32;
    cfg.train.momentum = 0.5;
    cfg.train.base_episodes = 300;
    cfg.train.finetune_episodes = 100;
    cfg
}

struct Graph {
    s: Matrix,
    anchors: Vec<usize>,
    drifts: Matrix,
    labels: Vec<usize>,
}

fn random_graph(rng: &mut Rng) -> Graph {
    let d = 2 + rng.index(6);
    let n_anchor = 1 + rng.index(8);
    let n_drift = 1 + rng.index(12);
    let m = n_anchor + n_drift;
    let feats = Matrix::from_fn(m, 3 + rng.index(6), |_, _| rng.normal());
    let mut tape = Tape::new();
    let x = tape.constant(feats);
    let metric = MetricRegistry::with_builtins()
        .build("pearson", &MetricOptions::default(), &mut ParamStore::new(), rng)
        .unwrap();
    let s = metric.relation(&mut tape, &ParamStore::new(), x).unwrap();
    Graph {
        s: tape.value(s).clone(),
        anchors: (0..n_anchor).map(|_| rng.index(d)).collect(),
        drifts: row_softmax(&Matrix::from_fn(n_drift, d, |_, _| 2.0 * rng.normal())),
        labels: (0..n_drift).map(|_| rng.index(d)).collect(),
    }
}

fn propagate(prop: &dyn Propagator, store: &ParamStore, g: &Graph) -> (Matrix, f64) {
    let mut tape = Tape::new();
    let s = tape.constant(g.s.clone());
    let p = tape.constant(g.drifts.clone());
    let graph = RelevanceGraph::from_parts(&mut tape, s, &g.anchors, p).unwrap();
    let out = prop.propagate(&mut tape, store, &graph).unwrap();
    let loss = drl_loss(&mut tape, &graph, out.output, &g.labels).unwrap();
    (tape.value(out.output).clone(), tape.scalar(loss))
}

fn gradient_criterion() -> Verdict {
    let start = Instant::now();
    let cases = gradient_suite().expect("suite runs");
    let elapsed = start.elapsed();
    let worst = cases.iter().map(|c| c.report.max_rel_error()).fold(0.0, f64::max);
    Verdict {
        name: "gradient suite",
        passed: cases.len() == 8 && worst <= SUITE_TOLERANCE && elapsed < Duration::from_secs(120),
        detail: format!("{} cases, max relative error {worst:.2e} <= 1e-4, {elapsed:.1?} < 120s", cases.len()),
    }
}

fn equivalence_criterion() -> Verdict {
    let mut rng = Rng::new(101);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let g = random_graph(&mut rng);
        let d = g.drifts.cols();
        let opts = PropagatorOptions {
            depth: 1,
            activation: Activation::Identity,
            shift_attention: true,
            max_width: d,
            ..PropagatorOptions::default()
        };
        let mut store = ParamStore::new();
        store.insert(gcn_weight_name(1), Matrix::identity(d));
        let gcn = PropagatorRegistry::with_builtins().build("normal", &opts, &mut store, &mut rng).unwrap();
        let (out, _) = propagate(gcn.as_ref(), &store, &g);
        let oracle = group_loss_iterate(&g.s, &g.drifts, &g.anchors, 1).unwrap();
        let a = g.anchors.len();
        for r in 0..oracle.rows() {
            for c in 0..d {
                worst = worst.max((out.get(a + r, c) - oracle.get(r, c)).abs());
            }
        }
    }
    Verdict {
        name: "group-loss equivalence",
        passed: worst <= 1e-10,
        detail: format!("100 instances, max row difference {worst:.2e} <= 1e-10"),
    }
}

fn anchor_criterion() -> Verdict {
    let mut rng = Rng::new(202);
    let mut anchor_mismatches = 0usize;
    let mut worst_sum: f64 = 0.0;
    let mut negatives = 0usize;
    for i in 0..1000 {
        let g = random_graph(&mut rng);
        let structure = if i % 2 == 0 { "normal" } else { "residual" };
        let opts = PropagatorOptions {
            depth: 1 + (i / 2) % 10,
            max_width: g.drifts.cols(),
            ..PropagatorOptions::default()
        };
        let mut store = ParamStore::new();
        let gcn = PropagatorRegistry::with_builtins().build(structure, &opts, &mut store, &mut rng).unwrap();
        let (out, _) = propagate(gcn.as_ref(), &store, &g);
        for (r, &slot) in g.anchors.iter().enumerate() {
            if (0..out.cols()).any(|c| out.get(r, c) != if c == slot { 1.0 } else { 0.0 }) {
                anchor_mismatches += 1;
            }
        }
        for r in 0..out.rows() {
            negatives += out.row(r).iter().filter(|&&v| v < 0.0).count();
            worst_sum = worst_sum.max((out.row(r).iter().sum::<f64>() - 1.0).abs());
        }
    }
    Verdict {
        name: "anchor invariance and row-stochasticity",
        passed: anchor_mismatches == 0 && negatives == 0 && worst_sum <= 1e-9,
        detail: format!(
            "1000 graphs, depths 1-10, both structures: {anchor_mismatches} anchor mismatches, {negatives} negative entries, max |row sum - 1| {worst_sum:.1e}"
        ),
    }
}

fn permutation_criterion() -> Verdict {
    let mut rng = Rng::new(303);
    let mut failures = 0usize;
    for i in 0..100 {
        let g = random_graph(&mut rng);
        let n = g.drifts.rows();
        let a = g.anchors.len();
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let node = |k: usize| if k < a { k } else { a + perm[k - a] };
        let m = g.s.rows();
        let permuted = Graph {
            s: Matrix::from_fn(m, m, |r, c| g.s.get(node(r), node(c))),
            anchors: g.anchors.clone(),
            drifts: Matrix::from_fn(n, g.drifts.cols(), |r, c| g.drifts.get(perm[r], c)),
            labels: perm.iter().map(|&p| g.labels[p]).collect(),
        };
        let structure = if i % 2 == 0 { "normal" } else { "residual" };
        let opts = PropagatorOptions {
            depth: 1 + i % 5,
            max_width: g.drifts.cols(),
            ..PropagatorOptions::default()
        };
        let mut store = ParamStore::new();
        let gcn = PropagatorRegistry::with_builtins().build(structure, &opts, &mut store, &mut rng).unwrap();
        let (out, loss) = propagate(gcn.as_ref(), &store, &g);
        let (out_p, loss_p) = propagate(gcn.as_ref(), &store, &permuted);
        let rows_equal = perm.iter().enumerate().all(|(r, &src)| out_p.row(a + r) == out.row(a + src));
        if !rows_equal || loss.to_bits() != loss_p.to_bits() {
            failures += 1;
        }
    }
    Verdict {
        name: "permutation equivariance",
        passed: failures == 0,
        detail: format!("100 instances, {failures} with inexact outputs or loss"),
    }
}

/// Base-trains once per seed, then fine-tunes copies with DRL off and on.
fn drl_arms() -> Vec<(EvalReport, EvalReport)> {
    (0..SEEDS)
        .into_par_iter()
        .map(|seed| {
            let cfg = standard(seed);
            let gen = EpisodeGenerator::new(cfg.dataset_spec()).unwrap();
            let mut base = Model::init(&cfg).unwrap();
            train_stage(&gen, &cfg, Stage::Base, &mut base).unwrap();
            let ck = base.checkpoint();
            let arm = |use_drl: bool| {
                let mut c = cfg.clone();
                c.relevance.use_drl = use_drl;
                let mut m = Model::from_checkpoint(&c, ck.clone()).unwrap();
                train_stage(&gen, &c, Stage::FineTune, &mut m).unwrap();
                evaluate(&gen, &c, &m, c.eval.episodes).unwrap()
            };
            (arm(false), arm(true))
        })
        .collect()
}

fn meta_arms() -> Vec<(f64, f64)> {
    (0..SEEDS)
        .into_par_iter()
        .map(|seed| {
            let run = |use_meta: bool| {
                let mut cfg = standard(seed);
                cfg.train.use_meta = use_meta;
                run_experiment(&cfg).unwrap().eval.query_accuracy
            };
            (run(false), run(true))
        })
        .collect()
}

fn drl_effect_criterion(arms: &[(EvalReport, EvalReport)], elapsed: Duration) -> Verdict {
    let off: Vec<f64> = arms.iter().map(|(o, _)| o.query_accuracy).collect();
    let on: Vec<f64> = arms.iter().map(|(_, d)| d.query_accuracy).collect();
    let (off_mean, _) = mean_std(&off);
    let (on_mean, _) = mean_std(&on);
    let start = Instant::now();
    let meta = meta_arms();
    let elapsed = elapsed + start.elapsed();
    let meta_off: Vec<f64> = meta.iter().map(|m| m.0).collect();
    let meta_on: Vec<f64> = meta.iter().map(|m| m.1).collect();
    let (moff, soff) = mean_std(&meta_off);
    let (mon, son) = mean_std(&meta_on);
    let pooled = ((soff * soff + son * son) / 2.0).sqrt();
    let drl_ok = on_mean >= off_mean + 0.03;
    let meta_ok = mon - moff <= 2.0 * pooled;
    Verdict {
        name: "DRL effect",
        passed: drl_ok && meta_ok && elapsed < Duration::from_secs(600),
        detail: format!(
            "accuracy DRL on {on_mean:.4} vs off {off_mean:.4} (diff {:+.4}, need >= +0.03); meta on {mon:.4} - off {moff:.4} = {:+.4} <= 2 sd {:.4}; {elapsed:.1?} < 600s",
            on_mean - off_mean,
            mon - moff,
            2.0 * pooled
        ),
    }
}

fn depth_criterion() -> Verdict {
    let results: Vec<(usize, Vec<(f64, bool)>)> = (1..=6)
        .map(|depth| {
            let runs = (0..SEEDS)
                .into_par_iter()
                .map(|seed| {
                    let mut cfg = standard(seed);
                    cfg.relevance.depth = depth;
                    match run_experiment(&cfg) {
                        Ok(out) => {
                            let finite = out.losses().all(|r| r.total.is_finite());
                            (out.eval.query_accuracy, finite)
                        }
                        Err(_) => (f64::NAN, false),
                    }
                })
                .collect();
            (depth, runs)
        })
        .collect();
    let means: Vec<f64> = results
        .iter()
        .map(|(_, runs)| mean_std(&runs.iter().map(|r| r.0).collect::<Vec<_>>()).0)
        .collect();
    let all_finite = results.iter().all(|(_, runs)| runs.iter().all(|r| r.1));
    let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
    let listed: Vec<String> = means.iter().map(|m| format!("{m:.4}")).collect();
    Verdict {
        name: "depth insensitivity",
        passed: all_finite && hi - lo <= 0.05,
        detail: format!("L=1..6 mean accuracy [{}], range {:.4} <= 0.05, all losses finite: {all_finite}", listed.join(", "), hi - lo),
    }
}

fn inference_criterion() -> Verdict {
    let mut cfg = standard(5);
    cfg.train.base_episodes = 40;
    cfg.train.finetune_episodes = 10;
    let out = run_experiment(&cfg).unwrap();
    let gen = EpisodeGenerator::new(cfg.dataset_spec()).unwrap();
    let mut reports = Vec::new();
    for use_drl in [true, false] {
        let mut c = cfg.clone();
        c.relevance.use_drl = use_drl;
        reports.push(evaluate(&gen, &c, &out.model, 10).unwrap());
    }
    let bits = |r: &EvalReport| {
        let mut v = vec![r.query_accuracy.to_bits(), r.class_separation.unwrap_or(f64::NAN).to_bits()];
        v.extend(r.per_class_accuracy.iter().map(|a| a.unwrap_or(f64::NAN).to_bits()));
        v
    };
    Verdict {
        name: "inference-path independence",
        passed: bits(&reports[0]) == bits(&reports[1]),
        detail: format!("accuracy {} with DRL on and {} with DRL off", reports[0].query_accuracy, reports[1].query_accuracy),
    }
}

fn determinism_criterion() -> Verdict {
    let first = tempfile::TempDir::new().unwrap();
    let second = tempfile::TempDir::new().unwrap();
    let common = |out: &std::path::Path, config: Option<std::path::PathBuf>| Common {
        config,
        seed: Some(11),
        seeds: 1,
        out: out.to_path_buf(),
        overrides: vec!["train.base_episodes=60".into(), "train.finetune_episodes=20".into()],
        shots: None,
    };
    cmd_train(&common(first.path(), None)).unwrap();
    let manifest = first.path().join("manifest.json");
    let mut replay = common(second.path(), Some(manifest));
    replay.overrides.clear();
    cmd_train(&replay).unwrap();
    let same = |f: &str| std::fs::read(first.path().join(f)).unwrap() == std::fs::read(second.path().join(f)).unwrap();
    let (csv, ck) = (same("losses.csv"), same("checkpoint.json"));
    Verdict {
        name: "determinism",
        passed: csv && ck,
        detail: format!("manifest replay: loss CSV identical {csv}, checkpoint identical {ck}"),
    }
}

fn separation_criterion(arms: &[(EvalReport, EvalReport)]) -> Verdict {
    let off: Vec<f64> = arms.iter().map(|(o, _)| o.class_separation.unwrap_or(f64::NAN)).collect();
    let on: Vec<f64> = arms.iter().map(|(_, d)| d.class_separation.unwrap_or(f64::NAN)).collect();
    let (off_mean, _) = mean_std(&off);
    let (on_mean, _) = mean_std(&on);
    Verdict {
        name: "separation trend",
        passed: on_mean > off_mean,
        detail: format!("mean silhouette DRL on {on_mean:.4} > off {off_mean:.4}"),
    }
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut verdicts = vec![
        gradient_criterion(),
        equivalence_criterion(),
        anchor_criterion(),
        permutation_criterion(),
    ];
    let start = Instant::now();
    let arms = drl_arms();
    let arm_time = start.elapsed();
    verdicts.push(drl_effect_criterion(&arms, arm_time));
    verdicts.push(depth_criterion());
    verdicts.push(inference_criterion());
    verdicts.push(determinism_criterion());
    verdicts.push(separation_criterion(&arms));

    for v in &verdicts {
        println!("{} {}: {}", if v.passed { "PASS" } else { "FAIL" }, v.name, v.detail);
    }
    let failed = verdicts.iter().filter(|v| !v.passed).count();
    println!("acceptance: {} passed, {failed} failed", verdicts.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
