use std::collections::BTreeSet;
use std::path::Path;

use drl::training::{gradient_suite, run_experiment, TrainConfig, SUITE_TOLERANCE};
use rayon::prelude::*;

use crate::args::{Axis, Common};
use crate::config::resolve;
use crate::output::{emit, loss_csv, sweep_csv, Manifest, SweepRow};
use crate::{CliError, CliResult};

fn prepare_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Other(format!("cannot create {}: {e}", dir.display())))
}

fn seed_list(cfg: &TrainConfig, count: usize) -> CliResult<Vec<u64>> {
    if count == 0 {
        return Err(CliError::Config("--seeds must be >= 1".into()));
    }
    Ok((0..count as u64).map(|i| cfg.seed + i).collect())
}

/// Parses a comma-separated list of positive counts.
pub fn parse_counts(flag: &str, text: &str) -> CliResult<Vec<usize>> {
    let items: Vec<&str> = text.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(CliError::Config(format!("{flag}: list is empty")));
    }
    items
        .into_iter()
        .map(|s| match s.parse::<usize>() {
            Ok(0) => Err(CliError::Config(format!("{flag}: values must be >= 1, got 0"))),
            Ok(v) => Ok(v),
            Err(_) => Err(CliError::Config(format!("{flag}: `{s}` is not a count"))),
        })
        .collect()
}

pub fn cmd_train(common: &Common) -> CliResult<Manifest> {
    let cfg = resolve(common)?;
    prepare_dir(&common.out)?;
    let outcome = run_experiment(&cfg)?;
    let losses: Vec<_> = outcome.losses().copied().collect();
    let mut manifest = Manifest::new("train", &cfg, vec![cfg.seed]);
    emit(&common.out, "losses.csv", &loss_csv(&losses), &mut manifest)?;
    emit(&common.out, "checkpoint.json", &outcome.model.checkpoint().to_json(), &mut manifest)?;
    manifest.eval = Some(outcome.eval);
    manifest.losses = Some(losses);
    manifest.write(&common.out)?;
    Ok(manifest)
}

/// Runs every `(keys, config)` job for each seed, in parallel, and returns
/// rows in job-then-seed order.
fn run_sweep(jobs: &[(Vec<(&'static str, String)>, TrainConfig)], seeds: &[u64]) -> CliResult<Vec<SweepRow>> {
    for (_, cfg) in jobs {
        cfg.validate()?;
    }
    let tasks: Vec<(usize, u64)> = (0..jobs.len()).flat_map(|j| seeds.iter().map(move |&s| (j, s))).collect();
    let results: Vec<CliResult<SweepRow>> = tasks
        .par_iter()
        .map(|&(j, seed)| {
            let (keys, base) = &jobs[j];
            let cfg = TrainConfig { seed, ..base.clone() };
            let outcome = run_experiment(&cfg)?;
            log::info!("{keys:?} seed {seed}: accuracy {:.4}", outcome.eval.query_accuracy);
            Ok(SweepRow {
                keys: keys.clone(),
                seed,
                eval: outcome.eval,
            })
        })
        .collect();
    results.into_iter().collect()
}

fn finish_sweep(
    common: &Common,
    command: &str,
    cfg: &TrainConfig,
    seeds: Vec<u64>,
    file: &str,
    rows: &[SweepRow],
) -> CliResult<Manifest> {
    let mut manifest = Manifest::new(command, cfg, seeds);
    emit(&common.out, file, &sweep_csv(rows), &mut manifest)?;
    manifest.write(&common.out)?;
    Ok(manifest)
}

pub fn ablation_variants(cfg: &TrainConfig, axis: Axis) -> Vec<(Vec<(&'static str, String)>, TrainConfig)> {
    let variant = |name: &str, f: &dyn Fn(&mut TrainConfig)| {
        let mut c = cfg.clone();
        f(&mut c);
        (vec![("variant", name.to_string())], c)
    };
    match axis {
        Axis::Drl => vec![
            variant("drl_off", &|c| c.relevance.use_drl = false),
            variant("drl_on", &|c| c.relevance.use_drl = true),
        ],
        Axis::Meta => vec![
            variant("meta_off", &|c| c.train.use_meta = false),
            variant("meta_on", &|c| c.train.use_meta = true),
        ],
        Axis::Structure => ["normal", "residual"]
            .iter()
            .map(|s| variant(s, &|c| c.relevance.structure = s.to_string()))
            .collect(),
        Axis::Metric => ["pearson", "cosine", "euclidean", "gaussian", "learned"]
            .iter()
            .map(|m| variant(m, &|c| c.relevance.metric = m.to_string()))
            .collect(),
    }
}

pub fn cmd_ablate(common: &Common, axis: Axis) -> CliResult<Manifest> {
    let cfg = resolve(common)?;
    let seeds = seed_list(&cfg, common.seeds)?;
    prepare_dir(&common.out)?;
    let rows = run_sweep(&ablation_variants(&cfg, axis), &seeds)?;
    let file = format!("ablate_{}.csv", axis.as_str());
    finish_sweep(common, &format!("ablate {}", axis.as_str()), &cfg, seeds, &file, &rows)
}

pub fn cmd_depth_sweep(common: &Common, depths: &str) -> CliResult<Manifest> {
    let cfg = resolve(common)?;
    let requested = parse_counts("--depths", depths)?;
    let mut seen = BTreeSet::new();
    let mut unique = Vec::new();
    for d in requested {
        if seen.insert(d) {
            unique.push(d);
        } else {
            log::warn!("depth {d} listed more than once; running it once");
        }
    }
    let seeds = seed_list(&cfg, common.seeds)?;
    prepare_dir(&common.out)?;
    let jobs: Vec<_> = unique
        .iter()
        .map(|&d| {
            let mut c = cfg.clone();
            c.relevance.depth = d;
            (vec![("depth", d.to_string())], c)
        })
        .collect();
    let rows = run_sweep(&jobs, &seeds)?;
    finish_sweep(common, "depth-sweep", &cfg, seeds, "depth_sweep.csv", &rows)
}

pub fn cmd_group_compare(common: &Common, shot_list: &str, iterations: usize) -> CliResult<Manifest> {
    let cfg = resolve(common)?;
    let shots = parse_counts("--shot-list", shot_list)?;
    if iterations == 0 {
        return Err(CliError::Config("--iterations must be >= 1".into()));
    }
    let seeds = seed_list(&cfg, common.seeds)?;
    prepare_dir(&common.out)?;
    let mut jobs = Vec::new();
    for &k in &shots {
        for method in ["gcn", "group_loss"] {
            let mut c = cfg.clone();
            c.train.shots = k;
            c.data.novel_shots = None;
            c.relevance.use_drl = true;
            if method == "group_loss" {
                c.relevance.structure = "group_loss".into();
                c.relevance.group_iterations = iterations;
            }
            jobs.push((vec![("shots", k.to_string()), ("method", method.to_string())], c));
        }
    }
    let rows = run_sweep(&jobs, &seeds)?;
    finish_sweep(common, "group-compare", &cfg, seeds, "group_compare.csv", &rows)
}

pub fn cmd_gradcheck(out: &Path) -> CliResult<bool> {
    let cases = gradient_suite()?;
    prepare_dir(out)?;
    let mut ok = true;
    for case in &cases {
        let err = case.report.max_rel_error();
        let status = if case.passed() { "ok" } else { "FAIL" };
        ok &= case.passed();
        println!(
            "{status:4} structure={:<8} depth={} metric={:<8} max_rel_error={err:.3e} (tolerance {SUITE_TOLERANCE:e})",
            case.structure, case.depth, case.metric
        );
    }
    std::fs::write(out.join("gradcheck.json"), serde_json::to_string_pretty(&cases).expect("report serializes"))?;
    if ok {
        Ok(true)
    } else {
        Err(CliError::Numerical("gradient check exceeded tolerance".into()))
    }
}
