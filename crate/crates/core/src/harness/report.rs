//! CSV reports and the run manifest.
//!
//! Every CSV is a pure function of the runs, so identical seeds give
//! byte-identical files. The manifest carries the only timestamp.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::error::{Error, Result};

use super::community::Community;
use super::config::ExperimentConfig;
use super::experiment::ExperimentResult;
use super::sweep::TradeoffRow;

pub const RESULTS_CSV: &str = "results.csv";
pub const TRACE_CSV: &str = "trace.csv";
pub const MIA_CSV: &str = "mia.csv";
pub const MIA_SCORES_CSV: &str = "mia_scores.csv";
pub const TRADEOFF_CSV: &str = "tradeoff.csv";
pub const MANIFEST: &str = "manifest.toml";

/// (alpha, seed, result) as produced by a sweep or a single run.
pub type Run = (f64, u64, ExperimentResult);

fn join(xs: impl IntoIterator<Item = impl ToString>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::Writer::from_path(path)?)
}

pub fn write_results(path: &Path, runs: &[Run]) -> Result<()> {
    let Some((_, _, first)) = runs.first() else {
        return Err(Error::data("no runs to report"));
    };
    let metric_names: Vec<String> = first
        .config
        .metric
        .components()
        .iter()
        .map(|m| format!("test_{}", m.name()))
        .collect();
    let mut w = writer(path)?;
    let mut header: Vec<String> = [
        "alpha", "seed", "target_user", "run_seed", "selected", "weights", "generations",
        "evaluations", "opt_utility", "opt_mean_privacy", "opt_fitness",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(metric_names);
    header.extend(["test_utility".to_string(), "mia_auc".to_string()]);
    w.write_record(&header)?;
    for (alpha, seed, result) in runs {
        for u in &result.users {
            let p = &u.personalized;
            let mut row = vec![
                alpha.to_string(),
                seed.to_string(),
                u.user_id.clone(),
                u.seed.to_string(),
                p.selected.join(";"),
                join(p.weights.to_flat()),
                p.generations.to_string(),
                p.evaluations.to_string(),
                u.final_utility.to_string(),
                u.mean_final_privacy().to_string(),
                u.final_fitness.to_string(),
            ];
            row.extend(u.test_metrics.iter().map(|(_, v)| v.to_string()));
            row.push(u.test_utility.to_string());
            row.push(u.mia.auc.to_string());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One row per evaluated candidate. `mean_privacy` is blank when privacy
/// was not evaluated.
pub fn write_trace(path: &Path, runs: &[Run]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "generation", "candidate_index", "utility", "mean_privacy", "fitness", "alpha", "seed",
        "target_user",
    ])?;
    for (alpha, seed, result) in runs {
        for u in &result.users {
            for r in &u.personalized.trace {
                w.write_record([
                    r.generation.to_string(),
                    r.candidate_index.to_string(),
                    r.utility.to_string(),
                    r.mean_privacy().map(|p| p.to_string()).unwrap_or_default(),
                    r.fitness.to_string(),
                    alpha.to_string(),
                    seed.to_string(),
                    u.user_id.clone(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_mia(path: &Path, runs: &[Run]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["target_user", "alpha", "n_members", "n_nonmembers", "auc", "seed"])?;
    for (alpha, seed, result) in runs {
        for u in &result.users {
            w.write_record([
                u.user_id.clone(),
                alpha.to_string(),
                u.mia.n_members().to_string(),
                u.mia.n_nonmembers().to_string(),
                u.mia.auc.to_string(),
                seed.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Raw membership scores, enough to recompute every AUC.
pub fn write_mia_scores(path: &Path, runs: &[Run]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["target_user", "alpha", "seed", "side", "score"])?;
    for (alpha, seed, result) in runs {
        for u in &result.users {
            for (side, scores) in [("member", &u.mia.member_scores), ("nonmember", &u.mia.nonmember_scores)] {
                for s in scores {
                    w.write_record([
                        u.user_id.clone(),
                        alpha.to_string(),
                        seed.to_string(),
                        side.to_string(),
                        s.to_string(),
                    ])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_tradeoff(path: &Path, rows: &[TradeoffRow]) -> Result<()> {
    let Some(first) = rows.first() else {
        return Err(Error::data("no tradeoff rows"));
    };
    let mut w = writer(path)?;
    let mut header = vec!["alpha".to_string(), "n_seeds".to_string()];
    for (name, _) in &first.metrics {
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_se"));
    }
    for name in ["utility", "privacy", "auc"] {
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_se"));
    }
    w.write_record(&header)?;
    for r in rows {
        let mut row = vec![r.alpha.to_string(), r.n_seeds.to_string()];
        for a in r.metrics.iter().map(|(_, a)| a).chain([&r.utility, &r.privacy, &r.auc]) {
            row.push(a.mean.to_string());
            row.push(a.se.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct ManifestRun {
    alpha: f64,
    seed: u64,
    target_user: String,
    /// Hex, since derived seeds can exceed TOML's signed integer range.
    run_seed: String,
    selected: Vec<String>,
    weights: Vec<f64>,
    optimization_indices: Vec<usize>,
    test_items: usize,
    /// Optimization items that also appear among the test items.
    split_overlap: usize,
    warnings: Vec<String>,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    created_unix: u64,
    outputs: Vec<&'a str>,
    config: &'a ExperimentConfig,
    runs: Vec<ManifestRun>,
}

pub fn write_manifest(
    path: &Path,
    command: &str,
    config: &ExperimentConfig,
    community: &Community,
    runs: &[Run],
    outputs: &[&str],
) -> Result<()> {
    let mut entries = Vec::new();
    for (alpha, seed, result) in runs {
        for u in &result.users {
            let user = community.user(&u.user_id)?;
            entries.push(ManifestRun {
                alpha: *alpha,
                seed: *seed,
                target_user: u.user_id.clone(),
                run_seed: format!("{:#018x}", u.seed),
                selected: u.personalized.selected.clone(),
                weights: u.personalized.weights.to_flat(),
                optimization_indices: u.personalized.optimization_indices.clone(),
                test_items: user.test.len(),
                split_overlap: u.split_overlap(user),
                warnings: u.personalized.warnings.clone(),
            });
        }
    }
    let manifest = Manifest {
        command,
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        outputs: outputs.to_vec(),
        config,
        runs: entries,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::File::create(path)?.write_all(text.as_bytes())?;
    Ok(())
}

/// Writes results, trace, mia and (when given) tradeoff CSVs plus the
/// manifest into `dir`.
pub fn write_all(
    dir: &Path,
    command: &str,
    config: &ExperimentConfig,
    community: &Community,
    runs: &[Run],
    rows: Option<&[TradeoffRow]>,
    dump_scores: bool,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut outputs = vec![RESULTS_CSV, TRACE_CSV, MIA_CSV];
    write_results(&dir.join(RESULTS_CSV), runs)?;
    write_trace(&dir.join(TRACE_CSV), runs)?;
    write_mia(&dir.join(MIA_CSV), runs)?;
    if dump_scores {
        write_mia_scores(&dir.join(MIA_SCORES_CSV), runs)?;
        outputs.push(MIA_SCORES_CSV);
    }
    if let Some(rows) = rows {
        write_tradeoff(&dir.join(TRADEOFF_CSV), rows)?;
        outputs.push(TRADEOFF_CSV);
    }
    write_manifest(&dir.join(MANIFEST), command, config, community, runs, &outputs)
}
