//! Alpha sweeps over several run seeds.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::prime::PrimeConfig;

use super::community::Community;
use super::config::SweepConfig;
use super::experiment::{run_experiment, ExperimentResult};
use super::pool::TrainedPool;

/// Mean and standard error across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregate {
    pub mean: f64,
    pub se: f64,
}

impl Aggregate {
    /// Standard error uses the sample standard deviation; a single value
    /// has zero error.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        if values.len() < 2 {
            return Self { mean, se: 0.0 };
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self {
            mean,
            se: (var / n).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffRow {
    pub alpha: f64,
    pub n_seeds: usize,
    /// Held-out score per utility component, by metric name.
    pub metrics: Vec<(String, Aggregate)>,
    pub utility: Aggregate,
    /// Privacy term at the returned weights.
    pub privacy: Aggregate,
    pub auc: Aggregate,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    /// One entry per (alpha, seed), alpha-major.
    pub runs: Vec<(f64, u64, ExperimentResult)>,
    pub rows: Vec<TradeoffRow>,
}

pub fn aggregate(alpha: f64, runs: &[&ExperimentResult]) -> TradeoffRow {
    let per_seed = |f: &dyn Fn(&ExperimentResult) -> f64| -> Aggregate {
        Aggregate::of(&runs.iter().map(|r| f(r)).collect::<Vec<_>>())
    };
    let names: Vec<String> = runs[0].config.metric.components().iter().map(|m| m.name().to_string()).collect();
    let metrics = names
        .into_iter()
        .enumerate()
        .map(|(i, name)| (name, per_seed(&|r| r.mean_test_metric(i))))
        .collect();
    TradeoffRow {
        alpha,
        n_seeds: runs.len(),
        metrics,
        utility: per_seed(&ExperimentResult::mean_test_utility),
        privacy: per_seed(&ExperimentResult::mean_final_privacy),
        auc: per_seed(&ExperimentResult::mean_auc),
    }
}

/// Runs every (alpha, seed) pair of `sweep` with the other settings from
/// `base_config`, then aggregates per alpha.
pub fn sweep_alpha(
    community: &Community,
    pool: &TrainedPool,
    base_config: &PrimeConfig,
    sweep: &SweepConfig,
) -> Result<SweepResult> {
    sweep.validate()?;
    let jobs: Vec<(f64, u64)> = sweep
        .alphas
        .iter()
        .flat_map(|&a| sweep.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(alpha, seed)| {
            let config = PrimeConfig {
                alpha,
                seed,
                ..base_config.clone()
            };
            Ok((alpha, seed, run_experiment(community, pool, &config)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = sweep
        .alphas
        .iter()
        .map(|&a| {
            let of_alpha: Vec<&ExperimentResult> =
                runs.iter().filter(|(x, _, _)| *x == a).map(|(_, _, r)| r).collect();
            aggregate(a, &of_alpha)
        })
        .collect();
    Ok(SweepResult { runs, rows })
}

#[cfg(test)]
mod tests {
    use super::Aggregate;

    #[test]
    fn aggregate_values() {
        let a = Aggregate::of(&[1.0, 2.0, 3.0]);
        assert_eq!(a.mean, 2.0);
        assert!((a.se - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(Aggregate::of(&[4.0]), Aggregate { mean: 4.0, se: 0.0 });
    }
}
