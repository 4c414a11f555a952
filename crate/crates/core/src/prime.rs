//! Privacy-aware evolutionary merging for one target user.
//!
//! Each candidate weight vector is turned into a merged adapter, applied to
//! the base parameters, and scored on the target's history:
//!
//! ```text
//! utility  U   = mean f(generated, reference)
//! privacy  P_s = mean f(generated, sharer s's generation)
//! fitness  r   = U - alpha * mean_s P_s
//! ```

use std::sync::Arc;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{
    apply_delta, merge_adapters, AdapterSet, BaseParams, EffectiveParams, Granularity, LowRankDelta,
    MergeWeights, MergedDelta,
};
use crate::error::{Error, Result};
use crate::evolver::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::metrics::UtilityMetric;
use crate::model::{Example, TaskModel, Token};
use crate::profile::{select_top_k, UserRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrimeConfig {
    /// Privacy coefficient.
    pub alpha: f64,
    pub top_k: usize,
    /// Number of optimizer generations.
    pub budget: usize,
    pub data_fraction: f64,
    pub granularity: Granularity,
    pub metric: UtilityMetric,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub sigma0: f64,
    /// Maximum generated length per query.
    pub max_len: usize,
}

impl Default for PrimeConfig {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            top_k: 3,
            budget: 30,
            data_fraction: 1.0,
            granularity: Granularity::Module,
            metric: UtilityMetric::default(),
            seed: 0,
            optimizer: OptimizerKind::CmaEs,
            sigma0: 0.3,
            max_len: 8,
        }
    }
}

impl PrimeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "data_fraction must lie in (0, 1], got {}",
                self.data_fraction
            )));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        if self.sigma0.is_nan() || self.sigma0 <= 0.0 {
            return Err(Error::Config("sigma0 must be positive".into()));
        }
        Ok(())
    }
}

/// Score of one evaluated candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct FitnessReport {
    pub generation: usize,
    pub candidate_index: usize,
    pub weights: MergeWeights,
    pub utility: f64,
    /// Empty when privacy was not evaluated (alpha = 0).
    pub privacy_per_sharer: Vec<(String, f64)>,
    pub fitness: f64,
}

impl FitnessReport {
    pub fn mean_privacy(&self) -> Option<f64> {
        mean_privacy(&self.privacy_per_sharer)
    }
}

fn mean_privacy(privacy: &[(String, f64)]) -> Option<f64> {
    if privacy.is_empty() {
        None
    } else {
        Some(privacy.iter().map(|(_, p)| p).sum::<f64>() / privacy.len() as f64)
    }
}

/// Seeded sample of `⌈fraction · |history|⌉` items, kept in original order.
pub fn sample_history_indices(len: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::data("cannot sample from an empty history"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    if fraction == 1.0 {
        return Ok((0..len).collect());
    }
    // guard against 0.6 * 10 = 6.000000000000001
    let n = ((fraction * len as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, len, n.min(len)).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

pub fn sample_history(history: &[Example], fraction: f64, seed: u64) -> Result<Vec<Example>> {
    Ok(sample_history_indices(history.len(), fraction, seed)?
        .into_iter()
        .map(|i| history[i].clone())
        .collect())
}

pub fn generate_all(model: &TaskModel, params: &EffectiveParams, examples: &[Example], max_len: usize) -> Result<Vec<Vec<Token>>> {
    examples
        .iter()
        .map(|ex| model.generate(params, &ex.input, max_len))
        .collect()
}

fn references(examples: &[Example]) -> Vec<Vec<Token>> {
    examples.iter().map(|e| e.reference.clone()).collect()
}

/// Mean utility of the model's generations against the references.
pub fn utility_score(
    model: &TaskModel,
    params: &EffectiveParams,
    eval_set: &[Example],
    metric: UtilityMetric,
    max_len: usize,
) -> Result<f64> {
    if eval_set.is_empty() {
        return Err(Error::data("empty evaluation set"));
    }
    let preds = generate_all(model, params, eval_set, max_len)?;
    metric.score(&preds, &references(eval_set))
}

/// Per-sharer similarity between precomputed generations. The sharer's
/// generation plays the reference role.
pub fn privacy_from_generations(
    merged: &[Vec<Token>],
    sharers: &[(String, Vec<Vec<Token>>)],
    metric: UtilityMetric,
) -> Result<Vec<(String, f64)>> {
    if sharers.is_empty() {
        return Err(Error::data("no sharer generations"));
    }
    sharers
        .iter()
        .map(|(id, gens)| Ok((id.clone(), metric.similarity(merged, gens)?)))
        .collect()
}

/// Similarity of the merged model's generations to each sharer model's
/// generations over `history`.
pub fn privacy_score(
    model: &TaskModel,
    merged: &EffectiveParams,
    sharer_models: &[(String, EffectiveParams)],
    history: &[Example],
    metric: UtilityMetric,
    max_len: usize,
) -> Result<Vec<(String, f64)>> {
    if history.is_empty() {
        return Err(Error::data("empty history"));
    }
    if sharer_models.is_empty() {
        return Err(Error::data("no sharer models"));
    }
    let preds = generate_all(model, merged, history, max_len)?;
    let sharer_gens = sharer_models
        .iter()
        .map(|(id, p)| Ok((id.clone(), generate_all(model, p, history, max_len)?)))
        .collect::<Result<Vec<_>>>()?;
    privacy_from_generations(&preds, &sharer_gens, metric)
}

/// `utility - alpha * mean(privacy)`.
pub fn fitness(utility: f64, privacy: &[(String, f64)], alpha: f64) -> Result<f64> {
    if alpha == 0.0 {
        return Ok(utility);
    }
    let mean = mean_privacy(privacy)
        .ok_or_else(|| Error::Usage("privacy scores are required when alpha > 0".into()))?;
    Ok(utility - alpha * mean)
}

/// A pool member offering an adapter.
#[derive(Debug, Clone)]
pub struct Sharer {
    pub user: UserRecord,
    pub adapter: Arc<LowRankDelta>,
}

#[derive(Debug, Clone)]
pub struct Personalized {
    /// Selected sharers, most similar first.
    pub selected: Vec<String>,
    pub weights: MergeWeights,
    pub adapter: MergedDelta,
    pub trace: Vec<FitnessReport>,
    /// Indices into the target's history used for optimization.
    pub optimization_indices: Vec<usize>,
    pub generations: usize,
    pub evaluations: usize,
    pub warnings: Vec<String>,
}

impl Personalized {
    /// Trace entry for the returned weights, if any candidate was evaluated.
    pub fn best_report(&self) -> Option<&FitnessReport> {
        self.trace
            .iter()
            .fold(None, |best: Option<&FitnessReport>, r| match best {
                Some(b) if b.fitness >= r.fitness => Some(b),
                _ => Some(r),
            })
    }
}

/// Everything a candidate evaluation needs, borrowed immutably.
pub struct Evaluator<'a> {
    pub model: TaskModel,
    pub base: &'a BaseParams,
    pub adapters: &'a AdapterSet,
    pub sharer_ids: &'a [String],
    pub examples: &'a [Example],
    pub sharer_generations: &'a [(String, Vec<Vec<Token>>)],
    pub config: &'a PrimeConfig,
}

impl Evaluator<'_> {
    fn n_sites(&self) -> usize {
        self.base.sites().len()
    }

    pub fn weights(&self, flat: &[f64]) -> Result<MergeWeights> {
        MergeWeights::from_flat(self.sharer_ids, flat, self.config.granularity, self.n_sites())
    }

    pub fn evaluate(&self, flat: &[f64], generation: usize, candidate_index: usize) -> Result<FitnessReport> {
        let weights = self.weights(flat)?;
        let merged = merge_adapters(&weights, self.adapters)?;
        let params = apply_delta(self.base, &merged)?;
        let preds = generate_all(&self.model, &params, self.examples, self.config.max_len)?;
        let utility = self.config.metric.score(&preds, &references(self.examples))?;
        let privacy_per_sharer = if self.config.alpha > 0.0 {
            privacy_from_generations(&preds, self.sharer_generations, self.config.metric)?
        } else {
            Vec::new()
        };
        let fitness = fitness(utility, &privacy_per_sharer, self.config.alpha)?;
        Ok(FitnessReport {
            generation,
            candidate_index,
            weights,
            utility,
            privacy_per_sharer,
            fitness,
        })
    }
}

/// Builds a merged adapter for `target` from the most similar sharers.
pub fn personalize(
    model: &TaskModel,
    target: &UserRecord,
    pool: &[Sharer],
    base: &BaseParams,
    config: &PrimeConfig,
) -> Result<Personalized> {
    config.validate()?;
    if target.history.is_empty() {
        return Err(Error::data(format!("target `{}` has an empty history", target.user_id)));
    }
    if pool.is_empty() {
        return Err(Error::data("empty sharer pool"));
    }
    let base_layout = base.layout();
    if let Some(bad) = pool.iter().find(|s| s.adapter.layout() != base_layout) {
        return Err(Error::layout(format!(
            "adapter of `{}` does not match the base parameter layout",
            bad.user.user_id
        )));
    }

    let mut warnings = Vec::new();
    let k = if config.top_k > pool.len() {
        let msg = format!("top_k {} clamped to pool size {}", config.top_k, pool.len());
        log::warn!("{msg}");
        warnings.push(msg);
        pool.len()
    } else {
        config.top_k
    };

    let users: Vec<UserRecord> = pool.iter().map(|s| s.user.clone()).collect();
    let selected: Vec<String> = select_top_k(target, &users, k)?
        .into_iter()
        .map(|u| u.user_id.clone())
        .collect();
    let adapters: AdapterSet = pool
        .iter()
        .filter(|s| selected.contains(&s.user.user_id))
        .map(|s| (s.user.user_id.clone(), Arc::clone(&s.adapter)))
        .collect();

    let optimization_indices =
        sample_history_indices(target.history.len(), config.data_fraction, config.seed)?;
    let examples: Vec<Example> = optimization_indices
        .iter()
        .map(|&i| target.history[i].clone())
        .collect();

    let sharer_generations = if config.alpha > 0.0 {
        selected
            .iter()
            .map(|id| {
                let params = apply_delta(base, adapters[id].as_ref())?;
                Ok((id.clone(), generate_all(model, &params, &examples, config.max_len)?))
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    let evaluator = Evaluator {
        model: *model,
        base,
        adapters: &adapters,
        sharer_ids: &selected,
        examples: &examples,
        sharer_generations: &sharer_generations,
        config,
    };

    let dim = MergeWeights::dimension(k, config.granularity, base.sites().len());
    let initial = vec![1.0 / k as f64; dim];
    let opt_config = OptimizerConfig {
        kind: config.optimizer,
        sigma0: config.sigma0,
        seed: config.seed,
        evaluate_initial: true,
        ..OptimizerConfig::default()
    };
    let mut optimizer = Optimizer::new(opt_config, &initial)?;

    let mut trace = Vec::new();
    for generation in 0..config.budget {
        let candidates = optimizer.ask();
        let reports = candidates
            .par_iter()
            .enumerate()
            .map(|(i, x)| evaluator.evaluate(x, generation, i))
            .collect::<Result<Vec<_>>>()?;
        let fitnesses: Vec<f64> = reports.iter().map(|r| r.fitness).collect();
        optimizer.tell(&candidates, &fitnesses)?;
        trace.extend(reports);
    }

    let flat = if config.budget == 0 {
        initial
    } else {
        optimizer.recommend()?.to_vec()
    };
    let weights = evaluator.weights(&flat)?;
    let adapter = merge_adapters(&weights, &adapters)?;
    Ok(Personalized {
        selected,
        weights,
        adapter,
        trace,
        optimization_indices,
        generations: optimizer.iteration(),
        evaluations: optimizer.evaluations(),
        warnings,
    })
}
