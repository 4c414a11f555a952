//! One personalization run per test user, scored on held-out items and
//! audited with the membership attack.

use rayon::prelude::*;

use crate::adapter::apply_delta;
use crate::error::{Error, Result};
use crate::metrics::MetricKind;
use crate::mia::{run_mia, MiaDataset, MiaResult};
use crate::prime::{
    fitness, generate_all, personalize, privacy_score, Personalized, PrimeConfig,
};

use super::community::{Community, CommunityUser, Role};
use super::derive_seed;
use super::pool::TrainedPool;

#[derive(Debug, Clone)]
pub struct UserResult {
    pub user_id: String,
    pub seed: u64,
    pub personalized: Personalized,
    /// Each component of the utility metric on the held-out test items.
    pub test_metrics: Vec<(MetricKind, f64)>,
    pub test_utility: f64,
    /// Utility on the optimization items at the returned weights.
    pub final_utility: f64,
    /// Per-sharer privacy term at the returned weights, computed for every
    /// alpha including zero.
    pub final_privacy: Vec<(String, f64)>,
    pub final_fitness: f64,
    pub mia: MiaResult,
}

impl UserResult {
    pub fn mean_final_privacy(&self) -> f64 {
        self.final_privacy.iter().map(|(_, p)| p).sum::<f64>() / self.final_privacy.len() as f64
    }

    /// Number of optimization items that also occur among the test items.
    pub fn split_overlap(&self, user: &CommunityUser) -> usize {
        self.personalized
            .optimization_indices
            .iter()
            .filter(|&&i| user.test.contains(&user.record.history[i]))
            .count()
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: PrimeConfig,
    pub users: Vec<UserResult>,
}

impl ExperimentResult {
    fn mean(&self, f: impl Fn(&UserResult) -> f64) -> f64 {
        self.users.iter().map(f).sum::<f64>() / self.users.len() as f64
    }

    pub fn mean_test_utility(&self) -> f64 {
        self.mean(|u| u.test_utility)
    }

    pub fn mean_test_metric(&self, i: usize) -> f64 {
        self.mean(|u| u.test_metrics[i].1)
    }

    pub fn mean_final_privacy(&self) -> f64 {
        self.mean(UserResult::mean_final_privacy)
    }

    pub fn mean_auc(&self) -> f64 {
        self.mean(|u| u.mia.auc)
    }
}

fn test_scores(
    community: &Community,
    params: &crate::adapter::EffectiveParams,
    user: &CommunityUser,
    config: &PrimeConfig,
) -> Result<(Vec<(MetricKind, f64)>, f64)> {
    let model = community.model();
    let preds = generate_all(&model, params, &user.test, config.max_len)?;
    let refs: Vec<_> = user.test.iter().map(|e| e.reference.clone()).collect();
    let parts = config
        .metric
        .components()
        .into_iter()
        .map(|m| Ok((m, m.evaluate(&preds, &refs)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((parts, config.metric.score(&preds, &refs)?))
}

/// Held-out scores of the unadapted base model for every test user.
pub fn base_test_scores(community: &Community, config: &PrimeConfig) -> Result<Vec<(String, f64)>> {
    community
        .with_role(Role::Test)
        .map(|u| Ok((u.id().to_string(), test_scores(community, &community.base, u, config)?.1)))
        .collect()
}

/// Personalizes one test user. The run seed is derived from `config.seed`
/// and the user's position in the community.
pub fn run_for_user(community: &Community, pool: &TrainedPool, config: &PrimeConfig, user_id: &str) -> Result<UserResult> {
    if pool.is_empty() {
        return Err(Error::Usage("the sharer pool has not been trained".into()));
    }
    let idx = community
        .users
        .iter()
        .position(|u| u.id() == user_id)
        .ok_or_else(|| Error::Data(format!("unknown user `{user_id}`")))?;
    let user = &community.users[idx];
    if pool.sharers.iter().any(|s| s.user.user_id == user_id) {
        return Err(Error::Usage(format!("`{user_id}` is in the sharer pool")));
    }
    let model = community.model();
    let seed = derive_seed(config.seed, idx as u64);
    let run_config = PrimeConfig {
        seed,
        ..config.clone()
    };
    let personalized = personalize(&model, &user.record, &pool.sharers, &community.base, &run_config)?;
    let params = apply_delta(&community.base, &personalized.adapter)?;
    let (test_metrics, test_utility) = test_scores(community, &params, user, config)?;

    let opt_items: Vec<_> = personalized
        .optimization_indices
        .iter()
        .map(|&i| user.record.history[i].clone())
        .collect();
    let sharer_models = pool
        .sharers
        .iter()
        .filter(|s| personalized.selected.contains(&s.user.user_id))
        .map(|s| Ok((s.user.user_id.clone(), apply_delta(&community.base, s.adapter.as_ref())?)))
        .collect::<Result<Vec<_>>>()?;
    let final_privacy = privacy_score(&model, &params, &sharer_models, &opt_items, config.metric, config.max_len)?;
    let final_utility = crate::prime::utility_score(&model, &params, &opt_items, config.metric, config.max_len)?;
    let final_fitness = fitness(final_utility, &final_privacy, config.alpha)?;

    let dataset = MiaDataset::from_pool(
        pool.sharers
            .iter()
            .map(|s| (s.user.user_id.as_str(), s.user.history.as_slice())),
        &personalized.selected,
    )?;
    let mia = run_mia(&model, &params, &dataset)?;

    Ok(UserResult {
        user_id: user_id.to_string(),
        seed,
        personalized,
        test_metrics,
        test_utility,
        final_utility,
        final_privacy,
        final_fitness,
        mia,
    })
}

/// Runs every test user of the community under `config`.
pub fn run_experiment(community: &Community, pool: &TrainedPool, config: &PrimeConfig) -> Result<ExperimentResult> {
    let ids: Vec<&str> = community.with_role(Role::Test).map(CommunityUser::id).collect();
    if ids.is_empty() {
        return Err(Error::data("community has no test users"));
    }
    let users = ids
        .par_iter()
        .map(|id| run_for_user(community, pool, config, id))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentResult {
        config: config.clone(),
        users,
    })
}
