//! WebAssembly bindings for the browser playground in `www/`.
//!
//! The playground owns one small synthetic community with a trained sharer
//! pool. Every exported call returns a JSON string; the page draws it.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use evomerge::adapter::apply_delta;
use evomerge::evolver::{Optimizer, OptimizerConfig, OptimizerKind};
use evomerge::harness::{
    base_test_scores, run_for_user, sweep_alpha, train_pool, Community, CommunityConfig, PoolConfig,
    Role, SweepConfig, TrainedPool,
};
use evomerge::model::TrainConfig;
use evomerge::prime::{FitnessReport, PrimeConfig};
use evomerge::Result;

#[derive(Debug, Serialize)]
pub struct GenerationSummary {
    pub generation: usize,
    pub best_fitness: f64,
    pub best_utility: f64,
    pub best_privacy: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct Sample {
    pub input: String,
    pub reference: String,
    pub base: String,
    pub personalized: String,
}

#[derive(Debug, Serialize)]
pub struct Preview {
    pub target: String,
    pub selected: Vec<String>,
    pub weights: Vec<f64>,
    pub generations: Vec<GenerationSummary>,
    pub evaluations: usize,
    pub test_utility: f64,
    pub base_test_utility: f64,
    pub privacy: f64,
    pub auc: f64,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Serialize)]
pub struct CurvePoint {
    pub alpha: f64,
    pub utility: f64,
    pub utility_se: f64,
    pub privacy: f64,
    pub privacy_se: f64,
    pub auc: f64,
    pub auc_se: f64,
}

#[derive(Debug, Serialize)]
pub struct OptimizerTrace {
    pub optimizer: String,
    /// (evaluations so far, best fitness so far) after each generation.
    pub points: Vec<(usize, f64)>,
}

fn demo_community(seed: u64, style_strength: f64) -> CommunityConfig {
    CommunityConfig {
        n_clusters_latent: 4,
        users_per_cluster: 6,
        test_users_per_cluster: 1,
        history_len: 24,
        test_items: 8,
        style_strength,
        seed,
        ..CommunityConfig::default()
    }
}

pub struct Inner {
    community: Community,
    pool: TrainedPool,
}

impl Inner {
    pub fn new(seed: u64, style_strength: f64) -> Result<Self> {
        let community = Community::generate(&demo_community(seed, style_strength))?;
        let pool = train_pool(
            &community,
            &PoolConfig { n_clusters: 8, seed: 0 },
            &TrainConfig { steps: 100, ..TrainConfig::default() },
        )?;
        Ok(Self { community, pool })
    }

    pub fn targets(&self) -> Vec<String> {
        self.community.with_role(Role::Test).map(|u| u.id().to_string()).collect()
    }

    pub fn pool(&self) -> Vec<String> {
        self.pool.ids()
    }

    pub fn personalize(&self, target: &str, alpha: f64, top_k: usize, budget: usize, seed: u64) -> Result<Preview> {
        let config = PrimeConfig { alpha, top_k, budget, seed, ..PrimeConfig::default() };
        let r = run_for_user(&self.community, &self.pool, &config, target)?;
        let trace = &r.personalized.trace;
        let mut generations = Vec::new();
        let mut best: Option<&FitnessReport> = None;
        for (i, rep) in trace.iter().enumerate() {
            if best.is_none_or(|b| rep.fitness > b.fitness) {
                best = Some(rep);
            }
            let closes_generation = trace.get(i + 1).is_none_or(|n| n.generation != rep.generation);
            if let (true, Some(b)) = (closes_generation, best) {
                generations.push(GenerationSummary {
                    generation: rep.generation,
                    best_fitness: b.fitness,
                    best_utility: b.utility,
                    best_privacy: b.mean_privacy(),
                });
            }
        }

        let model = self.community.model();
        let user = self.community.user(target)?;
        let params = apply_delta(&self.community.base, &r.personalized.adapter)?;
        let vocab = &self.community.vocab;
        let samples = user
            .test
            .iter()
            .take(4)
            .map(|ex| {
                Ok(Sample {
                    input: vocab.decode(&ex.input)?,
                    reference: vocab.decode(&ex.reference)?,
                    base: vocab.decode(&model.generate(&self.community.base, &ex.input, config.max_len)?)?,
                    personalized: vocab.decode(&model.generate(&params, &ex.input, config.max_len)?)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let base_test_utility = base_test_scores(&self.community, &config)?
            .into_iter()
            .find(|(id, _)| id == target)
            .map(|(_, u)| u)
            .unwrap_or(f64::NAN);

        Ok(Preview {
            target: target.to_string(),
            selected: r.personalized.selected.clone(),
            weights: r.personalized.weights.to_flat(),
            evaluations: r.personalized.evaluations,
            generations,
            test_utility: r.test_utility,
            base_test_utility,
            privacy: r.mean_final_privacy(),
            auc: r.mia.auc,
            samples,
        })
    }

    pub fn sweep(&self, alphas: &[f64], n_seeds: u64, budget: usize) -> Result<Vec<CurvePoint>> {
        let config = PrimeConfig { budget, ..PrimeConfig::default() };
        let sweep = SweepConfig { alphas: alphas.to_vec(), seeds: (0..n_seeds).collect() };
        Ok(sweep_alpha(&self.community, &self.pool, &config, &sweep)?
            .rows
            .into_iter()
            .map(|r| CurvePoint {
                alpha: r.alpha,
                utility: r.utility.mean,
                utility_se: r.utility.se,
                privacy: r.privacy.mean,
                privacy_se: r.privacy.se,
                auc: r.auc.mean,
                auc_se: r.auc.se,
            })
            .collect())
    }
}

/// Best-so-far curves of every optimizer on the sphere `-|x|^2` from `(1, ..., 1)`.
pub fn sphere_traces(dim: usize, sigma0: f64, seed: u64, evaluations: usize) -> Result<Vec<OptimizerTrace>> {
    [OptimizerKind::CmaEs, OptimizerKind::OnePlusOneEs, OptimizerKind::RandomSearch]
        .into_iter()
        .map(|kind| {
            let cfg = OptimizerConfig { kind, sigma0, seed, ..OptimizerConfig::default() };
            let mut opt = Optimizer::new(cfg, &vec![1.0; dim.max(1)])?;
            let mut points = Vec::new();
            while opt.evaluations() < evaluations {
                let xs = opt.ask();
                let fs: Vec<f64> = xs.iter().map(|x| -x.iter().map(|v| v * v).sum::<f64>()).collect();
                opt.tell(&xs, &fs)?;
                points.push((opt.evaluations(), opt.best_fitness().unwrap_or(f64::NEG_INFINITY)));
            }
            Ok(OptimizerTrace { optimizer: kind.name().to_string(), points })
        })
        .collect()
}

fn js<T: Serialize>(r: Result<T>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub struct Playground {
    inner: Inner,
}

#[wasm_bindgen]
impl Playground {
    /// Generates a community and trains its sharer pool.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, style_strength: f64) -> Result<Playground, JsError> {
        Inner::new(seed.into(), style_strength)
            .map(|inner| Playground { inner })
            .map_err(|e| JsError::new(&e.to_string()))
    }

    pub fn targets(&self) -> Vec<String> {
        self.inner.targets()
    }

    pub fn pool(&self) -> Vec<String> {
        self.inner.pool()
    }

    pub fn personalize(&self, target: &str, alpha: f64, top_k: u32, budget: u32, seed: u32) -> Result<String, JsError> {
        js(self.inner.personalize(target, alpha, top_k as usize, budget as usize, seed.into()))
    }

    pub fn sweep(&self, alphas: Vec<f64>, n_seeds: u32, budget: u32) -> Result<String, JsError> {
        js(self.inner.sweep(&alphas, n_seeds.into(), budget as usize))
    }
}

#[wasm_bindgen(js_name = sphereTraces)]
pub fn sphere_traces_js(dim: u32, sigma0: f64, seed: u32, evaluations: u32) -> Result<String, JsError> {
    js(sphere_traces(dim as usize, sigma0, seed.into(), evaluations as usize))
}
