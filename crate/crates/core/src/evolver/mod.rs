//! Gradient-free optimizers behind an ask/tell interface.
//!
//! All optimizers maximize. The caller asks for a batch of candidates,
//! evaluates them (in any order, possibly in parallel), and tells the
//! fitnesses back in the same order.

mod cma_es;
mod one_plus_one;
mod random_search;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cma_es::{default_population_size, CmaEs, EIGEN_FLOOR};
pub use one_plus_one::{OnePlusOne, FAILURE_FACTOR, SUCCESS_FACTOR};
pub use random_search::RandomSearch;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    CmaEs,
    OnePlusOneEs,
    RandomSearch,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::CmaEs => "cma_es",
            OptimizerKind::OnePlusOneEs => "one_plus_one_es",
            OptimizerKind::RandomSearch => "random_search",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cma_es" | "cmaes" => Ok(OptimizerKind::CmaEs),
            "one_plus_one_es" | "1+1" => Ok(OptimizerKind::OnePlusOneEs),
            "random_search" | "random" => Ok(OptimizerKind::RandomSearch),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub sigma0: f64,
    pub seed: u64,
    /// Sampling box for random search.
    pub lower: f64,
    pub upper: f64,
    /// Make the initial point the very first candidate evaluated.
    pub evaluate_initial: bool,
    pub maximize: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::CmaEs,
            sigma0: 0.3,
            seed: 0,
            lower: -1.0,
            upper: 2.0,
            evaluate_initial: false,
            maximize: true,
        }
    }
}

#[derive(Debug, Clone)]
enum Strategy {
    CmaEs(Box<CmaEs>),
    OnePlusOne(OnePlusOne),
    Random(RandomSearch),
}

/// Best point told so far and its fitness.
#[derive(Debug, Clone, PartialEq)]
pub struct Best {
    pub point: Vec<f64>,
    pub fitness: f64,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    dim: usize,
    strategy: Strategy,
    rng: ChaCha8Rng,
    iteration: usize,
    evaluations: usize,
    best: Option<Best>,
    inject_pending: bool,
    initial: Vec<f64>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, initial: &[f64]) -> Result<Self> {
        if initial.is_empty() {
            return Err(Error::Config("optimizer dimension must be at least 1".into()));
        }
        if !(config.sigma0 > 0.0 && config.sigma0.is_finite()) {
            return Err(Error::Config("sigma0 must be positive and finite".into()));
        }
        let strategy = match config.kind {
            OptimizerKind::CmaEs => Strategy::CmaEs(Box::new(CmaEs::new(initial, config.sigma0))),
            OptimizerKind::OnePlusOneEs => {
                Strategy::OnePlusOne(OnePlusOne::new(initial, config.sigma0))
            }
            OptimizerKind::RandomSearch => {
                if config.lower.partial_cmp(&config.upper) != Some(std::cmp::Ordering::Less) {
                    return Err(Error::Config("random search box is empty".into()));
                }
                Strategy::Random(RandomSearch::new(initial.len(), config.lower, config.upper))
            }
        };
        Ok(Self {
            config,
            dim: initial.len(),
            strategy,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            iteration: 0,
            evaluations: 0,
            best: None,
            inject_pending: config.evaluate_initial,
            initial: initial.to_vec(),
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.config.kind
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    /// Number of completed ask/tell rounds.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    pub fn best(&self) -> Option<&Best> {
        self.best.as_ref()
    }

    pub fn cma(&self) -> Option<&CmaEs> {
        match &self.strategy {
            Strategy::CmaEs(c) => Some(c),
            _ => None,
        }
    }

    pub fn one_plus_one(&self) -> Option<&OnePlusOne> {
        match &self.strategy {
            Strategy::OnePlusOne(o) => Some(o),
            _ => None,
        }
    }

    pub fn cma_mut(&mut self) -> Option<&mut CmaEs> {
        match &mut self.strategy {
            Strategy::CmaEs(c) => Some(c),
            _ => None,
        }
    }

    pub fn ask(&mut self) -> Vec<Vec<f64>> {
        let inject = std::mem::take(&mut self.inject_pending);
        match &mut self.strategy {
            Strategy::CmaEs(c) => {
                let mut batch = c.sample(&mut self.rng);
                if inject {
                    batch[0] = self.initial.clone();
                }
                batch
            }
            Strategy::OnePlusOne(o) if inject => vec![o.incumbent().to_vec()],
            Strategy::OnePlusOne(o) => vec![o.sample(&mut self.rng)],
            Strategy::Random(_) if inject => vec![self.initial.clone()],
            Strategy::Random(r) => vec![r.sample(&mut self.rng)],
        }
    }

    /// Feeds back fitnesses for the batch returned by the last `ask`.
    /// Non-finite fitnesses are logged and ranked below every finite one.
    pub fn tell(&mut self, candidates: &[Vec<f64>], fitnesses: &[f64]) -> Result<()> {
        if candidates.len() != fitnesses.len() {
            return Err(Error::Usage(format!(
                "{} candidates but {} fitnesses",
                candidates.len(),
                fitnesses.len()
            )));
        }
        if let Some(bad) = candidates.iter().find(|c| c.len() != self.dim) {
            return Err(Error::Usage(format!(
                "candidate of dimension {} for a {}-d optimizer",
                bad.len(),
                self.dim
            )));
        }
        let sign = if self.config.maximize { 1.0 } else { -1.0 };
        let oriented: Vec<f64> = fitnesses
            .iter()
            .enumerate()
            .map(|(i, &f)| {
                if f.is_finite() {
                    sign * f
                } else {
                    log::warn!("candidate {i} of generation {} has non-finite fitness {f}; ranking it last", self.iteration);
                    f64::NEG_INFINITY
                }
            })
            .collect();

        match &mut self.strategy {
            Strategy::CmaEs(c) => c.update(candidates, &oriented, self.iteration)?,
            Strategy::OnePlusOne(o) => o.update(candidates, &oriented),
            Strategy::Random(_) => {}
        }

        for (x, &f) in candidates.iter().zip(&oriented) {
            if f.is_finite() && self.best.as_ref().is_none_or(|b| f > b.fitness) {
                self.best = Some(Best {
                    point: x.clone(),
                    fitness: f,
                });
            }
        }
        self.iteration += 1;
        self.evaluations += candidates.len();
        Ok(())
    }

    /// Best candidate actually evaluated, not the search distribution's mean.
    pub fn recommend(&self) -> Result<&[f64]> {
        self.best
            .as_ref()
            .map(|b| b.point.as_slice())
            .ok_or_else(|| Error::Usage("recommend called before any finite fitness was told".into()))
    }

    /// Best fitness in the caller's orientation.
    pub fn best_fitness(&self) -> Option<f64> {
        let sign = if self.config.maximize { 1.0 } else { -1.0 };
        self.best.as_ref().map(|b| sign * b.fitness)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(x: &[f64]) -> f64 {
        -x.iter().map(|v| v * v).sum::<f64>()
    }

    fn run(kind: OptimizerKind, seed: u64, budget: usize) -> Optimizer {
        let cfg = OptimizerConfig {
            kind,
            seed,
            ..OptimizerConfig::default()
        };
        let mut opt = Optimizer::new(cfg, &[1.0; 10]).unwrap();
        while opt.evaluations() < budget {
            let xs = opt.ask();
            let fs: Vec<f64> = xs.iter().map(|x| sphere(x)).collect();
            opt.tell(&xs, &fs).unwrap();
        }
        opt
    }

    #[test]
    fn population_size_for_three_dims() {
        let mut opt = Optimizer::new(OptimizerConfig::default(), &[0.0; 3]).unwrap();
        assert_eq!(opt.ask().len(), 7);
    }

    #[test]
    fn same_seed_same_batches() {
        let a = Optimizer::new(OptimizerConfig::default(), &[0.5; 4]).unwrap().ask();
        let b = Optimizer::new(OptimizerConfig::default(), &[0.5; 4]).unwrap().ask();
        assert_eq!(a, b);
    }

    #[test]
    fn recommend_requires_a_tell() {
        let opt = Optimizer::new(OptimizerConfig::default(), &[0.0; 2]).unwrap();
        assert!(matches!(opt.recommend(), Err(Error::Usage(_))));
    }

    #[test]
    fn recommend_is_generation_argmax() {
        let mut opt = Optimizer::new(OptimizerConfig::default(), &[0.3, -0.2]).unwrap();
        let xs = opt.ask();
        let fs: Vec<f64> = xs.iter().map(|x| sphere(x)).collect();
        opt.tell(&xs, &fs).unwrap();
        let best = (0..xs.len()).max_by(|&i, &j| fs[i].total_cmp(&fs[j])).unwrap();
        assert_eq!(opt.recommend().unwrap(), xs[best].as_slice());
    }

    #[test]
    fn best_so_far_updates_and_is_monotone() {
        let mut opt = Optimizer::new(OptimizerConfig::default(), &[1.0; 3]).unwrap();
        let mut last = f64::NEG_INFINITY;
        for g in 0..20 {
            let xs = opt.ask();
            let mut fs: Vec<f64> = xs.iter().map(|x| sphere(x)).collect();
            if g == 5 {
                fs[2] = 10.0;
            }
            opt.tell(&xs, &fs).unwrap();
            let b = opt.best_fitness().unwrap();
            assert!(b >= last);
            if g == 5 {
                assert_eq!(b, 10.0);
                assert_eq!(opt.recommend().unwrap(), xs[2].as_slice());
            }
            last = b;
        }
    }

    #[test]
    fn non_finite_fitness_is_ranked_last() {
        let mut opt = Optimizer::new(OptimizerConfig::default(), &[1.0; 2]).unwrap();
        let xs = opt.ask();
        let mut fs = vec![-1.0; xs.len()];
        fs[0] = f64::NAN;
        fs[1] = f64::INFINITY;
        opt.tell(&xs, &fs).unwrap();
        assert_eq!(opt.best_fitness(), Some(-1.0));
        assert_ne!(opt.recommend().unwrap(), xs[0].as_slice());
    }

    #[test]
    fn mismatched_tell_rejected() {
        let mut opt = Optimizer::new(OptimizerConfig::default(), &[1.0; 2]).unwrap();
        let xs = opt.ask();
        assert!(opt.tell(&xs, &[0.0]).is_err());
    }

    #[test]
    fn evaluate_initial_puts_start_point_first() {
        for kind in [
            OptimizerKind::CmaEs,
            OptimizerKind::OnePlusOneEs,
            OptimizerKind::RandomSearch,
        ] {
            let cfg = OptimizerConfig {
                kind,
                evaluate_initial: true,
                ..OptimizerConfig::default()
            };
            let mut opt = Optimizer::new(cfg, &[0.25, 0.5]).unwrap();
            assert_eq!(opt.ask()[0], vec![0.25, 0.5], "{kind}");
        }
    }

    #[test]
    fn minimization_flag_flips_orientation() {
        let cfg = OptimizerConfig {
            maximize: false,
            ..OptimizerConfig::default()
        };
        let mut opt = Optimizer::new(cfg, &[1.0]).unwrap();
        let xs = opt.ask();
        let fs: Vec<f64> = xs.iter().map(|x| x[0] * x[0]).collect();
        opt.tell(&xs, &fs).unwrap();
        let min = fs.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(opt.best_fitness(), Some(min));
    }

    #[test]
    fn random_search_recommends_best_draw() {
        let cfg = OptimizerConfig {
            kind: OptimizerKind::RandomSearch,
            lower: -3.0,
            upper: 3.0,
            seed: 9,
            ..OptimizerConfig::default()
        };
        let mut opt = Optimizer::new(cfg, &[0.0]).unwrap();
        let mut draws = Vec::new();
        for _ in 0..25 {
            let xs = opt.ask();
            assert_eq!(xs.len(), 1);
            assert!((-3.0..=3.0).contains(&xs[0][0]));
            let f = -(xs[0][0] - 1.0).abs();
            draws.push((xs[0].clone(), f));
            opt.tell(&xs, &[f]).unwrap();
        }
        let best = draws.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        assert_eq!(opt.recommend().unwrap(), best.0.as_slice());
    }

    #[test]
    fn sphere_converges_with_cma_es() {
        let opt = run(OptimizerKind::CmaEs, 1, 2000);
        let x = opt.recommend().unwrap();
        assert!(x.iter().map(|v| v * v).sum::<f64>() <= 1e-8);
    }
}
