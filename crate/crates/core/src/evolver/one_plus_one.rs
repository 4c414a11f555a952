use rand::Rng;
use rand_distr::StandardNormal;

/// Step-size multiplier after an improving offspring.
pub const SUCCESS_FACTOR: f64 = 1.395_612_425_086_089_5; // exp(1/3)
/// Step-size multiplier after a non-improving offspring.
pub const FAILURE_FACTOR: f64 = 0.920_044_414_629_323_2; // exp(-1/12)

/// (1+1)-ES with the one-fifth success rule.
#[derive(Debug, Clone)]
pub struct OnePlusOne {
    incumbent: Vec<f64>,
    fitness: Option<f64>,
    sigma: f64,
}

impl OnePlusOne {
    pub fn new(initial: &[f64], sigma0: f64) -> Self {
        Self {
            incumbent: initial.to_vec(),
            fitness: None,
            sigma: sigma0,
        }
    }

    pub fn incumbent(&self) -> &[f64] {
        &self.incumbent
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.incumbent
            .iter()
            .map(|x| x + self.sigma * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    pub(crate) fn update(&mut self, candidates: &[Vec<f64>], fitness: &[f64]) {
        for (x, &f) in candidates.iter().zip(fitness) {
            // the incumbent itself only establishes the reference fitness
            if self.fitness.is_none() && x.as_slice() == self.incumbent.as_slice() {
                self.fitness = Some(f);
                continue;
            }
            let current = self.fitness.unwrap_or(f64::NEG_INFINITY);
            if f > current {
                self.incumbent = x.clone();
                self.fitness = Some(f);
                self.sigma *= SUCCESS_FACTOR;
            } else {
                self.sigma *= FAILURE_FACTOR;
            }
        }
    }
}
