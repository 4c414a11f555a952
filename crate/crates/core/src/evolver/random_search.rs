use rand::Rng;

/// Uniform sampling in an axis-aligned box.
#[derive(Debug, Clone)]
pub struct RandomSearch {
    dim: usize,
    lower: f64,
    upper: f64,
}

impl RandomSearch {
    pub fn new(dim: usize, lower: f64, upper: f64) -> Self {
        Self { dim, lower, upper }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.dim)
            .map(|_| rng.random_range(self.lower..=self.upper))
            .collect()
    }
}
