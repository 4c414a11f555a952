//! CMA-ES with default recombination weights and learning rates
//! (Hansen's tutorial settings, positive weights only).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Smallest eigenvalue allowed in the covariance before it is repaired.
pub const EIGEN_FLOOR: f64 = 1e-14;

/// `λ = 4 + ⌊3 ln n⌋`.
pub fn default_population_size(n: usize) -> usize {
    4 + (3.0 * (n as f64).ln()).floor() as usize
}

#[derive(Debug, Clone)]
pub struct CmaEs {
    n: usize,
    lambda: usize,
    mu: usize,
    weights: Vec<f64>,
    mu_eff: f64,
    c_sigma: f64,
    d_sigma: f64,
    c_c: f64,
    c_1: f64,
    c_mu: f64,
    chi_n: f64,

    mean: DVector<f64>,
    sigma: f64,
    cov: DMatrix<f64>,
    p_sigma: DVector<f64>,
    p_c: DVector<f64>,
    /// Eigenvectors of `cov`.
    basis: DMatrix<f64>,
    /// Square roots of the eigenvalues of `cov`.
    scales: DVector<f64>,
}

impl CmaEs {
    pub fn new(initial: &[f64], sigma0: f64) -> Self {
        let n = initial.len();
        let nf = n as f64;
        let lambda = default_population_size(n);
        let mu = lambda / 2;
        let raw: Vec<f64> = (1..=mu)
            .map(|i| ((lambda as f64 + 1.0) / 2.0).ln() - (i as f64).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();

        let c_sigma = (mu_eff + 2.0) / (nf + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / nf) / (nf + 4.0 + 2.0 * mu_eff / nf);
        let c_1 = 2.0 / ((nf + 1.3).powi(2) + mu_eff);
        let c_mu = (2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((nf + 2.0).powi(2) + mu_eff)).min(1.0 - c_1);
        let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));

        Self {
            n,
            lambda,
            mu,
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c_1,
            c_mu,
            chi_n,
            mean: DVector::from_column_slice(initial),
            sigma: sigma0,
            cov: DMatrix::identity(n, n),
            p_sigma: DVector::zeros(n),
            p_c: DVector::zeros(n),
            basis: DMatrix::identity(n, n),
            scales: DVector::from_element(n, 1.0),
        }
    }

    pub fn population_size(&self) -> usize {
        self.lambda
    }

    pub fn parents(&self) -> usize {
        self.mu
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn set_sigma(&mut self, sigma: f64) {
        self.sigma = sigma;
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// `λ` draws from `N(m, σ² C)`.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<Vec<f64>> {
        let bd = &self.basis * DMatrix::from_diagonal(&self.scales);
        (0..self.lambda)
            .map(|_| {
                let z = DVector::from_fn(self.n, |_, _| rng.sample::<f64, _>(StandardNormal));
                let x = &self.mean + (&bd * z) * self.sigma;
                x.as_slice().to_vec()
            })
            .collect()
    }

    /// Rank-one plus rank-μ update. `fitness` is oriented so larger is better.
    pub(crate) fn update(&mut self, candidates: &[Vec<f64>], fitness: &[f64], generation: usize) -> Result<()> {
        if candidates.len() < self.mu {
            return Err(Error::Usage(format!(
                "CMA-ES needs at least {} candidates per tell, got {}",
                self.mu,
                candidates.len()
            )));
        }
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&i, &j| fitness[j].total_cmp(&fitness[i]).then(i.cmp(&j)));

        let old_mean = self.mean.clone();
        let steps: Vec<DVector<f64>> = order[..self.mu]
            .iter()
            .map(|&i| (DVector::from_column_slice(&candidates[i]) - &old_mean) / self.sigma)
            .collect();
        let mut y_w = DVector::zeros(self.n);
        for (w, y) in self.weights.iter().zip(&steps) {
            y_w.axpy(*w, y, 1.0);
        }
        self.mean = &old_mean + &y_w * self.sigma;

        // C^{-1/2} y_w = B D^{-1} B^T y_w
        let inv_scales = self.scales.map(|s| 1.0 / s);
        let whitened = &self.basis * (self.basis.transpose() * &y_w).component_mul(&inv_scales);
        self.p_sigma = &self.p_sigma * (1.0 - self.c_sigma)
            + whitened * (self.c_sigma * (2.0 - self.c_sigma) * self.mu_eff).sqrt();

        let norm_ps = self.p_sigma.norm();
        let decay = 1.0 - (1.0 - self.c_sigma).powi(2 * (generation as i32 + 1));
        let h_sigma = if norm_ps / decay.sqrt() < (1.4 + 2.0 / (self.n as f64 + 1.0)) * self.chi_n {
            1.0
        } else {
            0.0
        };
        self.p_c = &self.p_c * (1.0 - self.c_c)
            + &y_w * (h_sigma * (self.c_c * (2.0 - self.c_c) * self.mu_eff).sqrt());

        let delta_h = (1.0 - h_sigma) * self.c_c * (2.0 - self.c_c);
        let mut cov = &self.cov * (1.0 + self.c_1 * delta_h - self.c_1 - self.c_mu);
        cov.ger(self.c_1, &self.p_c, &self.p_c, 1.0);
        for (w, y) in self.weights.iter().zip(&steps) {
            cov.ger(self.c_mu * w, y, y, 1.0);
        }
        self.cov = cov;

        self.sigma *= ((self.c_sigma / self.d_sigma) * (norm_ps / self.chi_n - 1.0)).exp();
        self.refresh_eigen();
        Ok(())
    }

    /// Symmetrizes `C`, decomposes it, and clamps eigenvalues at [`EIGEN_FLOOR`].
    fn refresh_eigen(&mut self) {
        let sym = (&self.cov + self.cov.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym.clone());
        let clamped = eig.eigenvalues.map(|v| if v.is_finite() { v.max(EIGEN_FLOOR) } else { EIGEN_FLOOR });
        let repaired = clamped != eig.eigenvalues;
        self.basis = eig.eigenvectors;
        self.scales = clamped.map(f64::sqrt);
        self.cov = if repaired {
            let c = &self.basis * DMatrix::from_diagonal(&clamped) * self.basis.transpose();
            (&c + c.transpose()) * 0.5
        } else {
            sym
        };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn population_formula() {
        assert_eq!(default_population_size(1), 4);
        assert_eq!(default_population_size(3), 7);
        assert_eq!(default_population_size(10), 10);
    }

    #[test]
    fn weights_follow_published_formula() {
        let c = CmaEs::new(&[0.0; 3], 0.3);
        // λ = 7, μ = 3, w_i ∝ ln(4) - ln(i)
        let raw = [4f64.ln(), 4f64.ln() - 2f64.ln(), 4f64.ln() - 3f64.ln()];
        let s: f64 = raw.iter().sum();
        for (w, r) in c.weights().iter().zip(raw) {
            assert!((w - r / s).abs() < 1e-15);
        }
    }

    #[test]
    fn tiny_sigma_samples_collapse_onto_mean() {
        let mut c = CmaEs::new(&[1.0, -2.0, 0.5], 0.3);
        c.set_sigma(1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = DVector::from_column_slice(c.mean());
        for x in c.sample(&mut rng) {
            assert!((DVector::from_vec(x) - &m).norm() <= 1e-9 * m.norm());
        }
    }

    #[test]
    fn mean_moves_to_weighted_parents() {
        let mut c = CmaEs::new(&[0.0; 3], 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs = c.sample(&mut rng);
        let fs: Vec<f64> = xs.iter().map(|x| -x.iter().map(|v| (v - 1.0).powi(2)).sum::<f64>()).collect();
        let mut order: Vec<usize> = (0..xs.len()).collect();
        order.sort_by(|&i, &j| fs[j].total_cmp(&fs[i]));
        let mut expect = [0.0; 3];
        for (w, &i) in c.weights().to_vec().iter().zip(&order) {
            for (e, x) in expect.iter_mut().zip(&xs[i]) {
                *e += w * x;
            }
        }
        c.update(&xs, &fs, 0).unwrap();
        for (m, e) in c.mean().iter().zip(&expect) {
            assert!((m - e).abs() < 1e-12);
        }
    }

    #[test]
    fn covariance_stays_symmetric_positive_definite() {
        let mut c = CmaEs::new(&[2.0; 5], 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for g in 0..200 {
            let xs = c.sample(&mut rng);
            let fs: Vec<f64> = xs
                .iter()
                .map(|x| -x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum::<f64>())
                .collect();
            c.update(&xs, &fs, g).unwrap();
            let cov = c.covariance();
            assert!((cov - cov.transpose()).amax() <= 1e-12);
            let eig = SymmetricEigen::new(cov.clone());
            assert!(eig.eigenvalues.min() > 0.0);
        }
    }
}
