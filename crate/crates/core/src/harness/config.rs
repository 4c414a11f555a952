//! Experiment configuration file.
//!
//! ```toml
//! [community]
//! n_clusters_latent = 5
//! style_strength = 1.0
//!
//! [train]
//! rank = 4
//!
//! [pool]
//! n_clusters = 10
//!
//! [prime]
//! top_k = 3
//! budget = 30
//!
//! [sweep]
//! alphas = [0.0, 0.5, 1.0, 2.0]
//! seeds = [0, 1, 2]
//! ```
//!
//! Every section and key is optional; missing values take their defaults.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TrainConfig;
use crate::prime::PrimeConfig;

use super::community::CommunityConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    /// Upper bound on the pool size: one sharer per k-means cluster.
    pub n_clusters: usize,
    pub seed: u64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            n_clusters: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            alphas: vec![0.0, 0.5, 1.0, 2.0],
            seeds: (0..20).collect(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("sweep needs at least one alpha and one seed".into()));
        }
        if self.alphas.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("sweep alphas must be strictly ascending".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub community: CommunityConfig,
    pub train: TrainConfig,
    pub pool: PoolConfig,
    pub prime: PrimeConfig,
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.community.validate()?;
        self.prime.validate()?;
        self.sweep.validate()?;
        if self.pool.n_clusters == 0 {
            return Err(Error::Config("pool.n_clusters must be positive".into()));
        }
        if self.train.rank == 0 {
            return Err(Error::Config("train.rank must be positive".into()));
        }
        Ok(())
    }
}
