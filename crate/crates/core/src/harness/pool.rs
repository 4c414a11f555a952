//! Sharer pool: k-means representatives of the pool candidates, each with a
//! trained adapter.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;

use crate::container::{self, Container};
use crate::error::{Error, Result};
use crate::model::TrainConfig;
use crate::prime::Sharer;
use crate::profile::{kmeans_pool, UserRecord};

use super::community::{Community, Role};
use super::config::PoolConfig;
use super::derive_seed;

const INDEX_FILE: &str = "pool.txt";

#[derive(Debug, Clone, Default)]
pub struct TrainedPool {
    pub sharers: Vec<Sharer>,
}

impl TrainedPool {
    pub fn ids(&self) -> Vec<String> {
        self.sharers.iter().map(|s| s.user.user_id.clone()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.sharers.is_empty()
    }

    /// Writes `pool.txt` plus one binary adapter container per sharer.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut index = fs::File::create(dir.join(INDEX_FILE))?;
        for s in &self.sharers {
            writeln!(index, "{}", s.user.user_id)?;
            container::save(
                dir.join(format!("{}.lrad", s.user.user_id)),
                &Container::LowRank(s.adapter.as_ref().clone()),
            )?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, community: &Community) -> Result<Self> {
        let index = BufReader::new(fs::File::open(dir.join(INDEX_FILE))?);
        let mut sharers = Vec::new();
        for line in index.lines() {
            let id = line?;
            let id = id.trim();
            if id.is_empty() {
                continue;
            }
            let user = community.user(id)?.record.clone();
            let adapter = container::load(dir.join(format!("{id}.lrad")))?.into_low_rank()?;
            sharers.push(Sharer {
                user,
                adapter: Arc::new(adapter),
            });
        }
        Ok(Self { sharers })
    }
}

/// Clusters the pool candidates, keeps one representative per cluster and
/// trains its adapter on its full history.
pub fn train_pool(community: &Community, pool: &PoolConfig, train: &TrainConfig) -> Result<TrainedPool> {
    let candidates: Vec<UserRecord> = community
        .with_role(Role::Pool)
        .map(|u| u.record.clone())
        .collect();
    if candidates.is_empty() {
        return Err(Error::data("community has no pool candidates"));
    }
    let ids = kmeans_pool(&candidates, pool.n_clusters, pool.seed)?;
    let model = community.model();
    let sharers = ids
        .par_iter()
        .map(|id| {
            let idx = community
                .users
                .iter()
                .position(|u| u.id() == id)
                .expect("pool ids come from the community");
            let user = community.users[idx].record.clone();
            let hyper = TrainConfig {
                seed: derive_seed(train.seed, idx as u64),
                ..*train
            };
            let adapter = model.train_user_adapter(&community.base, &user.history, &hyper)?;
            log::debug!("trained adapter for {id}");
            Ok(Sharer {
                user,
                adapter: Arc::new(adapter),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainedPool { sharers })
}
