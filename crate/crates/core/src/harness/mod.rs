//! Desk-scale experiments on synthetic communities: generation, pool
//! training, per-user runs, alpha sweeps and their reports.

pub mod community;
pub mod config;
pub mod experiment;
pub mod plot;
pub mod pool;
pub mod report;
pub mod sweep;

pub use community::{Community, CommunityConfig, CommunityUser, Role};
pub use config::{ExperimentConfig, PoolConfig, SweepConfig};
pub use experiment::{base_test_scores, run_experiment, run_for_user, ExperimentResult, UserResult};
pub use pool::{train_pool, TrainedPool};
pub use sweep::{sweep_alpha, Aggregate, SweepResult, TradeoffRow};

/// Mixes a stream tag into a base seed (splitmix64 finalizer).
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
