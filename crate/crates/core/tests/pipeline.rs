use std::sync::Arc;

use evomerge::adapter::{apply_delta, merge_adapters, AdapterSet, LowRankDelta, MergeWeights, SiteShape};
use evomerge::evolver::{default_population_size, OptimizerKind};
use evomerge::harness::{
    report, run_experiment, run_for_user, sweep_alpha, train_pool, Community, CommunityConfig,
    ExperimentConfig, PoolConfig, Role, SweepConfig, TrainedPool,
};
use evomerge::model::{TrainConfig, LM_HEAD};
use evomerge::prime::{personalize, utility_score, PrimeConfig, Sharer};
use evomerge::profile::{kmeans, kmeans_pool, UserRecord};
use evomerge::Error;

fn small_config() -> ExperimentConfig {
    ExperimentConfig {
        community: CommunityConfig {
            n_clusters_latent: 3,
            users_per_cluster: 4,
            test_users_per_cluster: 1,
            history_len: 12,
            test_items: 4,
            ..CommunityConfig::default()
        },
        train: TrainConfig {
            steps: 40,
            ..TrainConfig::default()
        },
        pool: PoolConfig {
            n_clusters: 6,
            seed: 0,
        },
        prime: PrimeConfig {
            budget: 5,
            ..PrimeConfig::default()
        },
        sweep: SweepConfig {
            alphas: vec![0.0, 1.0],
            seeds: vec![0, 1],
        },
    }
}

fn setup() -> (ExperimentConfig, Community, TrainedPool) {
    let cfg = small_config();
    let community = Community::generate(&cfg.community).unwrap();
    let pool = train_pool(&community, &cfg.pool, &cfg.train).unwrap();
    (cfg, community, pool)
}

#[test]
fn same_seed_gives_identical_community_file() {
    let cfg = small_config().community;
    let write = |c: &Community| {
        let mut buf = Vec::new();
        c.write(&mut buf).unwrap();
        buf
    };
    let a = write(&Community::generate(&cfg).unwrap());
    assert_eq!(a, write(&Community::generate(&cfg).unwrap()));
    let other = CommunityConfig { seed: cfg.seed + 1, ..cfg };
    assert_ne!(a, write(&Community::generate(&other).unwrap()));
}

#[test]
fn user_count_matches_config() {
    let cfg = small_config().community;
    assert_eq!(Community::generate(&cfg).unwrap().users.len(), 12);
}

#[test]
fn kmeans_recovers_separated_clouds() {
    let centers = [[10.0, 0.0], [0.0, 10.0], [-10.0, -10.0]];
    let mut points = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for i in 0..8 {
            let jitter = (i as f64 * 0.37 + c as f64).sin() * 0.5;
            points.push(vec![center[0] + jitter, center[1] - jitter]);
        }
    }
    let km = kmeans(&points, 3, 11).unwrap();
    for block in km.assignments.chunks(8) {
        assert!(block.iter().all(|&a| a == block[0]));
    }
    let distinct: std::collections::BTreeSet<_> = km.assignments.iter().collect();
    assert_eq!(distinct.len(), 3);
}

#[test]
fn pool_is_drawn_from_pool_candidates() {
    let (cfg, community, pool) = setup();
    let candidates: Vec<UserRecord> = community.with_role(Role::Pool).map(|u| u.record.clone()).collect();
    assert_eq!(pool.ids(), kmeans_pool(&candidates, cfg.pool.n_clusters, cfg.pool.seed).unwrap());
    for id in pool.ids() {
        assert_eq!(community.user(&id).unwrap().role, Role::Pool);
    }
}

#[test]
fn trace_covers_every_generation_and_starts_at_uniform() {
    let (cfg, community, pool) = setup();
    let target = community.with_role(Role::Test).next().unwrap();
    let p = personalize(&community.model(), &target.record, &pool.sharers, &community.base, &cfg.prime).unwrap();
    let lambda = default_population_size(3);
    assert_eq!(p.trace.len(), cfg.prime.budget * lambda);
    assert_eq!(p.evaluations, p.trace.len());
    assert_eq!(p.generations, cfg.prime.budget);
    assert_eq!(p.trace[0].weights.to_flat(), vec![1.0 / 3.0; 3]);
    assert_eq!(p.weights, p.best_report().unwrap().weights);
    assert_eq!(p.selected.len(), 3);
}

#[test]
fn budget_zero_returns_uniform_merge() {
    let (cfg, community, pool) = setup();
    let prime = PrimeConfig { budget: 0, ..cfg.prime.clone() };
    let result = run_experiment(&community, &pool, &prime).unwrap();
    for u in &result.users {
        assert!(u.personalized.trace.is_empty());
        assert_eq!(u.personalized.weights.to_flat(), vec![1.0 / 3.0; 3]);
        let uniform = MergeWeights::module_level(u.personalized.selected.iter().map(|s| (s.as_str(), 1.0 / 3.0)));
        let adapters: AdapterSet = pool
            .sharers
            .iter()
            .map(|s| (s.user.user_id.clone(), Arc::clone(&s.adapter)))
            .collect();
        let params = apply_delta(&community.base, &merge_adapters(&uniform, &adapters).unwrap()).unwrap();
        let test = &community.user(&u.user_id).unwrap().test;
        let expected = utility_score(&community.model(), &params, test, prime.metric, prime.max_len).unwrap();
        assert_eq!(u.test_utility, expected);
    }
}

#[test]
fn doubling_budget_never_lowers_fitness() {
    let (cfg, community, pool) = setup();
    let id = community.with_role(Role::Test).nth(1).unwrap().id().to_string();
    for alpha in [0.0, 1.0] {
        let prime = PrimeConfig { alpha, ..cfg.prime.clone() };
        let short = run_for_user(&community, &pool, &prime, &id).unwrap();
        let long = run_for_user(&community, &pool, &PrimeConfig { budget: 10, ..prime }, &id).unwrap();
        assert_eq!(short.personalized.trace[..], long.personalized.trace[..short.personalized.trace.len()]);
        assert!(long.final_fitness >= short.final_fitness);
    }
}

#[test]
fn alpha_zero_row_is_mean_of_standalone_runs() {
    let (cfg, community, pool) = setup();
    let sweep = sweep_alpha(&community, &pool, &cfg.prime, &cfg.sweep).unwrap();
    assert_eq!(sweep.rows.len(), cfg.sweep.alphas.len());
    let standalone: Vec<f64> = cfg
        .sweep
        .seeds
        .iter()
        .map(|&seed| {
            let prime = PrimeConfig { alpha: 0.0, seed, ..cfg.prime.clone() };
            run_experiment(&community, &pool, &prime).unwrap().mean_test_utility()
        })
        .collect();
    let mean = standalone.iter().sum::<f64>() / standalone.len() as f64;
    assert_eq!(sweep.rows[0].utility.mean, mean);
    assert_eq!(sweep.rows[0].n_seeds, 2);
    assert!(sweep.rows.iter().all(|r| r.utility.se >= 0.0 && r.auc.se >= 0.0));
}

#[test]
fn optimization_and_test_items_are_disjoint() {
    let (cfg, community, pool) = setup();
    let prime = PrimeConfig { data_fraction: 0.5, ..cfg.prime.clone() };
    let result = run_experiment(&community, &pool, &prime).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let runs = vec![(0.0, 0, result)];
    report::write_all(dir.path(), "personalize", &cfg, &community, &runs, None, true).unwrap();
    let manifest: toml::Value = toml::from_str(&std::fs::read_to_string(dir.path().join(report::MANIFEST)).unwrap()).unwrap();
    let entries = manifest["runs"].as_array().unwrap();
    assert_eq!(entries.len(), 3);
    for e in entries {
        assert_eq!(e["split_overlap"].as_integer(), Some(0));
        assert_eq!(e["optimization_indices"].as_array().unwrap().len(), 6);
    }
    for f in [report::RESULTS_CSV, report::TRACE_CSV, report::MIA_CSV, report::MIA_SCORES_CSV] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
}

#[test]
fn mia_sides_follow_selection() {
    let (cfg, community, pool) = setup();
    let id = community.with_role(Role::Test).next().unwrap().id().to_string();
    let r = run_for_user(&community, &pool, &cfg.prime, &id).unwrap();
    let per_user = cfg.community.history_len;
    assert_eq!(r.mia.n_members(), 3 * per_user);
    assert!(r.mia.n_nonmembers() <= (pool.sharers.len() - 3) * per_user);
    assert_eq!(r.mia.auc, evomerge::metrics::auc(&r.mia.member_scores, &r.mia.nonmember_scores).unwrap());
}

#[test]
fn top_k_larger_than_pool_is_clamped() {
    let (cfg, community, pool) = setup();
    let target = community.with_role(Role::Test).next().unwrap();
    let small = &pool.sharers[..2];
    let prime = PrimeConfig { top_k: 5, budget: 1, ..cfg.prime.clone() };
    let p = personalize(&community.model(), &target.record, small, &community.base, &prime).unwrap();
    assert_eq!(p.selected.len(), 2);
    assert_eq!(p.warnings.len(), 1);
}

#[test]
fn every_optimizer_runs_the_pipeline() {
    let (cfg, community, pool) = setup();
    let id = community.with_role(Role::Test).next().unwrap().id().to_string();
    for kind in [OptimizerKind::CmaEs, OptimizerKind::OnePlusOneEs, OptimizerKind::RandomSearch] {
        let prime = PrimeConfig { optimizer: kind, alpha: 0.5, ..cfg.prime.clone() };
        let r = run_for_user(&community, &pool, &prime, &id).unwrap();
        assert_eq!(r.personalized.generations, prime.budget);
        for row in &r.personalized.trace {
            let p = row.mean_privacy().unwrap();
            assert!((row.fitness - (row.utility - 0.5 * p)).abs() < 1e-12);
        }
    }
}

#[test]
fn misuse_is_reported() {
    let (cfg, community, pool) = setup();
    let test_id = community.with_role(Role::Test).next().unwrap().id().to_string();
    let empty = TrainedPool::default();
    assert!(matches!(run_for_user(&community, &empty, &cfg.prime, &test_id), Err(Error::Usage(_))));
    let sharer_id = pool.ids()[0].clone();
    assert!(matches!(run_for_user(&community, &pool, &cfg.prime, &sharer_id), Err(Error::Usage(_))));

    let wrong = LowRankDelta::zeros(&[SiteShape { id: LM_HEAD.into(), d_out: 3, d_in: 6 }], 2).unwrap();
    let bad = vec![Sharer { user: pool.sharers[0].user.clone(), adapter: Arc::new(wrong) }];
    let target = &community.user(&test_id).unwrap().record;
    assert!(matches!(
        personalize(&community.model(), target, &bad, &community.base, &cfg.prime),
        Err(Error::Layout(_))
    ));
}

#[test]
fn community_and_pool_survive_disk() {
    let (cfg, community, pool) = setup();
    let dir = tempfile::tempdir().unwrap();
    community.save_dir(&dir.path().join("c")).unwrap();
    pool.save(&dir.path().join("p")).unwrap();
    let c2 = Community::load_dir(&dir.path().join("c")).unwrap();
    let p2 = TrainedPool::load(&dir.path().join("p"), &c2).unwrap();
    assert_eq!(c2.base, community.base);
    assert_eq!(p2.ids(), pool.ids());
    let a = run_experiment(&community, &pool, &cfg.prime).unwrap();
    let b = run_experiment(&c2, &p2, &cfg.prime).unwrap();
    assert_eq!(a.mean_test_utility(), b.mean_test_utility());
    assert_eq!(a.mean_auc(), b.mean_auc());
}
