use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use evomerge::evolver::OptimizerKind;
use evomerge::harness::{
    plot, report, run_experiment, run_for_user, sweep_alpha, train_pool, Community, ExperimentConfig,
    ExperimentResult, TrainedPool,
};
use evomerge::{Error, Result};

#[derive(Parser)]
#[command(name = "evomerge", version, about = "Privacy-aware evolutionary merging of low-rank adapters")]
struct Cli {
    /// TOML experiment config; missing keys take defaults
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic community
    GenCommunity {
        /// Overrides community.seed
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Pick the k-means sharer pool and train its adapters
    TrainPool {
        #[arg(long, value_name = "DIR")]
        community: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Personalize test users once and write results, trace and MIA reports
    Personalize {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        prime: PrimeArgs,
        /// Only this test user (default: all)
        #[arg(long)]
        user: Option<String>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Run every (alpha, seed) pair and aggregate a trade-off table
    Sweep {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        prime: PrimeArgs,
        /// Comma-separated, ascending (default: sweep.alphas)
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        /// Use seeds 0..N (default: sweep.seeds)
        #[arg(long)]
        n_seeds: Option<u64>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Membership-inference audit of personalized models
    Mia {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        prime: PrimeArgs,
        #[arg(long)]
        user: Option<String>,
        /// Skip the per-example score dump
        #[arg(long)]
        no_scores: bool,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Render tradeoff.csv as an SVG privacy-utility curve
    Plot {
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        /// Horizontal axis: auc or privacy
        #[arg(long, default_value = "auc")]
        x: String,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Inputs {
    /// Directory from gen-community (generated from the config if absent)
    #[arg(long, value_name = "DIR")]
    community: Option<PathBuf>,
    /// Directory from train-pool (trained on the fly if absent)
    #[arg(long, value_name = "DIR")]
    pool: Option<PathBuf>,
}

#[derive(Args)]
struct PrimeArgs {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Optimizer generations
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    data_fraction: Option<f64>,
    /// cma_es, one_plus_one_es or random_search
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    seed: Option<u64>,
}

impl PrimeArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        let p = &mut cfg.prime;
        if let Some(v) = self.alpha {
            p.alpha = v;
        }
        if let Some(v) = self.top_k {
            p.top_k = v;
        }
        if let Some(v) = self.budget {
            p.budget = v;
        }
        if let Some(v) = self.data_fraction {
            p.data_fraction = v;
        }
        if let Some(v) = self.optimizer {
            p.optimizer = v;
        }
        if let Some(v) = self.seed {
            p.seed = v;
        }
        cfg.validate()
    }
}

fn load_community(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<Community> {
    match dir {
        Some(d) => Community::load_dir(d),
        None => Community::generate(&cfg.community),
    }
}

fn load_inputs(cfg: &ExperimentConfig, inputs: &Inputs) -> Result<(Community, TrainedPool)> {
    let community = load_community(cfg, inputs.community.as_deref())?;
    let pool = match &inputs.pool {
        Some(d) => TrainedPool::load(d, &community)?,
        None => train_pool(&community, &cfg.pool, &cfg.train)?,
    };
    Ok((community, pool))
}

fn personalize_runs(
    cfg: &ExperimentConfig,
    community: &Community,
    pool: &TrainedPool,
    user: Option<&str>,
) -> Result<Vec<report::Run>> {
    let result = match user {
        Some(id) => ExperimentResult {
            config: cfg.prime.clone(),
            users: vec![run_for_user(community, pool, &cfg.prime, id)?],
        },
        None => run_experiment(community, pool, &cfg.prime)?,
    };
    Ok(vec![(cfg.prime.alpha, cfg.prime.seed, result)])
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    match cli.command {
        Command::GenCommunity { seed, out } => {
            if let Some(s) = seed {
                cfg.community.seed = s;
            }
            let community = Community::generate(&cfg.community)?;
            community.save_dir(&out)?;
            fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            println!("wrote {} users to {}", community.users.len(), out.display());
        }
        Command::TrainPool { community, out } => {
            let community = load_community(&cfg, community.as_deref())?;
            let pool = train_pool(&community, &cfg.pool, &cfg.train)?;
            pool.save(&out)?;
            println!("trained {} sharers: {}", pool.sharers.len(), pool.ids().join(" "));
        }
        Command::Personalize { inputs, prime, user, out } => {
            prime.apply(&mut cfg)?;
            let (community, pool) = load_inputs(&cfg, &inputs)?;
            let runs = personalize_runs(&cfg, &community, &pool, user.as_deref())?;
            report::write_all(&out, "personalize", &cfg, &community, &runs, None, false)?;
            for u in &runs[0].2.users {
                println!(
                    "{} selected={} test_utility={:.4} auc={:.4}",
                    u.user_id,
                    u.personalized.selected.join(","),
                    u.test_utility,
                    u.mia.auc
                );
            }
        }
        Command::Sweep { inputs, prime, alphas, n_seeds, out } => {
            prime.apply(&mut cfg)?;
            if let Some(a) = alphas {
                cfg.sweep.alphas = a;
            }
            if let Some(n) = n_seeds {
                cfg.sweep.seeds = (0..n).collect();
            }
            cfg.validate()?;
            let (community, pool) = load_inputs(&cfg, &inputs)?;
            let result = sweep_alpha(&community, &pool, &cfg.prime, &cfg.sweep)?;
            report::write_all(&out, "sweep", &cfg, &community, &result.runs, Some(&result.rows), false)?;
            for r in &result.rows {
                println!(
                    "alpha={} utility={:.4}±{:.4} privacy={:.4}±{:.4} auc={:.4}±{:.4}",
                    r.alpha, r.utility.mean, r.utility.se, r.privacy.mean, r.privacy.se, r.auc.mean, r.auc.se
                );
            }
        }
        Command::Mia { inputs, prime, user, no_scores, out } => {
            prime.apply(&mut cfg)?;
            let (community, pool) = load_inputs(&cfg, &inputs)?;
            let runs = personalize_runs(&cfg, &community, &pool, user.as_deref())?;
            fs::create_dir_all(&out)?;
            report::write_mia(&out.join(report::MIA_CSV), &runs)?;
            if !no_scores {
                report::write_mia_scores(&out.join(report::MIA_SCORES_CSV), &runs)?;
            }
            for u in &runs[0].2.users {
                println!(
                    "{} members={} nonmembers={} auc={:.4}",
                    u.user_id,
                    u.mia.n_members(),
                    u.mia.n_nonmembers(),
                    u.mia.auc
                );
            }
        }
        Command::Plot { input, x, out } => {
            let label = match x.as_str() {
                "auc" => "membership-inference AUC",
                "privacy" => "privacy term",
                other => return Err(Error::Usage(format!("unknown axis `{other}`"))),
            };
            let points = plot::read_curve(&input, &x)?;
            fs::write(&out, plot::render_svg(&points, label))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
