use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use latent_abcss::diagnostics::EpsGrid;
use latent_abcss::io::Provenance;
use latent_abcss::pipeline::{self, PipelineConfig};
use latent_abcss::Error;

#[derive(Parser)]
#[command(name = "latent-abcss", version, about = "Bayesian travel-time tomography with a joint generative model and ABC by Subset Simulation")]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Start from a built-in configuration instead of the defaults.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,

    /// Seed of the stage the command runs.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Artifact directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Threshold grid as "min,max,count,log|lin" in squared ns.
    #[arg(long, global = true)]
    eps_grid: Option<EpsGrid>,

    #[arg(long, global = true)]
    latent_dim: Option<usize>,

    #[arg(long, global = true)]
    train_size: Option<usize>,

    /// Observation noise standard deviation in ns.
    #[arg(long, global = true)]
    noise_std: Option<f64>,

    /// Worker threads; falls back to LATENT_ABCSS_THREADS.
    #[arg(long, global = true, env = "LATENT_ABCSS_THREADS")]
    threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Desk,
}

#[derive(Subcommand)]
enum Command {
    /// Sample training and test couples and the ray operator.
    Gendata,
    /// Train the generative model on the stored dataset.
    Train,
    /// Invert test couples, or an external observation with --y-obs.
    Invert {
        /// First test couple.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Number of consecutive test couples.
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Compare against the analytic posterior.
        #[arg(long)]
        oracle: bool,
        /// Stem of a stored observation vector to invert instead.
        #[arg(long, conflicts_with_all = ["index", "count"])]
        y_obs: Option<PathBuf>,
    },
    /// Write the analytic posterior of a test couple.
    OraclePosterior {
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Aggregate the RMSE tables of all inversions.
    Evaluate,
    /// Print the resolved configuration as JSON.
    Config,
}

fn resolve(common: &Common, command: &Command) -> latent_abcss::Result<PipelineConfig> {
    let mut cfg = match (&common.config, common.preset) {
        (Some(path), _) => PipelineConfig::load(path)?,
        (None, Some(Preset::Desk)) => PipelineConfig::desk(),
        (None, _) => PipelineConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(g) = common.eps_grid {
        cfg.eps_grid = g;
    }
    if let Some(d) = common.latent_dim {
        cfg.latent_dim = d;
    }
    if let Some(n) = common.train_size {
        cfg.train_size = n;
    }
    if let Some(s) = common.noise_std {
        cfg.noise.std = s;
    }
    if let Some(seed) = common.seed {
        match command {
            Command::Gendata => cfg.seeds.data = seed,
            Command::Train => cfg.seeds.train = seed,
            Command::Invert { .. } | Command::OraclePosterior { .. } => cfg.seeds.invert = seed,
            Command::Evaluate | Command::Config => {}
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> latent_abcss::Result<()> {
    let cfg = resolve(&cli.common, &cli.command)?;
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    }
    let report = |path: PathBuf| println!("{}", path.display());
    match cli.command {
        Command::Gendata => report(pipeline::cmd_gendata(&cfg)?),
        Command::Train => report(pipeline::cmd_train(&cfg)?),
        Command::Invert {
            index,
            count,
            oracle,
            y_obs,
        } => {
            if let Some(stem) = y_obs {
                report(pipeline::cmd_invert_observation(&cfg, &stem)?);
            } else {
                let mut peakless = false;
                for i in index..index + count {
                    log::info!("inverting test couple {i}");
                    match pipeline::cmd_invert(&cfg, i, oracle) {
                        Ok(p) => report(p),
                        Err(Error::NoCurvaturePeak) => {
                            log::warn!("test couple {i}: no curvature peak, diagnostics written");
                            peakless = true;
                        }
                        Err(e) => return Err(e),
                    }
                }
                if peakless {
                    return Err(Error::NoCurvaturePeak);
                }
            }
        }
        Command::OraclePosterior { index } => report(pipeline::cmd_oracle_posterior(&cfg, index)?),
        Command::Evaluate => {
            let prov = Provenance::new("evaluate", &cfg.hash(), 0);
            report(pipeline::cmd_evaluate(&cfg.out_dir, &prov)?)
        }
        Command::Config => println!(
            "{}",
            serde_json::to_string_pretty(&cfg).map_err(|e| Error::InvalidConfig(e.to_string()))?
        ),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let stage = match &cli.command {
        Command::Gendata => "gendata",
        Command::Train => "train",
        Command::Invert { .. } => "invert",
        Command::OraclePosterior { .. } => "oracle-posterior",
        Command::Evaluate => "evaluate",
        Command::Config => "config",
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("latent-abcss {stage}: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
