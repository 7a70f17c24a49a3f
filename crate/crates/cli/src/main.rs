use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use snls_cli::commands::{self, CliResult, VerifyArgs};
use snls_cli::config::{load_config, parse_domain, parse_list, parse_sectors, RunConfig};

#[derive(Parser)]
#[command(name = "snls", version, about = "Weakly damped stochastic NLS laboratory")]
struct Cli {
    /// Worker threads for ensembles (default: all cores).
    #[arg(long, global = true, env = "SNLS_THREADS")]
    threads: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate one trajectory and write scalars and snapshots.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Horizon, overriding `experiment.t_end`.
        #[arg(long = "T")]
        t_end: Option<f64>,
    },
    /// First-exit Monte Carlo over a list of noise intensities.
    ExitMc {
        #[arg(long)]
        config: PathBuf,
        /// `l2_ball:R`, `h1_ball:R` or `htilde_sublevel:L`.
        #[arg(long)]
        domain: Option<String>,
        /// Comma-separated, strictly decreasing.
        #[arg(long)]
        epsilon_list: Option<String>,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        tmax: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        sectors: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Minimum-action exit paths for each horizon (and sector).
    Instanton {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        domain: Option<String>,
        /// Comma-separated, increasing.
        #[arg(long = "T-list")]
        t_list: Option<String>,
        /// Mode labels `j` or `jx:jy`, comma-separated.
        #[arg(long)]
        sectors: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the analysis constants for a configuration.
    Constants {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the invariant suite; nonzero status on any failure.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
        /// About a tenth of the Monte Carlo samples.
        #[arg(long)]
        quick: bool,
        /// Comma-separated check ids.
        #[arg(long)]
        only: Option<String>,
        #[arg(long, default_value_t = 20240611)]
        seed: u64,
        /// Print a JSON report instead of one line per check.
        #[arg(long)]
        json: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn with_out(mut cfg: RunConfig, out: Option<PathBuf>) -> RunConfig {
    if let Some(dir) = out {
        cfg.output.dir = dir.display().to_string();
    }
    cfg
}

fn run(cli: Cli) -> CliResult<u8> {
    match cli.command {
        Command::Simulate { config, out, seed, t_end } => {
            let mut cfg = with_out(load_config(&config)?, out);
            if let Some(s) = seed {
                cfg.experiment.seed = s;
            }
            if let Some(t) = t_end {
                cfg.experiment.t_end = t;
            }
            cfg.validate()?;
            commands::simulate(&cfg)
        }
        Command::ExitMc { config, domain, epsilon_list, paths, tmax, seed, sectors, out } => {
            let mut cfg = with_out(load_config(&config)?, out);
            if let Some(d) = domain {
                cfg.domain = parse_domain(&d)?;
            }
            if let Some(list) = epsilon_list {
                cfg.sde.epsilon_list = Some(parse_list("epsilon-list", &list)?);
            }
            if let Some(n) = paths {
                cfg.experiment.paths = n;
            }
            if let Some(t) = tmax {
                cfg.experiment.t_max = t;
            }
            if let Some(s) = seed {
                cfg.experiment.seed = s;
            }
            if let Some(s) = sectors {
                cfg.experiment.sectors = parse_sectors(&s)?;
            }
            cfg.validate()?;
            commands::exit_mc(&cfg)
        }
        Command::Instanton { config, domain, t_list, sectors, out } => {
            let mut cfg = with_out(load_config(&config)?, out);
            if let Some(d) = domain {
                cfg.domain = parse_domain(&d)?;
            }
            if let Some(list) = t_list {
                cfg.experiment.t_list = parse_list("T-list", &list)?;
            }
            if let Some(s) = sectors {
                cfg.experiment.sectors = parse_sectors(&s)?;
            }
            cfg.validate()?;
            commands::instanton(&cfg)
        }
        Command::Constants { config, out } => commands::constants(&with_out(load_config(&config)?, out)),
        Command::Verify { config, quick, only, seed, json, out } => {
            let cfg = match config {
                Some(path) => load_config(&path)?,
                None => RunConfig::default(),
            };
            let only = match only {
                Some(list) => Some(
                    parse_list("only", &list)?
                        .into_iter()
                        .map(|x| x as u32)
                        .collect(),
                ),
                None => None,
            };
            commands::verify(&cfg, &VerifyArgs { quick, only, seed, json, out })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(status) => ExitCode::from(status),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.status())
        }
    }
}
