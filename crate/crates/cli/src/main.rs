use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hmogp_cli::{commands, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "hmogp", version, about = "Hierarchical multi-output GP experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; overrides `out` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(long, global = true, value_enum)]
    ablation: Option<Ablation>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    /// Drop the shared component so replicas are independent.
    Flat,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic dataset (or normalise a CSV one).
    Generate,
    /// Split, fit and save the model with its ELBO trace.
    Fit,
    /// Predict at the points of a dataset-format CSV.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        points: PathBuf,
    },
    /// Score a predictions file against truth.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Repeat the whole pipeline over seeds and summarise.
    Experiment,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(Ablation::Flat) = cli.ablation {
        cfg.model.flat = true;
    }
    if cli.out.is_some() {
        cfg.out = cli.out.clone();
    }
    cfg.validate()?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    match cli.command {
        Command::Generate => {
            let ds = commands::cmd_generate(&cfg, &out)?;
            println!("wrote {} observations to {}", ds.observation_count(), out.display());
        }
        Command::Fit => {
            let fit = commands::cmd_fit(&cfg, &out)?;
            println!("best ELBO {} at iteration {}", fit.diagnostics.best_elbo, fit.best_iteration);
        }
        Command::Predict { model, points } => {
            let rows = commands::cmd_predict(&cfg, &model, &points, &out)?;
            println!("wrote {} predictions to {}", rows.len(), out.join("predictions.csv").display());
        }
        Command::Eval { predictions, truth } => {
            let r = commands::cmd_eval(&predictions, &truth, &out)?;
            println!("NMSE {} NLPD {} over {} points", r.nmse, r.nlpd, r.n_test);
        }
        Command::Experiment => {
            let s = commands::cmd_experiment(&cfg, &out)?;
            println!(
                "NMSE {:.4} ± {:.4}, NLPD {:.4} ± {:.4} over {} repeats",
                s.nmse.mean,
                s.nmse.sd,
                s.nlpd.mean,
                s.nlpd.sd,
                s.repeats.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
