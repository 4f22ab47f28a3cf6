use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dirnas::cli::{self, Overrides, RunConfig};
use dirnas::Result;

#[derive(Parser)]
#[command(name = "dirnas", version, about = "Dirichlet architecture search on toy problems")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Stages as epochs:K:ops, comma separated, e.g. 25:2:4,25:1:2
    #[arg(long, global = true)]
    stage_schedule: Option<String>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// eta-l2, eta-norm or kl
    #[arg(long, global = true)]
    distance: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full staged search.
    Search,
    /// Train every genotype of the space and write the oracle table.
    Oracle,
    /// Score Dirichlet samples from a checkpoint against an oracle table.
    Band {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        oracle: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        samples: usize,
    },
    /// Curvature and bound readings at a checkpoint.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Retrain a genotype with the oracle budget and seeds.
    Eval {
        #[arg(long)]
        genotype: PathBuf,
        #[arg(long)]
        oracle: Option<PathBuf>,
    },
}

fn resolve(c: &Common) -> Result<RunConfig> {
    let overrides = Overrides {
        seed: c.seed,
        out: c.out.clone(),
        workers: c.workers,
        stage_schedule: c.stage_schedule.clone(),
        lambda: c.lambda,
        distance: c.distance.as_deref().map(cli::parse_distance).transpose()?,
    };
    RunConfig::resolve(c.config.as_deref(), &overrides)
}

fn run(args: Cli) -> Result<()> {
    let cfg = resolve(&args.common)?;
    match args.command {
        Command::Search => {
            let s = cli::cmd_search(&cfg)?;
            print!("genotype {} ({}) eta_norm {:.6}", s.genotype_key, s.genotype.describe(), s.eta_norm);
            if let (Some(a), Some(r)) = (s.oracle_accuracy, s.oracle_rank) {
                print!(" oracle accuracy {a:.4} rank {r:.4}");
            }
            println!("\nwrote {}", cfg.out.display());
        }
        Command::Oracle => {
            let t = cli::cmd_oracle(&cfg)?;
            if let Some((k, a)) = t.best() {
                println!("{} genotypes, best {k} at {a:.4}", t.accuracy.len());
            }
            println!("wrote {}", cfg.out.join("oracle.json").display());
        }
        Command::Band { checkpoint, oracle, samples } => {
            let b = cli::cmd_band(&cfg, &checkpoint, oracle.as_deref(), samples)?;
            println!("band [{:.4}, {:.4}] mean architecture {} at {:.4}", b.min, b.max, b.mean_arch, b.mean_arch_score);
        }
        Command::Diagnose { checkpoint } => {
            let r = cli::cmd_diagnose(&cfg, &checkpoint)?;
            println!(
                "epoch {} eigenvalue {:.6e} trace {:.6e} bound lhs {:.6} rhs {:.6}",
                r.epoch, r.eigenvalue, r.trace, r.bound.lhs, r.bound.rhs
            );
        }
        Command::Eval { genotype, oracle } => {
            let r = cli::cmd_eval(&cfg, &genotype, oracle.as_deref())?;
            print!("genotype {} accuracy {:.6}", r.genotype, r.accuracy);
            if let Some(t) = r.table_accuracy {
                print!(" (table {t:.6})");
            }
            println!();
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
