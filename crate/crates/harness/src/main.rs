use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ibp_harness::config::{Overrides, RunConfig, StrategyKind, TaskKind};
use ibp_harness::{run, HarnessError};

/// Train, evaluate and inspect imagination-based planners.
#[derive(Parser)]
#[command(name = "ibp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML run config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    task: Option<TaskKind>,
    #[arg(long, global = true, value_enum)]
    strategy: Option<StrategyKind>,
    #[arg(long, global = true)]
    max_imaginations: Option<usize>,
    #[arg(long, global = true)]
    max_actions: Option<usize>,
    /// Fixed price per imagination step.
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Checkpoint to read (eval, render, tree-stats) or write (train).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Load a checkpoint even if its config fingerprint differs.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent; writes metrics.csv and a checkpoint.
    Train {
        /// Print every n-th iteration to stderr (0: never).
        #[arg(long, default_value_t = 100)]
        log_every: u64,
    },
    /// Play the fixed evaluation episodes; writes eval.csv.
    Eval,
    /// Train and evaluate every cell of the config's sweep grid; writes sweep.csv.
    Sweep,
    /// Draw one evaluation episode as SVG.
    Render {
        #[arg(long, default_value_t = 0)]
        episode: usize,
    },
    /// Histogram of imagination-tree shapes over the evaluation episodes.
    TreeStats,
    /// Print the effective config as TOML.
    Config,
}

fn config(c: &Common) -> Result<RunConfig, HarnessError> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: c.seed,
        out: c.out.clone(),
        task: c.task,
        strategy: c.strategy,
        max_imaginations: c.max_imaginations,
        max_actions: c.max_actions,
        tau: c.tau,
    });
    Ok(cfg)
}

fn report(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn execute(cli: &Cli) -> Result<(), HarnessError> {
    let cfg = config(&cli.common)?;
    let ck = cli.common.checkpoint.as_deref();
    let force = cli.common.force;
    match cli.command {
        Command::Train { log_every } => {
            let files = run::train(&cfg, ck, |r| {
                if log_every > 0 && r.iteration % log_every == 0 {
                    eprintln!(
                        "iteration {} return {:.4} imaginations {:.2}",
                        r.iteration, r.manager_return, r.imaginations
                    );
                }
            })?;
            report(&files);
        }
        Command::Eval => {
            let (rows, files) = run::eval(&cfg, ck, force)?;
            let (loss, ret, imag, _) = ibp_harness::metrics::summarize(&rows);
            match (loss, ret) {
                (Some(l), _) => println!(
                    "{} episodes, mean task loss {l:.4}, mean imaginations {imag:.3}",
                    rows.len()
                ),
                (_, Some(r)) => println!(
                    "{} episodes, mean return {r:.4}, mean imagination units {imag:.3}",
                    rows.len()
                ),
                _ => {}
            }
            report(&files);
        }
        Command::Sweep => {
            let (_, files) = run::sweep(&cfg, |i, n, r| {
                eprintln!(
                    "cell {}/{n} seed {} tau {} imaginations {}: done",
                    i + 1,
                    r.seed,
                    r.tau,
                    r.max_imaginations
                );
            })?;
            report(&files);
        }
        Command::Render { episode } => report(&run::render(&cfg, ck, force, episode)?),
        Command::TreeStats => {
            let (rows, files) = run::tree_stats(&cfg, ck, force)?;
            for r in rows.iter().take(10) {
                println!("{:>6} {:.3} {}", r.count, r.fraction, r.shape);
            }
            report(&files);
        }
        Command::Config => {
            cfg.validate()?;
            print!("{}", cfg.to_toml());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
