use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use bbh::cli::runner::{
    attack_checkpoint, diagnose_checkpoint, eval_checkpoint, extrapolation_ratio, read_config, run_experiment_with,
    toy_predictive, CHECKPOINT_FILE,
};
use bbh::cli::{load_checkpoint, run_grid, DataSource};

#[derive(Parser)]
#[command(name = "bbh", version, about = "Variational Bayesian neural networks with hypernetwork posteriors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one experiment config.
    Train {
        config: PathBuf,
        /// Print a progress line every this many steps (0 disables).
        #[arg(long, default_value_t = 100)]
        log_every: usize,
    },
    /// Re-evaluate a checkpoint on the test set and an outlier set.
    Eval {
        checkpoint: PathBuf,
        /// IDX image file used as the outlier set instead of the configured one.
        #[arg(long)]
        outlier: Option<PathBuf>,
        /// Output directory (defaults to `eval/` next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// FGSM sweep over a grid of perturbation sizes.
    Attack {
        checkpoint: PathBuf,
        /// Comma-separated ε values, e.g. `0,0.1,0.2,0.3`.
        #[arg(long)]
        eps: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Histograms and correlations of selected weights.
    Diagnose {
        checkpoint: PathBuf,
        /// `name[:a..b],...`, e.g. `layer0.kernel:0..8,layer1.bias`.
        #[arg(long)]
        weights: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on the 1-D toy regression set and tabulate the predictive.
    Toy {
        config: PathBuf,
        #[arg(long, default_value_t = 500)]
        log_every: usize,
    },
    /// Run every `*.conf` in a directory and write a summary table.
    Grid {
        dir: PathBuf,
        /// Summary CSV path (defaults to `runs/<dir name>_summary.csv`).
        #[arg(long)]
        summary: Option<PathBuf>,
    },
}

fn out_dir(out: Option<PathBuf>, checkpoint: &Path, sub: &str) -> PathBuf {
    out.unwrap_or_else(|| {
        let base = if checkpoint.is_dir() {
            checkpoint.to_path_buf()
        } else {
            checkpoint.parent().map(Path::to_path_buf).unwrap_or_default()
        };
        base.join(sub)
    })
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn train(config: &Path, log_every: usize, toy: bool) -> Result<()> {
    let cfg = read_config(config).with_context(|| format!("reading {}", config.display()))?;
    let is_toy = matches!(cfg.data, DataSource::Toy(_));
    if toy && !is_toy {
        bail!("{} is not a toy config (set data.kind = toy)", config.display());
    }
    let steps = cfg.train.steps;
    let summary = run_experiment_with(&cfg, |l| {
        if log_every > 0 && (l.step % log_every == 0 || l.step + 1 == steps) {
            eprintln!(
                "step {:>6}  loss {:>12.4}  nll {:>10.4}  kl {:>12.2}  anneal {:.2}",
                l.step, l.loss, l.nll, l.kl, l.anneal
            );
        }
    })?;
    println!("{}", summary.line());
    if let DataSource::Toy(source) = &cfg.data {
        let ck = load_checkpoint(&cfg.output.join(CHECKPOINT_FILE))?;
        let p = toy_predictive(&ck.posterior, source, cfg.eval.samples, cfg.seed())?;
        println!(
            "extrapolation/in-range predictive std ratio: {:.3}",
            extrapolation_ratio(&p, source)
        );
    }
    println!("artifacts in {}", cfg.output.display());
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, log_every } => train(&config, log_every, false)?,
        Command::Toy { config, log_every } => train(&config, log_every, true)?,
        Command::Eval { checkpoint, outlier, out } => {
            let ck = load_checkpoint(&checkpoint_path(&checkpoint))?;
            let out = out_dir(out, &checkpoint, "eval");
            let summary = eval_checkpoint(&ck, outlier.as_deref(), &out)?;
            println!("{}", summary.line());
            println!("artifacts in {}", out.display());
        }
        Command::Attack { checkpoint, eps, out } => {
            let eps: Vec<f64> = eps
                .split(',')
                .map(|s| s.trim().parse::<f64>().with_context(|| format!("bad ε `{s}`")))
                .collect::<Result<_>>()?;
            let ck = load_checkpoint(&checkpoint_path(&checkpoint))?;
            let out = out_dir(out, &checkpoint, "attack");
            let sweep = attack_checkpoint(&ck, &eps, &out)?;
            println!("epsilon  accuracy  entropy");
            for i in 0..sweep.epsilons.len() {
                println!("{:<8} {:<9.4} {:.4}", sweep.epsilons[i], sweep.accuracy[i], sweep.entropy[i]);
            }
            println!("artifacts in {}", out.display());
        }
        Command::Diagnose { checkpoint, weights, out } => {
            let ck = load_checkpoint(&checkpoint_path(&checkpoint))?;
            let out = out_dir(out, &checkpoint, "diagnose");
            let d = diagnose_checkpoint(&ck, &weights, &out)?;
            println!("{} weights, {} samples each", d.names.len(), d.samples.first().map_or(0, Vec::len));
            println!("artifacts in {}", out.display());
        }
        Command::Grid { dir, summary } => {
            let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "grid".into());
            let summary = summary.unwrap_or_else(|| PathBuf::from(format!("runs/{name}_summary.csv")));
            run_grid(&dir, &summary, |config, s| println!("[{config}] {}", s.line()))?;
            println!("summary in {}", summary.display());
        }
    }
    Ok(())
}
