use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use hybnn_cli::{commands, report, ExperimentConfig};

#[derive(Parser)]
#[command(name = "hybnn", version, about = "Hybrid binary neural network experiments on MNIST")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Pair task 1..5 (task k separates digits 2k-2 and 2k-1).
    #[arg(long, global = true)]
    task: Option<usize>,
    /// Epoch count for the chosen subcommand.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    clients: Option<usize>,
    #[arg(long, global = true)]
    rounds: Option<usize>,
    /// Root directory for run outputs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Directory holding the four MNIST IDX files.
    #[arg(long, global = true)]
    mnist: Option<PathBuf>,
    /// Extra `key=value` overrides, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Train the autoencoder on all training digits, freeze it, save a checkpoint.
    TrainVae,
    /// Encode every task split into binary feature files.
    Extract,
    /// Train a binary classifier head on one task and compile the packed model.
    TrainBnn,
    /// Train the plain binary CNN on sign-binarized pixels.
    Baseline,
    /// Run federated averaging over several simulated clients.
    Federated,
    /// Summarize finished runs from their CSV files.
    Report,
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig> {
    let c = &cli.common;
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for s in &c.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| anyhow::anyhow!("--set expects KEY=VALUE, got `{s}`"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = c.task {
        cfg.task = v;
        cfg.tasks = vec![v];
    }
    if let Some(v) = c.clients {
        cfg.clients = v;
    }
    if let Some(v) = c.rounds {
        cfg.rounds = v;
    }
    if let Some(v) = &c.out {
        cfg.out = v.clone();
    }
    if let Some(v) = &c.mnist {
        cfg.mnist_dir = v.clone();
    }
    if let Some(e) = c.epochs {
        match cli.command {
            Command::TrainVae | Command::Extract => cfg.vae_epochs = e,
            Command::TrainBnn => cfg.bnn_epochs = e,
            Command::Baseline => cfg.baseline_epochs = e,
            Command::Federated => cfg.local_epochs = e,
            Command::Report => {}
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    match cli.command {
        Command::TrainVae => {
            let s = commands::train_vae(&cfg)?;
            println!(
                "autoencoder: {} epochs, train loss {:.4}, test pixel accuracy {:.4}, saved {}",
                s.epochs,
                s.final_train_loss,
                s.final_test_pixel_accuracy,
                s.checkpoint.display()
            );
        }
        Command::Extract => {
            let s = commands::extract(&cfg)?;
            println!("wrote {} feature files, {} bytes per code", s.files.len(), s.code_bytes);
        }
        Command::TrainBnn => {
            let s = commands::train_bnn(&cfg)?;
            println!(
                "task {}: test accuracy {:.4}, loss {:.4}, packed engine mismatches {}, weights {}x smaller",
                s.task,
                s.test.accuracy,
                s.test.loss,
                s.engine_mismatches,
                s.sizes.weight_ratio()
            );
        }
        Command::Baseline => {
            let s = commands::baseline(&cfg)?;
            println!(
                "task {}: baseline test accuracy {:.4} after {} epochs (best {:.4} at epoch {})",
                s.task, s.test.accuracy, s.epochs, s.best_test_accuracy, s.best_epoch
            );
        }
        Command::Federated => {
            let s = commands::federated(&cfg)?;
            println!(
                "task {}: {} rounds, global test accuracy {:.4}, uploaded {} bytes, payload {} bytes per client ({} if 1-bit)",
                s.task,
                s.rounds,
                s.final_test.accuracy,
                s.comm.total_uploaded,
                s.comm.bnn_payload_bytes,
                s.comm.one_bit_payload_bytes
            );
        }
        Command::Report => {
            let r = report::report(&cfg)?;
            print!("{}", r.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
