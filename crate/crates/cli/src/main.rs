//! `cgc`: generate data, train, evaluate, export heatmaps and sweep λ.
//!
//! Exit status is 0 on success, 1 for usage or configuration errors and 2
//! for failures while running.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cgc_core::experiment::{
    cmd_eval, cmd_explain, cmd_gen_data, cmd_sweep, cmd_train, eval, ExperimentConfig,
    RunOptions, FINAL_CHECKPOINT, SWEEP_CSV, SWEEP_LAMBDAS,
};
use cgc_core::Error;
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "cgc", version, about = "Grad-CAM consistency experiments")]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded, bit-reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write train.cgcd and val.cgcd.
    GenData,
    /// Train, logging every epoch and checkpointing after each.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write report.json and report.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file; defaults to the validation set of the checkpoint's
        /// configuration.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Export heatmaps of selected samples as PGM images.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Sample ids, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        ids: Vec<u64>,
    },
    /// Train and evaluate once per λ and write sweep.csv.
    Sweep {
        /// λ values, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = SWEEP_LAMBDAS.to_vec())]
        lambdas: Vec<f64>,
    },
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Run(other),
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Failure::Usage("--config is required for this command".to_string()))?;
    let mut cfg = ExperimentConfig::load(path).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    Ok(cfg)
}

fn checkpoint_only(cli: &Cli) -> Result<(), Failure> {
    if cli.config.is_some() || cli.seed.is_some() {
        return Err(Failure::Usage(
            "--config and --seed do not apply: the checkpoint carries its configuration".to_string(),
        ));
    }
    Ok(())
}

fn output_dir_for(cli: &Cli, checkpoint: &Path) -> PathBuf {
    cli.output_dir.clone().unwrap_or_else(|| {
        checkpoint
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    })
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let options = RunOptions {
        deterministic: cli.deterministic,
    };
    match &cli.command {
        Command::GenData => {
            let cfg = load_config(cli)?;
            let (train, val) = cmd_gen_data(&cfg, &cfg.output_dir)?;
            println!("wrote {} and {}", train.display(), val.display());
        }
        Command::Train { resume } => {
            let cfg = load_config(cli)?;
            let ck = cmd_train(&cfg, &cfg.output_dir, resume.as_deref())?;
            println!(
                "trained {} epochs; wrote {}",
                ck.manifest.epoch,
                cfg.output_dir.join(FINAL_CHECKPOINT).display()
            );
        }
        Command::Eval { checkpoint, dataset } => {
            checkpoint_only(cli)?;
            let out = output_dir_for(cli, checkpoint);
            let report = cmd_eval(checkpoint, dataset.as_deref(), &out, options)?;
            for (name, s) in &report.summaries {
                match (s.mean, s.std) {
                    (Some(m), Some(sd)) => println!("{name}: {m:.4} ± {sd:.4} (n = {}, undefined = {})", s.n, s.undefined),
                    _ => println!("{name}: undefined (n = 0, undefined = {})", s.undefined),
                }
            }
            if let Some(l) = report.aggregates.get(eval::EVAL_CGC_LOSS) {
                println!("{}: {l:.4}", eval::EVAL_CGC_LOSS);
            }
        }
        Command::Explain { checkpoint, dataset, ids } => {
            checkpoint_only(cli)?;
            let out = output_dir_for(cli, checkpoint);
            for path in cmd_explain(checkpoint, dataset.as_deref(), ids, &out)? {
                println!("{}", path.display());
            }
        }
        Command::Sweep { lambdas } => {
            let cfg = load_config(cli)?;
            cmd_sweep(&cfg, lambdas, &cfg.output_dir, options)?;
            println!("{}", std::fs::read_to_string(cfg.output_dir.join(SWEEP_CSV)).unwrap_or_default().trim_end());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
