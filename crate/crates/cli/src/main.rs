use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use cfft_core::harness::{self, ExperimentConfig, TEACHER_FILE};
use cfft_core::{Error, Result};

/// Counterfactual masked-image fine-tuning experiments.
#[derive(Parser, Debug)]
#[command(name = "cfft", version)]
struct Cli {
    /// JSON experiment config; fields are merged over its `preset`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single training seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parallel sweep cells.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Artifact root.
    #[arg(long, global = true, env = "CFFT_DATA_DIR")]
    out: Option<PathBuf>,
    /// Format of the rows printed to stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate every dataset split.
    GenData,
    /// Train the teacher on the diverse corpus.
    Pretrain,
    /// Fine-tune from the teacher with one strategy.
    Finetune {
        /// `vanilla`, `no-masking` or e.g. `object-0.5/single`; defaults to
        /// the config's `train.counterfactual`.
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Fine-tune every configured strategy for every seed.
    Sweep,
    /// Masking rates of thresholded relevance masks.
    MaskTable {
        /// Model to score with; defaults to the teacher.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Weight-space ensemble curve between two checkpoints.
    Wise {
        /// Defaults to the teacher.
        #[arg(long)]
        theta0: Option<PathBuf>,
        #[arg(long)]
        theta1: PathBuf,
    },
    /// Summary table of the teacher and the sweep.
    Report,
}

fn print_rows<R: Serialize>(rows: &[R], format: Format) -> Result<()> {
    let text = match format {
        Format::Csv => harness::to_csv(rows)?,
        Format::Json => serde_json::to_string_pretty(rows)? + "\n",
    };
    print!("{text}");
    Ok(())
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_path(path)?,
        None => ExperimentConfig::from_json_str("{}")?,
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn artifact_root(cli: &Cli, cfg: &ExperimentConfig) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("artifacts"))
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let root = artifact_root(cli, &cfg);
    let root: &Path = &root;
    let f = cli.format;
    match &cli.command {
        Command::GenData => print_rows(&harness::cmd_gen_data(&cfg, root)?, f),
        Command::Pretrain => print_rows(&[harness::cmd_pretrain(&cfg, root)?], f),
        Command::Finetune { strategy } => {
            let strategy = match strategy {
                Some(label) => harness::parse_strategy(label)?,
                None => cfg.train.counterfactual,
            };
            let row = harness::cmd_finetune(&cfg, root, strategy, cfg.seeds[0])?;
            print_rows(&[row], f)
        }
        Command::Sweep => {
            let result = harness::cmd_sweep(&cfg, root, cli.jobs)?;
            match f {
                Format::Csv => print_rows(&result.summary, f),
                Format::Json => print_rows(&[result], f),
            }
        }
        Command::MaskTable { model } => {
            print_rows(&harness::cmd_mask_table(&cfg, root, model.as_deref())?, f)
        }
        Command::Wise { theta0, theta1 } => {
            let theta0 = theta0.clone().unwrap_or_else(|| root.join(TEACHER_FILE));
            print_rows(&harness::cmd_wise(&cfg, root, &theta0, theta1)?, f)
        }
        Command::Report => print_rows(&harness::cmd_report(&cfg, root)?, f),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            report_hint(&e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn report_hint(e: &Error) {
    if let Error::MissingArtifact(path) = e {
        eprintln!(
            "hint: {} is produced by an earlier command (gen-data, pretrain, finetune or sweep)",
            path.display()
        );
    }
}
