use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use cafct_core::harness::gradcheck::MODULES;
use cafct_core::harness::pgm::{read_image_pgm, write_gray8};
use cafct_core::harness::{
    evaluate, foreground_fraction, generate_synthetic_dataset, grad_check, infer_image, load_checkpoint,
    load_dataset, save_dataset, train, CheckOptions, TrainConfig,
};

/// Below this foreground share BCE-Dice tends to collapse to background.
const SMALL_FOREGROUND: f64 = 0.001;

#[derive(Parser)]
#[command(name = "cafct", version, about = "Train, evaluate and verify the CAFCT segmentation network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic ellipse dataset as images/<id>.pgm and masks/<id>.pgm.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train from a `key = value` config file, printing one line per epoch.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        /// Also write the metrics to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Predict a mask for one PGM image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional probability map, 0..255.
        #[arg(long)]
        prob_out: Option<PathBuf>,
    },
    /// Compare every backward pass against central finite differences.
    GradCheck {
        /// `all` or one of the module names.
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scale analytic gradients by 1.01 so the check must fail.
        #[arg(long, hide = true)]
        corrupt_for_testing: bool,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { n, size, seed, out_dir } => {
            let data = generate_synthetic_dataset(n, size, seed)?;
            save_dataset(&out_dir, &data)?;
            println!(
                "wrote {n} samples of {size}x{size} to {} (foreground {:.4})",
                out_dir.display(),
                foreground_fraction(&data)
            );
        }
        Command::Train { config } => {
            let cfg = TrainConfig::load(&config)?;
            let data = load_dataset(&cfg.train_dir)
                .with_context(|| format!("loading training data from {}", cfg.train_dir.display()))?;
            let fg = foreground_fraction(&data);
            if fg < SMALL_FOREGROUND {
                eprintln!(
                    "warning: foreground covers {:.4}% of pixels; BCE-Dice may not suit objects this small",
                    100.0 * fg
                );
            }
            train(&cfg, &data, |log| println!("{log}"))?;
            println!("checkpoint={}", cfg.checkpoint.display());
        }
        Command::Eval { checkpoint, data_dir, report } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let data = load_dataset(&data_dir)?;
            let text = evaluate(&ckpt.model, &data)?.render();
            print!("{text}");
            if let Some(path) = report {
                std::fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Infer { checkpoint, image, out, prob_out } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let pred = infer_image(&ckpt.model, &read_image_pgm(&image)?)?;
            write_gray8(&pred.mask, &out)?;
            if let Some(path) = prob_out {
                write_gray8(&pred.probability, &path)?;
            }
        }
        Command::GradCheck { scope, seed, corrupt_for_testing } => {
            if scope != "all" && !MODULES.contains(&scope.as_str()) {
                bail!("unknown scope {scope:?}; expected all or one of {}", MODULES.join(", "));
            }
            let report = grad_check(&scope, CheckOptions { seed, corrupt: corrupt_for_testing })?;
            print!("{}", report.render());
            if !report.passed() {
                let failed: Vec<&str> =
                    report.per_module().into_iter().filter(|(_, _, ok)| !ok).map(|(m, _, _)| m).collect();
                bail!("gradient check failed in {}", failed.join(", "));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
