mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eyepurify::Error;

#[derive(Parser, Debug)]
#[command(name = "eyepurify", version, about = "Purify real eye images toward a synthetic style")]
struct Cli {
    /// Flat `key = value` file supplying defaults for the subcommand's flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default, Clone)]
pub struct LossArgs {
    /// Loss-network weight file; a seeded network is used when absent.
    #[arg(long)]
    pub loss_net: Option<String>,
    #[arg(long)]
    pub loss_seed: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub lambda_global: Option<f64>,
    #[arg(long)]
    pub lambda_local: Option<f64>,
    /// `raw` or `by-elements`.
    #[arg(long)]
    pub gram: Option<String>,
    /// Comma-separated layer names.
    #[arg(long)]
    pub content_local: Option<String>,
    #[arg(long)]
    pub content_global: Option<String>,
    #[arg(long)]
    pub style_local: Option<String>,
    #[arg(long)]
    pub style_global: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a trained transform network on one image.
    Stylize {
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        input: Option<String>,
        #[arg(long)]
        output: Option<String>,
        /// Resize the input to SIZE x SIZE first.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Optimize an image directly with projected L-BFGS from white noise.
    Optimize {
        #[arg(long)]
        content: Option<String>,
        #[arg(long)]
        style: Option<String>,
        #[arg(long)]
        content_mask: Option<String>,
        #[arg(long)]
        style_mask: Option<String>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        out: Option<String>,
        #[arg(long)]
        curve_csv: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        tolerance: Option<f64>,
        #[command(flatten)]
        loss: LossArgs,
    },
    /// Train a transform network with Adam.
    Train {
        #[arg(long)]
        corpus: Option<String>,
        #[arg(long)]
        style: Option<String>,
        #[arg(long)]
        style_mask: Option<String>,
        #[arg(long)]
        out_model: Option<String>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Training resolution (square).
        #[arg(long)]
        size: Option<usize>,
        /// `shape-preserving` or `table-faithful`.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        curve_csv: Option<String>,
        #[command(flatten)]
        loss: LossArgs,
    },
    /// Repair orphan pupil labels in a directory of masks.
    RepairMasks {
        #[arg(long = "in")]
        input: Option<String>,
        #[arg(long)]
        out: Option<String>,
    },
    /// Time feed-forward inference against L-BFGS optimization.
    Bench {
        #[arg(long)]
        model: Option<String>,
        /// Comma-separated square resolutions.
        #[arg(long)]
        sizes: Option<String>,
        #[arg(long)]
        lbfgs_iters: Option<usize>,
        /// L-BFGS iterations actually run before extrapolating (0 runs all).
        #[arg(long)]
        lbfgs_sample: Option<usize>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        csv: Option<String>,
        #[command(flatten)]
        loss: LossArgs,
    },
    /// Evaluation metrics.
    Metrics {
        #[command(subcommand)]
        metric: Metric,
    },
}

#[derive(Subcommand, Debug)]
enum Metric {
    /// Pupil-center distance between same-named masks of two directories.
    PupilCenter {
        #[arg(long)]
        a: Option<String>,
        #[arg(long)]
        b: Option<String>,
        #[arg(long)]
        csv: Option<String>,
    },
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        3
    } else if e.is_io() {
        2
    } else {
        1
    }
}

fn configure_threads() -> Result<(), Error> {
    if let Ok(v) = std::env::var("EYEPURIFY_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("EYEPURIFY_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    configure_threads()?;
    let mut r = config::Resolver::new(cli.config.as_deref())?;
    match cli.command {
        Command::Stylize {
            model,
            input,
            output,
            size,
        } => commands::stylize(&mut r, model, input, output, size),
        Command::Optimize {
            content,
            style,
            content_mask,
            style_mask,
            iters,
            out,
            curve_csv,
            seed,
            tolerance,
            loss,
        } => commands::optimize(
            &mut r,
            commands::OptimizeArgs {
                content,
                style,
                content_mask,
                style_mask,
                iters,
                out,
                curve_csv,
                seed,
                tolerance,
            },
            loss,
        ),
        Command::Train {
            corpus,
            style,
            style_mask,
            out_model,
            iters,
            batch,
            lr,
            seed,
            size,
            preset,
            curve_csv,
            loss,
        } => commands::train(
            &mut r,
            commands::TrainArgs {
                corpus,
                style,
                style_mask,
                out_model,
                iters,
                batch,
                lr,
                seed,
                size,
                preset,
                curve_csv,
            },
            loss,
        ),
        Command::RepairMasks { input, out } => commands::repair_masks(&mut r, input, out),
        Command::Bench {
            model,
            sizes,
            lbfgs_iters,
            lbfgs_sample,
            runs,
            csv,
            loss,
        } => commands::bench(&mut r, model, sizes, lbfgs_iters, lbfgs_sample, runs, csv, loss),
        Command::Metrics {
            metric: Metric::PupilCenter { a, b, csv },
        } => commands::pupil_center(&mut r, a, b, csv),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
