//! `align-criterion`: matching, losses, gradient checks, toy training and
//! alignment diagnostics from the command line.
//!
//! Exit codes: 0 success, 1 failed check or runtime error, 2 unreadable or
//! invalid input, 3 infeasible replication count.

mod commands;
mod config;
mod output;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use align_criterion::Variant;
use clap::{Parser, Subcommand};

use commands::{CliError, CliResult, DiagnoseOptions, GradcheckOptions, LossOptions};

/// Caps the worker threads used for parallel arms and runs.
const THREADS_ENV: &str = "ALIGN_CRITERION_THREADS";

#[derive(Parser)]
#[command(
    name = "align-criterion",
    version,
    about = "Detection criterion lab: matching, IoU-aware losses, toy training and alignment diagnostics"
)]
#[command(
    after_help = "Environment:\n  ALIGN_CRITERION_THREADS  maximum worker threads (default: all cores)\n\nExit codes: 0 ok, 1 failed check, 2 input error, 3 infeasible k"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Match one layer's predictions to the ground truths; prints JSON.
    Match {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        preds: PathBuf,
        /// Copies of each ground truth (1 = one-to-one).
        #[arg(long, default_value_t = 1)]
        k: usize,
        /// Layer index; defaults to the last layer.
        #[arg(long)]
        layer: Option<usize>,
        /// Solve by exhaustive search instead of the Hungarian method.
        #[arg(long)]
        brute_force: bool,
    },
    /// Evaluate the mixed-matching loss over all layers; prints JSON.
    Loss {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        preds: PathBuf,
        /// Criterion JSON; flags below override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// ia-bce, focal, qfl:<beta>, vfl or weighting:<1-5>.
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        no_prime_weighting: bool,
    },
    /// Compare analytic and finite-difference gradients on seeded problems.
    #[command(
        after_help = "Prints CSV: variant,seed,n_params,max_rel_err,worst_param,analytic,numeric,pass\nExit 0 iff every case passes."
    )]
    Gradcheck {
        /// A variant name or `all`.
        #[arg(long, default_value = "all")]
        variant: String,
        /// Number of seeded problems per variant.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// First problem seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 3)]
        layers: usize,
        #[arg(long, default_value_t = 6)]
        queries: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 2)]
        gts: usize,
        #[arg(long, default_value_t = 2)]
        k: usize,
    },
    /// Train the base criterion on every configured run.
    #[command(after_help = TRAIN_HELP)]
    Train {
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every listed variant and arm on the same runs and summarize.
    #[command(after_help = TRAIN_HELP)]
    Compare {
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// BR recall, confidence-IoU density and IoU histograms.
    #[command(
        after_help = "Writes recall.csv (m,br_recall), density.csv (conf_bin,conf_lo,conf_hi,iou_bin,iou_lo,iou_hi,count),\nhistograms.csv (bin,iou_lo,iou_hi,hc_count,br_count) and summary.json.\nConfidence is max-normalized before binning."
    )]
    Diagnose {
        /// Prediction file; repeat once per scene.
        #[arg(long, required = true)]
        preds: Vec<PathBuf>,
        /// Scene file; repeat in the same order as --preds.
        #[arg(long, required = true)]
        scene: Vec<PathBuf>,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        /// Pool BR hits over scenes instead of averaging per-scene recall.
        #[arg(long)]
        pooled: bool,
        /// Top-(m*N) multipliers for BR recall.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        m: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

const TRAIN_HELP: &str = "Writes <arm>.csv (run,step,total,cls_pos,cls_neg,reg_l1,reg_giou,last_layer,pearson,br_recall)\nfor every arm and summary.json. Run i trains on a scene drawn with seed --seed + i.";

fn thread_cap() -> CliResult {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Parse(format!(
            "{THREADS_ENV} must be a positive integer, got {raw:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Failed(e.to_string()))
}

fn run(cli: Cli) -> CliResult<(String, bool)> {
    thread_cap()?;
    let done = |s: String| Ok((s, true));
    match cli.command {
        Command::Match {
            scene,
            preds,
            k,
            layer,
            brute_force,
        } => done(commands::run_match(&scene, &preds, layer, k, brute_force)?),
        Command::Loss {
            scene,
            preds,
            config,
            variant,
            alpha,
            tau,
            k,
            no_prime_weighting,
        } => {
            let opts = LossOptions {
                config,
                variant,
                alpha,
                tau,
                k,
                no_prime_weighting,
            };
            done(commands::run_loss(&scene, &preds, &opts)?)
        }
        Command::Gradcheck {
            variant,
            seeds,
            seed,
            tol,
            layers,
            queries,
            classes,
            gts,
            k,
        } => {
            let variants = if variant == "all" {
                Variant::all()
            } else {
                vec![variant
                    .parse()
                    .map_err(|e: align_criterion::Error| CliError::Parse(e.to_string()))?]
            };
            commands::run_gradcheck(&GradcheckOptions {
                variants,
                seeds,
                seed,
                tol,
                layers,
                queries,
                classes,
                gts,
                k,
            })
        }
        Command::Train { config, seed, out } => {
            let cfg = commands::load_experiment(&config)?;
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
            let arms = [cfg.train_arm(seed)];
            done(commands::run_experiment("train", &cfg, &arms, seed, &out)?)
        }
        Command::Compare { config, seed, out } => {
            let cfg = commands::load_experiment(&config)?;
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
            let arms = cfg.compare_arms(seed).map_err(CliError::Parse)?;
            done(commands::run_experiment(
                "compare", &cfg, &arms, seed, &out,
            )?)
        }
        Command::Diagnose {
            preds,
            scene,
            layer,
            bins,
            pooled,
            m,
            out,
        } => done(commands::run_diagnose(&DiagnoseOptions {
            scenes: scene,
            preds,
            layer,
            bins,
            pooled,
            m,
            out,
        })?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok((text, ok)) => {
            let mut stdout = std::io::stdout().lock();
            if stdout.write_all(text.as_bytes()).is_err() {
                return ExitCode::from(1);
            }
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("align-criterion: {e}");
            ExitCode::from(e.code())
        }
    }
}
