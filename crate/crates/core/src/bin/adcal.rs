use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use adcal::cli::{
    cmd_apply_calib, cmd_cluster, cmd_evaluate, cmd_fit_calib, cmd_loss_eval, cmd_reliability,
    cmd_simulate, format_report_line, CommonOpts,
};
use adcal::evalmatch::ZeroIouGuard;
use adcal::loss::BackgroundMode;
use adcal::metrics::BinKind;
use adcal::model::CertaintySource;
use adcal::posthoc::RenormMode;

/// Evaluate and calibrate probabilistic object detectors against
/// multi-annotator agreement, without ground truth.
#[derive(Parser)]
#[command(name = "adcal", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SharedOpts {
    /// Output directory; all files of the run are written here.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Admission IoU for annotation clustering.
    #[arg(long, default_value_t = 0.5)]
    min_iou: f64,
    /// Confidence clamp for interval and variance computations.
    #[arg(long, default_value_t = 0.999)]
    gamma: f64,
    /// Regression loss weight.
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    /// Number of reliability bins.
    #[arg(long, default_value_t = 10)]
    bins: usize,
    /// Variance floor inside the Mahalanobis cost.
    #[arg(long, default_value_t = 1e-6)]
    var_floor: f64,
    /// Override the dataset's certainty source.
    #[arg(long, value_enum)]
    certainty_source: Option<CertaintySourceArg>,
    /// Drop predictions below this certainty before evaluating.
    #[arg(long)]
    min_certainty: Option<f64>,
    /// Seed override (simulate only).
    #[arg(long)]
    seed: Option<u64>,
    /// How zero-IoU assignments are avoided.
    #[arg(long, value_enum, default_value_t = GuardArg::Void)]
    zero_iou_guard: GuardArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum CertaintySourceArg {
    Foreground,
    Objectness,
    MaxClass,
}

#[derive(Clone, Copy, ValueEnum)]
enum GuardArg {
    /// Assign on raw costs, then void zero-overlap pairs.
    Void,
    /// Put a prohibitive cost on zero-overlap pairs up front.
    Forbid,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    ClassLabel,
    BoundingBox,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Keep,
    Drop,
    Objectness,
}

#[derive(Clone, Copy, ValueEnum)]
enum RenormArg {
    Proportional,
    PrintedFormula,
}

#[derive(Subcommand)]
enum Command {
    /// Cluster multi-annotator annotations and report agreement.
    Cluster {
        #[arg(long)]
        annotations: PathBuf,
        #[command(flatten)]
        opts: SharedOpts,
    },
    /// Compute the calibration metrics and reliability data.
    Evaluate {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        /// Include the per-image breakdown in metrics.json.
        #[arg(long)]
        per_image: bool,
        /// Also write the per-image TP/FP/FN index dump.
        #[arg(long)]
        dump_matches: bool,
        #[command(flatten)]
        opts: SharedOpts,
    },
    /// Fit the isotonic calibrator bank on a held-out validation split.
    FitCalib {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        /// Interpolate variance maps on a log input scale.
        #[arg(long)]
        var_log_space: bool,
        #[command(flatten)]
        opts: SharedOpts,
    },
    /// Apply a fitted calibrator bank to predictions.
    ApplyCalib {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        /// Renormalization of the non-predicted entries.
        #[arg(long, value_enum, default_value_t = RenormArg::Proportional)]
        renorm: RenormArg,
        #[command(flatten)]
        opts: SharedOpts,
    },
    /// Generate a synthetic multi-annotator dataset.
    Simulate {
        /// Simulation config JSON.
        #[arg(long)]
        config: PathBuf,
        /// Also emit synthetic detector predictions.
        #[arg(long)]
        emit_predictions: bool,
        /// Confidence exponent for the synthetic detector (1 = oracle).
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        /// Variance scale for the synthetic detector (1 = oracle).
        #[arg(long, default_value_t = 1.0)]
        var_scale: f64,
        #[command(flatten)]
        opts: SharedOpts,
    },
    /// Evaluate the train-time loss on an explicit pairing.
    LossEval {
        #[arg(long)]
        clusters: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        pairing: PathBuf,
        /// Background handling of the classification term.
        #[arg(long, value_enum, default_value_t = ModeArg::Keep)]
        background_mode: ModeArg,
        #[command(flatten)]
        opts: SharedOpts,
    },
    /// Reliability-diagram bin data for one kind.
    Reliability {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, value_enum, default_value_t = KindArg::ClassLabel)]
        kind: KindArg,
        #[command(flatten)]
        opts: SharedOpts,
    },
}

fn common(shared: &SharedOpts) -> CommonOpts {
    CommonOpts {
        min_iou: shared.min_iou,
        gamma: shared.gamma,
        lambda: shared.lambda,
        bins: shared.bins,
        var_floor: shared.var_floor,
        zero_iou_guard: match shared.zero_iou_guard {
            GuardArg::Void => ZeroIouGuard::VoidAfterAssignment,
            GuardArg::Forbid => ZeroIouGuard::ForbidInCost,
        },
        certainty_source: shared.certainty_source.map(|s| match s {
            CertaintySourceArg::Foreground => CertaintySource::Foreground,
            CertaintySourceArg::Objectness => CertaintySource::Objectness,
            CertaintySourceArg::MaxClass => CertaintySource::MaxClass,
        }),
        min_certainty: shared.min_certainty,
        seed: shared.seed,
    }
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Cluster { annotations, opts } => {
            let common = common(&opts);
            let summary = cmd_cluster(&annotations, &opts.out, &common)?;
            println!(
                "{} clusters across {} images",
                summary.num_clusters, summary.num_images
            );
            for (class_id, count) in summary.per_class_members.iter().enumerate().skip(1) {
                if *count > 0 {
                    println!("  class {class_id}: {count} member annotations");
                }
            }
            match summary.alpha {
                Some(alpha) => println!("Krippendorff alpha: {alpha:.4}"),
                None => println!("Krippendorff alpha: insufficient data"),
            }
        }
        Command::Evaluate {
            annotations,
            predictions,
            per_image,
            dump_matches,
            opts,
        } => {
            let common = common(&opts);
            let report = cmd_evaluate(
                &annotations,
                &predictions,
                &opts.out,
                &common,
                per_image,
                dump_matches,
            )?;
            println!("{}", format_report_line(&report));
        }
        Command::FitCalib {
            annotations,
            predictions,
            var_log_space,
            opts,
        } => {
            let common = common(&opts);
            let bank = cmd_fit_calib(&annotations, &predictions, &opts.out, &common, var_log_space)?;
            println!(
                "fitted {} class calibrators + 4 variance calibrators on {} pairs",
                bank.classes.len(),
                bank.fingerprint.num_tp_pairs
            );
            if !bank.fingerprint.identity_classes.is_empty() {
                println!(
                    "  classes without training points (identity): {:?}",
                    bank.fingerprint.identity_classes
                );
            }
        }
        Command::ApplyCalib {
            bank,
            predictions,
            renorm,
            opts,
        } => {
            let common = common(&opts);
            let renorm = match renorm {
                RenormArg::Proportional => RenormMode::Proportional,
                RenormArg::PrintedFormula => RenormMode::PrintedFormula,
            };
            let n = cmd_apply_calib(&bank, &predictions, &opts.out, &common, renorm)?;
            println!("calibrated {n} predictions");
        }
        Command::Simulate {
            config,
            emit_predictions,
            beta,
            var_scale,
            opts,
        } => {
            let common = common(&opts);
            let (images, preds) =
                cmd_simulate(&config, &opts.out, &common, emit_predictions, beta, var_scale)?;
            if emit_predictions {
                println!("simulated {images} images and {preds} predictions");
            } else {
                println!("simulated {images} images");
            }
        }
        Command::LossEval {
            clusters,
            predictions,
            pairing,
            background_mode,
            opts,
        } => {
            let common = common(&opts);
            let mode = match background_mode {
                ModeArg::Keep => BackgroundMode::Keep,
                ModeArg::Drop => BackgroundMode::Drop,
                ModeArg::Objectness => BackgroundMode::Objectness,
            };
            let breakdown =
                cmd_loss_eval(&clusters, &predictions, &pairing, &opts.out, &common, mode)?;
            println!(
                "l_total {:.6}  l_cls {:.6}  l_reg {:.6}  ({} pairs, lambda {})",
                breakdown.l_total,
                breakdown.l_cls,
                breakdown.l_reg,
                breakdown.per_pair.len(),
                breakdown.lambda
            );
        }
        Command::Reliability {
            annotations,
            predictions,
            kind,
            opts,
        } => {
            let common = common(&opts);
            let kind = match kind {
                KindArg::ClassLabel => BinKind::ClassLabel,
                KindArg::BoundingBox => BinKind::BoundingBox,
            };
            cmd_reliability(&annotations, &predictions, &opts.out, &common, kind)?;
            println!("wrote reliability.csv");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
