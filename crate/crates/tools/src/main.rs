//! `laneid` — dataset generation, training, evaluation and sweeps.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use laneid_core::brightness::BrightnessConfig;
use laneid_core::decision::DecisionCriterion;
use laneid_core::synth::Profile;

use laneid_tools::dataset::{load_corpus, make_corpus};
use laneid_tools::evaluator::{
    brightness_sweep_csv, decision_sweep_csv, evaluate, infer_to_jsonl, sweep_brightness,
    sweep_decision, EvalOptions,
};
use laneid_tools::runconfig::RunConfig;
use laneid_tools::trainer::train;
use laneid_tools::{checkpoint, Error};

#[derive(Parser)]
#[command(name = "laneid", about = "Dual-convention lane ID estimation toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Gen {
        /// train | test | tunnel-test
        #[arg(long)]
        profile: String,
        /// Number of sequences.
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        /// Frames per sequence.
        #[arg(long, default_value_t = 16)]
        frames: usize,
    },
    /// Train a model from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a corpus; prints a JSON summary.
    Eval {
        #[command(flatten)]
        common: EvalArgs,
    },
    /// Evaluate under no adjustment plus each brightness threshold.
    SweepBrightness {
        #[command(flatten)]
        common: EvalArgs,
        /// Comma-separated thresholds.
        #[arg(long, default_value = "100,130,150,170", value_delimiter = ',')]
        thresholds: Vec<f64>,
        /// Optional CSV output path (CSV always goes to stdout too).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate final accuracy under all five decision criteria.
    SweepDecision {
        #[command(flatten)]
        common: EvalArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-frame fused estimates as JSON lines.
    Infer {
        #[command(flatten)]
        common: EvalArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Corpus directory.
    #[arg(long)]
    data: PathBuf,
    /// off | on | <threshold> — brightness adjustment for evaluation.
    #[arg(long, default_value = "off")]
    brightness: String,
    /// max | max-m | e | max-e | z-score
    #[arg(long, default_value = "max-m")]
    criterion: String,
    /// neg scores -entropy (sharper is better), pos scores raw entropy.
    #[arg(long, default_value = "neg")]
    entropy_sign: String,
}

fn parse_brightness(s: &str) -> Result<BrightnessConfig, Error> {
    match s {
        "off" => Ok(BrightnessConfig::disabled()),
        "on" => Ok(BrightnessConfig::unthresholded()),
        other => other
            .parse::<f64>()
            .map(BrightnessConfig::with_threshold)
            .map_err(|_| Error::Config {
                detail: format!("--brightness wants off | on | <number>, got {other:?}"),
            }),
    }
}

fn parse_eval_args(args: &EvalArgs) -> Result<EvalOptions, Error> {
    let brightness = parse_brightness(&args.brightness)?;
    let criterion: DecisionCriterion =
        args.criterion.parse().map_err(|e: String| Error::Config { detail: e })?;
    let flip_entropy = match args.entropy_sign.as_str() {
        "neg" => false,
        "pos" => true,
        other => {
            return Err(Error::Config {
                detail: format!("--entropy-sign wants neg | pos, got {other:?}"),
            })
        }
    };
    Ok(EvalOptions { brightness, criterion, flip_entropy })
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::Gen { profile, count, seed, out, width, height, frames } => {
            let profile: Profile = profile.parse().map_err(|e: String| Error::Config { detail: e })?;
            let manifest = make_corpus(profile, count, seed, width, height, frames, &out)?;
            println!(
                "wrote {} {} sequences ({}x{}, {} frames each) to {}",
                manifest.count,
                manifest.profile,
                manifest.width,
                manifest.height,
                manifest.frames_per_sequence,
                out.display()
            );
        }
        Command::Train { config, out } => {
            let config = RunConfig::load(&config)?;
            let summary = train(&config, &out)?;
            println!(
                "trained {} iterations, final loss {:.6}, checkpoint {}, log {}",
                summary.iterations,
                summary.final_loss,
                summary.checkpoint.display(),
                summary.log.display()
            );
        }
        Command::Eval { common } => {
            let opts = parse_eval_args(&common)?;
            let (config, params) = checkpoint::load_checkpoint(&common.ckpt)?;
            let corpus = load_corpus(&common.data)?;
            let metrics = evaluate(&params, &config, &corpus, &opts)?;
            let summary = serde_json::to_string_pretty(&metrics.summary())
                .map_err(|source| Error::Json { path: common.data.clone(), source })?;
            println!("{summary}");
        }
        Command::SweepBrightness { common, thresholds, out } => {
            let opts = parse_eval_args(&common)?;
            let (config, params) = checkpoint::load_checkpoint(&common.ckpt)?;
            let corpus = load_corpus(&common.data)?;
            let rows = sweep_brightness(&params, &config, &corpus, &thresholds, opts.criterion)?;
            let csv = brightness_sweep_csv(config.variant.name(), &rows);
            print!("{csv}");
            if let Some(path) = out {
                std::fs::write(&path, &csv)
                    .map_err(|source| Error::Io { path: path.clone(), source })?;
            }
        }
        Command::SweepDecision { common, out } => {
            let opts = parse_eval_args(&common)?;
            let (config, params) = checkpoint::load_checkpoint(&common.ckpt)?;
            let corpus = load_corpus(&common.data)?;
            let sweep = sweep_decision(&params, &config, &corpus, &opts.brightness)?;
            let csv = decision_sweep_csv(config.variant.name(), &sweep);
            print!("{csv}");
            if let Some(path) = out {
                std::fs::write(&path, &csv)
                    .map_err(|source| Error::Io { path: path.clone(), source })?;
            }
        }
        Command::Infer { common, out } => {
            let opts = parse_eval_args(&common)?;
            let (config, params) = checkpoint::load_checkpoint(&common.ckpt)?;
            let corpus = load_corpus(&common.data)?;
            infer_to_jsonl(&params, &config, &corpus, &opts, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
