//! `harmonizer`: command-line front end for the harmonization toolkit.
//!
//! Exit codes: 0 on success, 1 for usage or validation errors, 2 for data
//! errors (unreadable or inconsistent inputs).

mod commands;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use failure::Failure;

#[derive(Debug, Parser)]
#[command(
    name = "harmonizer",
    version,
    about = "Align model feature importance with human maps"
)]
pub struct Cli {
    /// Master seed; every command is deterministic given it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Caps data-parallel sections (default: available parallelism).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic spurious-cue dataset.
    Synth(SynthArgs),
    /// Train a classifier, optionally with the alignment term.
    Train(TrainArgs),
    /// Split-half inter-rater ceiling.
    Ceiling(CeilingArgs),
    /// Ceiling-normalized rank correlation of model and human maps.
    EvaluateAlignment(EvaluateArgs),
    /// Render feature-revealing stimuli and their manifest.
    GenerateStimuli(StimuliArgs),
    /// Decision curves from response logs and/or model decisions.
    DecisionCurves(CurvesArgs),
    /// Heatmaps and accuracy/alignment scatter for trained models.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON dataset spec; flags below override its fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    #[arg(long)]
    pub raters: Option<usize>,
    /// Probability that the corner cue names the true class.
    #[arg(long)]
    pub rho: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON or `key = value` trainer config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub pyramid_levels: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Channels of the toy convnet.
    #[arg(long, default_value_t = 4)]
    pub width: usize,
    /// Rescale lambda1 so the alignment term matches cross entropy on the
    /// first batch at initialization.
    #[arg(long)]
    pub calibrate: bool,
}

#[derive(Debug, Args)]
pub struct CeilingArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset directory (raters of the validation split).
    #[arg(long, conflicts_with = "raters")]
    pub data: Option<PathBuf>,
    /// Directory with one sub-directory of `.fmap` rater maps per image.
    #[arg(long)]
    pub raters: Option<PathBuf>,
    #[arg(long, default_value_t = harmonizer_core::metrics::DEFAULT_SPLITS)]
    pub splits: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset directory: human maps are rater means, and the ceiling comes
    /// from the same raters.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory of human `.fmap` maps (id = file stem).
    #[arg(long)]
    pub human_maps: Option<PathBuf>,
    /// Directory of per-image rater sub-directories for the ceiling.
    #[arg(long)]
    pub raters: Option<PathBuf>,
    /// Use this ceiling instead of estimating one.
    #[arg(long)]
    pub ceiling: Option<f64>,
    /// Checkpoint whose saliency maps are scored (needs `--data`).
    #[arg(long, conflicts_with = "model_maps")]
    pub model: Option<PathBuf>,
    /// Directory of model `.fmap` maps.
    #[arg(long)]
    pub model_maps: Option<PathBuf>,
    /// Downscaling factor applied to both maps before scoring.
    #[arg(long, default_value_t = 1, value_parser = parse_scale)]
    pub scale: usize,
    #[arg(long, default_value_t = harmonizer_core::metrics::DEFAULT_SPLITS)]
    pub splits: usize,
    #[arg(long, default_value_t = harmonizer_core::metrics::DEFAULT_BOOTSTRAP)]
    pub bootstrap: usize,
    /// Also write the scored model maps under `<out>/maps`.
    #[arg(long)]
    pub save_maps: bool,
}

#[derive(Debug, Args)]
pub struct StimuliArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of reveal levels.
    #[arg(long, default_value_t = harmonizer_core::stimuli::DEFAULT_LEVELS)]
    pub levels: usize,
    /// Importance maps to reveal from (default: the dataset's human maps).
    #[arg(long)]
    pub maps: Option<PathBuf>,
    /// Growth temperature as a fraction of each map's peak; 0 is greedy.
    #[arg(long, default_value_t = 0.1)]
    pub tau: f64,
    /// Output side in pixels; 0 keeps the source resolution.
    #[arg(long, default_value_t = harmonizer_core::stimuli::DEFAULT_OUTPUT_SIZE)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct CurvesArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Human response logs (line-delimited JSON); repeatable.
    #[arg(long)]
    pub responses: Vec<PathBuf>,
    /// Model checkpoint as `[name=]path`; repeatable.
    #[arg(long)]
    pub model: Vec<String>,
    /// Dataset directory supplying the animal class set for models.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Method::Spearman)]
    pub method: Method,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Spearman,
    AreaBetween,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Model checkpoint as `[name=]path`; repeatable.
    #[arg(long, required = true)]
    pub model: Vec<String>,
    /// `decisions.json` from `decision-curves`, to add decision alignment.
    #[arg(long)]
    pub decisions: Option<PathBuf>,
    /// Validation images rendered as heatmaps.
    #[arg(long, default_value_t = 4)]
    pub heatmaps: usize,
    /// Blur applied to heatmaps, in source pixels.
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 1, value_parser = parse_scale)]
    pub scale: usize,
    #[arg(long, default_value_t = harmonizer_core::metrics::DEFAULT_SPLITS)]
    pub splits: usize,
}

fn parse_scale(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v @ (1 | 4 | 16)) => Ok(v),
        _ => Err(format!("scale must be 1, 4 or 16, got {s:?}")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(summary) => {
            print_summary(&summary, cli.format);
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: &Cli) -> Result<serde_json::Value, Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Validation("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Validation(e.to_string()))?;
    }
    match &cli.command {
        Command::Synth(a) => commands::synth(a, cli.seed),
        Command::Train(a) => commands::train(a, cli.seed),
        Command::Ceiling(a) => commands::ceiling(a, cli.seed),
        Command::EvaluateAlignment(a) => commands::evaluate(a, cli.seed),
        Command::GenerateStimuli(a) => commands::stimuli(a, cli.seed),
        Command::DecisionCurves(a) => commands::curves(a),
        Command::Report(a) => commands::report(a, cli.seed),
    }
}

fn print_summary(v: &serde_json::Value, format: Format) {
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(v).expect("summary serializes")),
        Format::Text => {
            if let Some(obj) = v.as_object() {
                for (k, val) in obj {
                    match val {
                        serde_json::Value::String(s) => println!("{k}: {s}"),
                        other => println!("{k}: {other}"),
                    }
                }
            }
        }
    }
}
