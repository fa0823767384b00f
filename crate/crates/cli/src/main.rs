//! `imagedpo`: synthetic data, corruption, training, scoring and verification
//! for image-contrast preference optimization on a toy policy.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 a verification check failed.

mod commands;
mod config;
mod meta;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use imagedpo_core::evalharness::Setting;
use imagedpo_core::imageops::CorruptionKind;
use imagedpo_core::datagen::NegativeMode;
use imagedpo_core::trainer::Objective;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] imagedpo_core::Error),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(_) => 1,
            CliError::Verification(_) => 2,
        }
    }
}

/// Adds the offending flag to a library error.
pub(crate) fn flag_err(flag: &str) -> impl Fn(imagedpo_core::Error) -> CliError + '_ {
    move |e| CliError::Usage(format!("{flag}: {e}"))
}

#[derive(Debug, Parser)]
#[command(name = "imagedpo", version, about = "Image-contrast preference optimization on a toy vision-language policy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize scenes into triplets.jsonl + PGM images (and optionally a benchmark).
    Gen(GenArgs),
    /// Build chosen/rejected pairs from triplets.
    Pairs(PairsArgs),
    /// Apply one corruption to one PGM image.
    Corrupt(CorruptArgs),
    /// Likelihood pretraining of the policy on triplets.
    Pretrain(PretrainArgs),
    /// Preference fine-tuning against a frozen copy of the initial params.
    Train(TrainArgs),
    /// Score predictions (from a file or from the policy) on a benchmark.
    Eval(EvalArgs),
    /// Score the policy on a benchmark under increasing corruption.
    Sweep(SweepArgs),
    /// Check the RLHF upper bound on random discrete instances.
    VerifyBound(VerifyBoundArgs),
    /// Finite-difference check of an objective's analytic gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// World seed [default: world.seed = 7].
    #[arg(long)]
    seed: Option<u64>,
    /// Number of scenes [default: world.scenes = 500].
    #[arg(long)]
    scenes: Option<usize>,
    /// Benchmark groups written under OUT/bench, 0 for none [default: world.bench_groups = 300].
    #[arg(long)]
    bench_groups: Option<usize>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum PairMode {
    Image,
    Text,
    TextCorrupted,
}

#[derive(Debug, Args)]
struct PairsArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// Pair family to build.
    #[arg(long, value_enum)]
    mode: PairMode,
    /// Source triplets.jsonl.
    #[arg(long, value_name = "FILE")]
    triplets: PathBuf,
    /// JSON array of corruption specs [default: corruption.specs = blur 9 + 16x16 noise edit].
    #[arg(long, value_name = "FILE")]
    spec: Option<PathBuf>,
    /// Leading triplets used as sources [default: corruption.sources = 128].
    #[arg(long)]
    sources: Option<usize>,
    /// Pair seed [default: corruption.seed = 7].
    #[arg(long)]
    seed: Option<u64>,
    /// Wrong-answer selection for text pairs [default: corruption.negative_mode = random].
    #[arg(long, value_parser = parse_negative)]
    negative: Option<NegativeMode>,
    /// Params ranking wrong answers, required with --negative hard.
    #[arg(long, value_name = "FILE")]
    reference: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CorruptArgs {
    /// blur | pixelate | resize.
    #[arg(long, value_parser = parse_kind)]
    kind: CorruptionKind,
    /// Kernel size, block size or downscale factor; 0 and 1 are the identity.
    #[arg(long)]
    level: f64,
    /// Input PGM.
    #[arg(long = "in", value_name = "IMG")]
    input: PathBuf,
    /// Output PGM.
    #[arg(long, value_name = "IMG")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// Only mle_pretrain is accepted here.
    #[arg(long, value_parser = parse_objective, default_value = "mle_pretrain")]
    objective: Objective,
    /// Training triplets.jsonl.
    #[arg(long, value_name = "FILE")]
    triplets: PathBuf,
    /// Seed of the initial weights [default: train.init_seed = 7].
    #[arg(long)]
    init_seed: Option<u64>,
    /// Output directory (params.bin, params.json, history.csv, history.json).
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// image_dpo | text_dpo | text_dpo_corrupted.
    #[arg(long, value_parser = parse_objective)]
    objective: Objective,
    /// pairs_image.jsonl or pairs_text.jsonl.
    #[arg(long, value_name = "FILE")]
    pairs: PathBuf,
    /// Initial params; also the frozen reference.
    #[arg(long, value_name = "FILE")]
    init: PathBuf,
    /// Triplets whose clean accuracy is reported before and after training.
    #[arg(long, value_name = "FILE")]
    eval_triplets: Option<PathBuf>,
    /// Output directory (params.bin, params.json, history.csv, history.json).
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["preds", "params"])))]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// benchmark.jsonl.
    #[arg(long, value_name = "FILE")]
    bench: PathBuf,
    /// predictions.jsonl with {id, response} rows.
    #[arg(long, value_name = "FILE")]
    preds: Option<PathBuf>,
    /// Policy params answering the benchmark.
    #[arg(long, value_name = "FILE")]
    params: Option<PathBuf>,
    /// F (fact + question) or P (question only) [default: eval.setting = F].
    #[arg(long, value_parser = parse_setting)]
    setting: Option<Setting>,
    /// Report JSON.
    #[arg(long, value_name = "FILE", default_value = "score_report.json")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// blur | pixelate | resize.
    #[arg(long, value_parser = parse_kind)]
    kind: CorruptionKind,
    /// Ascending comma-separated levels [default: eval.blur_levels or eval.pixelate_levels].
    #[arg(long, value_parser = parse_f64_list)]
    levels: Option<F64List>,
    /// Policy params.
    #[arg(long, value_name = "FILE")]
    params: PathBuf,
    /// benchmark.jsonl.
    #[arg(long, value_name = "FILE")]
    bench: PathBuf,
    /// F or P [default: eval.setting = F].
    #[arg(long, value_parser = parse_setting)]
    setting: Option<Setting>,
    /// Table CSV; the full reports go next to it as JSON.
    #[arg(long, value_name = "FILE", default_value = "sweep.csv")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct VerifyBoundArgs {
    /// Random instances to check.
    #[arg(long, default_value_t = 1000)]
    instances: usize,
    /// Comma-separated β values, used round-robin (α = 2β).
    #[arg(long, value_parser = parse_f64_list, default_value = "0.1,1,5")]
    beta_list: F64List,
    #[arg(long, default_value_t = 3)]
    seed: u64,
    /// Report JSON.
    #[arg(long, value_name = "FILE", default_value = "bound_report.json")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// image_dpo | text_dpo | text_dpo_corrupted | mle_pretrain.
    #[arg(long, value_parser = parse_objective)]
    objective: Objective,
    /// Random draws to check.
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = imagedpo_core::verification::FD_STEP)]
    step: f64,
    /// Report JSON.
    #[arg(long, value_name = "FILE", default_value = "gradcheck_report.json")]
    out: PathBuf,
}

/// Comma-separated reals.
#[derive(Debug, Clone)]
pub(crate) struct F64List(pub Vec<f64>);

fn parse_f64_list(s: &str) -> Result<F64List, String> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format!("{t:?} is not a finite number"))
        })
        .collect::<Result<Vec<_>, _>>()
        .map(F64List)
}

fn parse_kind(s: &str) -> Result<CorruptionKind, String> {
    s.parse().map_err(|e: imagedpo_core::Error| e.to_string())
}

fn parse_objective(s: &str) -> Result<Objective, String> {
    s.parse().map_err(|e: imagedpo_core::Error| e.to_string())
}

fn parse_setting(s: &str) -> Result<Setting, String> {
    s.parse().map_err(|e: imagedpo_core::Error| e.to_string())
}

fn parse_negative(s: &str) -> Result<NegativeMode, String> {
    s.parse().map_err(|e: imagedpo_core::Error| e.to_string())
}

fn init_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("IMAGEDPO_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| CliError::Usage(format!("IMAGEDPO_THREADS: {v:?} is not a positive integer")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("IMAGEDPO_THREADS: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli, argv: Vec<String>) -> Result<(), CliError> {
    init_threads()?;
    use commands as c;
    match cli.command {
        Command::Gen(a) => c::gen(a, &argv),
        Command::Pairs(a) => c::pairs(a, &argv),
        Command::Corrupt(a) => c::corrupt(a, &argv),
        Command::Pretrain(a) => c::pretrain(a, &argv),
        Command::Train(a) => c::train(a, &argv),
        Command::Eval(a) => c::eval(a, &argv),
        Command::Sweep(a) => c::sweep(a, &argv),
        Command::VerifyBound(a) => c::verify_bound(a, &argv),
        Command::Gradcheck(a) => c::gradcheck(a, &argv),
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli, argv.into_iter().skip(1).collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn list_parsing() {
        assert_eq!(parse_f64_list("0.1, 1,5").unwrap().0, vec![0.1, 1.0, 5.0]);
        assert!(parse_f64_list("1,,2").is_err());
        assert!(parse_f64_list("nan").is_err());
    }
}
