//! `tdc`: targeted dataset curation from the command line.
//!
//! Exit codes: 0 success, 2 config error, 3 data validation error, 4 stage failure.

mod commands;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "tdc", version, about = "Targeted dataset curation: retrieve, filter, balance and plan synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert JSONL records into a corpus shard.
    Ingest(IngestArgs),
    /// Check shards for format and invariant violations.
    Validate(ValidateArgs),
    /// Build and save an ANN index over one embedding column.
    Index(IndexArgs),
    /// Run only the retrieve stage.
    Retrieve(RetrieveArgs),
    /// Score manifest items by image-text similarity.
    Score(ScoreArgs),
    /// Keep the top fraction of items by score.
    Filter(FilterArgs),
    /// Drop items near-duplicate to an eval set.
    Dedup(DedupArgs),
    /// Cap the item count of every class.
    Balance(BalanceArgs),
    /// Draw a seeded uniform subsample.
    Subsample(SubsampleArgs),
    /// Combine a retrieved manifest with synthetic items.
    Mix(MixArgs),
    /// Emit LLM caption-prompt jobs.
    PlanCaptions(PlanCaptionsArgs),
    /// Emit class-balanced text-to-image jobs.
    PlanGeneration(PlanGenerationArgs),
    /// Emit img2img perturbation jobs over a manifest.
    PlanPerturbation(PlanPerturbationArgs),
    /// Execute a profile end to end.
    Run(RunArgs),
    /// Summarize a manifest.
    Stats(StatsArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// JSONL file with record_id, caption, image_embedding and optional url, text_embedding, nsfw.
    #[arg(long)]
    input: PathBuf,
    /// Output shard, or the stem of numbered shards with --shard-size.
    #[arg(long)]
    output: PathBuf,
    /// Records per shard; writes `<stem>-NNNNN.tdcs` plus `<stem>.list`.
    #[arg(long)]
    shard_size: Option<usize>,
}

#[derive(Args)]
struct ValidateArgs {
    /// Shards or shard-list files.
    #[arg(required = true)]
    paths: Vec<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ColumnArg {
    Image,
    Text,
}

#[derive(Clone, Copy, ValueEnum)]
enum IndexKindArg {
    Flat,
    Ivf,
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long, required = true, num_args = 1..)]
    corpus: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "image")]
    column: ColumnArg,
    #[arg(long, value_enum, default_value = "ivf")]
    kind: IndexKindArg,
    /// Defaults to ⌈√n⌉.
    #[arg(long)]
    nlist: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = tdc_core::ann::kmeans::DEFAULT_ITERS)]
    iters: u32,
    #[arg(long)]
    output: PathBuf,
}

/// Pipeline configuration: an optional config file, `--set key=value`
/// overrides, and the common keys as flags.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set keep_fraction=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    profile: Option<String>,
    #[arg(long, num_args = 1..)]
    corpus: Vec<PathBuf>,
    #[arg(long)]
    classes: Option<PathBuf>,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<String>,
    /// Query-text embeddings as JSONL.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Embedding service URL; TDC_EMBED_ENDPOINT is used when absent.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RetrieveArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct ProviderArgs {
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Embedding service URL; TDC_EMBED_ENDPOINT is used when absent.
    #[arg(long)]
    endpoint: Option<String>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    corpus: Vec<PathBuf>,
    #[arg(long)]
    classes: PathBuf,
    #[arg(long)]
    templates: PathBuf,
    #[command(flatten)]
    provider: ProviderArgs,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Global,
    PerClass,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = tdc_core::curation::DEFAULT_KEEP_FRACTION)]
    keep_fraction: f64,
    #[arg(long, value_enum, default_value = "global")]
    scope: ScopeArg,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct DedupArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    corpus: Vec<PathBuf>,
    /// Eval-set shards (image column).
    #[arg(long, required = true, num_args = 1..)]
    eval: Vec<PathBuf>,
    #[arg(long, default_value_t = tdc_core::curation::DEFAULT_DEDUP_THRESHOLD)]
    threshold: f32,
    #[arg(long)]
    output: PathBuf,
    /// Where to write the removal report (TSV).
    #[arg(long)]
    removals: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BalanceArg {
    TopScore,
    Random,
}

#[derive(Args)]
struct BalanceArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = tdc_core::curation::DEFAULT_CLASS_CAP)]
    cap: usize,
    #[arg(long, value_enum, default_value = "top-score")]
    mode: BalanceArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct SubsampleArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct MixArgs {
    #[arg(long)]
    retrieved: PathBuf,
    #[arg(long)]
    synthetic: PathBuf,
    #[arg(long)]
    n_synth: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum CaptionKindArg {
    Plain,
    Background,
    Relation,
    Mixed,
}

#[derive(Args)]
struct PlanCaptionsArgs {
    #[arg(long)]
    classes: PathBuf,
    #[arg(long, value_enum, default_value = "mixed")]
    kind: CaptionKindArg,
    #[arg(long)]
    count: usize,
    /// Attribute pool for a single background or relation kind.
    #[arg(long)]
    pool: Option<PathBuf>,
    /// In-context examples for a single kind.
    #[arg(long)]
    examples: Option<PathBuf>,
    /// Background pool for mixed prompting.
    #[arg(long)]
    backgrounds: Option<PathBuf>,
    /// Relation pool for mixed prompting.
    #[arg(long)]
    relations: Option<PathBuf>,
    /// plain,background,relation weights for mixed prompting.
    #[arg(long, default_value = "1,1,1")]
    ratios: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
    /// Split the jobs into this many files under --output (a directory).
    #[arg(long)]
    shards: Option<usize>,
}

#[derive(Args)]
struct PlanGenerationArgs {
    #[arg(long)]
    classes: PathBuf,
    /// Filled caption-prompt job file, or `class_index TAB caption` lines.
    #[arg(long)]
    captions: PathBuf,
    #[arg(long)]
    per_class: usize,
    #[arg(long)]
    allow_repeat: bool,
    #[arg(long)]
    output: PathBuf,
    /// Also write the manifest of the planned synthetic images.
    #[arg(long)]
    manifest_out: Option<PathBuf>,
    #[arg(long, default_value_t = tdc_core::plan::SYNTHETIC_ID_OFFSET)]
    id_offset: u64,
    #[arg(long)]
    shards: Option<usize>,
}

#[derive(Args)]
struct PlanPerturbationArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    classes: PathBuf,
    /// Comma-separated γ values; defaults to 0.1,0.2,…,1.0.
    #[arg(long)]
    gammas: Option<String>,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    shards: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Profile file replacing the built-in profiles.
    #[arg(long)]
    profiles: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Class names for the per-class table.
    #[arg(long)]
    classes: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(a) => commands::ingest(a),
        Command::Validate(a) => commands::validate(a),
        Command::Index(a) => commands::index(a),
        Command::Retrieve(a) => commands::retrieve(a),
        Command::Score(a) => commands::score(a),
        Command::Filter(a) => commands::filter(a),
        Command::Dedup(a) => commands::dedup(a),
        Command::Balance(a) => commands::balance(a),
        Command::Subsample(a) => commands::subsample(a),
        Command::Mix(a) => commands::mix(a),
        Command::PlanCaptions(a) => commands::plan_captions(a),
        Command::PlanGeneration(a) => commands::plan_generation(a),
        Command::PlanPerturbation(a) => commands::plan_perturbation(a),
        Command::Run(a) => commands::run(a),
        Command::Stats(a) => commands::stats(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
