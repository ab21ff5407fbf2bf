//! `xasm`: the block-similarity pipeline as subcommands.
//!
//! Exit status is 0 on success, 1 on a usage error and 2 when the input data
//! is rejected.

mod cmd;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use xasm::corpus::{Arch, OptLevel};
use xasm::encoder::CellKind;

#[derive(Parser, Serialize)]
#[command(name = "xasm", version, about = "Cross-architecture basic-block similarity and component search")]
struct Cli {
    /// Seed for every random choice in the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads. 1 is the reproducible reference mode.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Serialize)]
enum Command {
    /// Normalize a raw corpus.
    Normalize(NormalizeArgs),
    /// Vocabulary growth and out-of-vocabulary rates, raw vs normalized.
    Vocab(VocabArgs),
    /// Train instruction embeddings for one architecture.
    TrainEmbed(TrainEmbedArgs),
    /// Build similar and dissimilar block pairs and split them.
    Pairs(PairsArgs),
    /// Train the siamese block encoder.
    TrainEncoder(TrainEncoderArgs),
    /// Encode every block of a corpus.
    Embed(EmbedArgs),
    /// Build a block-embedding index.
    Index(IndexArgs),
    /// Look up similar blocks for each block of a query corpus.
    QueryBlock(QueryBlockArgs),
    /// Score how well a target CFG contains a query component.
    QueryComponent(QueryComponentArgs),
    /// ROC curve and AUC for scored pairs.
    Eval(EvalArgs),
    /// Compare analytic and numeric encoder gradients.
    Gradcheck(GradcheckArgs),
    /// Generate template programs for both architectures.
    #[command(subcommand)]
    Synth(SynthCommand),
}

#[derive(Args, Serialize)]
struct NormalizeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Keep only functions of this architecture.
    #[arg(long)]
    arch: Option<Arch>,
    /// Keep only functions at this optimization level.
    #[arg(long)]
    opt: Option<OptLevel>,
}

#[derive(Args, Serialize)]
struct VocabArgs {
    /// Raw corpus.
    #[arg(long)]
    input: PathBuf,
    /// Held-out raw corpus. Without it the last half of the functions is held out.
    #[arg(long)]
    heldout: Option<PathBuf>,
    #[arg(long)]
    arch: Option<Arch>,
    #[arg(long)]
    opt: Option<OptLevel>,
    /// Points on the growth curve.
    #[arg(long, default_value_t = 10)]
    parts: usize,
    /// JSON report; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct TrainEmbedArgs {
    /// Normalized single-architecture corpus.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    arch: Option<Arch>,
    #[arg(long)]
    opt: Option<OptLevel>,
    #[arg(long, default_value_t = 100)]
    dims_instr: usize,
    #[arg(long, default_value_t = 2)]
    window: usize,
    #[arg(long, default_value_t = 5)]
    negatives: usize,
    #[arg(long, default_value_t = 1e-5)]
    subsample: f64,
    #[arg(long, default_value_t = 0)]
    min_count: u64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 0.025)]
    lr: f64,
    /// Also write the vectors as tab-separated text.
    #[arg(long)]
    tsv: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct PairsArgs {
    #[arg(long)]
    x86: PathBuf,
    #[arg(long)]
    arm: PathBuf,
    /// Receives train.jsonl, val.jsonl and test.jsonl.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    opt: Option<OptLevel>,
    /// Keep at most this many similar pairs.
    #[arg(long)]
    similar: Option<usize>,
    /// Dissimilar pairs to draw; defaults to the similar count.
    #[arg(long)]
    dissimilar: Option<usize>,
    /// Instruction n-gram length for the dissimilarity test.
    #[arg(long, default_value_t = 4)]
    ngram: usize,
    /// Pairs at or above this n-gram similarity are not dissimilar.
    #[arg(long, default_value_t = 0.5)]
    theta_dissim: f64,
    #[arg(long, default_value_t = 50)]
    attempts: usize,
    /// Train, validation and test fractions.
    #[arg(long, default_value = "0.8,0.1,0.1", value_parser = parse_fractions)]
    split: [f64; 3],
}

#[derive(Args, Serialize)]
struct ModelArgs {
    /// Encoder parameters from `train-encoder`.
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    emb_x86: PathBuf,
    #[arg(long)]
    emb_arm: PathBuf,
}

#[derive(Args, Serialize)]
struct TrainEncoderArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    emb_x86: PathBuf,
    #[arg(long)]
    emb_arm: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Per-epoch CSV; defaults to `<output>.history.csv`.
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long, default_value_t = CellKind::Lstm)]
    cell: CellKind,
    /// Use `c = i*g + f*g` instead of the usual LSTM memory update.
    #[arg(long)]
    candidate_only: bool,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 50)]
    dims_block: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    /// Stop after this many epochs without a better validation AUC.
    #[arg(long, default_value_t = 20)]
    patience: usize,
}

#[derive(Args, Serialize)]
struct EmbedArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Normalized corpus.
    #[arg(long)]
    input: PathBuf,
    /// JSON lines, one block per line.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Serialize)]
struct IndexArgs {
    /// Output of `embed`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 8)]
    tables: usize,
    #[arg(long, default_value_t = 12)]
    bits: usize,
}

#[derive(Args, Serialize)]
struct QueryBlockArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    index: PathBuf,
    /// Normalized corpus of query blocks.
    #[arg(long)]
    query: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    theta_sebb: f64,
    /// Scan every stored block instead of the hash buckets.
    #[arg(long)]
    exact_scan: bool,
    /// Keep the best `top` matches per block.
    #[arg(long)]
    top: Option<usize>,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Serialize)]
struct QueryComponentArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Query CFG as JSON.
    #[arg(long)]
    query: PathBuf,
    /// Target CFG as JSON.
    #[arg(long)]
    target: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    theta_sebb: f64,
    #[arg(long, default_value_t = 0.8)]
    coverage: f64,
    #[arg(long)]
    exact_scan: bool,
    /// Visits allowed per target node within one walk.
    #[arg(long, default_value_t = 2)]
    node_visit_limit: usize,
    /// Query blocks tried when looking for a start block.
    #[arg(long)]
    max_blocks_tried: Option<usize>,
    /// Give up the walk search for one query path after this many
    /// expansions. 0 searches exhaustively.
    #[arg(long, default_value_t = 1_000_000)]
    max_expansions: u64,
    #[arg(long, default_value_t = 8)]
    tables: usize,
    #[arg(long, default_value_t = 12)]
    bits: usize,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    /// CSV of `score,label` or `score,label,len_a,len_b`.
    #[arg(long, conflicts_with = "pairs", required_unless_present = "pairs")]
    scores: Option<PathBuf>,
    /// Labeled pairs scored with the model.
    #[arg(long, requires_all = ["params", "emb_x86", "emb_arm"])]
    pairs: Option<PathBuf>,
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    emb_x86: Option<PathBuf>,
    #[arg(long)]
    emb_arm: Option<PathBuf>,
    /// ROC curve CSV.
    #[arg(long)]
    curve: Option<PathBuf>,
    /// JSON report.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    small_max: usize,
    #[arg(long, default_value_t = 20)]
    large_min: usize,
}

#[derive(Args, Serialize)]
struct GradcheckArgs {
    #[arg(long, default_value_t = CellKind::Lstm)]
    cell: CellKind,
    #[arg(long)]
    candidate_only: bool,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 8)]
    dims_instr: usize,
    #[arg(long, default_value_t = 6)]
    dims_block: usize,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Random pairs to check.
    #[arg(long, default_value_t = 3)]
    pairs: usize,
    /// Longest random block.
    #[arg(long, default_value_t = 5)]
    max_len: usize,
    /// Fail when the error reaches this.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Subcommand, Serialize)]
enum SynthCommand {
    /// Functions rendered for both architectures, one corpus file each.
    Corpus(SynthCorpusArgs),
    /// A component planted into a larger program, plus unrelated programs.
    Plant(SynthPlantArgs),
}

#[derive(Args, Serialize)]
struct SynthCorpusArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 300)]
    functions: usize,
    #[arg(long, default_value_t = 10)]
    blocks: usize,
    #[arg(long, default_value_t = OptLevel::O2)]
    opt: OptLevel,
}

#[derive(Args, Serialize)]
struct SynthPlantArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// Blocks in the query component.
    #[arg(long, default_value_t = 10)]
    component: usize,
    /// Blocks in the target after planting, and in each unrelated program.
    #[arg(long, default_value_t = 100)]
    host: usize,
    #[arg(long, default_value_t = 3)]
    unrelated: usize,
    #[arg(long, default_value_t = Arch::Arm)]
    query_arch: Arch,
    #[arg(long, default_value_t = Arch::X86_64)]
    target_arch: Arch,
    #[arg(long, default_value_t = OptLevel::O2)]
    opt: OptLevel,
}

fn parse_fractions(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    parts.try_into().map_err(|_| "expected three comma-separated fractions".to_string())
}

/// A bad flag combination found after parsing; exits with status 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("XASM_LOG", "warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if cli.jobs == 0 {
        eprintln!("error: --jobs must be at least 1");
        return ExitCode::from(1);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global() {
        log::warn!("thread pool: {e}");
    }
    match cmd::run(&cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
