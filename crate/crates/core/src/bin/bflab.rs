//! Command-line front door: tokenizer training, embedding re-initialization,
//! adaptation runs, evaluation, weight analysis, memory planning, and
//! step timing. Exit codes: 0 ok, 1 user error, 2 numerical abort.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use bflab_core::checkpoint::{load_checkpoint, save_checkpoint};
use bflab_core::corpus::{default_filter_tags, ingest};
use bflab_core::embed_init::{init_embeddings, train_aux_embeddings, InitMethod};
use bflab_core::error::Error;
use bflab_core::eval::{param_change, weight_histogram, word_normalized_nll};
use bflab_core::model::ModelConfig;
use bflab_core::planner::{
    best_config, enumerate_space, memory_estimate, HardwareSpec, ModelShape, Precision,
};
use bflab_core::run::{
    run_adaptation, switch_precision_at, time_steps, ExperimentConfig, PolicyPreset,
};
use bflab_core::tokenizer::{fertility, train_bpe, TokenizerModel, TrainerConfig};

#[derive(Parser)]
#[command(name = "bflab", version, about = "Low-precision language adaptation laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a BPE tokenizer with byte fallback on a JSONL corpus.
    TokenizerTrain(TokenizerTrainArgs),
    /// Re-initialize embeddings of a checkpoint for a swapped tokenizer.
    InitEmbeddings(InitEmbeddingsArgs),
    /// Run an adaptation experiment from scratch.
    Train(RunArgs),
    /// Continue an experiment from a checkpoint.
    Continue(ContinueArgs),
    /// Train pure bf16, then switch to mixed precision at a fraction.
    SwitchPrecision(SwitchArgs),
    /// Word-normalized NLL of a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Weight-magnitude and parameter-change histograms as CSV.
    AnalyzeWeights(AnalyzeArgs),
    /// Rank feasible training configurations for a hardware budget.
    Plan(PlanArgs),
    /// Time real optimization steps; the mean excludes step 1.
    TimeSteps(TimeStepsArgs),
    /// Corpus filtering statistics without training anything.
    IngestStats(IngestArgs),
}

#[derive(Args)]
struct CorpusArgs {
    /// JSONL corpus files ({"text", "quality_warnings"}).
    #[arg(long, required = true, num_args = 1..)]
    corpus: Vec<PathBuf>,
    /// Quality-warning tags to drop; defaults to the standard six.
    #[arg(long)]
    filter_tag: Vec<String>,
    /// Keep every document regardless of warnings.
    #[arg(long)]
    no_filter: bool,
}

impl CorpusArgs {
    fn tags(&self) -> BTreeSet<String> {
        if self.no_filter {
            BTreeSet::new()
        } else if self.filter_tag.is_empty() {
            default_filter_tags()
        } else {
            self.filter_tag.iter().cloned().collect()
        }
    }
}

#[derive(Args)]
struct TokenizerTrainArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, default_value_t = 32768)]
    vocab_size: u32,
    #[arg(long, default_value_t = 0.9995)]
    character_coverage: f64,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitMethodArg {
    NormalFixed,
    FittedNormal,
    RandomAssign,
    Overlap,
    Focus,
}

#[derive(Args)]
struct InitEmbeddingsArgs {
    /// Checkpoint holding the source model.
    #[arg(long)]
    base_checkpoint: PathBuf,
    #[arg(long)]
    old_tokenizer: PathBuf,
    #[arg(long)]
    new_tokenizer: PathBuf,
    #[arg(long, value_enum)]
    method: InitMethodArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corpus for the auxiliary embedding space (focus method only).
    #[arg(long)]
    aux_corpus: Vec<PathBuf>,
    #[arg(long, default_value_t = 64)]
    aux_dim: usize,
    /// Output checkpoint directory.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config JSON; overrides all other flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Vec<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "pure")]
    precision: PrecisionArg,
    #[arg(long, default_value_t = 512)]
    vocab_size: usize,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    n_layers: usize,
    #[arg(long, default_value_t = 64)]
    d_ff: usize,
    #[arg(long, default_value_t = 32)]
    context_length: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    Pure,
    Mixed,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        if let Some(path) = &self.config {
            return ExperimentConfig::from_json_file(path);
        }
        let output_dir = self
            .output_dir
            .clone()
            .ok_or_else(|| Error::InvalidConfig("--output-dir or --config required".into()))?;
        if self.corpus.is_empty() {
            return Err(Error::InvalidConfig("--corpus or --config required".into()));
        }
        let model = ModelConfig {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            n_heads: 1,
            context_length: self.context_length,
            rmsnorm_eps: 1e-6,
        };
        let steps = self
            .steps
            .ok_or_else(|| Error::InvalidConfig("--steps or --config required".into()))?;
        let mut cfg =
            ExperimentConfig::desk_scale(model, self.corpus.clone(), output_dir, steps);
        cfg.seed = self.seed;
        cfg.precision = match self.precision {
            PrecisionArg::Pure => PolicyPreset::PureBf16,
            PrecisionArg::Mixed => PolicyPreset::MixedBf16,
        };
        cfg.trainer = Some(TrainerConfig {
            vocab_size: self.vocab_size,
            ..TrainerConfig::default()
        });
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ContinueArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    base_checkpoint: PathBuf,
}

#[derive(Args)]
struct SwitchArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Fraction of the run trained pure before switching to mixed.
    #[arg(long)]
    fraction: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, value_enum, default_value = "pure")]
    precision: PrecisionArg,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 64)]
    bins: usize,
    /// Also emit the change-from-init histogram (needs snapshots).
    #[arg(long)]
    changes: bool,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long, value_enum)]
    precision: PrecisionArg,
    #[arg(long, default_value_t = 1)]
    gpus: usize,
    /// Per-GPU memory in bytes.
    #[arg(long, default_value_t = 80e9)]
    per_gpu_memory: f64,
    #[arg(long, default_value_t = 7e9)]
    params: f64,
    #[arg(long, default_value_t = 32)]
    n_layers: usize,
    #[arg(long, default_value_t = 4096)]
    d_model: usize,
    #[arg(long, default_value_t = 4096)]
    context_length: usize,
    /// Emit a CSV ranking table instead of JSON.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct TimeStepsArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 11)]
    n: usize,
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
}

fn texts_from(corpus: &CorpusArgs) -> Result<Vec<String>, Error> {
    let (docs, _) = ingest(&corpus.corpus, &corpus.tags())?;
    Ok(docs.into_iter().map(|d| d.text).collect())
}

fn real_main(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::TokenizerTrain(args) => {
            let texts = texts_from(&args.corpus)?;
            let cfg = TrainerConfig {
                vocab_size: args.vocab_size as usize,
                character_coverage: args.character_coverage,
                ..TrainerConfig::default()
            };
            let model = train_bpe(&texts, &cfg)?;
            model.save(&args.output)?;
            let joined = texts.join("\n");
            let fert = fertility(&model, &joined)?;
            println!(
                "{}",
                serde_json::json!({
                    "vocab_size": model.vocab_size(),
                    "merges": model.merges.len(),
                    "corpus_fertility": fert,
                    "output": args.output,
                })
            );
        }
        Command::InitEmbeddings(args) => {
            let (mut model, _) = load_checkpoint(&args.base_checkpoint)?;
            let old_tok = TokenizerModel::load(&args.old_tokenizer)?;
            let new_tok = TokenizerModel::load(&args.new_tokenizer)?;
            let old_vocab: Vec<String> =
                (0..old_tok.vocab_size() as u32)
                .map(|i| old_tok.id_to_token(i).unwrap())
                .collect();
            let new_vocab: Vec<String> =
                (0..new_tok.vocab_size() as u32)
                .map(|i| new_tok.id_to_token(i).unwrap())
                .collect();
            let method = match args.method {
                InitMethodArg::NormalFixed => InitMethod::NormalFixed,
                InitMethodArg::FittedNormal => InitMethod::FittedNormal,
                InitMethodArg::RandomAssign => InitMethod::RandomAssign,
                InitMethodArg::Overlap => InitMethod::OverlapHeuristic,
                InitMethodArg::Focus => InitMethod::focus_like(),
            };
            let aux = if matches!(method, InitMethod::FocusLike { .. }) {
                let (docs, _) = ingest(&args.aux_corpus, &BTreeSet::new())?;
                let seqs: Result<Vec<Vec<u32>>, Error> =
                    docs.iter().map(|d| new_tok.encode(&d.text)).collect();
                Some(train_aux_embeddings(
                    &seqs?,
                    new_tok.vocab_size(),
                    2,
                    args.aux_dim,
                    args.seed,
                )?)
            } else {
                None
            };
            let emb_idx = model.embedding_index();
            let unemb_idx = model.unembedding_index();
            let new_e = init_embeddings(
                method,
                &old_vocab,
                &model.params[emb_idx].values,
                &new_vocab,
                args.seed,
                aux.as_ref(),
            )?;
            let new_u = init_embeddings(
                method,
                &old_vocab,
                &model.params[unemb_idx].values,
                &new_vocab,
                args.seed.wrapping_add(1),
                aux.as_ref(),
            )?;
            model.params[emb_idx].values = new_e.embeddings;
            model.params[emb_idx].init_snapshot = None;
            model.params[unemb_idx].values = new_u.embeddings;
            model.params[unemb_idx].init_snapshot = None;
            model.cfg.vocab_size = new_tok.vocab_size();
            model.snapshot_init();
            save_checkpoint(&args.output, &model, None)?;
            println!(
                "{}",
                serde_json::json!({
                    "vocab_size": model.cfg.vocab_size,
                    "overlap_fallback": new_e.overlap_fallback,
                    "output": args.output,
                })
            );
        }
        Command::Train(args) => {
            let cfg = args.config.resolve()?;
            let artifacts = run_adaptation(&cfg)?;
            println!("{}", serde_json::json!({ "run_dir": artifacts.run_dir }));
        }
        Command::Continue(args) => {
            let mut cfg = args.config.resolve()?;
            cfg.base_checkpoint = Some(args.base_checkpoint);
            let artifacts = run_adaptation(&cfg)?;
            println!("{}", serde_json::json!({ "run_dir": artifacts.run_dir }));
        }
        Command::SwitchPrecision(args) => {
            let cfg = args.config.resolve()?;
            let artifacts = switch_precision_at(&cfg, args.fraction)?;
            println!("{}", serde_json::json!({ "run_dir": artifacts.run_dir }));
        }
        Command::Eval(args) => {
            let (model, _) = load_checkpoint(&args.checkpoint)?;
            let tokenizer = TokenizerModel::load(&args.tokenizer)?;
            let chunks = texts_from(&args.corpus)?;
            let policy = match args.precision {
                PrecisionArg::Pure => PolicyPreset::PureBf16,
                PrecisionArg::Mixed => PolicyPreset::MixedBf16,
            }
            .policy();
            let report = word_normalized_nll(&model, &tokenizer, &chunks, &policy)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::AnalyzeWeights(args) => {
            let (model, _) = load_checkpoint(&args.checkpoint)?;
            print!("{}", weight_histogram(&model, args.bins)?.to_csv());
            if args.changes {
                print!("{}", param_change(&model, args.bins)?.to_csv());
            }
        }
        Command::Plan(args) => {
            let hw = HardwareSpec {
                gpu_count: args.gpus,
                per_gpu_memory: args.per_gpu_memory,
                interconnect_penalty: 0.05,
            };
            let precision = match args.precision {
                PrecisionArg::Pure => Precision::Pure,
                PrecisionArg::Mixed => Precision::Mixed,
            };
            let shape = ModelShape {
                param_count: args.params,
                n_layers: args.n_layers,
                d_model: args.d_model,
                context_length: args.context_length,
            };
            let space = enumerate_space(precision, shape);
            let ranked = best_config(&space, &hw)?;
            if args.csv {
                println!(
                    "rank,micro_batch,act_ckpt,sharding,accum_sync,paged,relative_time,total_bytes"
                );
                for (i, r) in ranked.iter().enumerate() {
                    println!(
                        "{},{},{},{:?},{:?},{},{},{}",
                        i + 1,
                        r.config.micro_batch,
                        r.config.act_ckpt,
                        r.config.sharding,
                        r.config.accum_sync,
                        r.config.paged_optimizer,
                        r.relative_time,
                        r.memory.total
                    );
                }
            } else {
                let annotated: Vec<_> = space
                    .iter()
                    .map(|cfg| {
                        serde_json::json!({
                            "config": cfg,
                            "memory": memory_estimate(cfg, &hw),
                        })
                    })
                    .collect();
                println!(
                    "{}",
                    serde_json::to_string_pretty(&serde_json::json!({
                        "space": annotated,
                        "ranking": ranked,
                    }))?
                );
            }
        }
        Command::TimeSteps(args) => {
            let cfg = args.config.resolve()?;
            let report = time_steps(&cfg, args.n)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::IngestStats(args) => {
            let (_, report) = ingest(&args.corpus.corpus, &args.corpus.tags())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match real_main(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::NumericalAbort(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
