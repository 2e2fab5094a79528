//! End-to-end adaptation experiments: config resolution, a deterministic
//! training loop with an eval grid, precision switching mid-run, and a
//! step-timing protocol. Every artifact lands in the run directory.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::corpus::{default_filter_tags, ingest};
use crate::embed_init::InitMethod;
use crate::error::{Error, Result};
use crate::eval::{param_change, weight_histogram, word_normalized_nll, EvalReport};
use crate::model::{backward, forward_loss, init_model, Model};
use crate::numerics::{quantize, RoundingMode};
use crate::optim::{adamw_step, AdamWConfig, OptimizerState};
use crate::pack::{pack_documents, PackedBlock, PackingMode, SpecialTokens};
use crate::precision::PrecisionPolicy;
use crate::rng::substream;
use crate::schedule::{lr_at, ScheduleSpec};
use crate::tensor::Matrix;
use crate::tokenizer::{train_bpe, word_count, TokenizerModel, TrainerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyPreset {
    PureBf16,
    MixedBf16,
}

impl PolicyPreset {
    pub fn policy(self) -> PrecisionPolicy {
        match self {
            PolicyPreset::PureBf16 => PrecisionPolicy::pure_bf16(),
            PolicyPreset::MixedBf16 => PrecisionPolicy::mixed_bf16(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: crate::model::ModelConfig,
    pub precision: PolicyPreset,
    pub schedule: ScheduleSpec,
    pub optimizer: AdamWConfig,
    pub packing: PackingMode,
    /// Load a saved tokenizer; mutually exclusive with `trainer`.
    pub tokenizer_path: Option<PathBuf>,
    /// Train a fresh tokenizer on the ingested corpus.
    pub trainer: Option<TrainerConfig>,
    pub init_method: Option<InitMethod>,
    /// Continue from a saved checkpoint instead of a fresh initialization.
    pub base_checkpoint: Option<PathBuf>,
    pub corpus_paths: Vec<PathBuf>,
    /// Held-out evaluation text; falls back to the training corpus.
    pub eval_corpus_paths: Vec<PathBuf>,
    pub filter_tags: BTreeSet<String>,
    pub seed: u64,
    pub steps: u64,
    pub blocks_per_step: usize,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be positive".into()));
        }
        if self.steps > self.schedule.total_steps {
            return Err(Error::InvalidConfig(format!(
                "steps {} exceed schedule total {}",
                self.steps, self.schedule.total_steps
            )));
        }
        if self.blocks_per_step == 0 {
            return Err(Error::InvalidConfig("blocks_per_step must be positive".into()));
        }
        if self.corpus_paths.is_empty() {
            return Err(Error::InvalidConfig("no corpus files given".into()));
        }
        if self.tokenizer_path.is_none() && self.trainer.is_none() {
            return Err(Error::InvalidConfig(
                "need a tokenizer path or a trainer config".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    /// Sensible desk-scale defaults around a given model and corpus.
    pub fn desk_scale(
        model: crate::model::ModelConfig,
        corpus_paths: Vec<PathBuf>,
        output_dir: PathBuf,
        steps: u64,
    ) -> Self {
        ExperimentConfig {
            model,
            precision: PolicyPreset::PureBf16,
            schedule: ScheduleSpec::cosine_floor(steps, (steps / 100).max(1), 4e-5, 2e-6),
            optimizer: AdamWConfig::default(),
            packing: PackingMode::EosConcat,
            tokenizer_path: None,
            trainer: Some(TrainerConfig::default()),
            init_method: None,
            base_checkpoint: None,
            corpus_paths,
            eval_corpus_paths: Vec::new(),
            filter_tags: default_filter_tags(),
            seed: 0,
            steps,
            blocks_per_step: 1,
            output_dir,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepEvent {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub percent: u32,
    pub nll_per_token: f64,
    pub nll_per_word: f64,
}

#[derive(Debug)]
pub struct RunArtifacts {
    pub run_dir: PathBuf,
    pub events: Vec<StepEvent>,
    pub evals: Vec<EvalPoint>,
    pub final_eval: Option<EvalReport>,
}

pub const EVAL_GRID_PERCENTS: [u32; 7] = [0, 10, 30, 50, 70, 90, 100];

/// Evaluation checkpoints as (percent, step) pairs.
pub fn eval_grid_steps(total_steps: u64) -> Vec<(u32, u64)> {
    EVAL_GRID_PERCENTS
        .iter()
        .map(|&p| (p, ((p as f64 / 100.0) * total_steps as f64).round() as u64))
        .collect()
}

/// The absolute step at which a fractional precision switch happens.
pub fn switch_step(total_steps: u64, fraction: f64) -> Result<u64> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidRange { lo: 0.0, hi: 1.0 });
    }
    Ok((fraction * total_steps as f64).round() as u64)
}

struct RunContext {
    tokenizer: TokenizerModel,
    blocks: Vec<PackedBlock>,
    order: Vec<usize>,
    eval_chunks: Vec<String>,
}

fn prepare(cfg: &ExperimentConfig) -> Result<RunContext> {
    let (docs, _) = ingest(&cfg.corpus_paths, &cfg.filter_tags)?;
    if docs.is_empty() {
        return Err(Error::InvalidConfig("corpus is empty after filtering".into()));
    }
    let texts: Vec<String> = docs.into_iter().map(|d| d.text).collect();

    let tokenizer = match &cfg.tokenizer_path {
        Some(p) => TokenizerModel::load(p)?,
        None => train_bpe(&texts, cfg.trainer.as_ref().unwrap())?,
    };
    if tokenizer.vocab_size() != cfg.model.vocab_size {
        return Err(Error::InvalidConfig(format!(
            "tokenizer vocab {} does not match model vocab {}",
            tokenizer.vocab_size(),
            cfg.model.vocab_size
        )));
    }

    let mut encoded = Vec::new();
    for t in &texts {
        let ids = tokenizer.encode(t)?;
        if !ids.is_empty() {
            encoded.push(ids);
        }
    }
    let specials = SpecialTokens {
        bos: tokenizer.bos_id,
        eos: tokenizer.eos_id,
        pad: tokenizer.pad_id,
    };
    let blocks = pack_documents(&encoded, cfg.packing, cfg.model.context_length, specials)?;

    let mut order: Vec<usize> = (0..blocks.len()).collect();
    order.shuffle(&mut substream(cfg.seed, "data-order"));

    let eval_chunks = if cfg.eval_corpus_paths.is_empty() {
        texts.into_iter().filter(|t| word_count(t) > 0).collect()
    } else {
        let (docs, _) = ingest(&cfg.eval_corpus_paths, &cfg.filter_tags)?;
        docs.into_iter()
            .map(|d| d.text)
            .filter(|t| word_count(t) > 0)
            .collect()
    };
    Ok(RunContext {
        tokenizer,
        blocks,
        order,
        eval_chunks,
    })
}

fn load_or_init(cfg: &ExperimentConfig, policy: &PrecisionPolicy) -> Result<(Model, OptimizerState)> {
    match &cfg.base_checkpoint {
        Some(path) => {
            let (mut model, state) = load_checkpoint(path)?;
            if model.cfg != cfg.model {
                return Err(Error::InvalidConfig(
                    "base checkpoint model shape differs from the configured one".into(),
                ));
            }
            if model.params.iter().all(|p| p.init_snapshot.is_none()) {
                model.snapshot_init();
            }
            let state = match state {
                Some(s) => s,
                None => OptimizerState::new(&model, policy),
            };
            Ok((model, state))
        }
        None => {
            let mut model = init_model(&cfg.model, cfg.seed, policy.weights_fmt)?;
            model.snapshot_init();
            let state = OptimizerState::new(&model, policy);
            Ok((model, state))
        }
    }
}

fn grad_norm(grads: &[Matrix]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data.iter())
        .map(|&g| g * g)
        .sum::<f64>()
        .sqrt()
}

fn append_jsonl<T: Serialize>(file: &mut fs::File, value: &T) -> Result<()> {
    let line = serde_json::to_string(value)?;
    writeln!(file, "{line}")?;
    Ok(())
}

fn abort_with_diagnostic(dir: &Path, step: u64, lr: f64, loss: f64, what: &str) -> Error {
    let diag = serde_json::json!({
        "step": step,
        "lr": lr,
        "loss": if loss.is_finite() { Some(loss) } else { None },
        "reason": what,
    });
    let _ = fs::write(dir.join("abort.json"), diag.to_string());
    Error::NumericalAbort(format!("{what} at step {step}"))
}

struct TrainLoop<'a> {
    cfg: &'a ExperimentConfig,
    ctx: &'a RunContext,
    events_file: fs::File,
    evals_file: fs::File,
    events: Vec<StepEvent>,
    evals: Vec<EvalPoint>,
    grid: Vec<(u32, u64)>,
}

impl<'a> TrainLoop<'a> {
    fn new(cfg: &'a ExperimentConfig, ctx: &'a RunContext) -> Result<Self> {
        let dir = &cfg.output_dir;
        Ok(TrainLoop {
            cfg,
            ctx,
            events_file: fs::File::create(dir.join("events.jsonl"))?,
            evals_file: fs::File::create(dir.join("eval.jsonl"))?,
            events: Vec::new(),
            evals: Vec::new(),
            grid: eval_grid_steps(cfg.steps),
        })
    }

    fn eval_at(&mut self, model: &Model, policy: &PrecisionPolicy, step: u64) -> Result<()> {
        let hits: Vec<u32> = self
            .grid
            .iter()
            .filter(|&&(_, s)| s == step)
            .map(|&(p, _)| p)
            .collect();
        if hits.is_empty() || self.ctx.eval_chunks.is_empty() {
            return Ok(());
        }
        let report = word_normalized_nll(model, &self.ctx.tokenizer, &self.ctx.eval_chunks, policy)?;
        for percent in hits {
            let point = EvalPoint {
                step,
                percent,
                nll_per_token: report.nll_per_token,
                nll_per_word: report.nll_per_word,
            };
            append_jsonl(&mut self.evals_file, &point)?;
            self.evals.push(point);
        }
        Ok(())
    }

    /// Steps `(from, to]`; the block cursor is derived from the absolute
    /// step so resumed and straight-through runs see identical data.
    fn train_range(
        &mut self,
        model: &mut Model,
        state: &mut OptimizerState,
        policy: &PrecisionPolicy,
        from: u64,
        to: u64,
    ) -> Result<()> {
        let dir = &self.cfg.output_dir;
        let bps = self.cfg.blocks_per_step;
        for step in (from + 1)..=to {
            let lr = lr_at(&self.cfg.schedule, step)?;
            let mut loss_sum = 0.0;
            let mut targets = 0usize;
            let mut acc: Option<Vec<Matrix>> = None;
            for j in 0..bps {
                let cursor = (step - 1) as usize * bps + j;
                let block = &self.ctx.blocks[self.ctx.order[cursor % self.ctx.order.len()]];
                let (nll, n, mut tape) = forward_loss(model, block, policy)?;
                loss_sum += nll;
                targets += n;
                let grads = backward(model, &mut tape, policy)?;
                match &mut acc {
                    None => acc = Some(grads.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads.grads) {
                            for (x, y) in a.data.iter_mut().zip(&g.data) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = crate::model::GradientSet {
                grads: acc.unwrap(),
            };
            if bps > 1 {
                for g in &mut grads.grads {
                    for x in &mut g.data {
                        *x = quantize(*x / bps as f64, policy.grads_fmt, RoundingMode::NearestEven);
                    }
                }
            }
            let loss = if targets == 0 { 0.0 } else { loss_sum / targets as f64 };
            if !loss.is_finite() {
                return Err(abort_with_diagnostic(dir, step, lr, loss, "non-finite loss"));
            }
            adamw_step(model, &grads, state, &self.cfg.optimizer, policy, lr)
                .map_err(|e| match e {
                    Error::NumericalAbort(_) => {
                        abort_with_diagnostic(dir, step, lr, loss, "non-finite gradient")
                    }
                    other => other,
                })?;
            let event = StepEvent {
                step,
                lr,
                loss,
                grad_norm: grad_norm(&grads.grads),
            };
            append_jsonl(&mut self.events_file, &event)?;
            self.events.push(event);
            self.eval_at(model, policy, step)?;
        }
        Ok(())
    }
}

fn finish(
    cfg: &ExperimentConfig,
    ctx: &RunContext,
    model: &Model,
    state: &OptimizerState,
    policy: &PrecisionPolicy,
    mut run: TrainLoop,
) -> Result<RunArtifacts> {
    let dir = &cfg.output_dir;
    save_checkpoint(&dir.join("checkpoint-final"), model, Some(state))?;
    fs::write(dir.join("weights.csv"), weight_histogram(model, 64)?.to_csv())?;
    fs::write(dir.join("param_change.csv"), param_change(model, 64)?.to_csv())?;
    let final_eval = if ctx.eval_chunks.is_empty() {
        None
    } else {
        let report = word_normalized_nll(model, &ctx.tokenizer, &ctx.eval_chunks, policy)?;
        fs::write(dir.join("eval_final.json"), serde_json::to_vec_pretty(&report)?)?;
        Some(report)
    };
    Ok(RunArtifacts {
        run_dir: dir.clone(),
        events: std::mem::take(&mut run.events),
        evals: std::mem::take(&mut run.evals),
        final_eval,
    })
}

fn setup(cfg: &ExperimentConfig) -> Result<RunContext> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(
        cfg.output_dir.join("config.json"),
        serde_json::to_vec_pretty(cfg)?,
    )?;
    let ctx = prepare(cfg)?;
    ctx.tokenizer.save(&cfg.output_dir.join("tokenizer.json"))?;
    Ok(ctx)
}

/// Full training run under one precision preset.
pub fn run_adaptation(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    let ctx = setup(cfg)?;
    let policy = cfg.precision.policy();
    let (mut model, mut state) = load_or_init(cfg, &policy)?;
    let mut run = TrainLoop::new(cfg, &ctx)?;
    run.eval_at(&model, &policy, state.step)?;
    let start = state.step;
    run.train_range(&mut model, &mut state, &policy, start, cfg.steps)?;
    finish(cfg, &ctx, &model, &state, &policy, run)
}

/// Trains pure bf16 until `fraction` of the steps, snapshots that branch
/// point, then continues under mixed precision with the master copy seeded
/// from the bf16 weights. Both checkpoints are kept.
pub fn switch_precision_at(cfg: &ExperimentConfig, fraction: f64) -> Result<RunArtifacts> {
    if cfg.precision != PolicyPreset::PureBf16 {
        return Err(Error::InvalidConfig(
            "precision switching starts from the pure preset".into(),
        ));
    }
    let at = switch_step(cfg.steps, fraction)?;
    let ctx = setup(cfg)?;
    let pure = PolicyPreset::PureBf16.policy();
    let mixed = PolicyPreset::MixedBf16.policy();
    let (mut model, mut state) = load_or_init(cfg, &pure)?;
    let mut run = TrainLoop::new(cfg, &ctx)?;
    run.eval_at(&model, &pure, state.step)?;
    let start = state.step;
    run.train_range(&mut model, &mut state, &pure, start, at)?;
    save_checkpoint(&cfg.output_dir.join("checkpoint-switch"), &model, Some(&state))?;
    state.master = Some(
        model
            .params
            .iter()
            .map(|p| {
                let mut w = p.values.clone();
                w.quantize_in_place(mixed.optimizer_state_fmt, RoundingMode::NearestEven);
                w
            })
            .collect(),
    );
    run.train_range(&mut model, &mut state, &mixed, at, cfg.steps)?;
    finish(cfg, &ctx, &model, &state, &mixed, run)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub raw_seconds: Vec<f64>,
    /// Mean over steps 2..n; the first step is warm-up and excluded.
    pub mean_seconds: f64,
}

/// Times `n` real optimization steps; the report's mean excludes step 1.
pub fn time_steps(cfg: &ExperimentConfig, n: usize) -> Result<TimingReport> {
    if n < 2 {
        return Err(Error::InvalidConfig("need at least two timed steps".into()));
    }
    if n as u64 > cfg.schedule.total_steps {
        return Err(Error::InvalidConfig(
            "cannot time more steps than the schedule covers".into(),
        ));
    }
    let ctx = setup(cfg)?;
    let policy = cfg.precision.policy();
    let (mut model, mut state) = load_or_init(cfg, &policy)?;
    let mut run = TrainLoop::new(cfg, &ctx)?;
    let mut raw_seconds = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let t0 = Instant::now();
        run.train_range(&mut model, &mut state, &policy, i, i + 1)?;
        raw_seconds.push(t0.elapsed().as_secs_f64());
    }
    let mean_seconds = raw_seconds[1..].iter().sum::<f64>() / (n - 1) as f64;
    let report = TimingReport {
        raw_seconds,
        mean_seconds,
    };
    fs::write(
        cfg.output_dir.join("timing.json"),
        serde_json::to_vec_pretty(&report)?,
    )?;
    Ok(report)
}
