//! Experiment engine: online batches, the forgetting schedule, periodic
//! evaluation into `metrics.jsonl`, checkpoints and parameter sweeps.

mod checkpoint;
mod sweep;

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use sweep::{plan_sweep, run_sweep, write_manifest, ManifestEntry, SweepCell, SweepGrid};

use crate::analysis::{probe_stratum, Stratum};
use crate::error::{Error, Result};
use crate::grammar::{
    build_eval_set, sample_example, EvalKind, EvalSet, GrammarConfig, Lexicon, SeenPairs, TokenId,
    UnseenDist, UnseenSpec,
};
use crate::model::{
    init_params, loss_and_grads, masked_logits_batch, pattern_loglik, predict, ModelConfig,
    ModelParams,
};
use crate::numerics::{Array, Rng};
use crate::optim::{
    adamw_step, reset_embeddings, should_reset, AdamWConfig, ForgettingSchedule, OptState,
};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const CONFIG_FILE: &str = "config.json";

fn default_steps() -> u64 {
    60_000
}
fn default_batch() -> usize {
    64
}
fn default_eval_every() -> u64 {
    500
}
fn default_eval_size() -> usize {
    1000
}
fn default_unseen_count() -> usize {
    1500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grammar: GrammarConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub optim: AdamWConfig,
    #[serde(default = "ForgettingSchedule::vanilla")]
    pub schedule: ForgettingSchedule,
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default = "default_eval_size")]
    pub eval_set_size: usize,
    #[serde(default = "default_unseen_count")]
    pub unseen_count: usize,
    #[serde(default = "default_unseen_dist")]
    pub unseen_dist: UnseenDist,
    /// Write `step_<n>.ckpt` every this many steps; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: u64,
    pub seed: u64,
}

fn default_unseen_dist() -> UnseenDist {
    UnseenDist::Init
}

impl ExperimentConfig {
    /// Toy model over a `v`-token grammar with every other setting at its default.
    pub fn toy(v: usize, alpha: f64, epsilon: f64, seed: u64) -> Self {
        ExperimentConfig {
            grammar: GrammarConfig {
                v,
                alpha,
                epsilon,
                n_bins: 10,
                seed,
            },
            model: ModelConfig::toy(v + 2),
            optim: AdamWConfig::default(),
            schedule: ForgettingSchedule::vanilla(),
            steps: default_steps(),
            batch_size: default_batch(),
            eval_every: default_eval_every(),
            eval_set_size: default_eval_size(),
            unseen_count: default_unseen_count(),
            unseen_dist: UnseenDist::Init,
            checkpoint_every: 0,
            seed,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.grammar.validate()?;
        self.model.validate()?;
        self.optim.validate()?;
        self.schedule.validate()?;
        if self.model.vocab_size != self.grammar.v + 2 {
            return Err(Error::Config(format!(
                "model.vocab_size must be v + 2 = {}, got {}",
                self.grammar.v + 2,
                self.model.vocab_size
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.eval_every == 0 || (self.steps > 0 && self.eval_every > self.steps) {
            return Err(Error::Config(format!(
                "eval_every must lie in 1..=steps, got {} with steps {}",
                self.eval_every, self.steps
            )));
        }
        if self.eval_set_size == 0 {
            return Err(Error::Config("eval_set_size must be >= 1".into()));
        }
        if self.unseen_count < 2 {
            return Err(Error::Config("unseen_count must be >= 2".into()));
        }
        Ok(())
    }

    fn unseen_spec(&self) -> UnseenSpec {
        UnseenSpec {
            count: self.unseen_count,
            dist: self.unseen_dist,
            dim: self.model.d_model,
            init_std: self.model.init_std,
        }
    }

    /// Equal apart from run length and checkpoint cadence, i.e. safe to resume.
    pub fn resumable_from(&self, other: &ExperimentConfig) -> bool {
        let strip = |c: &ExperimentConfig| ExperimentConfig {
            steps: 0,
            checkpoint_every: 0,
            ..c.clone()
        };
        strip(self) == strip(other)
    }
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    /// Mean training loss since the previous record; null at step 0.
    pub train_loss: Option<f64>,
    /// These three are null once every unambiguous pair they could draw from
    /// has been seen in training.
    pub val_acc: Option<f64>,
    pub head_acc: Option<f64>,
    pub tail_acc: Option<f64>,
    pub head_iw_pref: f64,
    pub tail_iw_pref: f64,
    pub head_ic_acc: f64,
    pub tail_ic_acc: f64,
    pub unseen_acc: f64,
    /// 1 / number of unseen candidate rows.
    pub unseen_chance: f64,
    pub probe_acc: Option<f64>,
}

impl MetricsRecord {
    /// Named scalar fields in file order, skipping nulls.
    pub fn series(&self) -> Vec<(&'static str, f64)> {
        let mut out = Vec::new();
        let mut push = |name, v: Option<f64>| {
            if let Some(v) = v {
                out.push((name, v));
            }
        };
        push("train_loss", self.train_loss);
        push("val_acc", self.val_acc);
        push("head_acc", self.head_acc);
        push("tail_acc", self.tail_acc);
        push("head_iw_pref", Some(self.head_iw_pref));
        push("tail_iw_pref", Some(self.tail_iw_pref));
        push("head_ic_acc", Some(self.head_ic_acc));
        push("tail_ic_acc", Some(self.tail_ic_acc));
        push("unseen_acc", Some(self.unseen_acc));
        push("unseen_chance", Some(self.unseen_chance));
        push("probe_acc", self.probe_acc);
        out
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct RunState {
    pub step: u64,
    pub params: ModelParams,
    pub opt: OptState,
    pub data_rng: Rng,
    pub reset_rng: Rng,
    pub registry: SeenPairs,
    /// Embedding resets applied so far.
    pub resets: u64,
    pub loss_sum: f64,
    pub loss_count: u64,
    pub last_record: Option<MetricsRecord>,
}

impl RunState {
    pub fn fresh(cfg: &ExperimentConfig) -> Result<Self> {
        let root = Rng::new(cfg.seed);
        let params = init_params(&cfg.model, &mut root.split("init"))?;
        let opt = OptState::new(&params.tensors);
        Ok(RunState {
            step: 0,
            params,
            opt,
            data_rng: root.split("data"),
            reset_rng: root.split("reset"),
            registry: SeenPairs::new(),
            resets: 0,
            loss_sum: 0.0,
            loss_count: 0,
            last_record: None,
        })
    }
}

/// Evaluation stream for a given step; disjoint from every training stream.
pub fn eval_rng(seed: u64, step: u64) -> Rng {
    Rng::new(seed).split("eval").split(&step.to_string())
}

/// Fraction of masked positions where the argmax equals the target.
pub fn accuracy_from_logits(logits: &[Array], targets: &[[TokenId; 3]]) -> f64 {
    let hits: usize = logits
        .iter()
        .zip(targets)
        .map(|(l, t)| predict(l).iter().zip(t).filter(|(p, t)| p == t).count())
        .sum();
    hits as f64 / (3 * targets.len().max(1)) as f64
}

fn set_logits(params: &ModelParams, set: &EvalSet) -> Result<Vec<Array>> {
    let toks: Vec<_> = set.examples.iter().map(|e| e.tokens).collect();
    masked_logits_batch(params, &toks, set.unseen_rows.as_ref())
}

pub fn accuracy(params: &ModelParams, set: &EvalSet) -> Result<f64> {
    let targets: Vec<_> = set.examples.iter().map(|e| e.targets).collect();
    Ok(accuracy_from_logits(&set_logits(params, set)?, &targets))
}

/// `(iw_pref, ic_acc)`: the share of examples whose in-weights triple is
/// strictly more likely than the in-context one, and the share whose argmax
/// triple equals the in-context targets exactly.
pub fn preference_from_logits(
    logits: &[Array],
    ic: &[[TokenId; 3]],
    iw: &[[TokenId; 3]],
) -> (f64, f64) {
    let n = logits.len().max(1) as f64;
    let mut votes = 0usize;
    let mut exact = 0usize;
    for ((l, c), w) in logits.iter().zip(ic).zip(iw) {
        if pattern_loglik(l, w) > pattern_loglik(l, c) {
            votes += 1;
        }
        if predict(l) == *c {
            exact += 1;
        }
    }
    (votes as f64 / n, exact as f64 / n)
}

pub fn preference_metrics(params: &ModelParams, set: &EvalSet) -> Result<(f64, f64)> {
    if set.ic_targets.len() != set.len() || set.iw_targets.len() != set.len() {
        return Err(Error::Contract(format!(
            "{} set has no candidate triples for its {} examples",
            set.kind,
            set.len()
        )));
    }
    let logits = set_logits(params, set)?;
    Ok(preference_from_logits(
        &logits,
        &set.ic_targets,
        &set.iw_targets,
    ))
}

/// Accuracy on an eval set, or `None` when its stratum has no unseen pair left.
fn stratum_accuracy(params: &ModelParams, built: Result<EvalSet>) -> Result<Option<f64>> {
    match built {
        Ok(set) => accuracy(params, &set).map(Some),
        Err(Error::Generation { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Every metric of a record except `train_loss`. Each eval set gets its own
/// child of `rng`; `rng` itself is never advanced.
pub fn evaluate(
    params: &ModelParams,
    lex: &Lexicon,
    registry: &SeenPairs,
    cfg: &ExperimentConfig,
    step: u64,
    rng: &Rng,
) -> Result<MetricsRecord> {
    let spec = cfg.unseen_spec();
    let build = |kind: EvalKind| {
        build_eval_set(
            kind,
            cfg.eval_set_size,
            lex,
            registry,
            &spec,
            &mut rng.split(kind.name()),
        )
    };
    let val_acc = stratum_accuracy(params, build(EvalKind::Validation))?;
    let head_acc = stratum_accuracy(params, build(EvalKind::Head))?;
    let tail_acc = stratum_accuracy(params, build(EvalKind::Tail))?;
    let (head_iw_pref, head_ic_acc) = preference_metrics(params, &build(EvalKind::HeadSwitch)?)?;
    let (tail_iw_pref, tail_ic_acc) = preference_metrics(params, &build(EvalKind::TailSwitch)?)?;
    let unseen_acc = accuracy(params, &build(EvalKind::Unseen)?)?;
    let probe_acc = match probe_stratum(params, lex, Stratum::All, &mut rng.split("probe")) {
        Ok(p) => Some(p.heldout_acc),
        Err(Error::Domain(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricsRecord {
        step,
        train_loss: None,
        val_acc,
        head_acc,
        tail_acc,
        head_iw_pref,
        tail_iw_pref,
        head_ic_acc,
        tail_ic_acc,
        unseen_acc,
        unseen_chance: 1.0 / cfg.unseen_count as f64,
        probe_acc,
    })
}

/// One optimizer step on a fresh batch, followed by the scheduled reset.
pub fn train_step(state: &mut RunState, cfg: &ExperimentConfig, lex: &Lexicon) -> Result<f64> {
    let mut tokens = Vec::with_capacity(cfg.batch_size);
    let mut targets = Vec::with_capacity(cfg.batch_size);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let ex = sample_example(lex, &mut state.data_rng);
        tokens.push(ex.tokens);
        targets.push(ex.targets);
        batch.push(ex);
    }
    let (loss, grads) = loss_and_grads(&state.params, &tokens, &targets)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss {loss} at step {}",
            state.step + 1
        )));
    }
    adamw_step(
        &mut state.params.tensors,
        &grads,
        &mut state.opt,
        &cfg.optim,
    )?;
    for ex in &batch {
        state.registry.record(ex);
    }
    state.step += 1;
    if should_reset(state.step, &cfg.schedule) {
        reset_embeddings(
            &mut state.params,
            &mut state.opt,
            &cfg.model,
            &mut state.reset_rng,
        );
        state.resets += 1;
    }
    state.loss_sum += loss;
    state.loss_count += 1;
    Ok(loss)
}

fn append_record(path: &Path, rec: &MetricsRecord) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(rec)?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    lex: Lexicon,
    out_dir: &'a Path,
    metrics: PathBuf,
}

impl Runner<'_> {
    fn record(&self, state: &mut RunState) -> Result<MetricsRecord> {
        let rng = eval_rng(self.cfg.seed, state.step);
        let mut rec = evaluate(
            &state.params,
            &self.lex,
            &state.registry,
            self.cfg,
            state.step,
            &rng,
        )?;
        if state.loss_count > 0 {
            rec.train_loss = Some(state.loss_sum / state.loss_count as f64);
        }
        state.loss_sum = 0.0;
        state.loss_count = 0;
        append_record(&self.metrics, &rec)?;
        state.last_record = Some(rec.clone());
        Ok(rec)
    }

    fn checkpoint(&self, state: &RunState, name: &str) -> Result<()> {
        let ck = Checkpoint {
            config: self.cfg.clone(),
            state: state.clone(),
        };
        save_checkpoint(&self.out_dir.join(name), &ck)
    }

    fn run(&self, mut state: RunState) -> Result<MetricsRecord> {
        let cfg = self.cfg;
        let mut last = match &state.last_record {
            Some(r) => r.clone(),
            None => self.record(&mut state)?,
        };
        while state.step < cfg.steps {
            train_step(&mut state, cfg, &self.lex)?;
            if state.step % cfg.eval_every == 0 || state.step == cfg.steps {
                last = self.record(&mut state)?;
            }
            if cfg.checkpoint_every > 0
                && state.step % cfg.checkpoint_every == 0
                && state.step < cfg.steps
            {
                self.checkpoint(&state, &format!("step_{}.ckpt", state.step))?;
            }
        }
        self.checkpoint(&state, FINAL_CHECKPOINT)?;
        Ok(last)
    }
}

fn prepare(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Lexicon> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join(CONFIG_FILE);
    let text = serde_json::to_string_pretty(cfg)? + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Lexicon::new(&cfg.grammar)
}

/// Trains from scratch, writing `metrics.jsonl`, checkpoints and a final
/// checkpoint into `out_dir`. Returns the last metrics record.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<MetricsRecord> {
    let lex = prepare(cfg, out_dir)?;
    let metrics = out_dir.join(METRICS_FILE);
    File::create(&metrics).map_err(|e| Error::io(&metrics, e))?;
    let state = RunState::fresh(cfg)?;
    Runner {
        cfg,
        lex,
        out_dir,
        metrics,
    }
    .run(state)
}

/// Continues a checkpointed run up to `cfg.steps`. `cfg` may differ from the
/// checkpoint's config only in `steps` and `checkpoint_every`. Records in an
/// existing `metrics.jsonl` beyond the checkpoint step are dropped first.
pub fn resume_experiment(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    out_dir: &Path,
) -> Result<MetricsRecord> {
    let lex = prepare(cfg, out_dir)?;
    let ck = load_checkpoint(checkpoint)?;
    if !cfg.resumable_from(&ck.config) {
        return Err(Error::Config(format!(
            "{} was written under a different configuration",
            checkpoint.display()
        )));
    }
    if ck.state.step > cfg.steps {
        return Err(Error::Config(format!(
            "checkpoint is at step {} but steps = {}",
            ck.state.step, cfg.steps
        )));
    }
    let metrics = out_dir.join(METRICS_FILE);
    let kept: Vec<MetricsRecord> = if metrics.exists() {
        read_metrics(&metrics)?
            .into_iter()
            .filter(|r| r.step <= ck.state.step)
            .collect()
    } else {
        ck.state.last_record.iter().cloned().collect()
    };
    File::create(&metrics).map_err(|e| Error::io(&metrics, e))?;
    for r in &kept {
        append_record(&metrics, r)?;
    }
    Runner {
        cfg,
        lex,
        out_dir,
        metrics,
    }
    .run(ck.state)
}

/// Re-evaluates a checkpoint exactly as the training loop would at its step.
pub fn evaluate_checkpoint(ck: &Checkpoint) -> Result<MetricsRecord> {
    let cfg = &ck.config;
    let lex = Lexicon::new(&cfg.grammar)?;
    let rng = eval_rng(cfg.seed, ck.state.step);
    let mut rec = evaluate(
        &ck.state.params,
        &lex,
        &ck.state.registry,
        cfg,
        ck.state.step,
        &rng,
    )?;
    rec.train_loss = match &ck.state.last_record {
        Some(r) if r.step == ck.state.step => r.train_loss,
        _ if ck.state.loss_count > 0 => Some(ck.state.loss_sum / ck.state.loss_count as f64),
        _ => None,
    };
    Ok(rec)
}
