//! Deterministic training loop: model, frozen reference snapshot, objective,
//! optimizer, schedule and per-step metric logging.
//!
//! Each logged record is taken from the forward pass of the step it belongs
//! to, before that step's update, so step 0 always reports a deviation of
//! zero. The loss column is the objective's own value; at initialisation the
//! MinorSFT value equals the raw SFT value (every detached weight is 1) and
//! the two drift apart as the weights shrink, so loss curves across
//! objectives are not directly comparable.

mod optim;
mod schedule;

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{make_batches, Corpus, Schema, TokenizeOptions, TokenizedCorpus};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{LanguageModel, LogProbSummary, ModelConfig, Sample};
use crate::objectives::{
    self, sigmoid, Beta, BatchRef, DeviationReport, LogRatioConvention, Objective, Scaling,
};

pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use schedule::{lr_at, warmup_steps};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    LinearWarmupDecay,
}

/// Which samples the logged deviation metric is computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricSource {
    /// The batch being trained on at that step.
    #[default]
    TrainBatch,
    /// A fixed held-out set supplied to [`train_with_held_out`].
    HeldOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub learning_rate: f64,
    /// Ignored by `raw_sft`.
    pub beta: Beta,
    pub convention: LogRatioConvention,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub schedule: ScheduleKind,
    pub optimizer: OptimizerConfig,
    /// Seeds the per-epoch data order.
    pub seed: u64,
    pub log_every: usize,
    pub metric_source: MetricSource,
    /// Inserted between prompt and answer when tokenizing records.
    pub separator: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::MinorSft,
            learning_rate: 1e-3,
            beta: Beta::DEFAULT,
            convention: LogRatioConvention::Sum,
            batch_size: 64,
            warmup_ratio: 0.1,
            epochs: 1,
            schedule: ScheduleKind::LinearWarmupDecay,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            log_every: 1,
            metric_source: MetricSource::TrainBatch,
            separator: "\n".into(),
        }
    }
}

impl TrainConfig {
    /// A learning rate of zero is accepted and runs the loop without moving
    /// the weights.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidValue(m));
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad(format!("warmup_ratio must lie in [0, 1], got {}", self.warmup_ratio));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be positive".into());
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad("optimizer betas must lie in [0, 1)".into());
        }
        if !(o.eps > 0.0 && o.eps.is_finite()) {
            return bad("optimizer eps must be positive".into());
        }
        Ok(())
    }

    pub fn scaling(&self) -> Scaling {
        Scaling {
            beta: self.beta,
            convention: self.convention,
        }
    }

    pub fn tokenize_options(&self, model: &ModelConfig) -> TokenizeOptions {
        TokenizeOptions {
            separator: self.separator.clone(),
            context_len: model.context_len,
            ..TokenizeOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Nats per answer token.
    pub deviation_metric: f64,
    /// Mean detached gradient weight: `σ(−βΔ)` for the SFT variants,
    /// `σ(−margin)` for the pair objectives; absent for raw SFT.
    pub mean_coefficient: Option<f64>,
    /// Mean implicit reward `βΔ` in nats (chosen answers for pair
    /// objectives); absent for raw SFT.
    pub mean_reward: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub config: TrainConfig,
    pub model_config: ModelConfig,
    pub corpus_digest: String,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub records: Vec<StepRecord>,
    /// Path of the final checkpoint, when one was written.
    pub checkpoint: Option<String>,
}

pub const RUN_CSV_HEADER: [&str; 6] = ["step", "loss", "deviation_metric", "mean_coefficient", "mean_reward", "lr"];

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RunLog {
    /// One row per record; missing optional values are empty cells.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(RUN_CSV_HEADER)?;
        for r in &self.records {
            w.write_record([
                r.step.to_string(),
                r.loss.to_string(),
                r.deviation_metric.to_string(),
                fmt_opt(r.mean_coefficient),
                fmt_opt(r.mean_reward),
                r.lr.to_string(),
            ])?;
        }
        csv_string(w)
    }

    /// Everything in the log, including the config and corpus digest.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`, atomically.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        write_atomic(&dir.join(format!("{stem}.csv")), self.to_csv()?.as_bytes())?;
        write_atomic(&dir.join(format!("{stem}.json")), self.to_json()?.as_bytes())
    }
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidValue(format!("csv flush: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidValue(format!("csv encoding: {e}")))
}

/// Data-order seed for one epoch.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_add((epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn check_schema(objective: Objective, schema: Schema) -> Result<()> {
    let expected = if objective.uses_preference_pairs() {
        Schema::Preference
    } else {
        Schema::Sft
    };
    if schema == expected {
        Ok(())
    } else {
        Err(Error::SchemaMismatch {
            objective: objective.name(),
            expected: expected.name(),
            found: schema.name(),
        })
    }
}

/// Trains `model` in place on `corpus` and returns the step log.
pub fn train(model: &mut LanguageModel, corpus: &Corpus, config: &TrainConfig) -> Result<RunLog> {
    train_with_held_out(model, corpus, None, config)
}

/// As [`train`]; `held_out` supplies the samples for
/// [`MetricSource::HeldOut`].
pub fn train_with_held_out(
    model: &mut LanguageModel,
    corpus: &Corpus,
    held_out: Option<&Corpus>,
    config: &TrainConfig,
) -> Result<RunLog> {
    let mut trainer = Trainer::new(model.clone(), corpus, held_out, config)?;
    while !trainer.is_done() {
        trainer.step()?;
    }
    let (trained, log) = trainer.finish();
    *model = trained;
    Ok(log)
}

struct HeldOut {
    samples: Vec<Sample>,
    reference: Vec<LogProbSummary>,
}

enum BatchOwned {
    Sft(Vec<Sample>),
    Preference(Vec<objectives::PreferencePair>),
}

impl BatchOwned {
    fn as_ref(&self) -> BatchRef<'_> {
        match self {
            BatchOwned::Sft(s) => BatchRef::Sft(s),
            BatchOwned::Preference(p) => BatchRef::Preference(p),
        }
    }
}

/// A training run advanced one optimizer step at a time.
///
/// The reference is a copy of the model taken in [`Trainer::new`], before
/// any update, and is never written to afterwards.
pub struct Trainer {
    model: LanguageModel,
    reference: LanguageModel,
    optimizer: Optimizer,
    config: TrainConfig,
    tokenized: TokenizedCorpus,
    held_out: Option<HeldOut>,
    corpus_digest: String,
    per_epoch: usize,
    total_steps: usize,
    step: usize,
    epoch_batches: Vec<(BatchOwned, Vec<usize>)>,
    records: Vec<StepRecord>,
}

impl Trainer {
    /// Preference records in `held_out` contribute their chosen answers.
    pub fn new(model: LanguageModel, corpus: &Corpus, held_out: Option<&Corpus>, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        check_schema(config.objective, corpus.schema())?;
        let opts = config.tokenize_options(model.config());
        let tokenized = corpus.tokenize(&opts)?;
        if tokenized.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let held_out = match (config.metric_source, held_out) {
            (MetricSource::TrainBatch, _) => None,
            (MetricSource::HeldOut, None) => {
                return Err(Error::InvalidValue(
                    "metric_source = held_out needs a held-out corpus".into(),
                ))
            }
            (MetricSource::HeldOut, Some(c)) => {
                let samples: Vec<Sample> = match c.tokenize(&opts)? {
                    TokenizedCorpus::Sft(s) => s,
                    TokenizedCorpus::Preference(p) => p.into_iter().map(|p| p.chosen).collect(),
                };
                if samples.is_empty() {
                    return Err(Error::EmptyCorpus);
                }
                // The reference never changes, so its side is computed once.
                let reference = objectives::reference_logprobs(&model, &samples)?;
                Some(HeldOut { samples, reference })
            }
        };
        let per_epoch = tokenized.len().div_ceil(config.batch_size);
        Ok(Self {
            reference: model.clone(),
            optimizer: Optimizer::new(&config.optimizer, model.params()),
            model,
            config: config.clone(),
            tokenized,
            held_out,
            corpus_digest: corpus.digest()?,
            per_epoch,
            total_steps: per_epoch * config.epochs,
            step: 0,
            epoch_batches: Vec::new(),
            records: Vec::new(),
        })
    }

    pub fn model(&self) -> &LanguageModel {
        &self.model
    }

    pub fn reference(&self) -> &LanguageModel {
        &self.reference
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    /// Index of the next step to run.
    pub fn current_step(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps
    }

    fn batches_for_epoch(&self, epoch: usize) -> Result<Vec<(BatchOwned, Vec<usize>)>> {
        let seed = epoch_seed(self.config.seed, epoch);
        let bs = self.config.batch_size;
        Ok(match &self.tokenized {
            TokenizedCorpus::Sft(items) => make_batches(items, bs, seed)?
                .into_iter()
                .map(|b| (BatchOwned::Sft(b.items), b.indices))
                .collect(),
            TokenizedCorpus::Preference(items) => make_batches(items, bs, seed)?
                .into_iter()
                .map(|b| (BatchOwned::Preference(b.items), b.indices))
                .collect(),
        })
    }

    /// Runs one update and returns the record logged for it, if any.
    pub fn step(&mut self) -> Result<Option<&StepRecord>> {
        let step = self.step;
        if step >= self.total_steps {
            return Err(Error::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        let in_epoch = step % self.per_epoch;
        if in_epoch == 0 {
            self.epoch_batches = self.batches_for_epoch(step / self.per_epoch)?;
        }
        let lr = lr_at(step, self.total_steps, self.config.warmup_ratio, self.config.learning_rate)?;
        let log_now = step % self.config.log_every == 0 || step + 1 == self.total_steps;
        let (batch, indices) = &self.epoch_batches[in_epoch];
        let record = run_step(
            &mut self.model,
            &self.reference,
            &mut self.optimizer,
            &self.config,
            batch.as_ref(),
            indices,
            step,
            lr,
            log_now,
            self.held_out.as_ref(),
        )?;
        self.step += 1;
        Ok(match record {
            Some(r) => {
                self.records.push(r);
                self.records.last()
            }
            None => None,
        })
    }

    /// The trained model and the run log.
    pub fn finish(self) -> (LanguageModel, RunLog) {
        let log = RunLog {
            model_config: self.model.config().clone(),
            corpus_digest: self.corpus_digest,
            total_steps: self.total_steps,
            warmup_steps: warmup_steps(self.total_steps, self.config.warmup_ratio),
            records: self.records,
            checkpoint: None,
            config: self.config,
        };
        (self.model, log)
    }
}

#[allow(clippy::too_many_arguments)]
fn run_step(
    model: &mut LanguageModel,
    reference: &LanguageModel,
    optimizer: &mut Optimizer,
    config: &TrainConfig,
    batch: BatchRef<'_>,
    indices: &[usize],
    step: usize,
    lr: f64,
    log_now: bool,
    held_out: Option<&HeldOut>,
) -> Result<Option<StepRecord>> {
    let scaling = config.scaling();
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let want_reference = log_now && held_out.is_none();
    let non_finite = |detail: String| Error::NonFiniteLoss {
        step,
        indices: indices.to_vec(),
        detail,
    };
    let eval = objectives::evaluate(config.objective, &bound, reference, batch, scaling, want_reference)
        .map_err(|e| match e {
            Error::Domain { .. } | Error::NonFinite { .. } => non_finite(e.to_string()),
            e => e,
        })?;
    let loss = eval.loss.item();
    if !loss.is_finite() {
        return Err(non_finite(format!("loss evaluated to {loss}")));
    }
    let record = if log_now {
        // With a held-out set, every per-sample column describes that set;
        // only the pair objectives' margin weight stays on the train batch.
        let report = match held_out {
            Some(h) => {
                let theta = h
                    .samples
                    .iter()
                    .map(|s| model.answer_logprob(s))
                    .collect::<Result<Vec<_>>>()?;
                DeviationReport::from_summaries(&theta, &h.reference, scaling)?
            }
            None => DeviationReport::from_summaries(
                &eval.policy,
                eval.reference.as_deref().unwrap_or_default(),
                scaling,
            )?,
        };
        let (mean_coefficient, mean_reward) = match config.objective {
            Objective::RawSft => (None, None),
            Objective::SftUseDpo | Objective::MinorSft => {
                (Some(report.mean_coefficient()), Some(report.mean_reward()))
            }
            Objective::Dpo | Objective::MinorDpo => {
                let n = eval.pair_margins.len() as f64;
                let c = eval.pair_margins.iter().map(|&m| sigmoid(-m)).sum::<f64>() / n;
                (Some(c), Some(report.mean_reward()))
            }
        };
        let deviation_metric = report.metric;
        Some(StepRecord {
            step,
            loss,
            deviation_metric,
            mean_coefficient,
            mean_reward,
            lr,
        })
    } else {
        None
    };
    tape.backward(eval.loss)?;
    model.zero_grad();
    model.accumulate_grads(&bound);
    optimizer.step(model.params_mut(), lr);
    model.zero_grad();
    Ok(record)
}

/// One named run in a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub name: String,
    pub config: TrainConfig,
}

/// The three-method layout: raw SFT at `base_lr`, SFT-using-DPO and MinorSFT
/// at twice that with β = 0.04.
pub fn figure1_preset(base_lr: f64) -> Vec<RunSpec> {
    let run = |name: &str, objective, lr| RunSpec {
        name: name.into(),
        config: TrainConfig {
            objective,
            learning_rate: lr,
            beta: Beta::DEFAULT,
            ..TrainConfig::default()
        },
    };
    vec![
        run("raw_sft", Objective::RawSft, base_lr),
        run("sft_use_dpo", Objective::SftUseDpo, 2.0 * base_lr),
        run("minor_sft", Objective::MinorSft, 2.0 * base_lr),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    /// In the order the runs were given.
    pub runs: Vec<(String, RunLog)>,
}

pub const COMPARE_COLUMNS: [&str; 5] = ["metric", "loss", "coefficient", "reward", "lr"];

impl CompareReport {
    pub fn run(&self, name: &str) -> Option<&RunLog> {
        self.runs.iter().find(|(n, _)| n == name).map(|(_, l)| l)
    }

    /// Outer join on step: a `step` column, then `metric_<name>`,
    /// `loss_<name>`, `coefficient_<name>`, `reward_<name>` and `lr_<name>`
    /// for each run. Cells a run did not log are empty.
    pub fn to_csv(&self) -> Result<String> {
        let mut rows: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        let width = COMPARE_COLUMNS.len() * self.runs.len();
        for (k, (_, log)) in self.runs.iter().enumerate() {
            for r in &log.records {
                let row = rows.entry(r.step).or_insert_with(|| vec![String::new(); width]);
                let cells = [
                    r.deviation_metric.to_string(),
                    r.loss.to_string(),
                    fmt_opt(r.mean_coefficient),
                    fmt_opt(r.mean_reward),
                    r.lr.to_string(),
                ];
                for (j, c) in cells.into_iter().enumerate() {
                    row[k * COMPARE_COLUMNS.len() + j] = c;
                }
            }
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["step".to_string()];
        for (name, _) in &self.runs {
            header.extend(COMPARE_COLUMNS.iter().map(|c| format!("{c}_{name}")));
        }
        w.write_record(&header)?;
        for (step, cells) in rows {
            w.write_record(std::iter::once(step.to_string()).chain(cells))?;
        }
        csv_string(w)
    }
}

fn validate_runs(runs: &[RunSpec]) -> Result<()> {
    if runs.len() < 2 {
        return Err(Error::InvalidValue(format!("compare needs at least 2 runs, got {}", runs.len())));
    }
    let mut seen = HashSet::new();
    for r in runs {
        let ok_char = |c: char| c.is_ascii_alphanumeric() || c == '_' || c == '-';
        if r.name.is_empty() || !r.name.chars().all(ok_char) {
            return Err(Error::InvalidValue(format!(
                "run name {:?} must be non-empty and use only [A-Za-z0-9_-]",
                r.name
            )));
        }
        if !seen.insert(r.name.as_str()) {
            return Err(Error::InvalidValue(format!("duplicate run name {:?}", r.name)));
        }
        r.config.validate()?;
    }
    Ok(())
}

/// Trains a copy of `base` per run on the shared `corpus`, in parallel.
/// `held_out` is passed to runs whose metric source asks for it.
///
/// Every run's data-order seed is replaced by `master_seed`, so all runs see
/// the same batch sequence; nothing else in a run is random. The report is
/// independent of thread scheduling.
pub fn compare(
    base: &LanguageModel,
    corpus: &Corpus,
    held_out: Option<&Corpus>,
    runs: &[RunSpec],
    master_seed: u64,
) -> Result<CompareReport> {
    validate_runs(runs)?;
    let results: Vec<Result<RunLog>> = std::thread::scope(|scope| {
        let handles: Vec<_> = runs
            .iter()
            .map(|run| {
                scope.spawn(move || {
                    let mut model = base.clone();
                    let config = TrainConfig {
                        seed: master_seed,
                        ..run.config.clone()
                    };
                    log::info!("compare: starting run {}", run.name);
                    train_with_held_out(&mut model, corpus, held_out, &config)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
            .collect()
    });
    let mut out = Vec::with_capacity(runs.len());
    for (run, r) in runs.iter().zip(results) {
        out.push((run.name.clone(), r?));
    }
    Ok(CompareReport { runs: out })
}
