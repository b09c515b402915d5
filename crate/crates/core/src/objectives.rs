//! Training objectives built on answer log-probabilities.
//!
//! All log-ratios `Δ = log π_θ(y|x) − log π_ref(y|x)` are taken over the
//! summed answer log-probability unless [`LogRatioConvention::Mean`] is
//! selected, in which case `Δ/m` enters every β-scaled term. The `1/m` of
//! the SFT negative log-likelihood is unaffected by the convention.
//!
//! | objective     | per-sample loss                                  |
//! |---------------|--------------------------------------------------|
//! | raw SFT       | `−(1/m)·log π_θ(y|x)`                            |
//! | SFT-using-DPO | `−log σ(β·Δ)`                                    |
//! | MinorSFT      | `(2/m)·sg[σ(−β·Δ)]·(−log π_θ(y|x))`             |
//! | DPO           | `−log σ(β·Δ_w − β·Δ_l)`                          |
//! | MinorDPO      | `−log σ(β·Δ_w − β·max(0, Δ_l))`                  |
//!
//! `sg` stops the gradient, so the MinorSFT gradient is the raw SFT
//! per-sample gradient scaled by `2σ(−β·Δ)`. Batch losses are means.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::model::{BoundModel, LanguageModel, LogProbSummary, LogProbVar, Sample};

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Beta(f64);

impl Beta {
    pub const DEFAULT: Beta = Beta(0.04);

    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value > 0.0 {
            Ok(Self(value))
        } else {
            Err(Error::InvalidValue(format!("beta must be positive and finite, got {value}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Beta {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl TryFrom<f64> for Beta {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Self::new(value)
    }
}

impl From<Beta> for f64 {
    fn from(b: Beta) -> f64 {
        b.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogRatioConvention {
    #[default]
    Sum,
    Mean,
}

/// β together with the log-ratio convention it multiplies.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Scaling {
    pub beta: Beta,
    pub convention: LogRatioConvention,
}

impl From<Beta> for Scaling {
    fn from(beta: Beta) -> Self {
        Self {
            beta,
            convention: LogRatioConvention::Sum,
        }
    }
}

impl Scaling {
    /// Multiplier turning a summed log-ratio into `β·Δ` under the convention.
    fn factor(&self, answer_len: usize) -> f64 {
        match self.convention {
            LogRatioConvention::Sum => self.beta.0,
            LogRatioConvention::Mean => self.beta.0 / answer_len as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    RawSft,
    SftUseDpo,
    MinorSft,
    Dpo,
    MinorDpo,
}

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::RawSft,
        Objective::SftUseDpo,
        Objective::MinorSft,
        Objective::Dpo,
        Objective::MinorDpo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::RawSft => "raw_sft",
            Objective::SftUseDpo => "sft_use_dpo",
            Objective::MinorSft => "minor_sft",
            Objective::Dpo => "dpo",
            Objective::MinorDpo => "minor_dpo",
        }
    }

    pub fn uses_preference_pairs(self) -> bool {
        matches!(self, Objective::Dpo | Objective::MinorDpo)
    }

    pub fn uses_reference(self) -> bool {
        self != Objective::RawSft
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::InvalidValue(format!("unknown objective {s:?}")))
    }
}

/// Tokenized `(prompt, chosen, rejected)` triple.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferencePair {
    pub chosen: Sample,
    pub rejected: Sample,
}

impl PreferencePair {
    pub fn new(
        prompt: Vec<crate::model::TokenId>,
        chosen: Vec<crate::model::TokenId>,
        rejected: Vec<crate::model::TokenId>,
    ) -> Result<Self> {
        Ok(Self {
            chosen: Sample::new(prompt.clone(), chosen)?,
            rejected: Sample::new(prompt, rejected)?,
        })
    }

    pub fn prompt_tokens(&self) -> &[crate::model::TokenId] {
        self.chosen.prompt_tokens()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_lengths(theta: &LogProbSummary, reference: &LogProbSummary) -> Result<()> {
    if theta.answer_len != reference.answer_len {
        return Err(Error::AnswerLengthMismatch {
            policy: theta.answer_len,
            reference: reference.answer_len,
        });
    }
    Ok(())
}

/// `r̂ = β·(log π_θ(y|x) − log π_ref(y|x))`.
pub fn implicit_reward(
    theta: &LogProbSummary,
    reference: &LogProbSummary,
    beta: impl Into<Scaling>,
) -> Result<f64> {
    check_lengths(theta, reference)?;
    let s = beta.into();
    Ok(s.factor(theta.answer_len) * (theta.sum_logprob - reference.sum_logprob))
}

/// `σ(−β·Δ)`, the per-sample MinorSFT weight before the factor 2.
pub fn minor_sft_coefficient(
    theta: &LogProbSummary,
    reference: &LogProbSummary,
    beta: impl Into<Scaling>,
) -> Result<f64> {
    Ok(sigmoid(-implicit_reward(theta, reference, beta)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SampleDiagnostics {
    /// Summed log-ratio in nats.
    pub delta: f64,
    pub reward: f64,
    pub coefficient: f64,
    /// `delta / m`, nats per token.
    pub per_sample_deviation: f64,
    pub answer_len: usize,
}

impl SampleDiagnostics {
    pub fn compute(
        theta: &LogProbSummary,
        reference: &LogProbSummary,
        beta: impl Into<Scaling>,
    ) -> Result<Self> {
        let reward = implicit_reward(theta, reference, beta)?;
        let delta = theta.sum_logprob - reference.sum_logprob;
        Ok(Self {
            delta,
            reward,
            coefficient: sigmoid(-reward),
            per_sample_deviation: delta / theta.answer_len as f64,
            answer_len: theta.answer_len,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationReport {
    /// `(1/N)·Σ (1/m)·Δ`, nats per token.
    pub metric: f64,
    pub batch_size: usize,
    pub per_sample: Vec<SampleDiagnostics>,
}

impl DeviationReport {
    pub fn from_summaries(
        theta: &[LogProbSummary],
        reference: &[LogProbSummary],
        beta: impl Into<Scaling>,
    ) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if theta.len() != reference.len() {
            return Err(Error::InvalidValue(format!(
                "{} policy summaries vs {} reference summaries",
                theta.len(),
                reference.len()
            )));
        }
        let s = beta.into();
        let per_sample = theta
            .iter()
            .zip(reference)
            .map(|(t, r)| SampleDiagnostics::compute(t, r, s))
            .collect::<Result<Vec<_>>>()?;
        let total: f64 = per_sample.iter().map(|d| d.per_sample_deviation).sum();
        Ok(Self {
            metric: total / per_sample.len() as f64,
            batch_size: per_sample.len(),
            per_sample,
        })
    }

    pub fn mean_coefficient(&self) -> f64 {
        self.per_sample.iter().map(|d| d.coefficient).sum::<f64>() / self.batch_size as f64
    }

    pub fn mean_reward(&self) -> f64 {
        self.per_sample.iter().map(|d| d.reward).sum::<f64>() / self.batch_size as f64
    }
}

/// Normalised deviation of `model` from `reference` on `batch`. The metric
/// itself does not depend on β; β only feeds the per-sample reward and
/// coefficient columns.
pub fn deviation_metric(
    model: &LanguageModel,
    reference: &LanguageModel,
    batch: &[Sample],
    beta: impl Into<Scaling>,
) -> Result<DeviationReport> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !model.config().same_architecture(reference.config()) {
        return Err(Error::ConfigMismatch);
    }
    let theta = batch
        .iter()
        .map(|s| model.answer_logprob(s))
        .collect::<Result<Vec<_>>>()?;
    let refs = reference_logprobs(reference, batch)?;
    DeviationReport::from_summaries(&theta, &refs, beta)
}

pub fn reference_logprobs(reference: &LanguageModel, batch: &[Sample]) -> Result<Vec<LogProbSummary>> {
    batch.iter().map(|s| reference.answer_logprob(s)).collect()
}

pub fn policy_logprobs<'t>(policy: &BoundModel<'t>, batch: &[Sample]) -> Result<Vec<LogProbVar<'t>>> {
    batch.iter().map(|s| policy.answer_logprob(s)).collect()
}

fn batch_mean<'t>(losses: Vec<Var<'t>>) -> Result<Var<'t>> {
    let first = losses.first().ok_or(Error::EmptyBatch)?;
    Ok(first.tape().stack(&losses)?.mean())
}

/// `β·Δ` as a differentiable scalar.
fn scaled_log_ratio<'t>(theta: &LogProbVar<'t>, reference: &LogProbSummary, s: Scaling) -> Result<Var<'t>> {
    if theta.answer_len != reference.answer_len {
        return Err(Error::AnswerLengthMismatch {
            policy: theta.answer_len,
            reference: reference.answer_len,
        });
    }
    Ok(theta
        .sum
        .add_scalar(-reference.sum_logprob)
        .scale(s.factor(theta.answer_len)))
}

pub fn raw_sft_from<'t>(theta: &[LogProbVar<'t>]) -> Result<Var<'t>> {
    batch_mean(
        theta
            .iter()
            .map(|lp| lp.sum.scale(-1.0 / lp.answer_len as f64))
            .collect(),
    )
}

pub fn sft_use_dpo_from<'t>(
    theta: &[LogProbVar<'t>],
    reference: &[LogProbSummary],
    s: Scaling,
) -> Result<Var<'t>> {
    check_batch(theta.len(), reference.len())?;
    let losses = theta
        .iter()
        .zip(reference)
        .map(|(t, r)| Ok(scaled_log_ratio(t, r, s)?.neg().softplus()))
        .collect::<Result<Vec<_>>>()?;
    batch_mean(losses)
}

pub fn minor_sft_from<'t>(
    theta: &[LogProbVar<'t>],
    reference: &[LogProbSummary],
    s: Scaling,
) -> Result<Var<'t>> {
    check_batch(theta.len(), reference.len())?;
    let losses = theta
        .iter()
        .zip(reference)
        .map(|(t, r)| {
            let coefficient = scaled_log_ratio(t, r, s)?.neg().sigmoid().detach();
            coefficient
                .scale(2.0 / t.answer_len as f64)
                .mul(t.sum.neg())
        })
        .collect::<Result<Vec<_>>>()?;
    batch_mean(losses)
}

/// Log-probabilities needed for a batch of preference pairs.
pub struct PairLogProbs<'a, 't> {
    pub chosen: &'a [LogProbVar<'t>],
    pub chosen_ref: &'a [LogProbSummary],
    pub rejected: &'a [LogProbVar<'t>],
    pub rejected_ref: &'a [LogProbSummary],
}

fn pair_losses<'t>(lp: &PairLogProbs<'_, 't>, s: Scaling, clamp_rejected: bool) -> Result<Var<'t>> {
    let n = lp.chosen.len();
    check_batch(n, lp.chosen_ref.len())?;
    check_batch(n, lp.rejected.len())?;
    check_batch(n, lp.rejected_ref.len())?;
    let losses = (0..n)
        .map(|i| {
            let chosen = scaled_log_ratio(&lp.chosen[i], &lp.chosen_ref[i], s)?;
            let mut rejected = scaled_log_ratio(&lp.rejected[i], &lp.rejected_ref[i], s)?;
            if clamp_rejected {
                rejected = rejected.max_with_zero();
            }
            Ok(chosen.sub(rejected)?.neg().softplus())
        })
        .collect::<Result<Vec<_>>>()?;
    batch_mean(losses)
}

pub fn dpo_from<'t>(lp: &PairLogProbs<'_, 't>, s: Scaling) -> Result<Var<'t>> {
    pair_losses(lp, s, false)
}

pub fn minor_dpo_from<'t>(lp: &PairLogProbs<'_, 't>, s: Scaling) -> Result<Var<'t>> {
    pair_losses(lp, s, true)
}

fn check_batch(policy: usize, reference: usize) -> Result<()> {
    if policy == 0 {
        return Err(Error::EmptyBatch);
    }
    if policy != reference {
        return Err(Error::InvalidValue(format!(
            "batch has {policy} policy entries and {reference} reference entries"
        )));
    }
    Ok(())
}

fn check_models(policy: &BoundModel<'_>, reference: &LanguageModel) -> Result<()> {
    if !policy.config().same_architecture(reference.config()) {
        return Err(Error::ConfigMismatch);
    }
    Ok(())
}

/// Mean over the batch of `−(1/m)·log π_θ(y|x)`.
pub fn raw_sft_loss<'t>(policy: &BoundModel<'t>, batch: &[Sample]) -> Result<Var<'t>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    raw_sft_from(&policy_logprobs(policy, batch)?)
}

pub fn sft_use_dpo_loss<'t>(
    policy: &BoundModel<'t>,
    reference: &LanguageModel,
    batch: &[Sample],
    beta: impl Into<Scaling>,
) -> Result<Var<'t>> {
    check_models(policy, reference)?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let refs = reference_logprobs(reference, batch)?;
    sft_use_dpo_from(&policy_logprobs(policy, batch)?, &refs, beta.into())
}

pub fn minor_sft_loss<'t>(
    policy: &BoundModel<'t>,
    reference: &LanguageModel,
    batch: &[Sample],
    beta: impl Into<Scaling>,
) -> Result<Var<'t>> {
    check_models(policy, reference)?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let refs = reference_logprobs(reference, batch)?;
    minor_sft_from(&policy_logprobs(policy, batch)?, &refs, beta.into())
}

fn pair_inputs<'t>(
    policy: &BoundModel<'t>,
    reference: &LanguageModel,
    pairs: &[PreferencePair],
) -> Result<PairInputs<'t>> {
    check_models(policy, reference)?;
    if pairs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let chosen: Vec<Sample> = pairs.iter().map(|p| p.chosen.clone()).collect();
    let rejected: Vec<Sample> = pairs.iter().map(|p| p.rejected.clone()).collect();
    Ok(PairInputs {
        chosen: policy_logprobs(policy, &chosen)?,
        chosen_ref: reference_logprobs(reference, &chosen)?,
        rejected: policy_logprobs(policy, &rejected)?,
        rejected_ref: reference_logprobs(reference, &rejected)?,
    })
}

struct PairInputs<'t> {
    chosen: Vec<LogProbVar<'t>>,
    chosen_ref: Vec<LogProbSummary>,
    rejected: Vec<LogProbVar<'t>>,
    rejected_ref: Vec<LogProbSummary>,
}

impl<'t> PairInputs<'t> {
    fn view(&self) -> PairLogProbs<'_, 't> {
        PairLogProbs {
            chosen: &self.chosen,
            chosen_ref: &self.chosen_ref,
            rejected: &self.rejected,
            rejected_ref: &self.rejected_ref,
        }
    }
}

pub fn dpo_loss<'t>(
    policy: &BoundModel<'t>,
    reference: &LanguageModel,
    pairs: &[PreferencePair],
    beta: impl Into<Scaling>,
) -> Result<Var<'t>> {
    let inputs = pair_inputs(policy, reference, pairs)?;
    dpo_from(&inputs.view(), beta.into())
}

pub fn minor_dpo_loss<'t>(
    policy: &BoundModel<'t>,
    reference: &LanguageModel,
    pairs: &[PreferencePair],
    beta: impl Into<Scaling>,
) -> Result<Var<'t>> {
    let inputs = pair_inputs(policy, reference, pairs)?;
    minor_dpo_from(&inputs.view(), beta.into())
}

/// A batch in either schema.
#[derive(Debug, Clone, Copy)]
pub enum BatchRef<'a> {
    Sft(&'a [Sample]),
    Preference(&'a [PreferencePair]),
}

/// Loss plus the log-probabilities computed along the way.
#[derive(Debug)]
pub struct ObjectiveEval<'t> {
    pub loss: Var<'t>,
    /// Answer (or chosen answer) log-probabilities under the policy.
    pub policy: Vec<LogProbSummary>,
    /// Same samples under the reference, when it was evaluated.
    pub reference: Option<Vec<LogProbSummary>>,
    /// Per-pair `β·Δ_w − β·Δ_l` (clamped for MinorDPO); empty for SFT batches.
    pub pair_margins: Vec<f64>,
}

/// Evaluates `objective` on `batch`. For raw SFT the reference is only run
/// when `want_reference` is set.
pub fn evaluate<'t>(
    objective: Objective,
    policy: &BoundModel<'t>,
    reference: &LanguageModel,
    batch: BatchRef<'_>,
    beta: impl Into<Scaling>,
    want_reference: bool,
) -> Result<ObjectiveEval<'t>> {
    let s = beta.into();
    check_models(policy, reference)?;
    match (objective, batch) {
        (Objective::RawSft | Objective::SftUseDpo | Objective::MinorSft, BatchRef::Sft(samples)) => {
            if samples.is_empty() {
                return Err(Error::EmptyBatch);
            }
            let theta = policy_logprobs(policy, samples)?;
            let refs = if objective.uses_reference() || want_reference {
                Some(reference_logprobs(reference, samples)?)
            } else {
                None
            };
            let loss = match objective {
                Objective::RawSft => raw_sft_from(&theta)?,
                Objective::SftUseDpo => sft_use_dpo_from(&theta, refs.as_deref().unwrap_or_default(), s)?,
                _ => minor_sft_from(&theta, refs.as_deref().unwrap_or_default(), s)?,
            };
            Ok(ObjectiveEval {
                loss,
                policy: theta.iter().map(LogProbVar::summary).collect(),
                reference: refs,
                pair_margins: Vec::new(),
            })
        }
        (Objective::Dpo | Objective::MinorDpo, BatchRef::Preference(pairs)) => {
            let inputs = pair_inputs(policy, reference, pairs)?;
            let clamp = objective == Objective::MinorDpo;
            let loss = pair_losses(&inputs.view(), s, clamp)?;
            let pair_margins = (0..pairs.len())
                .map(|i| {
                    let w = implicit_reward(&inputs.chosen[i].summary(), &inputs.chosen_ref[i], s)?;
                    let l = implicit_reward(&inputs.rejected[i].summary(), &inputs.rejected_ref[i], s)?;
                    Ok(w - if clamp { l.max(0.0) } else { l })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ObjectiveEval {
                loss,
                policy: inputs.chosen.iter().map(LogProbVar::summary).collect(),
                reference: Some(inputs.chosen_ref),
                pair_margins,
            })
        }
        (o, BatchRef::Sft(_)) => Err(Error::SchemaMismatch {
            objective: o.name(),
            expected: "preference",
            found: "sft",
        }),
        (o, BatchRef::Preference(_)) => Err(Error::SchemaMismatch {
            objective: o.name(),
            expected: "sft",
            found: "preference",
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lp(sum: f64, m: usize) -> LogProbSummary {
        LogProbSummary::new(sum, m)
    }

    #[test]
    fn beta_validation() {
        assert!(Beta::new(0.0).is_err());
        assert!(Beta::new(-1.0).is_err());
        assert!(Beta::new(f64::NAN).is_err());
        assert_eq!(Beta::default().value(), 0.04);
    }

    #[test]
    fn reward_examples() {
        let b = Beta::new(0.5).unwrap();
        assert_eq!(implicit_reward(&lp(-7.0, 3), &lp(-7.0, 3), b).unwrap(), 0.0);
        assert_eq!(implicit_reward(&lp(-10.0, 4), &lp(-12.0, 4), b).unwrap(), 1.0);
        assert!(matches!(
            implicit_reward(&lp(-10.0, 4), &lp(-12.0, 5), b),
            Err(Error::AnswerLengthMismatch { .. })
        ));
    }

    #[test]
    fn coefficient_examples() {
        let b = Beta::new(0.5).unwrap();
        assert_eq!(minor_sft_coefficient(&lp(-3.0, 2), &lp(-3.0, 2), b).unwrap(), 0.5);
        // Δ = −2 → σ(1).
        let c = minor_sft_coefficient(&lp(-5.0, 2), &lp(-3.0, 2), b).unwrap();
        assert!((c - 0.731_058_578_630_004_9).abs() < 1e-12);
        // Δ = +40 → σ(−20).
        let c = minor_sft_coefficient(&lp(-1.0, 2), &lp(-41.0, 2), b).unwrap();
        assert!(c < 1e-8 && c > 0.0);
    }

    #[test]
    fn mean_convention_divides_by_length() {
        let s = Scaling {
            beta: Beta::new(0.5).unwrap(),
            convention: LogRatioConvention::Mean,
        };
        assert_eq!(implicit_reward(&lp(-10.0, 4), &lp(-12.0, 4), s).unwrap(), 0.25);
    }

    #[test]
    fn diagnostics_invariants() {
        let d = SampleDiagnostics::compute(&lp(-4.0, 4), &lp(-10.0, 4), Beta::new(0.3).unwrap()).unwrap();
        assert_eq!(d.delta, 6.0);
        assert_eq!(d.coefficient, sigmoid(-d.reward));
        assert_eq!(d.per_sample_deviation, 1.5);
    }

    #[test]
    fn report_mean_and_empty_batch() {
        let theta = [lp(-4.0, 4), lp(-2.0, 1)];
        let refs = [lp(-8.0, 4), lp(-2.0, 1)];
        let r = DeviationReport::from_summaries(&theta, &refs, Beta::default()).unwrap();
        assert_eq!(r.metric, 0.5);
        assert_eq!(r.batch_size, 2);
        assert!(matches!(
            DeviationReport::from_summaries(&[], &[], Beta::default()),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn objective_names_round_trip() {
        for o in Objective::ALL {
            assert_eq!(o.name().parse::<Objective>().unwrap(), o);
            assert_eq!(serde_json::to_string(&o).unwrap(), format!("\"{}\"", o.name()));
        }
        assert!("ipo".parse::<Objective>().is_err());
    }
}
