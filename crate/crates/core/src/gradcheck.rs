//! Finite-difference verification of every objective's analytic gradient on
//! a randomly initialised tiny model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{finite_diff_check_with, FdOptions, FdReport, Tape, Var};
use crate::error::Result;
use crate::model::{BoundModel, LanguageModel, ModelConfig, Sample, TokenId};
use crate::objectives::{self, Beta, Objective, PreferencePair};

/// Pass threshold on the maximum relative error.
pub const GRAD_CHECK_THRESHOLD: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub beta: Beta,
    pub epsilon: f64,
    pub coords_per_param: Option<usize>,
    pub batch_size: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                context_len: 32,
                ..ModelConfig::default()
            },
            // A large β keeps the log-ratio terms from being negligible.
            beta: Beta::new(0.5).expect("positive"),
            epsilon: 3e-5,
            coords_per_param: Some(4),
            batch_size: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ObjectiveCheck {
    pub objective: Objective,
    pub seed: u64,
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst_param: Option<String>,
    pub passed: bool,
}

impl ObjectiveCheck {
    fn from_report(objective: Objective, seed: u64, report: FdReport) -> Self {
        Self {
            objective,
            seed,
            max_rel_error: report.max_rel_error,
            checked: report.checked,
            worst_param: report.worst.map(|w| format!("{}[{}]", w.param, w.index)),
            passed: report.max_rel_error < GRAD_CHECK_THRESHOLD,
        }
    }
}

fn random_tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<TokenId> {
    // Printable ASCII when the vocabulary allows it.
    let (lo, hi) = if vocab > 126 { (32, 127) } else { (0, vocab as u32) };
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}

/// Random short samples and pairs drawn from `seed`.
pub fn random_batch(seed: u64, n: usize, vocab: usize) -> (Vec<Sample>, Vec<PreferencePair>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c);
    let mut samples = Vec::with_capacity(n);
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let prompt_len = rng.random_range(2..6);
        let prompt = random_tokens(&mut rng, prompt_len, vocab);
        let chosen_len = rng.random_range(2..6);
        let chosen = random_tokens(&mut rng, chosen_len, vocab);
        let rejected_len = rng.random_range(2..6);
        let rejected = random_tokens(&mut rng, rejected_len, vocab);
        samples.push(Sample::new(prompt.clone(), chosen.clone()).expect("non-empty"));
        pairs.push(PreferencePair::new(prompt, chosen, rejected).expect("non-empty"));
    }
    (samples, pairs)
}

/// Builds the objective's loss for the given policy vars.
pub fn objective_loss<'t>(
    objective: Objective,
    policy: &BoundModel<'t>,
    reference: &LanguageModel,
    samples: &[Sample],
    pairs: &[PreferencePair],
    beta: Beta,
) -> Result<Var<'t>> {
    match objective {
        Objective::RawSft => objectives::raw_sft_loss(policy, samples),
        Objective::SftUseDpo => objectives::sft_use_dpo_loss(policy, reference, samples, beta),
        Objective::MinorSft => objectives::minor_sft_loss(policy, reference, samples, beta),
        Objective::Dpo => objectives::dpo_loss(policy, reference, pairs, beta),
        Objective::MinorDpo => objectives::minor_dpo_loss(policy, reference, pairs, beta),
    }
}

/// Σ (2/m)·c_i·(−log π_θ(y_i|x_i)) / N with the weights `c_i` held fixed.
/// This is the function whose gradient MinorSFT's stop-gradient loss
/// reproduces, built straight from answer log-probabilities.
pub fn frozen_weight_nll<'t>(policy: &BoundModel<'t>, samples: &[Sample], weights: &[f64]) -> Result<Var<'t>> {
    let mut total = None;
    for (s, &c) in samples.iter().zip(weights) {
        let lp = policy.answer_logprob(s)?;
        let term = lp.sum.scale(-2.0 * c / lp.answer_len as f64);
        total = Some(match total {
            None => term,
            Some(acc) => term.add(acc)?,
        });
    }
    Ok(total.ok_or(crate::Error::EmptyBatch)?.scale(1.0 / samples.len() as f64))
}

// Pins a closure to the higher-ranked signature the checker expects.
fn loss_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    f
}

/// Policy and reference differ (independent seeds) so that no log-ratio sits
/// at zero, where MinorDPO's clamp is not differentiable.
///
/// MinorSFT's loss value is a surrogate whose derivative is not its analytic
/// gradient, so its numeric side differentiates [`frozen_weight_nll`] with
/// the coefficients evaluated at the unperturbed parameters.
pub fn check_objective(objective: Objective, seed: u64, cfg: &GradCheckConfig) -> Result<ObjectiveCheck> {
    let policy = LanguageModel::new(ModelConfig {
        init_seed: seed,
        ..cfg.model.clone()
    })?;
    let reference = LanguageModel::new(ModelConfig {
        init_seed: seed.wrapping_add(0x9e37_79b9),
        ..cfg.model.clone()
    })?;
    let (samples, pairs) = random_batch(seed, cfg.batch_size, cfg.model.vocab_size);
    let opts = FdOptions {
        epsilon: cfg.epsilon,
        coords_per_param: cfg.coords_per_param,
        seed,
    };
    let config = policy.config().clone();
    let analytic = loss_fn(|_tape, vars| {
        let bound = BoundModel::from_vars(config.clone(), vars.to_vec())?;
        objective_loss(objective, &bound, &reference, &samples, &pairs, cfg.beta)
    });
    let report = if objective == Objective::MinorSft {
        let weights = samples
            .iter()
            .map(|s| {
                objectives::minor_sft_coefficient(
                    &policy.answer_logprob(s)?,
                    &reference.answer_logprob(s)?,
                    cfg.beta,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let numeric = loss_fn(|_tape, vars| {
            let bound = BoundModel::from_vars(config.clone(), vars.to_vec())?;
            frozen_weight_nll(&bound, &samples, &weights)
        });
        finite_diff_check_with(&analytic, numeric, policy.params(), &opts)?
    } else {
        finite_diff_check_with(&analytic, &analytic, policy.params(), &opts)?
    };
    Ok(ObjectiveCheck::from_report(objective, seed, report))
}
