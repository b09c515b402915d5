//! Fixtures shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use minor_sft_core::gradcheck::random_batch;
use minor_sft_core::model::BoundModel;
use minor_sft_core::{LanguageModel, ModelConfig, PreferencePair, Result, Sample, Tape, Var};

pub fn model(seed: u64) -> LanguageModel {
    LanguageModel::new(ModelConfig {
        context_len: 32,
        init_seed: seed,
        ..ModelConfig::default()
    })
    .unwrap()
}

pub fn samples(seed: u64, n: usize) -> Vec<Sample> {
    random_batch(seed, n, 256).0
}

pub fn pairs(seed: u64, n: usize) -> Vec<PreferencePair> {
    random_batch(seed, n, 256).1
}

/// Loss value and the flattened gradient over every parameter.
pub fn loss_and_grad<F>(model: &LanguageModel, f: F) -> (f64, Vec<f64>)
where
    F: for<'t> Fn(&BoundModel<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let loss = f(&bound).unwrap();
    tape.backward(loss).unwrap();
    let grad = bound
        .vars()
        .iter()
        .flat_map(|v| v.grad().map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; v.numel()]))
        .collect();
    (loss.item(), grad)
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `max|a − b| / max|b|`.
pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// `log π(y|x)` token by token: each answer token is scored from a fresh
/// forward pass over its own prefix, with a hand-written log-sum-exp.
pub fn brute_force_logprob(model: &LanguageModel, sample: &Sample) -> f64 {
    let tokens = sample.tokens();
    let p = sample.prompt_tokens().len();
    let vocab = model.config().vocab_size;
    (p..tokens.len())
        .map(|pos| {
            let logits = model.forward_logits(&tokens[..pos]).unwrap();
            let row = &logits.data()[(pos - 1) * vocab..pos * vocab];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            row[tokens[pos] as usize] - lse
        })
        .sum()
}

/// Δ for an answer: `log π_θ − log π_ref`.
pub fn delta(policy: &LanguageModel, reference: &LanguageModel, s: &Sample) -> f64 {
    policy.answer_logprob(s).unwrap().sum_logprob - reference.answer_logprob(s).unwrap().sum_logprob
}

/// Random pairs whose rejected answers all have Δ of the requested sign.
pub fn pairs_with_rejected_sign(
    policy: &LanguageModel,
    reference: &LanguageModel,
    positive: bool,
    n: usize,
    seed: u64,
) -> Vec<PreferencePair> {
    let mut out = Vec::new();
    let mut s = seed;
    while out.len() < n {
        for pair in pairs(s, 16) {
            let d = delta(policy, reference, &pair.rejected);
            if (d > 0.0) == positive && d != 0.0 && out.len() < n {
                out.push(pair);
            }
        }
        s += 1;
    }
    out
}
