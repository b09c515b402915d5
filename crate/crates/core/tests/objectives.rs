//! Identities and invariants of the objectives, the coefficient and the
//! deviation metric.

mod common;

use common::*;
use minor_sft_core::objectives::{
    deviation_metric, dpo_loss, implicit_reward, minor_dpo_loss, minor_sft_coefficient, minor_sft_loss,
    raw_sft_loss, sft_use_dpo_loss, LogRatioConvention, Scaling,
};
use minor_sft_core::{Beta, LogProbSummary, Sample};
use proptest::prelude::*;

const LN2: f64 = std::f64::consts::LN_2;

fn beta(b: f64) -> Beta {
    Beta::new(b).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn minor_sft_gradient_equals_raw_sft_at_init(seed in any::<u64>(), n in 1usize..4, b in 0.01f64..2.0) {
        let m = model(seed);
        let reference = m.clone();
        let batch = samples(seed, n);
        let (raw_v, raw_g) = loss_and_grad(&m, |p| raw_sft_loss(p, &batch));
        let (minor_v, minor_g) = loss_and_grad(&m, |p| minor_sft_loss(p, &reference, &batch, beta(b)));
        prop_assert!(max_rel_diff(&minor_g, &raw_g) <= 1e-12);
        prop_assert!((minor_v - raw_v).abs() <= 1e-12 * raw_v.abs());
    }

    #[test]
    fn preference_style_losses_are_ln2_at_init(seed in any::<u64>(), n in 1usize..4, b in 0.01f64..2.0) {
        let m = model(seed);
        let reference = m.clone();
        let batch = samples(seed, n);
        let pairs = pairs(seed, n);
        let (v, _) = loss_and_grad(&m, |p| sft_use_dpo_loss(p, &reference, &batch, beta(b)));
        prop_assert!((v - LN2).abs() <= 1e-12);
        let (v, _) = loss_and_grad(&m, |p| dpo_loss(p, &reference, &pairs, beta(b)));
        prop_assert!((v - LN2).abs() <= 1e-12);
        let (v, _) = loss_and_grad(&m, |p| minor_dpo_loss(p, &reference, &pairs, beta(b)));
        prop_assert!((v - LN2).abs() <= 1e-12);
    }

    #[test]
    fn coefficient_in_unit_interval_and_strictly_decreasing(
        ref_lp in -200.0f64..0.0,
        d1 in -600.0f64..600.0,
        gap in 1e-3f64..100.0,
        b in 0.001f64..0.05,
        m in 1usize..64,
    ) {
        // |βΔ| stays below ~36, where σ is still representable away from
        // 0 and 1 in f64.
        let reference = LogProbSummary::new(ref_lp, m);
        let c = |d: f64| minor_sft_coefficient(&LogProbSummary::new(ref_lp + d, m), &reference, beta(b)).unwrap();
        let (c1, c2) = (c(d1), c(d1 + gap));
        prop_assert!(c1 > 0.0 && c1 < 1.0);
        prop_assert!(c2 > 0.0 && c2 < 1.0);
        prop_assert!(c2 < c1);
    }

    #[test]
    fn per_sample_gradient_ratio_is_twice_the_coefficient(seed in any::<u64>(), b in 0.01f64..1.0) {
        let policy = model(seed);
        let reference = model(seed ^ 0xabcd);
        let s = samples(seed, 1);
        let c = minor_sft_coefficient(
            &policy.answer_logprob(&s[0]).unwrap(),
            &reference.answer_logprob(&s[0]).unwrap(),
            beta(b),
        ).unwrap();
        let (_, raw) = loss_and_grad(&policy, |p| raw_sft_loss(p, &s));
        let (_, minor) = loss_and_grad(&policy, |p| minor_sft_loss(p, &reference, &s, beta(b)));
        let ratio = norm(&minor) / norm(&raw);
        prop_assert!(ratio > 0.0 && ratio < 2.0);
        prop_assert!((ratio - 2.0 * c).abs() <= 1e-10 * 2.0 * c);
    }

    #[test]
    fn deviation_metric_matches_brute_force(seed in any::<u64>(), n in 1usize..4) {
        let policy = model(seed);
        let reference = model(seed.wrapping_add(1));
        let batch = samples(seed, n);
        let report = deviation_metric(&policy, &reference, &batch, Beta::DEFAULT).unwrap();
        let brute = batch
            .iter()
            .map(|s| (brute_force_logprob(&policy, s) - brute_force_logprob(&reference, s)) / s.answer_len() as f64)
            .sum::<f64>()
            / n as f64;
        prop_assert!((report.metric - brute).abs() <= 1e-10);
    }

    #[test]
    fn deviation_metric_is_independent_of_beta(seed in any::<u64>(), b1 in 0.001f64..5.0, b2 in 0.001f64..5.0) {
        let policy = model(seed);
        let reference = model(seed.wrapping_add(1));
        let batch = samples(seed, 3);
        let r1 = deviation_metric(&policy, &reference, &batch, beta(b1)).unwrap();
        let r2 = deviation_metric(&policy, &reference, &batch, beta(b2)).unwrap();
        prop_assert_eq!(r1.metric.to_bits(), r2.metric.to_bits());
    }
}

#[test]
fn deviation_metric_is_zero_against_itself() {
    let m = model(3);
    let r = deviation_metric(&m, &m.clone(), &samples(3, 5), Beta::DEFAULT).unwrap();
    assert_eq!(r.metric, 0.0);
    assert!(r.per_sample.iter().all(|d| d.coefficient == 0.5 && d.reward == 0.0));
}

#[test]
fn minor_dpo_equals_dpo_when_every_rejected_log_ratio_is_positive() {
    let policy = model(11);
    let reference = model(12);
    let pairs = pairs_with_rejected_sign(&policy, &reference, true, 4, 0);
    let (dv, dg) = loss_and_grad(&policy, |p| dpo_loss(p, &reference, &pairs, beta(0.5)));
    let (mv, mg) = loss_and_grad(&policy, |p| minor_dpo_loss(p, &reference, &pairs, beta(0.5)));
    assert!((dv - mv).abs() <= 1e-12 * dv.abs());
    assert!(max_rel_diff(&mg, &dg) <= 1e-12);
}

#[test]
fn rejected_answers_contribute_nothing_when_their_log_ratio_is_negative() {
    let policy = model(11);
    let reference = model(12);
    let pairs = pairs_with_rejected_sign(&policy, &reference, false, 4, 0);
    let chosen: Vec<Sample> = pairs.iter().map(|p| p.chosen.clone()).collect();
    let (mv, mg) = loss_and_grad(&policy, |p| minor_dpo_loss(p, &reference, &pairs, beta(0.5)));
    let (sv, sg) = loss_and_grad(&policy, |p| sft_use_dpo_loss(p, &reference, &chosen, beta(0.5)));
    assert!((mv - sv).abs() <= 1e-12 * sv.abs());
    assert!(max_rel_diff(&mg, &sg) <= 1e-12);

    // Swapping in other rejected answers, also below the reference, leaves
    // the gradient bitwise unchanged.
    let others = pairs_with_rejected_sign(&policy, &reference, false, 40, 1000);
    let swapped: Vec<_> = pairs
        .iter()
        .zip(others.iter().filter(|o| o.rejected != pairs[0].rejected))
        .map(|(p, o)| minor_sft_core::PreferencePair {
            chosen: p.chosen.clone(),
            rejected: o.rejected.clone(),
        })
        .collect();
    let (_, swapped_g) = loss_and_grad(&policy, |p| minor_dpo_loss(p, &reference, &swapped, beta(0.5)));
    assert!(mg.iter().zip(&swapped_g).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn mean_convention_scales_every_beta_term_by_answer_length() {
    let t = LogProbSummary::new(-10.0, 5);
    let r = LogProbSummary::new(-20.0, 5);
    let mean = Scaling {
        beta: beta(0.5),
        convention: LogRatioConvention::Mean,
    };
    assert_eq!(implicit_reward(&t, &r, beta(0.5)).unwrap(), 5.0);
    assert_eq!(implicit_reward(&t, &r, mean).unwrap(), 1.0);
}

#[test]
fn schema_mismatch_in_evaluate() {
    use minor_sft_core::objectives::{evaluate, BatchRef};
    use minor_sft_core::{Objective, Tape};
    let m = model(0);
    let tape = Tape::new();
    let bound = m.bind(&tape);
    let batch = samples(0, 2);
    let err = evaluate(Objective::Dpo, &bound, &m, BatchRef::Sft(&batch), Beta::DEFAULT, false).unwrap_err();
    assert!(err.to_string().contains("dpo"), "{err}");
}
