//! Training loop, comparison runs and run-log export.

use minor_sft_core::data::synthetic;
use minor_sft_core::trainer::{
    compare, figure1_preset, train_with_held_out, MetricSource, OptimizerKind, RunSpec, RUN_CSV_HEADER,
};
use minor_sft_core::{train, Corpus, Error, LanguageModel, ModelConfig, Objective, SftRecord, TrainConfig, Trainer};

fn model() -> LanguageModel {
    LanguageModel::new(ModelConfig {
        d_model: 32,
        context_len: 128,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn sft(n: usize) -> Corpus {
    Corpus::Sft(synthetic::sft_records(n, 5))
}

fn pref(n: usize) -> Corpus {
    Corpus::Preference(synthetic::preference_records(n, 5))
}

fn config(objective: Objective) -> TrainConfig {
    TrainConfig {
        objective,
        learning_rate: 3e-3,
        batch_size: 4,
        ..TrainConfig::default()
    }
}

fn corpus_for(objective: Objective, n: usize) -> Corpus {
    if objective.uses_preference_pairs() {
        pref(n)
    } else {
        sft(n)
    }
}

#[test]
fn zero_learning_rate_never_deviates() {
    let mut m = model();
    let before = m.clone();
    let log = train(&mut m, &sft(12), &TrainConfig { learning_rate: 0.0, ..config(Objective::MinorSft) }).unwrap();
    assert_eq!(log.records.len(), 3);
    assert!(log.records.iter().all(|r| r.deviation_metric == 0.0 && r.lr == 0.0));
    assert_eq!(m, before);
}

#[test]
fn first_record_is_taken_before_any_update() {
    for objective in Objective::ALL {
        let mut m = model();
        let log = train(&mut m, &corpus_for(objective, 12), &config(objective)).unwrap();
        let first = &log.records[0];
        assert_eq!(first.step, 0);
        assert!(first.deviation_metric.abs() <= 1e-12, "{objective}: {}", first.deviation_metric);
        assert!(log.records.last().unwrap().deviation_metric != 0.0, "{objective} never moved");
    }
}

#[test]
fn reference_snapshot_is_never_written() {
    let m = model();
    let mut t = Trainer::new(m.clone(), &sft(16), None, &config(Objective::MinorSft)).unwrap();
    while !t.is_done() {
        t.step().unwrap();
    }
    assert_eq!(t.reference(), &m);
    for (a, b) in t.reference().params().tensors().iter().zip(m.params().tensors()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_ne!(t.model(), &m);
    assert!(t.step().is_err());
}

#[test]
fn reruns_are_bitwise_identical() {
    let run = || {
        let mut m = model();
        let log = train(&mut m, &sft(16), &config(Objective::MinorSft)).unwrap();
        (m, log.to_csv().unwrap(), log.to_json().unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn minor_and_raw_sft_start_from_the_same_loss() {
    let first = |objective| {
        let mut m = model();
        train(&mut m, &sft(8), &config(objective)).unwrap().records[0].loss
    };
    let (raw, minor) = (first(Objective::RawSft), first(Objective::MinorSft));
    assert!((raw - minor).abs() <= 1e-12 * raw, "{raw} vs {minor}");
}

#[test]
fn logs_every_kth_step_and_the_last() {
    let mut m = model();
    let cfg = TrainConfig {
        log_every: 3,
        batch_size: 2,
        epochs: 2,
        ..config(Objective::RawSft)
    };
    let log = train(&mut m, &sft(9), &cfg).unwrap();
    assert_eq!(log.total_steps, 10);
    assert_eq!(log.warmup_steps, 1);
    let steps: Vec<usize> = log.records.iter().map(|r| r.step).collect();
    assert_eq!(steps, [0, 3, 6, 9]);
    assert!(log.records.iter().all(|r| r.mean_coefficient.is_none() && r.mean_reward.is_none()));
}

#[test]
fn objective_and_corpus_schema_must_agree() {
    let mut m = model();
    let err = train(&mut m, &sft(4), &config(Objective::Dpo)).unwrap_err();
    assert!(matches!(err, Error::SchemaMismatch { objective: "dpo", .. }), "{err}");
    let err = train(&mut m, &pref(4), &config(Objective::MinorSft)).unwrap_err();
    assert!(matches!(err, Error::SchemaMismatch { expected: "sft", .. }), "{err}");
}

#[test]
fn non_finite_loss_aborts_with_batch_indices() {
    let mut m = model();
    let cfg = TrainConfig {
        learning_rate: 1e300,
        warmup_ratio: 0.0,
        optimizer: minor_sft_core::trainer::OptimizerConfig {
            kind: OptimizerKind::Sgd,
            ..Default::default()
        },
        ..config(Objective::RawSft)
    };
    match train(&mut m, &sft(8), &cfg).unwrap_err() {
        Error::NonFiniteLoss { step, indices, .. } => {
            assert_eq!(step, 1);
            assert_eq!(indices.len(), 4);
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn coefficient_falls_while_a_single_sample_is_learned() {
    let corpus = Corpus::Sft(vec![SftRecord {
        prompt: "upper stone".into(),
        answer: "stone in upper case is STONE.".into(),
    }]);
    let mut m = model();
    let cfg = TrainConfig {
        batch_size: 1,
        epochs: 25,
        warmup_ratio: 0.0,
        learning_rate: 1e-3,
        ..config(Objective::MinorSft)
    };
    let log = train(&mut m, &corpus, &cfg).unwrap();
    for w in log.records.windows(2) {
        if w[1].loss < w[0].loss {
            assert!(w[1].mean_coefficient <= w[0].mean_coefficient, "step {}", w[1].step);
        }
    }
    let c: Vec<f64> = log.records.iter().map(|r| r.mean_coefficient.unwrap()).collect();
    assert!(c.last() < c.first());
}

#[test]
fn held_out_metric_needs_a_held_out_corpus() {
    let cfg = TrainConfig {
        metric_source: MetricSource::HeldOut,
        ..config(Objective::MinorSft)
    };
    let mut m = model();
    assert!(train(&mut m, &sft(8), &cfg).is_err());
    let held = sft(3);
    let log = train_with_held_out(&mut m, &sft(8), Some(&held), &cfg).unwrap();
    assert_eq!(log.records[0].deviation_metric, 0.0);
    assert_eq!(log.records[0].mean_coefficient, Some(0.5));
}

#[test]
fn compare_runs_share_batches_and_join_on_step() {
    let base = model();
    let corpus = sft(12);
    let mut runs = figure1_preset(1e-3);
    for r in &mut runs {
        r.config.batch_size = 4;
    }
    // A duplicate of the raw run under another name must match it exactly.
    runs.push(RunSpec {
        name: "raw_copy".into(),
        config: TrainConfig { seed: 99, ..runs[0].config.clone() },
    });
    let report = compare(&base, &corpus, None, &runs, 7).unwrap();
    assert_eq!(report.run("raw_sft").unwrap().records, report.run("raw_copy").unwrap().records);
    let csv = report.to_csv().unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.len(), 1 + 5 * 4);
    assert_eq!(&header[..3], ["step", "metric_raw_sft", "loss_raw_sft"]);
    assert!(header.contains(&"coefficient_minor_sft") && header.contains(&"lr_sft_use_dpo"));
    assert_eq!(lines.count(), 3);
    assert_eq!(csv, compare(&base, &corpus, None, &runs, 7).unwrap().to_csv().unwrap());
}

#[test]
fn compare_rejects_bad_run_lists() {
    let base = model();
    let corpus = sft(4);
    let runs = figure1_preset(1e-3);
    assert!(compare(&base, &corpus, None, &runs[..1], 0).is_err());
    let dup = vec![runs[0].clone(), runs[0].clone()];
    let err = compare(&base, &corpus, None, &dup, 0).unwrap_err();
    assert!(err.to_string().contains("duplicate"), "{err}");
    let mut bad = runs.clone();
    bad[1].name = "has space".into();
    assert!(compare(&base, &corpus, None, &bad, 0).is_err());
}

#[test]
fn export_writes_csv_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = sft(8);
    let mut m = model();
    let log = train(&mut m, &corpus, &config(Objective::SftUseDpo)).unwrap();
    log.write(dir.path(), "runlog").unwrap();
    let csv = std::fs::read_to_string(dir.path().join("runlog.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), RUN_CSV_HEADER.join(","));
    assert_eq!(csv.lines().count(), 1 + log.records.len());
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("runlog.json")).unwrap()).unwrap();
    assert_eq!(json["corpus_digest"], corpus.digest().unwrap());
    assert_eq!(json["config"]["objective"], "sft_use_dpo");
    let back: minor_sft_core::RunLog = serde_json::from_value(json).unwrap();
    assert_eq!(back, log);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut m = model();
    for cfg in [
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { warmup_ratio: 1.5, ..TrainConfig::default() },
        TrainConfig { epochs: 0, ..TrainConfig::default() },
        TrainConfig { log_every: 0, ..TrainConfig::default() },
        TrainConfig { learning_rate: -1.0, ..TrainConfig::default() },
        TrainConfig { learning_rate: f64::NAN, ..TrainConfig::default() },
    ] {
        assert!(matches!(train(&mut m, &sft(4), &cfg), Err(Error::InvalidValue(_))));
    }
}
