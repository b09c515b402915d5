use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use minor_sft_core::data::{detect_schema, load_corpus, synthetic, write_corpus, Schema, TokenizeOptions};
use minor_sft_core::gradcheck::{check_objective, GradCheckConfig, ObjectiveCheck, GRAD_CHECK_THRESHOLD};
use minor_sft_core::io::write_atomic;
use minor_sft_core::model::checkpoint::{self, MAGIC};
use minor_sft_core::trainer::{self, RunSpec};
use minor_sft_core::{Corpus, LanguageModel, ModelConfig, Objective, RunLog};
use serde_json::json;

use crate::config::{load_table, to_toml, CompareFile, ConfigError, TrainFile};
use crate::failure::NumericFailure;

pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";
pub const CHECKPOINT: &str = "model.ckpt";

fn create_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))
}

fn read_corpus(path: &Path, model: &ModelConfig, separator: &str) -> Result<Corpus> {
    let schema = detect_schema(path)?;
    let opts = TokenizeOptions {
        separator: separator.to_owned(),
        context_len: model.context_len,
        ..TokenizeOptions::default()
    };
    Ok(load_corpus(path, schema, &opts)?)
}

pub fn train(
    config: Option<&Path>,
    overrides: &[String],
    corpus: &Path,
    held_out: Option<&Path>,
    init: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let file = TrainFile::from_table(load_table(config, overrides)?)?;
    let mut model = match init {
        Some(p) => {
            let m = checkpoint::load(p)?;
            if !m.config().same_architecture(&file.model) {
                bail!(ConfigError(format!(
                    "checkpoint {} does not match [model]: {:?} vs {:?}",
                    p.display(),
                    m.config(),
                    file.model
                )));
            }
            m
        }
        None => LanguageModel::new(file.model.clone())?,
    };
    let corpus = read_corpus(corpus, &file.model, &file.train.separator)?;
    let held_out = held_out
        .map(|p| read_corpus(p, &file.model, &file.train.separator))
        .transpose()?;
    create_dir(out)?;
    write_atomic(&out.join(EFFECTIVE_CONFIG), to_toml(&file)?.as_bytes())?;
    log::info!("training {} on {} records", file.train.objective, corpus.len());
    let mut log = trainer::train_with_held_out(&mut model, &corpus, held_out.as_ref(), &file.train)?;
    checkpoint::save(&model, &out.join(CHECKPOINT))?;
    log.checkpoint = Some(CHECKPOINT.into());
    log.write(out, "runlog")?;
    let last = log.records.last().expect("at least one step is always logged");
    println!(
        "{} steps; final loss {} deviation {} -> {}",
        log.total_steps,
        last.loss,
        last.deviation_metric,
        out.display()
    );
    Ok(())
}

pub fn compare(
    config: Option<&Path>,
    overrides: &[String],
    corpus: &Path,
    held_out: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let file = CompareFile::from_table(load_table(config, overrides)?)?;
    let separator = file
        .runs
        .first()
        .map_or("\n".to_owned(), |r| r.config.separator.clone());
    let corpus = read_corpus(corpus, &file.model, &separator)?;
    let held_out = held_out.map(|p| read_corpus(p, &file.model, &separator)).transpose()?;
    let base = LanguageModel::new(file.model.clone())?;
    create_dir(out)?;
    write_atomic(&out.join(EFFECTIVE_CONFIG), to_toml(&file)?.as_bytes())?;
    let report = trainer::compare(&base, &corpus, held_out.as_ref(), &file.runs, file.master_seed)?;
    let runs_dir = out.join("runs");
    create_dir(&runs_dir)?;
    for (name, log) in &report.runs {
        log.write(&runs_dir, name)?;
    }
    write_atomic(&out.join("compare.csv"), report.to_csv()?.as_bytes())?;
    for (RunSpec { name, .. }, (_, log)) in file.runs.iter().zip(&report.runs) {
        let last = log.records.last().expect("at least one step is always logged");
        println!("{name}: final deviation {}", last.deviation_metric);
    }
    println!("-> {}", out.join("compare.csv").display());
    Ok(())
}

pub struct GradCheckArgs {
    pub objectives: Vec<String>,
    pub seeds: Vec<u64>,
    pub epsilon: Option<f64>,
    pub coords_per_param: Option<usize>,
    pub out: Option<PathBuf>,
}

pub fn grad_check(args: GradCheckArgs) -> Result<()> {
    let objectives: Vec<Objective> = if args.objectives.is_empty() {
        Objective::ALL.to_vec()
    } else {
        args.objectives
            .iter()
            .map(|s| s.parse().map_err(|e: minor_sft_core::Error| ConfigError(e.to_string())))
            .collect::<std::result::Result<_, _>>()?
    };
    let mut cfg = GradCheckConfig::default();
    if let Some(e) = args.epsilon {
        cfg.epsilon = e;
    }
    if let Some(c) = args.coords_per_param {
        cfg.coords_per_param = (c > 0).then_some(c);
    }
    let mut results: Vec<ObjectiveCheck> = Vec::new();
    for &objective in &objectives {
        for &seed in &args.seeds {
            let r = check_objective(objective, seed, &cfg)?;
            println!(
                "{:<12} seed {:<4} max_rel_error {:.3e} ({} coords, worst {}) {}",
                objective.name(),
                seed,
                r.max_rel_error,
                r.checked,
                r.worst_param.as_deref().unwrap_or("-"),
                if r.passed { "PASS" } else { "FAIL" }
            );
            results.push(r);
        }
    }
    for &objective in &objectives {
        let worst = results
            .iter()
            .filter(|r| r.objective == objective)
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max);
        println!("{:<12} worst {:.3e}", objective.name(), worst);
    }
    if let Some(out) = &args.out {
        create_dir(out)?;
        let report = json!({
            "threshold": GRAD_CHECK_THRESHOLD,
            "epsilon": cfg.epsilon,
            "beta": cfg.beta.value(),
            "coords_per_param": cfg.coords_per_param,
            "results": results,
        });
        write_atomic(&out.join("gradcheck.json"), (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        bail!(NumericFailure(format!(
            "{failed} of {} gradient checks exceed {GRAD_CHECK_THRESHOLD:e}",
            results.len()
        )));
    }
    Ok(())
}

pub fn gen_corpus(preference: bool, n: usize, seed: u64, out: &Path) -> Result<()> {
    if n == 0 {
        bail!(ConfigError("--n must be positive".into()));
    }
    let corpus = if preference {
        Corpus::Preference(synthetic::preference_records(n, seed))
    } else {
        Corpus::Sft(synthetic::sft_records(n, seed))
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_corpus(&corpus, out)?;
    println!("{} records, sha256 {} -> {}", corpus.len(), corpus.digest()?, out.display());
    Ok(())
}

fn starts_with_magic(path: &Path) -> Result<bool> {
    let mut head = [0u8; 8];
    let mut f = std::fs::File::open(path).map_err(|e| minor_sft_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let n = f.read(&mut head).with_context(|| format!("reading {}", path.display()))?;
    Ok(n == MAGIC.len() && &head == MAGIC)
}

pub fn inspect(path: &Path) -> Result<()> {
    let summary = if starts_with_magic(path)? {
        let m = checkpoint::load(path)?;
        let tensors: Vec<_> = m
            .params()
            .iter()
            .map(|(name, t)| json!({ "name": name, "shape": t.shape() }))
            .collect();
        json!({
            "kind": "checkpoint",
            "config": m.config(),
            "num_parameters": m.params().num_scalars(),
            "tensors": tensors,
        })
    } else if path.extension().is_some_and(|e| e == "json") {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let log: RunLog = serde_json::from_str(&text).map_err(minor_sft_core::Error::from)?;
        let last = log.records.last();
        json!({
            "kind": "runlog",
            "objective": log.config.objective,
            "learning_rate": log.config.learning_rate,
            "total_steps": log.total_steps,
            "warmup_steps": log.warmup_steps,
            "records": log.records.len(),
            "corpus_digest": log.corpus_digest,
            "final": last,
        })
    } else {
        let schema = detect_schema(path)?;
        let opts = TokenizeOptions {
            context_len: usize::MAX,
            ..TokenizeOptions::default()
        };
        let corpus = load_corpus(path, schema, &opts)?;
        let answers: Vec<usize> = match &corpus {
            Corpus::Sft(v) => v.iter().map(|r| r.answer.len()).collect(),
            Corpus::Preference(v) => v.iter().map(|r| r.chosen.len()).collect(),
        };
        json!({
            "kind": "corpus",
            "schema": match schema { Schema::Sft => "sft", Schema::Preference => "preference" },
            "records": corpus.len(),
            "sha256": corpus.digest()?,
            "answer_bytes_mean": answers.iter().sum::<usize>() as f64 / answers.len().max(1) as f64,
            "answer_bytes_max": answers.iter().max(),
        })
    };
    let mut stdout = std::io::stdout().lock();
    match writeln!(stdout, "{}", serde_json::to_string_pretty(&summary)?) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r.context("writing to stdout")?),
    }
}
