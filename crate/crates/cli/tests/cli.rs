//! End-to-end runs of the `minor-sft` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use minor_sft_core::data::{synthetic, write_corpus};
use minor_sft_core::Corpus;

const BIN: &str = env!("CARGO_BIN_EXE_minor-sft");

fn presets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("presets")
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn corpus(dir: &Path, name: &str, corpus: Corpus) -> String {
    let path = dir.join(name);
    write_corpus(&corpus, &path).unwrap();
    path.to_str().unwrap().to_owned()
}

fn sft(dir: &Path) -> String {
    corpus(dir, "sft.jsonl", Corpus::Sft(synthetic::sft_records(12, 1)))
}

const SMALL: [&str; 4] = ["--set", "model.d_model=32", "--set", "train.batch_size=4"];

#[test]
fn train_writes_log_checkpoint_and_effective_config() {
    let dir = tempfile::tempdir().unwrap();
    let c = sft(dir.path());
    let out = dir.path().join("run");
    let mut args = vec!["train", "--corpus", &c, "--out", out.to_str().unwrap()];
    args.extend(SMALL);
    args.extend(["--set", "train.learning_rate=2e-3"]);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("runlog.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
    assert!(out.join("model.ckpt").exists() && out.join("runlog.json").exists());
    let effective = std::fs::read_to_string(out.join("effective_config.toml")).unwrap();
    assert!(effective.contains("learning_rate = 0.002"), "{effective}");
    assert!(effective.contains("d_model = 32"), "{effective}");

    // Continuing from the checkpoint needs a matching architecture.
    let ckpt = out.join("model.ckpt");
    let again = dir.path().join("again");
    let mut args = vec!["train", "--corpus", &c, "--init", ckpt.to_str().unwrap(), "--out", again.to_str().unwrap()];
    args.extend(SMALL);
    assert!(run(&args).status.success());
    let o = run(&["train", "--corpus", &c, "--init", ckpt.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = run(&["inspect", ckpt.to_str().unwrap()]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["kind"], "checkpoint");
    assert_eq!(v["config"]["d_model"], 32);
}

#[test]
fn missing_corpus_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.jsonl");
    let o = run(&["train", "--corpus", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.contains("nowhere.jsonl") && err.lines().count() == 1, "{err}");
}

#[test]
fn pairwise_objective_on_sft_corpus_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let c = sft(dir.path());
    let out = dir.path().join("run");
    let o = run(&["train", "--corpus", &c, "--set", "train.objective=minor_dpo", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("preference"), "{}", stderr(&o));
    assert!(!out.join("runlog.csv").exists());
}

#[test]
fn unknown_keys_and_bad_values_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let c = sft(dir.path());
    let out = dir.path().join("run");
    for set in ["train.no_such_key=1", "model.bogus=3", "train.batch_size=0", "train.objective=sgd"] {
        let o = run(&["train", "--corpus", &c, "--set", set, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{set}: {}", stderr(&o));
    }
    let o = run(&["train", "--corpus", &c, "--set", "no-equals-sign", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

fn compare_config(dir: &Path, body: &str) -> String {
    let path = dir.join("compare.toml");
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn compare_is_reproducible_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let c = sft(dir.path());
    let cfg = presets().join("figure1.toml");
    let go = |name: &str| {
        let out = dir.path().join(name);
        let o = run(&[
            "compare",
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "defaults.batch_size=4",
            "--set",
            "model.d_model=32",
            "--corpus",
            &c,
            "--held-out",
            &c,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        out
    };
    let (a, b) = (go("a"), go("b"));
    let csv = std::fs::read(a.join("compare.csv")).unwrap();
    assert_eq!(csv, std::fs::read(b.join("compare.csv")).unwrap());
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("step,metric_raw_sft,"));
    assert_eq!(text.lines().count(), 1 + 3);
    for run in ["raw_sft", "sft_use_dpo", "minor_sft"] {
        assert!(a.join("runs").join(format!("{run}.csv")).exists());
    }
}

#[test]
fn compare_rejects_duplicate_run_names() {
    let dir = tempfile::tempdir().unwrap();
    let c = sft(dir.path());
    let cfg = compare_config(
        dir.path(),
        "[[runs]]\nname = \"a\"\n[runs.config]\nobjective = \"raw_sft\"\n\n\
         [[runs]]\nname = \"a\"\n[runs.config]\nobjective = \"minor_sft\"\n",
    );
    let o = run(&["compare", "--config", &cfg, "--corpus", &c, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("duplicate"), "{}", stderr(&o));
}

#[test]
fn grad_check_passes_on_seed_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["grad-check", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout.lines().filter(|l| l.ends_with("PASS")).count(), 5, "{stdout}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(report["results"].as_array().unwrap().len(), 5);
}

#[test]
fn gen_corpus_and_inspect_agree_on_the_digest() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.jsonl");
    let o = run(&["gen-corpus", "--schema", "preference", "--n", "5", "--seed", "3", "--out", path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&run(&["inspect", path.to_str().unwrap()]).stdout).unwrap();
    assert_eq!(v["schema"], "preference");
    assert_eq!(v["records"], 5);
    let expected = Corpus::Preference(synthetic::preference_records(5, 3)).digest().unwrap();
    assert_eq!(v["sha256"], expected.as_str());
}

#[test]
fn bundled_corpora_match_the_generator() {
    let data = presets().join("data");
    for (file, n, seed) in [("train.jsonl", 2000, 7), ("held_out.jsonl", 32, 99)] {
        let dir = tempfile::tempdir().unwrap();
        let fresh = corpus(dir.path(), file, Corpus::Sft(synthetic::sft_records(n, seed)));
        assert_eq!(std::fs::read(data.join(file)).unwrap(), std::fs::read(fresh).unwrap(), "{file}");
    }
}
