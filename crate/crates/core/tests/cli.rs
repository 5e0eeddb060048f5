use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use percevox::config::{env_var_name, RunConfig, KEYS};
use percevox::dsp::load_wav;

const TOY: &str = "\
data.n_speakers = 4
data.utterances_per_speaker = 3
data.formant_items = 60
model.channels = 16
model.latent_dim = 8
model.codes = 16
model.speaker_dim = 4
train.max_epochs = 3
train.batch_size = 4
formant.epochs = 3
quality.n_items = 40
quality.epochs = 2
eval.griffin_lim_iterations = 8
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_percevox"));
    // Keep stray overrides in the caller's environment out of the runs.
    for (key, _) in KEYS {
        c.env_remove(env_var_name(key));
    }
    c
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn percevox")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run_in(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Corpus, formant regressor, quality proxy and a trained toy model, built once.
fn fixture() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        std::fs::write(dir.join("toy.cfg"), TOY).unwrap();
        ok(&dir, &["synth-corpus", "--config", "toy.cfg", "--out", "corpus"]);
        ok(&dir, &["train-formant", "--config", "toy.cfg", "--corpus", "corpus", "--out", "formant"]);
        ok(&dir, &["pretrain-quality", "--config", "toy.cfg", "--out", "quality"]);
        ok(
            &dir,
            &[
                "train",
                "--config",
                "toy.cfg",
                "--data",
                "corpus",
                "--out",
                "model",
                "--formant",
                "formant/formant.pvcx",
                "--quality",
                "quality/quality.pvcx",
            ],
        );
        // Writes the conversions, so later evals in parallel tests only read them.
        ok(&dir, &["eval", "--config", "toy.cfg", "--manifest", "corpus/conversions.tsv", "--model", "model/model.pvcx", "--out", "report"]);
        dir
    })
}

fn error_json(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().unwrap_or_default();
    serde_json::from_str(last).unwrap_or_else(|e| panic!("stderr {stderr:?}: {e}"))
}

fn eval_with(dir: &Path, cfg_extra: &str, out: &str, extra: &[&str]) -> Output {
    let cfg = format!("{out}.cfg");
    std::fs::write(dir.join(&cfg), format!("{TOY}{cfg_extra}")).unwrap();
    let mut args = vec!["eval", "--config", &cfg, "--manifest", "corpus/conversions.tsv", "--model", "model/model.pvcx", "--out", out];
    args.extend(extra);
    run_in(dir, &args)
}

#[test]
fn help_documents_every_config_key() {
    let out = bin().arg("--help").output().unwrap();
    assert!(out.status.success());
    let help = String::from_utf8(out.stdout).unwrap();
    for (key, _) in KEYS {
        assert!(help.contains(key), "--help misses {key}");
        assert!(help.contains(&env_var_name(key)), "--help misses the variable for {key}");
    }
    for code in ["2", "3", "4", "5"] {
        assert!(help.contains(code));
    }
}

#[test]
fn subcommand_help_lists_flags() {
    let cases: [(&str, &[&str]); 4] = [
        ("convert", &["--config", "--model", "--in", "--target", "--out"]),
        ("eval", &["--manifest", "--model", "--enrollment", "--out", "--jobs"]),
        ("train", &["--data", "--out", "--formant", "--quality", "--resume"]),
        ("ablate", &["--out", "--formant", "--quality"]),
    ];
    for (cmd, flags) in cases {
        let out = bin().args([cmd, "--help"]).output().unwrap();
        assert!(out.status.success());
        let help = String::from_utf8(out.stdout).unwrap();
        for f in flags {
            assert!(help.contains(f), "{cmd} --help misses {f}");
        }
    }
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["train"]);
    assert_eq!(out.status.code(), Some(2));
    let e = error_json(&out);
    assert_eq!(e["status"], "error");
    assert_eq!(e["exit_code"], 2);

    std::fs::write(dir.path().join("bad.cfg"), "train.no_such_key = 1\n").unwrap();
    let out = run_in(dir.path(), &["synth-corpus", "--config", "bad.cfg", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["kind"], "config");

    let out = bin()
        .current_dir(dir.path())
        .env("PERCEVOX_TRAIN_MAX_EPOCHS", "many")
        .args(["synth-corpus", "--out", "x"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["eval", "--manifest", "absent.tsv", "--out", "r"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_json(&out)["exit_code"], 3);
}

#[test]
fn adapter_failures_exit_5() {
    let dir = fixture();
    let out = eval_with(dir, "eval.transcriber = /nonexistent/asr-backend\n", "report_missing_adapter", &[]);
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(error_json(&out)["kind"], "adapter");

    let victim = dir.join("corpus/converted/conv0000.wav");
    assert!(victim.exists());
    let adapter = env!("CARGO_BIN_EXE_percevox-ref-adapter");
    let line = format!("eval.embedder = {adapter} --fail-on conv0000.wav\n");
    let out = eval_with(dir, &line, "report_failing_adapter", &[]);
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn reference_adapter_matches_builtin_backends() {
    let dir = fixture();
    let adapter = env!("CARGO_BIN_EXE_percevox-ref-adapter");
    let builtin = eval_with(dir, "", "report_builtin", &[]);
    assert!(builtin.status.success(), "{}", String::from_utf8_lossy(&builtin.stderr));
    let external = eval_with(dir, &format!("eval.transcriber = {adapter}\neval.embedder = {adapter}\n"), "report_external", &[]);
    assert!(external.status.success(), "{}", String::from_utf8_lossy(&external.stderr));
    let a = std::fs::read_to_string(dir.join("report_builtin/report.json")).unwrap();
    let b = std::fs::read_to_string(dir.join("report_external/report.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn eval_report_is_independent_of_jobs() {
    let dir = fixture();
    for (out, jobs) in [("report_j1", "1"), ("report_j3", "3")] {
        let o = eval_with(dir, "", out, &["--jobs", jobs]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = std::fs::read(dir.join("report_j1/report.json")).unwrap();
    let b = std::fs::read(dir.join("report_j3/report.json")).unwrap();
    assert_eq!(a, b);

    let report: serde_json::Value = serde_json::from_slice(&a).unwrap();
    let trials = report["trials"].as_u64().unwrap();
    let mut by_partition = std::collections::BTreeMap::<&str, u64>::new();
    for c in report["categories"].as_array().unwrap() {
        *by_partition.entry(c["partition"].as_str().unwrap()).or_default() += c["trials"].as_u64().unwrap();
    }
    assert!(!by_partition.is_empty());
    assert!(by_partition.values().all(|&n| n == trials), "{by_partition:?} vs {trials}");
}

#[test]
fn convert_keeps_duration_within_one_hop() {
    let dir = fixture();
    let stdout = ok(
        dir,
        &[
            "convert",
            "--config",
            "toy.cfg",
            "--model",
            "model/model.pvcx",
            "--in",
            "corpus/speakers/utt0001.wav",
            "--target",
            "spk02",
            "--out",
            "converted_one.wav",
        ],
    );
    let stats: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    assert!(stats["frames"].as_u64().is_some());
    let a = load_wav(dir.join("corpus/speakers/utt0001.wav")).unwrap();
    let b = load_wav(dir.join("converted_one.wav")).unwrap();
    assert!(a.len().abs_diff(b.len()) <= 320, "{} vs {}", a.len(), b.len());
    assert!(b.samples.iter().all(|s| s.is_finite() && s.abs() <= 1.0));

    let out = run_in(
        dir,
        &["convert", "--model", "model/model.pvcx", "--in", "corpus/speakers/utt0001.wav", "--target", "nobody", "--out", "x.wav"],
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn train_runs_on_defaults_without_config() {
    let dir = fixture();
    let out = bin()
        .current_dir(dir)
        .env("PERCEVOX_TRAIN_MAX_EPOCHS", "1")
        .args(["train", "--data", "corpus", "--out", "model_defaults"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = std::fs::read_to_string(dir.join("model_defaults/config.txt")).unwrap();
    let mut want = RunConfig::default();
    want.train.max_epochs = 1;
    assert_eq!(RunConfig::parse_with_env(&cfg, |_| None).unwrap().to_text(), want.to_text());
    assert!(dir.join("model_defaults/model.pvcx").exists());
}

#[test]
fn grad_check_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["grad-check", "--out", "gc"]);
    assert!(stdout.lines().count() > 10);
    assert!(!stdout.contains("FAIL"));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("gc/grad_check.json")).unwrap()).unwrap();
    assert!(json.is_object() || json.is_array());
}

#[test]
fn every_output_directory_has_a_manifest() {
    let dir = fixture();
    for sub in ["corpus", "formant", "quality", "model"] {
        let text = std::fs::read_to_string(dir.join(sub).join("MANIFEST")).unwrap_or_else(|e| panic!("{sub}: {e}"));
        assert!(!text.trim().is_empty());
        for line in text.lines() {
            let (path, bytes) = line.split_once('\t').unwrap();
            let meta = std::fs::metadata(dir.join(sub).join(path)).unwrap_or_else(|e| panic!("{sub}/{path}: {e}"));
            assert_eq!(meta.len().to_string(), bytes, "{sub}/{path}");
        }
    }
}

#[test]
fn training_from_a_checkpoint_resumes() {
    let dir = fixture();
    ok(
        dir,
        &["train", "--config", "toy.cfg", "--data", "corpus", "--out", "model_resumed", "--resume", "model/checkpoint.pvcx"],
    );
    let history: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("model_resumed/history.json")).unwrap()).unwrap();
    assert!(history.is_array() || history.is_object());
}
