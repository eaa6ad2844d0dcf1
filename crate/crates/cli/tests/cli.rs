use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"
seed = 3
data_dir = "data"

[synth]
annotated = 24
unannotated = 16
finetune = 8
test = 6

[synth.family]
languages = 3

[supervised]
checkpoint_every = 2
[supervised.schedule]
epochs = 2
lr = 0.002
warmup = 0.2
hold = 0.0
decay = 0.8

[xlst]
checkpoint_every = 3
[xlst.schedule]
epochs = 2
lr = 0.0005
warmup = 0.0
hold = 0.5
decay = 0.5

[finetune]
languages = [1, 2]
[finetune.schedule]
epochs = 2
lr = 0.002
warmup = 0.1
hold = 0.4
decay = 0.5

[eval]
language = 1
"#;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.toml"), SMALL).unwrap();
        Self { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_xlst"))
            .args(args)
            .current_dir(self.dir.path())
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn synth(&self) {
        self.ok(&["synth-data", "--config", "run.toml", "--out", "data"]);
    }

    fn sup(&self, out: &str) {
        self.ok(&["pretrain-sup", "--config", "run.toml", "--out", out]);
    }
}

fn jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn synth_data_writes_manifests_reproducibly() {
    let sb = Sandbox::new();
    sb.ok(&["synth-data", "--config", "run.toml", "--out", "nested/a"]);
    sb.ok(&["synth-data", "--config", "run.toml", "--out", "b"]);
    let manifest = "test/lang-2/manifest.tsv";
    let a = fs::read(sb.path("nested/a").join(manifest)).unwrap();
    assert_eq!(a, fs::read(sb.path("b").join(manifest)).unwrap());
    let text = String::from_utf8(a).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    for row in rows {
        let file = row.split('\t').nth(2).unwrap();
        assert!(sb.path("b/test/lang-2").join(file).is_file());
    }
    let ann = fs::read_to_string(sb.path("b/annotated/manifest.tsv")).unwrap();
    assert_eq!(ann.lines().count(), 25);
}

#[test]
fn pretraining_logs_every_step_and_checkpoints_periodically() {
    let sb = Sandbox::new();
    sb.synth();
    sb.sup("sup");
    let records = jsonl(&sb.path("sup/metrics.jsonl"));
    assert_eq!(records.len(), 6);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r["step"], i as u64);
        for key in ["epoch", "lr", "loss", "frame_acc"] {
            assert!(r.get(key).is_some(), "missing {key} in {r}");
        }
    }
    for step in [2, 4, 6] {
        assert!(sb
            .path(&format!("sup/checkpoints/step-{step:07}.xt"))
            .is_file());
    }
    assert!(sb.path("sup/config.resolved.toml").is_file());
    assert!(!sb.path("sup/run.lock").exists());

    sb.ok(&[
        "pretrain-xlst",
        "--config",
        "run.toml",
        "--init",
        "sup/final.xt",
        "--out",
        "xlst",
    ]);
    let resolved = fs::read_to_string(sb.path("xlst/config.resolved.toml")).unwrap();
    assert!(resolved.contains("lambda = 0.9999"));
    let epochs: Vec<Value> = jsonl(&sb.path("xlst/metrics.jsonl"))
        .into_iter()
        .filter(|r| r.get("sampler_draws").is_some())
        .collect();
    assert_eq!(epochs.len(), 2);
    assert_eq!(epochs[0]["sampler_draws"].as_array().unwrap().len(), 1);
    assert!(epochs[1]["collapse_cosine"].as_f64().unwrap() < 0.99);
}

#[test]
fn identical_runs_produce_identical_checkpoints() {
    let sb = Sandbox::new();
    sb.synth();
    sb.sup("a");
    sb.sup("b");
    assert_eq!(
        fs::read(sb.path("a/final.xt")).unwrap(),
        fs::read(sb.path("b/final.xt")).unwrap()
    );
    sb.ok(&[
        "pretrain-sup",
        "--config",
        "run.toml",
        "--out",
        "c",
        "--seed",
        "4",
    ]);
    assert_ne!(
        fs::read(sb.path("a/final.xt")).unwrap(),
        fs::read(sb.path("c/final.xt")).unwrap()
    );
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let sb = Sandbox::new();
    sb.synth();
    sb.sup("full");
    fs::create_dir_all(sb.path("resumed")).unwrap();
    fs::copy(
        sb.path("full/metrics.jsonl"),
        sb.path("resumed/metrics.jsonl"),
    )
    .unwrap();
    sb.ok(&[
        "pretrain-sup",
        "--config",
        "run.toml",
        "--out",
        "resumed",
        "--resume",
        "full/checkpoints/step-0000002.xt",
    ]);
    assert_eq!(
        fs::read(sb.path("full/metrics.jsonl")).unwrap(),
        fs::read(sb.path("resumed/metrics.jsonl")).unwrap()
    );
    assert_eq!(
        fs::read(sb.path("full/final.xt")).unwrap(),
        fs::read(sb.path("resumed/final.xt")).unwrap()
    );

    sb.ok(&[
        "pretrain-xlst",
        "--config",
        "run.toml",
        "--init",
        "full/final.xt",
        "--out",
        "x1",
    ]);
    fs::create_dir_all(sb.path("x2")).unwrap();
    fs::copy(sb.path("x1/metrics.jsonl"), sb.path("x2/metrics.jsonl")).unwrap();
    sb.ok(&[
        "pretrain-xlst",
        "--config",
        "run.toml",
        "--resume",
        "x1/checkpoints/step-0000003.xt",
        "--out",
        "x2",
    ]);
    assert_eq!(
        fs::read(sb.path("x1/metrics.jsonl")).unwrap(),
        fs::read(sb.path("x2/metrics.jsonl")).unwrap()
    );
    assert_eq!(
        fs::read(sb.path("x1/final.xt")).unwrap(),
        fs::read(sb.path("x2/final.xt")).unwrap()
    );
}

#[test]
fn finetune_reports_each_language_and_eval_is_read_only() {
    let sb = Sandbox::new();
    sb.synth();
    sb.sup("sup");
    let stdout = sb.ok(&[
        "finetune",
        "--config",
        "run.toml",
        "--init",
        "sup/final.xt",
        "--out",
        "ft",
    ]);
    assert!(
        stdout.contains("language 1") && stdout.contains("language 2") && stdout.contains("avg")
    );
    let summary: Value =
        serde_json::from_str(&fs::read_to_string(sb.path("ft/summary.json")).unwrap()).unwrap();
    let langs = summary["languages"].as_array().unwrap();
    assert_eq!(langs.len(), 2);
    let avg = (langs[0]["per"].as_f64().unwrap() + langs[1]["per"].as_f64().unwrap()) / 2.0;
    assert!((summary["avg"].as_f64().unwrap() - avg).abs() < 1e-12);

    let model = sb.path("ft/lang-1/model.xt");
    let before = (
        fs::read(&model).unwrap(),
        fs::metadata(&model).unwrap().modified().unwrap(),
    );
    sb.ok(&[
        "eval",
        "--config",
        "run.toml",
        "--init",
        "ft/lang-1/model.xt",
        "--out",
        "ev",
    ]);
    let after = (
        fs::read(&model).unwrap(),
        fs::metadata(&model).unwrap().modified().unwrap(),
    );
    assert_eq!(before, after);
    let report: Value =
        serde_json::from_str(&fs::read_to_string(sb.path("ev/report.json")).unwrap()).unwrap();
    assert!(report["per"].is_number());
    assert_eq!(report["utterances"].as_array().unwrap().len(), 6);
    let lang1 = &fs::read_to_string(sb.path("ft/lang-1/report.json")).unwrap();
    assert_eq!(
        serde_json::from_str::<Value>(lang1).unwrap()["per"],
        report["per"]
    );
}

#[test]
fn double_precision_runs_end_to_end() {
    let sb = Sandbox::new();
    sb.synth();
    sb.ok(&[
        "pretrain-sup",
        "--config",
        "run.toml",
        "--out",
        "sup64",
        "--precision",
        "64",
    ]);
    sb.ok(&[
        "finetune",
        "--config",
        "run.toml",
        "--init",
        "sup64/final.xt",
        "--out",
        "ft64",
        "--precision",
        "64",
    ]);
    assert!(sb.path("ft64/summary.json").is_file());
}

#[test]
fn misconfiguration_fails_with_a_diagnostic() {
    let sb = Sandbox::new();
    fs::write(sb.path("typo.toml"), "[xlst]\nlamda = 0.5\n").unwrap();
    let out = sb.run(&["synth-data", "--config", "typo.toml", "--out", "d"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamda"));

    let out = sb.run(&["pretrain-xlst", "--config", "run.toml", "--out", "x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--init"));

    fs::create_dir_all(sb.path("locked")).unwrap();
    fs::write(sb.path("locked/run.lock"), "1").unwrap();
    let out = sb.run(&["synth-data", "--config", "run.toml", "--out", "locked"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
}

#[test]
fn output_root_comes_from_the_environment() {
    let sb = Sandbox::new();
    let out = Command::new(env!("CARGO_BIN_EXE_xlst"))
        .args(["synth-data", "--config", "run.toml"])
        .current_dir(sb.dir.path())
        .env("XLST_OUT_ROOT", sb.path("root"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(sb.path("root/synth-data/languages.json").is_file());
}
