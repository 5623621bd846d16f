use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn hfb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hfb"))
        .args(args)
        .output()
        .expect("spawn hfb")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../schemas")
        .join(format!("{name}.schema.json"));
    let text = fs::read_to_string(&path).unwrap();
    jsonschema::validator_for(&serde_json::from_str(&text).unwrap()).unwrap()
}

fn assert_valid(name: &str, doc: &Value) {
    let v = schema(name);
    let errors: Vec<String> = v.iter_errors(doc).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{name}: {errors:?}");
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn cost_fp16_row_and_schema() {
    let dir = TempDir::new().unwrap();
    let o = hfb(&[
        "cost",
        "--arch",
        "mobilenet-v1",
        "--width",
        "0.5",
        "--mode",
        "fp16",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = stdout(&o);
    assert_eq!(
        csv,
        fs::read_to_string(dir.path().join("cost.csv")).unwrap()
    );
    let doc = read_json(&dir.path().join("cost.json"));
    assert_valid("cost", &doc);
    let macs = doc["reports"][0]["macs"].as_f64().unwrap();
    assert!((macs / 149.49e6 - 1.0).abs() < 0.01, "{macs}");
}

#[test]
fn cost_hybrid_energy_and_throughput() {
    let dir = TempDir::new().unwrap();
    let o = hfb(&[
        "cost",
        "--width",
        "0.5",
        "--mode",
        "hybrid",
        "--alpha",
        "0.375",
        "--rho",
        "1",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc = read_json(&dir.path().join("cost.json"));
    assert_valid("cost", &doc);
    let r = &doc["reports"][0];
    assert!((r["energy_normalized"].as_f64().unwrap() - 0.62).abs() <= 0.02);
    assert!((r["throughput_normalized"].as_f64().unwrap() - 1.06).abs() <= 0.02);
}

#[test]
fn cost_sweep_gives_one_row_per_setting() {
    let dir = TempDir::new().unwrap();
    let o = hfb(&[
        "cost",
        "--width",
        "0.5",
        "--mode",
        "hybrid",
        "--alpha",
        "0.25,0.5",
        "--rho",
        "1,2",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&o), 0);
    let doc = read_json(&dir.path().join("cost.json"));
    assert_eq!(doc["reports"].as_array().unwrap().len(), 4);
    assert_eq!(stdout(&o).lines().count(), 5);
}

#[test]
fn cost_rejects_bad_flags_naming_them() {
    for (args, flag) in [
        (
            vec!["cost", "--mode", "hybrid", "--alpha", "1.5"],
            "--alpha",
        ),
        (vec!["cost", "--mode", "strassen", "--rho", "0"], "--rho"),
        (vec!["cost", "--mode", "fp16", "--alpha", "0.5"], "--alpha"),
        (vec!["cost", "--width", "3"], "--width"),
        (vec!["cost", "--mode", "int4"], "--mode"),
    ] {
        let o = hfb(&args);
        assert_eq!(code(&o), 2, "{args:?}");
        assert!(stderr(&o).contains(flag), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn cost_is_reproducible() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    for d in [&a, &b] {
        assert_eq!(
            code(&hfb(&[
                "cost",
                "--mode",
                "strassen",
                "--rho",
                "0.5,2",
                "--out",
                p(d.path())
            ])),
            0
        );
    }
    for f in ["cost.csv", "cost.json"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap()
        );
    }
}

#[test]
fn verify_strassen_passes_by_default() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("verify.json");
    let o = hfb(&["verify-strassen", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let doc = read_json(&out);
    assert_valid("verify", &doc);
    let status = |name: &str| {
        doc["checks"]
            .as_array()
            .unwrap()
            .iter()
            .find(|c| c["name"] == name)
            .map(|c| c["status"].as_str().unwrap().to_string())
            .unwrap()
    };
    assert_eq!(status("canonical-strassen-7"), "PASS");
    assert_eq!(status("naive-expansion-8"), "PASS");
}

#[test]
fn verify_strassen_tamper_fails() {
    let o = hfb(&["verify-strassen", "--tamper"]);
    assert_eq!(code(&o), 1);
    let line = stdout(&o)
        .lines()
        .find(|l| l.starts_with("canonical-strassen-7"))
        .unwrap()
        .to_string();
    assert!(line.contains("FAIL"), "{line}");
}

#[test]
fn verify_strassen_without_budget_is_exhausted_not_failed() {
    let o = hfb(&["verify-strassen", "--h6-trials", "0"]);
    assert_eq!(code(&o), 0);
    let line = stdout(&o)
        .lines()
        .find(|l| l.starts_with("shared-value-6"))
        .unwrap()
        .to_string();
    assert!(line.contains("SEARCH-EXHAUSTED"), "{line}");
}

#[test]
fn sensitivity_builtin_reaches_zero_at_eight() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("s.json");
    let o = hfb(&[
        "sensitivity",
        "--builtin",
        "--h-list",
        "2-8",
        "--pairs",
        "2000",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc = read_json(&out);
    assert_valid("sensitivity", &doc);
    let points = doc["points"].as_array().unwrap();
    assert_eq!(points.len(), 7);
    let last = points.iter().find(|q| q["h"] == 8).unwrap();
    assert!(last["loss"].as_f64().unwrap() < 1e-6);
}

#[test]
fn sensitivity_rejects_malformed_inputs() {
    let dir = TempDir::new().unwrap();
    let ragged = dir.path().join("ragged.json");
    fs::write(&ragged, "[[1, 2], [3]]").unwrap();
    let garbage = dir.path().join("garbage.json");
    fs::write(&garbage, "not json").unwrap();
    for args in [
        vec!["sensitivity", "--filter-file", p(&ragged)],
        vec!["sensitivity", "--filter-file", p(&garbage)],
        vec!["sensitivity", "--builtin", "--h-list", "0-3"],
        vec!["sensitivity", "--builtin", "--h-list", "5-2"],
        vec!["sensitivity"],
        vec!["sensitivity", "--builtin", "--pairs", "0"],
    ] {
        assert_eq!(code(&hfb(&args)), 2, "{args:?}");
    }
}

const TINY: &str = r#"
seed = 3

[arch]
name = "tinynet"

[plan]
mode = "hybrid"
alpha = 0.5

[train]
batch_size = 16

[[train.phases]]
name = "FP_TRAIN"
epochs = 2
initial_lr = 0.05
warmup_epochs = 1

[[train.phases]]
name = "QUANT_ACTIVE"
epochs = 1
initial_lr = 0.005

[[train.phases]]
name = "FROZEN"
epochs = 1
initial_lr = 0.0005

[dataset]
kind = "synthetic"

[dataset.synthetic]
num_classes = 10
train_per_class = 4
eval_per_class = 2
channels = 3
size = 32
blobs_per_class = 1
separation = 10.0
sigma = 1.0

[output]
dir = "run"
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

/// Metrics lines with the header timestamp removed.
fn metrics_without_timestamp(run: &Path) -> Vec<Value> {
    fs::read_to_string(run.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("timestamp");
            v
        })
        .collect()
}

#[test]
fn train_writes_three_phase_checkpoints_and_valid_outputs() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = hfb(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("final eval accuracy"));
    let run = dir.path().join("run");
    for f in ["fp_train.ckpt", "quant_active.ckpt", "frozen.ckpt"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let summary = read_json(&run.join("summary.json"));
    assert_valid("train-summary", &summary);
    assert_eq!(summary["checkpoints"].as_array().unwrap().len(), 3);

    let lines: Vec<Value> = fs::read_to_string(run.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0]["record"], "header");
    for l in &lines {
        assert_valid("metrics-record", l);
    }

    // The resolved config spells out defaults and parses back.
    let resolved = fs::read_to_string(run.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("eval_batch_size"));
    assert!(resolved.contains("threshold_factor"));
    let o = hfb(&["train", "--config", p(&run.join("config.resolved.toml"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = dir.path().join("run");
    assert_eq!(code(&hfb(&["train", "--config", p(&cfg)])), 0);
    let full = metrics_without_timestamp(&run);
    let frozen = fs::read(run.join("frozen.ckpt")).unwrap();
    let summary = fs::read(run.join("summary.json")).unwrap();

    for stop in ["1", "2", "3"] {
        fs::remove_dir_all(&run).unwrap();
        assert_eq!(
            code(&hfb(&["train", "--config", p(&cfg), "--stop-after", stop])),
            0
        );
        assert!(!run.join("summary.json").exists());
        let latest = run.join("latest.ckpt");
        let o = hfb(&["train", "--config", p(&cfg), "--resume", p(&latest)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert_eq!(metrics_without_timestamp(&run), full, "stop after {stop}");
        assert_eq!(fs::read(run.join("frozen.ckpt")).unwrap(), frozen);
        assert_eq!(fs::read(run.join("summary.json")).unwrap(), summary);
    }
}

#[test]
fn resume_from_a_different_config_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), TINY);
    assert_eq!(
        code(&hfb(&["train", "--config", p(&cfg), "--stop-after", "1"])),
        0
    );
    let ck = dir.path().join("run/latest.ckpt");
    let other = dir.path().join("other");
    fs::create_dir(&other).unwrap();
    let cfg2 = write_config(&other, &TINY.replace("seed = 3", "seed = 4"));
    let o = hfb(&["train", "--config", p(&cfg2), "--resume", p(&ck)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--resume"));
}

#[test]
fn train_config_errors_exit_two() {
    let dir = TempDir::new().unwrap();
    let cases = [
        TINY.replace("kind = \"synthetic\"", "kind = \"cifar10\""),
        TINY.replace("seed = 3", "seed = 3\ncolour = \"red\""),
        TINY.replace("alpha = 0.5", "alpha = 1.5"),
        TINY.replace("epochs = 2", "epochs = 0"),
        "not toml at all [".to_string(),
    ];
    for (i, text) in cases.iter().enumerate() {
        let cfg = write_config(dir.path(), text);
        let o = hfb(&["train", "--config", p(&cfg)]);
        assert_eq!(code(&o), 2, "case {i}: {}", stderr(&o));
    }
    let o = hfb(&["train", "--config", p(&dir.path().join("absent.toml"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_dataset_directory_names_the_path() {
    let dir = TempDir::new().unwrap();
    let text = TINY.split("[dataset]").next().unwrap().to_string()
        + "[dataset]\nkind = \"cifar10\"\npath = \"no-such-dir\"\n\n[output]\ndir = \"run\"\n";
    let cfg = write_config(dir.path(), &text);
    let o = hfb(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no-such-dir"), "{}", stderr(&o));
}

#[test]
fn exploding_loss_exits_three() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        &TINY.replace("initial_lr = 0.05", "initial_lr = 1e12"),
    );
    let o = hfb(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite loss at phase FP_TRAIN"));
}

#[test]
fn drift_between_checkpoints() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), TINY);
    assert_eq!(code(&hfb(&["train", "--config", p(&cfg)])), 0);
    let run = dir.path().join("run");
    let (fp, frozen) = (run.join("fp_train.ckpt"), run.join("frozen.ckpt"));

    let same = dir.path().join("same.json");
    let o = hfb(&[
        "drift",
        "--before",
        p(&fp),
        "--after",
        p(&fp),
        "--out",
        p(&same),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc = read_json(&same);
    assert_valid("drift", &doc);
    let s = &doc["summary"];
    assert!(s["count"].as_u64().unwrap() > 0);
    assert_eq!(s["mean"], 0.0);
    let counts: Vec<u64> = s["histogram"]["counts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c.as_u64().unwrap())
        .collect();
    assert_eq!(counts[0], s["count"].as_u64().unwrap());
    assert!(counts[1..].iter().all(|&c| c == 0));
    for layer in doc["layers"].as_array().unwrap() {
        assert!(layer["distances"]
            .as_array()
            .unwrap()
            .iter()
            .all(|d| d == 0.0));
    }

    let moved = dir.path().join("moved.json");
    assert_eq!(
        code(&hfb(&[
            "drift",
            "--before",
            p(&fp),
            "--after",
            p(&frozen),
            "--out",
            p(&moved)
        ])),
        0
    );
    let doc = read_json(&moved);
    assert_valid("drift", &doc);
    assert!(doc["summary"]["mean"].as_f64().unwrap() > 0.0);
}

#[test]
fn drift_input_errors_exit_two() {
    let dir = TempDir::new().unwrap();
    let junk = dir.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(code(&hfb(&["drift", "--before", p(&junk)])), 2);
    let o = hfb(&["drift", "--before", p(&junk), "--after", p(&junk)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--before"));
}
