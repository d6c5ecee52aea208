use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vqg_core::decoding::load_generations;
use vqg_core::metrics::MetricReport;

fn vqg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vqg"))
        .args(args)
        .current_dir(dir)
        .env_remove("VQG_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = vqg(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

const QUICK_CONFIG: &str = r#"{"epochs": 40, "embed_dim": 16, "hidden_dim": 24, "seed": 3}"#;

/// Synthetic corpus plus a quickly trained checkpoint in `dir`.
fn trained(dir: &Path) {
    ok(dir, &["synth", "--out", "data", "--images", "20", "--concepts", "4", "--seed", "5"]);
    fs::write(dir.join("config.json"), QUICK_CONFIG).unwrap();
    ok(
        dir,
        &[
            "train", "--annotations", "data/annotations.jsonl", "--features", "data/features.jsonl",
            "--config", "config.json", "--out", "model.json",
        ],
    );
}

fn generate(dir: &Path, strategy: &str, extra: &[&str], out: &str) {
    let mut args = vec!["generate", "--ckpt", "model.json", "--features", "data/features.jsonl", "--strategy", strategy, "--out", out];
    args.extend_from_slice(extra);
    ok(dir, &args);
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        ok(dir.path(), &["synth", "--out", out, "--images", "40", "--concepts", "5", "--seed", "7"]);
    }
    for f in ["annotations.jsonl", "features.jsonl"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "synth");
    assert_eq!(manifest["flags"]["seed"], 7);
    assert_eq!(manifest["outputs"].as_object().unwrap().len(), 2);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let out = vqg(p, &["synth", "--out", "x", "--concepts", "0"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_concepts"));
    assert_eq!(code(&vqg(p, &["compare"])), 2);
    assert_eq!(code(&vqg(p, &["no-such-command"])), 2);
    assert_eq!(code(&vqg(p, &["grad-check", "--eps", "0.5"])), 2);

    let threads = Command::new(env!("CARGO_BIN_EXE_vqg"))
        .args(["grad-check"])
        .env("VQG_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&threads), 2);
}

#[test]
fn train_rejects_corrupt_config_and_missing_features() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(p, &["synth", "--out", "data", "--images", "10", "--concepts", "2"]);
    fs::write(p.join("bad.json"), r#"{"epochs": "many"}"#).unwrap();
    let out = vqg(
        p,
        &["train", "--annotations", "data/annotations.jsonl", "--features", "data/features.jsonl", "--config", "bad.json", "--out", "m.json"],
    );
    assert_eq!(code(&out), 2);

    // Every image in the training split, one feature missing: the error
    // names that image.
    let tagged: String = fs::read_to_string(p.join("data/annotations.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v["split"] = "train".into();
            format!("{v}\n")
        })
        .collect();
    fs::write(p.join("train_only.jsonl"), tagged).unwrap();
    let text = fs::read_to_string(p.join("data/features.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    let rest: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
    fs::write(p.join("partial.jsonl"), rest).unwrap();
    fs::write(p.join("quick.json"), QUICK_CONFIG).unwrap();
    let out = vqg(
        p,
        &["train", "--annotations", "train_only.jsonl", "--features", "partial.jsonl", "--config", "quick.json", "--out", "m.json"],
    );
    assert_eq!(code(&out), 1);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains(first["image_id"].as_str().unwrap()), "{stderr}");
}

#[test]
fn train_generate_evaluate_compare() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    trained(p);
    for f in ["model.json", "model.json.splits.jsonl", "model.json.history.json", "model.json.manifest.json"] {
        assert!(p.join(f).exists(), "{f}");
    }

    generate(p, "greedy", &[], "greedy.jsonl");
    generate(p, "beam", &["--beam-size", "1"], "beam1.jsonl");
    let greedy = load_generations(p.join("greedy.jsonl")).unwrap();
    let beam1 = load_generations(p.join("beam1.jsonl")).unwrap();
    assert!(!greedy.is_empty());
    assert!(greedy.iter().all(|r| r.questions.len() == 1));
    for (g, b) in greedy.iter().zip(&beam1) {
        assert_eq!(g.image_id, b.image_id);
        assert_eq!(g.questions[0].tokens, b.questions[0].tokens);
    }

    generate(p, "dbs", &["--seed", "9"], "dbs_a.jsonl");
    generate(p, "dbs", &["--seed", "9"], "dbs_b.jsonl");
    assert_eq!(fs::read(p.join("dbs_a.jsonl")).unwrap(), fs::read(p.join("dbs_b.jsonl")).unwrap());
    generate(p, "beam", &[], "beam.jsonl");

    let mut reports = Vec::new();
    for run in ["greedy", "beam", "dbs_a"] {
        let report = format!("{run}.report.json");
        let stdout = ok(
            p,
            &["evaluate", "--generated", &format!("{run}.jsonl"), "--annotations", "model.json.splits.jsonl", "--out", &report],
        );
        assert_eq!(stdout.lines().count(), 2);
        let r = MetricReport::load(p.join(&report)).unwrap();
        assert_eq!(r.scale, "0-100");
        assert_eq!(r.n_images, greedy.len());
        reports.push(report);
    }
    let mut args = vec!["compare", "--out", "table.txt", "--reports"];
    args.extend(reports.iter().map(String::as_str));
    let stdout = ok(p, &args);
    assert_eq!(stdout, fs::read_to_string(p.join("table.txt")).unwrap());
    let rows: Vec<&str> = stdout.lines().skip(2).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.split_whitespace().count() == 7));
}

#[test]
fn perfect_copy_scores_100_and_missing_references_fail() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(
        p.join("refs.jsonl"),
        concat!(
            r#"{"image_id":"a","keywords":[],"questions":["what breed is this dog"],"split":"test"}"#,
            "\n",
            r#"{"image_id":"b","keywords":[],"questions":["who painted this old house"],"split":"test"}"#,
            "\n"
        ),
    )
    .unwrap();
    let gen = |id: &str, q: &str| {
        let tokens: Vec<&str> = q.split(' ').collect();
        format!(
            "{}\n",
            serde_json::json!({
                "image_id": id,
                "questions": [{"tokens": tokens, "logprob": -1.0}],
                "strategy": "greedy",
                "config": {"k": 5, "T": 3, "theta": 0.5, "seed": 0}
            })
        )
    };
    fs::write(
        p.join("copy.jsonl"),
        gen("a", "what breed is this dog") + &gen("b", "who painted this old house"),
    )
    .unwrap();
    let stdout = ok(p, &["evaluate", "--generated", "copy.jsonl", "--annotations", "refs.jsonl", "--out", "r.json"]);
    let row = stdout.lines().nth(1).unwrap();
    assert!(row.trim_start().starts_with("100.0"), "{row}");
    let r = MetricReport::load(p.join("r.json")).unwrap();
    assert!((r.cider - 100.0).abs() < 1e-9);

    fs::write(p.join("stray.jsonl"), gen("zzz", "what is this")).unwrap();
    let out = vqg(p, &["evaluate", "--generated", "stray.jsonl", "--annotations", "refs.jsonl", "--out", "s.json"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("zzz"));
}

#[test]
fn grad_check_default_passes() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["grad-check"]);
    assert!(stdout.starts_with("max relative error"));
}
