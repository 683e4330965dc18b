use std::path::Path;
use std::process::{Command, Output};

fn privlex(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_privlex"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn module_commands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(privlex(
        d,
        &["synth", "--out", "fx", "--n-images", "200", "--n-concepts", "20", "--dim", "48", "--seed", "5"],
    ));
    let train_ids: Vec<String> = {
        let split: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("fx/split.json")).unwrap()).unwrap();
        split["train"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect()
    };
    assert!(!train_ids.is_empty());

    ok(privlex(d, &["vocab", "compile", "--in", "fx/vocab.jsonl", "--mode", "hierarchy", "--out", "prompts.jsonl"]));
    assert_eq!(std::fs::read_to_string(d.join("prompts.jsonl")).unwrap().lines().count(), 20);

    ok(privlex(d, &["score", "--images", "fx/images.pvx", "--concepts", "fx/concepts.pvx", "--out", "scores.pvx"]));
    ok(privlex(
        d,
        &["train", "--scores", "scores.pvx", "--labels", "fx/labels.csv", "--split", "fx/split.json", "--C", "0.5", "--max-iter", "200", "--out", "model.json"],
    ));
    let report = ok(privlex(
        d,
        &["evaluate", "--model", "model.json", "--scores", "scores.pvx", "--labels", "fx/labels.csv", "--split", "fx/split.json", "--out", "report.json"],
    ));
    let report: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert!(report["overall"]["ba"].as_f64().unwrap() > 0.8, "{report}");

    let text = ok(privlex(d, &["explain", "--model", "model.json", "--scores", "scores.pvx", "--format", "text"]));
    assert_eq!(text.lines().filter(|l| l.starts_with("img-")).count(), 200);

    ok(privlex(
        d,
        &["normalize", "--fit", "scores.pvx", "--apply", "scores.pvx", "--norm-out", "norm.json", "--out", "norm.pvx"],
    ));
    ok(privlex(
        d,
        &["tune", "--scores", "norm.pvx", "--labels", "fx/labels.csv", "--split", "fx/split.json", "--budget", "4", "--strategy", "tpe", "--out", "search.json"],
    ));

    ok(privlex(
        d,
        &["zeroshot", "calibrate", "--scores", "scores.pvx", "--annotations", "fx/annotations.jsonl", "--out", "thr.json"],
    ));
    ok(privlex(d, &["zeroshot", "detect", "--scores", "scores.pvx", "--thresholds", "thr.json", "--out", "det.jsonl"]));
    for out in ["a.json", "b.json"] {
        ok(privlex(
            d,
            &["zeroshot", "evaluate", "--scores", "scores.pvx", "--annotations", "fx/annotations.jsonl", "--thresholds", "thr.json", "--out", out],
        ));
    }
    let delta = ok(privlex(d, &["zeroshot", "compare", "--a", "a.json", "--b", "b.json", "--out", "cmp.json"]));
    assert!(delta.contains("0.0000"), "{delta}");

    ok(privlex(d, &["bias", "--models", "model.json", "model.json", "--out", "bias.csv", "--svg", "bias.svg"]));
    let csv = std::fs::read_to_string(d.join("bias.csv")).unwrap();
    assert!(csv.starts_with("concept_id,synthetic,synthetic,agreement\n"));
    assert!(d.join("bias.svg").is_file());
}

#[test]
fn run_reports_cache_hits() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(privlex(d, &["synth", "--out", "fx", "--n-images", "120", "--n-concepts", "12", "--dim", "32", "--budget", "3"]));
    let first = ok(privlex(d, &["--threads", "1", "run", "--config", "fx/pipeline.toml"]));
    assert!(first.lines().all(|l| l.contains("Executed")), "{first}");
    let second = ok(privlex(d, &["run", "--config", "fx/pipeline.toml", "--stages", "evaluate"]));
    assert!(second.lines().all(|l| l.contains("CacheHit")), "{second}");
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("bad.jsonl"), "{\"id\": \"a\"}\n").unwrap();
    let out = privlex(d, &["vocab", "compile", "--in", "bad.jsonl", "--out", "p.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    let out = privlex(d, &["score", "--images", "missing.pvx", "--concepts", "missing.pvx", "--out", "s.pvx"]);
    assert_eq!(out.status.code(), Some(1));
    let out = privlex(d, &["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
}
