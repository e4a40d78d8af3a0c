//! End-to-end tests of the `mtpdec` binary: every subcommand through real
//! files, plus the diagnostics on malformed inputs.

use std::path::Path;
use std::process::{Command, Output};

fn mtpdec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtpdec"))
        .args(args)
        .output()
        .expect("binary should run")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Train a small model on a cyclic corpus and return its path.
fn train_toy_model(dir: &Path) -> std::path::PathBuf {
    let corpus = dir.join("corpus.txt");
    let line: Vec<String> = (0..64).map(|i| (i % 8).to_string()).collect();
    std::fs::write(&corpus, line.join(" ") + "\n").unwrap();
    let model = dir.join("model.txt");
    let out = mtpdec(&[
        "train",
        "--corpus",
        corpus.to_str().unwrap(),
        "--vocab",
        "8",
        "--hidden",
        "16",
        "--window",
        "2",
        "--stage1-steps",
        "500",
        "--stage1-lr",
        "1.0",
        "--stage2-steps",
        "300",
        "--stage2-lr",
        "0.2",
        "--seed",
        "7",
        "--out",
        model.to_str().unwrap(),
    ]);
    assert_success(&out);
    model
}

#[test]
fn train_then_decode_matches_autoregressive_reference() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_toy_model(dir.path());

    let verified = dir.path().join("verified.txt");
    let stats = dir.path().join("stats.json");
    let reference = dir.path().join("reference.txt");
    assert_success(&mtpdec(&[
        "decode",
        "--model",
        model.to_str().unwrap(),
        "--prompt",
        "0,1",
        "--max-tokens",
        "200",
        "--out",
        verified.to_str().unwrap(),
        "--stats",
        stats.to_str().unwrap(),
    ]));
    assert_success(&mtpdec(&[
        "decode",
        "--model",
        model.to_str().unwrap(),
        "--prompt",
        "0,1",
        "--max-tokens",
        "200",
        "--force-autoregressive",
        "--out",
        reference.to_str().unwrap(),
    ]));

    let verified_bytes = std::fs::read(&verified).unwrap();
    let reference_bytes = std::fs::read(&reference).unwrap();
    assert_eq!(verified_bytes, reference_bytes);
    assert_eq!(verified_bytes.iter().filter(|&&b| b == b'\n').count(), 200);

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&stats).unwrap()).unwrap();
    assert_eq!(report["tokens"], 200);
    let passes = report["forward_passes"].as_u64().unwrap();
    assert!(passes < 200, "trained model should save passes, used {passes}");
    assert!(report["avg_accepted_display"].as_str().unwrap().ends_with("/ 6"));
}

#[test]
fn decode_runs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_toy_model(dir.path());
    let out1 = dir.path().join("a.txt");
    let out2 = dir.path().join("b.txt");
    for out in [&out1, &out2] {
        assert_success(&mtpdec(&[
            "decode",
            "--model",
            model.to_str().unwrap(),
            "--prompt",
            "3",
            "--max-tokens",
            "50",
            "--out",
            out.to_str().unwrap(),
        ]));
    }
    assert_eq!(std::fs::read(&out1).unwrap(), std::fs::read(&out2).unwrap());
}

#[test]
fn simulate_reports_rates_and_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let r1 = dir.path().join("r1.json");
    let r2 = dir.path().join("r2.json");
    for r in [&r1, &r2] {
        assert_success(&mtpdec(&[
            "simulate",
            "--rates",
            "0.95,0.88,0.80,0.71,0.64",
            "--steps",
            "200000",
            "--seed",
            "5",
            "--out",
            r.to_str().unwrap(),
        ]));
    }
    assert_eq!(std::fs::read(&r1).unwrap(), std::fs::read(&r2).unwrap());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&r1).unwrap()).unwrap();
    let avg = report["avg_accepted_length"].as_f64().unwrap();
    assert!((avg - 4.98).abs() < 0.05, "avg {avg}");
    let rates = report["rates"].as_array().unwrap();
    assert_eq!(rates.len(), 5);
    assert!((rates[0].as_f64().unwrap() - 0.95).abs() < 0.01);
}

#[test]
fn score_reports_error_rates() {
    let dir = tempfile::tempdir().unwrap();
    let refs = dir.path().join("ref.txt");
    let hyps = dir.path().join("hyp.txt");
    std::fs::write(&refs, "the quick brown fox\nhello world\n").unwrap();
    std::fs::write(&hyps, "the quack brown fox jumps\nhello world\n").unwrap();
    let report_path = dir.path().join("report.json");
    assert_success(&mtpdec(&[
        "score",
        "--ref",
        refs.to_str().unwrap(),
        "--hyp",
        hyps.to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
    ]));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    // One substitution and one insertion over six reference words.
    assert_eq!(report["total_edits"], 2);
    assert_eq!(report["total_reference_length"], 6);
    let rate = report["aggregate_error_rate"].as_f64().unwrap();
    assert!((rate - 2.0 / 6.0).abs() < 1e-12);
    assert_eq!(report["utterances"][1]["error_rate"], 0.0);
}

#[test]
fn fuse_round_trips_and_separates_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("clips.jsonl");
    let lines = [
        // Unanimous clip: kept.
        r#"{"clip_id":"c1","start":0.0,"end":5.0,"hyps":["good morning","good morning","good morning"]}"#,
        // Heavy three-way disagreement: discarded by rate.
        r#"{"clip_id":"c2","start":5.0,"end":9.0,"hyps":["aa bb","cc dd","ee ff"]}"#,
        // Empty after normalization: rejected outright.
        r#"{"clip_id":"c3","start":9.0,"end":12.0,"hyps":["...","fine here","fine here"]}"#,
        // Kept again; starts a fresh sample after the gap.
        r#"{"clip_id":"c4","start":12.0,"end":15.0,"hyps":["see you","see you","see you"]}"#,
    ];
    std::fs::write(&input, lines.join("\n") + "\n").unwrap();
    let output = dir.path().join("fused.jsonl");
    let samples = dir.path().join("samples.jsonl");
    assert_success(&mtpdec(&[
        "fuse",
        "--input",
        input.to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
        "--samples",
        samples.to_str().unwrap(),
    ]));

    let fused: Vec<serde_json::Value> = std::fs::read_to_string(&output)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(fused.len(), 4);
    assert_eq!(fused[0]["verdict"], "kept");
    assert_eq!(fused[0]["e_hat"], 0.0);
    assert_eq!(fused[1]["verdict"], "high_disagreement");
    assert_eq!(fused[2]["verdict"], "empty_hypothesis");
    assert_eq!(fused[3]["verdict"], "kept");

    let samples: Vec<serde_json::Value> = std::fs::read_to_string(&samples)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    // Discarded clips break the chain, so the two kept clips form two
    // separate samples.
    assert_eq!(samples.len(), 2);
    assert_eq!(samples[0]["text"], "good morning");
    assert_eq!(samples[1]["text"], "see you");
    assert!(samples.iter().all(|s| s["refined"] == true));
}

#[test]
fn fuse_reports_the_malformed_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("clips.jsonl");
    std::fs::write(
        &input,
        concat!(
            r#"{"clip_id":"c1","start":0.0,"end":5.0,"hyps":["a","a","a"]}"#,
            "\n",
            "{not json}\n"
        ),
    )
    .unwrap();
    let out = mtpdec(&[
        "fuse",
        "--input",
        input.to_str().unwrap(),
        "--output",
        dir.path().join("o.jsonl").to_str().unwrap(),
        "--samples",
        dir.path().join("s.jsonl").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains(":2:"), "missing line number: {stderr}");
    assert!(stderr.contains("bad clip record"), "stderr: {stderr}");
}

#[test]
fn decode_rejects_a_model_with_the_wrong_version_tag() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.txt");
    std::fs::write(&model, "mtp-linear-model v999\n1 1 1 1\n").unwrap();
    let out = mtpdec(&[
        "decode",
        "--model",
        model.to_str().unwrap(),
        "--prompt",
        "0",
        "--out",
        dir.path().join("t.txt").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("mtp-linear-model v999"),
        "diagnostic should quote the unexpected tag: {stderr}"
    );
}

#[test]
fn decode_rejects_out_of_range_prompt_tokens() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_toy_model(dir.path());
    let out = mtpdec(&[
        "decode",
        "--model",
        model.to_str().unwrap(),
        "--prompt",
        "42",
        "--out",
        dir.path().join("t.txt").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("out of range"));
}

#[test]
fn usage_error_exits_nonzero() {
    let out = mtpdec(&["no-such-command"]);
    assert!(!out.status.success());
}
