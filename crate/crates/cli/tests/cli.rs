use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use groundrl::attention::write_dump_record;
use groundrl::{AttentionDims, AttentionTensor};
use serde_json::Value;

fn groundrl(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_groundrl"));
    cmd.args(args).env_remove("SATORI_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn groundrl")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn json_lines(o: &Output) -> Vec<Value> {
    stdout(o).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const PERFECT: &str = r#"{"id":"a","raw":"<caption>a red circle</caption><bbox>[[0,0,8,8]]</bbox><answer>red</answer>","gold_caption":"a red circle","gold_boxes":[[0,0,8,8]],"gold_answer":"red","group":"g1"}"#;

#[test]
fn score_perfect_and_empty() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("r.jsonl");
    fs::write(&f, format!("{PERFECT}\n{PERFECT}\n")).unwrap();
    let o = groundrl(&["score", p(&f)], &[]);
    assert!(o.status.success());
    for rec in json_lines(&o) {
        assert!((rec["total"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    }

    let empty = PERFECT.replace(
        r#""raw":"<caption>a red circle</caption><bbox>[[0,0,8,8]]</bbox><answer>red</answer>""#,
        r#""raw":"""#,
    );
    fs::write(&f, format!("{empty}\n{empty}\n")).unwrap();
    let o = groundrl(&["score", p(&f)], &[]);
    assert!(json_lines(&o).iter().all(|r| r["total"].as_f64() == Some(0.0)));
    assert!(stderr(&o).contains("mean total    0.000000"));
}

#[test]
fn score_mixed_file_keeps_order_and_reports_bad_lines() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("r.jsonl");
    let partial = PERFECT.replace("\"id\":\"a\"", "\"id\":\"b\"").replace("<answer>red</answer>", "<answer>blue</answer>");
    let reverse = PERFECT
        .replace("\"id\":\"a\"", "\"id\":\"c\"")
        .replace("\"group\":\"g1\"", "\"group\":\"g2\",\"mode\":\"bbox-first\"");
    let bad = r#"{"id":"d","raw":"x"}"#;
    fs::write(&f, format!("{PERFECT}\n{bad}\n{partial}\n\nnot json\n{reverse}\n")).unwrap();
    let o = groundrl(&["score", p(&f), "--weights", "0.1,0.2,0.3,0.4"], &[]);
    assert!(o.status.success());
    let recs = json_lines(&o);
    assert_eq!(recs.len(), 5);
    assert_eq!(recs[0]["id"], "a");
    assert_eq!(recs[1]["id"], "d");
    assert!(recs[1]["error"].is_string());
    assert_eq!(recs[1]["line"], 2);
    assert_eq!(recs[2]["id"], "b");
    assert_eq!(recs[3]["line"], 5);
    // caption-first text under the bbox-first layout fails only the format check
    assert_eq!(recs[4]["r_format"], 0.0);
    assert_eq!(recs[4]["r_acc"], 1.0);

    let totals: Vec<f64> = recs.iter().filter_map(|r| r["total"].as_f64()).collect();
    let mean = totals.iter().sum::<f64>() / totals.len() as f64;
    let err = stderr(&o);
    assert!(err.contains(&format!("mean total    {mean:.6}")), "{err}");
    assert!(err.contains("scored 3 rollouts, 2 unreadable"));
    assert!(err.contains("per-group total reward variance"));
}

#[test]
fn score_unreadable_input_fails() {
    let o = groundrl(&["score", "/nonexistent/rollouts.jsonl"], &[]);
    assert!(!o.status.success());
    assert!(stdout(&o).is_empty());
}

#[test]
fn train_zero_steps_evaluates_only() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let o = groundrl(&["train-toy", "--steps", "0", "--log", p(&log)], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("final held-out accuracy"));
    assert_eq!(fs::read_to_string(&log).unwrap(), "");
}

#[test]
fn train_is_deterministic_and_honours_seed_sources() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, extra: &[&str], env: &[(&str, &str)]| {
        let log = dir.path().join(name);
        let mut args = vec!["train-toy", "--steps", "15", "--eval-tasks", "20", "--log", p(&log)];
        args.extend_from_slice(extra);
        let o = groundrl(&args, env);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(&log).unwrap()
    };
    let a = run("a", &["--seed", "7"], &[]);
    let b = run("b", &["--seed", "7"], &[]);
    assert_eq!(a, b);
    assert_eq!(a.iter().filter(|c| **c == b'\n').count(), 15);
    let env = run("c", &[], &[("SATORI_SEED", "7")]);
    assert_eq!(a, env);
    let flag_wins = run("d", &["--seed", "7"], &[("SATORI_SEED", "8")]);
    assert_eq!(a, flag_wins);
    let other = run("e", &["--seed", "8"], &[]);
    assert_ne!(a, other);
}

#[test]
fn train_config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"steps": 4, "seed": 3, "group-size": 4, "weights": [0, 0, 1, 0], "eval-tasks": 10}"#).unwrap();
    let o = groundrl(&["train-toy", "--config", p(&cfg), "--steps", "2"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("steps 2  seed 3"), "{out}");
    assert!(out.contains("weights [0.0, 0.0, 1.0, 0.0]"), "{out}");

    fs::write(&cfg, r#"{"steps": 4, "learning-rate": 1}"#).unwrap();
    assert!(!groundrl(&["train-toy", "--config", p(&cfg)], &[]).status.success());
}

#[test]
fn train_rejects_conflicts_with_usage() {
    let o = groundrl(&["train-toy", "--mode", "caption-first", "--early-stop", "--steps", "1"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
    let o = groundrl(&["train-toy", "--weights", "0.5,0.5,0.5,0"], &[]);
    assert!(!o.status.success());
    let o = groundrl(&["train-toy", "--temperature", "0", "--steps", "1"], &[]);
    assert_eq!(o.status.code(), Some(2));
}

fn write_dump(path: &Path, tensors: &[AttentionTensor]) {
    let mut bytes = Vec::new();
    for t in tensors {
        write_dump_record(&mut bytes, t).unwrap();
    }
    fs::write(path, bytes).unwrap();
}

fn uniform_tensor(h: usize, w: usize) -> AttentionTensor {
    let dims = AttentionDims {
        layers: 2,
        heads: 2,
        answer_tokens: 1,
        seq_len: 3 + h * w,
        vs_pos: 2,
        ve_pos: 2 + h * w,
        h,
        w,
    };
    AttentionTensor::new(dims, vec![0.5; dims.num_values()]).unwrap()
}

#[test]
fn rad_uniform_dump_gives_area_fractions() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("a.bin");
    let boxes = dir.path().join("b.jsonl");
    write_dump(&dump, &[uniform_tensor(4, 4), uniform_tensor(4, 4)]);
    fs::write(
        &boxes,
        "{\"image_width\":64,\"image_height\":64,\"boxes\":[[0,0,32,16]]}\n{\"image_width\":64,\"image_height\":64,\"boxes\":[[0,0,64,64]]}\n",
    )
    .unwrap();
    let o = groundrl(&["rad", "--dump", p(&dump), "--boxes", p(&boxes)], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let recs = json_lines(&o);
    assert!((recs[0]["rad"].as_f64().unwrap() - 2.0 / 16.0).abs() < 1e-9);
    assert!((recs[1]["rad"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert!((recs[2]["cohort_mean"].as_f64().unwrap() - (1.0 + 0.125) / 2.0).abs() < 1e-9);
}

#[test]
fn rad_rejects_mismatch_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("a.bin");
    let boxes = dir.path().join("b.jsonl");
    write_dump(&dump, &[uniform_tensor(2, 2)]);
    fs::write(&boxes, "").unwrap();
    assert!(!groundrl(&["rad", "--dump", p(&dump), "--boxes", p(&boxes)], &[]).status.success());

    fs::write(&boxes, "{\"image_width\":8,\"image_height\":8,\"boxes\":[[0,0,4,4]]}\n").unwrap();
    let bytes = fs::read(&dump).unwrap();
    fs::write(&dump, &bytes[..bytes.len() - 3]).unwrap();
    let o = groundrl(&["rad", "--dump", p(&dump), "--boxes", p(&boxes)], &[]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("malformed dump"));
}

fn last_json(o: &Output) -> Value {
    serde_json::from_str(stdout(o).lines().last().unwrap()).unwrap()
}

#[test]
fn variance_csv_uncorrelated_channels() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("r.csv");
    let mut text = String::from("group,caption,bbox,acc,format\n");
    for i in 0..8u32 {
        let row: Vec<String> = (1..5u32)
            .map(|j| if (i & j).count_ones() % 2 == 0 { "1" } else { "0" }.to_string())
            .collect();
        text.push_str(&format!("g{},{}\n", i / 4, row.join(",")));
    }
    fs::write(&f, text).unwrap();
    let o = groundrl(&["variance", p(&f)], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains(">> reduction ratio 0.7500"));
    let report = last_json(&o);
    assert!((report["reduction_ratio"].as_f64().unwrap() - 0.75).abs() < 1e-12);
    assert_eq!(report["split"]["groups"], 2);
}

#[test]
fn variance_perfectly_correlated_and_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("r.csv");
    fs::write(&f, "caption,bbox,acc,format\n0,0,0,1\n1,1,1,1\n0,0,0,1\n1,1,1,1\n").unwrap();
    let o = groundrl(&["variance", p(&f), "--weights", "0.5,0,0.5,0"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(last_json(&o)["reduction_ratio"].as_f64().unwrap().abs() < 1e-12);

    let o = groundrl(&["variance", p(&f), "--baseline", "format"], &[]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("zero variance"));
}

#[test]
fn variance_of_a_toy_training_log() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let o = groundrl(&["train-toy", "--steps", "40", "--eval-tasks", "20", "--log", p(&log)], &[]);
    assert!(o.status.success());
    let o = groundrl(&["variance", p(&log)], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = last_json(&o);
    assert!(report["reduction_ratio"].as_f64().unwrap() > 0.0);
    assert_eq!(report["split"]["groups"], 40);
}

const RECORD: &str = r#"{"image_ref":"img/1.png","question":"what is it?","caption":"A small red bird sits on a thin branch under a clear sky.","boxes":[[10,10,50,40]],"answer":"bird","source":"birds","category":"Perception","subtask":"Object Recognition and Detection"}"#;

#[test]
fn validate_data_reports_failures() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    let reference = dir.path().join("ref.jsonl");
    let short = RECORD.replace("img/1.png", "img/2.png").replace(
        "A small red bird sits on a thin branch under a clear sky.",
        "A bird.",
    );
    let off = RECORD.replace("img/1.png", "img/3.png");
    fs::write(&data, format!("{RECORD}\n{short}\n{{\"broken\": true}}\n{off}\n")).unwrap();
    fs::write(
        &reference,
        "{\"image_ref\":\"img/1.png\",\"boxes\":[[10,10,50,40]]}\n{\"image_ref\":\"img/3.png\",\"boxes\":[[10,10,90,40]]}\n",
    )
    .unwrap();
    let o = groundrl(&["validate-data", p(&data), "--reference", p(&reference)], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let recs = json_lines(&o);
    assert_eq!(recs.len(), 2);
    assert_eq!(recs[0]["line"], 2);
    assert_eq!(recs[0]["failures"][0]["check"], "caption_length");
    assert_eq!(recs[1]["line"], 4);
    assert_eq!(recs[1]["failures"][0]["check"], "bbox");
    let err = stderr(&o);
    assert!(err.contains("line 3"), "{err}");
    assert!(err.contains("3 records parsed, 1 passed, 2 failed, 1 malformed lines"), "{err}");

    let strict = groundrl(&["validate-data", p(&data), "--strict"], &[]);
    assert!(!strict.status.success());
    assert!(!groundrl(&["validate-data", "/nonexistent.jsonl"], &[]).status.success());
}

#[test]
fn stats_table_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    let two = RECORD
        .replace("[[10,10,50,40]]", "[[10,10,50,40],[0,0,5,5],[[1,1],[4,1],[4,4],[1,4]]]")
        .replace("\"birds\"", "\"docs\"");
    fs::write(&data, format!("{RECORD}\n{two}\n")).unwrap();
    let o = groundrl(&["stats", p(&data)], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let st = last_json(&o);
    assert_eq!(st["samples"], 2);
    assert_eq!(st["avg_boxes"], 2.0);
    assert_eq!(st["avg_caption_words"], 13.0);
    assert_eq!(st["per_source"]["docs"]["avg_boxes"], 3.0);

    fs::write(&data, "").unwrap();
    assert!(!groundrl(&["stats", p(&data)], &[]).status.success());
}
