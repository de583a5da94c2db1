use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::mpsc;
use std::thread;

use inlinethink_core::fixtures;
use inlinethink_core::grpo::{Rollout, RolloutGroup};
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_inlinethink"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn write(dir: &Path, name: &str, content: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, content).unwrap();
    p
}

fn jsonl<T: serde::Serialize>(items: &[T]) -> String {
    items.iter().map(|t| serde_json::to_string(t).unwrap() + "\n").collect()
}

#[test]
fn parse_validate_extract() {
    let dir = tempfile::tempdir().unwrap();
    let good = write(dir.path(), "good.txt", "<think>p</think>x = <thinkanywhere>why</thinkanywhere>1\n");
    let bad = write(dir.path(), "bad.txt", "<think>p</think>x = 1</thinkanywhere>\n");
    let good = good.to_str().unwrap();
    let bad = bad.to_str().unwrap();

    let parsed = stdout_json(&run(&["parse", good]));
    assert_eq!(parsed["ta_onsets"], serde_json::json!([4]));
    assert_eq!(run(&["extract", good]).stdout, b"x = 1\n");
    assert!(run(&["validate", good]).status.success());
    let v = run(&["validate", bad]);
    assert_eq!(v.status.code(), Some(1));
    let report: Value = serde_json::from_slice(&v.stdout).unwrap();
    assert_eq!(report["violations"][0]["kind"], "unmatched_tag");
    assert_eq!(run(&["extract", bad]).status.code(), Some(2));
    assert_eq!(run(&["extract", "--lenient", bad]).stdout, b"x = 1\n");

    // A custom scheme file changes the recognized delimiters.
    let scheme = write(dir.path(), "scheme.json", r#"{"mode": "text", "open_ta": "[[", "close_ta": "]]"}"#);
    let custom = write(dir.path(), "custom.txt", "<think>p</think>y = [[note]]2\n");
    let out = run(&["--scheme", scheme.to_str().unwrap(), "extract", custom.to_str().unwrap()]);
    assert_eq!(out.stdout, b"y = 2\n");
}

#[test]
fn analysis_commands() {
    let dir = tempfile::tempdir().unwrap();
    let traces = write(dir.path(), "cost.jsonl", &jsonl(&fixtures::token_cost_corpus(215.6, 22.5, 200, 1)));
    let out = run(&["token-cost", traces.to_str().unwrap()]);
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "215.6 + 22.5");

    let p = stdout_json(&run(&["passk", "--n", "4", "--c", "2", "--k", "1,2"]));
    assert_eq!(p["pass@1"].as_f64(), Some(0.5));
    assert!((p["pass@2"].as_f64().unwrap() - 5.0 / 6.0).abs() < 1e-12);
    let problems = write(dir.path(), "problems.jsonl", "{\"n\": 4, \"c\": 0}\n{\"n\": 4, \"c\": 4}\n");
    let avg = stdout_json(&run(&["passk", "--input", problems.to_str().unwrap(), "--k", "2"]));
    assert_eq!(avg["pass@2"].as_f64(), Some(0.5));

    let records: Vec<Value> = fixtures::syntax_corpus().iter().map(|c| serde_json::json!({ "raw": c.raw })).collect();
    let syntax = write(dir.path(), "syntax.jsonl", &jsonl(&records));
    let hist = stdout_json(&run(&["analyze-syntax", syntax.to_str().unwrap(), "--top", "2"]));
    assert_eq!(hist["total"], 60);
    assert_eq!(hist["top"][0][0], "Assign");
    assert_eq!(hist["top"][1][0], "Return");
    let stats = stdout_json(&run(&["stats", syntax.to_str().unwrap()]));
    assert_eq!(stats["sequences"], 22);

    let pairs = fixtures::paired_entropy_corpus(30, 0.3, 1.0, 2);
    let (en, dis): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let en = write(dir.path(), "en.jsonl", &jsonl(&en));
    let dis = write(dir.path(), "dis.jsonl", &jsonl(&dis));
    let summary =
        stdout_json(&run(&["analyze-entropy", "--enabled", en.to_str().unwrap(), "--disabled", dis.to_str().unwrap()]));
    assert_eq!(summary["predominantly_positive"], true);
    assert!((summary["summary"]["mean"].as_f64().unwrap() - 0.3).abs() < 1e-9);
}

#[test]
fn embeddings_and_grpo_audit() {
    let dir = tempfile::tempdir().unwrap();
    let table = "dim 3\nthink\t1 1 1\nany\t2 2 2\nwhere\t3 3 3\n<|im_start|>\t0.3333333333333333 0.3333333333333333 0.3333333333333333\n<|im_end|>\t0 0 0\n";
    let t = write(dir.path(), "table.txt", table);
    let out = dir.path().join("out.txt");
    let report =
        stdout_json(&run(&["init-embeddings", "--table", t.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    assert_eq!(report["issues"], serde_json::json!([]));
    let text = std::fs::read_to_string(&out).unwrap();
    let close = text.lines().find(|l| l.starts_with("</ta>\t")).unwrap();
    assert_eq!(close, "</ta>\t1.0 1.0 1.0");

    let r = |theta: f64, reward: f64| Rollout {
        tokens: vec![7],
        logp_theta: vec![theta],
        logp_old: vec![-1.0],
        logp_ref: vec![-1.0],
        reward,
    };
    let group = RolloutGroup { prompt_id: "g".into(), rollouts: vec![r(1.5f64.ln() - 1.0, 1.1), r(-1.0, 0.1)] };
    let groups = write(dir.path(), "groups.jsonl", &jsonl(&[group]));
    let out = run(&["grpo-audit", groups.to_str().unwrap(), "--beta", "0"]);
    let line: Value = stdout_json(&out);
    let adv: Vec<f64> = serde_json::from_value(line["report"]["advantages"].clone()).unwrap();
    assert!((adv[0] - 1.0).abs() < 1e-12 && (adv[1] + 1.0).abs() < 1e-12, "{adv:?}");
    assert!((line["report"]["per_rollout"][0].as_f64().unwrap() - 1.2).abs() < 1e-9);
}

#[test]
fn build_coldstart_with_mock() {
    let dir = tempfile::tempdir().unwrap();
    let reqs = write(dir.path(), "reqs.txt", "Add two ints\n\nReverse a list\n");
    let out = dir.path().join("ds.jsonl");
    let report = dir.path().join("report.json");
    let status = run(&[
        "build-coldstart",
        "--requirements",
        reqs.to_str().unwrap(),
        "--target",
        "12",
        "--mock-malformed-rate",
        "0.3",
        "--mock-seed",
        "5",
        "--out",
        out.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert!(status.status.success());
    let lines = std::fs::read_to_string(&out).unwrap();
    assert_eq!(lines.lines().count(), 12);
    let rep: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let dropped: u64 = rep["dropped"].as_object().unwrap().values().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(rep["kept"].as_u64().unwrap() + dropped, rep["calls"].as_u64().unwrap());

    let exhausted = run(&[
        "build-coldstart",
        "--requirements",
        reqs.to_str().unwrap(),
        "--target",
        "50",
        "--budget",
        "50",
        "--mock-malformed-rate",
        "0.5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(exhausted.status.code(), Some(1));
    assert!(std::fs::read_to_string(&out).unwrap().lines().count() < 50);
}

/// Answers `n` chat completion requests and reports each request's head.
fn fake_chat_server(n: usize, content: &'static str) -> (String, mpsc::Receiver<String>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for stream in listener.incoming().take(n) {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if line == "\r\n" {
                    break;
                }
                head.push_str(&line);
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            tx.send(head).unwrap();
            let payload =
                serde_json::json!({ "choices": [{ "message": { "role": "assistant", "content": content } }] });
            let payload = payload.to_string();
            write!(stream, "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{payload}", payload.len()).unwrap();
        }
    });
    (format!("http://{addr}/v1/chat/completions"), rx)
}

#[test]
fn build_coldstart_over_http_backend() {
    let dir = tempfile::tempdir().unwrap();
    let reqs = write(dir.path(), "reqs.txt", "Return one\n");
    let out = dir.path().join("ds.jsonl");
    let (url, heads) =
        fake_chat_server(2, "<think>one</think>def solve():\n    return <thinkanywhere>constant</thinkanywhere>1\n");
    let status = bin()
        .args(["build-coldstart", "--requirements", reqs.to_str().unwrap(), "--target", "2", "--parallelism", "1"])
        .args(["--endpoint", &url, "--model", "m", "--out", out.to_str().unwrap()])
        .env("TA_BACKEND_TOKEN", "tok-123")
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 2);
    let head = heads.recv().unwrap().to_ascii_lowercase();
    assert!(head.contains("authorization: bearer tok-123"), "{head}");
}

#[test]
fn serve_answers_health() {
    let mut child = bin()
        .args(["serve", "--port", "0", "--workers", "2", "--queue-depth", "4"])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stderr = BufReader::new(child.stderr.take().unwrap());
    let mut line = String::new();
    stderr.read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect("listen line").to_string();
    let health: Value = reqwest::blocking::get(format!("http://{addr}/health")).unwrap().json().unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert_eq!(health["status"], "ok");
    assert_eq!(health["sandbox_workers_free"], 2);
}
