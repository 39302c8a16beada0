use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use siu_core::selfdata::{ANSWER_GEN_PREFIX, INSTRUCTION_GEN_PREFIX};

const ARTICLES: &str = r#"{"id":"a1","body":"The harbour bridge in Lindqvist reopened on Tuesday after repairs. The mayor said traffic will resume fully next week."}
{"id":"a2","body":"Striker Ada Moreau signed a three-year deal with Port Vale. She joins from the northern club Elmfield."}
"#;

const UNRELATED: &str = r#"{"instruction":"Name a primary colour.","response":"Red is a primary colour."}
{"instruction":"What is two plus two?","response":"Two plus two is four."}
{"instruction":"Give a synonym for quick.","response":"Fast is a synonym for quick."}
"#;

const ITEMS: &str = r#"{"id":"q1","instruction":"When did the bridge reopen?","reference_answer":"Tuesday","source_article_id":"a1"}
{"id":"q2","instruction":"Which club did Ada Moreau sign with?","reference_answer":"Port Vale","source_article_id":"a2"}
{"id":"q3","instruction":"What is two plus two?","reference_answer":"four"}
"#;

fn fixture(dir: &Path) -> PathBuf {
    std::fs::write(dir.join("articles.jsonl"), ARTICLES).unwrap();
    std::fs::write(dir.join("unrelated.jsonl"), UNRELATED).unwrap();
    std::fs::write(dir.join("items.jsonl"), ITEMS).unwrap();
    let cfg = format!(
        r#"
seed = 7

[corpus]
path = "{dir}/articles.jsonl"
unrelated_path = "{dir}/unrelated.jsonl"

[backend.model]
d_model = 16
n_layers = 1
n_heads = 2
seq_len = 512

[selfdata]
max_total_tokens = 400
completion_tokens = 8
workers = 2
unrelated_count = 2

[databuild]
batch_size = 2
seq_len = 512

[train]
peak_lr = 1e-3
warmup_steps = 0
check_interval = 0
max_steps = 3

[eval]
items_path = "{dir}/items.jsonl"
workers = 2

[eval.decode]
max_total_tokens = 400
"#,
        dir = dir.display()
    );
    let path = dir.join("siu.toml");
    std::fs::write(&path, cfg).unwrap();
    path
}

fn siu(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_siu"));
    cmd.args(args).env("SIU_LOG", "warn");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok<S: AsRef<str>>(args: &[S]) -> Output {
    let args: Vec<&str> = args.iter().map(AsRef::as_ref).collect();
    let out = siu(&args, &[]);
    assert!(
        out.status.success(),
        "siu {args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn full_toy_pipeline_produces_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture(tmp.path());
    let out = tmp.path().join("run");
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    let base = ["--config", c, "--out", o];
    let with = |extra: &[&'static str]| -> Vec<String> { base.iter().chain(extra).map(|s| s.to_string()).collect() };

    ok(&with(&["ingest"]));
    ok(&with(&["gendata"]));
    let dataset = std::fs::read_to_string(out.join("dataset.jsonl")).unwrap();
    assert!(dataset.lines().count() >= 2, "the unrelated share alone gives two pairs");
    for m in ["fact_ft", "naive", "context_aware"] {
        ok(&with(&["build", "--method", m]));
        ok(&with(&["train", "--method", m]));
        assert!(out.join(format!("checkpoints/{m}.ckpt")).exists());
    }
    let eval = ok(&with(&["eval"]));
    let report = std::fs::read_to_string(out.join("eval/report.md")).unwrap();
    assert_eq!(String::from_utf8_lossy(&eval.stdout), report);
    for m in ["mixinst", "fact_ft", "naive", "context_aware"] {
        assert!(report.contains(m), "report lacks {m}");
    }
    let records = std::fs::read_to_string(out.join("eval/records.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 4 * 3);
    assert!(out.join("eval/grounding.json").exists());
    for stem in ["ingest", "gendata", "build-naive", "train-context_aware", "eval"] {
        let m: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join(format!("manifests/{stem}.json"))).unwrap()).unwrap();
        assert_eq!(m["seeds"]["seed"], 7);
        assert!(!m["outputs"].as_object().unwrap().is_empty());
    }

    // Rebuilding and retraining reproduces the same bytes and manifests.
    let before: Vec<Vec<u8>> = ["build/naive.pack", "checkpoints/naive.ckpt", "manifests/build-naive.json", "manifests/train-naive.json"]
        .iter()
        .map(|p| std::fs::read(out.join(p)).unwrap())
        .collect();
    ok(&with(&["build", "--method", "naive"]));
    ok(&with(&["train", "--method", "naive"]));
    let after: Vec<Vec<u8>> = ["build/naive.pack", "checkpoints/naive.ckpt", "manifests/build-naive.json", "manifests/train-naive.json"]
        .iter()
        .map(|p| std::fs::read(out.join(p)).unwrap())
        .collect();
    assert!(before == after, "rerun changed artifacts");
}

#[test]
fn plain_dir_ingest_and_eval_subset() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture(tmp.path());
    let docs = tmp.path().join("docs");
    std::fs::create_dir(&docs).unwrap();
    std::fs::write(docs.join("a1.txt"), "The harbour bridge in Lindqvist reopened on Tuesday.").unwrap();
    std::fs::write(docs.join("a2.txt"), "Ada Moreau signed with Port Vale.").unwrap();
    let out = tmp.path().join("run");
    let (c, o, d) = (cfg.to_str().unwrap(), out.to_str().unwrap(), docs.to_str().unwrap());
    ok(&["--config", c, "--out", o, "ingest", "--input", d, "--format", "plain-dir"]);
    let corpus = std::fs::read_to_string(out.join("corpus.jsonl")).unwrap();
    assert_eq!(corpus.lines().count(), 2);
    ok(&["--config", c, "--out", o, "eval", "--methods", "mixinst"]);
    let records = std::fs::read_to_string(out.join("eval/records.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 3);
    assert!(!out.join("eval/grounding.json").exists());
}

/// Answers `/v1/generate` like an instruction-following model would.
fn mock_generator() -> (String, std::sync::Arc<std::sync::Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let prompts = std::sync::Arc::new(std::sync::Mutex::new(Vec::new()));
    let seen = prompts.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            if reader.read_line(&mut line).unwrap_or(0) == 0 {
                continue;
            }
            let mut len = 0;
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                if h.trim().is_empty() {
                    break;
                }
                if let Some((k, v)) = h.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        len = v.trim().parse().unwrap();
                    }
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let req: serde_json::Value = serde_json::from_slice(&body).unwrap();
            let prompt = req["prompt"].as_str().unwrap().to_string();
            seen.lock().unwrap().push(prompt.clone());
            let text = if prompt.contains(INSTRUCTION_GEN_PREFIX) {
                "1. What happened?\n2. Who was involved?\nnot a question"
            } else if prompt.contains(ANSWER_GEN_PREFIX) {
                "It is described in the article."
            } else {
                "unexpected"
            };
            let resp = serde_json::json!({"text": text, "finish_reason": "stop", "token_count": 6}).to_string();
            let _ = write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{resp}",
                resp.len()
            );
        }
    });
    (url, prompts)
}

#[test]
fn remote_gendata_speaks_the_wire_protocol() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture(tmp.path());
    let out = tmp.path().join("run");
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    let (url, prompts) = mock_generator();
    ok(&["--config", c, "--out", o, "ingest"]);
    let backend = format!("remote:{url}");
    ok(&["--config", c, "--out", o, "--backend", &backend, "gendata"]);
    // Two question prompts, then two answers per article.
    assert_eq!(prompts.lock().unwrap().len(), 6);
    let related = std::fs::read_to_string(out.join("selfdata/related.jsonl")).unwrap();
    let rows: Vec<serde_json::Value> = related.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r["origin"] == "self_generated" && r["source_article_id"].is_string()));
    assert_eq!(std::fs::read_to_string(out.join("dataset.jsonl")).unwrap().lines().count(), 6);
    assert_eq!(std::fs::read_to_string(out.join("selfdata/generation.log.jsonl")).unwrap().lines().count(), 6);
}

#[test]
fn config_errors_exit_2_and_list_every_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture(tmp.path());
    let out = siu(
        &["--config", cfg.to_str().unwrap(), "--out", tmp.path().join("run").to_str().unwrap(), "ingest"],
        &[("SIU_DATABUILD__BATCH_SIZE", "0"), ("SIU_SELFDATA__WORKERS", "0"), ("SIU_BACKEND__SPEC", "gpu")],
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("3 problems"), "{err}");
    for needle in ["batch_size", "workers", "backend.spec"] {
        assert!(err.contains(needle), "missing {needle} in {err}");
    }

    std::fs::write(tmp.path().join("bad.toml"), "[databuild]\nbatchsize = 4\n").unwrap();
    let out = siu(&["--config", tmp.path().join("bad.toml").to_str().unwrap(), "gendata"], &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_upstream_artifact_exits_3_naming_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture(tmp.path());
    let out = tmp.path().join("run");
    let o = siu(&["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "build", "--method", "naive"], &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("corpus.jsonl"));

    ok(&["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "ingest"]);
    let o = siu(&["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "train", "--method", "context_aware"], &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("context_aware.pack"));
}

#[test]
fn unreachable_backend_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture(tmp.path());
    let out = tmp.path().join("run");
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    ok(&["--config", c, "--out", o, "ingest"]);
    // Bind then drop, so nothing listens on the port.
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let backend = format!("remote:http://127.0.0.1:{port}");
    let r = siu(&["--config", c, "--out", o, "--backend", &backend, "gendata"], &[]);
    assert_eq!(r.status.code(), Some(4), "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn lab_writes_curves_for_each_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture(tmp.path());
    let out = tmp.path().join("run");
    let env = [
        ("SIU_LAB__SEEDS", "[3]"),
        ("SIU_LAB__N_ENTITIES", "4"),
        ("SIU_LAB__N_UPDATED", "2"),
        ("SIU_LAB__UNRELATED_COUNT", "2"),
        ("SIU_LAB__PRETRAIN__MAX_STEPS", "20"),
        ("SIU_LAB__FINETUNE__MAX_STEPS", "20"),
        ("SIU_LAB__CHECKPOINT_EVERY", "10"),
        ("SIU_LAB__REPACKS", "1"),
        ("SIU_LAB__MODEL__D_MODEL", "16"),
    ];
    let r = siu(&["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "lab"], &env);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for ext in ["jsonl", "csv", "svg"] {
        assert!(out.join(format!("lab/bias_seed3.{ext}")).exists());
    }
    let summary = std::fs::read_to_string(out.join("lab/summary.jsonl")).unwrap();
    let row: serde_json::Value = serde_json::from_str(summary.lines().next().unwrap()).unwrap();
    assert_eq!(row["seed"], 3);
    assert!(row["directional"]["holds"].is_boolean());
}
