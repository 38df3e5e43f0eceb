use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use fqninfer_cli::commands::InferOutput;
use fqninfer_cli::manifest::RunManifest;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/fixtures")).join(name)
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fqninfer"));
    for (k, _) in std::env::vars() {
        if k.starts_with("FQNINFER_") {
            c.env_remove(k);
        }
    }
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn vocab() -> String {
    fixture("vocab.txt").display().to_string()
}

#[test]
fn gen_prompts_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = fixture("corpus.jsonl");
    let outs: Vec<PathBuf> = ["a", "b"].iter().map(|n| dir.path().join(n)).collect();
    for o in &outs {
        let r = run(&["--vocab", &vocab(), "--seed", "42", "--out", s(o), "gen-prompts", s(&corpus)]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    for f in ["prompts.jsonl", "training.jsonl", "split.json", "manifest.json"] {
        let a = std::fs::read(outs[0].join(f)).unwrap();
        let b = std::fs::read(outs[1].join(f)).unwrap();
        assert!(!a.is_empty());
        if f == "manifest.json" {
            // Output paths differ between the two directories; digests must not.
            let ma: RunManifest = serde_json::from_slice(&a).unwrap();
            let mb: RunManifest = serde_json::from_slice(&b).unwrap();
            let digests = |m: &RunManifest| m.outputs.iter().map(|d| d.sha256.clone()).collect::<Vec<_>>();
            assert_eq!(digests(&ma), digests(&mb));
            assert_eq!(ma.config_sha256, mb.config_sha256);
            assert_eq!(ma.seed, 42);
        } else {
            assert_eq!(a, b, "{f} differs");
        }
    }
}

#[test]
fn infer_fig1_with_scripted_backend() {
    let backend = format!("scripted:{}", fixture("scripted.json").display());
    let r = run(&["--vocab", &vocab(), "--backend", &backend, "infer", s(&fixture("fig1.java"))]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let out: InferOutput = serde_json::from_slice(&r.stdout).unwrap();
    assert_eq!(out.points.len(), 5);
    let got: Vec<(&str, &str, usize)> = out
        .points
        .iter()
        .map(|p| {
            let pred = p.prediction.as_ref().unwrap();
            (p.point.simple_name.as_str(), pred.fqn.as_str(), pred.span_len)
        })
        .collect();
    // The fixture scores length 4 at 0.8875 and every other length at 0.2.
    assert_eq!(
        got,
        vec![
            ("reader", "java.util.", 4),
            ("List", "java.util.List", 4),
            ("String", "java.util.String", 4),
            ("File", "java.util.File", 4),
            ("URL", "java.util.URL", 4),
        ]
    );
    assert!(out.points.iter().all(|p| (p.prediction.as_ref().unwrap().score - 0.8875).abs() < 1e-12));
}

#[test]
fn detect_reads_stdin() {
    let mut child = bin()
        .arg("detect")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"URL url = new URL(s); url.openStream();")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["unit_id"], "stdin");
    let names: Vec<&str> = v["points"].as_array().unwrap().iter().map(|p| p["simple_name"].as_str().unwrap()).collect();
    assert_eq!(names, ["URL", "URL"]);
}

#[test]
fn bad_config_path_is_fatal() {
    let r = run(&["--config", "/nonexistent/run.json", "detect", s(&fixture("fig1.java"))]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("/nonexistent/run.json"));
}

#[test]
fn invalid_config_values_are_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"span_min": 9, "span_max": 3}"#).unwrap();
    let r = run(&["--config", s(&cfg), "detect", s(&fixture("fig1.java"))]);
    assert_eq!(r.status.code(), Some(2));
    std::fs::write(&cfg, r#"{"spam_min": 3}"#).unwrap();
    let r = run(&["--config", s(&cfg), "detect", s(&fixture("fig1.java"))]);
    assert_eq!(r.status.code(), Some(2));
    let r = run(&["--backend", "bert", "detect", s(&fixture("fig1.java"))]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn missing_vocab_is_fatal() {
    let r = run(&["--backend", "remote:http://127.0.0.1:9", "infer", s(&fixture("fig1.java"))]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("vocab"));
}

#[test]
fn strict_turns_point_failures_into_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let cfg = dir.path().join("run.json");
    std::fs::write(
        &cfg,
        format!(
            r#"{{"vocab": "{}", "backend": "remote:http://127.0.0.1:{port}", "span_max": 4, "remote": {{"retries": 0, "timeout_secs": 2}}}}"#,
            vocab()
        ),
    )
    .unwrap();
    let snippet = fixture("fig1.java");
    let lenient = run(&["--config", s(&cfg), "infer", s(&snippet)]);
    assert_eq!(lenient.status.code(), Some(0));
    let out: InferOutput = serde_json::from_slice(&lenient.stdout).unwrap();
    assert!(out.points.iter().all(|p| p.prediction.is_none() && p.error.is_some()));
    let strict = run(&["--config", s(&cfg), "--strict", "infer", s(&snippet)]);
    assert_eq!(strict.status.code(), Some(1));
}

#[test]
fn flags_beat_env_beat_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, format!(r#"{{"seed": 1, "vocab": "{}"}}"#, vocab())).unwrap();
    let corpus = fixture("corpus.jsonl");
    let seed_of = |extra_env: Option<&str>, flag: Option<&str>| -> u64 {
        let out = dir.path().join(format!("o-{extra_env:?}-{flag:?}"));
        let mut c = bin();
        c.args(["--config", s(&cfg), "--out", s(&out)]);
        if let Some(f) = flag {
            c.args(["--seed", f]);
        }
        if let Some(e) = extra_env {
            c.env("FQNINFER_SEED", e);
        }
        let r = c.args(["gen-prompts", s(&corpus)]).output().unwrap();
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        let m: RunManifest = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
        m.seed
    };
    assert_eq!(seed_of(None, None), 1);
    assert_eq!(seed_of(Some("2"), None), 2);
    assert_eq!(seed_of(Some("2"), Some("3")), 3);
}

#[test]
fn config_paths_resolve_against_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(fixture("vocab.txt"), dir.path().join("v.txt")).unwrap();
    std::fs::copy(fixture("scripted.json"), dir.path().join("s.json")).unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"vocab": "v.txt", "backend": "scripted:s.json"}"#).unwrap();
    let r = bin()
        .current_dir("/")
        .args(["--config", s(&cfg), "infer", s(&fixture("fig1.java"))])
        .output()
        .unwrap();
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn annotate_reports_unresolved_names() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("corpus.jsonl");
    let fetch = fixture("Fetch.java");
    let r = run(&["--out", s(&out), "annotate", "--library", "demo", s(&fetch)]);
    assert_eq!(r.status.code(), Some(0));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.contains("java.net.URL"));
    assert!(dir.path().join("corpus.jsonl.manifest.json").is_file());
    let strict = run(&["--strict", "--out", s(&out), "annotate", s(&fetch)]);
    assert_eq!(strict.status.code(), Some(1));
}

#[test]
fn full_pipeline_through_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let v = vocab();
    let ok = |args: &[&str]| {
        let r = run(args);
        assert!(r.status.success(), "{args:?}: {}", String::from_utf8_lossy(&r.stderr));
        r
    };
    ok(&["--vocab", &v, "--seed", "42", "--out", s(&d.join("p")), "gen-prompts", "--gzip", s(&fixture("corpus.jsonl"))]);
    let training = d.join("p/training.jsonl.gz");
    assert!(training.is_file());
    ok(&["--vocab", &v, "--out", s(&d.join("m.bin")), "train-scorer", s(&training)]);
    let backend = format!("ngram:{}", d.join("m.bin").display());
    ok(&[
        "--vocab", &v, "--backend", &backend, "--jobs", "1", "--out", s(&d.join("rec.jsonl")),
        "predict-corpus", s(&fixture("corpus.jsonl")),
    ]);
    let r = ok(&[
        "--vocab", &v, "eval", s(&d.join("rec.jsonl")), "--manifest", s(&d.join("p/split.json")), "--format", "json",
    ]);
    let report: serde_json::Value = serde_json::from_slice(&r.stdout).unwrap();
    let count = report["overall"]["count"].as_u64().unwrap();
    assert!(count >= 30, "{count} records");
    assert!(report["overall"]["accuracy"].as_f64().unwrap() > 0.8);
    let text = ok(&["--vocab", &v, "eval", s(&d.join("rec.jsonl")), "--manifest", s(&d.join("p/split.json"))]);
    assert!(String::from_utf8_lossy(&text.stdout).contains("Seen/unseen split"));
}
