use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_kbsearch"));
    c.env_remove("DBAGENT_CHAT_URL")
        .env_remove("DBAGENT_EMBED_URL")
        .env_remove("DBAGENT_API_KEY")
        .env_remove("RUST_LOG");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn ok(o: Output) -> String {
    assert_eq!(
        code(&o),
        0,
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic corpus, test questions and scripts in a fresh directory.
fn fixture(articles: usize, questions: usize) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("data");
    ok(run(&[
        "synth",
        "--articles",
        &articles.to_string(),
        "--questions",
        &questions.to_string(),
        "--out-dir",
        s(&d),
    ]));
    (dir, d)
}

#[test]
fn synth_output_validates() {
    let (_t, d) = fixture(80, 10);
    for f in [
        "corpus.jsonl",
        "qa.jsonl",
        "policy.jsonl",
        "factory_qa.jsonl",
        "factory_script.jsonl",
    ] {
        assert!(d.join(f).exists(), "{f}");
    }
    let out = ok(run(&[
        "validate",
        "--corpus",
        s(&d.join("corpus.jsonl")),
        "--dataset",
        s(&d.join("qa.jsonl")),
        "--script",
        s(&d.join("policy.jsonl")),
    ]));
    assert_eq!(out.lines().filter(|l| l.starts_with("ok ")).count(), 3);
}

#[test]
fn agent_run_prints_transcript() {
    let (_t, d) = fixture(40, 5);
    let out = ok(run(&[
        "agent",
        "run",
        "--corpus",
        s(&d.join("corpus.jsonl")),
        "--script",
        s(&d.join("policy.jsonl")),
        "--question",
        "What is the elevation of this mountain?",
        "--image",
        "img://a00000",
    ]));
    assert!(out.contains("Question: What is the elevation of this mountain?"));
    assert!(out.contains("<text_search>") && out.contains("<evidence>"));
    assert!(out.contains("[terminated] Answer"));
}

#[test]
fn batch_is_deterministic_and_scores_perfectly() {
    let (t, d) = fixture(60, 12);
    let (c, q, pol) = (
        d.join("corpus.jsonl"),
        d.join("qa.jsonl"),
        d.join("policy.jsonl"),
    );
    let common = ["--corpus", s(&c), "--dataset", s(&q), "--script", s(&pol)];
    let a = t.path().join("a.jsonl");
    let b = t.path().join("b.jsonl");
    ok(bin()
        .args(["agent", "batch", "--threads", "1", "--out", s(&a)])
        .args(common)
        .output()
        .unwrap());
    ok(bin()
        .args(["agent", "batch", "--threads", "8", "--out", s(&b)])
        .args(common)
        .output()
        .unwrap());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let idx = t.path().join("idx");
    ok(bin()
        .args(["index", "build", "--out", s(&idx)])
        .args(common)
        .output()
        .unwrap());
    let c = t.path().join("c.jsonl");
    ok(bin()
        .args(["agent", "batch", "--index-dir", s(&idx), "--out", s(&c)])
        .args(common)
        .output()
        .unwrap());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    // An index built under another seed does not match the current embedder.
    let o = bin()
        .args([
            "agent",
            "batch",
            "--seed",
            "9",
            "--index-dir",
            s(&idx),
            "--out",
            s(&c),
        ])
        .args(common)
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);

    let rep = t.path().join("rep");
    let text = ok(bin()
        .args([
            "eval",
            "report",
            "--trajectories",
            s(&a),
            "--out-dir",
            s(&rep),
        ])
        .args(common)
        .output()
        .unwrap());
    assert!(text.contains("accuracy") && text.contains("100.0"));
    for f in ["report.txt", "report.csv", "report.json", "records.jsonl"] {
        assert!(rep.join(f).exists(), "{f}");
    }
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(rep.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["overall_accuracy"], 100.0);
    assert_eq!(json["retrieval_recall"], 100.0);
    ok(run(&["validate", "--trajectories", s(&a)]));
}

#[test]
fn factory_then_emit_skips_discards() {
    let (t, d) = fixture(60, 5);
    let outcomes = t.path().join("outcomes.jsonl");
    let (c, fs_) = (d.join("corpus.jsonl"), d.join("factory_script.jsonl"));
    let base = ["--corpus", s(&c), "--script", s(&fs_)];
    ok(bin()
        .args([
            "factory",
            "build",
            "--dataset",
            s(&d.join("factory_qa.jsonl")),
            "--out",
            s(&outcomes),
            "--balanced",
            "10",
            "--seed",
            "3",
        ])
        .args(base)
        .output()
        .unwrap());
    assert!(t.path().join("outcomes.summary.json").exists());
    let balanced = fs::read_to_string(t.path().join("outcomes.balanced.jsonl")).unwrap();
    assert_eq!(balanced.lines().count(), 30);
    let sft = t.path().join("sft.jsonl");
    ok(run(&[
        "dataset",
        "emit",
        "--outcomes",
        s(&outcomes),
        "--out",
        s(&sft),
    ]));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(t.path().join("sft.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["total"], 50);
    assert_eq!(manifest["skipped"]["DISCARDED"], 10);
    ok(run(&[
        "validate",
        "--outcomes",
        s(&outcomes),
        "--sft",
        s(&sft),
    ]));

    // Re-emission is byte-identical.
    let sft2 = t.path().join("sft2.jsonl");
    ok(run(&[
        "dataset",
        "emit",
        "--outcomes",
        s(&outcomes),
        "--out",
        s(&sft2),
    ]));
    assert_eq!(fs::read(&sft).unwrap(), fs::read(&sft2).unwrap());

    // Tampering with the output is caught.
    let mut text = fs::read_to_string(&sft).unwrap();
    text.push_str(
        &text
            .lines()
            .next()
            .unwrap()
            .replace("\"supervise\":false", "\"supervise\":true"),
    );
    text.push('\n');
    fs::write(&sft, text).unwrap();
    let o = run(&["validate", "--sft", s(&sft)]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("sft.jsonl:51:") && err.contains("output_sha256"),
        "{err}"
    );
}

#[test]
fn topk_grid_writes_nine_cells_and_summary() {
    let (t, d) = fixture(40, 6);
    let out = t.path().join("grid");
    let table = ok(run(&[
        "eval",
        "topk-grid",
        "--corpus",
        s(&d.join("corpus.jsonl")),
        "--dataset",
        s(&d.join("qa.jsonl")),
        "--script",
        s(&d.join("policy.jsonl")),
        "--text-k",
        "1,3,5",
        "--image-k",
        "1,2,3",
        "--out-dir",
        s(&out),
    ]));
    let cells = fs::read_dir(&out)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .starts_with("cell_")
        })
        .count();
    assert_eq!(cells, 9);
    for f in ["topk_grid.txt", "topk_grid.csv", "topk_grid.json"] {
        assert!(out.join(f).exists());
    }
    assert_eq!(table.lines().count(), 5);
}

#[test]
fn kb_scale_writes_series() {
    let (t, d) = fixture(60, 6);
    let out = t.path().join("kb");
    let (c, q, pol) = (
        d.join("corpus.jsonl"),
        d.join("qa.jsonl"),
        d.join("policy.jsonl"),
    );
    let args = [
        "eval",
        "kb-scale",
        "--corpus",
        s(&c),
        "--dataset",
        s(&q),
        "--script",
        s(&pol),
        "--sizes",
        "20,40,60",
        "--out-dir",
        s(&out),
    ];
    ok(run(&args));
    let csv = fs::read_to_string(out.join("kb_scale.csv")).unwrap();
    let sizes: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(sizes, ["20", "40", "60"]);
    let first = fs::read(out.join("kb_scale.json")).unwrap();
    ok(run(&args));
    assert_eq!(first, fs::read(out.join("kb_scale.json")).unwrap());
    let mut too_big = args.to_vec();
    too_big[9] = "500";
    assert_eq!(code(&run(&too_big)), 1);
}

#[test]
fn exit_codes() {
    let (t, d) = fixture(20, 2);
    let corpus = d.join("corpus.jsonl");
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["agent", "batch", "--out", "x.jsonl"])), 1);
    let o = run(&[
        "agent",
        "batch",
        "--corpus",
        "/nonexistent/c.jsonl",
        "--dataset",
        s(&d.join("qa.jsonl")),
        "--out",
        "x",
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/c.jsonl"));

    let bad_script = t.path().join("bad.jsonl");
    fs::write(
        &bad_script,
        "{\"match\":{\"turn_index\":0},\"output\":\"x\"}\nnot json\n",
    )
    .unwrap();
    let o = run(&[
        "agent",
        "run",
        "--corpus",
        s(&corpus),
        "--script",
        s(&bad_script),
        "--question",
        "q",
        "--image",
        "img://a00000",
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));

    let bad_corpus = t.path().join("badcorpus.jsonl");
    let mut lines = fs::read_to_string(&corpus).unwrap();
    lines.push_str("{\"article_id\": 3}\n");
    fs::write(&bad_corpus, lines).unwrap();
    let o = run(&["validate", "--corpus", s(&bad_corpus)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 21"));

    // Nothing listens on port 9 of localhost, so the chat backend fails.
    let o = bin()
        .args([
            "agent",
            "run",
            "--corpus",
            s(&corpus),
            "--question",
            "q",
            "--image",
            "img://a00000",
        ])
        .env("DBAGENT_CHAT_URL", "http://127.0.0.1:9")
        .output()
        .unwrap();
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));

    assert_eq!(
        code(&run(&[
            "agent",
            "run",
            "--corpus",
            s(&corpus),
            "--question",
            "q",
            "--image",
            "i",
            "--budget",
            "0"
        ])),
        1
    );
}

#[test]
fn config_precedence_and_redaction() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        "seed = 4\n[backend]\nchat_url = \"http://from-file\"\n[rollout]\nbudget = 6\nk_text = 2\n",
    )
    .unwrap();
    let dump = |extra: &[&str], env: &[(&str, &str)]| {
        let mut c = bin();
        c.args(["--config", s(&cfg), "--dump-config"])
            .args(extra)
            .args(["validate"]);
        for (k, v) in env {
            c.env(k, v);
        }
        let o = c.output().unwrap();
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    };
    let base = dump(&[], &[]);
    assert!(
        base.contains("seed = 4")
            && base.contains("budget = 6")
            && base.contains("http://from-file")
    );
    let env = dump(
        &[],
        &[
            ("DBAGENT_CHAT_URL", "http://from-env"),
            ("DBAGENT_API_KEY", "sk-secret-123"),
        ],
    );
    assert!(
        env.contains("http://from-env")
            && !env.contains("sk-secret-123")
            && env.contains("<redacted>")
    );
    let flag = dump(
        &["--chat-url", "http://from-flag", "--k-text", "5"],
        &[("DBAGENT_CHAT_URL", "http://from-env")],
    );
    assert!(flag.contains("http://from-flag") && flag.contains("k_text = 5"));

    fs::write(&cfg, "[rollout]\nbugdet = 6\n").unwrap();
    assert_eq!(
        code(
            &bin()
                .args(["--config", s(&cfg), "validate"])
                .output()
                .unwrap()
        ),
        1
    );
}

#[test]
fn secrets_stay_out_of_logs() {
    let (_t, d) = fixture(20, 2);
    let o = bin()
        .args([
            "-vv",
            "agent",
            "run",
            "--corpus",
            s(&d.join("corpus.jsonl")),
            "--question",
            "q",
            "--image",
            "img://a00000",
        ])
        .env("DBAGENT_CHAT_URL", "http://127.0.0.1:9")
        .env("DBAGENT_API_KEY", "sk-secret-456")
        .output()
        .unwrap();
    let all = format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(all.contains("effective configuration"));
    assert!(!all.contains("sk-secret-456"));
}
