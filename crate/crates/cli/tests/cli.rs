use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ctxbias(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxbias"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ctxbias(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_run(root: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let data = root.join("data");
    let run = root.join("run");
    ok(&[
        "generate-data",
        "--out",
        s(&data),
        "--train-utterances",
        "12",
        "--dev-utterances",
        "3",
        "--test-utterances",
        "4",
        "--feature-dim",
        "4",
    ]);
    let cfg = root.join("exp.txt");
    fs::write(&cfg, "dim = 8\nff_dim = 16\nsteps = 3\nbatch_size = 4\n").unwrap();
    ok(&[
        "train",
        "--data",
        s(&data),
        "--run",
        s(&run),
        "--config",
        s(&cfg),
        "--steps",
        "4",
        "--k-beam",
        "2",
        "--dev-every",
        "2",
    ]);
    (data, run)
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = tiny_run(dir.path());
    for f in ["model.ckpt", "model.json", "config.txt", "vocab.txt", "losses.csv", "dev.csv"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let config = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(config.contains("steps = 4"), "flag should override the file");
    assert!(config.contains("dim = 8"));
    let losses = fs::read_to_string(run.join("losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 5);

    let hyp = ok(&["decode", "--data", s(&data), "--run", s(&run), "--max-len", "6"]);
    assert_eq!(hyp.lines().count(), 4);
    assert!(hyp.lines().all(|l| l.starts_with("test-")));

    let out = dir.path().join("eval");
    let report = ok(&[
        "evaluate", "--data", s(&data), "--run", s(&run), "--mode", "baseline", "--list", "none", "--out", s(&out),
        "--max-len", "6",
    ]);
    assert!(report.contains("\"b_wer\""));
    assert!(out.join("report.json").exists());
    assert_eq!(fs::read_to_string(out.join("records.jsonl")).unwrap().lines().count(), 4);

    let csv = dir.path().join("alpha.csv");
    ok(&[
        "ablate", "--data", s(&data), "--run", s(&run), "--alphas", "0,1", "--out", s(&csv), "--max-len", "6",
    ]);
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("alpha_bonus,"));
}

#[test]
fn bias_list_file_and_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = tiny_run(dir.path());
    let list = dir.path().join("list.txt");
    fs::write(&list, "w1 w2\n\nw3 w4 w5\n").unwrap();
    ok(&["decode", "--data", s(&data), "--run", s(&run), "--list", s(&list), "--max-len", "4"]);

    fs::write(&list, "w1 unknownword\n").unwrap();
    let out = ctxbias(&["decode", "--data", s(&data), "--run", s(&run), "--list", s(&list)]);
    assert!(!out.status.success());

    let out = ctxbias(&["decode", "--data", s(&data), "--run", s(&run), "--mode", "greedy"]);
    assert!(!out.status.success());

    let out = ctxbias(&["decode", "--data", s(&data), "--run", s(&run), "--split", "valid"]);
    assert!(!out.status.success());

    let out = ctxbias(&["decode", "--data", s(&data), "--run", s(&run), "--k-beam", "0"]);
    assert!(!out.status.success());

    let out = ctxbias(&["train", "--data", s(&data), "--run", s(&dir.path().join("r2")), "--lambda-ctc", "-1"]);
    assert!(!out.status.success());
}

#[test]
fn generate_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &Path| {
        vec![
            "generate-data".to_string(),
            "--out".into(),
            s(out).to_string(),
            "--train-utterances".into(),
            "5".into(),
            "--seed".into(),
            "3".into(),
        ]
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for p in [&a, &b] {
        let v = args(p);
        ok(&v.iter().map(String::as_str).collect::<Vec<_>>());
    }
    for f in ["train.jsonl", "test.jsonl", "entities.txt", "corpus.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}
