use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn graphrecon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graphrecon"))
        .args(args)
        .env_remove("OPENAI_API_KEY")
        .env_remove("OPENAI_BASE_URL")
        .output()
        .expect("spawn graphrecon")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn check_golden(name: &str, actual: &str) {
    let path = data(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
    }
    let expected = std::fs::read_to_string(&path).unwrap();
    assert_eq!(
        actual, expected,
        "golden mismatch for {name}; rerun with UPDATE_GOLDEN=1 to accept"
    );
}

fn generate(dir: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec![
        "generate",
        "--out-dir",
        dir.to_str().unwrap(),
        "--nodes",
        "15",
        "--steps",
        "60",
    ];
    args.extend_from_slice(extra);
    let o = graphrecon(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join("config.json")
}

#[test]
fn render_prompts_matches_golden_file() {
    let cfg = data("p3_config.json");
    let o = graphrecon(&[
        "render-prompts",
        "-c",
        cfg.to_str().unwrap(),
        "--identity-filter",
        "--steps",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    check_golden("p3_prompts.txt", &stdout(&o));
    assert!(stdout(&o).contains("Time 0, Entity index: 1. Previous: 6.0, Neighbors: [3.0, 11.0]."));
}

#[test]
fn run_with_mock_backend_writes_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = generate(dir.path(), &[]);
    let o = graphrecon(&["run", "-c", cfg.to_str().unwrap(), "--backend", "mock", "--transcript"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("llm-mock"));
    let run = dir.path().join("run");
    for f in [
        "config.json",
        "mask.json",
        "filter_r0.json",
        "report.json",
        "report.csv",
        "report.md",
        "transcript.jsonl",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert!(run.join("checkpoints/llm-mock_r0.json").exists());

    let again = graphrecon(&["report", run.to_str().unwrap(), "--format", "csv"]);
    assert!(again.status.success(), "{}", stderr(&again));
    assert_eq!(stdout(&again), std::fs::read_to_string(run.join("report.csv")).unwrap());
}

#[test]
fn resume_reproduces_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = generate(dir.path(), &[]);
    let cfg = cfg.to_str().unwrap();
    let first = graphrecon(&["run", "-c", cfg, "--format", "json"]);
    assert!(first.status.success(), "{}", stderr(&first));
    let resumed = graphrecon(&["run", "-c", cfg, "--format", "json", "--resume"]);
    assert!(resumed.status.success(), "{}", stderr(&resumed));
    assert_eq!(stdout(&first), stdout(&resumed));
}

#[test]
fn remote_backend_without_credentials_fails_before_connecting() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let endpoint = format!("http://{}/v1", listener.local_addr().unwrap());
    let cfg = data("p3_config.json");
    let o = graphrecon(&[
        "run",
        "-c",
        cfg.to_str().unwrap(),
        "--backend",
        "remote",
        "--endpoint",
        &endpoint,
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("OPENAI_API_KEY"), "{}", stderr(&o));
    assert!(listener.accept().is_err(), "a connection was attempted");
}

#[test]
fn usage_errors_exit_nonzero() {
    let cfg = data("p3_config.json");
    let cfg = cfg.to_str().unwrap();
    let unknown_flag = graphrecon(&["run", "-c", cfg, "--no-such-flag"]);
    assert_eq!(unknown_flag.status.code(), Some(2));

    let bad_ratio = graphrecon(&[
        "baseline",
        "--edges",
        "x.csv",
        "--signal",
        "y.csv",
        "--t-split",
        "2",
        "--ratio",
        "1.5",
    ]);
    assert_eq!(bad_ratio.status.code(), Some(2), "{}", stderr(&bad_ratio));

    let missing_graph = graphrecon(&["baseline", "--signal", cfg, "--t-split", "2"]);
    assert_eq!(missing_graph.status.code(), Some(2), "{}", stderr(&missing_graph));

    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.json");
    std::fs::write(
        &bogus,
        r#"{"graph": {"kind": "edge-list", "path": "e"}, "signal": {"path": "s"}, "t_split": 1, "tpyo": 3}"#,
    )
    .unwrap();
    let o = graphrecon(&["baseline", "-c", bogus.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("tpyo"));
}

#[test]
fn exported_filter_is_reused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = generate(dir.path(), &[]);
    let cfg = cfg.to_str().unwrap();
    let filter = dir.path().join("filter.json");
    let o = graphrecon(&["train-filter", "-c", cfg, "--out", filter.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let trained = graphrecon(&["run", "-c", cfg, "--format", "csv"]);
    let reused = graphrecon(&[
        "run",
        "-c",
        cfg,
        "--format",
        "csv",
        "--filter",
        filter.to_str().unwrap(),
    ]);
    assert!(reused.status.success(), "{}", stderr(&reused));
    assert_eq!(stdout(&trained), stdout(&reused));

    let other = tempfile::tempdir().unwrap();
    let other_cfg = generate(other.path(), &["--seed", "5"]);
    let mismatch = graphrecon(&[
        "run",
        "-c",
        other_cfg.to_str().unwrap(),
        "--filter",
        filter.to_str().unwrap(),
    ]);
    assert!(!mismatch.status.success());
}

#[test]
fn baseline_subcommand_skips_reconstruction() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = generate(dir.path(), &[]);
    let o = graphrecon(&["baseline", "-c", cfg.to_str().unwrap(), "--format", "csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(!out.contains("llm"));
    for b in ["last-value", "neighbor-mean", "glms", "gnlms"] {
        assert!(out.contains(b), "missing {b}");
    }
}
