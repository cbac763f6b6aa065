use std::path::Path;
use std::process::{Command, Output};

fn refcat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_refcat"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&refcat(&[])), 1);
    assert_eq!(code(&refcat(&["gen-data"])), 1, "missing --out");
    assert_eq!(code(&refcat(&["frobnicate", "--out", p(dir.path())])), 1);
    assert_eq!(
        code(&refcat(&[
            "gen-data",
            "--subjects",
            "0",
            "--out",
            p(dir.path())
        ])),
        1
    );
    assert_eq!(
        code(&refcat(&[
            "gradcheck",
            "--set",
            "gradcheck.nope=1",
            "--out",
            p(dir.path())
        ])),
        1
    );
    assert_eq!(
        code(&refcat(&[
            "gradcheck",
            "--workers",
            "0",
            "--out",
            p(dir.path())
        ])),
        1
    );
    assert_eq!(
        code(&refcat(&[
            "ablate",
            "--data",
            ".",
            "--axis",
            "depth",
            "--out",
            p(dir.path())
        ])),
        1
    );
}

#[test]
fn help_exits_0() {
    assert_eq!(code(&refcat(&["--help"])), 0);
    assert_eq!(code(&refcat(&["train", "--help"])), 0);
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = refcat(&[
        "train",
        "--data",
        p(&dir.path().join("absent")),
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn output_may_not_overwrite_input() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(
        code(&refcat(&[
            "gen-data",
            "--subjects",
            "2",
            "--pairs",
            "2",
            "--out",
            p(&data)
        ])),
        0
    );
    let out = refcat(&[
        "eval",
        "--data",
        p(&data),
        "--checkpoint",
        p(&data),
        "--out",
        p(&data),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn gradcheck_passes_and_snapshots_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = refcat(&["gradcheck", "--seed", "4", "--out", p(dir.path())]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    let snapshot = std::fs::read_to_string(dir.path().join("config.toml")).unwrap();
    assert!(snapshot.contains("[gradcheck]"));
}

#[test]
fn precedence_file_then_flags_then_set() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        "[corpus]\nsubjects = 5\npairs_per_subject = 3\nseed = 1\n",
    )
    .unwrap();
    let out = dir.path().join("o");
    let run = refcat(&[
        "gen-data",
        "--config",
        p(&cfg),
        "--subjects",
        "2",
        "--seed",
        "8",
        "--set",
        "corpus.pairs_per_subject=1",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let snap: toml::Value =
        toml::from_str(&std::fs::read_to_string(out.join("config.toml")).unwrap()).unwrap();
    assert_eq!(snap["corpus"]["subjects"].as_integer(), Some(2));
    assert_eq!(snap["corpus"]["pairs_per_subject"].as_integer(), Some(1));
    assert_eq!(snap["corpus"]["seed"].as_integer(), Some(8));

    // The snapshot reproduces the run.
    let again = dir.path().join("again");
    let cfg2 = out.join("config.toml");
    assert_eq!(
        code(&refcat(&[
            "gen-data",
            "--config",
            p(&cfg2),
            "--out",
            p(&again)
        ])),
        0
    );
    assert_eq!(
        std::fs::read(out.join("manifest.jsonl")).unwrap(),
        std::fs::read(again.join("manifest.jsonl")).unwrap()
    );
}
