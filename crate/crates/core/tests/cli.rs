//! CLI contract: subcommands, exit codes (0 success, 1 usage, 2 runtime),
//! and the printed stats breakdown.

use std::process::Command;

fn magdi(args: &[&str], dir: &std::path::Path) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_magdi-lab"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn magdi-lab");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let (code, stdout, _) = magdi(&["--help"], dir.path());
    assert_eq!(code, 0);
    assert!(stdout.contains("gen-corpus"));
    for sub in ["stats", "filter", "train", "eval", "compare", "efficiency"] {
        assert!(stdout.contains(sub), "missing subcommand {sub}");
        let (code, _, _) = magdi(&[sub, "--help"], dir.path());
        assert_eq!(code, 0, "{sub} --help");
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, stderr) = magdi(&["stats", "--input", "x.jsonl"], dir.path());
    assert_eq!(code, 1);
    assert!(!stderr.is_empty());
    let (code, _, _) = magdi(&["no-such-command"], dir.path());
    assert_eq!(code, 1);
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, stderr) = magdi(&["stats", "--in", "missing.jsonl"], dir.path());
    assert_eq!(code, 2);
    assert!(stderr.contains("error"));
    let (code, _, _) = magdi(
        &["gen-corpus", "--task", "sudoku", "--out", "c.jsonl"],
        dir.path(),
    );
    assert_eq!(code, 2);
}

#[test]
fn gen_stats_filter_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (code, stdout, _) = magdi(
        &[
            "gen-corpus", "--task", "listmax", "--n", "30", "--seed", "3", "--out",
            "corpus.jsonl", "--test-n", "5", "--test-out", "test.jsonl",
        ],
        dir.path(),
    );
    assert_eq!(code, 0, "{stdout}");
    assert!(dir.path().join("corpus.jsonl").exists());
    assert!(dir.path().join("test.jsonl").exists());

    let (code, stdout, _) = magdi(&["stats", "--in", "corpus.jsonl"], dir.path());
    assert_eq!(code, 0);
    assert!(stdout.contains("graphs: 30"), "{stdout}");
    assert!(stdout.contains("nodes by round"), "{stdout}");

    let (code, stdout, _) = magdi(
        &["filter", "--in", "corpus.jsonl", "--drop", "g2,g3", "--out", "flat.jsonl"],
        dir.path(),
    );
    assert_eq!(code, 0);
    assert!(stdout.contains("kept"));
    let (code, _, _) = magdi(&["stats", "--in", "flat.jsonl"], dir.path());
    assert_eq!(code, 0);
}
