//! End-to-end runs of the `cpa` command line, in process.

mod common;

use common::{cli_is_deterministic, run_all_subcommands};

fn cpa(args: &[&str]) -> i32 {
    cpa_enhancer::cli::run(std::iter::once("cpa").chain(args.iter().copied()))
}

#[test]
fn every_subcommand_is_bit_reproducible() {
    let compared = cli_is_deterministic([1, 1]).unwrap();
    assert!(compared >= 15, "only {compared} artifacts");
}

#[test]
fn artifacts_do_not_depend_on_thread_count() {
    cli_is_deterministic([1, 3]).unwrap();
}

#[test]
fn artifacts_have_expected_contents() {
    let dir = tempfile::tempdir().unwrap();
    run_all_subcommands(dir.path(), 1).unwrap();
    let read = |p: &str| std::fs::read_to_string(dir.path().join(p)).unwrap();
    let curve = read("curve.csv");
    let lines: Vec<&str> = curve.lines().collect();
    assert_eq!(lines[0], "iter,loss");
    assert_eq!(lines.len(), 3);
    let manifest = read("degraded/manifest.jsonl");
    assert_eq!(manifest.lines().count(), 3);
    let report: serde_json::Value = serde_json::from_str(&read("report.json")).unwrap();
    assert_eq!(report["levels"].as_array().unwrap().len(), 3);
    let sidecar: serde_json::Value = serde_json::from_str(&read("features/level1.json")).unwrap();
    assert_eq!(sidecar["shape"], serde_json::json!([1, 8, 16, 16]));
    let raw = std::fs::read(dir.path().join("features/level1.bin")).unwrap();
    assert_eq!(raw.len(), 8 * 16 * 16 * 8);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    assert_eq!(cpa(&["--help"]), 0);
    assert_eq!(cpa(&["no-such-command"]), 2);
    assert_eq!(cpa(&["enhance", &p("missing.png"), &p("out.png"), "--checkpoint", &p("none.ckpt")]), 2);
    assert_eq!(cpa(&["gradcheck", "--only", "relu", "--no-enhancer", "--tol", "1e-4"]), 0);
    assert_eq!(
        cpa(&["gradcheck", "--only", "conv2d", "--no-enhancer", "--inject-fault", "conv2d"]),
        1
    );
    assert_eq!(cpa(&["gradcheck", "--only", "no-such-op", "--no-enhancer"]), 2);
}

#[test]
fn dark_gamma_one_is_identity_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    assert_eq!(cpa(&["scenes", &p("s"), "--count", "1", "--size", "16"]), 0);
    let src = p("s/scene_000.png");
    assert_eq!(cpa(&["degrade", &src, &p("d.png"), "--kind", "dark", "--gamma", "1"]), 0);
    assert_eq!(std::fs::read(&src).unwrap(), std::fs::read(p("d.png")).unwrap());
    assert_eq!(cpa(&["degrade", &src, &p("x.png"), "--kind", "dark", "--sigma", "5"]), 2);
}

#[test]
fn zero_output_checkpoint_enhances_to_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    std::fs::write(p("c.toml"), common::TINY_CONFIG).unwrap();
    assert_eq!(cpa(&["scenes", &p("s"), "--count", "1", "--size", "16"]), 0);
    assert_eq!(cpa(&["init", &p("z.ckpt"), "--zero-output", "--config", &p("c.toml")]), 0);
    let src = p("s/scene_000.png");
    assert_eq!(cpa(&["enhance", &src, &p("e.png"), "--checkpoint", &p("z.ckpt"), "--config", &p("c.toml")]), 0);
    assert_eq!(std::fs::read(&src).unwrap(), std::fs::read(p("e.png")).unwrap());
}
