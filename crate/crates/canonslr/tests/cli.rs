//! End-to-end tests of the command line binary: exit codes, artifact
//! layout, idempotence, and the ablation table contract.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_canonslr")
}

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(binary())
        .args(args)
        .env("CANONSLR_OUT", out)
        .output()
        .expect("spawn canonslr")
}

fn assert_code(output: &Output, expected: i32, context: &str) {
    let code = output.status.code().expect("exit code");
    assert_eq!(
        code,
        expected,
        "{context}: expected exit {expected}, got {code}\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

/// Small dataset flags shared by the pipeline tests.
const TINY_DATA: &[&str] = &[
    "--set",
    "vocab_size=4",
    "--set",
    "train_sources=3",
    "--set",
    "dev_sources=1",
    "--set",
    "test_sources=1",
    "--set",
    "min_glosses=1",
    "--set",
    "max_glosses=2",
    "--set",
    "height=16",
    "--set",
    "width=16",
];

/// Small model flags shared by the pipeline tests.
const TINY_TRAIN: &[&str] = &[
    "--set",
    "epochs=1",
    "--set",
    "base_width=2",
    "--set",
    "lstm_hidden=3",
    "--set",
    "tme_top_k=2",
    "--set",
    "beam_width=3",
    "--set",
    "batch_size=4",
];

fn gen_tiny(out: &Path) {
    let mut args = vec!["gen-data"];
    args.extend_from_slice(TINY_DATA);
    assert_code(&run(&args, out), 0, "gen-data");
}

fn train_tiny_teacher(out: &Path) {
    let mut args = vec!["train-teacher"];
    args.extend_from_slice(TINY_TRAIN);
    assert_code(&run(&args, out), 0, "train-teacher");
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();

    let bad_flag = run(&["gen-data", "--no-such-flag"], out);
    assert_code(&bad_flag, 2, "unknown flag");

    let bad_sub = run(&["frobnicate"], out);
    assert_code(&bad_sub, 2, "unknown subcommand");

    let missing_config = run(
        &["gen-data", "--config", "/nonexistent/config.txt"],
        out,
    );
    assert_code(&missing_config, 2, "missing config file");
    let stderr = String::from_utf8_lossy(&missing_config.stderr);
    assert!(stderr.contains("cannot read config file"), "stderr: {stderr}");

    let unknown_key = run(&["gen-data", "--set", "no_such_key=1"], out);
    assert_code(&unknown_key, 2, "unknown config key");

    let bad_value = run(&["train-teacher", "--set", "epochs=banana"], out);
    assert_code(&bad_value, 2, "unparseable value");

    let invalid_cfg = run(&["train-teacher", "--set", "learning_rate=0"], out);
    assert_code(&invalid_cfg, 2, "invalid config value");
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();

    // No dataset generated yet: training is a runtime failure, not usage.
    let no_data = run(&["train-teacher"], out);
    assert_code(&no_data, 1, "train without data");

    gen_tiny(out);
    // Dataset exists but no checkpoint: evaluate fails at runtime.
    let no_ckpt = run(&["evaluate"], out);
    assert_code(&no_ckpt, 1, "evaluate without checkpoint");

    // No reports: plot fails at runtime.
    let no_reports = run(&["plot"], out);
    assert_code(&no_reports, 1, "plot without reports");
}

#[test]
fn desk_config_generates_700_entries() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    // Default desk dataset at reduced resolution to keep the test quick.
    let output = run(
        &["gen-data", "--set", "height=16", "--set", "width=16"],
        out,
    );
    assert_code(&output, 0, "gen-data desk");
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("generated 700 entries"), "stdout: {stdout}");

    let manifest = std::fs::read_to_string(out.join("data/manifest.txt")).unwrap();
    let entries = manifest
        .lines()
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .count();
    assert_eq!(entries, 700);
}

#[test]
fn gen_data_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    gen_tiny(out);
    let manifest_path = out.join("data/manifest.txt");
    let first = std::fs::read(&manifest_path).unwrap();
    let frame_file = first_frame_file(&manifest_path);
    let first_frames = std::fs::read(&frame_file).unwrap();

    gen_tiny(out);
    assert_eq!(std::fs::read(&manifest_path).unwrap(), first);
    assert_eq!(std::fs::read(&frame_file).unwrap(), first_frames);
}

fn first_frame_file(manifest_path: &Path) -> PathBuf {
    let text = std::fs::read_to_string(manifest_path).unwrap();
    let line = text
        .lines()
        .find(|l| !l.is_empty() && !l.starts_with('#'))
        .expect("at least one entry");
    let rel = line.split('\t').last().unwrap();
    manifest_path.parent().unwrap().join(rel)
}

#[test]
fn pipeline_produces_reports_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    gen_tiny(out);
    train_tiny_teacher(out);
    assert!(out.join("checkpoints/teacher.ckpt").is_file());

    let mut student = vec!["train-student"];
    student.extend_from_slice(TINY_TRAIN);
    assert_code(&run(&student, out), 0, "train-student");
    assert!(out.join("checkpoints/student.ckpt").is_file());

    let mut eval = vec!["evaluate", "--split", "test"];
    eval.extend_from_slice(TINY_TRAIN);
    let output = run(&eval, out);
    assert_code(&output, 0, "evaluate");
    let report = out.join("reports/wer_student_test.tsv");
    let text = std::fs::read_to_string(&report).unwrap();
    // Header + 7 views + 4 category averages + overall row.
    assert_eq!(text.lines().count(), 13, "report:\n{text}");
    assert!(text.lines().next().unwrap().starts_with("view\twer"));
    assert!(text.contains("\nAll\t"));

    // An ablation over one seed at tiny scale: four cells plus header.
    let mut ablate = vec!["ablate", "--seeds", "0"];
    ablate.extend_from_slice(TINY_TRAIN);
    let output = run(&ablate, out);
    assert_code(&output, 0, "ablate");
    let table_path = out.join("reports/ablation.tsv");
    let table = std::fs::read_to_string(&table_path).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 5, "table:\n{table}");
    assert!(lines[1].starts_with("baseline\t"));
    assert!(lines[2].starts_with("+SSD\t"));
    assert!(lines[3].starts_with("+TME\t"));
    assert!(lines[4].starts_with("+SSD+TME"));

    // The baseline row's deltas against itself are all zero, and every
    // other delta column equals that row's value minus the baseline value.
    let baseline: Vec<&str> = lines[1].split('\t').collect();
    for delta in baseline[2..].iter().step_by(2) {
        assert_eq!(*delta, "+0.0000", "baseline deltas: {:?}", baseline);
    }
    for line in &lines[2..] {
        let cells: Vec<&str> = line.split('\t').collect();
        assert_eq!(cells.len(), baseline.len(), "ragged row: {line}");
        for (i, pair) in cells[1..].chunks(2).enumerate() {
            let value: f64 = pair[0].parse().unwrap();
            let delta: f64 = pair[1].parse().unwrap();
            let base: f64 = baseline[1 + 2 * i].parse().unwrap();
            assert!(
                (delta - (value - base)).abs() < 5e-4,
                "delta mismatch on {line}: {value} - {base} vs {delta}"
            );
        }
    }

    let output = run(&["plot"], out);
    assert_code(&output, 0, "plot");
    let svg = std::fs::read_to_string(out.join("plots/ablation.svg")).unwrap();
    assert!(svg.starts_with("<svg"), "svg head: {}", &svg[..40.min(svg.len())]);
}

#[test]
fn training_is_idempotent_across_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    gen_tiny(out);
    train_tiny_teacher(out);
    let ckpt = out.join("checkpoints/teacher.ckpt");
    let log = out.join("checkpoints/teacher_train.log");
    let first_ckpt = std::fs::read(&ckpt).unwrap();
    let first_log = std::fs::read(&log).unwrap();

    train_tiny_teacher(out);
    assert_eq!(std::fs::read(&ckpt).unwrap(), first_ckpt, "checkpoint changed");
    assert_eq!(std::fs::read(&log).unwrap(), first_log, "log changed");
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();

    let config = out.join("gen.cfg");
    std::fs::write(
        &config,
        "vocab_size=4\ntrain_sources=3\ndev_sources=1\ntest_sources=1\n\
         min_glosses=1\nmax_glosses=2\nheight=16\nwidth=16\nseed=5\n",
    )
    .unwrap();

    let cfg_arg = config.to_str().unwrap();
    let run_a = run(&["gen-data", "--config", cfg_arg], out);
    assert_code(&run_a, 0, "gen from config");
    let seed5 = std::fs::read_to_string(out.join("data/manifest.txt")).unwrap();
    assert!(seed5.contains("seed=5"));

    // --seed wins over the file value.
    let run_b = run(&["gen-data", "--config", cfg_arg, "--seed", "6"], out);
    assert_code(&run_b, 0, "gen with seed override");
    let seed6 = std::fs::read_to_string(out.join("data/manifest.txt")).unwrap();
    assert!(seed6.contains("seed=6"));
    assert_ne!(seed5, seed6);

    // --set overrides the file; --seed overrides --set.
    let run_c = run(
        &[
            "gen-data",
            "--config",
            cfg_arg,
            "--set",
            "seed=7",
            "--seed",
            "8",
        ],
        out,
    );
    assert_code(&run_c, 0, "gen with set and seed");
    let seed8 = std::fs::read_to_string(out.join("data/manifest.txt")).unwrap();
    assert!(seed8.contains("seed=8"));
}
