//! End-to-end tests of the `leap` binary: every subcommand runs against a
//! miniature experiment small enough for seconds-scale turnaround, and the
//! documented exit-code and error contracts are pinned.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use leap_core::experiment::ExperimentConfig;

fn leap() -> Command {
    Command::new(env!("CARGO_BIN_EXE_leap"))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawning the leap binary")
}

fn assert_ok(out: &Output, what: &str) -> String {
    assert!(
        out.status.success(),
        "{what} failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// A miniature experiment: tiny corpus, 4-layer models, one epoch each.
fn quick_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk_default(seed);
    cfg.corpus.n_sentences = 400;
    cfg.corpus.n_pairs = 300;
    cfg.corpus.vocab_size = 64;
    cfg.corpus.topics = 4;
    cfg.corpus.min_len = 4;
    cfg.corpus.max_len = 10;
    for enc in [&mut cfg.teacher, &mut cfg.student] {
        enc.vocab_size = 64;
        enc.max_seq_len = 10;
        enc.num_layers = 4;
        enc.num_heads = 2;
    }
    cfg.teacher.hidden_dim = 24;
    cfg.teacher.ff_dim = 32;
    cfg.student.hidden_dim = 16;
    cfg.student.ff_dim = 24;
    cfg.teacher_train.epochs = 1;
    cfg.teacher_train.batch_size = 8;
    cfg.teacher_train.early_stop_spearman = None;
    cfg.policy.theta = 0.9;
    cfg.policy.l_min = 2;
    cfg.distill.epochs = 2;
    cfg.distill.batch_size = 8;
    cfg.distill.max_sentences = Some(48);
    cfg.distill.weights = leap_core::losses::LeapLossWeights::default_for(4);
    cfg.distill.eval_policy = cfg.policy;
    cfg.theta_grid = vec![0.90, 0.95, 0.99];
    cfg.nn_k = 3;
    cfg.max_eval_sentences = 60;
    cfg.bench_samples = 2;
    cfg.bench_batch_sizes = vec![2];
    cfg.bench.warmup_iters = 2;
    cfg.bench.measure_iters = 4;
    cfg.overhead_iters = 2;
    cfg.overhead_samples = 4;
    cfg
}

fn write_config(cfg: &ExperimentConfig, path: &Path) {
    fs::write(path, toml::to_string_pretty(cfg).expect("config to TOML")).unwrap();
}

#[test]
fn help_lists_every_subcommand() {
    let out = run(leap().arg("--help"));
    let text = assert_ok(&out, "--help");
    for name in [
        "gen-data",
        "train-teacher",
        "distill",
        "evaluate",
        "diagnose",
        "pareto",
        "ablate",
        "beta-sweep",
        "bench",
        "reproduce",
    ] {
        assert!(text.contains(name), "--help does not mention {name}:\n{text}");
    }
}

#[test]
fn pipeline_runs_end_to_end_with_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("experiment.toml");
    write_config(&quick_config(17), &cfg_path);
    let out_dir = dir.path().join("artifacts");
    let base_args = |cmd: &str| {
        let mut c = leap();
        c.arg(cmd).arg("--config").arg(&cfg_path).arg("--out").arg(&out_dir);
        c
    };

    let text = assert_ok(&run(&mut base_args("gen-data")), "gen-data");
    assert!(text.contains("400 sentences"), "unexpected gen-data output: {text}");
    for f in ["corpus.jsonl", "pairs.csv", "corpus_audit.json", "config_used.toml"] {
        assert!(out_dir.join(f).exists(), "gen-data did not write {f}");
    }

    let text = assert_ok(&run(&mut base_args("train-teacher")), "train-teacher");
    assert!(text.contains("val Spearman"), "unexpected train-teacher output: {text}");
    assert!(out_dir.join("teacher.json").exists());

    assert_ok(&run(base_args("distill").arg("--leap")), "distill --leap");
    assert!(out_dir.join("student_leap.json").exists());
    assert!(out_dir.join("leap_epochs.csv").exists());

    assert_ok(&run(base_args("distill").arg("--baseline")), "distill --baseline");
    assert!(out_dir.join("student_baseline.json").exists());

    assert_ok(
        &run(base_args("distill")
            .args(["--mask", "inter,contrast,exit", "--label", "partial", "--epochs", "1"])),
        "distill --mask",
    );
    assert!(out_dir.join("student_partial.json").exists());

    let student = out_dir.join("student_leap.json");
    let text = assert_ok(
        &run(base_args("evaluate").arg("--student").arg(&student)),
        "evaluate",
    );
    assert!(text.contains("Spearman full"), "unexpected evaluate output: {text}");
    assert!(out_dir.join("eval_leap.json").exists());

    let text = assert_ok(
        &run(base_args("pareto")
            .arg("--student")
            .arg(&student)
            .args(["--grid", "0.90,0.95,0.99", "--ref-layer", "3"])),
        "pareto",
    );
    assert_eq!(text.lines().filter(|l| l.starts_with("theta")).count(), 3);
    let pareto = fs::read_to_string(out_dir.join("pareto.csv")).unwrap();
    let expected: Vec<f64> = pareto
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(expected.len(), 3);
    assert!(
        expected.windows(2).all(|w| w[1] >= w[0] - 1e-12),
        "expected layers not nondecreasing over the grid: {expected:?}"
    );

    let text = assert_ok(
        &run(base_args("bench").arg("--student").arg(&student).args(["--batch-sizes", "2"])),
        "bench",
    );
    assert!(text.contains("speedup"), "unexpected bench output: {text}");
    assert!(out_dir.join("bench.csv").exists());

    let text = assert_ok(&run(base_args("ablate").args(["--epochs", "1"])), "ablate");
    assert_eq!(text.lines().count(), 4, "one line per loss configuration:\n{text}");
    let ablation = fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    assert_eq!(ablation.lines().count(), 5);
    assert!(ablation.starts_with("label,exit_rate,"));

    let text = assert_ok(
        &run(base_args("beta-sweep").args(["--betas", "0.1,0.4", "--epochs", "1"])),
        "beta-sweep",
    );
    assert_eq!(text.lines().count(), 2, "one line per weight:\n{text}");
    assert_eq!(fs::read_to_string(out_dir.join("beta_sweep.csv")).unwrap().lines().count(), 3);
}

#[test]
fn diagnose_exit_code_tracks_compatibility() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("experiment.toml");
    let mut cfg = quick_config(17);
    write_config(&cfg, &cfg_path);
    let out_dir = dir.path().join("artifacts");
    let base = |cmd: &str| {
        let mut c = leap();
        c.arg(cmd).arg("--config").arg(&cfg_path).arg("--out").arg(&out_dir);
        c
    };

    assert_ok(&run(&mut base("gen-data")), "gen-data");
    assert_ok(&run(&mut base("train-teacher")), "train-teacher");
    assert_ok(&run(base("distill").arg("--leap")), "distill");
    let student = out_dir.join("student_leap.json");

    // Lenient floors: the checkpoint exits under this policy, so the
    // verdicts are compatible and the command succeeds.
    let out = run(base("diagnose").arg("--student").arg(&student).args([
        "--target-layer",
        "3",
        "--min-sim",
        "0.0",
        "--min-nn10",
        "0.0",
        "--min-exit-rate",
        "0.0",
    ]));
    assert_ok(&out, "diagnose (lenient)");
    assert!(out_dir.join("diagnostic_leap.json").exists());
    assert!(out_dir.join("diagnostic_leap.txt").exists());

    // A policy that never exits early must be flagged incompatible and
    // reflected in the exit code.
    let none_cfg_path = dir.path().join("no_exit.toml");
    cfg.policy.strategy = leap_core::exit::ExitStrategy::None;
    cfg.distill.eval_policy = cfg.policy;
    write_config(&cfg, &none_cfg_path);
    let out = run(leap()
        .arg("diagnose")
        .arg("--config")
        .arg(&none_cfg_path)
        .arg("--out")
        .arg(&out_dir)
        .arg("--student")
        .arg(&student)
        .args(["--target-layer", "3"]));
    assert!(
        !out.status.success(),
        "diagnose must fail when nothing exits:\n{}",
        String::from_utf8_lossy(&out.stdout)
    );
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("INCOMPATIBLE"), "report should flag the policy:\n{text}");
}

#[test]
fn missing_config_key_is_named_in_the_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("broken.toml");
    let mut text = toml::to_string_pretty(&quick_config(17)).unwrap();
    text = text.replace("max_eval_sentences", "max_eval_cap");
    fs::write(&cfg_path, text).unwrap();

    let out = run(leap()
        .arg("gen-data")
        .arg("--config")
        .arg(&cfg_path)
        .arg("--out")
        .arg(dir.path().join("artifacts")));
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("max_eval_sentences"),
        "error should name the missing key:\n{err}"
    );
}

#[test]
fn stale_checkpoint_version_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("experiment.toml");
    write_config(&quick_config(17), &cfg_path);
    let out_dir = dir.path().join("artifacts");
    fs::create_dir_all(&out_dir).unwrap();

    let stale = out_dir.join("student_old.json");
    let mut bytes = b"LEAPCK00".to_vec();
    bytes.extend_from_slice(&[0u8; 12]);
    fs::write(&stale, bytes).unwrap();

    let out = run(leap()
        .arg("evaluate")
        .arg("--config")
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out_dir)
        .arg("--student")
        .arg(&stale));
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("version") && err.contains("00"),
        "error should call out the checkpoint version:\n{err}"
    );
}

#[test]
fn output_dir_comes_from_env_unless_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("experiment.toml");
    write_config(&quick_config(17), &cfg_path);
    let env_dir = dir.path().join("from_env");
    let flag_dir = dir.path().join("from_flag");

    let out = run(leap()
        .arg("gen-data")
        .arg("--config")
        .arg(&cfg_path)
        .env("LEAP_OUT_DIR", &env_dir));
    assert_ok(&out, "gen-data with LEAP_OUT_DIR");
    assert!(env_dir.join("corpus.jsonl").exists());

    let out = run(leap()
        .arg("gen-data")
        .arg("--config")
        .arg(&cfg_path)
        .arg("--out")
        .arg(&flag_dir)
        .env("LEAP_OUT_DIR", dir.path().join("ignored")));
    assert_ok(&out, "gen-data with --out and env");
    assert!(flag_dir.join("corpus.jsonl").exists());
    assert!(!dir.path().join("ignored").exists(), "--out must win over the environment");
}

#[test]
fn distill_requires_exactly_one_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("experiment.toml");
    write_config(&quick_config(17), &cfg_path);

    let out = run(leap()
        .arg("distill")
        .arg("--config")
        .arg(&cfg_path)
        .arg("--out")
        .arg(dir.path().join("artifacts"))
        .args(["--leap", "--baseline"]));
    assert!(!out.status.success(), "--leap and --baseline together must be rejected");

    let out = run(leap()
        .arg("distill")
        .arg("--config")
        .arg(&cfg_path)
        .arg("--out")
        .arg(dir.path().join("artifacts")));
    assert!(!out.status.success(), "one of the modes is required");
}

#[test]
fn reproduce_writes_gates_and_check_sets_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("experiment.toml");
    write_config(&quick_config(11), &cfg_path);
    let out_dir = dir.path().join("artifacts");

    let out = run(leap()
        .arg("reproduce")
        .arg("--config")
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out_dir)
        .arg("--check"));
    let text = String::from_utf8_lossy(&out.stdout);
    for f in ["summary.json", "gates.json", "layer_comparison.csv", "bench.csv"] {
        assert!(out_dir.join(f).exists(), "reproduce did not write {f}");
    }
    let gate_lines: Vec<&str> = text
        .lines()
        .filter(|l| l.starts_with("PASS") || l.starts_with("FAIL"))
        .collect();
    assert!(gate_lines.len() >= 10, "expected one line per gate:\n{text}");
    // A one-epoch miniature cannot show the full phenomenon; the exit code
    // must agree with whatever the gate lines say.
    let any_fail = gate_lines.iter().any(|l| l.starts_with("FAIL"));
    assert_eq!(out.status.success(), !any_fail, "exit code disagrees with gates:\n{text}");
}
