//! End-to-end runs of the `mosaic` binary: every subcommand, the documented
//! exit codes, artifact formats, and bitwise determinism under a fixed seed.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mosaic_core::{save_checkpoint, ModelConfig, ToyModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mosaic() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mosaic"))
}

fn run(args: &[&str]) -> Output {
    mosaic().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("stdout is utf-8")
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("stderr is utf-8")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn tmp() -> tempfile::TempDir {
    tempfile::tempdir().expect("tempdir")
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

#[test]
fn mask_writes_binary_and_stats_sidecar() {
    let dir = tmp();
    let out = run(&["--grid", "16", "-o", path_str(dir.path()), "mask"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(dir.path().join("mask.bin").is_file());
    let stats: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("mask_stats.json")).unwrap())
            .expect("sidecar is JSON");
    // 16x16 grid + 4x4 guidance, no text
    assert_eq!(stats["seq_len"], 256 + 16);
    assert_eq!(stats["q_tile"], 128);
    // stdout carries the same stats
    let echoed: serde_json::Value = serde_json::from_str(&stdout(&out)).expect("stdout is JSON");
    assert_eq!(echoed, stats);
}

#[test]
fn mask_rejects_bad_grid_with_exit_2() {
    let dir = tmp();
    let out = run(&["--grid", "17", "-o", path_str(dir.path()), "mask"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("grid_side"), "stderr: {}", stderr(&out));
}

#[test]
fn verify_passes_on_stock_small_grid() {
    let out = run(&["--grid", "16", "verify"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["all_passed"], true);
    assert_eq!(report["suites"].as_array().unwrap().len(), 4);
}

#[test]
fn verify_passes_on_degenerate_single_cell_grid() {
    let out = run(&["--grid", "1", "verify"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["all_passed"], true);
}

#[test]
fn verify_catches_an_injected_mask_fault() {
    let out = run(&["--grid", "16", "verify", "--inject-mask-fault"]);
    assert_eq!(code(&out), 3, "stderr: {}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["all_passed"], false);
    for suite in report["suites"].as_array().unwrap() {
        let expect_pass = suite["suite"] != "mask-consistency";
        assert_eq!(suite["passed"], expect_pass, "suite {}", suite["suite"]);
    }
}

#[test]
fn bench_emits_one_csv_row_per_swept_side() {
    let dir = tmp();
    let out = run(&[
        "--sweep",
        "16,32",
        "--repetitions",
        "3",
        "-o",
        path_str(dir.path()),
        "bench",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert_eq!(csv, stdout(&out), "stdout echoes the CSV");
    let lines: Vec<&str> = csv.trim().lines().collect();
    assert_eq!(lines.len(), 3, "header + two rows:\n{csv}");
    assert!(lines[0].starts_with("seq_len,visited_tiles,skipped_tiles,median_skip_ms"));
    for row in &lines[1..] {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols.len(), 8, "row: {row}");
        cols[0].parse::<u64>().expect("seq_len int");
        cols[3].parse::<f64>().expect("median ms float");
    }
    // 16x16+4x4 = 272 tokens, 32x32+8x8 = 1088
    assert!(lines[1].starts_with("272,"));
    assert!(lines[2].starts_with("1088,"));
}

#[test]
fn bench_requires_three_repetitions() {
    let dir = tmp();
    let out =
        run(&["--sweep", "16", "--repetitions", "2", "-o", path_str(dir.path()), "bench"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("repetitions"), "stderr: {}", stderr(&out));
}

fn train_args<'a>(dir: &'a Path, steps: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["--grid", "16", "--steps", steps, "-o", path_str(dir)];
    v.extend_from_slice(extra);
    v.push("train");
    v
}

#[test]
fn train_logs_csv_and_serializes_a_checkpoint() {
    let dir = tmp();
    let out = run(&train_args(dir.path(), "10", &[]));
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    let lines: Vec<&str> = csv.trim().lines().collect();
    assert_eq!(lines.len(), 11, "header + 10 steps");
    assert_eq!(lines[0], "step,loss,grad_norm,wall_ms");
    assert!(dir.path().join("model.ckpt").is_file());
    let summary: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(summary["steps"], 10);
    assert!(summary["final_loss"].as_f64().unwrap().is_finite());
}

#[test]
fn train_is_bitwise_deterministic_under_a_fixed_seed() {
    let (d1, d2) = (tmp(), tmp());
    let out1 = run(&train_args(d1.path(), "8", &["--seed", "7"]));
    let out2 = run(&train_args(d2.path(), "8", &["--seed", "7"]));
    assert_eq!(code(&out1), 0);
    assert_eq!(code(&out2), 0);
    let ckpt1 = std::fs::read(d1.path().join("model.ckpt")).unwrap();
    let ckpt2 = std::fs::read(d2.path().join("model.ckpt")).unwrap();
    assert_eq!(ckpt1, ckpt2, "checkpoints differ between identical runs");
    // Loss traces match except the wall-clock column.
    let strip = |p: PathBuf| -> Vec<String> {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').map_or_else(|| l.to_string(), |(head, _)| head.to_string()))
            .collect()
    };
    assert_eq!(
        strip(d1.path().join("train_log.csv")),
        strip(d2.path().join("train_log.csv"))
    );
}

#[test]
fn zero_step_train_checkpoints_the_seeded_initialization() {
    let dir = tmp();
    let out = run(&train_args(dir.path(), "0", &["--seed", "11"]));
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let written = std::fs::read(dir.path().join("model.ckpt")).unwrap();

    // The same initialization, constructed directly against the library.
    let mcfg = ModelConfig { channels: 2, lora_rank: 16, ..ModelConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = ToyModel::<f32>::init(mcfg, &mut rng).unwrap();
    let mut expected = Vec::new();
    save_checkpoint(&model, &mut expected).unwrap();
    assert_eq!(written, expected, "0-step checkpoint must equal the initialization");

    let csv = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert_eq!(csv.trim(), "step,loss,grad_norm,wall_ms", "empty log besides the header");
}

#[test]
fn diverging_training_exits_nonzero() {
    let dir = tmp();
    let out = run(&train_args(dir.path(), "30", &["--learning-rate", "10"]));
    assert_eq!(code(&out), 3, "stderr: {}", stderr(&out));
}

#[test]
fn sample_exports_grid_and_pgm_deterministically() {
    let dir = tmp();
    let out = run(&train_args(dir.path(), "5", &[]));
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let ckpt = dir.path().join("model.ckpt");

    let sample = |out_dir: &Path| -> Output {
        run(&[
            "--base-side",
            "16",
            "--levels",
            "1",
            "--sample-steps",
            "3",
            "--seed",
            "5",
            "-o",
            path_str(out_dir),
            "sample",
            "--checkpoint",
            path_str(&ckpt),
            "--pgm",
        ])
    };
    let (s1, s2) = (tmp(), tmp());
    let out1 = sample(s1.path());
    assert_eq!(code(&out1), 0, "stderr: {}", stderr(&out1));
    let out2 = sample(s2.path());
    assert_eq!(code(&out2), 0);

    let grid1 = std::fs::read(s1.path().join("sample_grid.bin")).unwrap();
    let grid2 = std::fs::read(s2.path().join("sample_grid.bin")).unwrap();
    assert_eq!(grid1, grid2, "same seed must reproduce the grid bit for bit");

    // header: magic + version + bits + side + channels, then 64*64*2 f64s
    assert_eq!(&grid1[..8], b"MOSAGRID");
    assert_eq!(grid1.len(), 8 + 4 + 4 + 8 + 8 + 64 * 64 * 2 * 8);

    let pgm = std::fs::read_to_string(s1.path().join("sample.pgm")).unwrap();
    let mut lines = pgm.lines();
    assert_eq!(lines.next(), Some("P2"));
    assert_eq!(lines.next(), Some("64 64"));
    assert_eq!(lines.next(), Some("255"));
    assert_eq!(lines.count(), 64, "one line of pixels per grid row");

    // Per-level stats climb the schedule and carry working-set estimates.
    let summary: serde_json::Value = serde_json::from_str(&stdout(&out1)).unwrap();
    let levels = summary["levels"].as_array().unwrap();
    assert_eq!(levels.len(), 2);
    assert_eq!(levels[0]["grid_side"], 16);
    assert_eq!(levels[1]["grid_side"], 64);
    assert_eq!(levels[1]["guidance_len"], 256);
    assert!(levels[1]["est_peak_bytes"].as_u64().unwrap() > 0);
}

#[test]
fn sample_rejects_a_checkpoint_of_the_wrong_precision() {
    let dir = tmp();
    let out = run(&train_args(dir.path(), "2", &[]));
    assert_eq!(code(&out), 0);
    let ckpt = dir.path().join("model.ckpt");
    let out = run(&[
        "--precision",
        "f64",
        "--levels",
        "0",
        "-o",
        path_str(dir.path()),
        "sample",
        "--checkpoint",
        path_str(&ckpt),
    ]);
    assert_eq!(code(&out), 3, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("precision"), "stderr: {}", stderr(&out));
}

#[test]
fn sample_rejects_out_of_vocabulary_modes() {
    let dir = tmp();
    let out = run(&train_args(dir.path(), "0", &[]));
    assert_eq!(code(&out), 0);
    let ckpt = dir.path().join("model.ckpt");
    let out = run(&[
        "--levels",
        "0",
        "-o",
        path_str(dir.path()),
        "sample",
        "--checkpoint",
        path_str(&ckpt),
        "--mode",
        "99",
    ]);
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("mode"), "stderr: {}", stderr(&out));
}

#[test]
fn config_subcommand_round_trips_and_flags_override_the_file() {
    // Defaults echo back parseable and equal.
    let out = run(&["config"]);
    assert_eq!(code(&out), 0);
    let echoed = stdout(&out);
    let parsed = mosaic_cli::config::RunConfig::parse(&echoed).unwrap();
    assert_eq!(parsed, mosaic_cli::config::RunConfig::default());

    // A file sets grid_side = 64; the flag wins with 32.
    let dir = tmp();
    let cfg_path = dir.path().join("run.cfg");
    std::fs::write(&cfg_path, "grid_side = 64\nseed = 9\n").unwrap();
    let out = run(&["--config", path_str(&cfg_path), "--grid", "32", "config"]);
    assert_eq!(code(&out), 0);
    let parsed = mosaic_cli::config::RunConfig::parse(&stdout(&out)).unwrap();
    assert_eq!(parsed.grid_side, 32, "flag overrides the file");
    assert_eq!(parsed.seed, 9, "file survives where no flag is given");
}

#[test]
fn unknown_config_keys_are_rejected_with_exit_2() {
    let dir = tmp();
    let cfg_path = dir.path().join("run.cfg");
    std::fs::write(&cfg_path, "grid_sdie = 64\n").unwrap();
    let out = run(&["--config", path_str(&cfg_path), "config"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("unknown key"), "stderr: {}", stderr(&out));
}

#[test]
fn thread_flag_and_env_are_accepted() {
    let out = mosaic()
        .args(["--grid", "8", "--threads", "2", "verify"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let out = mosaic()
        .args(["--grid", "8", "verify"])
        .env("MOSAIC_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let out = mosaic()
        .args(["--grid", "8", "verify"])
        .env("MOSAIC_THREADS", "zebra")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));
}
