//! End-to-end tests of the `facm-lab` binary: exit codes, artifact layout,
//! config round-trips, and bit-exact reproducibility.

use std::path::Path;
use std::process::{Command, Output};

use facm_core::config::TrainConfig;

fn lab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_facm-lab"))
}

fn run(args: &[&str]) -> Output {
    lab().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

/// Small-but-real training overrides so CLI round trips stay fast.
const TINY: &[&str] = &[
    "--set",
    "steps=60",
    "--set",
    "batch_size=16",
    "--set",
    "hidden_width=16",
    "--set",
    "depth=2",
    "--set",
    "time_embed_dim=8",
    "--set",
    "lr=3e-3",
];

#[test]
fn unknown_verb_is_a_usage_error() {
    let out = run(&["frobnicate"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_config_file_is_a_usage_error_naming_the_path() {
    let out = run(&["pretrain", "--config", "/no/such/config.cfg"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("/no/such/config.cfg"), "{}", stderr(&out));
}

#[test]
fn malformed_set_is_a_usage_error() {
    let out = run(&["pretrain", "--set", "lr3e-4"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("KEY=VALUE"), "{}", stderr(&out));
}

#[test]
fn unknown_config_key_is_reported_with_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "lr = 1e-3\nbogus_knob = 7\n").unwrap();
    let out = run(&["pretrain", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("bogus_knob"), "{err}");
    assert!(err.contains('2'), "line number missing: {err}");
}

#[test]
fn distill_without_a_teacher_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["distill", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("teacher"), "{}", stderr(&out));
}

#[test]
fn equivalence_verb_prints_and_records_the_gap() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["equivalence", "--nets", "3", "--seed", "5", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("max |T_avg(r=1) - T_tan"), "{}", stdout(&out));
    assert_eq!(read(&dir.path().join("seed.txt")), "5\n");
    assert!(read(&dir.path().join("equivalence.txt")).contains("3 nets"));
}

#[test]
fn out_dir_defaults_to_the_env_root() {
    let root = tempfile::tempdir().unwrap();
    let out = lab()
        .args(["equivalence", "--nets", "2"])
        .env("FACM_LAB_OUT", root.path())
        .output()
        .expect("binary runs");
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(root.path().join("equivalence").join("equivalence.txt").exists());
}

#[test]
fn training_run_leaves_a_complete_reproducible_record() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");

    let mut args = vec!["pretrain", "--seed", "3", "--threads", "1"];
    args.extend_from_slice(TINY);
    let run_a = run(&[&args[..], &["--out", out_a.to_str().unwrap()]].concat());
    assert_eq!(code(&run_a), 0, "{}", stderr(&run_a));

    // resolved config: full snapshot, reparses to the identical config
    let resolved = read(&out_a.join("config.resolved"));
    let cfg = TrainConfig::from_text(&resolved).expect("resolved snapshot parses");
    assert_eq!(cfg.to_text(), resolved, "snapshot is canonical");
    assert_eq!(cfg.seed, 3, "--seed replaced the config seed");
    assert_eq!(cfg.steps, 60);
    assert_eq!(read(&out_a.join("seed.txt")), "3\n");

    // trace: header plus one row per step
    let trace = read(&out_a.join("trace.csv"));
    assert_eq!(trace.lines().count(), 61);
    assert!(trace.starts_with("step,fm_loss,cm_loss,total,grad_norm,clamp_fraction\n"));

    // bit-identical repeat
    let run_b = run(&[&args[..], &["--out", out_b.to_str().unwrap()]].concat());
    assert_eq!(code(&run_b), 0, "{}", stderr(&run_b));
    assert_eq!(trace, read(&out_b.join("trace.csv")), "same config, same bits");

    // sampling from the checkpoint
    let ckpt = out_a.join("checkpoint.facm");
    assert!(ckpt.exists());
    let sdir = dir.path().join("s");
    let sample = run(&[
        "sample",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--nfe",
        "2",
        "--n-samples",
        "5",
        "--out",
        sdir.to_str().unwrap(),
    ]);
    assert_eq!(code(&sample), 0, "{}", stderr(&sample));
    let samples = read(&sdir.join("samples.csv"));
    assert_eq!(samples.lines().count(), 6);
    assert!(samples.starts_with("x,y,label,nfe,seed\n"));

    // evaluation report
    let edir = dir.path().join("e");
    let eval = run(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--nfe-list",
        "1,2",
        "--n-samples",
        "32",
        "--out",
        edir.to_str().unwrap(),
    ]);
    assert_eq!(code(&eval), 0, "{}", stderr(&eval));
    let report = read(&edir.join("report.csv"));
    assert_eq!(report.lines().count(), 3);
    assert!(report.starts_with("nfe,energy_distance,sliced_w2,n_samples,seed\n"));
    assert!(edir.join("samples_nfe1.csv").exists());
    assert!(edir.join("samples_nfe2.csv").exists());
    assert!(edir.join("reference.csv").exists());

    // distillation from the tiny teacher
    let ddir = dir.path().join("d");
    let mut dargs = vec!["distill", "--seed", "4", "--teacher", ckpt.to_str().unwrap()];
    dargs.extend_from_slice(TINY);
    dargs.extend_from_slice(&["--out", ddir.to_str().unwrap()]);
    let dis = run(&dargs);
    assert_eq!(code(&dis), 0, "{}", stderr(&dis));
    assert!(ddir.join("checkpoint.facm").exists());
    let dcfg = TrainConfig::from_text(&read(&ddir.join("config.resolved"))).unwrap();
    assert_eq!(dcfg.teacher.as_deref(), Some(ckpt.to_str().unwrap()));
}

#[test]
fn verify_verb_runs_the_hermetic_suite() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["verify", "--seed", "1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}\n{}", stdout(&out), stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("all "), "{text}");
    assert!(!text.contains("FAIL"), "{text}");
    assert!(read(&dir.path().join("verify.txt")).contains("PASS"));
}
