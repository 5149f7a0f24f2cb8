use std::path::Path;
use std::process::{Command, Output};

fn uqvae(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uqvae"))
        .args(args)
        .env("UQVAE_OUTPUT_ROOT", root)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &[&str] = &[
    "--mesh-n",
    "5",
    "--m-train",
    "30",
    "--m-test",
    "4",
    "--epochs",
    "3",
    "--batch-size",
    "10",
    "--set",
    "encoder_hidden=16,16",
];

#[test]
fn help_lists_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let out = uqvae(dir.path(), &["--help"]);
    assert!(out.status.success());
    let text = stdout(&out);
    for cmd in ["gen-data", "train", "laplace", "verify", "report", "timing"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn flags_override_config_file_and_root_applies() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    std::fs::write(&cfg, "# experiment\nmesh_n=4\ndelta=0.05\nm_train=12\nm_test=2\noutput_dir=runs/a\n").unwrap();
    let out = uqvae(dir.path(), &["gen-data", "--config", cfg.to_str().unwrap(), "--delta", "0.01"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("runs/a");
    let written = std::fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(written.contains("delta=0.01\n"));
    assert!(written.contains("mesh_n=4\n"));
    let data = std::fs::read_to_string(run.join("dataset_train.csv")).unwrap();
    assert!(data.contains("# M=12"));
}

#[test]
fn full_cli_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let run = |cmd: &str| {
        let mut args = vec![cmd, "--output-dir", "run"];
        args.extend_from_slice(SMALL);
        let out = uqvae(dir.path(), &args);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        stdout(&out)
    };
    assert!(run("gen-data").contains("train set"));
    assert!(run("train").contains("test parameter error"));
    assert!(run("laplace").contains("MAP error"));
    assert!(run("timing").contains("speedup"));
    let out = uqvae(dir.path(), &["report"]);
    assert!(out.status.success());
    assert!(stdout(&out).starts_with("2 runs, 1 tables"));
    for f in ["encoder.ckpt", "training_log.csv", "metrics.txt", "laplace.txt", "timing.txt"] {
        assert!(dir.path().join("run").join(f).exists(), "{f}");
    }
    assert!(dir.path().join("report/relative_errors.csv").exists());
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = uqvae(dir.path(), &["train", "--set", "no_such_key=1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown configuration key"));
    let out = uqvae(dir.path(), &["train", "--alpha", "1.5"]);
    assert!(!out.status.success());
    let out = uqvae(dir.path(), &["train", "--set", "malformed"]);
    assert!(!out.status.success());
    let out = uqvae(dir.path(), &["train", "--output-dir", "nothing-here"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn report_on_empty_root() {
    let dir = tempfile::tempdir().unwrap();
    let out = uqvae(dir.path(), &["report"]);
    assert!(out.status.success());
    assert!(stdout(&out).starts_with("0 runs"));
}
