//! End-to-end runs of the `hbf-sweep` binary.

use std::process::Command;

use hbf_core::harness::CSV_HEADER;

fn sweep() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hbf-sweep"))
}

const SMALL: &str = "n_t = 8\nn_r = 8\nk = 8\ntrials = 2\nm = 2, 3\n";

#[test]
fn small_config_writes_csv_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("out.csv");
    let run = || {
        sweep()
            .args(["--config", cfg.to_str().unwrap(), "--snr-db", "-10,0,10", "--criterion", "eig,det"])
            .args(["--out", out.to_str().unwrap()])
            .status()
            .unwrap()
    };
    assert_eq!(run().code(), Some(0));
    let first = std::fs::read_to_string(&out).unwrap();
    let mut lines = first.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    // (2 criteria x 2 m + omp) x 3 SNR points
    assert_eq!(lines.count(), 15);
    assert_eq!(run().code(), Some(0));
    assert_eq!(first, std::fs::read_to_string(&out).unwrap());
}

#[test]
fn flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, format!("{SMALL}codebook = strong\n")).unwrap();
    let out = dir.path().join("o.csv");
    let status = sweep()
        .args(["--config", cfg.to_str().unwrap(), "--codebook", "weak", "--snr-db", "0", "--m", "2"])
        .args(["--noise-free", "--seed", "9", "--workers", "1", "--out", out.to_str().unwrap()])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(1) == Some("weak")));
}

#[test]
fn configuration_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "n_t = 8\nbeams = 4\n").unwrap();
    let out = dir.path().join("o.csv");
    let status = sweep()
        .args(["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    std::fs::write(&cfg, SMALL).unwrap();
    let status = sweep()
        .args(["--config", cfg.to_str().unwrap(), "--m", "1", "--out", out.to_str().unwrap()])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn unwritable_output_exits_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("missing").join("o.csv");
    let status = sweep()
        .args(["--config", cfg.to_str().unwrap(), "--snr-db", "0", "--out", out.to_str().unwrap()])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
}
