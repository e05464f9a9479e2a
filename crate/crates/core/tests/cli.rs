use std::path::Path;
use std::process::{Command, Output};

fn unp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unp-sim")).args(["--threads", "1"]).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Lines of a CSV file after its leading provenance comment.
fn csv_body(path: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let first = lines.next().unwrap();
    assert!(first.starts_with("# checkpoint_sha256=") && first.contains("seed=") && first.contains("config_sha256="), "{first}");
    lines.map(str::to_owned).collect()
}

fn train_tiny(dir: &Path, steps: usize) -> std::path::PathBuf {
    let o = unp(&["train", "--preset", "1x2-tiny", "--steps", &steps.to_string(), "--set", "warmup_steps=2", "--out", s(dir)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir.join("unp.ckpt")
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&unp(&["--help"])), 0);
    assert_eq!(code(&unp(&["train", "--help"])), 0);
    assert_eq!(code(&unp(&["frobnicate"])), 1);
    assert_eq!(code(&unp(&["evolve", "--state", "01"])), 1);
    let o = unp(&["train", "--preset", "no-such-preset", "--steps", "1"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("no-such-preset"), "{}", stderr(&o));
    let o = Command::new(env!("CARGO_BIN_EXE_unp-sim")).args(["verify"]).env("UNP_THREADS", "zero").output().unwrap();
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("UNP_THREADS"));
}

#[test]
fn protocol_command_writes_spec_and_grid() {
    let dir = tempfile::tempdir().unwrap();
    let o = unp(&["protocol", "--kind", "gaussian_pulse", "--n-t", "11", "--out", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let spec = std::fs::read_to_string(dir.path().join("protocol.txt")).unwrap();
    assert!(spec.contains("gaussian_pulse"), "{spec}");
    let grid = csv_body(&dir.path().join("grid.csv"));
    assert_eq!(grid.len(), 12, "header plus 11 rows");

    let o = unp(&["protocol", "--kind", "sawtooth", "--out", s(dir.path())]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("sawtooth"));
}

#[test]
fn train_resume_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), 3);
    assert!(ckpt.exists());
    let rows = csv_body(&dir.path().join("metrics.csv"));
    assert_eq!(rows[0], "step,loss_total,loss_phys,loss_anchor,lr,grad_norm,wall_time");
    let steps: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["0", "1", "2"]);

    let o = unp(&["train", "--preset", "1x2-tiny", "--steps", "5", "--set", "warmup_steps=2", "--out", s(dir.path()), "--resume"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("resuming from step 3"));
    let rows = csv_body(&dir.path().join("metrics.csv"));
    let steps: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["0", "1", "2", "3", "4"]);
}

#[test]
fn training_is_reproducible_from_the_seed() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ca = unp::checkpoint::load_checkpoint(&train_tiny(a.path(), 4)).unwrap();
    let cb = unp::checkpoint::load_checkpoint(&train_tiny(b.path(), 4)).unwrap();
    // The configs differ only in `out_dir`.
    assert_eq!(ca.params, cb.params);
    assert_eq!((ca.adam.t, &ca.adam.m, &ca.adam.v), (cb.adam.t, &cb.adam.m, &cb.adam.v));
}

#[test]
fn evolve_writes_comparison_and_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), 1);
    assert_eq!(code(&unp(&["protocol", "--kind", "fourier", "--seed", "5", "--out", s(dir.path())])), 0);
    let proto = dir.path().join("protocol.txt");
    let out = dir.path().join("evolve.csv");
    let o = unp(&["evolve", "--checkpoint", s(&ckpt), "--protocol", s(&proto), "--state", "01", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = csv_body(&out);
    assert_eq!(rows[0], "t,fidelity,Z,X,ZZ,E,Z_exact,X_exact,ZZ_exact,E_exact");
    assert_eq!(rows.len(), 12);

    let o = unp(&["evolve", "--checkpoint", s(&ckpt), "--protocol", s(&proto), "--state", "0x"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("0x"), "{}", stderr(&o));

    let o = unp(&["evolve", "--checkpoint", s(&dir.path().join("missing.ckpt")), "--protocol", s(&proto), "--state", "ghz"]);
    assert_eq!(code(&o), 1);

    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, &std::fs::read(&ckpt).unwrap()[..100]).unwrap();
    let o = unp(&["evolve", "--checkpoint", s(&bad), "--protocol", s(&proto), "--state", "ghz"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("truncated"), "{}", stderr(&o));
}

#[test]
fn finetune_generates_data_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), 1);
    assert_eq!(code(&unp(&["protocol", "--kind", "gaussian_pulse", "--out", s(dir.path())])), 0);
    let out = dir.path().join("ft");
    let o = unp(&[
        "finetune", "--checkpoint", s(&ckpt), "--protocol", s(&dir.path().join("protocol.txt")), "--generate", "2", "--test", "2", "--steps", "3",
        "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["dataset.csv", "context.csv", "mae.csv", "loss.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(csv_body(&out.join("loss.csv")).len(), 5, "header plus steps + 1 losses");
    assert_eq!(csv_body(&out.join("dataset.csv"))[0], "state_bits,t,X_target,ZZ_target");

    let o = unp(&["finetune", "--checkpoint", s(&ckpt), "--protocol", s(&dir.path().join("protocol.txt")), "--generate", "3", "--test", "2", "--out", s(&out)]);
    assert_eq!(code(&o), 1, "only one held-out state remains on 1x2");
}

#[test]
fn verify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), 1);
    let o = unp(&["verify", "--checkpoint", s(&ckpt)]);
    let text = String::from_utf8_lossy(&o.stdout).into_owned();
    assert_eq!(code(&o), 0, "{text}");
    assert!(text.contains("properties passed"));

    let bad = dir.path().join("bad.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let k = bytes.len() - 40;
    bytes[k] ^= 0xff;
    std::fs::write(&bad, bytes).unwrap();
    let o = unp(&["verify", "--checkpoint", s(&bad)]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stdout).contains("checksum"));
}
