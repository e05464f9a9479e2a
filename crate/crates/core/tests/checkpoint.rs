use unp::checkpoint::{from_bytes, load_for_lattice, read_header, save_checkpoint, to_bytes, FORMAT_VERSION, SNAKE_CONVENTION};
use unp::config::RunConfig;
use unp::training::{run_training, RunSinks, TrainState};
use unp::UnpError;

fn tiny_state(steps: usize) -> TrainState {
    let mut cfg = RunConfig::from_preset("1x2-tiny").unwrap();
    cfg.warmup_steps = 2;
    cfg.total_steps = steps;
    cfg.wall_time = false;
    let mut s = TrainState::new(cfg).unwrap();
    run_training(&mut s, RunSinks::default()).unwrap();
    s
}

fn checkpoint_message(e: UnpError) -> String {
    match e {
        UnpError::Checkpoint(m) => m,
        other => panic!("expected a checkpoint error, got {other:?}"),
    }
}

#[test]
fn save_load_save_is_byte_identical() {
    let state = tiny_state(3);
    let bytes = to_bytes(&state);
    let back = from_bytes(&bytes).unwrap();
    assert_eq!(to_bytes(&back), bytes);
    assert_eq!(back.step, 3);
    assert_eq!(back.config, state.config);
    for (a, b) in state.params.iter().zip(&back.params) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn header_records_layout_facts() {
    let state = tiny_state(1);
    let h = read_header(&to_bytes(&state)).unwrap();
    let get = |k: &str| h.iter().find(|(key, _)| key == k).map(|(_, v)| v.clone()).unwrap();
    assert_eq!(get("version"), FORMAT_VERSION.to_string());
    assert_eq!(get("lattice"), "1x2");
    assert_eq!(get("snake"), SNAKE_CONVENTION);
    assert_eq!(get("n_t"), "11");
    assert_eq!(get("d_e"), "8");
    assert_eq!(get("step"), "1");
}

#[test]
fn every_truncation_is_rejected() {
    let bytes = to_bytes(&tiny_state(1));
    for cut in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
        let e = from_bytes(&bytes[..cut]).expect_err("truncated checkpoint must not load");
        assert!(matches!(e, UnpError::Checkpoint(_)), "cut {cut}: {e:?}");
    }
    let msg = checkpoint_message(from_bytes(&bytes[..bytes.len() / 2]).unwrap_err());
    assert!(msg.contains("truncated") || msg.contains("checksum"), "{msg}");
}

#[test]
fn version_magic_and_corruption_errors() {
    let bytes = to_bytes(&tiny_state(1));
    let mut v = bytes.clone();
    v[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert!(checkpoint_message(from_bytes(&v).unwrap_err()).contains("version"));

    let mut m = bytes.clone();
    m[0] = b'X';
    assert!(checkpoint_message(from_bytes(&m).unwrap_err()).contains("magic"));

    let mut c = bytes.clone();
    let k = c.len() - 100;
    c[k] ^= 0x01;
    assert!(checkpoint_message(from_bytes(&c).unwrap_err()).contains("checksum"));

    let mut t = bytes;
    t.push(0);
    assert!(from_bytes(&t).is_err());
}

#[test]
fn lattice_mismatch_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.ckpt");
    save_checkpoint(&tiny_state(1), &path).unwrap();
    assert!(load_for_lattice(&path, 1, 2).is_ok());
    let msg = checkpoint_message(load_for_lattice(&path, 2, 2).unwrap_err());
    assert!(msg.contains("1x2") && msg.contains("2x2"), "{msg}");
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let straight = tiny_state(6);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    save_checkpoint(&tiny_state(3), &path).unwrap();
    let mut resumed = unp::checkpoint::load_checkpoint(&path).unwrap();
    assert_eq!(resumed.step, 3);
    resumed.config.total_steps = 6;
    let mut steps = Vec::new();
    let mut progress = |m: &unp::training::StepMetrics| steps.push(m.step);
    run_training(&mut resumed, RunSinks { progress: Some(&mut progress), ..Default::default() }).unwrap();
    assert_eq!(steps, vec![3, 4, 5]);
    assert_eq!(resumed.adam.t, straight.adam.t);
    for (a, b) in straight.params.iter().zip(&resumed.params) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn no_temporary_files_are_left_behind() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    let state = tiny_state(1);
    save_checkpoint(&state, &path).unwrap();
    save_checkpoint(&state, &path).unwrap();
    let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec![std::ffi::OsString::from("a.ckpt")]);
}
