use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn fastcaps(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fastcaps"))
        .args(args)
        .output()
        .expect("spawn fastcaps")
}

fn ok(args: &[&str]) -> String {
    let out = fastcaps(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_string_lossy().into_owned()
}

fn write_config(dir: &TempDir, text: &str) -> String {
    let path = p(dir, "run.cfg");
    fs::write(&path, text).unwrap();
    path
}

fn gen_weights(dir: &TempDir, name: &str, arch: &str) -> String {
    let path = p(dir, name);
    ok(&["gen-weights", "--out", &path, "--arch", arch, "--seed", "7"]);
    path
}

#[test]
fn prune_to_seven_capsule_types() {
    let dir = TempDir::new().unwrap();
    let w = gen_weights(&dir, "w.bin", "mnist");
    let cfg = write_config(&dir, "sparsity.conv1 = 0.9\nsparsity.primary = 0.78125\n");
    let (ow, om) = (p(&dir, "pruned.bin"), p(&dir, "mask.bin"));
    let out = ok(&[
        "prune",
        "--weights",
        &w,
        "--out-weights",
        &ow,
        "--out-mask",
        &om,
        "--config",
        &cfg,
    ]);
    assert!(out.contains("capsules: 1152 -> 252"), "{out}");
    assert!(
        out.contains("layer=primary;granularity=capsule_group;units=7/32"),
        "{out}"
    );
    assert!(Path::new(&ow).exists() && Path::new(&om).exists());

    let lat = ok(&["latency", "--weights", &ow, "--mask", &om, "--config", &cfg]);
    assert!(lat.contains("capsules=252"), "{lat}");
    let ratio: f64 = lat
        .lines()
        .find_map(|l| l.strip_prefix("fps_ratio="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((5.0..=30.0).contains(&ratio), "fps ratio {ratio}");
}

#[test]
fn zero_sparsity_leaves_weights_unchanged() {
    let dir = TempDir::new().unwrap();
    let w = gen_weights(&dir, "w.bin", "tiny");
    let cfg = write_config(&dir, "sparsity.conv1 = 0\nsparsity.primary = 0\n");
    let (ow, om) = (p(&dir, "same.bin"), p(&dir, "mask.bin"));
    ok(&[
        "prune",
        "--weights",
        &w,
        "--out-weights",
        &ow,
        "--out-mask",
        &om,
        "--config",
        &cfg,
    ]);
    assert_eq!(fs::read(&w).unwrap(), fs::read(&ow).unwrap());
}

#[test]
fn missing_weights_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    let missing = p(&dir, "nope.bin");
    let out = fastcaps(&[
        "prune",
        "--weights",
        &missing,
        "--out-weights",
        &p(&dir, "a"),
        "--out-mask",
        &p(&dir, "b"),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nope.bin"), "{err}");
}

#[test]
fn bad_config_line_is_reported() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "fact = 4\nrouting_iters = 0\n");
    let out = fastcaps(&["latency", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn corrupt_mask_file_is_rejected() {
    let dir = TempDir::new().unwrap();
    let m = p(&dir, "mask.bin");
    fs::write(&m, b"FCAPMASK\x01\x00").unwrap();
    let out = fastcaps(&["latency", "--mask", &m]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("offset"));
}

#[test]
fn infer_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let w = gen_weights(&dir, "w.bin", "mnist");
    let (imgs, labels) = (p(&dir, "img.idx"), p(&dir, "lbl.idx"));
    ok(&[
        "gen-images",
        "--out",
        &imgs,
        "--labels-out",
        &labels,
        "--count",
        "4",
        "--seed",
        "3",
    ]);
    let args = [
        "infer",
        "--weights",
        &w,
        "--images",
        &imgs,
        "--labels",
        &labels,
        "--mode",
        "optimized",
        "--compare",
    ];
    let first = ok(&args);
    assert_eq!(first, ok(&args));
    assert!(first.starts_with("mode=optimized;arith=real"), "{first}");
    assert_eq!(first.lines().filter(|l| l.starts_with("image=")).count(), 4);
    assert!(first.contains("accuracy="));
    assert!(first.contains("agreement="));

    let fixed = ok(&["infer", "--weights", &w, "--images", &imgs, "--arith", "fx16"]);
    assert!(fixed.starts_with("mode=reference;arith=fx16"), "{fixed}");
}

#[test]
fn latency_reports_primitive_costs() {
    let out = ok(&["latency"]);
    assert!(out.contains("exp: 27 -> 14"), "{out}");
    assert!(out.contains("div: 49 -> 36"), "{out}");
    let red: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("softmax_reduction_pct="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((75.0..=95.0).contains(&red), "{red}");
}

#[test]
fn compare_pruners_keeps_equal_counts() {
    let out = ok(&["compare-pruners", "--sparsity", "0.5,0.75", "--seed", "1"]);
    let rows: Vec<Vec<&str>> = out.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    for pair in rows.chunks(2) {
        assert_eq!((pair[0][1], pair[1][1]), ("lakp", "kp"));
        assert_eq!(pair[0][2..5], pair[1][2..5]);
    }
}
