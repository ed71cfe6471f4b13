use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_neupath"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn neupath")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// A tiny dataset plus one-epoch weights.
fn fixture() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--out", "ds", "--classes", "3", "--per-class", "2", "--seed", "4"]);
    ok(dir.path(), &["train", "--data", "ds", "--out", "w.npsw", "--epochs", "1"]);
    dir
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn eval_of_identical_images_is_zero() {
    let d = fixture();
    let p = d.path();
    ok(p, &["eval", "--reference", "ds/img_00000.ppm", "--estimate", "ds/img_00000.ppm", "--weights", "w.npsw", "--out", "m.csv"]);
    let text = String::from_utf8(read(p, "m.csv")).unwrap();
    assert_eq!(text.lines().next(), Some("metric,value"));
    for line in text.lines().skip(1) {
        let v: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(v, 0.0, "{line}");
    }
}

#[test]
fn zero_iterations_output_equals_initialization() {
    let d = fixture();
    let p = d.path();
    ok(
        p,
        &[
            "invert", "--weights", "w.npsw", "--image", "ds/img_00000.ppm", "--out", "o.ppm", "--init", "given",
            "--init-image", "ds/img_00003.ppm", "--iterations", "0", "--trace", "t.csv",
        ],
    );
    assert_eq!(read(p, "o.ppm"), read(p, "ds/img_00003.ppm"));
    assert_eq!(String::from_utf8(read(p, "t.csv")).unwrap().lines().count(), 1);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let d = fixture();
    let p = d.path();
    let args = [
        "invert", "--weights", "w.npsw", "--image", "ds/img_00001.ppm", "--out", "o.ppm", "--iterations", "8",
        "--trace", "t.csv", "--metrics", "m.csv", "--seed", "11",
    ];
    ok(p, &args);
    let first: Vec<Vec<u8>> = ["t.csv", "m.csv", "o.ppm", "o.ppm.manifest"].iter().map(|f| read(p, f)).collect();
    ok(p, &args);
    let second: Vec<Vec<u8>> = ["t.csv", "m.csv", "o.ppm", "o.ppm.manifest"].iter().map(|f| read(p, f)).collect();
    assert_eq!(first, second);
    let manifest = String::from_utf8(first[3].clone()).unwrap();
    assert!(manifest.contains("setting.seed=11"));
    assert!(manifest.contains("output.trace=t.csv sha256:"));
}

#[test]
fn flags_override_the_config_file() {
    let d = fixture();
    let p = d.path();
    fs::write(p.join("run.cfg"), "iterations=40\nstep_size=0.5\n").unwrap();
    ok(
        p,
        &["--config", "run.cfg", "invert", "--weights", "w.npsw", "--image", "ds/img_00000.ppm", "--out", "o.ppm", "--iterations", "3", "--trace", "t.csv"],
    );
    assert_eq!(String::from_utf8(read(p, "t.csv")).unwrap().lines().count(), 4);
    let manifest = String::from_utf8(read(p, "o.ppm.manifest")).unwrap();
    assert!(manifest.contains("setting.step_size=0.5"));
    assert!(manifest.contains("setting.iterations=3"));
}

#[test]
fn exit_codes() {
    let d = fixture();
    let p = d.path();
    let missing = run(p, &["invert", "--weights", "w.npsw", "--image", "missing.ppm", "--out", "o.ppm"]);
    assert_eq!(missing.status.code(), Some(2));
    let bad_key = run(p, &["invert", "--weights", "w.npsw", "--image", "ds/img_00000.ppm", "--out", "o.ppm", "-s", "nope=1"]);
    assert_eq!(bad_key.status.code(), Some(2));
    let diverge = run(
        p,
        &["invert", "--weights", "w.npsw", "--image", "ds/img_00000.ppm", "--out", "o.ppm", "--step-size", "1e30", "--iterations", "3"],
    );
    assert_eq!(diverge.status.code(), Some(3), "{}", String::from_utf8_lossy(&diverge.stderr));
}

#[test]
fn completion_keeps_pixels_outside_the_mask() {
    let d = fixture();
    let p = d.path();
    // 64x64 mask with a 16x16 editable square
    let mut pgm = b"P5\n64 64\n255\n".to_vec();
    for y in 0..64 {
        for x in 0..64 {
            pgm.push(if (24..40).contains(&y) && (24..40).contains(&x) { 255 } else { 0 });
        }
    }
    fs::write(p.join("mask.pgm"), &pgm).unwrap();
    ok(
        p,
        &["complete", "--weights", "w.npsw", "--image", "ds/img_00002.ppm", "--mask", "mask.pgm", "--out", "c.ppm", "--class", "1", "--iterations", "5", "--trace", "ct.csv"],
    );
    let (a, b) = (read(p, "ds/img_00002.ppm"), read(p, "c.ppm"));
    assert_eq!(a.len(), b.len());
    let header = a.len() - 64 * 64 * 3;
    assert_eq!(a[..header], b[..header]);
    for (i, (x, y)) in a[header..].iter().zip(&b[header..]).enumerate() {
        let px = i / 3;
        let (row, col) = (px / 64, px % 64);
        if !((24..40).contains(&row) && (24..40).contains(&col)) {
            assert_eq!(x, y, "pixel {row},{col}");
        }
    }
}

#[test]
fn topics_and_hash_round_trip() {
    let d = fixture();
    let p = d.path();
    ok(p, &["topics", "--weights", "w.npsw", "--data", "ds", "--out", "tm.nptm", "--rank", "2", "--iterations", "30", "--scores", "s.csv", "--query", "ds/img_00000.ppm", "--retrieval-out", "r.csv"]);
    let r = String::from_utf8(read(p, "r.csv")).unwrap();
    assert_eq!(r.lines().nth(1).unwrap().split(',').nth(1), Some("img_00000.ppm"));
    ok(p, &["classviz", "--weights", "w.npsw", "--hash-image", "ds/img_00001.ppm", "--hash-level", "m6-7", "--hash-out", "h.nphc"]);
    assert_eq!(&read(p, "h.nphc")[..4], b"NPHC");
    let viz: PathBuf = p.join("cv.ppm");
    ok(p, &["classviz", "--weights", "w.npsw", "--hash", "h.nphc", "--class", "0", "--out", "cv.ppm", "--iterations", "2"]);
    assert!(viz.exists());
}
