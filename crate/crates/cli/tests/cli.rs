use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const TINY: &[&str] = &[
    "--set", "height=32",
    "--set", "width=32",
    "--set", "crop_height=32",
    "--set", "crop_width=32",
    "--set", "n_synthetic=4",
    "--set", "n_real=4",
    "--set", "n_val_synthetic=2",
    "--set", "n_val_real=2",
    "--set", "steps_translation=2",
    "--set", "steps_dehazing=2",
    "--set", "steps_joint=2",
];

fn hazebridge(dir: &Path, args: &[&str]) -> Output {
    // Later `--set` flags win, so per-test arguments go last.
    Command::new(env!("CARGO_BIN_EXE_hazebridge"))
        .current_dir(dir)
        .args(&args[..1])
        .args(TINY)
        .args(&args[1..])
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = hazebridge(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn digest_tree(root: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for sub in ["syn/hazy", "syn/clear", "syn/depth", "real/hazy", "real/clear"] {
        let dir = root.join(sub);
        let mut names: Vec<_> = std::fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for p in names {
            let h = Sha256::digest(std::fs::read(&p).unwrap());
            out.push((format!("{sub}/{}", p.file_name().unwrap().to_string_lossy()), format!("{h:x}")));
        }
    }
    out
}

fn image_dims(path: &Path) -> (u32, u32) {
    let bytes = std::fs::read(path).unwrap();
    assert_eq!(&bytes[1..4], b"PNG");
    let be = |i: usize| u32::from_be_bytes(bytes[i..i + 4].try_into().unwrap());
    // IHDR: width, height, bit depth, colour type (2 = RGB).
    assert_eq!((bytes[24], bytes[25]), (8, 2), "expected 8-bit RGB");
    (be(16), be(20))
}

fn deterministic(log: &str) -> String {
    log.lines().map(|l| l.split(" wall=").next().unwrap()).collect::<Vec<_>>().join("\n")
}

#[test]
fn synth_train_eval_dehaze_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["synth"]);
    assert!(dir.join("data/train/manifest.toml").is_file());
    assert!(dir.join("data/val/syn/depth/s0000.png").is_file());

    ok(dir, &["train", "--out-dir", "run"]);
    for f in ["phase1.ckpt", "phase2.ckpt", "phase3.ckpt", "checkpoint.ckpt", "phase3.log", "effective_config.toml"] {
        assert!(dir.join("run").join(f).is_file(), "missing {f}");
    }
    let log = std::fs::read_to_string(dir.join("run/phase3.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().all(|l| l.contains("phase=3 mode=FULL") && l.contains(" total=")));

    let stdout = ok(dir, &["eval", "--out-dir", "run", "--predictions", "run/pred"]);
    assert!(stdout.contains("synthetic G_S n=2"), "{stdout}");
    assert!(stdout.contains("real G_R n=2"), "{stdout}");
    let csv = std::fs::read_to_string(dir.join("run/eval.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "domain,stem,network,psnr_hazy,ssim_hazy,psnr,ssim");
    assert_eq!(lines.len(), 1 + 3 + 3);
    assert!(lines.iter().any(|l| l.starts_with("real,MEAN,G_R,")));
    assert!(dir.join("run/pred/real/r0001.png").is_file());

    let routed = ok(
        dir,
        &["dehaze", "--input", "data/val/real/hazy/r0000.png", "--output", "one.png", "--checkpoint", "run/checkpoint.ckpt"],
    );
    assert_eq!(routed.trim(), "G_R");
    let (a, b) = (
        image_dims(&dir.join("data/val/real/hazy/r0000.png")),
        image_dims(&dir.join("one.png")),
    );
    assert_eq!(a, b);
    let routed = ok(
        dir,
        &[
            "dehaze", "--input", "data/val/syn/hazy", "--output", "many", "--checkpoint", "run/checkpoint.ckpt",
            "--domain", "synthetic",
        ],
    );
    assert_eq!(routed.trim(), "G_S");
    assert!(dir.join("one.png").is_file());
    assert!(dir.join("many/s0001.png").is_file());

    // Resuming after phase 1 reproduces the uninterrupted logs.
    ok(dir, &["train", "--out-dir", "split", "--set", "phases=1"]);
    ok(dir, &["train", "--out-dir", "split", "--set", "phases=2,3", "--resume", "split/phase1.ckpt"]);
    for n in 1..=3 {
        let a = std::fs::read_to_string(dir.join(format!("run/phase{n}.log"))).unwrap();
        let b = std::fs::read_to_string(dir.join(format!("split/phase{n}.log"))).unwrap();
        assert_eq!(deterministic(&a), deterministic(&b), "phase {n} diverged after resume");
    }
}

#[test]
fn manifest_regenerates_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["synth", "--seed", "5"]);
    ok(dir, &["synth", "--manifest", "data/train/manifest.toml", "--dest", "again"]);
    assert_eq!(digest_tree(&dir.join("data/train")), digest_tree(&dir.join("again")));
}

#[test]
fn ablate_writes_table_and_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["synth"]);
    let stdout = ok(dir, &["ablate", "--out-dir", "ab", "--set", "modes=SYN,S2R"]);
    let table = std::fs::read_to_string(dir.join("ab/ablation.csv")).unwrap();
    assert_eq!(stdout, table);
    let modes: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(modes, ["SYN", "S2R", "HAZY"]);
    assert!(dir.join("ab/train_SYN.log").is_file());
    assert!(dir.join("ab/train_S2R.log").is_file());
    let reference = std::fs::read_to_string(dir.join("ab/ablation_reference.csv")).unwrap();
    assert!(reference.starts_with("mode,psnr,ssim\n"));
}

#[test]
fn exit_codes_follow_error_kinds() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let code = |args: &[&str]| hazebridge(dir, args).status.code();
    assert_eq!(code(&["train", "--set", "mode=NOPE"]), Some(2));
    assert_eq!(code(&["train", "--set", "unknown_key=1"]), Some(2));
    assert_eq!(code(&["train", "--set", "batch_size=0"]), Some(2));
    assert_eq!(code(&["eval", "--checkpoint", "missing.ckpt"]), Some(3));
    assert_eq!(code(&["train"]), Some(3), "missing dataset");
    std::fs::write(dir.join("bad.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(code(&["eval", "--checkpoint", "bad.ckpt"]), Some(3));
}

#[test]
fn config_file_is_echoed_with_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("run.toml"), "seed = 3\nlambda_d = 0.25\nout_dir = \"cfg\"\n").unwrap();
    ok(dir, &["synth", "--config", "run.toml", "--seed", "8"]);
    let echoed = std::fs::read_to_string(dir.join("cfg/effective_config.toml")).unwrap();
    let v: toml::Table = toml::from_str(&echoed).unwrap_or_else(|e| panic!("{e}\n{echoed}"));
    assert_eq!(v["seed"].as_integer(), Some(8));
    assert_eq!(v["lambda_d"].as_float(), Some(0.25));
    assert_eq!(v["height"].as_integer(), Some(32));
}

#[test]
fn ground_truth_as_prediction_scores_the_cap() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["synth"]);
    for (domain, src) in [("synthetic", "data/val/syn/clear"), ("real", "data/val/real/clear")] {
        let dest = dir.join("gt").join(domain);
        std::fs::create_dir_all(&dest).unwrap();
        for e in std::fs::read_dir(dir.join(src)).unwrap() {
            let p = e.unwrap().path();
            std::fs::copy(&p, dest.join(p.file_name().unwrap())).unwrap();
        }
    }
    ok(dir, &["eval", "--score", "gt", "--out-dir", "ev"]);
    let csv = std::fs::read_to_string(dir.join("ev/eval.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6);
    for r in rows {
        assert_eq!(r[2], "FILES");
        assert_eq!(r[5].parse::<f64>().unwrap(), 100.0, "{r:?}");
        assert!((r[6].parse::<f64>().unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn invalid_inputs_fail_without_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = hazebridge(dir, &["synth", "--set", "height=4"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).trim().is_empty());

    let out = hazebridge(dir, &["train", "--out-dir", "run", "--set", "data_dir=nowhere"]);
    assert_ne!(out.status.code(), Some(0));
    let ckpts = std::fs::read_dir(dir.join("run"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ckpt"))
        .count();
    assert_eq!(ckpts, 0);
}
