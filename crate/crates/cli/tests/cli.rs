use std::path::Path;
use std::process::{Command, Output};

fn mad(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mad"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("spawn mad")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &[&str] = &["--prompt", "vertical stripes", "--width", "128", "--height", "64", "--guidance", "3"];

fn generate(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["generate"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    mad(out, &args)
}

#[test]
fn generate_writes_image_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = generate(dir.path(), &["--steps", "4", "--tau", "2", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let image = dir.path().join("images/vertical-stripes-s3-tau2.png");
    assert!(image.exists());
    assert_eq!(stdout(&o).trim(), image.display().to_string());
    let manifest = std::fs::read_to_string(dir.path().join("manifests/vertical-stripes-s3-tau2.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(v["image_path"], "images/vertical-stripes-s3-tau2.png");
    assert_eq!(v["seed"], 3);
}

#[test]
fn tau_zero_and_lcm_runs_succeed() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&generate(dir.path(), &["--steps", "3", "--tau", "0"])), 0);
    let o = generate(dir.path(), &["--scheduler", "lcm", "--tau", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifests/vertical-stripes-s0-tau2.json")).unwrap())
            .unwrap();
    assert_eq!(v["sampler"]["steps"], 4);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "[generate]\nprompt = \"from file\"\nwidth = 128\nheight = 64\nsteps = 2\ntau = 1\nseed = 9\n",
    )
    .unwrap();
    let o = mad(dir.path(), &["--config", cfg.to_str().unwrap(), "generate", "--seed", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("images/from-file-s5-tau1.png").exists());

    std::fs::write(&cfg, "[generate]\nprompt = \"x\"\ncolour = \"red\"\n").unwrap();
    assert_eq!(code(&mad(dir.path(), &["--config", cfg.to_str().unwrap(), "generate"])), 2);
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&generate(dir.path(), &["--bogus"])), 2);
    assert_eq!(code(&generate(dir.path(), &["--decoder", "external-vae"])), 2);
    assert_eq!(code(&generate(dir.path(), &["--backbone", "sd-2.0"])), 2);
    assert_eq!(code(&generate(dir.path(), &["--steps", "4", "--tau", "9"])), 2);
    // 136 px is 17 latent cells: view 8, stride 2 leaves a remainder.
    assert_eq!(code(&generate(dir.path(), &["--width", "136", "--strict"])), 2);
    assert_eq!(code(&mad(dir.path(), &["ablate", "--prompt", "x", "--sweep", "tau="])), 2);
    assert_eq!(code(&mad(dir.path(), &["replay"])), 2);
    assert!(!dir.path().join("images").exists());
}

#[test]
fn evaluate_scores_and_reports_missing_extractor() {
    let dir = tempfile::tempdir().unwrap();
    for seed in ["0", "1"] {
        assert_eq!(code(&generate(dir.path(), &["--steps", "2", "--seed", seed])), 0);
    }
    let o = mad(dir.path(), &["evaluate", "--scores", "clip,intra", "--caption", "vertical stripes"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("reports/evaluation.json")).unwrap()).unwrap();
    assert_eq!(report["protocol"]["images"], 2);
    assert!(report["mclip"].is_number() && report["i_lpips"].is_number());

    let o = mad(dir.path(), &["evaluate", "--scores", "intra", "--extractor", "none", "--name", "partial"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("I-LPIPS"));
    assert!(dir.path().join("reports/partial.json").exists());

    assert_eq!(code(&mad(dir.path(), &["evaluate", "--scores", "fid"])), 2);
}

#[test]
fn ablate_writes_one_row_per_setting() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["ablate", "--sweep", "tau=0,2", "--seeds", "2", "--steps", "2", "--jobs", "2"];
    args.extend_from_slice(SMALL);
    let o = mad(dir.path(), &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(dir.path().join("reports/ablate-tau.md")).unwrap();
    assert_eq!(table.lines().count(), 4);
    assert_eq!(std::fs::read_dir(dir.path().join("images/ablate-tau-2")).unwrap().count(), 2);
}

#[test]
fn bench_reports_exponents() {
    let dir = tempfile::tempdir().unwrap();
    let o = mad(
        dir.path(),
        &["bench", "--widths", "64,128", "--height", "64", "--modes", "direct-long", "--repeats", "1"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("attention FLOP exponent 2.000"));
    assert!(dir.path().join("reports/bench.json").exists());
    assert_eq!(code(&mad(dir.path(), &["bench", "--widths", "64,100", "--height", "64"])), 2);
}

#[test]
fn replay_round_trips_and_detects_other_weights() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&generate(dir.path(), &["--steps", "2", "--precision", "f64"])), 0);
    let manifest = dir.path().join("manifests/vertical-stripes-s0-tau2.json");
    let o = mad(dir.path(), &["replay", "--manifest", manifest.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(dir.path().join("images/vertical-stripes-s0-tau2.png")).unwrap(),
        std::fs::read(dir.path().join("images/vertical-stripes-s0-tau2-replay.png")).unwrap()
    );

    let weights = dir.path().join("w.madw");
    let o = mad(dir.path(), &["train", "--steps", "2", "--output", weights.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = mad(
        dir.path(),
        &["replay", "--manifest", manifest.to_str().unwrap(), "--weights", weights.to_str().unwrap()],
    );
    assert_eq!(code(&o), 1);
}
