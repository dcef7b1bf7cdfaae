use std::path::Path;
use std::process::{Command, Output};

fn gleason(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gleason"));
    cmd.env_remove("GLEASON_CONFIG");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.args(args).output().expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TINY: &[&str] = &[
    "--slide-size",
    "192",
    "--patch-size",
    "96",
    "--input-side",
    "32",
    "--n-folds",
    "2",
    "--grader-epochs",
    "1",
    "--grader-batch",
    "8",
];

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(gleason(&["--help"], &[]).status.code(), Some(0));
    assert_eq!(gleason(&["--version"], &[]).status.code(), Some(0));
    assert_eq!(gleason(&["tile", "--help"], &[]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    let out = gleason(&["run-all", "--no-such-flag"], &[]);
    assert_eq!(out.status.code(), Some(1));

    let out = gleason(&["frobnicate"], &[]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn invalid_settings_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let rd = dir.path().to_str().unwrap();
    let out = gleason(&["score", "--run-dir", rd, "--threshold", "1.5"], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("threshold"));

    let out = gleason(&["tile", "--run-dir", rd, "--overlap", "1.0"], &[]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn a_missing_dependency_exits_two_and_names_its_stage() {
    let dir = tempfile::tempdir().unwrap();
    let rd = dir.path().to_str().unwrap();
    let mut args = vec!["synth", "--run-dir", rd];
    args.extend_from_slice(TINY);
    assert!(gleason(&args, &[]).status.success());

    let mut args = vec!["tile", "--run-dir", rd];
    args.extend_from_slice(TINY);
    assert!(gleason(&args, &[]).status.success());

    let mut args = vec!["predict", "--run-dir", rd];
    args.extend_from_slice(TINY);
    let out = gleason(&args, &[]);
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr(&out);
    assert!(msg.contains("train-grader"), "stderr was: {msg}");
}

#[test]
fn the_config_file_env_var_drives_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let run_a = dir.path().join("a");
    let run_b = dir.path().join("b");
    let cfg_path = dir.path().join("cfg.json");
    let cfg = serde_json::json!({
        "run_dir": run_a,
        "synth": { "slide_height": 128, "slide_width": 128 },
    });
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let env = [("GLEASON_CONFIG", cfg_path.to_str().unwrap())];

    assert!(gleason(&["synth"], &env).status.success());
    assert!(run_a.join("slides").join("slide-nc-00").join("image.png").exists());

    // flags outrank the file
    assert!(
        gleason(&["synth", "--run-dir", run_b.to_str().unwrap()], &env)
            .status
            .success()
    );
    assert!(run_b.join("slides").join("slide-nc-00").join("image.png").exists());

    // the generated corpora agree because the file's seed applied to both
    let a = std::fs::read(slide_png(&run_a)).unwrap();
    let b = std::fs::read(slide_png(&run_b)).unwrap();
    assert_eq!(a, b);
}

fn slide_png(run: &Path) -> std::path::PathBuf {
    run.join("slides").join("slide-4_4-01").join("image.png")
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, r#"{ "run_dri": "typo" }"#).unwrap();
    let out = gleason(&["synth", "--config", cfg_path.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("run_dri"), "stderr: {}", stderr(&out));
}

#[test]
fn stain_norm_writes_a_matched_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let rd = dir.path().to_str().unwrap();
    let mut args = vec!["synth", "--run-dir", rd];
    args.extend_from_slice(TINY);
    assert!(gleason(&args, &[]).status.success());

    let slides = dir.path().join("slides");
    let out_dir = dir.path().join("normed");
    let out = gleason(
        &[
            "stain-norm",
            slides.join("slide-5_5-00").to_str().unwrap(),
            slides.join("slide-nc-00").to_str().unwrap(),
            out_dir.to_str().unwrap(),
        ],
        &[],
    );
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(out_dir.join("slide-5_5-00").join("image.png").exists());
    assert!(out_dir.join("slide-5_5-00").join("annotation.png").exists());
}
