use std::path::Path;

use gleason_cli::config::PipelineConfig;
use gleason_cli::pipeline::{
    run_all, run_predict, run_synth, run_tile, run_train_grader, Paths,
};
use gleason_core::scorer::ScoringMethod;
use gleason_core::Error;

/// A configuration small enough that the whole pipeline runs in seconds.
fn tiny_config(root: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.run_dir = root.to_path_buf();
    cfg.synth.slide_height = 256;
    cfg.synth.slide_width = 256;
    cfg.patch_size = 128;
    cfg.input_side = 32;
    cfg.n_folds = 2;
    cfg.grader.epochs = 1;
    cfg.grader.batch_size = 8;
    cfg.cribriform.epochs = 1;
    cfg.scorer.epochs = 150;
    cfg.scorer_vectors = 60;
    cfg.am_steps = 6;
    cfg.am_filters = 1;
    cfg
}

fn test_slide_ids(paths: &Paths) -> Vec<String> {
    let mut ids: Vec<String> = std::fs::read_dir(paths.predictions_dir())
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("slide-") && n.ends_with(".json"))
        .map(|n| n.trim_end_matches(".json").to_string())
        .collect();
    ids.sort();
    ids
}

#[test]
fn the_pipeline_runs_end_to_end_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let paths = Paths::new(dir.path());

    run_synth(&cfg).unwrap();
    run_all(&cfg).unwrap();

    // -- every contract artifact exists and parses ------------------------
    let metrics: serde_json::Value =
        serde_json::from_slice(&std::fs::read(paths.metrics()).unwrap()).unwrap();
    let accuracy = metrics["patch"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&accuracy));
    assert!(metrics["threshold"]["agreement"].is_number());
    assert!(metrics["mlp"]["slides"].as_array().unwrap().len() >= 2);

    let confusion = std::fs::read_to_string(paths.confusion()).unwrap();
    assert!(confusion.contains("NC") && confusion.contains("GG5"));

    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(paths.manifest()).unwrap()).unwrap();
    for stage in [
        "synth",
        "tile",
        "train-grader",
        "train-cribriform",
        "predict",
        "reconstruct",
        "percentages",
        "train-scorer",
        "score",
        "evaluate",
        "explain-cam",
        "explain-am",
    ] {
        let entry = &manifest["stages"][stage];
        assert!(entry["seed"].is_u64(), "manifest lacks stage {stage}");
        assert!(!entry["outputs"].as_array().unwrap().is_empty());
    }

    let ids = test_slide_ids(&paths);
    assert!(ids.len() >= 2, "the held-out fold should hold several slides");
    for id in &ids {
        assert!(paths.maps_dir(id).join("classmap.png").exists());
        assert!(paths.percentages(id).exists());
        assert!(paths.score(id, ScoringMethod::Threshold).exists());
        assert!(paths.score(id, ScoringMethod::Mlp).exists());
    }
    for curve in ["grader.csv", "cribriform.csv", "scorer.csv"] {
        let text = std::fs::read_to_string(paths.history_dir().join(curve)).unwrap();
        assert!(text.starts_with("epoch,loss"), "{curve} lacks a header");
    }
    let explain: Vec<String> = std::fs::read_dir(paths.explain_dir())
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    assert!(explain.iter().any(|n| n.starts_with("cam_") && n.ends_with(".png")));
    assert!(explain.contains(&"am_conv3_f0.png".to_string()));
    assert!(explain.contains(&"am_conv3_f0.csv".to_string()));

    // -- rerunning every stage in place changes nothing -------------------
    let snapshot = |paths: &Paths, ids: &[String]| -> Vec<(String, Vec<u8>)> {
        let mut files = vec![
            paths.metrics(),
            paths.confusion(),
            paths.manifest(),
            paths.grader_model(),
            paths.cribriform_model(),
            paths.scorer_model(),
        ];
        for id in ids {
            files.push(paths.maps_dir(id).join("classmap.png"));
            files.push(paths.score(id, ScoringMethod::Threshold));
            files.push(paths.score(id, ScoringMethod::Mlp));
        }
        files
            .into_iter()
            .map(|p| (p.display().to_string(), std::fs::read(&p).unwrap()))
            .collect()
    };
    let before = snapshot(&paths, &ids);
    run_all(&cfg).unwrap();
    let after = snapshot(&paths, &ids);
    for ((name, a), (_, b)) in before.iter().zip(&after) {
        assert_eq!(a, b, "{name} changed across identical reruns");
    }
}

#[test]
fn a_missing_model_names_the_stage_that_builds_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let paths = Paths::new(dir.path());

    run_synth(&cfg).unwrap();
    run_tile(&cfg).unwrap();

    // predict before any training: the grader is the missing dependency
    match run_predict(&cfg) {
        Err(Error::MissingArtifact { stage, missing, produced_by }) => {
            assert_eq!(stage, "predict");
            assert_eq!(produced_by, "train-grader");
            assert_eq!(missing, paths.grader_model());
        }
        other => panic!("expected a missing-artifact error, got {other:?}"),
    }

    // training repairs the dependency and predict proceeds past it
    run_train_grader(&cfg).unwrap();
    match run_predict(&cfg) {
        Err(Error::MissingArtifact { produced_by, .. }) => {
            assert_eq!(produced_by, "train-cribriform");
        }
        other => panic!("expected the cribriform model to be missing, got {other:?}"),
    }
}

#[test]
fn retraining_from_disk_reproduces_the_model_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let paths = Paths::new(dir.path());

    run_synth(&cfg).unwrap();
    run_tile(&cfg).unwrap();
    run_train_grader(&cfg).unwrap();
    let first = std::fs::read(paths.grader_model()).unwrap();

    std::fs::remove_file(paths.grader_model()).unwrap();
    run_train_grader(&cfg).unwrap();
    let second = std::fs::read(paths.grader_model()).unwrap();
    assert_eq!(first, second, "retraining from on-disk patches must reproduce the model");
}

#[test]
fn training_refuses_a_fold_layout_without_held_out_patients() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let paths = Paths::new(dir.path());

    run_synth(&cfg).unwrap();
    run_tile(&cfg).unwrap();

    // every patient in the test fold: nothing left to train on
    let mut folds: serde_json::Value =
        serde_json::from_slice(&std::fs::read(paths.folds()).unwrap()).unwrap();
    let map = folds["map"].as_object_mut().unwrap();
    let patients: Vec<String> = map.keys().cloned().collect();
    for p in &patients {
        map[p] = serde_json::json!(cfg.test_fold);
    }
    std::fs::write(paths.folds(), serde_json::to_string(&folds).unwrap()).unwrap();
    match run_train_grader(&cfg) {
        Err(Error::Invalid(msg)) => assert!(
            msg.contains("does not split"),
            "unexpected message: {msg}"
        ),
        other => panic!("expected an invalid-fold error, got {other:?}"),
    }

    // a patient absent from the assignment is named
    let dropped = patients[0].clone();
    map_remove(&paths, &dropped);
    match run_train_grader(&cfg) {
        Err(Error::Invalid(msg)) => assert!(
            msg.contains(&dropped) && msg.contains("no fold assignment"),
            "unexpected message: {msg}"
        ),
        other => panic!("expected a missing-patient error, got {other:?}"),
    }
}

fn map_remove(paths: &Paths, patient: &str) {
    let mut folds: serde_json::Value =
        serde_json::from_slice(&std::fs::read(paths.folds()).unwrap()).unwrap();
    let map = folds["map"].as_object_mut().unwrap();
    map.remove(patient);
    // put the rest back into a plausible two-fold layout
    for (i, key) in map.keys().cloned().collect::<Vec<_>>().iter().enumerate() {
        map[key] = serde_json::json!(i % 2);
    }
    std::fs::write(paths.folds(), serde_json::to_string(&folds).unwrap()).unwrap();
}
