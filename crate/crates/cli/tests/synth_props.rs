use gleason_cli::synth::{
    cribriform_set, generate, generate_slide, patch_set, percentage_vectors, ScoreClass,
    SynthSpec,
};
use gleason_core::patchwork::{tile_slide, tissue_mask, TileConfig, UNANNOTATED};
use gleason_core::Grade;

fn spec(h: usize, w: usize, seed: u64) -> SynthSpec {
    SynthSpec {
        slide_height: h,
        slide_width: w,
        seed,
        ..SynthSpec::default()
    }
}

#[test]
fn regenerating_a_slide_is_bit_identical() {
    let spec = spec(192, 160, 11);
    let a = generate_slide(&spec, ScoreClass::G4Plus5, 1).unwrap();
    let b = generate_slide(&spec, ScoreClass::G4Plus5, 1).unwrap();
    assert_eq!(a.slide.image, b.slide.image);
    assert_eq!(a.slide.annotation, b.slide.annotation);
    assert_eq!(a.slide.cribriform, b.slide.cribriform);
    assert_eq!(a.grade_areas, b.grade_areas);

    // and the on-disk bundles match byte for byte
    let dir = tempfile::tempdir().unwrap();
    a.slide.save_dir(&dir.path().join("a")).unwrap();
    b.slide.save_dir(&dir.path().join("b")).unwrap();
    for file in ["image.png", "annotation.png", "cribriform.png", "meta.json"] {
        let x = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let y = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(x, y, "{file} differs between identical generations");
    }
}

#[test]
fn different_seeds_paint_different_pixels() {
    let a = generate_slide(&spec(128, 128, 1), ScoreClass::G3Plus3, 0).unwrap();
    let b = generate_slide(&spec(128, 128, 2), ScoreClass::G3Plus3, 0).unwrap();
    assert_ne!(a.slide.image, b.slide.image);
}

#[test]
fn painted_areas_respect_the_declared_score() {
    let spec = spec(256, 256, 5);

    let s34 = generate_slide(&spec, ScoreClass::G3Plus4, 0).unwrap();
    assert!(s34.grade_areas[Grade::Gg3.index()] > 0);
    assert!(s34.grade_areas[Grade::Gg4.index()] > 0);
    assert!(
        s34.grade_areas[Grade::Gg3.index()] > s34.grade_areas[Grade::Gg4.index()],
        "a 3+4 slide must hold more grade-3 than grade-4 tissue: {:?}",
        s34.grade_areas
    );

    let s43 = generate_slide(&spec, ScoreClass::G4Plus3, 0).unwrap();
    assert!(
        s43.grade_areas[Grade::Gg4.index()] > s43.grade_areas[Grade::Gg3.index()],
        "a 4+3 slide must hold more grade-4 than grade-3 tissue: {:?}",
        s43.grade_areas
    );

    let s44 = generate_slide(&spec, ScoreClass::G4Plus4, 0).unwrap();
    assert!(s44.grade_areas[Grade::Gg4.index()] > 0);
    assert_eq!(s44.grade_areas[Grade::Gg3.index()], 0);
    assert_eq!(s44.grade_areas[Grade::Gg5.index()], 0);

    let benign = generate_slide(&spec, ScoreClass::Benign, 0).unwrap();
    assert!(benign.grade_areas[Grade::Nc.index()] > 0);
    assert_eq!(benign.grade_areas[1..], [0, 0, 0]);
    assert!(
        benign.slide.annotation.iter().all(|&a| a == UNANNOTATED),
        "benign slides carry no annotation"
    );
    assert_eq!(benign.slide.score.as_ref().unwrap().combined, 0);
}

#[test]
fn cancer_slides_annotate_exactly_the_painted_tissue() {
    let s = generate_slide(&spec(224, 224, 3), ScoreClass::G4Plus4, 0).unwrap();
    for ((y, x), &truth) in s.tissue_truth.indexed_iter() {
        let annotated = s.slide.annotation[[y, x]] != UNANNOTATED;
        assert_eq!(
            annotated, truth,
            "annotation and painted tissue disagree at ({y}, {x})"
        );
    }
    // cribriform lumina are bright holes: inside the gland mask they are
    // neither tissue nor annotated, and the walls around them are flagged
    let crib_pixels: usize = s.slide.cribriform.iter().map(|&c| c as usize).count();
    assert!(crib_pixels > 0);
}

#[test]
fn the_tissue_mask_recovers_the_painted_tissue() {
    for class in [ScoreClass::Benign, ScoreClass::G4Plus5] {
        let s = generate_slide(&spec(256, 256, 9), class, 0).unwrap();
        let mask = tissue_mask(&s.slide.image).unwrap();
        let total = mask.len();
        let agree = mask
            .iter()
            .zip(s.tissue_truth.iter())
            .filter(|(a, b)| a == b)
            .count();
        let rate = agree as f64 / total as f64;
        assert!(
            rate >= 0.99,
            "{class:?}: tissue mask agrees with painted tissue on only {rate:.4} of pixels"
        );
    }
}

#[test]
fn tiled_label_shares_track_the_painted_areas() {
    let s = generate_slide(&spec(640, 640, 21), ScoreClass::G3Plus4, 0).unwrap();
    let cfg = TileConfig {
        patch_size: 64,
        overlap: 0.5,
        min_tissue: 0.5,
    };
    let patches = tile_slide(&s.slide, &cfg).unwrap();
    let gg3 = patches.iter().filter(|p| p.label == Grade::Gg3).count();
    let gg4 = patches.iter().filter(|p| p.label == Grade::Gg4).count();
    assert!(gg3 > 0 && gg4 > 0);

    let patch_share = gg3 as f64 / (gg3 + gg4) as f64;
    let a3 = s.grade_areas[Grade::Gg3.index()] as f64;
    let a4 = s.grade_areas[Grade::Gg4.index()] as f64;
    let area_share = a3 / (a3 + a4);
    assert!(
        (patch_share - area_share).abs() <= 0.10,
        "grade-3 patch share {patch_share:.3} strays from painted area share {area_share:.3}"
    );
}

#[test]
fn the_corpus_covers_every_class_with_unique_ids() {
    let mut spec = spec(96, 96, 2);
    spec.slides_per_class = 2;
    let slides = generate(&spec).unwrap();
    assert_eq!(slides.len(), 14);
    let mut ids: Vec<&str> = slides.iter().map(|s| s.slide.slide_id.as_str()).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 14, "slide ids must be unique");
    for class in ScoreClass::ALL {
        assert_eq!(slides.iter().filter(|s| s.class == class).count(), 2);
    }
    // one patient per slide: folds can separate patients cleanly
    let mut patients: Vec<&str> = slides.iter().map(|s| s.slide.patient_id.as_str()).collect();
    patients.sort();
    patients.dedup();
    assert_eq!(patients.len(), 14);
}

#[test]
fn score_classes_pair_grades_and_scores_consistently() {
    for class in ScoreClass::ALL {
        let score = class.score();
        match class.grades() {
            None => assert_eq!(score.combined, 0),
            Some((p, s)) => {
                assert_eq!(score.primary, p);
                assert_eq!(score.secondary, s);
                assert_eq!(score.combined, p.number() + s.number());
            }
        }
    }
    let mut slugs: Vec<&str> = ScoreClass::ALL.iter().map(|c| c.slug()).collect();
    slugs.sort();
    slugs.dedup();
    assert_eq!(slugs.len(), 7);
}

#[test]
fn patch_sets_are_balanced_and_deterministic() {
    let a = patch_set(6, 32, 77);
    let b = patch_set(6, 32, 77);
    assert_eq!(a.len(), 24);
    for grade in Grade::ALL {
        assert_eq!(a.iter().filter(|p| p.label == grade).count(), 6);
    }
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.pixels, y.pixels);
        assert_eq!(x.label, y.label);
    }

    let crib = cribriform_set(5, 32, 77);
    assert_eq!(crib.len(), 10);
    assert!(crib.iter().all(|p| p.label == Grade::Gg4));
    assert_eq!(crib.iter().filter(|p| p.cribriform).count(), 5);
}

#[test]
fn percentage_vectors_are_distributions() {
    let vs = percentage_vectors(40, 123);
    assert_eq!(vs.len(), 40);
    for v in &vs {
        let arr = v.as_array();
        assert!(arr.iter().all(|&p| (0.0..=1.0).contains(&p)));
        let sum: f64 = arr.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9, "percentages must sum to one, got {sum}");
    }
    // deterministic and seed-sensitive
    assert_eq!(percentage_vectors(40, 123)[7].as_array(), vs[7].as_array());
    assert_ne!(percentage_vectors(40, 124)[7].as_array(), vs[7].as_array());
}
