use criterion::{black_box, criterion_group, criterion_main, Criterion};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gleason_core::fsconv::{build_fsconv, TopModelKind};
use gleason_core::metrics::quadratic_kappa;
use gleason_core::metrics::ConfusionMatrix;
use gleason_core::nn::ForwardMode;
use gleason_core::patchwork::{histogram_match, tissue_mask};
use gleason_core::reconstruct::{probability_map, PatchPrediction};
use gleason_core::tensor::{from_vec, Tensor};

fn random_input(side: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..side * side * 3).map(|_| rng.gen::<f32>()).collect();
    from_vec(&[side, side, 3], data).unwrap()
}

fn random_image(h: usize, w: usize, seed: u64) -> Array3<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn((h, w, 3), |_| rng.gen::<u8>())
}

fn conv_forward(c: &mut Criterion) {
    let net = build_fsconv(TopModelKind::Gmp, 4, 64, 7).unwrap();
    let input = random_input(64, 1);
    c.bench_function("fsconv_forward_64", |b| {
        b.iter(|| net.forward(black_box(&input), ForwardMode::Infer).unwrap())
    });
}

fn conv_forward_backward(c: &mut Criterion) {
    let net = build_fsconv(TopModelKind::Gmp, 4, 64, 7).unwrap();
    let input = random_input(64, 2);
    let upstream = from_vec(&[1usize, 4], vec![0.25f32, -0.5, 0.75, -0.5]).unwrap();
    c.bench_function("fsconv_forward_backward_64", |b| {
        b.iter(|| {
            let trace = net.forward(black_box(&input), ForwardMode::Infer).unwrap();
            net.backward_from(&trace, net.logits_layer(), black_box(&upstream))
                .unwrap()
        })
    });
}

fn tissue_masking(c: &mut Criterion) {
    let image = random_image(512, 512, 3);
    c.bench_function("tissue_mask_512", |b| {
        b.iter(|| tissue_mask(black_box(&image)).unwrap())
    });
}

fn stain_matching(c: &mut Criterion) {
    let source = random_image(256, 256, 4);
    let reference = random_image(256, 256, 5);
    c.bench_function("histogram_match_256", |b| {
        b.iter(|| histogram_match(black_box(&source), black_box(&reference)))
    });
}

fn map_interpolation(c: &mut Criterion) {
    // a 7x7 grid of patch centers over a 256-pixel slide, full tissue
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut predictions = Vec::new();
    for gy in 0..7 {
        for gx in 0..7 {
            let mut p = [0.0f64; 4];
            let mut sum = 0.0;
            for v in &mut p {
                *v = rng.gen::<f64>();
                sum += *v;
            }
            for v in &mut p {
                *v /= sum;
            }
            predictions
                .push(PatchPrediction::new((32 + gy * 32, 32 + gx * 32), p).unwrap());
        }
    }
    let tissue = Array2::from_elem((256, 256), true);
    c.bench_function("probability_map_256", |b| {
        b.iter(|| probability_map(black_box(&predictions), (256, 256), &tissue).unwrap())
    });
}

fn kappa(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let refs: Vec<usize> = (0..10_000).map(|_| rng.gen_range(0..4)).collect();
    let preds: Vec<usize> = refs
        .iter()
        .map(|&r| if rng.gen_bool(0.7) { r } else { rng.gen_range(0..4) })
        .collect();
    c.bench_function("quadratic_kappa_10k", |b| {
        b.iter(|| {
            let cm = ConfusionMatrix::from_labels(black_box(&refs), black_box(&preds), 4).unwrap();
            quadratic_kappa(&cm).unwrap()
        })
    });
}

criterion_group!(
    benches,
    conv_forward,
    conv_forward_backward,
    tissue_masking,
    stain_matching,
    map_interpolation,
    kappa
);
criterion_main!(benches);
