use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wavegen::data::{generate_range, LabelMap, ShapesWorldSpec};
use wavegen::eval::{miou, oracle_segment, radial_profile, spectrum_distance, ConfusionMatrix, Oracle, OracleMode};
use wavegen::Tensor;

fn images(n: usize, seed: u64) -> Vec<Tensor> {
    let spec = ShapesWorldSpec::new(3, 32, 32, seed).unwrap();
    generate_range(&spec, 0, n).into_iter().map(|(_, x)| x).collect()
}

/// 3×3 box blur with clamped borders.
fn blur(img: &Tensor) -> Tensor {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    Tensor::from_fn(img.shape(), |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        let mut acc = 0.0;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                acc += img.data()[c * h * w + yy * w + xx];
            }
        }
        acc / 9.0
    })
}

#[test]
fn blur_shows_up_in_the_high_frequencies() {
    let real = images(16, 1);
    let blurred: Vec<Tensor> = real.iter().map(blur).collect();
    let (a, b) = (radial_profile(&real).unwrap(), radial_profile(&blurred).unwrap());
    let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).collect();
    let k = diff.len();
    let low: f64 = diff[..k / 4].iter().sum();
    let high: f64 = diff[k / 2..].iter().sum();
    assert!(high > 10.0 * low, "low {low} high {high}");
    // blurring removes high-frequency power
    assert!(b[k - 2] < a[k - 2]);
    assert!(spectrum_distance(&real, &blurred).unwrap() > 0.0);
}

#[test]
fn spectrum_distance_properties() {
    let a = images(6, 2);
    let b = images(6, 3);
    assert_eq!(spectrum_distance(&a, &a).unwrap(), 0.0);
    let ab = spectrum_distance(&a, &b).unwrap();
    assert_eq!(ab, spectrum_distance(&b, &a).unwrap());
    // duplicating every image leaves the averaged profile alone
    let doubled: Vec<Tensor> = a.iter().chain(&a).cloned().collect();
    assert!((spectrum_distance(&doubled, &b).unwrap() - ab).abs() <= 1e-12 * ab.max(1.0));
    // set order does not matter
    let rev: Vec<Tensor> = a.iter().rev().cloned().collect();
    assert!((spectrum_distance(&rev, &b).unwrap() - ab).abs() <= 1e-12 * ab.max(1.0));
    assert!(spectrum_distance(&a, &[Tensor::zeros(&[3, 16, 16])]).is_err());
}

fn random_map(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> LabelMap {
    LabelMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..c) as u8).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn miou_is_invariant_to_class_relabelling(c in 2usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_map(6, 7, c, &mut rng);
        let pred = random_map(6, 7, c, &mut rng);
        let mut perm: Vec<u8> = (0..c as u8).collect();
        for i in (1..c).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let relabel = |m: &LabelMap| LabelMap::new(6, 7, m.ids().iter().map(|&i| perm[i as usize]).collect()).unwrap();
        let (m0, cm0) = miou(&pred, &gt, c).unwrap();
        let (m1, cm1) = miou(&relabel(&pred), &relabel(&gt), c).unwrap();
        prop_assert!((m0 - m1).abs() < 1e-12);
        for k in 0..c {
            prop_assert_eq!(cm0.iou(k), cm1.iou(perm[k] as usize));
        }
        prop_assert!((0.0..=1.0).contains(&m0));
    }

    #[test]
    fn confusion_matrix_accumulates(c in 2usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs: Vec<_> = (0..3).map(|_| (random_map(4, 4, c, &mut rng), random_map(4, 4, c, &mut rng))).collect();
        let mut cm = ConfusionMatrix::new(c);
        for (p, g) in &pairs {
            cm.add(p, g).unwrap();
        }
        prop_assert_eq!(cm.total(), 48);
        let correct: usize = pairs.iter().map(|(p, g)| p.ids().iter().zip(g.ids()).filter(|(a, b)| a == b).count()).sum();
        prop_assert!((cm.pixel_accuracy() - correct as f64 / 48.0).abs() < 1e-12);
    }
}

#[test]
fn color_oracle_reads_clean_renders() {
    let spec = ShapesWorldSpec::new(4, 32, 32, 9).unwrap();
    let oracle = Oracle::new(OracleMode::Color, &spec, 0).unwrap();
    let mut cm = ConfusionMatrix::new(4);
    for (m, x) in generate_range(&spec, 0, 16) {
        cm.add(&oracle_segment(&x, &oracle).unwrap(), &m).unwrap();
    }
    assert!(cm.miou() > 0.9, "color oracle mIoU {}", cm.miou());
}

#[test]
fn unet_oracle_segments_held_out_renders() {
    let spec = ShapesWorldSpec::new(4, 32, 32, 9).unwrap();
    let oracle = Oracle::new(OracleMode::UNet, &spec, 0).unwrap();
    let mut cm = ConfusionMatrix::new(4);
    for (m, x) in generate_range(&spec, 0, 32) {
        cm.add(&oracle_segment(&x, &oracle).unwrap(), &m).unwrap();
    }
    assert!(cm.miou() > 0.9, "UNet oracle mIoU {}", cm.miou());
}
