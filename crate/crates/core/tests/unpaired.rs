//! The segmenter only ever sees generated images, and the segmentation loss
//! depends on the input layout alone, never on any dataset image.

use wavegen::data::{self, one_hot_batch, ShapesWorldSpec, UnpairedSampler};
use wavegen::nn::{UNet, UNetConfig};
use wavegen::train::{stack_images, train_step, ModelBundle, TrainConfig};
use wavegen::losses::ClassWeights;
use wavegen::{Error, Tape, Tensor};

fn config() -> TrainConfig {
    let mut c = TrainConfig::for_world(3, 32, 32);
    c.generator.channels = vec![16, 8];
    c.generator.spade_hidden = 8;
    c.generator.z_dim = 4;
    c.discriminator.channels = vec![8, 16];
    c.segmenter.depth = 2;
    c.segmenter.base_channels = 4;
    c.batch = 4;
    c.loss.lambda = 256.0;
    c
}

#[test]
fn segmenter_refuses_real_images() {
    let net = UNet::<f32>::new(
        UNetConfig {
            num_classes: 3,
            depth: 2,
            base_channels: 4,
        },
        0,
    )
    .unwrap();
    let mut tape = Tape::new();
    let bound = net.params.bind(&mut tape, true);
    let real = tape.constant(Tensor::zeros(&[1, 3, 16, 16]));
    tape.mark_real(real);
    // Taint survives arbitrary processing.
    let scaled = tape.scale(real, 0.5).unwrap();
    let mixed = tape.add(scaled, real).unwrap();
    assert!(tape.is_tainted(mixed));
    assert!(matches!(net.forward(&mut tape, &bound, mixed), Err(Error::Unpaired(_))));

    let generated = tape.constant(Tensor::zeros(&[1, 3, 16, 16]));
    assert!(!tape.is_tainted(generated));
    assert!(net.forward(&mut tape, &bound, generated).is_ok());
}

#[test]
fn segmentation_path_is_independent_of_the_image_batch() {
    let cfg = config();
    let spec = ShapesWorldSpec::new(3, 32, 32, 4).unwrap();
    let pairs = data::generate_world(&spec, 8).unwrap();
    let masks: Vec<_> = pairs[..4].iter().map(|(m, _)| m).collect();
    let layout = one_hot_batch(&masks, 3).unwrap();
    let weights = ClassWeights::from_id_grids(masks.iter().map(|m| m.ids()), 3, 32 * 32).unwrap();

    // The paired renders of these very masks, unrelated renders, and noise.
    let paired = stack_images(&pairs[..4].iter().map(|(_, x)| x).collect::<Vec<_>>()).unwrap();
    let unrelated = stack_images(&pairs[4..].iter().map(|(_, x)| x).collect::<Vec<_>>()).unwrap();
    let noise = Tensor::from_fn(&[4, 3, 32, 32], |i| ((i * 7919) % 200) as f32 / 100.0 - 1.0);

    let base = ModelBundle::new(&cfg).unwrap();
    let mut runs = Vec::new();
    for images in [&paired, &unrelated, &noise] {
        let mut b = base.clone();
        let rec = train_step(&mut b, &layout, images, &weights, &cfg).unwrap();
        runs.push((rec, b));
    }
    let (first, b0) = &runs[0];
    for (rec, b) in &runs[1..] {
        assert_eq!(rec.loss_seg.to_bits(), first.loss_seg.to_bits());
        // S is trained by the segmentation loss only, so its update cannot
        // depend on which real images were drawn.
        assert_eq!(b.segmenter.params, b0.segmenter.params);
        assert_ne!(b.discriminator.params, b0.discriminator.params);
    }
}

#[test]
fn sampler_never_pairs_masks_with_their_renders() {
    let s = UnpairedSampler::new(64, 64, 8, 3).unwrap();
    for epoch in 0..20 {
        let (mi, ii) = s.epoch_order(epoch);
        assert_ne!(mi, ii);
        let same = mi.iter().zip(&ii).filter(|(a, b)| a == b).count();
        assert!(same < 8, "epoch {epoch} pairs {same} masks with their own renders");
    }
}
