mod common;

use gilab_core::nnmodels::{
    classification_loss, classify, generate, pretrain_generator, project_latents, ArchId, Generator, GeneratorConfig,
    PretrainOptions, TargetModel,
};
use gilab_core::{ImageShape, LabelBatch, LatentBatch};
use rand_distr::{Distribution, StandardNormal};

fn conv(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k + cout
}

fn block(cin: usize, cout: usize, stride: usize) -> usize {
    let shortcut = if stride != 1 || cin != cout { conv(cin, cout, 1) } else { 0 };
    conv(cin, cout, 3) + conv(cout, cout, 3) + shortcut
}

/// Parameter counts written out layer by layer.
fn expected_count(arch: ArchId, shape: ImageShape, classes: usize) -> usize {
    let c = shape.channels;
    match arch {
        ArchId::ConvSmall => conv(c, 16, 3) + conv(16, 32, 3) + 32 * classes + classes,
        ArchId::ResnetLite => conv(c, 16, 3) + block(16, 16, 1) + block(16, 32, 2) + 32 * classes + classes,
        ArchId::Resnet18 => {
            let mut n = conv(c, 64, 3);
            let mut cin = 64;
            for (stage, w) in [64, 128, 256, 512].into_iter().enumerate() {
                n += block(cin, w, if stage > 0 { 2 } else { 1 }) + block(w, w, 1);
                cin = w;
            }
            n + 512 * classes + classes
        }
        ArchId::Linear => shape.len() * classes,
    }
}

#[test]
fn parameter_counts_match_the_architecture_table() {
    let cases = [
        (ArchId::ConvSmall, ImageShape::new(3, 8, 8), 4, 5220),
        (ArchId::ConvSmall, ImageShape::new(1, 16, 12), 10, 0),
        (ArchId::ResnetLite, ImageShape::new(3, 8, 8), 4, 19652),
        (ArchId::ResnetLite, ImageShape::new(3, 32, 32), 10, 0),
        (ArchId::Resnet18, ImageShape::new(3, 32, 32), 10, 0),
        (ArchId::Linear, ImageShape::new(1, 1, 1), 2, 2),
        (ArchId::Linear, ImageShape::new(3, 8, 8), 4, 768),
    ];
    for (arch, shape, classes, literal) in cases {
        let model = TargetModel::build(arch, shape, classes, 3).unwrap();
        let want = expected_count(arch, shape, classes);
        assert_eq!(model.num_parameters(), want, "{arch} {shape}");
        assert_eq!(model.flat_parameters().len(), want);
        if literal > 0 {
            assert_eq!(want, literal);
        }
    }
}

#[test]
fn parameter_order_is_stable() {
    let shape = ImageShape::new(3, 8, 8);
    let a = TargetModel::build(ArchId::ResnetLite, shape, 4, 9).unwrap();
    let b = TargetModel::build(ArchId::ResnetLite, shape, 4, 9).unwrap();
    let names: Vec<_> = a.parameters().iter().map(|p| p.name.clone()).collect();
    assert_eq!(names.first().map(String::as_str), Some("stem.weight"));
    assert_eq!(names.last().map(String::as_str), Some("fc.bias"));
    assert_eq!(a.flat_parameters(), b.flat_parameters());
    let c = TargetModel::build(ArchId::ResnetLite, shape, 4, 10).unwrap();
    assert_ne!(a.flat_parameters(), c.flat_parameters());
}

#[test]
fn resnet18_takes_32px_images_to_10_logits() {
    let shape = ImageShape::new(3, 32, 32);
    let model = TargetModel::build(ArchId::Resnet18, shape, 10, 1).unwrap();
    let x = common::random_batch(shape, 1, 0);
    let logits = classify(&model, &x).unwrap();
    assert_eq!(logits.dims, vec![1, 10]);
    assert!(logits.data.iter().all(|v| v.is_finite()));
    assert!("resnet50".parse::<ArchId>().is_err());
}

#[test]
fn classify_is_deterministic_and_batched() {
    let shape = ImageShape::new(3, 8, 8);
    let model = TargetModel::build(ArchId::ConvSmall, shape, 4, 7).unwrap();
    let x = common::random_batch(shape, 3, 1);
    let a = classify(&model, &x).unwrap();
    let b = classify(&model, &x).unwrap();
    assert_eq!(a.dims, vec![3, 4]);
    assert_eq!(a.data, b.data);
    let loss = classification_loss(&a, &LabelBatch(vec![0, 1, 3])).unwrap();
    assert!(loss > 0.0);
    assert!(classification_loss(&a, &LabelBatch(vec![0, 1, 4])).is_err());
}

#[test]
fn generator_output_stays_in_unit_range() {
    let shape = ImageShape::new(3, 8, 8);
    let g = Generator::new(GeneratorConfig::default(), shape).unwrap();
    let mut r = common::rng(2);
    // wide latents push the output nonlinearity hard
    let z: Vec<f64> = (0..1000 * 64)
        .map(|_| 5.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r))
        .collect();
    let x = generate(&g, &LatentBatch::new(1000, 64, z).unwrap()).unwrap();
    assert_eq!(x.batch(), 1000);
    assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn pretraining_makes_training_images_reachable() {
    let shape = ImageShape::new(3, 8, 8);
    let data = common::toy_images(16, shape, 4);
    let g = Generator::new(GeneratorConfig::default(), shape).unwrap();
    let report = g
        .fit(
            &data,
            &PretrainOptions {
                epochs: 400,
                ..PretrainOptions::default()
            },
        )
        .unwrap();
    assert!(report.generator.is_trained());
    assert!(report.final_mse < report.initial_mse);

    // oracle: fit a fresh latent to one training image by direct pixel loss
    let target = data.select(&[3]).unwrap();
    let init = gilab_core::attack::init_latents(1, 64, gilab_core::attack::InitKind::Randn, 11).unwrap();
    let z = project_latents(&report.generator, &target, init, 1500, 0.05).unwrap();
    let x = generate(&report.generator, &z).unwrap();
    let psnr = gilab_core::metrics::psnr(x.data(), target.data(), 1.0).unwrap();
    assert!(psnr >= 25.0, "projected PSNR {psnr}");

    let same = pretrain_generator(&g, &data, 0, 0).unwrap();
    assert_eq!(same.weights(), g.weights());
}
