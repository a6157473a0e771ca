use std::fs;

use halluc::container::Container;
use halluc::data::{read_image, DatasetHandle, ImageTensor, PairMix, ScaleFactor, ValueRange};
use halluc::discriminator::DiscriminatorConfig;
use halluc::generator::{Generator, GeneratorConfig};
use halluc::training::{
    hallucinate, load_checkpoint, resume, save_checkpoint, train, Checkpoint, TrainConfig, Trainer, LOG_FILE,
};
use halluc::Error;

fn small(steps: u64, lr_size: usize, channels: usize) -> TrainConfig {
    let generator = GeneratorConfig {
        lr_size,
        scale_factor: ScaleFactor::X4,
        base_channels: channels,
        residual_blocks_per_stage: 1,
        blocks_between_upsamples: 1,
    };
    TrainConfig {
        steps,
        batch_size: 8,
        pair_mix: PairMix::even(8),
        seed: 3,
        discriminator: DiscriminatorConfig {
            hr_size: generator.hr_size(),
            num_scales: 2,
            base_channels: 4,
            leaky_slope: 0.2,
        },
        generator,
        ..TrainConfig::default()
    }
}

fn corpus(size: usize) -> DatasetHandle {
    DatasetHandle::synthetic(4, 3, size, ScaleFactor::X4, 12).unwrap()
}

#[test]
fn zero_steps_writes_initial_state() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(0, 4, 4);
    let ckpt = train(cfg.clone(), &corpus(16), dir.path()).unwrap();
    assert_eq!(ckpt.step, 0);
    assert!(ckpt.history.is_empty());
    let (gs, _) = cfg.init_seeds();
    assert_eq!(ckpt.generator, Generator::new(&cfg.generator, gs).unwrap());
    let log = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert!(log.starts_with("step,perceptual_shallow,perceptual_deep,color_0,afvl_g,afvl_d,total,wall_ms"));
    assert_eq!(load_checkpoint(&dir.path().join("final.ckpt")).unwrap(), ckpt);
}

#[test]
fn perceptual_loss_falls() {
    let mut cfg = small(200, 8, 8);
    cfg.optimizer.lr_g = 1e-3;
    let mut t = Trainer::new(cfg, corpus(32)).unwrap();
    let recs: Vec<_> = (0..200).map(|_| t.step().unwrap()).collect();
    let mean = |r: &[halluc::training::StepRecord]| r.iter().map(|x| x.perceptual[0]).sum::<f64>() / r.len() as f64;
    let (first, last) = (mean(&recs[..20]), mean(&recs[180..]));
    assert!(last < 0.7 * first, "perceptual {first} -> {last}");
    for r in &recs {
        let again = r.recomputed_total(&t.config().loss_weights).unwrap();
        assert!((again - r.total).abs() <= 1e-4 * r.total.abs().max(1.0));
    }
}

#[test]
fn checkpoint_roundtrip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(small(3, 4, 4), corpus(16)).unwrap();
    for _ in 0..3 {
        t.step().unwrap();
    }
    let path = dir.path().join("a.ckpt");
    save_checkpoint(t.state(), &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(&back, t.state());
    assert_eq!(back.history.len(), 3);

    let bytes = fs::read(&path).unwrap();
    let cut = dir.path().join("cut.ckpt");
    fs::write(&cut, &bytes[..bytes.len() - 7]).unwrap();
    assert!(matches!(load_checkpoint(&cut), Err(Error::Integrity(_))));
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x10;
    fs::write(&cut, &flipped).unwrap();
    assert!(matches!(load_checkpoint(&cut), Err(Error::Integrity(_))));

    let mut c = Container::from_bytes(&bytes).unwrap();
    c.blocks.retain(|(n, _)| !n.starts_with("opt/gen/m/"));
    assert!(matches!(Checkpoint::from_container(&c), Err(Error::Integrity(_))));
}

#[test]
fn resume_matches_uninterrupted_run_and_log() {
    let ds = corpus(16);
    let full_dir = tempfile::tempdir().unwrap();
    let full = train(small(6, 4, 4), &ds, full_dir.path()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(3, 4, 4);
    cfg.checkpoint_every = 3;
    train(cfg.clone(), &ds, dir.path()).unwrap();
    let mid = load_checkpoint(&dir.path().join("ckpt_000003.ckpt")).unwrap();
    cfg.steps = 6;
    let done = resume(mid.clone(), &cfg, &ds, dir.path()).unwrap();
    assert_eq!(done.generator, full.generator);
    assert_eq!(done.discriminator, full.discriminator);
    assert_eq!(done.history, full.history);

    let strip = |s: String| -> Vec<String> {
        s.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
    };
    let a = strip(fs::read_to_string(full_dir.path().join(LOG_FILE)).unwrap());
    let b = strip(fs::read_to_string(dir.path().join(LOG_FILE)).unwrap());
    assert_eq!(a, b);

    let mut other = cfg.clone();
    other.loss_weights.lambda_a = 0.5;
    assert!(matches!(resume(mid, &other, &ds, dir.path()), Err(Error::Config(_))));
}

#[test]
fn non_finite_parameters_abort() {
    let mut t = Trainer::new(small(2, 4, 4), corpus(16)).unwrap();
    let mut state = t.state().clone();
    let id = halluc::tensor::ParamId(0);
    state.generator.params_mut().value_mut(id).data_mut()[0] = f32::NAN;
    t = Trainer::from_checkpoint(state, corpus(16)).unwrap();
    match t.step() {
        Err(Error::NonFinite { step, .. }) => assert_eq!(step, 1),
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn hallucinate_16_to_128() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GeneratorConfig { base_channels: 4, ..GeneratorConfig::default() };
    let gen = Generator::new(&cfg, 1).unwrap();
    let lr = ImageTensor::constant(16, 16, 0.4, ValueRange::Unit).unwrap();
    let written = hallucinate(&gen, &[("face".into(), lr)], dir.path()).unwrap();
    assert_eq!(written, vec![dir.path().join("face.png")]);
    let img = read_image(&written[0]).unwrap();
    assert_eq!((img.height(), img.width()), (128, 128));

    let wrong = ImageTensor::constant(8, 8, 0.4, ValueRange::Unit).unwrap();
    assert!(matches!(hallucinate(&gen, &[("x".into(), wrong)], dir.path()), Err(Error::Size(_))));
}
