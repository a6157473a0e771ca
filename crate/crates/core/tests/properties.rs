use halluc::container::Container;
use halluc::data::{downsample_area, sample_pair, DatasetHandle, ImageTensor, PairKind, PairMix, ScaleFactor, ValueRange};
use halluc::discriminator::{Discriminator, DiscriminatorConfig};
use halluc::generator::MultiScaleOutput;
use halluc::losses::color_consistency_loss;
use halluc::metrics::{auc_from_scores, psnr, ssim};
use halluc::tensor::{pixel_shuffle, pixel_unshuffle, Tensor};
use halluc::training::TrainConfig;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn unit_image(size: usize, values: &[f32]) -> ImageTensor {
    ImageTensor::new(Tensor::new(&[1, 3, size, size], values.to_vec()).unwrap(), ValueRange::Unit).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn shuffle_roundtrip(n in 1usize..3, c in 1usize..4, r in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let len = n * c * r * r * h * w;
        let v: Vec<f64> = (0..len).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64).collect();
        let x = Tensor::new(&[n, c * r * r, h, w], v).unwrap();
        let y = pixel_shuffle(&x, r).unwrap();
        prop_assert_eq!(y.shape(), &[n, c, h * r, w * r]);
        prop_assert_eq!(pixel_unshuffle(&y, r).unwrap(), x);
    }

    #[test]
    fn even_mix_is_balanced(b in 1usize..200) {
        let m = PairMix::even(b);
        prop_assert_eq!(m.total(), b);
        let counts: Vec<usize> = PairKind::ALL.iter().map(|&k| m.count(k)).collect();
        prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn pairs_respect_their_kind(ids in 2usize..5, vars in 2usize..4, seed in any::<u64>()) {
        let ds = DatasetHandle::synthetic(ids, vars, 16, ScaleFactor::X4, seed % 1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for kind in PairKind::ALL {
            let p = sample_pair(&ds, kind, &mut rng).unwrap();
            let same_identity = p.left_identity == p.right_identity;
            prop_assert_eq!(same_identity, matches!(kind, PairKind::P1 | PairKind::P3));
            prop_assert_eq!(p.left_record == p.right_record, kind == PairKind::P1);
            prop_assert_eq!(p.target_class, kind.target());
            prop_assert_eq!(p.right_source.image().height(), if kind.is_generated() { 4 } else { 16 });
        }
    }

    #[test]
    fn discriminator_outputs_are_distributions(seed in any::<u64>(), amp in 0.1f32..20.0) {
        let cfg = DiscriminatorConfig { hr_size: 16, num_scales: 2, base_channels: 4, leaky_slope: 0.2 };
        let d: Discriminator = Discriminator::new(&cfg, seed).unwrap();
        let mut state = seed;
        let mut noise = |n: usize| -> Vec<f32> {
            (0..n).map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                amp * ((state >> 40) as f32 / (1u64 << 24) as f32 * 2.0 - 1.0)
            }).collect()
        };
        let scales = vec![
            Tensor::new(&[3, 6, 16, 16], noise(3 * 6 * 256)).unwrap(),
            Tensor::new(&[3, 6, 8, 8], noise(3 * 6 * 64)).unwrap(),
        ];
        for p in d.discriminate(&scales).unwrap() {
            prop_assert!((p.sum() - 1.0).abs() <= 1e-6);
            for k in 0..3 {
                prop_assert!(p.get(k) >= 0.0);
            }
        }
    }

    #[test]
    fn color_loss_is_nonnegative_and_zero_on_constants(g in 0.0f32..1.0, values in prop::collection::vec(0.0f32..1.0, 3 * 64)) {
        let flat = MultiScaleOutput::new(vec![
            ImageTensor::constant(4, 4, g, ValueRange::Unit).unwrap(),
            ImageTensor::constant(8, 8, g, ValueRange::Unit).unwrap(),
        ]).unwrap();
        for v in color_consistency_loss(&flat, 1.0, 5.0).unwrap() {
            prop_assert!(v.abs() < 1e-10);
        }
        let big = unit_image(8, &values);
        let small = downsample_area(&big, 2).unwrap();
        let ms = MultiScaleOutput::new(vec![small, big]).unwrap();
        for v in color_consistency_loss(&ms, 1.0, 5.0).unwrap() {
            prop_assert!(v >= 0.0);
        }
    }

    #[test]
    fn auc_is_a_complementary_probability(g in prop::collection::vec(-5.0f64..5.0, 1..30), i in prop::collection::vec(-5.0f64..5.0, 1..30)) {
        let a = auc_from_scores(&g, &i).unwrap();
        let b = auc_from_scores(&i, &g).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quality_metrics_are_symmetric(a in prop::collection::vec(0.0f32..1.0, 3 * 144), b in prop::collection::vec(0.0f32..1.0, 3 * 144)) {
        let (x, y) = (unit_image(12, &a), unit_image(12, &b));
        prop_assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
        let s = ssim(&x, &y).unwrap();
        prop_assert!((s - ssim(&y, &x).unwrap()).abs() < 1e-12);
        prop_assert!(s <= 1.0 + 1e-12);
        prop_assert_eq!(ssim(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn downsampling_preserves_the_mean(values in prop::collection::vec(0.0f32..1.0, 3 * 64), f in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let img = unit_image(8, &values);
        let lr = downsample_area(&img, f).unwrap();
        let mean = |t: &ImageTensor| t.tensor().data().iter().map(|&v| v as f64).sum::<f64>() / t.tensor().numel() as f64;
        prop_assert!((mean(&img) - mean(&lr)).abs() < 1e-6);
    }

    #[test]
    fn train_config_toml_roundtrip(steps in 0u64..100_000, seed in 0u64..=i64::MAX as u64, lr in 1e-6f64..1e-1, lambda_a in 0.0f64..1.0, clip in prop::option::of(0.1f64..100.0)) {
        let mut c = TrainConfig { steps, seed, grad_clip: clip, ..TrainConfig::default() };
        c.optimizer.lr_g = lr;
        c.loss_weights.lambda_a = lambda_a;
        let text = toml::to_string(&c).unwrap();
        let back: TrainConfig = toml::from_str(&text).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn container_bytes_roundtrip(vals in prop::collection::vec(-1e3f32..1e3, 1..40), table in prop::collection::vec(-1e9f64..1e9, 0..12), header in "[a-z =\"\n]{0,40}") {
        let n = vals.len();
        let c = Container {
            fingerprint: [7; 32],
            header,
            blocks: vec![("w".into(), Tensor::new(&[n], vals).unwrap())],
            table_cols: if table.is_empty() { 0 } else { 1 },
            table,
        };
        let bytes = c.to_bytes().unwrap();
        prop_assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
        prop_assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
