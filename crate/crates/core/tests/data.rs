use std::collections::BTreeMap;
use std::fs;

use halluc::data::{
    center_crop, downsample_area, load_dataset, make_hr_lr_pair, prepare_batch, sample_pair, write_image,
    DatasetHandle, ImageTensor, PairKind, PairMix, ScaleFactor, ValueRange,
};
use halluc::tensor::Tensor;
use halluc::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn image(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> ImageTensor {
    let mut v = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                v.push(f(c, y, x));
            }
        }
    }
    ImageTensor::new(Tensor::new(&[1, 3, h, w], v).unwrap(), ValueRange::Unit).unwrap()
}

#[test]
fn checkerboard_averages_to_gray() {
    let board = image(16, 16, |_, y, x| ((x + y) % 2) as f32);
    let (hr, lr) = make_hr_lr_pair(&board, 16, ScaleFactor::X4).unwrap();
    assert_eq!(hr, board);
    assert!(lr.tensor().data().iter().all(|&v| v == 0.5));
    let lr8 = downsample_area(&board, 8).unwrap();
    assert_eq!(lr8.height(), 2);
    assert!(lr8.tensor().data().iter().all(|&v| v == 0.5));
}

#[test]
fn blocks_downsample_to_their_values() {
    let value = |c: usize, by: usize, bx: usize| (c * 16 + by * 4 + bx) as f32 / 64.0;
    let img = image(16, 16, |c, y, x| value(c, y / 4, x / 4));
    let lr = downsample_area(&img, 4).unwrap();
    for c in 0..3 {
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(lr.get(0, c, y, x), value(c, y, x));
            }
        }
    }
}

#[test]
fn crop_is_centered_rounding_down() {
    let img = image(11, 14, |c, y, x| (c * 1000 + y * 20 + x) as f32 / 4096.0);
    let crop = center_crop(&img, 8).unwrap();
    for c in 0..3 {
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(crop.get(0, c, y, x), img.get(0, c, y + 1, x + 3));
            }
        }
    }
    assert!(matches!(center_crop(&img, 12), Err(Error::Size(_))));
}

/// Identities with 1, 2, 3 and 4 images.
fn uneven() -> DatasetHandle {
    let mut images = Vec::new();
    for (id, n) in [1usize, 2, 3, 4].into_iter().enumerate() {
        for k in 0..n {
            let g = (id * 4 + k) as f32 / 20.0;
            images.push((id, format!("{id}/{k}"), ImageTensor::constant(8, 8, g, ValueRange::Unit).unwrap()));
        }
    }
    DatasetHandle::from_images(images, 8, ScaleFactor::X4).unwrap()
}

fn chi_square(counts: &BTreeMap<usize, usize>, expected: &[f64], n: usize) -> f64 {
    expected
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let e = p * n as f64;
            let o = *counts.get(&k).unwrap_or(&0) as f64;
            (o - e) * (o - e) / e
        })
        .sum()
}

#[test]
fn imposter_partner_frequencies() {
    let ds = uneven();
    let sizes = [1.0, 2.0, 3.0, 4.0];
    let total: f64 = sizes.iter().sum();
    // uniform left record, then a uniform other identity
    let expected: Vec<f64> = sizes.iter().map(|&s| (1.0 - s / total) / 3.0).collect();
    let n = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for kind in [PairKind::P2, PairKind::P4] {
        let mut right = BTreeMap::new();
        let mut left = BTreeMap::new();
        for _ in 0..n {
            let p = sample_pair(&ds, kind, &mut rng).unwrap();
            *right.entry(p.right_identity).or_insert(0) += 1;
            *left.entry(p.left_identity).or_insert(0) += 1;
        }
        let left_expected: Vec<f64> = sizes.iter().map(|s| s / total).collect();
        // 3 degrees of freedom, p = 0.001
        assert!(chi_square(&right, &expected, n) < 16.27, "{kind:?} right {right:?}");
        assert!(chi_square(&left, &left_expected, n) < 16.27, "{kind:?} left {left:?}");
    }
}

#[test]
fn genuine_partner_is_another_image() {
    let ds = uneven();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut seen = BTreeMap::new();
    for _ in 0..5000 {
        let p = sample_pair(&ds, PairKind::P3, &mut rng).unwrap();
        assert_ne!(p.left_record, p.right_record);
        assert_ne!(p.left_identity, 0);
        *seen.entry((p.left_record, p.right_record)).or_insert(0) += 1;
    }
    // ordered pairs within identities of sizes 2, 3, 4
    assert_eq!(seen.len(), 2 + 6 + 12);
}

#[test]
fn batch_rows_follow_the_mix() {
    let ds = DatasetHandle::synthetic(4, 3, 16, ScaleFactor::X4, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mix = PairMix::new(3, 1, 2, 2);
    let b = prepare_batch(&ds, &mix, 2, &mut rng).unwrap();
    let kinds: Vec<PairKind> = b.pairs.iter().map(|p| p.kind).collect();
    use PairKind::*;
    assert_eq!(kinds, [P1, P1, P1, P2, P3, P3, P4, P4]);
    assert_eq!(b.generated_rows, 4);
    assert_eq!(b.left[0].height(), 16);
    assert_eq!(b.left[1].height(), 8);
    assert_eq!(b.generator_lr.as_ref().unwrap().batch(), 4);
    assert_eq!(b.real_right.as_ref().unwrap()[1].batch(), 4);
}

#[test]
fn folder_loading() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    for (who, n) in [("bob", 2), ("alice", 1)] {
        fs::create_dir(root.join(who)).unwrap();
        for k in 0..n {
            let img = ImageTensor::constant(20, 20, 0.2 * k as f32, ValueRange::Unit).unwrap();
            write_image(&img, 0, &root.join(who).join(format!("{k}.png"))).unwrap();
        }
    }
    fs::write(root.join("bob").join("notes.txt"), "not an image").unwrap();
    fs::write(root.join("README"), "top-level files are ignored").unwrap();
    let ds = load_dataset(root, 16, ScaleFactor::X4).unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!(ds.skipped_files(), 1);
    assert_eq!(ds.record(0).image_id, "alice/0");
    assert_eq!((ds.record(1).identity_id, ds.record(1).ordinal), (1, 0));
    assert_eq!(ds.hr(2).unwrap().height(), 16);
    assert_eq!(ds.lr(2).unwrap().height(), 4);

    assert!(matches!(load_dataset(root, 24, ScaleFactor::X4).unwrap().hr(0), Err(Error::Size(_))));
    assert!(matches!(load_dataset(root, 18, ScaleFactor::X4), Err(Error::Config(_))));

    fs::write(root.join("alice").join("1.png"), b"\x89PNG\r\n\x1a\nbroken").unwrap();
    let ds = load_dataset(root, 16, ScaleFactor::X4).unwrap();
    assert!(matches!(ds.hr(1), Err(Error::Decode { .. })));

    fs::create_dir(root.join("carol")).unwrap();
    assert!(matches!(load_dataset(root, 16, ScaleFactor::X4), Err(Error::DatasetStructure(_))));
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(empty.path(), 16, ScaleFactor::X4), Err(Error::DatasetStructure(_))));
}
