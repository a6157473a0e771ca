use rand::Rng;

use super::dataset::DatasetHandle;
use super::image::{downsample_area, ImageTensor, ValueRange};
use super::{FacePair, PairKind, PairMix, RightSource};
use crate::error::{Error, Result};
use crate::generator::MultiScaleOutput;

fn diversity(kind: PairKind, reason: &str) -> Error {
    Error::InsufficientDiversity {
        kind,
        reason: reason.to_string(),
    }
}

fn pick<'a, T>(items: &'a [T], rng: &mut impl Rng) -> &'a T {
    &items[rng.random_range(0..items.len())]
}

/// Chooses `(left_record, right_record)` for a pair of `kind`.
fn choose_records(ds: &DatasetHandle, kind: PairKind, rng: &mut impl Rng) -> Result<(usize, usize)> {
    let index = ds.identity_index();
    match kind {
        PairKind::P1 => {
            let r = rng.random_range(0..ds.len());
            Ok((r, r))
        }
        PairKind::P2 | PairKind::P4 => {
            if index.len() < 2 {
                return Err(diversity(kind, "needs at least two identities"));
            }
            let left = rng.random_range(0..ds.len());
            let left_id = ds.record(left).identity_id;
            let others: Vec<&Vec<usize>> =
                index.iter().filter(|(id, _)| **id != left_id).map(|(_, r)| r).collect();
            let group = pick(&others, rng);
            Ok((left, *pick(group, rng)))
        }
        PairKind::P3 => {
            let eligible: Vec<usize> = index
                .values()
                .filter(|r| r.len() >= 2)
                .flat_map(|r| r.iter().copied())
                .collect();
            if eligible.is_empty() {
                return Err(diversity(kind, "needs an identity with at least two images"));
            }
            let left = *pick(&eligible, rng);
            let group = &index[&ds.record(left).identity_id];
            let k = rng.random_range(0..group.len() - 1);
            let right = group.iter().copied().filter(|&r| r != left).nth(k).unwrap();
            Ok((left, right))
        }
    }
}

/// Draws one labeled pair of `kind`.
pub fn sample_pair(ds: &DatasetHandle, kind: PairKind, rng: &mut impl Rng) -> Result<FacePair> {
    let (left_record, right_record) = choose_records(ds, kind, rng)?;
    let left = ds.hr(left_record)?;
    let right_source = if kind.is_generated() {
        RightSource::Lr(ds.lr(right_record)?)
    } else {
        RightSource::Hr(ds.hr(right_record)?)
    };
    Ok(FacePair {
        kind,
        left,
        right_source,
        left_identity: ds.record(left_record).identity_id,
        right_identity: ds.record(right_record).identity_id,
        left_record,
        right_record,
        target_class: kind.target(),
    })
}

/// Pairs for a whole mix, ordered P1s, P2s, P3s, P4s.
pub fn sample_pairs(ds: &DatasetHandle, mix: &PairMix, rng: &mut impl Rng) -> Result<Vec<FacePair>> {
    let mut out = Vec::with_capacity(mix.total());
    for kind in PairKind::ALL {
        for _ in 0..mix.count(kind) {
            out.push(sample_pair(ds, kind, rng)?);
        }
    }
    Ok(out)
}

/// `num_scales` copies of `image`, full size first, each half the previous.
pub fn scale_pyramid(image: &ImageTensor, num_scales: usize) -> Result<Vec<ImageTensor>> {
    (0..num_scales).map(|k| downsample_area(image, 1 << k)).collect()
}

/// A sampled batch with everything except the generated right images realized.
///
/// Rows are ordered as `pairs`; the first `generated_rows` of them need the generator.
#[derive(Clone, Debug)]
pub struct PairInputs {
    pub pairs: Vec<FacePair>,
    /// Left images per scale, full resolution first, in `[-1, 1]`.
    pub left: Vec<ImageTensor>,
    /// Right images per scale for the real rows, in `[-1, 1]`.
    pub real_right: Option<Vec<ImageTensor>>,
    /// LR inputs of the generated rows, in `[-1, 1]`.
    pub generator_lr: Option<ImageTensor>,
    /// HR ground truth for each generated row's LR, in `[0, 1]`.
    pub generator_target: Option<ImageTensor>,
    pub generated_rows: usize,
}

fn stacked_pyramid(images: Vec<ImageTensor>, num_scales: usize) -> Result<Vec<ImageTensor>> {
    let batch = ImageTensor::stack(&images)?.to_range(ValueRange::Signed);
    scale_pyramid(&batch, num_scales)
}

/// Samples pairs for `mix` and builds the real parts of the discriminator input.
pub fn prepare_batch(
    ds: &DatasetHandle,
    mix: &PairMix,
    num_scales: usize,
    rng: &mut impl Rng,
) -> Result<PairInputs> {
    if mix.total() == 0 {
        return Err(Error::Config("pair mix is empty".into()));
    }
    let pairs = sample_pairs(ds, mix, rng)?;
    let generated_rows = mix.generated();
    let left = stacked_pyramid(pairs.iter().map(|p| p.left.clone()).collect(), num_scales)?;
    let real_right = if generated_rows < pairs.len() {
        let imgs = pairs[generated_rows..]
            .iter()
            .map(|p| p.right_source.image().clone())
            .collect();
        Some(stacked_pyramid(imgs, num_scales)?)
    } else {
        None
    };
    let (generator_lr, generator_target) = if generated_rows > 0 {
        let gen = &pairs[..generated_rows];
        let lr: Vec<ImageTensor> = gen.iter().map(|p| p.right_source.image().clone()).collect();
        let hr = gen
            .iter()
            .map(|p| ds.hr(p.right_record))
            .collect::<Result<Vec<_>>>()?;
        (
            Some(ImageTensor::stack(&lr)?.to_range(ValueRange::Signed)),
            Some(ImageTensor::stack(&hr)?),
        )
    } else {
        (None, None)
    };
    Ok(PairInputs {
        pairs,
        left,
        real_right,
        generator_lr,
        generator_target,
        generated_rows,
    })
}

/// A fully realized discriminator batch.
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub pairs: Vec<FacePair>,
    /// Per scale, full resolution first, `[-1, 1]`, rows ordered as `pairs`.
    pub left: Vec<ImageTensor>,
    pub right: Vec<ImageTensor>,
    /// Number of times the generator function ran (0 or 1).
    pub generator_calls: usize,
}

/// Samples a batch and realizes the P1/P2 right images with one call to `generator_fn`
/// on all generated rows; scale `k` of a generated row is branch `last - k`.
pub fn make_batch<F>(
    ds: &DatasetHandle,
    mut generator_fn: F,
    batch_size: usize,
    mix: &PairMix,
    num_scales: usize,
    rng: &mut impl Rng,
) -> Result<PairBatch>
where
    F: FnMut(&ImageTensor) -> Result<MultiScaleOutput>,
{
    if mix.total() != batch_size {
        return Err(Error::Config(format!(
            "pair mix sums to {} but batch size is {batch_size}",
            mix.total()
        )));
    }
    let inputs = prepare_batch(ds, mix, num_scales, rng)?;
    let mut generator_calls = 0;
    let generated = match &inputs.generator_lr {
        Some(lr) => {
            generator_calls += 1;
            let out = generator_fn(lr)?;
            let images = out.images();
            if images.len() < num_scales {
                return Err(Error::shape(format!(
                    "generator produced {} scales, discriminator needs {num_scales}",
                    images.len()
                )));
            }
            Some(
                (0..num_scales)
                    .map(|k| images[images.len() - 1 - k].clone())
                    .collect::<Vec<_>>(),
            )
        }
        None => None,
    };
    let right = (0..num_scales)
        .map(|k| {
            let parts: Vec<ImageTensor> = generated
                .iter()
                .map(|g| g[k].clone())
                .chain(inputs.real_right.iter().map(|r| r[k].clone()))
                .collect();
            ImageTensor::stack(&parts)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PairBatch {
        pairs: inputs.pairs,
        left: inputs.left,
        right,
        generator_calls,
    })
}

#[cfg(test)]
mod tests {
    use super::super::image::upsample_bilinear;
    use super::super::{ScaleFactor, TargetClass};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn corpus() -> DatasetHandle {
        DatasetHandle::synthetic(3, 2, 32, ScaleFactor::X4, 5).unwrap()
    }

    fn bilinear_stub(lr: &ImageTensor) -> Result<MultiScaleOutput> {
        MultiScaleOutput::new(vec![upsample_bilinear(lr, 2)?, upsample_bilinear(lr, 4)?])
    }

    #[test]
    fn one_of_each_kind() {
        let ds = corpus();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = make_batch(&ds, bilinear_stub, 4, &PairMix::new(1, 1, 1, 1), 2, &mut rng).unwrap();
        let labels: Vec<_> = b.pairs.iter().map(|p| p.target_class).collect();
        assert_eq!(
            labels,
            [TargetClass::Fake, TargetClass::Fake, TargetClass::Genuine, TargetClass::Imposter]
        );
        assert_eq!(b.left[0].batch(), 4);
        assert_eq!(b.right[1].height(), 16);
    }

    #[test]
    fn real_only_mix_skips_generator() {
        let ds = corpus();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut calls = 0;
        let b = make_batch(
            &ds,
            |lr| {
                calls += 1;
                bilinear_stub(lr)
            },
            4,
            &PairMix::new(0, 0, 4, 0),
            2,
            &mut rng,
        )
        .unwrap();
        assert_eq!((calls, b.generator_calls), (0, 0));
    }

    #[test]
    fn bilinear_stub_realizes_p1() {
        let ds = corpus();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = make_batch(&ds, bilinear_stub, 1, &PairMix::new(1, 0, 0, 0), 2, &mut rng).unwrap();
        let p = &b.pairs[0];
        let lr = super::super::make_hr_lr_pair(&p.left, 32, ScaleFactor::X4).unwrap().1;
        let expect = upsample_bilinear(&lr.to_range(ValueRange::Signed), 4).unwrap();
        assert_eq!(b.right[0], expect);
        assert_eq!(b.right[1], upsample_bilinear(&lr.to_range(ValueRange::Signed), 2).unwrap());
    }

    #[test]
    fn mix_must_match_batch_size() {
        let ds = corpus();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(matches!(
            make_batch(&ds, bilinear_stub, 3, &PairMix::new(1, 1, 1, 1), 2, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn degenerate_datasets() {
        let one_id = DatasetHandle::synthetic(1, 3, 32, ScaleFactor::X4, 1).unwrap();
        let singles = DatasetHandle::synthetic(3, 1, 32, ScaleFactor::X4, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in [PairKind::P2, PairKind::P4] {
            assert!(matches!(
                sample_pair(&one_id, kind, &mut rng),
                Err(Error::InsufficientDiversity { kind: k, .. }) if k == kind
            ));
            assert!(sample_pair(&singles, kind, &mut rng).is_ok());
        }
        assert!(matches!(
            sample_pair(&singles, PairKind::P3, &mut rng),
            Err(Error::InsufficientDiversity { kind: PairKind::P3, .. })
        ));
        assert!(sample_pair(&one_id, PairKind::P3, &mut rng).is_ok());
    }
}
