//! Training data: images, datasets of identities, synthetic faces and pair sampling.

mod dataset;
mod image;
mod pairs;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{load_dataset, make_hr_lr_pair, write_synthetic_dataset, DatasetHandle, Record, RecordSource};
pub use image::{
    center_crop, downsample_area, read_image, upsample_bicubic, upsample_bilinear, write_image,
    ImageTensor, ValueRange,
};
pub use pairs::{
    make_batch, prepare_batch, sample_pair, sample_pairs, scale_pyramid, PairBatch, PairInputs,
};
pub use synth::{
    face_params, mix_seed, render_face, synth_face, variation_params, FaceParams,
    VariationParams, MIN_SYNTH_SIZE,
};

/// The four pair kinds seen by the discriminator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PairKind {
    /// Real HR with the hallucination of its own LR.
    P1,
    /// Real HR with the hallucination of another identity's LR.
    P2,
    /// Two distinct real HR images of one identity.
    P3,
    /// Real HR images of two different identities.
    P4,
}

impl PairKind {
    pub const ALL: [PairKind; 4] = [PairKind::P1, PairKind::P2, PairKind::P3, PairKind::P4];

    pub fn target(self) -> TargetClass {
        match self {
            PairKind::P1 | PairKind::P2 => TargetClass::Fake,
            PairKind::P3 => TargetClass::Genuine,
            PairKind::P4 => TargetClass::Imposter,
        }
    }

    /// Whether the right image comes from the generator.
    pub fn is_generated(self) -> bool {
        matches!(self, PairKind::P1 | PairKind::P2)
    }
}

/// Discriminator classes; the discriminant is the logit index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TargetClass {
    Fake = 0,
    Genuine = 1,
    Imposter = 2,
}

impl TargetClass {
    pub fn index(self) -> usize {
        self as usize
    }
}

/// What the right side of a pair is built from.
#[derive(Clone, Debug, PartialEq)]
pub enum RightSource {
    /// A real HR image, used as is.
    Hr(ImageTensor),
    /// An LR image for the generator to super-resolve.
    Lr(ImageTensor),
}

impl RightSource {
    pub fn image(&self) -> &ImageTensor {
        match self {
            RightSource::Hr(i) | RightSource::Lr(i) => i,
        }
    }
}

/// A labeled two-image sample. Images are single `[0, 1]` tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct FacePair {
    pub kind: PairKind,
    pub left: ImageTensor,
    pub right_source: RightSource,
    pub left_identity: usize,
    pub right_identity: usize,
    /// Record indices into the dataset the pair was drawn from.
    pub left_record: usize,
    pub right_record: usize,
    pub target_class: TargetClass,
}

/// HR-to-LR side ratio.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScaleFactor {
    X4,
    X8,
}

impl ScaleFactor {
    pub fn new(factor: usize) -> Result<Self> {
        match factor {
            4 => Ok(ScaleFactor::X4),
            8 => Ok(ScaleFactor::X8),
            other => Err(Error::Config(format!(
                "scale factor must be 4 or 8, got {other}"
            ))),
        }
    }

    pub fn value(self) -> usize {
        match self {
            ScaleFactor::X4 => 4,
            ScaleFactor::X8 => 8,
        }
    }

    /// Number of x2 upsampling stages.
    pub fn stages(self) -> usize {
        self.value().trailing_zeros() as usize
    }
}

impl Serialize for ScaleFactor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u64(self.value() as u64)
    }
}

impl<'de> Deserialize<'de> for ScaleFactor {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = u64::deserialize(d)?;
        ScaleFactor::new(v as usize).map_err(serde::de::Error::custom)
    }
}

/// Per-kind pair counts making up one batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairMix {
    pub p1: usize,
    pub p2: usize,
    pub p3: usize,
    pub p4: usize,
}

impl PairMix {
    pub fn new(p1: usize, p2: usize, p3: usize, p4: usize) -> Self {
        Self { p1, p2, p3, p4 }
    }

    /// Equal quarters; the remainder goes to P1, P2, P3 in turn.
    pub fn even(batch_size: usize) -> Self {
        let q = batch_size / 4;
        let r = batch_size % 4;
        Self::new(q + (r > 0) as usize, q + (r > 1) as usize, q + (r > 2) as usize, q)
    }

    pub fn count(&self, kind: PairKind) -> usize {
        match kind {
            PairKind::P1 => self.p1,
            PairKind::P2 => self.p2,
            PairKind::P3 => self.p3,
            PairKind::P4 => self.p4,
        }
    }

    pub fn total(&self) -> usize {
        self.p1 + self.p2 + self.p3 + self.p4
    }

    pub fn generated(&self) -> usize {
        self.p1 + self.p2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_follow_kind() {
        let labels: Vec<_> = PairKind::ALL.iter().map(|k| k.target()).collect();
        assert_eq!(
            labels,
            [TargetClass::Fake, TargetClass::Fake, TargetClass::Genuine, TargetClass::Imposter]
        );
    }

    #[test]
    fn even_mix_sums() {
        for b in 1..20 {
            assert_eq!(PairMix::even(b).total(), b);
        }
        assert_eq!(PairMix::even(8), PairMix::new(2, 2, 2, 2));
    }

    #[test]
    fn scale_factor_validation() {
        assert_eq!(ScaleFactor::new(8).unwrap().stages(), 3);
        assert_eq!(ScaleFactor::new(4).unwrap().stages(), 2);
        assert!(matches!(ScaleFactor::new(2), Err(Error::Config(_))));
    }
}
