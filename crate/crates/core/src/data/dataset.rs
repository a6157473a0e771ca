use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use image::ImageReader;
use log::warn;

use super::image::{center_crop, downsample_area, read_image, write_image, ImageTensor};
use super::synth::{mix_seed, synth_face};
use super::ScaleFactor;
use crate::error::{Error, Result};

/// Where a record's pixels come from.
#[derive(Clone, Debug)]
pub enum RecordSource {
    File(PathBuf),
    Synthetic { identity_seed: u64, variation_seed: u64, size: usize },
    Memory(ImageTensor),
}

/// One image of one identity.
#[derive(Debug)]
pub struct Record {
    pub identity_id: usize,
    pub image_id: String,
    /// Position of this image within its identity, in load order.
    pub ordinal: usize,
    pub source: RecordSource,
    cache: OnceLock<Arc<(ImageTensor, ImageTensor)>>,
}

impl Record {
    fn new(identity_id: usize, image_id: String, ordinal: usize, source: RecordSource) -> Self {
        Self {
            identity_id,
            image_id,
            ordinal,
            source,
            cache: OnceLock::new(),
        }
    }
}

/// Immutable collection of identity-labeled images with lazily built HR/LR pairs.
///
/// Clones share the decoded-image cache.
#[derive(Clone, Debug)]
pub struct DatasetHandle {
    records: Vec<Arc<Record>>,
    identity_index: BTreeMap<usize, Vec<usize>>,
    hr_size: usize,
    scale: ScaleFactor,
    skipped_files: usize,
}

/// Centered HR crop and its area-downsampled LR counterpart.
pub fn make_hr_lr_pair(
    image: &ImageTensor,
    hr_size: usize,
    scale: ScaleFactor,
) -> Result<(ImageTensor, ImageTensor)> {
    let f = scale.value();
    if hr_size == 0 || hr_size % f != 0 {
        return Err(Error::Size(format!(
            "hr size {hr_size} is not a positive multiple of {f}"
        )));
    }
    let hr = center_crop(image, hr_size)?;
    let lr = downsample_area(&hr, f)?;
    Ok((hr, lr))
}

fn is_image_file(path: &Path) -> bool {
    ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .map(|r| r.format().is_some())
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Loads `root/<identity>/<images>`; identities are numbered in sorted name order.
pub fn load_dataset(root: &Path, hr_size: usize, scale: ScaleFactor) -> Result<DatasetHandle> {
    let mut records = Vec::new();
    let mut skipped = 0;
    let dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if dirs.is_empty() {
        return Err(Error::DatasetStructure(format!(
            "{} contains no identity directories",
            root.display()
        )));
    }
    for (identity_id, dir) in dirs.iter().enumerate() {
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let mut ordinal = 0;
        for path in sorted_entries(dir)? {
            if !path.is_file() || !is_image_file(&path) {
                skipped += 1;
                continue;
            }
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            records.push(Record::new(
                identity_id,
                format!("{name}/{stem}"),
                ordinal,
                RecordSource::File(path),
            ));
            ordinal += 1;
        }
        if ordinal == 0 {
            return Err(Error::DatasetStructure(format!(
                "identity directory {} holds no images",
                dir.display()
            )));
        }
    }
    if skipped > 0 {
        warn!("skipped {skipped} non-image entries under {}", root.display());
    }
    let mut handle = DatasetHandle::from_records(records, hr_size, scale)?;
    handle.skipped_files = skipped;
    Ok(handle)
}

impl DatasetHandle {
    fn from_records(records: Vec<Record>, hr_size: usize, scale: ScaleFactor) -> Result<Self> {
        Self::from_shared(records.into_iter().map(Arc::new).collect(), hr_size, scale)
    }

    fn from_shared(records: Vec<Arc<Record>>, hr_size: usize, scale: ScaleFactor) -> Result<Self> {
        if hr_size == 0 || hr_size % scale.value() != 0 {
            return Err(Error::Config(format!(
                "hr size {hr_size} is not a positive multiple of scale factor {}",
                scale.value()
            )));
        }
        if records.is_empty() {
            return Err(Error::DatasetStructure("dataset has no records".into()));
        }
        let mut identity_index: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            identity_index.entry(r.identity_id).or_default().push(i);
        }
        Ok(Self {
            records,
            identity_index,
            hr_size,
            scale,
            skipped_files: 0,
        })
    }

    /// In-memory synthetic corpus of `identities x variations` faces rendered at `hr_size`.
    ///
    /// Image ids are `id{identity:04}/v{variation:03}`, matching the layout written
    /// by the dataset command.
    pub fn synthetic(
        identities: usize,
        variations: usize,
        hr_size: usize,
        scale: ScaleFactor,
        seed: u64,
    ) -> Result<Self> {
        if identities == 0 || variations == 0 {
            return Err(Error::DatasetStructure(
                "synthetic corpus needs at least one identity and one variation".into(),
            ));
        }
        let mut records = Vec::with_capacity(identities * variations);
        for i in 0..identities {
            let identity_seed = mix_seed(seed, i as u64);
            for v in 0..variations {
                records.push(Record::new(
                    i,
                    synthetic_image_id(i, v),
                    v,
                    RecordSource::Synthetic {
                        identity_seed,
                        variation_seed: mix_seed(identity_seed, v as u64 + 1),
                        size: hr_size,
                    },
                ));
            }
        }
        Self::from_records(records, hr_size, scale)
    }

    /// Dataset over in-memory `(identity_id, image_id, image)` triples.
    pub fn from_images(
        images: Vec<(usize, String, ImageTensor)>,
        hr_size: usize,
        scale: ScaleFactor,
    ) -> Result<Self> {
        let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
        let records = images
            .into_iter()
            .map(|(id, name, img)| {
                let ord = seen.entry(id).or_default();
                let r = Record::new(id, name, *ord, RecordSource::Memory(img));
                *ord += 1;
                r
            })
            .collect();
        Self::from_records(records, hr_size, scale)
    }

    /// Keeps the records matching `keep`, sharing their caches.
    pub fn filter(&self, keep: impl Fn(&Record) -> bool) -> Result<Self> {
        let kept = self.records.iter().filter(|r| keep(r)).cloned().collect();
        let mut out = Self::from_shared(kept, self.hr_size, self.scale)?;
        out.skipped_files = self.skipped_files;
        Ok(out)
    }

    /// Splits records by their position within each identity.
    pub fn split_by_ordinal(&self, train_per_identity: usize) -> Result<(Self, Self)> {
        Ok((
            self.filter(|r| r.ordinal < train_per_identity)?,
            self.filter(|r| r.ordinal >= train_per_identity)?,
        ))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, index: usize) -> &Record {
        &self.records[index]
    }

    pub fn records(&self) -> impl Iterator<Item = &Record> {
        self.records.iter().map(|r| r.as_ref())
    }

    pub fn identity_index(&self) -> &BTreeMap<usize, Vec<usize>> {
        &self.identity_index
    }

    pub fn identity_count(&self) -> usize {
        self.identity_index.len()
    }

    pub fn hr_size(&self) -> usize {
        self.hr_size
    }

    pub fn lr_size(&self) -> usize {
        self.hr_size / self.scale.value()
    }

    pub fn scale(&self) -> ScaleFactor {
        self.scale
    }

    /// Entries under the root that were not decodable images.
    pub fn skipped_files(&self) -> usize {
        self.skipped_files
    }

    /// Unprocessed source image of a record.
    pub fn source_image(&self, index: usize) -> Result<ImageTensor> {
        match &self.records[index].source {
            RecordSource::File(p) => read_image(p),
            RecordSource::Synthetic { identity_seed, variation_seed, size } => {
                synth_face(*identity_seed, *variation_seed, *size)
            }
            RecordSource::Memory(img) => Ok(img.clone()),
        }
    }

    /// HR/LR pair of a record, decoded on first use and cached.
    pub fn hr_lr(&self, index: usize) -> Result<Arc<(ImageTensor, ImageTensor)>> {
        let record = &self.records[index];
        if let Some(p) = record.cache.get() {
            return Ok(p.clone());
        }
        let pair = make_hr_lr_pair(&self.source_image(index)?, self.hr_size, self.scale)
            .map_err(|e| match e {
                Error::Size(m) => Error::Size(format!("{}: {m}", record.image_id)),
                other => other,
            })?;
        Ok(record.cache.get_or_init(|| Arc::new(pair)).clone())
    }

    pub fn hr(&self, index: usize) -> Result<ImageTensor> {
        Ok(self.hr_lr(index)?.0.clone())
    }

    pub fn lr(&self, index: usize) -> Result<ImageTensor> {
        Ok(self.hr_lr(index)?.1.clone())
    }
}

/// Renders the synthetic corpus to `out_dir/id{i:04}/v{v:03}.png`, the layout read by
/// [`load_dataset`]. Images match [`DatasetHandle::synthetic`] with the same seed.
pub fn write_synthetic_dataset(
    identities: usize,
    variations: usize,
    size: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if identities == 0 || variations == 0 {
        return Err(Error::DatasetStructure(
            "synthetic corpus needs at least one identity and one variation".into(),
        ));
    }
    let mut written = Vec::with_capacity(identities * variations);
    for i in 0..identities {
        let identity_seed = mix_seed(seed, i as u64);
        let dir = out_dir.join(format!("id{i:04}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for v in 0..variations {
            let img = synth_face(identity_seed, mix_seed(identity_seed, v as u64 + 1), size)?;
            let path = out_dir.join(format!("{}.png", synthetic_image_id(i, v)));
            write_image(&img, 0, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}

pub(crate) fn synthetic_image_id(identity: usize, variation: usize) -> String {
    format!("id{identity:04}/v{variation:03}")
}

#[cfg(test)]
mod tests {
    use super::super::image::{write_image, ValueRange};
    use super::*;
    use halluc_tensor::Tensor;

    fn write_face(dir: &Path, name: &str, seed: u64) {
        let img = synth_face(seed, 1, 32).unwrap();
        write_image(&img, 0, &dir.join(name)).unwrap();
    }

    #[test]
    fn loads_identity_folders() {
        let tmp = tempfile::tempdir().unwrap();
        for (id, name) in ["bob", "alice"].iter().enumerate() {
            let d = tmp.path().join(name);
            fs::create_dir(&d).unwrap();
            for k in 0..3 {
                write_face(&d, &format!("{k}.png"), id as u64);
            }
        }
        fs::write(tmp.path().join("alice/notes.txt"), "hello").unwrap();
        let ds = load_dataset(tmp.path(), 32, ScaleFactor::X4).unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.identity_count(), 2);
        assert_eq!(ds.skipped_files(), 1);
        // sorted names: alice = 0, bob = 1
        assert_eq!(ds.record(0).image_id, "alice/0");
        assert_eq!(ds.record(3).identity_id, 1);
        let pair = ds.hr_lr(4).unwrap();
        assert_eq!((pair.0.height(), pair.1.height()), (32, 8));
    }

    #[test]
    fn empty_root_is_structural_error() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_dataset(tmp.path(), 32, ScaleFactor::X4),
            Err(Error::DatasetStructure(_))
        ));
    }

    #[test]
    fn identity_without_images_is_structural_error() {
        let tmp = tempfile::tempdir().unwrap();
        fs::create_dir(tmp.path().join("a")).unwrap();
        write_face(&tmp.path().join("a"), "x.png", 1);
        fs::create_dir(tmp.path().join("b")).unwrap();
        assert!(matches!(
            load_dataset(tmp.path(), 32, ScaleFactor::X4),
            Err(Error::DatasetStructure(_))
        ));
    }

    #[test]
    fn missing_root_is_io_error() {
        assert!(matches!(
            load_dataset(Path::new("/nonexistent/halluc"), 32, ScaleFactor::X4),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn single_identity_is_valid() {
        let tmp = tempfile::tempdir().unwrap();
        fs::create_dir(tmp.path().join("only")).unwrap();
        write_face(&tmp.path().join("only"), "x.png", 1);
        let ds = load_dataset(tmp.path(), 32, ScaleFactor::X8).unwrap();
        assert_eq!(ds.identity_count(), 1);
    }

    #[test]
    fn paper_sizes() {
        let src = ImageTensor::constant(250, 250, 0.25, ValueRange::Unit).unwrap();
        let (hr, lr) = make_hr_lr_pair(&src, 128, ScaleFactor::X8).unwrap();
        assert_eq!((hr.height(), hr.width(), lr.height(), lr.width()), (128, 128, 16, 16));
        assert!(hr.tensor().data().iter().chain(lr.tensor().data()).all(|&v| v == 0.25));
    }

    #[test]
    fn small_source_is_size_error() {
        let src = ImageTensor::constant(100, 200, 0.5, ValueRange::Unit).unwrap();
        assert!(matches!(
            make_hr_lr_pair(&src, 128, ScaleFactor::X8),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn checkerboard_blocks() {
        // 2x2-periodic checkerboard at 8x8, factor 4: every 4x4 block holds 8 ones
        let mut v = Vec::new();
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    v.push(((x + y + c) % 2) as f32);
                }
            }
        }
        let img = ImageTensor::new(Tensor::new(&[1, 3, 8, 8], v).unwrap(), ValueRange::Unit).unwrap();
        let (_, lr) = make_hr_lr_pair(&img, 8, ScaleFactor::X4).unwrap();
        assert_eq!(lr.height(), 2);
        assert!(lr.tensor().data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn synthetic_split_keeps_identities() {
        let ds = DatasetHandle::synthetic(4, 5, 32, ScaleFactor::X4, 3).unwrap();
        let (train, test) = ds.split_by_ordinal(3).unwrap();
        assert_eq!((train.len(), test.len()), (12, 8));
        assert_eq!(test.identity_count(), 4);
        assert_eq!(train.hr(0).unwrap(), ds.hr(0).unwrap());
    }
}
