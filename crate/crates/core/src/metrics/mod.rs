//! Image-quality and identity-preservation metrics, and the corpus evaluation driver.

mod fsim;
mod identity;
mod quality;

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{upsample_bicubic, upsample_bilinear, DatasetHandle, ImageTensor, ValueRange};
use crate::error::{Error, Result};
use crate::generator::Generator;

pub use fsim::{fsim, fsim_with, phase_congruency, FsimParams};
pub use identity::{
    auc_from_scores, cosine_similarity, topk_accuracy, topk_from_embeddings, verification_auc,
    Embedder, FileEmbedder, ProjectionEmbedder,
};
pub use quality::{mse, psnr, ssim, ssim_with, SsimParams, PSNR_CAP};

/// Env var capping the evaluation worker threads.
pub const WORKERS_ENV: &str = "HALLUC_NUM_WORKERS";

/// Suffix appended to an image id to key its hallucinated version.
pub const SR_KEY_SUFFIX: &str = ":sr";

/// Worker count: `HALLUC_NUM_WORKERS` if set and positive, else the available cores.
pub fn worker_count() -> usize {
    let avail = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(avail)
}

pub(crate) fn with_workers<R: Send>(f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Anything that maps a `[0, 1]` LR image to a `[0, 1]` HR estimate.
pub trait SuperResolver: Sync {
    fn name(&self) -> String;
    /// Upscaling factor, when fixed.
    fn scale_factor(&self) -> Option<usize>;
    fn super_resolve(&self, lr: &ImageTensor) -> Result<ImageTensor>;
}

impl SuperResolver for Generator<f32> {
    fn name(&self) -> String {
        "generator".into()
    }

    fn scale_factor(&self) -> Option<usize> {
        Some(self.config().scale_factor.value())
    }

    fn super_resolve(&self, lr: &ImageTensor) -> Result<ImageTensor> {
        let out = self.generate(&lr.to_range(ValueRange::Signed))?;
        Ok(out.final_image().to_range(ValueRange::Unit))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BilinearUpsampler(pub usize);

impl SuperResolver for BilinearUpsampler {
    fn name(&self) -> String {
        "bilinear".into()
    }
    fn scale_factor(&self) -> Option<usize> {
        Some(self.0)
    }
    fn super_resolve(&self, lr: &ImageTensor) -> Result<ImageTensor> {
        upsample_bilinear(lr, self.0)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BicubicUpsampler(pub usize);

impl SuperResolver for BicubicUpsampler {
    fn name(&self) -> String {
        "bicubic".into()
    }
    fn scale_factor(&self) -> Option<usize> {
        Some(self.0)
    }
    fn super_resolve(&self, lr: &ImageTensor) -> Result<ImageTensor> {
        upsample_bicubic(lr, self.0)
    }
}

/// Uniform mid-gray output of the right size.
#[derive(Clone, Copy, Debug)]
pub struct ConstantGray(pub usize);

impl SuperResolver for ConstantGray {
    fn name(&self) -> String {
        "constant-gray".into()
    }
    fn scale_factor(&self) -> Option<usize> {
        Some(self.0)
    }
    fn super_resolve(&self, lr: &ImageTensor) -> Result<ImageTensor> {
        ImageTensor::constant(lr.height() * self.0, lr.width() * self.0, 0.5, ValueRange::Unit)
    }
}

/// Returns the true HR image for every LR image of a dataset (debugging baseline).
#[derive(Clone, Debug)]
pub struct PerfectOracle {
    factor: usize,
    table: HashMap<Vec<u32>, ImageTensor>,
}

impl PerfectOracle {
    pub fn from_dataset(ds: &DatasetHandle) -> Result<Self> {
        let mut table = HashMap::new();
        for i in 0..ds.len() {
            let pair = ds.hr_lr(i)?;
            table.insert(Self::key(&pair.1), pair.0.clone());
        }
        Ok(Self { factor: ds.scale().value(), table })
    }

    fn key(img: &ImageTensor) -> Vec<u32> {
        img.tensor().data().iter().map(|v| v.to_bits()).collect()
    }
}

impl SuperResolver for PerfectOracle {
    fn name(&self) -> String {
        "perfect-oracle".into()
    }
    fn scale_factor(&self) -> Option<usize> {
        Some(self.factor)
    }
    fn super_resolve(&self, lr: &ImageTensor) -> Result<ImageTensor> {
        self.table
            .get(&Self::key(&lr.to_range(ValueRange::Unit)))
            .cloned()
            .ok_or_else(|| Error::Protocol("oracle has no HR image for this input".into()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub image_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub fsim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityMetrics {
    pub embedder: String,
    pub auc: f64,
    pub genuine_pairs: usize,
    pub imposter_pairs: usize,
    /// k -> recognition rate; empty when no identity has a second image to probe with.
    pub topk: BTreeMap<usize, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub method: String,
    pub per_image: Vec<ImageMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_fsim: f64,
    pub identity: Option<IdentityMetrics>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl MetricReport {
    pub fn new(method: String, per_image: Vec<ImageMetrics>, identity: Option<IdentityMetrics>) -> Self {
        let mean_psnr = mean(per_image.iter().map(|m| m.psnr));
        let mean_ssim = mean(per_image.iter().map(|m| m.ssim));
        let mean_fsim = mean(per_image.iter().map(|m| m.fsim));
        Self { method, per_image, mean_psnr, mean_ssim, mean_fsim, identity }
    }

    /// One-line summary.
    pub fn summary(&self) -> String {
        let mut s = format!(
            "{}: psnr={:.4} ssim={:.6} fsim={:.6} (n={})",
            self.method,
            self.mean_psnr,
            self.mean_ssim,
            self.mean_fsim,
            self.per_image.len()
        );
        if let Some(id) = &self.identity {
            let _ = write!(s, " auc={:.6}", id.auc);
            for (k, r) in &id.topk {
                let _ = write!(s, " top{k}={r:.4}");
            }
        }
        s
    }

    /// Human-readable aligned table.
    pub fn to_table(&self) -> String {
        let w = self.per_image.iter().map(|m| m.image_id.len()).max().unwrap_or(0).max(8);
        let mut s = format!("method: {}\n", self.method);
        let _ = writeln!(s, "{:<w$}  {:>9}  {:>8}  {:>8}", "image_id", "psnr", "ssim", "fsim");
        for m in &self.per_image {
            let _ = writeln!(s, "{:<w$}  {:>9.4}  {:>8.6}  {:>8.6}", m.image_id, m.psnr, m.ssim, m.fsim);
        }
        let _ = writeln!(
            s,
            "{:<w$}  {:>9.4}  {:>8.6}  {:>8.6}",
            "mean", self.mean_psnr, self.mean_ssim, self.mean_fsim
        );
        if let Some(id) = &self.identity {
            let _ = writeln!(s, "\nidentity ({})", id.embedder);
            let _ = writeln!(
                s,
                "  verification auc  {:.6}  ({} genuine / {} imposter pairs)",
                id.auc, id.genuine_pairs, id.imposter_pairs
            );
            for (k, r) in &id.topk {
                let _ = writeln!(s, "  top-{k:<2} rate       {r:.6}");
            }
        }
        s
    }

    /// Per-image rows: `image_id,psnr,ssim,fsim`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("image_id,psnr,ssim,fsim\n");
        for m in &self.per_image {
            let _ = writeln!(s, "{},{},{},{}", m.image_id, m.psnr, m.ssim, m.fsim);
        }
        s
    }

    /// Writes `report.txt` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("report.txt", self.to_table()), ("report.csv", self.to_csv())] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub seed: u64,
    pub ks: Vec<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { seed: 0, ks: vec![1, 5, 10] }
    }
}

/// Super-resolves every record and scores it against its HR image; with an embedder,
/// also scores verification (AUC) and identification (top-k) on the hallucinations.
///
/// Genuine pairs match each hallucination with the HR of the next image of the same
/// identity (itself if it has none); imposter pairs, one per genuine pair, use a seeded
/// random image of another identity. Top-k uses each identity's first image as the
/// gallery and the hallucinations of its other images as probes.
pub fn evaluate_corpus(
    resolver: &dyn SuperResolver,
    ds: &DatasetHandle,
    embedder: Option<&dyn Embedder>,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    if let Some(f) = resolver.scale_factor() {
        if f != ds.scale().value() {
            return Err(Error::Config(format!(
                "{} upscales by {f} but the dataset uses factor {}",
                resolver.name(),
                ds.scale().value()
            )));
        }
    }
    let rows: Vec<(ImageMetrics, ImageTensor)> = with_workers(|| {
        (0..ds.len())
            .into_par_iter()
            .map(|i| {
                let pair = ds.hr_lr(i)?;
                let sr = resolver.super_resolve(&pair.1)?.to_range(ValueRange::Unit);
                if sr.tensor().shape() != pair.0.tensor().shape() {
                    return Err(Error::shape(format!(
                        "{} produced {:?}, expected {:?}",
                        resolver.name(),
                        sr.tensor().shape(),
                        pair.0.tensor().shape()
                    )));
                }
                let m = ImageMetrics {
                    image_id: ds.record(i).image_id.clone(),
                    psnr: psnr(&sr, &pair.0)?,
                    ssim: ssim(&sr, &pair.0)?,
                    fsim: fsim(&sr, &pair.0)?,
                };
                Ok((m, sr))
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let (per_image, srs): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    let identity = match embedder {
        Some(e) => Some(identity_metrics(e, ds, &srs, opts)?),
        None => None,
    };
    Ok(MetricReport::new(resolver.name(), per_image, identity))
}

fn identity_metrics(
    embedder: &dyn Embedder,
    ds: &DatasetHandle,
    srs: &[ImageTensor],
    opts: &EvalOptions,
) -> Result<IdentityMetrics> {
    if ds.identity_count() < 2 {
        return Err(Error::Protocol("identity metrics need at least two identities".into()));
    }
    let hr = |i: usize| ds.hr(i);
    let id_of = |i: usize| ds.record(i).identity_id;
    let key = |i: usize| ds.record(i).image_id.clone();
    let sr_key = |i: usize| format!("{}{SR_KEY_SUFFIX}", ds.record(i).image_id);
    let embed_hr = |i: usize| -> Result<Vec<f64>> { embedder.embed(&hr(i)?, &key(i)) };
    let embed_sr = |i: usize| -> Result<Vec<f64>> { embedder.embed(&srs[i], &sr_key(i)) };

    let sr_emb: Vec<Vec<f64>> = (0..ds.len()).map(embed_sr).collect::<Result<_>>()?;
    let hr_emb: Vec<Vec<f64>> = (0..ds.len()).map(embed_hr).collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let index = ds.identity_index();
    let mut genuine = Vec::with_capacity(ds.len());
    let mut imposter = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let group = &index[&id_of(i)];
        let pos = group.iter().position(|&r| r == i).unwrap();
        let partner = group[(pos + 1) % group.len()];
        genuine.push(cosine_similarity(&sr_emb[i], &hr_emb[partner]));
        let other = loop {
            let j = rng.random_range(0..ds.len());
            if id_of(j) != id_of(i) {
                break j;
            }
        };
        imposter.push(cosine_similarity(&sr_emb[i], &hr_emb[other]));
    }
    let auc = auc_from_scores(&genuine, &imposter)?;

    let gallery: Vec<(usize, Vec<f64>)> =
        index.iter().map(|(&id, recs)| (id, hr_emb[recs[0]].clone())).collect();
    let probes: Vec<(usize, Vec<f64>)> = index
        .iter()
        .flat_map(|(&id, recs)| recs[1..].iter().map(move |&r| (id, r)))
        .map(|(id, r)| (id, sr_emb[r].clone()))
        .collect();
    let topk = if probes.is_empty() {
        BTreeMap::new()
    } else {
        topk_from_embeddings(&gallery, &probes, &opts.ks)?
    };
    Ok(IdentityMetrics {
        embedder: embedder.describe(),
        auc,
        genuine_pairs: genuine.len(),
        imposter_pairs: imposter.len(),
        topk,
    })
}
