use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::ImageTensor;
use crate::error::{Error, Result};

/// Maps an image to a fixed-length descriptor.
pub trait Embedder: Send + Sync {
    /// `key` names the image for embedders backed by precomputed vectors.
    fn embed(&self, image: &ImageTensor, key: &str) -> Result<Vec<f64>>;
    fn dim(&self) -> usize;
    fn describe(&self) -> String;
}

/// Seeded Gaussian projection of mean-centered pixels averaged onto a `grid x grid` raster.
#[derive(Clone, Debug)]
pub struct ProjectionEmbedder {
    grid: usize,
    dim: usize,
    seed: u64,
    matrix: Vec<f64>,
}

impl ProjectionEmbedder {
    pub fn new(grid: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = 3 * grid * grid;
        let matrix = (0..dim * inputs).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self { grid, dim, seed, matrix }
    }

    fn pooled(&self, image: &ImageTensor) -> Vec<f64> {
        let (h, w, g) = (image.height(), image.width(), self.grid);
        let mut sums = vec![0.0; 3 * g * g];
        let mut counts = vec![0usize; g * g];
        let data = image.tensor().data();
        for y in 0..h {
            let by = y * g / h;
            for x in 0..w {
                let bx = x * g / w;
                counts[by * g + bx] += 1;
                for c in 0..3 {
                    sums[(c * g + by) * g + bx] += data[(c * h + y) * w + x] as f64;
                }
            }
        }
        for (i, s) in sums.iter_mut().enumerate() {
            *s /= counts[i % (g * g)].max(1) as f64;
        }
        let mean = sums.iter().sum::<f64>() / sums.len() as f64;
        sums.iter().map(|v| v - mean).collect()
    }
}

impl Default for ProjectionEmbedder {
    fn default() -> Self {
        Self::new(8, 64, 0x00E3_BED0)
    }
}

impl Embedder for ProjectionEmbedder {
    fn embed(&self, image: &ImageTensor, _key: &str) -> Result<Vec<f64>> {
        if image.batch() != 1 {
            return Err(Error::shape("embedders take one image at a time"));
        }
        let x = self.pooled(&image.to_range(crate::data::ValueRange::Unit));
        Ok(self
            .matrix
            .chunks(x.len())
            .map(|row| row.iter().zip(&x).map(|(a, b)| a * b).sum())
            .collect())
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn describe(&self) -> String {
        format!("projection(grid={}, dim={}, seed={})", self.grid, self.dim, self.seed)
    }
}

/// Vectors imported from a text file of `image_id v1 ... vd` lines.
#[derive(Clone, Debug)]
pub struct FileEmbedder {
    source: String,
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl FileEmbedder {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Blank lines and lines starting with `#` are ignored.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut vectors = HashMap::new();
        let mut dim = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let id = parts.next().unwrap().to_string();
            let v = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| Error::Input(format!("{source}:{}: {e}", lineno + 1)))?;
            if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Input(format!(
                    "{source}:{}: expected finite values after the image id",
                    lineno + 1
                )));
            }
            match dim {
                None => dim = Some(v.len()),
                Some(d) if d != v.len() => {
                    return Err(Error::Input(format!(
                        "{source}:{}: {} values, earlier lines have {d}",
                        lineno + 1,
                        v.len()
                    )))
                }
                _ => {}
            }
            if vectors.insert(id.clone(), v).is_some() {
                return Err(Error::Input(format!("{source}:{}: duplicate id {id}", lineno + 1)));
            }
        }
        let dim = dim.ok_or_else(|| Error::Input(format!("{source}: no embeddings")))?;
        Ok(Self { source: source.to_string(), dim, vectors })
    }
}

impl Embedder for FileEmbedder {
    fn embed(&self, _image: &ImageTensor, key: &str) -> Result<Vec<f64>> {
        self.vectors
            .get(key)
            .cloned()
            .ok_or_else(|| Error::Protocol(format!("no embedding for {key} in {}", self.source)))
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn describe(&self) -> String {
        format!("file({})", self.source)
    }
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Exact Mann-Whitney AUC: probability a genuine score exceeds an imposter score, ties half.
pub fn auc_from_scores(genuine: &[f64], imposter: &[f64]) -> Result<f64> {
    if genuine.is_empty() || imposter.is_empty() {
        return Err(Error::Input("AUC needs at least one genuine and one imposter score".into()));
    }
    if genuine.iter().chain(imposter).any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN verification score".into()));
    }
    let mut all: Vec<(f64, bool)> = genuine
        .iter()
        .map(|&s| (s, true))
        .chain(imposter.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // sum of genuine mid-ranks (1-based)
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (n, m) = (genuine.len() as f64, imposter.len() as f64);
    Ok((rank_sum - n * (n + 1.0) / 2.0) / (n * m))
}

/// AUC of cosine-similarity scores over embedded genuine and imposter pairs.
/// Each pair is `((key, image), (key, image))`.
pub fn verification_auc(
    embedder: &dyn Embedder,
    genuine: &[((&str, &ImageTensor), (&str, &ImageTensor))],
    imposter: &[((&str, &ImageTensor), (&str, &ImageTensor))],
) -> Result<f64> {
    let score = |pairs: &[((&str, &ImageTensor), (&str, &ImageTensor))]| -> Result<Vec<f64>> {
        pairs
            .iter()
            .map(|((ka, a), (kb, b))| {
                Ok(cosine_similarity(&embedder.embed(a, ka)?, &embedder.embed(b, kb)?))
            })
            .collect()
    };
    auc_from_scores(&score(genuine)?, &score(imposter)?)
}

/// Top-k identification rates of probes against a gallery, by cosine distance with
/// ties broken by gallery order.
pub fn topk_from_embeddings(
    gallery: &[(usize, Vec<f64>)],
    probes: &[(usize, Vec<f64>)],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    if probes.is_empty() {
        return Err(Error::Input("top-k needs at least one probe".into()));
    }
    for (id, _) in probes {
        if !gallery.iter().any(|(g, _)| g == id) {
            return Err(Error::Protocol(format!("probe identity {id} is not in the gallery")));
        }
    }
    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    for (id, v) in probes {
        let mut order: Vec<(f64, usize)> = gallery
            .iter()
            .enumerate()
            .map(|(i, (_, g))| (1.0 - cosine_similarity(v, g), i))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let first_hit = order.iter().position(|&(_, i)| gallery[i].0 == *id).unwrap();
        for (&k, h) in hits.iter_mut() {
            if first_hit < k {
                *h += 1;
            }
        }
    }
    Ok(hits.into_iter().map(|(k, h)| (k, h as f64 / probes.len() as f64)).collect())
}

/// Embeds labeled `(identity, key, image)` triples and computes top-k rates.
pub fn topk_accuracy(
    embedder: &dyn Embedder,
    gallery: &[(usize, &str, &ImageTensor)],
    probes: &[(usize, &str, &ImageTensor)],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    let embed = |set: &[(usize, &str, &ImageTensor)]| -> Result<Vec<(usize, Vec<f64>)>> {
        set.iter().map(|(id, k, img)| Ok((*id, embedder.embed(img, k)?))).collect()
    };
    topk_from_embeddings(&embed(gallery)?, &embed(probes)?, ks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_brute_force_agreement() {
        let g = [0.3, 0.5, 0.5, 0.9];
        let i = [0.1, 0.5, 0.7];
        let mut s = 0.0;
        for a in g {
            for b in i {
                s += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
            }
        }
        assert_eq!(auc_from_scores(&g, &i).unwrap(), s / 12.0);
    }

    #[test]
    fn file_embedder_parsing() {
        let e = FileEmbedder::parse("# header\na 1 2\nb 3 4\n\n", "mem").unwrap();
        assert_eq!(e.dim(), 2);
        let img = ImageTensor::constant(2, 2, 0.0, crate::data::ValueRange::Unit).unwrap();
        assert_eq!(e.embed(&img, "b").unwrap(), vec![3.0, 4.0]);
        assert!(matches!(e.embed(&img, "c"), Err(Error::Protocol(_))));
        assert!(FileEmbedder::parse("a 1 2\nb 3\n", "mem").is_err());
        assert!(FileEmbedder::parse("a x\n", "mem").is_err());
    }

    #[test]
    fn projection_is_deterministic() {
        let img = crate::data::synth_face(1, 2, 32).unwrap();
        let a = ProjectionEmbedder::default().embed(&img, "").unwrap();
        let b = ProjectionEmbedder::default().embed(&img, "").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
    }
}
