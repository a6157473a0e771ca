//! Training objectives, each available as graph nodes and as plain f64 values.

use std::path::Path;

use halluc_tensor::{Graph, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{sha256, Container};
use crate::data::{ImageTensor, PairKind, TargetClass, ValueRange};
use crate::discriminator::ClassProbs;
use crate::error::{Error, Result};
use crate::generator::MultiScaleOutput;
use crate::nn::he_normal;

/// Floor applied to log-probabilities.
pub const LOG_FLOOR: f64 = -27.631_021_115_928_547; // ln(1e-12)

pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x00C0_FFEE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerWeight {
    pub name: String,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_a: f64,
    pub lambda_1: f64,
    pub lambda_2: f64,
    pub perceptual_layers: Vec<LayerWeight>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_c: 10.0,
            lambda_a: 1e-2,
            lambda_1: 1.0,
            lambda_2: 5.0,
            perceptual_layers: vec![
                LayerWeight { name: "shallow".into(), weight: 1.0 },
                LayerWeight { name: "deep".into(), weight: 1.0 },
            ],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        let scalars = [
            ("lambda_c", self.lambda_c),
            ("lambda_a", self.lambda_a),
            ("lambda_1", self.lambda_1),
            ("lambda_2", self.lambda_2),
        ];
        for (name, v) in scalars {
            if !ok(v) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        for l in &self.perceptual_layers {
            if !ok(l.weight) {
                return Err(Error::Config(format!(
                    "perceptual weight for {} must be finite and >= 0",
                    l.name
                )));
            }
        }
        Ok(())
    }
}

/// One fixed convolution of the feature extractor, followed by a rectifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorLayerSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub relu: bool,
}

#[derive(Clone, Debug, PartialEq)]
struct ExtractorLayer {
    spec: ExtractorLayerSpec,
    weight: Tensor<f64>,
    bias: Tensor<f64>,
}

/// Fixed convolutional stack whose named layer outputs are compared by the perceptual loss.
/// Inputs are `[-1, 1]` images.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    layers: Vec<ExtractorLayer>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: String,
    layer: Vec<ExtractorLayerSpec>,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::seeded(DEFAULT_EXTRACTOR_SEED)
    }
}

impl FeatureExtractor {
    /// Two layers: `shallow` (3 -> 16, stride 1) and `deep` (16 -> 32, stride 2).
    pub fn seeded(seed: u64) -> Self {
        let specs = vec![
            ExtractorLayerSpec {
                name: "shallow".into(),
                in_channels: 3,
                out_channels: 16,
                kernel: 3,
                stride: 1,
                relu: true,
            },
            ExtractorLayerSpec {
                name: "deep".into(),
                in_channels: 16,
                out_channels: 32,
                kernel: 3,
                stride: 2,
                relu: true,
            },
        ];
        Self::random(specs, seed).unwrap()
    }

    /// He-normal weights and zero biases for an arbitrary stack.
    pub fn random(specs: Vec<ExtractorLayerSpec>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = specs
            .into_iter()
            .map(|spec| {
                let fan_in = spec.in_channels * spec.kernel * spec.kernel;
                let weight = he_normal(
                    &[spec.out_channels, spec.in_channels, spec.kernel, spec.kernel],
                    fan_in,
                    &mut rng,
                );
                let bias = Tensor::zeros(&[spec.out_channels]);
                ExtractorLayer { spec, weight, bias }
            })
            .collect();
        Self::from_layers(layers)
    }

    fn from_layers(layers: Vec<ExtractorLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("feature extractor has no layers".into()));
        }
        let mut cin = 3;
        for l in &layers {
            let s = &l.spec;
            let shape = [s.out_channels, s.in_channels, s.kernel, s.kernel];
            if s.in_channels != cin || l.weight.shape() != shape || l.bias.shape() != [s.out_channels]
                || s.stride == 0
                || s.kernel % 2 == 0
            {
                return Err(Error::Config(format!("extractor layer {} is inconsistent", s.name)));
            }
            if layers.iter().filter(|o| o.spec.name == s.name).count() > 1 {
                return Err(Error::Config(format!("duplicate extractor layer {}", s.name)));
            }
            cin = s.out_channels;
        }
        Ok(Self { layers })
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.spec.name.as_str()).collect()
    }

    fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.spec.name == name)
            .ok_or_else(|| Error::Config(format!("unknown extractor layer {name}")))
    }

    /// Element count of layer `name`'s output for one `size x size` image.
    pub fn layer_numel(&self, name: &str, size: usize) -> Result<usize> {
        let idx = self.layer_index(name)?;
        let mut s = size;
        for l in &self.layers[..=idx] {
            s = (s - 1) / l.spec.stride + 1;
        }
        Ok(s * s * self.layers[idx].spec.out_channels)
    }

    /// Graph nodes for the named layer outputs (evaluated up to the deepest requested).
    pub fn features<T: Scalar>(&self, g: &mut Graph<T>, x: Var, names: &[&str]) -> Result<Vec<Var>> {
        let idx: Vec<usize> = names.iter().map(|n| self.layer_index(n)).collect::<Result<_>>()?;
        let deepest = idx.iter().copied().max().unwrap_or(0);
        let mut outs = Vec::with_capacity(deepest + 1);
        let mut h = x;
        for l in &self.layers[..=deepest] {
            let w = g.constant(l.weight.cast());
            let b = g.constant(l.bias.cast());
            h = g.conv2d(h, w, Some(b), l.spec.stride, l.spec.kernel / 2)?;
            if l.spec.relu {
                h = g.relu(h);
            }
            outs.push(h);
        }
        Ok(idx.into_iter().map(|i| outs[i]).collect())
    }

    /// Writes the weights with a layer manifest in the container format.
    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = Manifest {
            kind: "feature-extractor".into(),
            layer: self.layers.iter().map(|l| l.spec.clone()).collect(),
        };
        let header = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
        let mut blocks = Vec::new();
        for l in &self.layers {
            blocks.push((format!("{}.weight", l.spec.name), l.weight.cast()));
            blocks.push((format!("{}.bias", l.spec.name), l.bias.cast()));
        }
        Container {
            fingerprint: sha256(header.as_bytes()),
            header,
            blocks,
            table: Vec::new(),
            table_cols: 0,
        }
        .save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        let manifest: Manifest = toml::from_str(&c.header)
            .map_err(|e| Error::Config(format!("extractor manifest: {e}")))?;
        if manifest.kind != "feature-extractor" {
            return Err(Error::Config(format!(
                "{} is a {} file, not a feature extractor",
                path.display(),
                manifest.kind
            )));
        }
        let layers = manifest
            .layer
            .into_iter()
            .map(|spec| {
                Ok(ExtractorLayer {
                    weight: c.block(&format!("{}.weight", spec.name))?.cast(),
                    bias: c.block(&format!("{}.bias", spec.name))?.cast(),
                    spec,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers)
    }
}

/// Weighted perceptual terms `(1/N_j) ||phi_j(a) - phi_j(b)||^2`, averaged over the batch,
/// in the order of `weights.perceptual_layers` and before weighting.
pub fn perceptual_terms<T: Scalar>(
    g: &mut Graph<T>,
    extractor: &FeatureExtractor,
    generated: Var,
    reference: Var,
    layers: &[LayerWeight],
) -> Result<Vec<Var>> {
    if g.shape(generated) != g.shape(reference) {
        return Err(Error::shape(format!(
            "perceptual inputs differ: {:?} vs {:?}",
            g.shape(generated),
            g.shape(reference)
        )));
    }
    let names: Vec<&str> = layers.iter().map(|l| l.name.as_str()).collect();
    let fa = extractor.features(g, generated, &names)?;
    let fb = extractor.features(g, reference, &names)?;
    fa.into_iter()
        .zip(fb)
        .map(|(a, b)| {
            let d = g.sub(a, b)?;
            let sq = g.square(d);
            // mean over n * N_j elements = batch mean of the per-image (1/N_j)||.||^2
            Ok(g.mean(sq))
        })
        .collect()
}

fn to_signed_f64(img: &ImageTensor) -> Tensor<f64> {
    img.to_range(ValueRange::Signed).tensor().cast()
}

/// `(1/N_j) ||phi_j(generated) - phi_j(reference)||^2`, averaged over the batch.
pub fn perceptual_loss(
    extractor: &FeatureExtractor,
    generated: &ImageTensor,
    reference: &ImageTensor,
    layer: &str,
) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let a = g.constant(to_signed_f64(generated));
    let b = g.constant(to_signed_f64(reference));
    let layers = [LayerWeight { name: layer.into(), weight: 1.0 }];
    let t = perceptual_terms(&mut g, extractor, a, b, &layers)?;
    Ok(g.item(t[0]))
}

/// Per-image RGB mean and population covariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorStats {
    pub mu: [f64; 3],
    pub sigma: [[f64; 3]; 3],
}

impl ColorStats {
    fn flat(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        out[..3].copy_from_slice(&self.mu);
        for r in 0..3 {
            out[3 + 3 * r..6 + 3 * r].copy_from_slice(&self.sigma[r]);
        }
        out
    }
}

/// Color statistics of a single image, in f64.
pub fn image_stats(image: &ImageTensor) -> Result<ColorStats> {
    if image.batch() != 1 {
        return Err(Error::shape(format!("image_stats takes one image, got {}", image.batch())));
    }
    batch_stats(image).map(|mut v| v.remove(0))
}

fn batch_stats(images: &ImageTensor) -> Result<Vec<ColorStats>> {
    let mut g = Graph::<f64>::new();
    let x = g.constant(images.tensor().cast());
    let s = g.color_stats(x)?;
    Ok(g.value(s)
        .data()
        .chunks(12)
        .map(|r| {
            let mut sigma = [[0.0; 3]; 3];
            for i in 0..3 {
                sigma[i].copy_from_slice(&r[3 + 3 * i..6 + 3 * i]);
            }
            ColorStats { mu: [r[0], r[1], r[2]], sigma }
        })
        .collect())
}

fn color_weights(lambda_1: f64, lambda_2: f64) -> [f64; 12] {
    let mut w = [lambda_2; 12];
    w[..3].fill(lambda_1);
    w
}

/// Color-consistency terms between adjacent scales, one per pair `(i - 1, i)`.
pub fn color_terms<T: Scalar>(
    g: &mut Graph<T>,
    outputs: &[Var],
    lambda_1: f64,
    lambda_2: f64,
) -> Result<Vec<Var>> {
    if outputs.len() < 2 {
        return Err(Error::Input("color consistency needs at least two scales".into()));
    }
    let stats: Vec<Var> = outputs.iter().map(|&o| g.color_stats(o)).collect::<halluc_tensor::Result<_>>()?;
    let n = g.shape(stats[0])[0];
    let w = color_weights(lambda_1, lambda_2);
    let wt = Tensor::from_f64_slice(&[n, 12], &w.repeat(n))?;
    stats
        .windows(2)
        .map(|p| {
            let d = g.sub(p[1], p[0])?;
            let sq = g.square(d);
            let weighted = g.mul_const(sq, wt.clone())?;
            let s = g.sum(weighted);
            Ok(g.scale(s, 1.0 / n as f64))
        })
        .collect()
}

/// `(1/n) sum_j [l1 ||d mu||^2 + l2 ||d Sigma||_F^2]` for each adjacent scale pair.
pub fn color_consistency_loss(outputs: &MultiScaleOutput, lambda_1: f64, lambda_2: f64) -> Result<Vec<f64>> {
    let images = outputs.images();
    if images.len() < 2 {
        return Err(Error::Input("color consistency needs at least two scales".into()));
    }
    let stats: Vec<Vec<ColorStats>> = images.iter().map(batch_stats).collect::<Result<_>>()?;
    let w = color_weights(lambda_1, lambda_2);
    Ok(stats
        .windows(2)
        .map(|p| {
            let n = p[0].len();
            p[0].iter()
                .zip(&p[1])
                .map(|(a, b)| {
                    let (a, b) = (a.flat(), b.flat());
                    (0..12).map(|k| w[k] * (b[k] - a[k]).powi(2)).sum::<f64>()
                })
                .sum::<f64>()
                / n as f64
        })
        .collect())
}

/// Mean floored log-probability of `class` over `rows` of `(n, 3)` log-probabilities.
fn mean_log_prob<T: Scalar>(g: &mut Graph<T>, floored: Var, rows: &[usize], class: TargetClass) -> Result<Option<Var>> {
    if rows.is_empty() {
        return Ok(None);
    }
    let idx: Vec<usize> = rows.iter().map(|r| r * 3 + class.index()).collect();
    let picked = g.gather(floored, &idx)?;
    Ok(Some(g.mean(picked)))
}

fn rows_of(kinds: &[PairKind], kind: PairKind) -> Vec<usize> {
    kinds.iter().enumerate().filter(|(_, &k)| k == kind).map(|(i, _)| i).collect()
}

fn sum_terms<T: Scalar>(g: &mut Graph<T>, terms: Vec<Var>) -> Result<Var> {
    let mut it = terms.into_iter();
    let mut acc = it.next().ok_or_else(|| Error::Input("no pairs for the adversarial loss".into()))?;
    for t in it {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

fn check_log_probs<T: Scalar>(g: &Graph<T>, lp: Var, kinds: &[PairKind]) -> Result<()> {
    let shape = g.shape(lp);
    if shape != [kinds.len(), 3] {
        return Err(Error::shape(format!(
            "log-probabilities {shape:?} do not match {} pairs",
            kinds.len()
        )));
    }
    if let Some(v) = g.value(lp).data().iter().find(|v| !(v.as_f64() <= 1e-6)) {
        return Err(Error::Numeric(format!("invalid log-probability {v}")));
    }
    Ok(())
}

/// Discriminator objective (maximized): per-kind batch means of
/// `log p_fake(P1) + log p_fake(P2) + log p_genuine(P3) + log p_imposter(P4)`.
pub fn afvl_discriminator_terms<T: Scalar>(g: &mut Graph<T>, log_probs: Var, kinds: &[PairKind]) -> Result<Var> {
    check_log_probs(g, log_probs, kinds)?;
    let floored = g.clamp_min(log_probs, LOG_FLOOR);
    let mut terms = Vec::new();
    for kind in PairKind::ALL {
        if let Some(t) = mean_log_prob(g, floored, &rows_of(kinds, kind), kind.target())? {
            terms.push(t);
        }
    }
    sum_terms(g, terms)
}

/// Generator objective (maximized): `log p_genuine(P1) + log p_imposter(P2)`, per-kind means.
pub fn afvl_generator_terms<T: Scalar>(g: &mut Graph<T>, log_probs: Var, kinds: &[PairKind]) -> Result<Var> {
    check_log_probs(g, log_probs, kinds)?;
    let floored = g.clamp_min(log_probs, LOG_FLOOR);
    let mut terms = Vec::new();
    for (kind, class) in [(PairKind::P1, TargetClass::Genuine), (PairKind::P2, TargetClass::Imposter)] {
        if let Some(t) = mean_log_prob(g, floored, &rows_of(kinds, kind), class)? {
            terms.push(t);
        }
    }
    sum_terms(g, terms)
}

fn floored_log(p: f64) -> Result<f64> {
    if !(0.0..=1.0 + 1e-9).contains(&p) {
        return Err(Error::Numeric(format!("probability {p} outside [0, 1]")));
    }
    Ok(p.ln().max(LOG_FLOOR))
}

fn mean_log(probs: &[ClassProbs], class: TargetClass) -> Result<f64> {
    if probs.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = probs.iter().map(|p| floored_log(p.get(class.index()))).sum::<Result<f64>>()?;
    Ok(s / probs.len() as f64)
}

/// Value-level discriminator objective; empty kinds contribute nothing.
pub fn afvl_discriminator_loss(
    p1: &[ClassProbs],
    p2: &[ClassProbs],
    p3: &[ClassProbs],
    p4: &[ClassProbs],
) -> Result<f64> {
    Ok(mean_log(p1, TargetClass::Fake)?
        + mean_log(p2, TargetClass::Fake)?
        + mean_log(p3, TargetClass::Genuine)?
        + mean_log(p4, TargetClass::Imposter)?)
}

/// Value-level generator objective.
pub fn afvl_generator_loss(p1: &[ClassProbs], p2: &[ClassProbs]) -> Result<f64> {
    Ok(mean_log(p1, TargetClass::Genuine)? + mean_log(p2, TargetClass::Imposter)?)
}

/// `sum_j w_j p_j + lambda_c sum_i c_i - lambda_a afvl_g`; `perceptual` is ordered
/// like `weights.perceptual_layers`.
pub fn total_generator_loss(perceptual: &[f64], color: &[f64], afvl_g: f64, weights: &LossWeights) -> Result<f64> {
    if perceptual.len() != weights.perceptual_layers.len() {
        return Err(Error::Config(format!(
            "{} perceptual terms for {} configured layers",
            perceptual.len(),
            weights.perceptual_layers.len()
        )));
    }
    let p: f64 = perceptual.iter().zip(&weights.perceptual_layers).map(|(v, l)| v * l.weight).sum();
    let c: f64 = color.iter().sum();
    Ok(p + weights.lambda_c * c - weights.lambda_a * afvl_g)
}

/// Graph form of [`total_generator_loss`]; empty term lists contribute nothing.
pub fn total_generator_terms<T: Scalar>(
    g: &mut Graph<T>,
    perceptual: &[Var],
    color: &[Var],
    afvl_g: Option<Var>,
    weights: &LossWeights,
) -> Result<Var> {
    let mut parts = Vec::new();
    for (&p, l) in perceptual.iter().zip(&weights.perceptual_layers) {
        parts.push(g.scale(p, l.weight));
    }
    for &c in color {
        parts.push(g.scale(c, weights.lambda_c));
    }
    if let Some(a) = afvl_g {
        parts.push(g.scale(a, -weights.lambda_a));
    }
    sum_terms(g, parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_constant() {
        assert_eq!(LOG_FLOOR, 1e-12f64.ln());
    }

    #[test]
    fn uniform_closed_forms() {
        let u = vec![ClassProbs::uniform(); 5];
        let d = afvl_discriminator_loss(&u, &u, &u, &u).unwrap();
        let g = afvl_generator_loss(&u, &u).unwrap();
        assert!((d - 4.0 * (1.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((g - 2.0 * (1.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn certain_outputs_reach_zero() {
        let f = [ClassProbs::new(1.0, 0.0, 0.0)];
        let gen = [ClassProbs::new(0.0, 1.0, 0.0)];
        let imp = [ClassProbs::new(0.0, 0.0, 1.0)];
        assert_eq!(afvl_discriminator_loss(&f, &f, &gen, &imp).unwrap(), 0.0);
        assert_eq!(afvl_generator_loss(&gen, &imp).unwrap(), 0.0);
        // zero probability is floored, not infinite
        assert_eq!(afvl_generator_loss(&f, &[]).unwrap(), LOG_FLOOR);
    }

    #[test]
    fn invalid_probability_is_numeric_error() {
        let bad = [ClassProbs::new(f64::NAN, 0.5, 0.5)];
        assert!(matches!(afvl_discriminator_loss(&bad, &[], &[], &[]), Err(Error::Numeric(_))));
    }

    #[test]
    fn total_arithmetic() {
        let w = LossWeights {
            lambda_c: 10.0,
            lambda_a: 0.1,
            perceptual_layers: vec![LayerWeight { name: "shallow".into(), weight: 1.0 }],
            ..LossWeights::default()
        };
        let t = total_generator_loss(&[2.0], &[0.5], -1.0, &w).unwrap();
        assert!((t - 7.1).abs() < 1e-12);
    }

    #[test]
    fn color_loss_hand_example() {
        let a = ImageTensor::constant(2, 2, 0.0, ValueRange::Signed).unwrap();
        let b = ImageTensor::constant(4, 4, 1.0, ValueRange::Signed).unwrap();
        let out = MultiScaleOutput::new(vec![a, b]).unwrap();
        assert_eq!(color_consistency_loss(&out, 1.0, 0.0).unwrap(), vec![3.0]);
    }

    #[test]
    fn single_scale_color_loss_is_error() {
        let a = ImageTensor::constant(2, 2, 0.0, ValueRange::Signed).unwrap();
        let out = MultiScaleOutput::new(vec![a]).unwrap();
        assert!(color_consistency_loss(&out, 1.0, 1.0).is_err());
    }

    #[test]
    fn unknown_layer_is_config_error() {
        let e = FeatureExtractor::default();
        let img = ImageTensor::constant(8, 8, 0.5, ValueRange::Unit).unwrap();
        assert!(matches!(perceptual_loss(&e, &img, &img, "conv5_4"), Err(Error::Config(_))));
    }

    #[test]
    fn extractor_file_roundtrip() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("ext.bin");
        let e = FeatureExtractor::seeded(3);
        e.save(&path).unwrap();
        let back = FeatureExtractor::load(&path).unwrap();
        // weights pass through f32 storage
        assert_eq!(back.layer_names(), e.layer_names());
        let img = ImageTensor::constant(8, 8, 0.3, ValueRange::Unit).unwrap();
        let other = ImageTensor::constant(8, 8, 0.6, ValueRange::Unit).unwrap();
        let a = perceptual_loss(&e, &img, &other, "deep").unwrap();
        let b = perceptual_loss(&back, &img, &other, "deep").unwrap();
        assert!((a - b).abs() <= 1e-5 * a.abs());
    }

    #[test]
    fn layer_sizes() {
        let e = FeatureExtractor::default();
        assert_eq!(e.layer_numel("shallow", 4).unwrap(), 16 * 16);
        assert_eq!(e.layer_numel("deep", 4).unwrap(), 32 * 4);
    }
}
