//! Multi-scale pair discriminator over {fake, genuine, imposter}.

use halluc_tensor::{Bound, Graph, ParamKind, ParamStore, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ImageTensor, ValueRange};
use crate::error::{Error, Result};
use crate::nn::{he_normal, Conv};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub hr_size: usize,
    pub num_scales: usize,
    pub base_channels: usize,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            hr_size: 128,
            num_scales: 3,
            base_channels: 64,
            leaky_slope: 0.2,
        }
    }
}

impl DiscriminatorConfig {
    /// Number of stride-2 stages, taking `hr_size` down to 4.
    pub fn num_stages(&self) -> Result<usize> {
        let h = self.hr_size;
        if h < 4 || h % 4 != 0 || !(h / 4).is_power_of_two() {
            return Err(Error::Config(format!(
                "discriminator hr_size must be 4 * 2^k, got {h}"
            )));
        }
        Ok((h / 4).trailing_zeros() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.num_stages()?;
        if self.num_scales == 0 || self.num_scales - 1 > stages {
            return Err(Error::Config(format!(
                "num_scales {} does not fit hr_size {} ({} stages)",
                self.num_scales, self.hr_size, stages
            )));
        }
        if self.base_channels == 0 || !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(Error::Config("invalid discriminator width or slope".into()));
        }
        Ok(())
    }

    /// Side length of each input scale, full resolution first.
    pub fn scale_sizes(&self) -> Vec<usize> {
        (0..self.num_scales).map(|k| self.hr_size >> k).collect()
    }

    fn stage_width(&self, i: usize) -> usize {
        (self.base_channels << (i + 1)).min(8 * self.base_channels)
    }
}

/// Class distribution for one pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassProbs {
    pub p_fake: f64,
    pub p_genuine: f64,
    pub p_imposter: f64,
}

impl ClassProbs {
    pub fn new(p_fake: f64, p_genuine: f64, p_imposter: f64) -> Self {
        Self { p_fake, p_genuine, p_imposter }
    }

    pub fn uniform() -> Self {
        Self::new(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)
    }

    /// Probability of class index 0 (fake), 1 (genuine) or 2 (imposter).
    pub fn get(&self, class: usize) -> f64 {
        [self.p_fake, self.p_genuine, self.p_imposter][class]
    }

    pub fn sum(&self) -> f64 {
        self.p_fake + self.p_genuine + self.p_imposter
    }
}

/// Structural description of one layer, in evaluation order.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerDesc {
    pub name: String,
    pub kind: LayerKind,
    /// Spatial side length of this layer's output (1 for the head).
    pub out_size: usize,
    pub out_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv { stride: usize },
    LeakyRelu,
    /// Channel concatenation of a side branch.
    Concat,
    /// Spatial mean over the whole final map.
    GlobalMean,
    Linear,
    Softmax,
}

#[derive(Clone, Debug, PartialEq)]
struct Stage {
    conv: Conv,
    /// Side branch merged after this stage, if any.
    side: Option<Conv>,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    stem: Conv,
    stages: Vec<Stage>,
    head_w: halluc_tensor::ParamId,
    head_b: halluc_tensor::ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T: Scalar = f32> {
    config: DiscriminatorConfig,
    params: ParamStore<T>,
    layout: Layout,
}

pub fn build_discriminator(config: &DiscriminatorConfig, init_seed: u64) -> Result<Discriminator<f32>> {
    Discriminator::new(config, init_seed)
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(config: &DiscriminatorConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let n = config.num_stages()?;
        let c = config.base_channels;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut store = ParamStore::new();
        let stem = Conv::new(&mut store, "stem.conv", 6, c, 3, 1, &mut rng);
        let mut width = c;
        let mut stages = Vec::with_capacity(n);
        for i in 0..n {
            let out = config.stage_width(i);
            let conv = Conv::new(&mut store, &format!("stage{i}.conv"), width, out, 3, 2, &mut rng);
            width = out;
            // scale i + 1 has the spatial size of this stage's output
            let side = (i + 1 < config.num_scales).then(|| {
                width += c;
                Conv::new(&mut store, &format!("side{}.conv", i + 1), 6, c, 3, 1, &mut rng)
            });
            stages.push(Stage { conv, side });
        }
        let head_w = store.add(
            "head.weight",
            ParamKind::Trainable,
            he_normal(&[3, width], width, &mut rng).cast(),
        );
        let head_b = store.add("head.bias", ParamKind::Trainable, Tensor::zeros(&[3]));
        Ok(Self {
            config: config.clone(),
            params: store,
            layout: Layout { stem, stages, head_w, head_b },
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Discriminator<U> {
        Discriminator {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Every layer in evaluation order, with output sizes.
    pub fn layers(&self) -> Vec<LayerDesc> {
        let mut out = Vec::new();
        let conv = |name: &str, c: &Conv, size| LayerDesc {
            name: name.to_string(),
            kind: LayerKind::Conv { stride: c.stride },
            out_size: size,
            out_channels: c.cout,
        };
        let act = |name: &str, size, ch| LayerDesc {
            name: name.to_string(),
            kind: LayerKind::LeakyRelu,
            out_size: size,
            out_channels: ch,
        };
        let l = &self.layout;
        let mut size = self.config.hr_size;
        out.push(conv("stem.conv", &l.stem, size));
        out.push(act("stem.act", size, l.stem.cout));
        for (i, s) in l.stages.iter().enumerate() {
            size /= 2;
            out.push(conv(&format!("stage{i}.conv"), &s.conv, size));
            out.push(act(&format!("stage{i}.act"), size, s.conv.cout));
            if let Some(side) = &s.side {
                out.push(conv(&format!("side{}.conv", i + 1), side, size));
                out.push(act(&format!("side{}.act", i + 1), size, side.cout));
                out.push(LayerDesc {
                    name: format!("merge{}", i + 1),
                    kind: LayerKind::Concat,
                    out_size: size,
                    out_channels: s.conv.cout + side.cout,
                });
            }
        }
        let width = self.params.value(l.head_w).shape()[1];
        for (name, kind, ch) in [
            ("head.mean", LayerKind::GlobalMean, width),
            ("head.linear", LayerKind::Linear, 3),
            ("head.softmax", LayerKind::Softmax, 3),
        ] {
            out.push(LayerDesc { name: name.into(), kind, out_size: 1, out_channels: ch });
        }
        out
    }

    /// Log-probabilities `(n, 3)` for per-scale 6-channel pair inputs, full resolution first.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, scales: &[Var]) -> Result<Var> {
        if scales.len() != self.config.num_scales {
            return Err(Error::shape(format!(
                "discriminator expects {} scales, got {}",
                self.config.num_scales,
                scales.len()
            )));
        }
        let n = g.value(scales[0]).dims4()?.0;
        for (k, (&v, size)) in scales.iter().zip(self.config.scale_sizes()).enumerate() {
            if g.shape(v) != [n, 6, size, size] {
                return Err(Error::shape(format!(
                    "scale {k}: expected ({n}, 6, {size}, {size}), got {:?}",
                    g.shape(v)
                )));
            }
        }
        let slope = self.config.leaky_slope;
        let l = &self.layout;
        let x = l.stem.forward(g, p, scales[0])?;
        let mut x = g.leaky_relu(x, slope);
        for (i, s) in l.stages.iter().enumerate() {
            let y = s.conv.forward(g, p, x)?;
            x = g.leaky_relu(y, slope);
            if let Some(side) = &s.side {
                let f = side.forward(g, p, scales[i + 1])?;
                let f = g.leaky_relu(f, slope);
                x = g.concat_channels(&[x, f])?;
            }
        }
        let pooled = g.global_avg_pool(x)?;
        let logits = g.linear(pooled, p.var(l.head_w), p.var(l.head_b))?;
        Ok(g.log_softmax(logits)?)
    }

    /// Inference: class probabilities for a batch of pair inputs.
    pub fn discriminate(&self, scales: &[Tensor<f32>]) -> Result<Vec<ClassProbs>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let vars: Vec<Var> = scales.iter().map(|t| g.constant(t.cast())).collect();
        let lp = self.forward(&mut g, &p, &vars)?;
        Ok(log_probs_to_class_probs(g.value(lp)))
    }
}

pub(crate) fn log_probs_to_class_probs<T: Scalar>(lp: &Tensor<T>) -> Vec<ClassProbs> {
    lp.data()
        .chunks(3)
        .map(|r| ClassProbs::new(r[0].as_f64().exp(), r[1].as_f64().exp(), r[2].as_f64().exp()))
        .collect()
}

/// Channel-concatenates left and right `[-1, 1]` images at every scale.
pub fn pair_input(left: &[ImageTensor], right: &[ImageTensor]) -> Result<Vec<Tensor<f32>>> {
    if left.len() != right.len() {
        return Err(Error::shape("left and right scale counts differ"));
    }
    left.iter()
        .zip(right)
        .map(|(l, r)| {
            if l.range() != ValueRange::Signed || r.range() != ValueRange::Signed {
                return Err(Error::Input("discriminator inputs must be in [-1, 1]".into()));
            }
            let mut g = Graph::<f32>::new();
            let a = g.constant(l.tensor().clone());
            let b = g.constant(r.tensor().clone());
            let c = g.concat_channels(&[a, b])?;
            Ok(g.value(c).clone())
        })
        .collect()
}

/// Inference entry point.
pub fn discriminate(disc: &Discriminator<f32>, scales: &[Tensor<f32>]) -> Result<Vec<ClassProbs>> {
    disc.discriminate(scales)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cfg(hr: usize, scales: usize) -> DiscriminatorConfig {
        DiscriminatorConfig { hr_size: hr, num_scales: scales, base_channels: 4, leaky_slope: 0.2 }
    }

    fn random_inputs(c: &DiscriminatorConfig, n: usize, seed: u64) -> Vec<Tensor<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        c.scale_sizes()
            .iter()
            .map(|&s| {
                let v = (0..n * 6 * s * s).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                Tensor::new(&[n, 6, s, s], v).unwrap()
            })
            .collect()
    }

    #[test]
    fn side_inputs_merge_at_matching_sizes() {
        let d = build_discriminator(&cfg(128, 3), 0).unwrap();
        let merges: Vec<_> = d
            .layers()
            .into_iter()
            .filter(|l| l.kind == LayerKind::Concat)
            .map(|l| l.out_size)
            .collect();
        assert_eq!(merges, [64, 32]);
    }

    #[test]
    fn single_scale_has_no_side_branch() {
        let d = build_discriminator(&cfg(32, 1), 0).unwrap();
        assert!(d.layers().iter().all(|l| l.kind != LayerKind::Concat));
        let p = d.discriminate(&random_inputs(d.config(), 2, 1)).unwrap();
        assert_eq!(p.len(), 2);
    }

    #[test]
    fn halving_chain() {
        let d = build_discriminator(&cfg(64, 2), 0).unwrap();
        let sizes: Vec<_> = d
            .layers()
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv { stride: 2 }))
            .map(|l| l.out_size)
            .collect();
        assert_eq!(sizes, [32, 16, 8, 4]);
    }

    #[test]
    fn too_many_scales_is_config_error() {
        assert!(matches!(build_discriminator(&cfg(16, 4), 0), Err(Error::Config(_))));
        assert!(matches!(build_discriminator(&cfg(48, 1), 0), Err(Error::Config(_))));
    }

    #[test]
    fn permuted_rows_permute_outputs() {
        let c = cfg(32, 2);
        let d = build_discriminator(&c, 3).unwrap();
        let x = random_inputs(&c, 3, 2);
        let perm = [2, 0, 1];
        let xp: Vec<_> = x.iter().map(|t| t.select_batch(&perm).unwrap()).collect();
        let a = d.discriminate(&x).unwrap();
        let b = d.discriminate(&xp).unwrap();
        for (i, &j) in perm.iter().enumerate() {
            assert_eq!(b[i], a[j]);
        }
    }

    #[test]
    fn wrong_scale_is_shape_error() {
        let c = cfg(32, 2);
        let d = build_discriminator(&c, 3).unwrap();
        let x = random_inputs(&c, 1, 2);
        assert!(d.discriminate(&x[..1]).is_err());
        let bad = vec![x[0].clone(), x[0].clone()];
        assert!(d.discriminate(&bad).is_err());
    }
}
