//! Multi-branch residual generator: LR face in, one image per x2 upsampling stage out.

use halluc_tensor::{BatchStats, Bound, Graph, ParamStore, Scalar, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ImageTensor, ScaleFactor, ValueRange};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv, Mode, PRelu};

pub(crate) const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub lr_size: usize,
    pub scale_factor: ScaleFactor,
    pub base_channels: usize,
    /// Residual blocks at LR resolution, before the first upsampling.
    pub residual_blocks_per_stage: usize,
    /// Residual blocks between consecutive upsamplings.
    pub blocks_between_upsamples: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            lr_size: 16,
            scale_factor: ScaleFactor::X8,
            base_channels: 64,
            residual_blocks_per_stage: 4,
            blocks_between_upsamples: 2,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_size == 0 || self.base_channels == 0 {
            return Err(Error::Config(
                "generator lr_size and base_channels must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn hr_size(&self) -> usize {
        self.lr_size * self.scale_factor.value()
    }

    pub fn num_branches(&self) -> usize {
        self.scale_factor.stages()
    }

    /// Side length of every branch, smallest first.
    pub fn branch_sizes(&self) -> Vec<usize> {
        (1..=self.num_branches()).map(|s| self.lr_size << s).collect()
    }
}

/// Generator outputs, strictly doubling in size, all in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleOutput {
    images: Vec<ImageTensor>,
}

impl MultiScaleOutput {
    pub fn new(images: Vec<ImageTensor>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::shape("multi-scale output needs at least one image"));
        }
        for w in images.windows(2) {
            if w[1].height() != 2 * w[0].height()
                || w[1].width() != 2 * w[0].width()
                || w[1].batch() != w[0].batch()
            {
                return Err(Error::shape(format!(
                    "scales must double: {}x{} then {}x{}",
                    w[0].height(),
                    w[0].width(),
                    w[1].height(),
                    w[1].width()
                )));
            }
        }
        Ok(Self { images })
    }

    pub fn images(&self) -> &[ImageTensor] {
        &self.images
    }

    pub fn into_images(self) -> Vec<ImageTensor> {
        self.images
    }

    /// The largest output, the HR estimate.
    pub fn final_image(&self) -> &ImageTensor {
        self.images.last().unwrap()
    }
}

/// `x + bn(conv(prelu(bn(conv(x)))))`, shape preserving.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub act: PRelu,
    pub conv2: Conv,
    pub bn2: BatchNorm,
}

impl ResidualBlock {
    pub(crate) fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            conv1: Conv::new(store, &format!("{name}.conv1"), channels, channels, 3, 1, rng),
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), channels),
            act: PRelu::new(store, &format!("{name}.act"), channels),
            conv2: Conv::new(store, &format!("{name}.conv2"), channels, channels, 3, 1, rng),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), channels),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
        stats: &mut Vec<(BatchNorm, BatchStats<T>)>,
    ) -> Result<Var> {
        let h = self.conv1.forward(g, p, x)?;
        let h = self.bn1.forward(g, p, store, h, mode, stats)?;
        let h = self.act.forward(g, p, h)?;
        let h = self.conv2.forward(g, p, h)?;
        let h = self.bn2.forward(g, p, store, h, mode, stats)?;
        Ok(g.add(x, h)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct UpStage {
    blocks: Vec<ResidualBlock>,
    up: Conv,
    act: PRelu,
    head: Conv,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    input: Conv,
    input_act: PRelu,
    trunk: Vec<ResidualBlock>,
    stages: Vec<UpStage>,
}

/// Graph nodes of one forward pass.
pub struct GeneratorForward<T> {
    /// Branch outputs, smallest first, each `(n, 3, s, s)` in `[-1, 1]`.
    pub outputs: Vec<Var>,
    /// Batch statistics of every normalization layer (training mode only).
    pub stats: Vec<(BatchNorm, BatchStats<T>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T: Scalar = f32> {
    config: GeneratorConfig,
    params: ParamStore<T>,
    layout: Layout,
}

/// Deterministic generator for `(config, init_seed)`.
pub fn build_generator(config: &GeneratorConfig, init_seed: u64) -> Result<Generator<f32>> {
    Generator::new(config, init_seed)
}

impl<T: Scalar> Generator<T> {
    pub fn new(config: &GeneratorConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut store = ParamStore::new();
        let c = config.base_channels;
        let input = Conv::new(&mut store, "input.conv", 3, c, 3, 1, &mut rng);
        let input_act = PRelu::new(&mut store, "input.act", c);
        let trunk = (0..config.residual_blocks_per_stage)
            .map(|i| ResidualBlock::new(&mut store, &format!("trunk.{i}"), c, &mut rng))
            .collect();
        let stages = (0..config.num_branches())
            .map(|s| {
                let blocks = if s == 0 {
                    Vec::new()
                } else {
                    (0..config.blocks_between_upsamples)
                        .map(|i| {
                            ResidualBlock::new(&mut store, &format!("stage{s}.block{i}"), c, &mut rng)
                        })
                        .collect()
                };
                let up = Conv::new(&mut store, &format!("stage{s}.up"), c, 4 * c, 3, 1, &mut rng);
                let act = PRelu::new(&mut store, &format!("stage{s}.act"), c);
                let head = Conv::new(&mut store, &format!("branch{s}.conv"), c, 3, 3, 1, &mut rng);
                UpStage { blocks, up, act, head }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            params: store,
            layout: Layout { input, input_act, trunk, stages },
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.trainable_count()
    }

    pub fn cast<U: Scalar>(&self) -> Generator<U> {
        Generator {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// The residual blocks in evaluation order.
    pub fn residual_blocks(&self) -> impl Iterator<Item = &ResidualBlock> {
        self.layout
            .trunk
            .iter()
            .chain(self.layout.stages.iter().flat_map(|s| s.blocks.iter()))
    }

    /// Builds the forward pass on `lr: (n, 3, lr, lr)` with parameters bound as `p`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, lr: Var, mode: Mode) -> Result<GeneratorForward<T>> {
        let (_, c, h, w) = g.value(lr).dims4()?;
        let s = self.config.lr_size;
        if c != 3 || h != s || w != s {
            return Err(Error::shape(format!(
                "generator expects (n, 3, {s}, {s}) input, got {:?}",
                g.shape(lr)
            )));
        }
        let mut stats = Vec::new();
        let l = &self.layout;
        let mut x = l.input.forward(g, p, lr)?;
        x = l.input_act.forward(g, p, x)?;
        for b in &l.trunk {
            x = b.forward(g, p, &self.params, x, mode, &mut stats)?;
        }
        let mut outputs = Vec::with_capacity(l.stages.len());
        for stage in &l.stages {
            for b in &stage.blocks {
                x = b.forward(g, p, &self.params, x, mode, &mut stats)?;
            }
            x = stage.up.forward(g, p, x)?;
            x = g.pixel_shuffle(x, 2)?;
            x = stage.act.forward(g, p, x)?;
            let head = stage.head.forward(g, p, x)?;
            outputs.push(g.tanh(head));
        }
        Ok(GeneratorForward { outputs, stats })
    }

    /// Folds training-mode batch statistics into the running buffers.
    pub fn update_running_stats(&mut self, stats: &[(BatchNorm, BatchStats<T>)]) {
        for (bn, s) in stats {
            bn.update(&mut self.params, s, BN_MOMENTUM);
        }
    }

    /// Inference on a `[-1, 1]` LR batch using stored normalization statistics.
    pub fn generate(&self, lr: &ImageTensor) -> Result<MultiScaleOutput> {
        if lr.range() != ValueRange::Signed {
            return Err(Error::Input("generator input must be in [-1, 1]".into()));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(lr.tensor().cast());
        let fwd = self.forward(&mut g, &p, x, Mode::Eval)?;
        let images = fwd
            .outputs
            .iter()
            .map(|&o| ImageTensor::clamped(g.value(o).cast(), ValueRange::Signed))
            .collect::<Result<Vec<_>>>()?;
        MultiScaleOutput::new(images)
    }
}

/// Inference entry point: `gen` applied to `lr` in evaluation mode.
pub fn generate(gen: &Generator<f32>, lr: &ImageTensor) -> Result<MultiScaleOutput> {
    gen.generate(lr)
}
