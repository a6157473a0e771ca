//! Run configuration file: one TOML document with `data`, `generator`,
//! `discriminator`, `losses`, `training` and `eval` sections.
//!
//! Every field is optional. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::PairMix;
use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::losses::{LayerWeight, LossWeights};
use crate::training::{OptimizerConfig, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Image folder with one subdirectory per identity.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Train on the first `n` images of each identity and evaluate on the rest.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_per_identity: Option<usize>,
}

/// Discriminator settings; the input size follows the generator output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorSection {
    /// Defaults to the generator branch count, at most 3.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_scales: Option<usize>,
    pub base_channels: usize,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorSection {
    fn default() -> Self {
        let d = DiscriminatorConfig::default();
        Self { num_scales: None, base_channels: d.base_channels, leaky_slope: d.leaky_slope }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub lambda_c: f64,
    pub lambda_a: f64,
    pub lambda_1: f64,
    pub lambda_2: f64,
    /// Feature-extractor weight file; absent means the built-in extractor.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extractor: Option<String>,
    pub perceptual_layers: Vec<LayerWeight>,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lambda_c: w.lambda_c,
            lambda_a: w.lambda_a,
            lambda_1: w.lambda_1,
            lambda_2: w.lambda_2,
            extractor: None,
            perceptual_layers: w.perceptual_layers,
        }
    }
}

impl LossSection {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_c: self.lambda_c,
            lambda_a: self.lambda_a,
            lambda_1: self.lambda_1,
            lambda_2: self.lambda_2,
            perceptual_layers: self.perceptual_layers.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub steps: u64,
    pub batch_size: usize,
    /// Defaults to equal quarters of the batch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pair_mix: Option<PairMix>,
    pub d_steps_per_g_step: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    pub branch_warmup: u64,
    pub out_dir: PathBuf,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            batch_size: t.batch_size,
            pair_mix: None,
            d_steps_per_g_step: t.d_steps_per_g_step,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            grad_clip: None,
            branch_warmup: t.branch_warmup,
            out_dir: PathBuf::from("runs/latest"),
            optimizer: t.optimizer,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Embedding file for identity metrics; absent means the built-in embedder.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedder: Option<PathBuf>,
    /// Compute verification and identification metrics.
    pub identity: bool,
    pub seed: u64,
    pub ks: Vec<usize>,
    pub out_dir: PathBuf,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            embedder: None,
            identity: true,
            seed: 0,
            ks: vec![1, 5, 10],
            out_dir: PathBuf::from("runs/latest/eval"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub data: DataSection,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorSection,
    pub losses: LossSection,
    pub training: TrainingSection,
    pub eval: EvalSection,
}

impl RunConfigFile {
    /// Parse errors carry the offending line and key.
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        let d = &self.discriminator;
        DiscriminatorConfig {
            hr_size: self.generator.hr_size(),
            num_scales: d.num_scales.unwrap_or(self.generator.num_branches().min(3)),
            base_channels: d.base_channels,
            leaky_slope: d.leaky_slope,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.training;
        let c = TrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            d_steps_per_g_step: t.d_steps_per_g_step,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            grad_clip: t.grad_clip,
            branch_warmup: t.branch_warmup,
            extractor: self.losses.extractor.clone(),
            pair_mix: t.pair_mix.unwrap_or_else(|| PairMix::even(t.batch_size)),
            optimizer: t.optimizer.clone(),
            loss_weights: self.losses.weights(),
            generator: self.generator.clone(),
            discriminator: self.discriminator_config(),
        };
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrip() {
        let c = RunConfigFile::default();
        assert_eq!(RunConfigFile::parse(&c.to_toml().unwrap()).unwrap(), c);
        assert!(c.train_config().is_ok());
    }

    #[test]
    fn populated_roundtrip() {
        let mut c = RunConfigFile::default();
        c.data.path = Some("faces".into());
        c.data.train_per_identity = Some(6);
        c.discriminator.num_scales = Some(2);
        c.losses.extractor = Some("ext.ckpt".into());
        c.losses.lambda_a = 0.5;
        c.training.pair_mix = Some(PairMix::new(3, 2, 2, 1));
        c.training.grad_clip = Some(10.0);
        c.eval.embedder = Some("emb.txt".into());
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfigFile::parse(&text).unwrap(), c);
    }

    #[test]
    fn unknown_key_named() {
        let err = RunConfigFile::parse("[training]\nsteps = 3\nstepz = 4\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("stepz"), "{msg}");
        assert!(msg.contains("line 3"), "{msg}");
        let err = RunConfigFile::parse("[losses]\nlambda_q = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("lambda_q"));
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let c = RunConfigFile::parse("[generator]\nscale_factor = 4\nlr_size = 8\n").unwrap();
        let t = c.train_config().unwrap();
        assert_eq!(t.discriminator.hr_size, 32);
        assert_eq!(t.discriminator.num_scales, 2);
    }
}
