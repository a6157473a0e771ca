//! Alternating adversarial optimization with checkpointing and a per-step run log.

mod checkpoint;
mod optim;

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use halluc_tensor::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{config_fingerprint, load_checkpoint, save_checkpoint, Checkpoint, HISTORY_TAIL};
pub use optim::{clip_grad_norm, Adam, OptimizerConfig};

use crate::data::{mix_seed, prepare_batch, sample_pair, write_image, DatasetHandle, ImageTensor, PairKind, PairMix, ValueRange};
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::losses::{
    afvl_discriminator_terms, afvl_generator_terms, color_terms, perceptual_terms, total_generator_loss,
    total_generator_terms, FeatureExtractor, LossWeights,
};
use crate::nn::Mode;

pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
/// Global-norm bound used when clipping is switched on without an explicit value.
pub const DEFAULT_GRAD_CLIP: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub d_steps_per_g_step: usize,
    pub seed: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Global gradient-norm bound; absent means no clipping.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    /// Color term `i` (between branches `i` and `i + 1`) joins the loss at step
    /// `(i + 1) * branch_warmup`; 0 enables every term from the start.
    pub branch_warmup: u64,
    /// Feature-extractor weight file; absent means the built-in extractor.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extractor: Option<String>,
    pub pair_mix: PairMix,
    pub optimizer: OptimizerConfig,
    pub loss_weights: LossWeights,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            d_steps_per_g_step: 1,
            seed: 0,
            checkpoint_every: 0,
            grad_clip: None,
            branch_warmup: 0,
            extractor: None,
            pair_mix: PairMix::even(8),
            optimizer: OptimizerConfig::default(),
            loss_weights: LossWeights::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Small 16 -> 64 setup that trains in minutes on one core.
    pub fn toy(steps: u64) -> Self {
        let mut c = Self {
            steps,
            batch_size: 16,
            pair_mix: PairMix::even(16),
            seed: 1,
            generator: GeneratorConfig {
                lr_size: 16,
                scale_factor: crate::data::ScaleFactor::X4,
                base_channels: 32,
                residual_blocks_per_stage: 4,
                blocks_between_upsamples: 1,
            },
            discriminator: DiscriminatorConfig { hr_size: 64, num_scales: 2, base_channels: 16, leaky_slope: 0.2 },
            ..Self::default()
        };
        c.optimizer.lr_g = 2e-3;
        c.loss_weights.lambda_a = 1e-4;
        c.loss_weights.lambda_c = 0.01;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.pair_mix.total() != self.batch_size {
            return Err(Error::Config(format!(
                "pair_mix sums to {} but batch_size is {}",
                self.pair_mix.total(),
                self.batch_size
            )));
        }
        if self.pair_mix.generated() == 0 {
            return Err(Error::Config("pair_mix needs at least one P1 or P2 pair to train the generator".into()));
        }
        if self.d_steps_per_g_step == 0 {
            return Err(Error::Config("d_steps_per_g_step must be at least 1".into()));
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed must be at most {}", i64::MAX)));
        }
        let o = &self.optimizer;
        for (name, v) in [("lr_g", o.lr_g), ("lr_d", o.lr_d), ("eps", o.eps)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        for (name, v) in [("beta1", o.beta1), ("beta2", o.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be > 0, got {c}")));
            }
        }
        self.loss_weights.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        let g = &self.generator;
        let d = &self.discriminator;
        if d.hr_size != g.hr_size() {
            return Err(Error::Config(format!(
                "discriminator hr_size {} differs from generator output size {}",
                d.hr_size,
                g.hr_size()
            )));
        }
        if d.num_scales > g.num_branches() {
            return Err(Error::Config(format!(
                "discriminator uses {} scales but the generator has {} branches",
                d.num_scales,
                g.num_branches()
            )));
        }
        if g.num_branches() < 2 && self.loss_weights.lambda_c != 0.0 {
            return Err(Error::Config("color consistency needs at least two generator branches".into()));
        }
        Ok(())
    }

    /// Initialization seeds of the generator and discriminator.
    pub fn init_seeds(&self) -> (u64, u64) {
        (mix_seed(self.seed, 1), mix_seed(self.seed, 2))
    }

    fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, 3));
        rng.set_stream(step);
        rng
    }

    fn color_term_count(&self) -> usize {
        self.generator.num_branches().saturating_sub(1)
    }

    /// Column names of a history row.
    pub fn history_columns(&self) -> Vec<String> {
        let mut cols = vec!["step".to_string()];
        cols.extend(self.loss_weights.perceptual_layers.iter().map(|l| format!("perceptual_{}", l.name)));
        cols.extend((0..self.color_term_count()).map(|i| format!("color_{i}")));
        cols.extend(["afvl_g", "afvl_d", "total"].map(String::from));
        cols
    }

    pub fn load_extractor(&self) -> Result<FeatureExtractor> {
        let ext = match &self.extractor {
            Some(p) => FeatureExtractor::load(Path::new(p))?,
            None => FeatureExtractor::default(),
        };
        let names = ext.layer_names();
        for l in &self.loss_weights.perceptual_layers {
            if !names.contains(&l.name.as_str()) {
                return Err(Error::Config(format!(
                    "perceptual layer {} is not in the extractor (has {names:?})",
                    l.name
                )));
            }
        }
        Ok(ext)
    }
}

/// Loss components of one completed step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// Completed step count, starting at 1.
    pub step: u64,
    /// Unweighted perceptual terms, ordered like the configured layers.
    pub perceptual: Vec<f64>,
    /// Color terms as they entered the loss (0 while warming up).
    pub color: Vec<f64>,
    /// Generator face-verification objective.
    pub afvl_g: f64,
    /// Discriminator objective at its last update of the step.
    pub afvl_d: f64,
    /// Total generator loss.
    pub total: f64,
}

impl StepRecord {
    pub fn to_row(&self) -> Vec<f64> {
        let mut r = vec![self.step as f64];
        r.extend(&self.perceptual);
        r.extend(&self.color);
        r.extend([self.afvl_g, self.afvl_d, self.total]);
        r
    }

    pub fn from_row(row: &[f64], config: &TrainConfig) -> Result<Self> {
        let np = config.loss_weights.perceptual_layers.len();
        let nc = config.color_term_count();
        if row.len() != np + nc + 4 {
            return Err(Error::Integrity(format!("history row has {} columns", row.len())));
        }
        Ok(Self {
            step: row[0] as u64,
            perceptual: row[1..1 + np].to_vec(),
            color: row[1 + np..1 + np + nc].to_vec(),
            afvl_g: row[1 + np + nc],
            afvl_d: row[2 + np + nc],
            total: row[3 + np + nc],
        })
    }

    /// Total recomputed from the components.
    pub fn recomputed_total(&self, weights: &LossWeights) -> Result<f64> {
        total_generator_loss(&self.perceptual, &self.color, self.afvl_g, weights)
    }
}

fn check_finite(v: f64, term: &str, step: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { term: term.to_string(), step })
    }
}

fn check_grads(grads: &[Option<Tensor<f32>>], term: &str, step: u64) -> Result<()> {
    if grads.iter().flatten().all(|g| g.all_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { term: term.to_string(), step })
    }
}

/// Checks that every nonzero pair kind can be sampled from `ds`.
pub fn check_dataset(config: &TrainConfig, ds: &DatasetHandle) -> Result<()> {
    if ds.hr_size() != config.generator.hr_size() || ds.scale() != config.generator.scale_factor {
        return Err(Error::Config(format!(
            "dataset is {} px at x{}, config expects {} px at x{}",
            ds.hr_size(),
            ds.scale().value(),
            config.generator.hr_size(),
            config.generator.scale_factor.value()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for kind in PairKind::ALL {
        if config.pair_mix.count(kind) > 0 {
            sample_pair(ds, kind, &mut rng)?;
        }
    }
    Ok(())
}

/// Owns both networks and their optimizers.
pub struct Trainer {
    state: Checkpoint,
    extractor: FeatureExtractor,
    dataset: DatasetHandle,
}

impl Trainer {
    pub fn new(config: TrainConfig, dataset: DatasetHandle) -> Result<Self> {
        config.validate()?;
        let (gs, ds) = config.init_seeds();
        let generator = Generator::new(&config.generator, gs)?;
        let discriminator = Discriminator::new(&config.discriminator, ds)?;
        let state = Checkpoint {
            opt_g: Adam::new(generator.params()),
            opt_d: Adam::new(discriminator.params()),
            config,
            step: 0,
            generator,
            discriminator,
            history: Vec::new(),
        };
        Self::from_checkpoint(state, dataset)
    }

    /// Continues from `state`; its config governs the run.
    pub fn from_checkpoint(state: Checkpoint, dataset: DatasetHandle) -> Result<Self> {
        state.config.validate()?;
        check_dataset(&state.config, &dataset)?;
        let extractor = state.config.load_extractor()?;
        Ok(Self { state, extractor, dataset })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.state.config
    }

    pub fn state(&self) -> &Checkpoint {
        &self.state
    }

    pub fn into_state(self) -> Checkpoint {
        self.state
    }

    /// Replaces the run length; other fields are fixed by the checkpoint.
    pub fn set_steps(&mut self, steps: u64, checkpoint_every: u64) {
        self.state.config.steps = steps;
        self.state.config.checkpoint_every = checkpoint_every;
    }

    /// One discriminator phase followed by one generator update.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step_index = self.state.step;
        let step_no = step_index + 1;
        let cfg = self.state.config.clone();
        let num_scales = cfg.discriminator.num_scales;
        let mut rng = cfg.step_rng(step_index);
        let inputs = prepare_batch(&self.dataset, &cfg.pair_mix, num_scales, &mut rng)?;
        let kinds: Vec<PairKind> = inputs.pairs.iter().map(|p| p.kind).collect();
        let ng = inputs.generated_rows;
        let lr = inputs.generator_lr.as_ref().expect("validated mix has generated rows");

        // generator forward, kept for the generator update
        let mut g = Graph::<f32>::new();
        let gp = self.state.generator.params().bind(&mut g, true);
        let lr_var = g.constant(lr.tensor().clone());
        let fwd = self.state.generator.forward(&mut g, &gp, lr_var, Mode::Train)?;
        let outputs = fwd.outputs.clone();
        let last = outputs.len() - 1;
        self.state.generator.update_running_stats(&fwd.stats);

        // discriminator phase on detached generator outputs
        let scale_right: Vec<Tensor<f32>> = (0..num_scales)
            .map(|k| {
                let fake = g.value(outputs[last - k]);
                match &inputs.real_right {
                    Some(real) => Tensor::concat_batch(&[fake, real[k].tensor()]).map_err(Error::from),
                    None => Ok(fake.clone()),
                }
            })
            .collect::<Result<_>>()?;
        let mut afvl_d = 0.0;
        for _ in 0..cfg.d_steps_per_g_step {
            let mut dg = Graph::<f32>::new();
            let dp = self.state.discriminator.params().bind(&mut dg, true);
            let scales = (0..num_scales)
                .map(|k| {
                    let l = dg.constant(inputs.left[k].tensor().clone());
                    let r = dg.constant(scale_right[k].clone());
                    dg.concat_channels(&[l, r]).map_err(Error::from)
                })
                .collect::<Result<Vec<Var>>>()?;
            let lp = self.state.discriminator.forward(&mut dg, &dp, &scales)?;
            if !dg.value(lp).all_finite() {
                return Err(Error::NonFinite { term: "discriminator output".into(), step: step_no });
            }
            let obj = afvl_discriminator_terms(&mut dg, lp, &kinds)?;
            afvl_d = check_finite(dg.item(obj), "afvl_d", step_no)?;
            let loss = dg.scale(obj, -1.0);
            dg.backward(loss)?;
            let mut grads = self.state.discriminator.params().collect_grads(&dg, &dp);
            check_grads(&grads, "discriminator gradient", step_no)?;
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            self.state.opt_d.step(self.state.discriminator.params_mut(), &grads, cfg.optimizer.lr_d, &cfg.optimizer);
            if !self.state.discriminator.params().all_finite() {
                return Err(Error::NonFinite { term: "discriminator parameters".into(), step: step_no });
            }
        }

        // generator update through the refreshed discriminator held constant
        let target = inputs
            .generator_target
            .as_ref()
            .expect("generated rows have targets")
            .to_range(ValueRange::Signed);
        let target = g.constant(target.tensor().clone());
        let w = &cfg.loss_weights;
        let perceptual = perceptual_terms(&mut g, &self.extractor, outputs[last], target, &w.perceptual_layers)?;
        let mut color = Vec::new();
        let mut color_values = Vec::new();
        if cfg.color_term_count() > 0 {
            let terms = color_terms(&mut g, &outputs, w.lambda_1, w.lambda_2)?;
            for (i, t) in terms.into_iter().enumerate() {
                if step_index >= (i as u64 + 1) * cfg.branch_warmup {
                    color_values.push(check_finite(g.item(t), &format!("color_{i}"), step_no)?);
                    color.push(t);
                } else {
                    color_values.push(0.0);
                }
            }
        }
        let dp = self.state.discriminator.params().bind(&mut g, false);
        let rows: Vec<usize> = (0..ng).collect();
        let scales = (0..num_scales)
            .map(|k| {
                let left = inputs.left[k].tensor().select_batch(&rows)?;
                let l = g.constant(left);
                g.concat_channels(&[l, outputs[last - k]]).map_err(Error::from)
            })
            .collect::<Result<Vec<Var>>>()?;
        let lp = self.state.discriminator.forward(&mut g, &dp, &scales)?;
        if !g.value(lp).all_finite() {
            return Err(Error::NonFinite { term: "discriminator output".into(), step: step_no });
        }
        let afvl = afvl_generator_terms(&mut g, lp, &kinds[..ng])?;
        let total = total_generator_terms(&mut g, &perceptual, &color, Some(afvl), w)?;
        let record = StepRecord {
            step: step_no,
            perceptual: perceptual
                .iter()
                .zip(&w.perceptual_layers)
                .map(|(&p, l)| check_finite(g.item(p), &format!("perceptual_{}", l.name), step_no))
                .collect::<Result<_>>()?,
            color: color_values,
            afvl_g: check_finite(g.item(afvl), "afvl_g", step_no)?,
            afvl_d,
            total: check_finite(g.item(total), "total", step_no)?,
        };
        g.backward(total)?;
        let mut grads = self.state.generator.params().collect_grads(&g, &gp);
        check_grads(&grads, "generator gradient", step_no)?;
        if let Some(c) = cfg.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        self.state.opt_g.step(self.state.generator.params_mut(), &grads, cfg.optimizer.lr_g, &cfg.optimizer);
        if !self.state.generator.params().all_finite() {
            return Err(Error::NonFinite { term: "generator parameters".into(), step: step_no });
        }

        self.state.step = step_no;
        self.state.history.push(record.clone());
        if self.state.history.len() > HISTORY_TAIL {
            let excess = self.state.history.len() - HISTORY_TAIL;
            self.state.history.drain(..excess);
        }
        Ok(record)
    }

    /// Steps until `config.steps`, logging to `out_dir` and checkpointing on schedule.
    pub fn run(&mut self, out_dir: &Path) -> Result<Checkpoint> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let mut log = RunLog::open(out_dir, &self.state.config, self.state.step)?;
        let every = self.state.config.checkpoint_every;
        while self.state.step < self.state.config.steps {
            let t0 = Instant::now();
            let rec = self.step()?;
            log.append(&rec, t0.elapsed().as_secs_f64() * 1e3)?;
            if rec.step % 50 == 0 {
                log::info!("step {} total {:.5}", rec.step, rec.total);
            }
            if every > 0 && rec.step % every == 0 {
                save_checkpoint(&self.state, &out_dir.join(format!("ckpt_{:06}.ckpt", rec.step)))?;
            }
        }
        save_checkpoint(&self.state, &out_dir.join(FINAL_CHECKPOINT))?;
        Ok(self.state.clone())
    }
}

/// Delimited per-step log; on resume, rows past the resumed step are dropped.
struct RunLog {
    file: File,
    path: PathBuf,
}

impl RunLog {
    fn open(dir: &Path, config: &TrainConfig, resume_step: u64) -> Result<Self> {
        let path = dir.join(LOG_FILE);
        let mut header = config.history_columns();
        header.push("wall_ms".into());
        let header = header.join(",");
        let mut kept = vec![header.clone()];
        if resume_step > 0 && path.exists() {
            let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
            for line in BufReader::new(f).lines().skip(1) {
                let line = line.map_err(|e| Error::io(&path, e))?;
                let step: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
                if step.is_some_and(|s| s <= resume_step) {
                    kept.push(line);
                }
            }
        }
        let mut file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        for l in &kept {
            writeln!(file, "{l}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(Self { file, path })
    }

    fn append(&mut self, rec: &StepRecord, wall_ms: f64) -> Result<()> {
        let mut fields: Vec<String> = vec![rec.step.to_string()];
        fields.extend(rec.to_row()[1..].iter().map(|v| format!("{v:e}")));
        fields.push(format!("{wall_ms:.3}"));
        writeln!(self.file, "{}", fields.join(",")).map_err(|e| Error::io(&self.path, e))
    }
}

/// Trains from initialization; writes the run log, scheduled checkpoints and `final.ckpt`.
pub fn train(config: TrainConfig, dataset: &DatasetHandle, out_dir: &Path) -> Result<Checkpoint> {
    Trainer::new(config, dataset.clone())?.run(out_dir)
}

/// Continues `ckpt` to `config.steps`. Everything except the run length must
/// match the checkpoint's config.
pub fn resume(ckpt: Checkpoint, config: &TrainConfig, dataset: &DatasetHandle, out_dir: &Path) -> Result<Checkpoint> {
    if config_fingerprint(config)? != ckpt.fingerprint()? {
        return Err(Error::Config("config fingerprint does not match the checkpoint".into()));
    }
    let mut t = Trainer::from_checkpoint(ckpt, dataset.clone())?;
    t.set_steps(config.steps, config.checkpoint_every);
    t.run(out_dir)
}

/// Super-resolves `[0, 1]` LR images and writes the final branch of each as
/// `<name>.png` in `out_dir`, in input order.
pub fn hallucinate(generator: &Generator<f32>, inputs: &[(String, ImageTensor)], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let s = generator.config().lr_size;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::with_capacity(inputs.len());
    for (name, img) in inputs {
        if img.batch() != 1 || img.height() != s || img.width() != s {
            return Err(Error::Size(format!(
                "{name}: expected a {s}x{s} image, got {}x{}",
                img.height(),
                img.width()
            )));
        }
        let out = generator.generate(&img.to_range(ValueRange::Signed))?;
        let path = out_dir.join(format!("{name}.png"));
        write_image(out.final_image(), 0, &path)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ScaleFactor;

    pub(crate) fn tiny_config() -> TrainConfig {
        TrainConfig {
            steps: 3,
            batch_size: 4,
            pair_mix: PairMix::even(4),
            seed: 7,
            generator: GeneratorConfig {
                lr_size: 4,
                scale_factor: ScaleFactor::X4,
                base_channels: 4,
                residual_blocks_per_stage: 1,
                blocks_between_upsamples: 1,
            },
            discriminator: DiscriminatorConfig { hr_size: 16, num_scales: 2, base_channels: 4, leaky_slope: 0.2 },
            ..TrainConfig::default()
        }
    }

    fn tiny_dataset() -> DatasetHandle {
        DatasetHandle::synthetic(3, 2, 16, ScaleFactor::X4, 5).unwrap()
    }

    #[test]
    fn config_toml_roundtrip() {
        let mut c = tiny_config();
        c.grad_clip = Some(10.0);
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<TrainConfig>(&text).unwrap(), c);
    }

    #[test]
    fn steps_record_consistent_totals() {
        let mut t = Trainer::new(tiny_config(), tiny_dataset()).unwrap();
        for i in 1..=2 {
            let r = t.step().unwrap();
            assert_eq!(r.step, i);
            let recomputed = r.recomputed_total(&t.config().loss_weights).unwrap();
            assert!((recomputed - r.total).abs() <= 1e-6 * r.total.abs().max(1.0));
        }
    }

    #[test]
    fn updates_touch_only_their_network() {
        let mut t = Trainer::new(tiny_config(), tiny_dataset()).unwrap();
        let before = t.state().clone();
        t.step().unwrap();
        let after = t.state();
        assert_ne!(before.generator.params(), after.generator.params());
        assert_ne!(before.discriminator.params(), after.discriminator.params());
        assert_eq!(after.opt_d.t, 1);
        assert_eq!(after.opt_g.t, 1);
    }

    #[test]
    fn rejects_bad_mix() {
        let mut c = tiny_config();
        c.pair_mix = PairMix::new(0, 0, 2, 2);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.pair_mix = PairMix::new(1, 1, 1, 2);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
