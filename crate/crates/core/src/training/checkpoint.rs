use std::path::Path;

use halluc_tensor::{ParamKind, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use super::optim::Adam;
use super::{StepRecord, TrainConfig};
use crate::container::{sha256, Container};
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::Generator;

/// Rows of loss history kept in a checkpoint.
pub const HISTORY_TAIL: usize = 100_000;

/// Complete training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed steps.
    pub step: u64,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub opt_g: Adam,
    pub opt_d: Adam,
    /// The most recent [`HISTORY_TAIL`] step records.
    pub history: Vec<StepRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    step: u64,
    adam_t_g: u64,
    adam_t_d: u64,
    history_columns: Vec<String>,
    config: TrainConfig,
}

/// SHA-256 of the canonical config text with the run length fields zeroed, so a
/// run may be extended on resume.
pub fn config_fingerprint(config: &TrainConfig) -> Result<[u8; 32]> {
    let mut c = config.clone();
    c.steps = 0;
    c.checkpoint_every = 0;
    let text = toml::to_string(&c).map_err(|e| Error::Config(format!("config serialization: {e}")))?;
    Ok(sha256(text.as_bytes()))
}

fn push_store(blocks: &mut Vec<(String, Tensor<f32>)>, prefix: &str, store: &ParamStore<f32>, opt: &Adam) {
    for p in store.iter() {
        blocks.push((format!("{prefix}/{}", p.name), p.value.clone()));
    }
    for (which, moments) in [("m", &opt.m), ("v", &opt.v)] {
        for (p, t) in store.iter().zip(moments) {
            if let Some(t) = t {
                blocks.push((format!("opt/{prefix}/{which}/{}", p.name), t.clone()));
            }
        }
    }
}

fn fill_store(c: &Container, prefix: &str, store: &mut ParamStore<f32>, t: u64) -> Result<Adam> {
    let mut opt = Adam::new(store);
    opt.t = t;
    let names: Vec<(String, ParamKind)> = store.iter().map(|p| (p.name.clone(), p.kind)).collect();
    for (i, (name, kind)) in names.iter().enumerate() {
        let id = halluc_tensor::ParamId(i);
        let take = |key: String, like: &Tensor<f32>| -> Result<Tensor<f32>> {
            let b = c.block(&key)?;
            if b.shape() != like.shape() {
                return Err(Error::Integrity(format!(
                    "block {key} has shape {:?}, expected {:?}",
                    b.shape(),
                    like.shape()
                )));
            }
            Ok(b.clone())
        };
        let v = take(format!("{prefix}/{name}"), store.value(id))?;
        if *kind == ParamKind::Trainable {
            opt.m[i] = Some(take(format!("opt/{prefix}/m/{name}"), &v)?);
            opt.v[i] = Some(take(format!("opt/{prefix}/v/{name}"), &v)?);
        }
        *store.value_mut(id) = v;
    }
    Ok(opt)
}

impl Checkpoint {
    pub fn to_container(&self) -> Result<Container> {
        let mut blocks = Vec::new();
        push_store(&mut blocks, "gen", self.generator.params(), &self.opt_g);
        push_store(&mut blocks, "disc", self.discriminator.params(), &self.opt_d);
        let columns = self.config.history_columns();
        let cols = columns.len();
        let mut table = Vec::with_capacity(self.history.len() * cols);
        for r in &self.history {
            let row = r.to_row();
            if row.len() != cols {
                return Err(Error::Integrity("history row width does not match the config".into()));
            }
            table.extend(row);
        }
        let header = Header {
            kind: "checkpoint".into(),
            step: self.step,
            adam_t_g: self.opt_g.t,
            adam_t_d: self.opt_d.t,
            history_columns: columns,
            config: self.config.clone(),
        };
        Ok(Container {
            fingerprint: config_fingerprint(&self.config)?,
            header: toml::to_string(&header).map_err(|e| Error::Config(e.to_string()))?,
            blocks,
            table,
            table_cols: cols,
        })
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let header: Header =
            toml::from_str(&c.header).map_err(|e| Error::Integrity(format!("checkpoint header: {e}")))?;
        if header.kind != "checkpoint" {
            return Err(Error::Integrity(format!("expected a checkpoint, found {}", header.kind)));
        }
        let config = header.config;
        config.validate()?;
        if config_fingerprint(&config)? != c.fingerprint {
            return Err(Error::Integrity("stored fingerprint does not match stored config".into()));
        }
        if header.history_columns != config.history_columns() || c.table_cols != header.history_columns.len() {
            return Err(Error::Integrity("history columns do not match the config".into()));
        }
        let (gen_seed, disc_seed) = config.init_seeds();
        let mut generator = Generator::new(&config.generator, gen_seed)?;
        let mut discriminator = Discriminator::new(&config.discriminator, disc_seed)?;
        let opt_g = fill_store(c, "gen", generator.params_mut(), header.adam_t_g)?;
        let opt_d = fill_store(c, "disc", discriminator.params_mut(), header.adam_t_d)?;
        let history = if c.table_cols == 0 {
            Vec::new()
        } else {
            c.table
                .chunks(c.table_cols)
                .map(|r| StepRecord::from_row(r, &config))
                .collect::<Result<_>>()?
        };
        Ok(Self {
            config,
            step: header.step,
            generator,
            discriminator,
            opt_g,
            opt_d,
            history,
        })
    }

    pub fn fingerprint(&self) -> Result<[u8; 32]> {
        config_fingerprint(&self.config)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.to_container()?.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_container(&Container::load(path)?)
}
