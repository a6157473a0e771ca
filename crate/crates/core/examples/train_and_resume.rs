//! Trains a tiny model with periodic checkpoints, then resumes it for more steps.
//!
//! Usage: train_and_resume [out_dir]

use std::path::PathBuf;

use halluc::data::{DatasetHandle, PairMix, ScaleFactor};
use halluc::discriminator::DiscriminatorConfig;
use halluc::generator::GeneratorConfig;
use halluc::training::{load_checkpoint, resume, train, TrainConfig, LOG_FILE};

fn main() -> halluc::Result<()> {
    env_logger::Builder::new().filter_level(log::LevelFilter::Info).init();
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("halluc_train"));
    let ds = DatasetHandle::synthetic(6, 4, 32, ScaleFactor::X4, 5)?;
    let mut config = TrainConfig {
        steps: 60,
        checkpoint_every: 30,
        batch_size: 8,
        pair_mix: PairMix::even(8),
        generator: GeneratorConfig {
            lr_size: 8,
            scale_factor: ScaleFactor::X4,
            base_channels: 8,
            residual_blocks_per_stage: 1,
            blocks_between_upsamples: 1,
        },
        discriminator: DiscriminatorConfig { hr_size: 32, num_scales: 2, base_channels: 8, leaky_slope: 0.2 },
        ..TrainConfig::default()
    };
    config.optimizer.lr_g = 1e-3;
    let ckpt = train(config.clone(), &ds, &out)?;
    let last = ckpt.history.last().expect("trained at least one step");
    println!("after {} steps: total {:.4}, perceptual {:?}", ckpt.step, last.total, last.perceptual);

    config.steps = 100;
    let mid = load_checkpoint(&out.join("ckpt_000060.ckpt"))?;
    let done = resume(mid, &config, &ds, &out)?;
    println!("resumed to step {}; log at {}", done.step, out.join(LOG_FILE).display());
    Ok(())
}
