//! Trains on a synthetic corpus and compares held-out quality against bicubic upsampling.
//!
//! Usage: toy_reproduction [steps] [out_dir]

use std::path::PathBuf;

use halluc::data::{DatasetHandle, ScaleFactor};
use halluc::metrics::{evaluate_corpus, BicubicUpsampler, EvalOptions, ProjectionEmbedder};
use halluc::training::{train, TrainConfig};

fn main() -> halluc::Result<()> {
    env_logger::Builder::new().filter_level(log::LevelFilter::Info).init();
    let mut args = std::env::args().skip(1);
    let steps = args.next().map(|s| s.parse().expect("steps")).unwrap_or(2000);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("halluc_toy"));

    let ds = DatasetHandle::synthetic(32, 8, 64, ScaleFactor::X4, 2024)?;
    let (train_set, test_set) = ds.split_by_ordinal(6)?;
    let t0 = std::time::Instant::now();
    let ckpt = train(TrainConfig::toy(steps), &train_set, &out)?;
    println!("trained {steps} steps in {:.1}s", t0.elapsed().as_secs_f64());

    let embedder = ProjectionEmbedder::default();
    let opts = EvalOptions::default();
    let ours = evaluate_corpus(&ckpt.generator, &test_set, Some(&embedder), &opts)?;
    let base = evaluate_corpus(&BicubicUpsampler(4), &test_set, Some(&embedder), &opts)?;
    println!("{}", ours.summary());
    println!("{}", base.summary());
    Ok(())
}
