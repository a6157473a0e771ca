//! Super-resolves LR images with a checkpoint and writes every branch.
//!
//! Usage: hallucinate [checkpoint] [out_dir]; without a checkpoint an untrained
//! 16 -> 128 generator is used.

use std::path::PathBuf;

use halluc::data::{downsample_area, synth_face, write_image, ValueRange};
use halluc::generator::{Generator, GeneratorConfig};
use halluc::training::{hallucinate, load_checkpoint};

fn main() -> halluc::Result<()> {
    let mut args = std::env::args().skip(1);
    let generator = match args.next() {
        Some(p) => load_checkpoint(&PathBuf::from(p))?.generator,
        None => Generator::new(&GeneratorConfig::default(), 0)?,
    };
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("halluc_sr"));
    let cfg = generator.config().clone();
    let face = synth_face(11, 0, cfg.hr_size())?;
    let lr = downsample_area(&face, cfg.scale_factor.value())?;

    let written = hallucinate(&generator, &[("face".into(), lr.clone())], &out)?;
    println!("final branch: {}", written[0].display());
    let branches = generator.generate(&lr.to_range(ValueRange::Signed))?;
    for img in branches.images() {
        let side = img.height();
        let path = out.join(format!("face_{side}.png"));
        write_image(&img.to_range(ValueRange::Unit), 0, &path)?;
        println!("branch {side}x{side}: {}", path.display());
    }
    Ok(())
}
