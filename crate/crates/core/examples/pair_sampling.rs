//! Draws a training batch and shows the four pair kinds and their labels.

use halluc::data::{prepare_batch, DatasetHandle, PairMix, ScaleFactor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> halluc::Result<()> {
    let ds = DatasetHandle::synthetic(5, 3, 32, ScaleFactor::X4, 7)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = prepare_batch(&ds, &PairMix::even(8), 2, &mut rng)?;
    for p in &batch.pairs {
        println!(
            "{:?}: left {} (identity {}) right {} (identity {}) -> {:?}",
            p.kind,
            ds.record(p.left_record).image_id,
            p.left_identity,
            ds.record(p.right_record).image_id,
            p.right_identity,
            p.target_class
        );
    }
    println!("{} rows need the generator", batch.generated_rows);
    for (k, l) in batch.left.iter().enumerate() {
        println!("left scale {k}: {}x{}", l.height(), l.width());
    }
    Ok(())
}
