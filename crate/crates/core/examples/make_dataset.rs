//! Renders a small synthetic face corpus and loads it back from disk.
//!
//! Usage: make_dataset [out_dir]

use std::path::PathBuf;

use halluc::data::{load_dataset, write_synthetic_dataset, ScaleFactor};

fn main() -> halluc::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("halluc_faces"));
    let files = write_synthetic_dataset(6, 4, 64, 0, &out)?;
    println!("wrote {} images under {}", files.len(), out.display());

    let ds = load_dataset(&out, 64, ScaleFactor::X4)?;
    println!("{} identities, {} images", ds.identity_count(), ds.len());
    for r in ds.records().take(5) {
        println!("  identity {} ordinal {} id {}", r.identity_id, r.ordinal, r.image_id);
    }
    let (hr, lr) = (ds.hr(0)?, ds.lr(0)?);
    println!("first pair: HR {}x{}, LR {}x{}", hr.height(), hr.width(), lr.height(), lr.width());
    Ok(())
}
