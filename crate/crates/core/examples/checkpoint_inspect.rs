//! Prints the contents of a checkpoint: header, parameter blocks and loss history.
//!
//! Usage: checkpoint_inspect <checkpoint>

use std::path::PathBuf;

use halluc::container::Container;
use halluc::training::Checkpoint;

fn main() -> halluc::Result<()> {
    let path = PathBuf::from(std::env::args().nth(1).expect("usage: checkpoint_inspect <checkpoint>"));
    let raw = Container::load(&path)?;
    let ckpt = Checkpoint::from_container(&raw)?;
    println!("header:\n{}", raw.header);
    let hex: String = raw.fingerprint.iter().map(|b| format!("{b:02x}")).collect();
    println!("config fingerprint {hex}");
    println!("{} blocks:", raw.blocks.len());
    for (name, t) in raw.blocks.iter().filter(|(n, _)| !n.starts_with("opt/")) {
        println!("  {name:<40} {:?}", t.shape());
    }
    println!(
        "generator {} trainable scalars, step {}, {} history rows",
        ckpt.generator.trainable_count(),
        ckpt.step,
        ckpt.history.len()
    );
    if let Some(r) = ckpt.history.last() {
        println!("last row: {:?}", r.to_row());
    }
    Ok(())
}
