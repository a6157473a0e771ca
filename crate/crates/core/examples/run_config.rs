//! Parses a run configuration file and shows the resolved training setup.
//!
//! Usage: run_config [config.toml]; without a path the defaults are printed.

use std::path::PathBuf;

use halluc::config::RunConfigFile;

fn main() -> halluc::Result<()> {
    let file = match std::env::args().nth(1) {
        Some(p) => RunConfigFile::load(&PathBuf::from(p))?,
        None => RunConfigFile::parse(
            "[generator]\nlr_size = 16\nscale_factor = 4\n\n[losses]\nlambda_a = 0.05\n\n[training]\nsteps = 500\n",
        )?,
    };
    let train = file.train_config()?;
    println!("{}", file.to_toml()?);
    println!(
        "generator {} -> {} with {} branches; discriminator sees {} scales",
        train.generator.lr_size,
        train.generator.hr_size(),
        train.generator.num_branches(),
        train.discriminator.num_scales
    );
    println!("history columns: {}", train.history_columns().join(", "));
    Ok(())
}
