//! Scores interpolation baselines on a synthetic corpus, with identity metrics.

use halluc::data::{DatasetHandle, ScaleFactor};
use halluc::metrics::{
    evaluate_corpus, BicubicUpsampler, BilinearUpsampler, ConstantGray, EvalOptions, PerfectOracle,
    ProjectionEmbedder, SuperResolver,
};

fn main() -> halluc::Result<()> {
    let ds = DatasetHandle::synthetic(8, 4, 64, ScaleFactor::X4, 3)?;
    let embedder = ProjectionEmbedder::default();
    let opts = EvalOptions::default();
    let oracle = PerfectOracle::from_dataset(&ds)?;
    let methods: [&dyn SuperResolver; 4] = [&ConstantGray(4), &BilinearUpsampler(4), &BicubicUpsampler(4), &oracle];
    for m in methods {
        println!("{}", evaluate_corpus(m, &ds, Some(&embedder), &opts)?.summary());
    }
    let report = evaluate_corpus(&BicubicUpsampler(4), &ds, Some(&embedder), &opts)?;
    println!("\n{}", report.to_table());
    Ok(())
}
