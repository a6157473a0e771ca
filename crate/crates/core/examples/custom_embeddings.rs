//! Identity metrics from an external embedding file keyed by image id.

use halluc::data::{DatasetHandle, ScaleFactor};
use halluc::metrics::{evaluate_corpus, BicubicUpsampler, EvalOptions, FileEmbedder, SR_KEY_SUFFIX};

fn main() -> halluc::Result<()> {
    let ds = DatasetHandle::synthetic(4, 3, 32, ScaleFactor::X4, 9)?;
    // one axis per identity, slightly perturbed per image
    let mut text = String::from("# image_id v1 v2 v3 v4\n");
    for (i, r) in ds.records().enumerate() {
        let v: Vec<String> = (0..4)
            .map(|k| if k == r.identity_id { "1".to_string() } else { format!("{:.2}", 0.1 * (i % 3) as f64) })
            .collect();
        text.push_str(&format!("{} {}\n", r.image_id, v.join(" ")));
        text.push_str(&format!("{}{SR_KEY_SUFFIX} {}\n", r.image_id, v.join(" ")));
    }
    let embedder = FileEmbedder::parse(&text, "generated")?;
    let report = evaluate_corpus(&BicubicUpsampler(4), &ds, Some(&embedder), &EvalOptions::default())?;
    println!("{}", report.to_table());
    Ok(())
}
