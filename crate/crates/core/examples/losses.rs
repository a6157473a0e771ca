//! Evaluates every loss term on one untrained generator output.

use halluc::data::{scale_pyramid, DatasetHandle, ImageTensor, ScaleFactor, ValueRange};
use halluc::discriminator::{pair_input, Discriminator, DiscriminatorConfig};
use halluc::generator::{Generator, GeneratorConfig};
use halluc::losses::{
    afvl_discriminator_loss, afvl_generator_loss, color_consistency_loss, perceptual_loss, total_generator_loss,
    FeatureExtractor, LossWeights,
};

fn main() -> halluc::Result<()> {
    let ds = DatasetHandle::synthetic(2, 2, 32, ScaleFactor::X4, 1)?;
    let gc = GeneratorConfig { lr_size: 8, scale_factor: ScaleFactor::X4, base_channels: 8, ..GeneratorConfig::default() };
    let gen: Generator = Generator::new(&gc, 0)?;
    let lr = ds.lr(0)?.to_range(ValueRange::Signed);
    let out = gen.generate(&lr)?;
    let sr = out.final_image().to_range(ValueRange::Unit);
    let hr = ds.hr(0)?;

    let w = LossWeights::default();
    let ext = FeatureExtractor::default();
    let perceptual: Vec<f64> = w
        .perceptual_layers
        .iter()
        .map(|l| perceptual_loss(&ext, &sr, &hr, &l.name))
        .collect::<halluc::Result<_>>()?;
    let color = color_consistency_loss(&out, w.lambda_1, w.lambda_2)?;

    let dc = DiscriminatorConfig { hr_size: 32, num_scales: 2, base_channels: 8, leaky_slope: 0.2 };
    let disc: Discriminator = Discriminator::new(&dc, 0)?;
    let pyramid = |img: &ImageTensor| scale_pyramid(&img.to_range(ValueRange::Signed), 2);
    let real_pair = pair_input(&pyramid(&hr)?, &pyramid(&ds.hr(1)?)?)?;
    let fake_pair = pair_input(&pyramid(&hr)?, &pyramid(&sr)?)?;
    let imposter_pair = pair_input(&pyramid(&hr)?, &pyramid(&ds.hr(2)?)?)?;
    let p1 = disc.discriminate(&fake_pair)?;
    let p3 = disc.discriminate(&real_pair)?;
    let p4 = disc.discriminate(&imposter_pair)?;
    let afvl_d = afvl_discriminator_loss(&p1, &[], &p3, &p4)?;
    let afvl_g = afvl_generator_loss(&p1, &[])?;

    println!("perceptual per layer: {perceptual:?}");
    println!("color per scale pair: {color:?}");
    println!("discriminator probabilities on P1: {:?}", p1[0]);
    println!("afvl_d {afvl_d:.5} afvl_g {afvl_g:.5}");
    println!("total generator loss {:.5}", total_generator_loss(&perceptual, &color, afvl_g, &w)?);
    Ok(())
}
