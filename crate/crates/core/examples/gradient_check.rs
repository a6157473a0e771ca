//! Compares reverse-mode gradients of a small generator with central differences.

use halluc::data::ScaleFactor;
use halluc::generator::{Generator, GeneratorConfig};
use halluc::nn::Mode;
use halluc::tensor::{Graph, ParamId, Tensor};

fn loss(gen: &Generator<f64>, lr: &Tensor<f64>, grads: bool) -> (f64, Vec<Option<Tensor<f64>>>) {
    let mut g = Graph::<f64>::new();
    let p = gen.params().bind(&mut g, true);
    let x = g.constant(lr.clone());
    let out = gen.forward(&mut g, &p, x, Mode::Train).expect("forward").outputs;
    let last = *out.last().unwrap();
    let sq = g.square(last);
    let l = g.mean(sq);
    let v = g.item(l);
    if !grads {
        return (v, Vec::new());
    }
    g.backward(l).expect("backward");
    (v, gen.params().collect_grads(&g, &p))
}

fn main() -> halluc::Result<()> {
    let cfg = GeneratorConfig {
        lr_size: 4,
        scale_factor: ScaleFactor::X4,
        base_channels: 4,
        residual_blocks_per_stage: 1,
        blocks_between_upsamples: 1,
    };
    let gen: Generator<f64> = Generator::new(&cfg, 0)?;
    let lr = Tensor::new(&[2, 3, 4, 4], (0..96).map(|i| ((i * 37) % 17) as f64 / 8.5 - 1.0).collect())?;
    let (_, grads) = loss(&gen, &lr, true);
    for (i, p) in gen.params().iter().enumerate().step_by(3) {
        let Some(grad) = &grads[i] else { continue };
        let mut g2 = gen.clone();
        let theta = p.value.data()[0];
        let h = 1e-4 * (1.0 + theta.abs());
        g2.params_mut().value_mut(ParamId(i)).data_mut()[0] = theta + h;
        let up = loss(&g2, &lr, false).0;
        g2.params_mut().value_mut(ParamId(i)).data_mut()[0] = theta - h;
        let down = loss(&g2, &lr, false).0;
        let numeric = (up - down) / (2.0 * h);
        println!("{:<32} analytic {:+.6e} numeric {:+.6e}", p.name, grad.data()[0], numeric);
    }
    Ok(())
}
