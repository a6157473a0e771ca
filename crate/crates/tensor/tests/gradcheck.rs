//! Central finite-difference checks for every differentiable op, in f64.

use halluc_tensor::{pixel_shuffle, pixel_unshuffle, Graph, Result, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Compares analytic gradients of `f` w.r.t. each input against central differences.
fn check<F>(inputs: &[Tensor<f64>], f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    g.backward(out).unwrap();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        g.item(out)
    };
    for (which, input) in inputs.iter().enumerate() {
        for idx in 0..input.numel() {
            let theta = input.data()[idx];
            let h = 1e-5 * (1.0 + theta.abs());
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[idx] = theta + h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[idx] = theta - h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[which].data()[idx];
            let scale = a.abs().max(numeric.abs()).max(1e-7);
            assert!(
                (a - numeric).abs() / scale < 1e-5,
                "input {which} elem {idx}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

/// Scalar readout with fixed random weights, so that no gradient is trivially constant.
fn readout(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(g.shape(x), &mut rng);
    let y = g.mul_const(x, w)?;
    Ok(g.sum(y))
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[2, 3], &mut rng);
    let b = random(&[2, 3], &mut rng);
    check(&[a, b], |g, v| {
        let s = g.add(v[0], v[1])?;
        let d = g.sub(s, v[1])?;
        let m = g.mul(d, v[1])?;
        let t = g.tanh(m);
        let e = g.exp(t);
        let q = g.square(e);
        let sc = g.scale(q, 0.7);
        let sh = g.add_scalar(sc, 0.3);
        readout(g, sh, 9)
    });
}

#[test]
fn rectifiers() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[2, 3, 3, 3], &mut rng);
    let slope = random(&[3], &mut rng);
    check(&[x, slope], |g, v| {
        let p = g.prelu(v[0], v[1])?;
        let l = g.leaky_relu(p, 0.2);
        let r = g.relu(l);
        let c = g.clamp_min(p, -0.1);
        let s = g.add(r, c)?;
        readout(g, s, 3)
    });
}

#[test]
fn conv2d_strided_and_padded() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 3, 6, 5], &mut rng);
    let w = random(&[4, 3, 3, 3], &mut rng);
    let b = random(&[4], &mut rng);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        check(&[x.clone(), w.clone(), b.clone()], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            readout(g, y, 4)
        });
    }
}

#[test]
fn batch_norm_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[3, 2, 3, 3], &mut rng);
    let gamma = random(&[2], &mut rng);
    let beta = random(&[2], &mut rng);
    check(&[x.clone(), gamma.clone(), beta.clone()], |g, v| {
        let (y, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
        readout(g, y, 5)
    });
    check(&[x, gamma, beta], |g, v| {
        let y = g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0], 1e-5)?;
        readout(g, y, 5)
    });
}

#[test]
fn layout_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&[2, 8, 2, 2], &mut rng);
    let b = random(&[2, 2, 4, 4], &mut rng);
    check(&[a, b], |g, v| {
        let s = g.pixel_shuffle(v[0], 2)?;
        let c = g.concat_channels(&[s, v[1]])?;
        let sel = g.select_batch(c, &[1, 0, 1])?;
        let cat = g.concat_batch(&[sel, c])?;
        let r = g.reshape(cat, &[5, 64])?;
        readout(g, r, 6)
    });
}

#[test]
fn classifier_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[3, 4, 2, 2], &mut rng);
    let w = random(&[3, 4], &mut rng);
    let b = random(&[3], &mut rng);
    check(&[x, w, b], |g, v| {
        let p = g.global_avg_pool(v[0])?;
        let l = g.linear(p, v[1], v[2])?;
        let ls = g.log_softmax(l)?;
        let fl = g.clamp_min(ls, -5.0);
        let flat = g.reshape(fl, &[9])?;
        let picked = g.gather(flat, &[0, 4, 8, 2])?;
        Ok(g.mean(picked))
    });
}

#[test]
fn color_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[2, 3, 3, 4], &mut rng);
    check(&[x], |g, v| {
        let s = g.color_stats(v[0])?;
        let sq = g.square(s);
        readout(g, sq, 8)
    });
}

#[test]
fn log_softmax_rows_normalize() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut g = Graph::new();
    let x = g.constant(random(&[5, 3], &mut rng).map(|v| v * 50.0));
    let ls = g.log_softmax(x).unwrap();
    let p = g.exp(ls);
    for row in g.value(p).data().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn color_stats_two_pixel_example() {
    // pixels (0,0,0) and (1,1,1): mean 0.5, every covariance entry 0.25
    let x = Tensor::<f64>::new(&[1, 3, 1, 2], vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
    let mut g = Graph::new();
    let v = g.constant(x);
    let s = g.color_stats(v).unwrap();
    let vals = g.value(s).data();
    assert_eq!(&vals[..3], &[0.5, 0.5, 0.5]);
    assert!(vals[3..].iter().all(|&c| c == 0.25));
}

#[test]
fn pixel_shuffle_enumeration() {
    let x = Tensor::<f64>::new(&[1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = pixel_shuffle(&x, 2).unwrap();
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    assert!(pixel_shuffle(&Tensor::<f64>::zeros(&[1, 3, 2, 2]), 2).is_err());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::zeros(&[2]));
    assert!(g.backward(x).is_err());
}

proptest! {
    #[test]
    fn pixel_shuffle_roundtrip(c in 1usize..3, r in 1usize..4, h in 1usize..4, w in 1usize..4, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[2, c * r * r, h, w], &mut rng);
        let y = pixel_shuffle(&x, r).unwrap();
        prop_assert_eq!(y.shape(), &[2, c, h * r, w * r]);
        let mut a = x.data().to_vec();
        let mut b = y.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
        prop_assert_eq!(pixel_unshuffle(&y, r).unwrap(), x);
    }
}
