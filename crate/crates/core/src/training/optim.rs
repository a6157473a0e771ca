use halluc_tensor::{ParamKind, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr_g: 1e-4, lr_d: 1e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adaptive-moment optimizer state for the trainable entries of one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    /// Completed update count.
    pub t: u64,
    /// First and second moments, indexed like the store; `None` for buffers.
    pub m: Vec<Option<Tensor<f32>>>,
    pub v: Vec<Option<Tensor<f32>>>,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>) -> Self {
        let zeros = |p: &halluc_tensor::Param<f32>| match p.kind {
            ParamKind::Trainable => Some(Tensor::zeros(p.value.shape())),
            ParamKind::Buffer => None,
        };
        Self {
            t: 0,
            m: store.iter().map(zeros).collect(),
            v: store.iter().map(zeros).collect(),
        }
    }

    /// One bias-corrected step with learning rate `lr`.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Option<Tensor<f32>>], lr: f64, cfg: &OptimizerConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let step_size = (lr / c1) as f32;
        let c2 = c2 as f32;
        let eps = cfg.eps as f32;
        for (i, g) in grads.iter().enumerate() {
            let (Some(g), Some(m), Some(v)) = (g, self.m[i].as_mut(), self.v[i].as_mut()) else {
                continue;
            };
            let p = store.value_mut(halluc_tensor::ParamId(i)).data_mut();
            for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step_size * *m / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns the norm.
pub fn clip_grad_norm(grads: &mut [Option<Tensor<f32>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter().map(|&v| (v as f64) * (v as f64)))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // with bias correction the first update is lr * g / |g| (up to eps)
        let mut store = ParamStore::<f32>::new();
        store.add("w", ParamKind::Trainable, Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        store.add("r", ParamKind::Buffer, Tensor::zeros(&[1]));
        let mut adam = Adam::new(&store);
        let g = vec![Some(Tensor::new(&[2], vec![0.5, -2.0]).unwrap()), None];
        adam.step(&mut store, &g, 0.1, &OptimizerConfig::default());
        let w = store.value(halluc_tensor::ParamId(0)).data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Some(Tensor::new(&[2], vec![3.0f32, 4.0]).unwrap()), None];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        let d = g[0].as_ref().unwrap().data();
        assert!((d[0] - 0.6).abs() < 1e-6 && (d[1] - 0.8).abs() < 1e-6);
    }
}
