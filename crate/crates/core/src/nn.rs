//! Layer descriptors shared by the networks. Layers hold parameter ids only, so a
//! network's layout is independent of the scalar type of its parameter store.

use halluc_tensor::{BatchStats, Bound, Graph, ParamId, ParamKind, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

pub(crate) const BN_EPS: f64 = 1e-5;

/// Normalization behavior of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are reported for update.
    Train,
    /// Stored running statistics.
    Eval,
}

/// Fan-in scaled normal tensor, `std = sqrt(2 / fan_in)`, drawn in f64.
pub(crate) fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<f64> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).unwrap()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = he_normal(&[cout, cin, kernel, kernel], cin * kernel * kernel, rng);
        let w = store.add(format!("{name}.weight"), ParamKind::Trainable, w.cast());
        let b = store.add(format!("{name}.bias"), ParamKind::Trainable, Tensor::zeros(&[cout]));
        Self { w, b, cin, cout, kernel, stride, pad: kernel / 2 }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.stride, self.pad)?)
    }

    pub fn param_count(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel + self.cout
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PRelu {
    pub slope: ParamId,
}

impl PRelu {
    pub(crate) fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let slope = store.add(
            format!("{name}.slope"),
            ParamKind::Trainable,
            Tensor::full(&[channels], T::from_f64(0.25)),
        );
        Self { slope }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.prelu(x, p.var(self.slope))?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub(crate) fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let ones = Tensor::full(&[channels], T::one());
        Self {
            gamma: store.add(format!("{name}.gamma"), ParamKind::Trainable, ones.clone()),
            beta: store.add(format!("{name}.beta"), ParamKind::Trainable, Tensor::zeros(&[channels])),
            running_mean: store.add(
                format!("{name}.running_mean"),
                ParamKind::Buffer,
                Tensor::zeros(&[channels]),
            ),
            running_var: store.add(format!("{name}.running_var"), ParamKind::Buffer, ones),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
        stats: &mut Vec<(BatchNorm, BatchStats<T>)>,
    ) -> Result<Var> {
        let (gamma, beta) = (p.var(self.gamma), p.var(self.beta));
        match mode {
            Mode::Train => {
                let (y, s) = g.batch_norm_train(x, gamma, beta, BN_EPS)?;
                stats.push((self.clone(), s));
                Ok(y)
            }
            Mode::Eval => Ok(g.batch_norm_eval(
                x,
                gamma,
                beta,
                store.value(self.running_mean).data(),
                store.value(self.running_var).data(),
                BN_EPS,
            )?),
        }
    }

    /// Exponential moving average: `running = m * running + (1 - m) * batch`,
    /// with the unbiased batch variance.
    pub(crate) fn update<T: Scalar>(&self, store: &mut ParamStore<T>, s: &BatchStats<T>, momentum: f64) {
        let m = T::from_f64(momentum);
        let one_m = T::from_f64(1.0 - momentum);
        let unbias = T::from_f64(s.count as f64 / (s.count.max(2) - 1) as f64);
        for (r, &b) in store.value_mut(self.running_mean).data_mut().iter_mut().zip(&s.mean) {
            *r = m * *r + one_m * b;
        }
        for (r, &b) in store.value_mut(self.running_var).data_mut().iter_mut().zip(&s.var) {
            *r = m * *r + one_m * b * unbias;
        }
    }
}
