//! Tape of operations with reverse-mode differentiation.
//!
//! Every op evaluates eagerly and appends a node. Nodes are stored in creation
//! order, which is a topological order, so [`Graph::backward`] is a single
//! reverse sweep. All kernels are single-threaded with a fixed reduction order,
//! so results are bit-reproducible.

use crate::conv::{col2im, im2col, ConvGeom};
use crate::error::{Result, TensorError};
use crate::scalar::{matmul, Scalar};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MulConst(Var, Tensor<T>),
    Square(Var),
    Exp(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Prelu {
        x: Var,
        slope: Var,
    },
    ClampMin(Var, T),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    PixelShuffle(Var, usize),
    ConcatChannels(Vec<Var>),
    SelectBatch(Var, Vec<usize>),
    ConcatBatch(Vec<Var>),
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    LogSoftmax(Var),
    Gather(Var, Vec<usize>),
    ColorStats(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Per-channel statistics of a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<T>,
    /// Element count per channel.
    pub count: usize,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<R>(msg: impl Into<String>) -> Result<R> {
    Err(TensorError::Shape(msg.into()))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push_raw(value, op, needs_grad)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf (a parameter or an input under test).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`], if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Single-element value as f64.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0].as_f64()
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "operand shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a), &[a])
    }

    /// Elementwise product with a non-differentiable tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return shape_err(format!(
                "mul_const shapes differ: {:?} vs {:?}",
                self.shape(a),
                c.shape()
            ));
        }
        let av = self.value(a);
        let data = av.data().iter().zip(c.data()).map(|(&x, &y)| x * y).collect();
        let v = Tensor::new(av.shape(), data)?;
        Ok(self.push(v, Op::MulConst(a, c), &[a]))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = T::from_f64(slope);
        let v = self.value(a).map(|x| if x > T::zero() { x } else { x * s });
        self.push(v, Op::LeakyRelu(a, s), &[a])
    }

    /// Parametric rectifier with one learned negative slope per channel.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.shape(slope) != [c] {
            return shape_err(format!(
                "prelu slope shape {:?} does not match {c} channels",
                self.shape(slope)
            ));
        }
        let xs = self.value(x).data();
        let ss = self.value(slope).data();
        let hw = h * w;
        let mut out = Vec::with_capacity(xs.len());
        for b in 0..n {
            for ch in 0..c {
                let a = ss[ch];
                let base = (b * c + ch) * hw;
                out.extend(xs[base..base + hw].iter().map(|&v| if v > T::zero() { v } else { a * v }));
            }
        }
        let v = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(v, Op::Prelu { x, slope }, &[x, slope]))
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let f = T::from_f64(floor);
        let v = self.value(a).map(|x| x.max(f));
        self.push(v, Op::ClampMin(a, f), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: T = t.data().iter().copied().sum();
        let m = s / T::from_f64(t.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// 2-D convolution with square kernel `w: (cout, cin, k, k)` and optional bias `(cout)`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(w).dims4()?;
        if wcin != cin || kh != kw {
            return shape_err(format!(
                "conv weight {:?} incompatible with input {:?}",
                self.shape(w),
                self.shape(x)
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return shape_err(format!("conv bias shape {:?} != [{cout}]", self.shape(b)));
            }
        }
        let geom = ConvGeom::new(cin, h, wd, kh, stride, pad)
            .ok_or_else(|| TensorError::Shape(format!("kernel {kh} too large for {h}x{wd}")))?;
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![T::zero(); rows * ncols];
        let mut out = vec![T::zero(); n * cout * ncols];
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let bias = b.map(|b| self.value(b).data());
        let in_per = cin * h * wd;
        for item in 0..n {
            im2col(&xs[item * in_per..(item + 1) * in_per], &geom, &mut cols);
            let dst = &mut out[item * cout * ncols..(item + 1) * cout * ncols];
            if let Some(bias) = bias {
                for (o, chunk) in dst.chunks_mut(ncols).enumerate() {
                    chunk.fill(bias[o]);
                }
            }
            matmul(cout, rows, ncols, ws, false, &cols, false, dst, bias.is_some());
        }
        let v = Tensor::new(&[n, cout, geom.out_h, geom.out_w], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(v, Op::Conv2d { x, w, b, geom }, &parents))
    }

    fn check_channel_params(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize, usize)> {
        let dims = self.value(x).dims4()?;
        if self.shape(gamma) != [dims.1] || self.shape(beta) != [dims.1] {
            return shape_err(format!(
                "normalization params {:?}/{:?} do not match {} channels",
                self.shape(gamma),
                self.shape(beta),
                dims.1
            ));
        }
        Ok(dims)
    }

    fn normalize_affine(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
    ) -> Result<(Tensor<T>, Vec<T>)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (xs[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        Ok((Tensor::new(&[n, c, h, w], out)?, xhat))
    }

    /// Batch normalization using the statistics of this batch.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<T>)> {
        let (n, c, h, w) = self.check_channel_params(x, gamma, beta)?;
        let hw = h * w;
        let count = n * hw;
        let xs = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let inv_count = T::from_f64(1.0 / count as f64);
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                let base = (b * c + ch) * hw;
                s = s + xs[base..base + hw].iter().copied().sum();
            }
            let m = s * inv_count;
            let mut sq = T::zero();
            for b in 0..n {
                let base = (b * c + ch) * hw;
                for &v in &xs[base..base + hw] {
                    let d = v - m;
                    sq = sq + d * d;
                }
            }
            mean[ch] = m;
            var[ch] = sq * inv_count;
        }
        let e = T::from_f64(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + e).sqrt()).collect();
        let (out, xhat) = self.normalize_affine(x, gamma, beta, &mean, &inv_std)?;
        let var_out = self.push(
            out,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        );
        Ok((var_out, BatchStats { mean, var, count }))
    }

    /// Batch normalization with fixed (stored) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, _, _) = self.check_channel_params(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return shape_err("running statistics do not match channel count");
        }
        let e = T::from_f64(eps);
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + e).sqrt()).collect();
        let (out, xhat) = self.normalize_affine(x, gamma, beta, running_mean, &inv_std)?;
        Ok(self.push(
            out,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Sub-pixel rearrangement `(n, c*r*r, h, w) -> (n, c, h*r, w*r)`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = pixel_shuffle(self.value(x), r)?;
        Ok(self.push(out, Op::PixelShuffle(x, r), &[x]))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Shape("concat of zero tensors".into()))?;
        let (n, _, h, w) = self.value(*first).dims4()?;
        let mut total_c = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return shape_err(format!(
                    "channel concat of {:?} with {:?}",
                    self.shape(*first),
                    self.shape(p)
                ));
            }
            total_c += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for b in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).item(b));
            }
        }
        let v = Tensor::new(&[n, total_c, h, w], out)?;
        Ok(self.push(v, Op::ConcatChannels(parts.to_vec()), parts))
    }

    pub fn select_batch(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let v = self.value(x).select_batch(indices)?;
        Ok(self.push(v, Op::SelectBatch(x, indices.to_vec()), &[x]))
    }

    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_batch(&tensors)?;
        Ok(self.push(v, Op::ConcatBatch(parts.to_vec()), parts))
    }

    /// Spatial mean `(n, c, h, w) -> (n, c)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let inv = T::from_f64(1.0 / hw as f64);
        let xs = self.value(x).data();
        let out = (0..n * c)
            .map(|i| xs[i * hw..(i + 1) * hw].iter().copied().sum::<T>() * inv)
            .collect();
        let v = Tensor::new(&[n, c], out)?;
        Ok(self.push(v, Op::GlobalAvgPool(x), &[x]))
    }

    /// Affine map `x: (n, i)`, `w: (o, i)`, `b: (o)` -> `(n, o)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, i) = self.value(x).dims2()?;
        let (o, wi) = self.value(w).dims2()?;
        if wi != i || self.shape(b) != [o] {
            return shape_err(format!(
                "linear weight {:?}/bias {:?} incompatible with input {:?}",
                self.shape(w),
                self.shape(b),
                self.shape(x)
            ));
        }
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(n * o);
        for _ in 0..n {
            out.extend_from_slice(bias);
        }
        matmul(n, i, o, self.value(x).data(), false, self.value(w).data(), true, &mut out, true);
        let v = Tensor::new(&[n, o], out)?;
        Ok(self.push(v, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Row-wise log of the normalized exponential of `(n, k)` logits.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (n, k) = self.value(x).dims2()?;
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * k);
        for row in xs.chunks(k) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        let v = Tensor::new(&[n, k], out)?;
        Ok(self.push(v, Op::LogSoftmax(x), &[x]))
    }

    /// Picks elements by flat index into a 1-D tensor.
    pub fn gather(&mut self, x: Var, flat_indices: &[usize]) -> Result<Var> {
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(flat_indices.len());
        for &i in flat_indices {
            match xs.get(i) {
                Some(&v) => out.push(v),
                None => return shape_err(format!("gather index {i} out of range")),
            }
        }
        let v = Tensor::new(&[flat_indices.len()], out)?;
        Ok(self.push(v, Op::Gather(x, flat_indices.to_vec()), &[x]))
    }

    /// Per-image RGB mean and population covariance.
    ///
    /// `(n, 3, h, w) -> (n, 12)`: columns 0..3 hold the mean, 3..12 the
    /// row-major 3x3 covariance normalized by the pixel count.
    pub fn color_stats(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if c != 3 {
            return shape_err(format!("color statistics need 3 channels, got {c}"));
        }
        let out = color_stats(self.value(x).data(), n, h * w);
        let v = Tensor::new(&[n, 12], out)?;
        Ok(self.push(v, Op::ColorStats(x), &[x]))
    }

    /// Reverse sweep from a single-element `output`.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let out_shape = self.shape(output).to_vec();
        if out_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarOutput(out_shape));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[output.0] = Some(Tensor::full(&out_shape, T::one()));
        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&mut self, i: usize, g: &Tensor<T>) -> Result<()> {
        // Parent gradients are computed while borrowing the node, then accumulated.
        let mut contributions: Vec<(Var, Tensor<T>)> = Vec::new();
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                contributions.push((*a, g.clone()));
                contributions.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                contributions.push((*a, g.clone()));
                contributions.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.needs(*a) {
                    contributions.push((*a, zip(g, bv, |x, y| x * y)));
                }
                if self.needs(*b) {
                    contributions.push((*b, zip(g, av, |x, y| x * y)));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                contributions.push((*a, g.map(|v| v * c)));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                contributions.push((*a, g.clone().reshape(&shape)?));
            }
            Op::MulConst(a, c) => contributions.push((*a, zip(g, c, |x, y| x * y))),
            Op::Square(a) => {
                let two = T::from_f64(2.0);
                contributions.push((*a, zip(g, self.value(*a), |gv, x| gv * two * x)));
            }
            Op::Exp(a) => contributions.push((*a, zip(g, &node.value, |gv, y| gv * y))),
            Op::Tanh(a) => {
                contributions.push((*a, zip(g, &node.value, |gv, y| gv * (T::one() - y * y))))
            }
            Op::Relu(a) => contributions.push((
                *a,
                zip(g, self.value(*a), |gv, x| if x > T::zero() { gv } else { T::zero() }),
            )),
            Op::LeakyRelu(a, s) => {
                let s = *s;
                contributions.push((
                    *a,
                    zip(g, self.value(*a), |gv, x| if x > T::zero() { gv } else { gv * s }),
                ))
            }
            Op::Prelu { x, slope } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let xs = self.value(*x).data();
                let ss = self.value(*slope).data();
                let mut dx = vec![T::zero(); xs.len()];
                let mut ds = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for j in base..base + hw {
                            if xs[j] > T::zero() {
                                dx[j] = gd[j];
                            } else {
                                dx[j] = gd[j] * ss[ch];
                                ds[ch] = ds[ch] + gd[j] * xs[j];
                            }
                        }
                    }
                }
                contributions.push((*x, Tensor::new(&[n, c, h, w], dx)?));
                contributions.push((*slope, Tensor::new(&[c], ds)?));
            }
            Op::ClampMin(a, f) => {
                let f = *f;
                contributions.push((
                    *a,
                    zip(g, self.value(*a), |gv, x| if x > f { gv } else { T::zero() }),
                ))
            }
            Op::Sum(a) => {
                let s = gd[0];
                contributions.push((*a, Tensor::full(self.shape(*a), s)));
            }
            Op::Mean(a) => {
                let shape = self.shape(*a);
                let n: usize = shape.iter().product();
                let s = gd[0] / T::from_f64(n as f64);
                contributions.push((*a, Tensor::full(shape, s)));
            }
            Op::Conv2d { x, w, b, geom } => {
                let geom = *geom;
                let (n, cout, _, _) = node.value.dims4()?;
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let xs = self.value(*x).data();
                let ws = self.value(*w).data();
                let in_per = geom.channels * geom.height * geom.width;
                let need_x = self.needs(*x);
                let need_w = self.needs(*w);
                let mut dx = if need_x { vec![T::zero(); xs.len()] } else { Vec::new() };
                let mut dw = vec![T::zero(); if need_w { ws.len() } else { 0 }];
                let mut cols = vec![T::zero(); rows * ncols];
                for item in 0..n {
                    let gy = &gd[item * cout * ncols..(item + 1) * cout * ncols];
                    if need_w {
                        im2col(&xs[item * in_per..(item + 1) * in_per], &geom, &mut cols);
                        matmul(cout, ncols, rows, gy, false, &cols, true, &mut dw, true);
                    }
                    if need_x {
                        matmul(rows, cout, ncols, ws, true, gy, false, &mut cols, false);
                        col2im(&cols, &geom, &mut dx[item * in_per..(item + 1) * in_per]);
                    }
                }
                if need_x {
                    contributions.push((*x, Tensor::new(self.shape(*x), dx)?));
                }
                if need_w {
                    contributions.push((*w, Tensor::new(self.shape(*w), dw)?));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![T::zero(); cout];
                        for item in 0..n {
                            for (o, d) in db.iter_mut().enumerate() {
                                let base = (item * cout + o) * ncols;
                                *d = *d + gd[base..base + ncols].iter().copied().sum();
                            }
                        }
                        contributions.push((*b, Tensor::new(&[cout], db)?));
                    }
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let m = T::from_f64((n * hw) as f64);
                let gm = self.value(*gamma).data();
                let (dgamma, dbeta) = channel_sums(gd, xhat, n, c, hw);
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); gd.len()];
                    for ch in 0..c {
                        let k = gm[ch] * inv_std[ch] / m;
                        for b in 0..n {
                            let base = (b * c + ch) * hw;
                            for j in base..base + hw {
                                dx[j] = k * (m * gd[j] - dbeta[ch] - xhat[j] * dgamma[ch]);
                            }
                        }
                    }
                    contributions.push((*x, Tensor::new(&[n, c, h, w], dx)?));
                }
                contributions.push((*gamma, Tensor::new(&[c], dgamma)?));
                contributions.push((*beta, Tensor::new(&[c], dbeta)?));
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let gm = self.value(*gamma).data();
                let (dgamma, dbeta) = channel_sums(gd, xhat, n, c, hw);
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); gd.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let k = gm[ch] * inv_std[ch];
                            let base = (b * c + ch) * hw;
                            for j in base..base + hw {
                                dx[j] = gd[j] * k;
                            }
                        }
                    }
                    contributions.push((*x, Tensor::new(&[n, c, h, w], dx)?));
                }
                contributions.push((*gamma, Tensor::new(&[c], dgamma)?));
                contributions.push((*beta, Tensor::new(&[c], dbeta)?));
            }
            Op::PixelShuffle(x, r) => {
                contributions.push((*x, pixel_unshuffle(g, *r)?));
            }
            Op::ConcatChannels(parts) => {
                let (n, _, h, w) = g.dims4()?;
                let hw = h * w;
                let total_c = g.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(n * pc * hw);
                        for b in 0..n {
                            let base = (b * total_c + offset) * hw;
                            d.extend_from_slice(&gd[base..base + pc * hw]);
                        }
                        contributions.push((p, Tensor::new(&[n, pc, h, w], d)?));
                    }
                    offset += pc;
                }
            }
            Op::SelectBatch(x, indices) => {
                let shape = self.shape(*x).to_vec();
                let per = shape[1..].iter().product::<usize>();
                let mut d = vec![T::zero(); shape.iter().product()];
                for (k, &src) in indices.iter().enumerate() {
                    for j in 0..per {
                        d[src * per + j] = d[src * per + j] + gd[k * per + j];
                    }
                }
                contributions.push((*x, Tensor::new(&shape, d)?));
            }
            Op::ConcatBatch(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.needs(p) {
                        contributions
                            .push((p, Tensor::new(self.shape(p), gd[offset..offset + len].to_vec())?));
                    }
                    offset += len;
                }
            }
            Op::GlobalAvgPool(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let inv = T::from_f64(1.0 / hw as f64);
                let mut d = Vec::with_capacity(n * c * hw);
                for &gv in gd {
                    d.extend(std::iter::repeat_n(gv * inv, hw));
                }
                contributions.push((*x, Tensor::new(&[n, c, h, w], d)?));
            }
            Op::Linear { x, w, b } => {
                let (n, i) = self.value(*x).dims2()?;
                let (o, _) = self.value(*w).dims2()?;
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * i];
                    matmul(n, o, i, gd, false, self.value(*w).data(), false, &mut dx, false);
                    contributions.push((*x, Tensor::new(&[n, i], dx)?));
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); o * i];
                    matmul(o, n, i, gd, true, self.value(*x).data(), false, &mut dw, false);
                    contributions.push((*w, Tensor::new(&[o, i], dw)?));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); o];
                    for row in gd.chunks(o) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    contributions.push((*b, Tensor::new(&[o], db)?));
                }
            }
            Op::LogSoftmax(x) => {
                let (n, k) = node.value.dims2()?;
                let ys = node.value.data();
                let mut d = Vec::with_capacity(n * k);
                for r in 0..n {
                    let grow = &gd[r * k..(r + 1) * k];
                    let s: T = grow.iter().copied().sum();
                    for j in 0..k {
                        d.push(grow[j] - ys[r * k + j].exp() * s);
                    }
                }
                contributions.push((*x, Tensor::new(&[n, k], d)?));
            }
            Op::Gather(x, idx) => {
                let mut d = vec![T::zero(); self.value(*x).numel()];
                for (&src, &gv) in idx.iter().zip(gd) {
                    d[src] = d[src] + gv;
                }
                contributions.push((*x, Tensor::new(self.shape(*x), d)?));
            }
            Op::ColorStats(x) => {
                let (n, _, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let xs = self.value(*x).data();
                let stats = node.value.data();
                let inv_n = T::from_f64(1.0 / hw as f64);
                let mut d = vec![T::zero(); xs.len()];
                for b in 0..n {
                    let st = &stats[b * 12..(b + 1) * 12];
                    let gs = &gd[b * 12..(b + 1) * 12];
                    // dL/dx_k = (g_mu + (G + G^T)(x_k - mu)) / N; the mean's own
                    // dependence cancels because the centered pixels sum to zero.
                    let mut sym = [[T::zero(); 3]; 3];
                    for (r, row) in sym.iter_mut().enumerate() {
                        for (c, v) in row.iter_mut().enumerate() {
                            *v = gs[3 + r * 3 + c] + gs[3 + c * 3 + r];
                        }
                    }
                    let img = &xs[b * 3 * hw..(b + 1) * 3 * hw];
                    let dimg = &mut d[b * 3 * hw..(b + 1) * 3 * hw];
                    for k in 0..hw {
                        let cen = [img[k] - st[0], img[hw + k] - st[1], img[2 * hw + k] - st[2]];
                        for r in 0..3 {
                            let mut acc = gs[r];
                            for (c, cv) in cen.iter().enumerate() {
                                acc = acc + sym[r][c] * *cv;
                            }
                            dimg[r * hw + k] = acc * inv_n;
                        }
                    }
                }
                contributions.push((*x, Tensor::new(self.shape(*x), d)?));
            }
        }
        for (v, t) in contributions {
            self.accumulate(v, t);
        }
        Ok(())
    }
}

fn zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(b.shape(), data).expect("same numel")
}

fn channel_sums<T: Scalar>(gd: &[T], xhat: &[T], n: usize, c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for j in base..base + hw {
                dgamma[ch] = dgamma[ch] + gd[j] * xhat[j];
                dbeta[ch] = dbeta[ch] + gd[j];
            }
        }
    }
    (dgamma, dbeta)
}

fn color_stats<T: Scalar>(xs: &[T], n: usize, hw: usize) -> Vec<T> {
    let inv = T::from_f64(1.0 / hw as f64);
    let mut out = Vec::with_capacity(n * 12);
    for b in 0..n {
        let img = &xs[b * 3 * hw..(b + 1) * 3 * hw];
        let mu: Vec<T> = (0..3)
            .map(|c| img[c * hw..(c + 1) * hw].iter().copied().sum::<T>() * inv)
            .collect();
        out.extend_from_slice(&mu);
        for r in 0..3 {
            for c in 0..3 {
                let mut acc = T::zero();
                for k in 0..hw {
                    acc = acc + (img[r * hw + k] - mu[r]) * (img[c * hw + k] - mu[c]);
                }
                out.push(acc * inv);
            }
        }
    }
    out
}

/// `(n, c*r*r, h, w) -> (n, c, h*r, w*r)` with
/// `out[ch, y*r+dy, x*r+dx] = in[ch*r*r + dy*r + dx, y, x]`.
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (n, cin, h, w) = x.dims4()?;
    if r == 0 || cin % (r * r) != 0 {
        return shape_err(format!("pixel shuffle: {cin} channels not divisible by {r}^2"));
    }
    let c = cin / (r * r);
    let (oh, ow) = (h * r, w * r);
    let xs = x.data();
    let mut out = vec![T::zero(); xs.len()];
    for b in 0..n {
        for ch in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let src_c = ch * r * r + dy * r + dx;
                    let src = &xs[((b * cin + src_c) * h) * w..((b * cin + src_c + 1) * h) * w];
                    for y in 0..h {
                        for xx in 0..w {
                            out[((b * c + ch) * oh + y * r + dy) * ow + xx * r + dx] = src[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

/// Inverse of [`pixel_shuffle`]: `(n, c, h*r, w*r) -> (n, c*r*r, h, w)`.
pub fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (n, c, oh, ow) = x.dims4()?;
    if r == 0 || oh % r != 0 || ow % r != 0 {
        return shape_err(format!("pixel unshuffle: {oh}x{ow} not divisible by {r}"));
    }
    let (h, w) = (oh / r, ow / r);
    let cout = c * r * r;
    let xs = x.data();
    let mut out = vec![T::zero(); xs.len()];
    for b in 0..n {
        for ch in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let dst_c = ch * r * r + dy * r + dx;
                    for y in 0..h {
                        for xx in 0..w {
                            out[((b * cout + dst_c) * h + y) * w + xx] =
                                xs[((b * c + ch) * oh + y * r + dy) * ow + xx * r + dx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, cout, h, w], out)
}
