//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and leaves gradients on the
//! leaves (inputs marked as requiring grad and trainable parameters). Graphs are
//! single use: build a fresh one per step.

pub mod conv;

use crate::error::{Error, Result};
use crate::nn::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    MeanRows(Var),
    BroadcastRows(Var),
    L1PerSample(Var, Var),
    Sum(Var),
    BceWithLogits {
        logits: Var,
        target: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm, for running
/// average updates.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    buffer_updates: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            buffer_updates: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn any_needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.needs(v))
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is retained after [`Graph::backward`].
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter. When `trainable` is false the parameter acts as a constant.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId, trainable: bool) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), trainable)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---------------------------------------------------------------- forward ops

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let y = conv::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let ng = self.any_needs(&[x, w]) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            y,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            ng,
        ))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let y = conv::conv_transpose2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let ng = self.any_needs(&[x, w]) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            y,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            ng,
        ))
    }

    /// `x [n, in] * w[out, in]^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, fin) = match xv.shape() {
            [n, f] => (*n, *f),
            s => {
                return Err(Error::Shape(format!(
                    "linear expects [n, features], got {s:?}"
                )))
            }
        };
        let (out, win) = match wv.shape() {
            [o, i] => (*o, *i),
            s => {
                return Err(Error::Shape(format!(
                    "linear weight must be 2-d, got {s:?}"
                )))
            }
        };
        if win != fin {
            return Err(Error::Shape(format!(
                "linear weight takes {win} features, input has {fin}"
            )));
        }
        let mut y = Tensor::zeros(&[n, out]);
        T::gemm(
            false,
            true,
            n,
            out,
            fin,
            T::one(),
            xv.data(),
            wv.data(),
            T::zero(),
            y.data_mut(),
        );
        if let Some(b) = b {
            let bv = self.value(b).data().to_vec();
            for row in y.data_mut().chunks_mut(out) {
                row.iter_mut().zip(&bv).for_each(|(a, &c)| *a += c);
            }
        }
        let ng = self.any_needs(&[x, w]) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(y, Op::Linear { x, w, b }, ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        let ng = self.any_needs(&[a, b]);
        Ok(self.push(y, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let mut y = self.value(a).clone();
        for (o, &v) in y.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= v;
        }
        let ng = self.any_needs(&[a, b]);
        Ok(self.push(y, Op::Sub(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let y = self.value(a).map(|v| v * k);
        let ng = self.needs(a);
        self.push(y, Op::Scale(a, k), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|v| v.max(T::zero()));
        let ng = self.needs(a);
        self.push(y, Op::Relu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let y = self
            .value(a)
            .map(|v| if v > T::zero() { v } else { v * slope });
        let ng = self.needs(a);
        self.push(y, Op::LeakyRelu(a, slope), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|v| v.tanh());
        let ng = self.needs(a);
        self.push(y, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = self.value(a).map(sigmoid);
        let ng = self.needs(a);
        self.push(y, Op::Sigmoid(a), ng)
    }

    /// Per-channel normalisation of a `[n, c, ...]` tensor.
    ///
    /// With `running = None` the batch statistics are used and returned;
    /// otherwise the supplied `(mean, var)` are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape(format!(
                "batch norm needs [n, c, ...], got {shape:?}"
            )));
        }
        let (n, c) = (shape[0], shape[1]);
        let hw = xv.per_sample() / c;
        let count = n * hw;
        let (mean, var) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for s in 0..n {
                    let sample = xv.sample(s);
                    for ch in 0..c {
                        mean[ch] += sample[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>();
                    }
                }
                let inv = T::one() / T::lit(count as f64);
                mean.iter_mut().for_each(|m| *m *= inv);
                for s in 0..n {
                    let sample = xv.sample(s);
                    for ch in 0..c {
                        var[ch] += sample[ch * hw..(ch + 1) * hw]
                            .iter()
                            .map(|&v| (v - mean[ch]).powi(2))
                            .sum::<T>();
                    }
                }
                var.iter_mut().for_each(|v| *v *= inv);
                (mean, var)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = xv.clone();
        let mut y = xv.clone();
        for s in 0..n {
            for ch in 0..c {
                let off = s * c * hw + ch * hw;
                for i in off..off + hw {
                    let h = (xhat.data()[i] - mean[ch]) * inv_std[ch];
                    xhat.data_mut()[i] = h;
                    y.data_mut()[i] = gv[ch] * h + bv[ch];
                }
            }
        }
        let stats = running.is_none().then(|| {
            let corr = if count > 1 {
                T::lit(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            BatchStats {
                mean: mean.clone(),
                var_unbiased: var.iter().map(|&v| v * corr).collect(),
            }
        });
        let ng = self.any_needs(&[x, gamma, beta]);
        let batch_stats = running.is_none();
        Ok((
            self.push(
                y,
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                },
                ng,
            ),
            stats,
        ))
    }

    /// 2x2 max pooling with stride 2 (odd trailing rows/columns dropped).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::Shape(format!("cannot pool a {h}x{w} map")));
        }
        let xv = self.value(x).data();
        let mut y = Tensor::zeros(&[n, c, oh, ow]);
        let mut argmax = vec![0usize; n * c * oh * ow];
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    let o = plane * oh * ow + oy * ow + ox;
                    argmax[o] = best;
                    y.data_mut()[o] = xv[best];
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(y, Op::MaxPool2 { x, argmax }, ng))
    }

    /// `[n, c, h, w] -> [n, c]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let inv = T::one() / T::lit(hw as f64);
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let y = Tensor::from_vec(&[n, c], data)?;
        let ng = self.needs(x);
        Ok(self.push(y, Op::GlobalAvgPool(x), ng))
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(
            *parts
                .first()
                .ok_or_else(|| Error::Shape("concat of nothing".into()))?,
        );
        let n = first.batch();
        let tail = first.shape()[2..].to_vec();
        let mut channels = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() < 2 || s[0] != n || s[2..] != tail[..] {
                return Err(Error::Shape(format!(
                    "concat: {s:?} incompatible with {:?}",
                    first.shape()
                )));
            }
            channels += s[1];
        }
        let mut data = Vec::with_capacity(n * channels * tail.iter().product::<usize>());
        for s in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).sample(s));
            }
        }
        let mut shape = vec![n, channels];
        shape.extend(tail);
        let y = Tensor::from_vec(&shape, data)?;
        let ng = self.any_needs(parts);
        Ok(self.push(y, Op::Concat(parts.to_vec()), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(y, Op::Reshape(x), ng))
    }

    /// `[b, f] -> [1, f]` mean over rows.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (b, f) = match xv.shape() {
            [b, f] if *b > 0 => (*b, *f),
            s => {
                return Err(Error::Shape(format!(
                    "mean_rows expects non-empty [b, f], got {s:?}"
                )))
            }
        };
        let mut out = vec![T::zero(); f];
        for row in xv.data().chunks(f) {
            out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
        }
        let inv = T::one() / T::lit(b as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        let y = Tensor::from_vec(&[1, f], out)?;
        let ng = self.needs(x);
        Ok(self.push(y, Op::MeanRows(x), ng))
    }

    /// `[1, f] -> [n, f]` row replication.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let xv = self.value(x);
        let f = match xv.shape() {
            [1, f] => *f,
            s => {
                return Err(Error::Shape(format!(
                    "broadcast_rows expects [1, f], got {s:?}"
                )))
            }
        };
        let mut data = Vec::with_capacity(n * f);
        for _ in 0..n {
            data.extend_from_slice(xv.data());
        }
        let y = Tensor::from_vec(&[n, f], data)?;
        let ng = self.needs(x);
        Ok(self.push(y, Op::BroadcastRows(x), ng))
    }

    /// Per-sample L1 distance `sum |a - b|`, shape `[n]`.
    pub fn l1_per_sample(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "l1")?;
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.batch();
        let data = (0..n)
            .map(|s| {
                av.sample(s)
                    .iter()
                    .zip(bv.sample(s))
                    .map(|(&x, &y)| (x - y).abs())
                    .sum::<T>()
            })
            .collect();
        let y = Tensor::from_vec(&[n], data)?;
        let ng = self.any_needs(&[a, b]);
        Ok(self.push(y, Op::L1PerSample(a, b), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let y = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(y, Op::Sum(a), ng)
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `target`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &[T]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.numel() != target.len() || target.is_empty() {
            return Err(Error::Shape(format!(
                "bce: {} logits vs {} targets",
                lv.numel(),
                target.len()
            )));
        }
        let total: T = lv
            .data()
            .iter()
            .zip(target)
            .map(|(&l, &t)| l.max(T::zero()) - l * t + (T::one() + (-l.abs()).exp()).ln())
            .sum();
        let y = Tensor::scalar(total / T::lit(target.len() as f64));
        let ng = self.needs(logits);
        Ok(self.push(
            y,
            Op::BceWithLogits {
                logits,
                target: target.to_vec(),
            },
            ng,
        ))
    }

    // ---------------------------------------------------------------- backward

    /// Back-propagates from a single-element node.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).numel() != 1 {
            return Err(Error::Shape("backward needs a scalar output".into()));
        }
        let seed = Tensor::full(self.value(out).shape(), T::one());
        self.backward_with(out, seed)
    }

    pub fn backward_with(&mut self, out: Var, seed: Tensor<T>) -> Result<()> {
        if seed.shape() != self.value(out).shape() {
            return Err(Error::Shape(
                "seed gradient shape differs from output".into(),
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            match &self.nodes[i].op {
                Op::Leaf | Op::Param(_) => {
                    self.grads[i] = Some(g);
                }
                _ => self.backprop_node(i, &g)?,
            }
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

    fn backprop_node(&mut self, i: usize, g: &Tensor<T>) -> Result<()> {
        let node = &self.nodes[i];
        let mut out: Vec<(Var, Tensor<T>)> = Vec::new();
        match &node.op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (dx, dw) = conv::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    self.needs(*x),
                    self.needs(*w),
                )?;
                if let Some(d) = dx { out.push((*x, d)) }
                if let Some(d) = dw { out.push((*w, d)) }
                if let Some(b) = b.filter(|&b| self.needs(b)) {
                    out.push((b, Tensor::from_vec(&[g.shape()[1]], conv::channel_sums(g))?));
                }
            }
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (dx, dw) = conv::conv_transpose2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    self.needs(*x),
                    self.needs(*w),
                )?;
                if let Some(d) = dx { out.push((*x, d)) }
                if let Some(d) = dw { out.push((*w, d)) }
                if let Some(b) = b.filter(|&b| self.needs(b)) {
                    out.push((b, Tensor::from_vec(&[g.shape()[1]], conv::channel_sums(g))?));
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, fin) = (xv.shape()[0], xv.shape()[1]);
                let fout = wv.shape()[0];
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    T::gemm(
                        false,
                        false,
                        n,
                        fin,
                        fout,
                        T::one(),
                        g.data(),
                        wv.data(),
                        T::zero(),
                        dx.data_mut(),
                    );
                    out.push((*x, dx));
                }
                if self.needs(*w) {
                    let mut dw = Tensor::zeros(wv.shape());
                    T::gemm(
                        true,
                        false,
                        fout,
                        fin,
                        n,
                        T::one(),
                        g.data(),
                        xv.data(),
                        T::zero(),
                        dw.data_mut(),
                    );
                    out.push((*w, dw));
                }
                if let Some(b) = b.filter(|&b| self.needs(b)) {
                    let mut db = vec![T::zero(); fout];
                    for row in g.data().chunks(fout) {
                        db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    out.push((b, Tensor::from_vec(&[fout], db)?));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|v| -v)));
            }
            Op::Scale(a, k) => {
                let k = *k;
                out.push((*a, g.map(|v| v * k)));
            }
            Op::Relu(a) => out.push((
                *a,
                zip_map(
                    g,
                    &node.value,
                    |gv, y| if y > T::zero() { gv } else { T::zero() },
                ),
            )),
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                out.push((
                    *a,
                    zip_map(
                        g,
                        &node.value,
                        |gv, y| if y > T::zero() { gv } else { gv * s },
                    ),
                ));
            }
            Op::Tanh(a) => out.push((*a, zip_map(g, &node.value, |gv, y| gv * (T::one() - y * y)))),
            Op::Sigmoid(a) => {
                out.push((*a, zip_map(g, &node.value, |gv, y| gv * y * (T::one() - y))))
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = xhat.shape();
                let (n, c) = (shape[0], shape[1]);
                let hw = xhat.per_sample() / c;
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = s * c * hw + ch * hw;
                        for idx in off..off + hw {
                            dbeta[ch] += g.data()[idx];
                            dgamma[ch] += g.data()[idx] * xhat.data()[idx];
                        }
                    }
                }
                if self.needs(*x) {
                    let gv = self.value(*gamma).data();
                    let mut dx = Tensor::zeros(shape);
                    let m = T::lit((n * hw) as f64);
                    for s in 0..n {
                        for ch in 0..c {
                            let off = s * c * hw + ch * hw;
                            let k = gv[ch] * inv_std[ch];
                            for idx in off..off + hw {
                                dx.data_mut()[idx] = if *batch_stats {
                                    k / m
                                        * (m * g.data()[idx]
                                            - dbeta[ch]
                                            - xhat.data()[idx] * dgamma[ch])
                                } else {
                                    k * g.data()[idx]
                                };
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                if self.needs(*gamma) {
                    out.push((*gamma, Tensor::from_vec(&[c], dgamma)?));
                }
                if self.needs(*beta) {
                    out.push((*beta, Tensor::from_vec(&[c], dbeta)?));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                for (o, &src) in argmax.iter().enumerate() {
                    dx.data_mut()[src] += g.data()[o];
                }
                out.push((*x, dx));
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.value(*x).shape().to_vec();
                let hw = xs[2] * xs[3];
                let inv = T::one() / T::lit(hw as f64);
                let mut dx = Tensor::zeros(&xs);
                for (plane, &gv) in dx.data_mut().chunks_mut(hw).zip(g.data()) {
                    plane.fill(gv * inv);
                }
                out.push((*x, dx));
            }
            Op::Concat(parts) => {
                let n = g.batch();
                let per: Vec<usize> = parts.iter().map(|&p| self.value(p).per_sample()).collect();
                let mut grads: Vec<Vec<T>> =
                    per.iter().map(|&s| Vec::with_capacity(s * n)).collect();
                for s in 0..n {
                    let mut off = 0;
                    let row = g.sample(s);
                    for (k, &len) in per.iter().enumerate() {
                        grads[k].extend_from_slice(&row[off..off + len]);
                        off += len;
                    }
                }
                for (&p, d) in parts.iter().zip(grads) {
                    if self.needs(p) {
                        out.push((p, Tensor::from_vec(self.value(p).shape(), d)?));
                    }
                }
            }
            Op::Reshape(x) => out.push((*x, g.clone().reshape(self.value(*x).shape())?)),
            Op::MeanRows(x) => {
                let xs = self.value(*x).shape().to_vec();
                let inv = T::one() / T::lit(xs[0] as f64);
                let row: Vec<T> = g.data().iter().map(|&v| v * inv).collect();
                let mut data = Vec::with_capacity(xs[0] * xs[1]);
                for _ in 0..xs[0] {
                    data.extend_from_slice(&row);
                }
                out.push((*x, Tensor::from_vec(&xs, data)?));
            }
            Op::BroadcastRows(x) => {
                let f = g.shape()[1];
                let mut d = vec![T::zero(); f];
                for row in g.data().chunks(f) {
                    d.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
                out.push((*x, Tensor::from_vec(&[1, f], d)?));
            }
            Op::L1PerSample(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let per = av.per_sample();
                let mut da = Tensor::zeros(av.shape());
                for (idx, d) in da.data_mut().iter_mut().enumerate() {
                    let diff = av.data()[idx] - bv.data()[idx];
                    let sign = if diff > T::zero() {
                        T::one()
                    } else if diff < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    *d = sign * g.data()[idx / per];
                }
                if self.needs(*b) {
                    out.push((*b, da.map(|v| -v)));
                }
                out.push((*a, da));
            }
            Op::Sum(a) => out.push((*a, Tensor::full(self.value(*a).shape(), g.data()[0]))),
            Op::BceWithLogits { logits, target } => {
                let lv = self.value(*logits);
                let k = g.data()[0] / T::lit(target.len() as f64);
                let d: Vec<T> = lv
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&l, &t)| (sigmoid(l) - t) * k)
                    .collect();
                out.push((*logits, Tensor::from_vec(lv.shape(), d)?));
            }
        }
        for (v, d) in out {
            self.accumulate(v, d);
        }
        Ok(())
    }

    /// Gradient left on a leaf or trainable parameter by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every trainable parameter bound to this graph, summed over
    /// repeated bindings, ordered by parameter id.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<(ParamId, Tensor<T>)> = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, self.grads.get(i).and_then(|g| g.as_ref()))
            {
                match out.iter_mut().find(|(p, _)| p == id) {
                    Some((_, acc)) => acc.add_assign(g),
                    None => out.push((*id, g.clone())),
                }
            }
        }
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub fn push_buffer_update(&mut self, id: ParamId, value: Tensor<T>) {
        self.buffer_updates.push((id, value));
    }

    /// Running-statistic updates recorded by training-mode layers.
    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }
}

fn zip_map<T: Scalar>(g: &Tensor<T>, y: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = g
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| f(a, b))
        .collect();
    Tensor::from_vec(g.shape(), data).expect("same shape")
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
