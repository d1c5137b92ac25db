use super::conv::{self, ConvGeom};
use super::{conv_output_size, gemm, MatRef, Scalar, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a, T> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the given running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel statistics of a training-mode batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n − 1) variance, for the running estimate.
    pub var_unbiased: Vec<f64>,
}

enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, invstd: Vec<f64>, train: bool },
    Relu(Var),
    MaxPool { x: Var, argmax: Vec<u32> },
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Concat { inputs: Vec<Var> },
    Add(Var, Var),
    Scale(Var, f64),
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Mse { pred: Var, target: Vec<T> },
    WeightedSum { x: Var, weights: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Operations recorded in execution order; rebuilt for every batch.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of every leaf that requires them.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

const LANES: usize = 8;

/// Σ f(v) with eight-lane partial sums in `T`, flushed to f64 every 256 values.
fn block_sum<T: Scalar>(s: &[T], f: impl Fn(T) -> T) -> f64 {
    let mut total = 0f64;
    for block in s.chunks(256) {
        let mut acc = [T::zero(); LANES];
        let mut it = block.chunks_exact(LANES);
        for v in &mut it {
            for l in 0..LANES {
                acc[l] = acc[l] + f(v[l]);
            }
        }
        let tail = it.remainder().iter().fold(T::zero(), |a, &v| a + f(v));
        total += acc.iter().map(|a| a.as_f64()).sum::<f64>() + tail.as_f64();
    }
    total
}

fn block_dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let mut total = 0f64;
    for (ba, bb) in a.chunks(256).zip(b.chunks(256)) {
        let mut acc = [T::zero(); LANES];
        let (mut ia, mut ib) = (ba.chunks_exact(LANES), bb.chunks_exact(LANES));
        for (va, vb) in (&mut ia).zip(&mut ib) {
            for l in 0..LANES {
                acc[l] = acc[l] + va[l] * vb[l];
            }
        }
        let tail = ia.remainder().iter().zip(ib.remainder()).fold(T::zero(), |s, (&x, &y)| s + x * y);
        total += acc.iter().map(|a| a.as_f64()).sum::<f64>() + tail.as_f64();
    }
    total
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, requires_grad, Op::Leaf)
    }

    /// A constant input.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.o] {
                return shape_err(format!("conv2d bias shape {:?}, expected [{}]", self.shape(b), geom.o));
            }
        }
        let y = conv::forward(
            &self.value(x).data,
            &self.value(w).data,
            b.map(|b| self.value(b).data.as_slice()),
            &geom,
        );
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(Tensor { shape: geom.out_shape(), data: y }, rg, Op::Conv { x, w, b, geom }))
    }

    /// Per-channel normalization of an NCHW tensor. Training mode also
    /// returns the batch statistics for the caller's running estimate.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return shape_err(format!("batchnorm2d expects NCHW, got {s:?}"));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err(format!("batchnorm2d affine params must be [{c}]"));
        }
        let m = n * hw;
        let xd = &self.value(x).data;
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                if m < 2 {
                    return shape_err("batchnorm2d training needs more than one value per channel".into());
                }
                let mut mean = vec![0f64; c];
                let mut var = vec![0f64; c];
                for ch in 0..c {
                    let plane = |i: usize| &xd[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                    let sum: f64 = (0..n).map(|i| block_sum(plane(i), |v| v)).sum();
                    let mu = sum / m as f64;
                    let mu_t = T::from_f64(mu);
                    let sq: f64 = (0..n)
                        .map(|i| {
                            block_sum(plane(i), |v| {
                                let d = v - mu_t;
                                d * d
                            })
                        })
                        .sum();
                    mean[ch] = mu;
                    var[ch] = sq / m as f64;
                }
                let unbiased = var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect();
                let stats = BatchStats { mean: mean.clone(), var_unbiased: unbiased };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return shape_err(format!("batchnorm2d running stats must have {c} channels"));
                }
                (mean.iter().map(|v| v.as_f64()).collect(), var.iter().map(|v| v.as_f64()).collect(), None)
            }
        };
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let rg = self.rg(&[x, gamma, beta]);
        let gd = &self.value(gamma).data;
        let bd = &self.value(beta).data;
        let mut y = vec![T::zero(); xd.len()];
        let mut xhat = if rg { vec![T::zero(); xd.len()] } else { Vec::new() };
        for i in 0..n {
            for ch in 0..c {
                let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                let (mu, is) = (T::from_f64(mean[ch]), T::from_f64(invstd[ch]));
                let (g, b) = (gd[ch], bd[ch]);
                if rg {
                    for ((yo, ho), &xv) in y[r.clone()].iter_mut().zip(&mut xhat[r.clone()]).zip(&xd[r.clone()]) {
                        let h = (xv - mu) * is;
                        *ho = h;
                        *yo = g * h + b;
                    }
                } else {
                    for (yo, &xv) in y[r.clone()].iter_mut().zip(&xd[r.clone()]) {
                        *yo = g * ((xv - mu) * is) + b;
                    }
                }
            }
        }
        let train = stats.is_some();
        let v = self.push(Tensor { shape: s, data: y }, rg, Op::BatchNorm { x, gamma, beta, xhat, invstd, train });
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let y = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&v| v.max(T::zero())).collect() };
        let rg = self.rg(&[x]);
        self.push(y, rg, Op::Relu(x))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return shape_err(format!("max_pool2d expects NCHW, got {s:?}"));
        }
        if pad >= k {
            return shape_err("max_pool2d padding must be smaller than the window".into());
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let ho = conv_output_size(h, k, stride, pad)?;
        let wo = conv_output_size(w, k, stride, pad)?;
        let xd = &self.value(x).data;
        let mut y = Vec::with_capacity(nc * ho * wo);
        let mut argmax = Vec::with_capacity(nc * ho * wo);
        for plane in 0..nc {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut at = 0usize;
                    for ki in 0..k {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if xd[idx] > best {
                                best = xd[idx];
                                at = idx;
                            }
                        }
                    }
                    y.push(best);
                    argmax.push(at as u32);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape: vec![s[0], s[1], ho, wo], data: y }, rg, Op::MaxPool { x, argmax }))
    }

    /// NCHW → NC, averaging each plane.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return shape_err(format!("global_avg_pool expects NCHW, got {s:?}"));
        }
        let hw = s[2] * s[3];
        let y: Vec<T> = self
            .value(x)
            .data
            .chunks(hw.max(1))
            .map(|p| T::from_f64(p.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64))
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape: vec![s[0], s[1]], data: y }, rg, Op::GlobalAvgPool(x)))
    }

    /// `x·wᵀ + b` for x [N, in], w [out, in], b [out].
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return shape_err(format!("linear: input {xs:?} incompatible with weight {ws:?}"));
        }
        let (n, inp, out) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return shape_err(format!("linear bias shape {:?}, expected [{out}]", self.shape(b)));
            }
        }
        let mut y = vec![T::zero(); n * out];
        gemm(n, inp, out, MatRef::rows(&self.value(x).data, inp), MatRef::rows_t(&self.value(w).data, inp), T::zero(), &mut y);
        if let Some(b) = b {
            let bd = &self.value(b).data;
            for row in y.chunks_mut(out.max(1)) {
                add_into(row, bd);
            }
        }
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(Tensor { shape: vec![n, out], data: y }, rg, Op::Linear { x, w, b }))
    }

    /// Joins 2-D tensors along the feature axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return shape_err("concat needs at least one input".into());
        }
        let n = self.shape(inputs[0])[0];
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != 2 || s[0] != n {
                return shape_err(format!("concat expects [{n}, _] inputs, got {s:?}"));
            }
            total += s[1];
        }
        let mut y = Vec::with_capacity(n * total);
        for row in 0..n {
            for &v in inputs {
                let d = self.shape(v)[1];
                y.extend_from_slice(&self.value(v).data[row * d..(row + 1) * d]);
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(Tensor { shape: vec![n, total], data: y }, rg, Op::Concat { inputs: inputs.to_vec() }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("add: shapes {:?} and {:?} differ", self.shape(a), self.shape(b)));
        }
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(&p, &q)| p + q).collect();
        let y = Tensor { shape: self.shape(a).to_vec(), data };
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, rg, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let k = T::from_f64(s);
        let t = self.value(x);
        let y = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&v| v * k).collect() };
        let rg = self.rg(&[x]);
        self.push(y, rg, Op::Scale(x, s))
    }

    /// Batch-mean cross-entropy of [N, C] logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || s[0] == 0 {
            return shape_err(format!("cross-entropy: logits {s:?} with {} targets", targets.len()));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return shape_err(format!("cross-entropy target {t} out of range for {c} classes"));
        }
        let z = &self.value(logits).data;
        let mut probs = vec![T::zero(); n * c];
        let mut loss = 0f64;
        for i in 0..n {
            let row = &z[i * c..(i + 1) * c];
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[targets[i]].as_f64();
            for j in 0..c {
                probs[i * c + j] = T::from_f64((row[j].as_f64() - lse).exp());
            }
        }
        let rg = self.rg(&[logits]);
        let y = Tensor::scalar(T::from_f64(loss / n as f64));
        Ok(self.push(y, rg, Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec(), probs }))
    }

    /// Mean of squared differences over every element.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let p = self.value(pred);
        if p.shape != target.shape || p.data.is_empty() {
            return shape_err(format!("mse: prediction {:?} vs target {:?}", p.shape, target.shape));
        }
        let sum: f64 = p.data.iter().zip(&target.data).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
        let y = Tensor::scalar(T::from_f64(sum / p.data.len() as f64));
        let rg = self.rg(&[pred]);
        Ok(self.push(y, rg, Op::Mse { pred, target: target.data.clone() }))
    }

    /// `Σ x ⊙ weights` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        let t = self.value(x);
        if t.shape != weights.shape {
            return shape_err(format!("weighted_sum: {:?} vs weights {:?}", t.shape, weights.shape));
        }
        let sum: f64 = t.data.iter().zip(&weights.data).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(T::from_f64(sum)), rg, Op::WeightedSum { x, weights: weights.data.clone() }))
    }

    /// Reverse-mode sweep from a scalar. Returns gradients for every leaf
    /// that requires one; leaves the loss does not reach get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() && i <= loss.0 {
                grads[i] = Some(vec![T::zero(); node.value.numel()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => add_into(existing, &g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let r = conv::backward(
                    &self.value(*x).data,
                    &self.value(*w).data,
                    g,
                    geom,
                    self.requires_grad(*x),
                    self.requires_grad(*w),
                    b.is_some_and(|b| self.requires_grad(b)),
                );
                if let Some(dx) = r.dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = r.dw {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, r.db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, invstd, train } => {
                let s = &node.value.shape;
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let m = (n * hw) as f64;
                let mut dgamma = vec![0f64; c];
                let mut dbeta = vec![0f64; c];
                for i in 0..n {
                    for ch in 0..c {
                        let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                        dbeta[ch] += block_sum(&g[r.clone()], |v| v);
                        dgamma[ch] += block_dot(&g[r.clone()], &xhat[r]);
                    }
                }
                if self.requires_grad(*x) {
                    let gd = &self.value(*gamma).data;
                    let mut dx = vec![T::zero(); g.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                            let k = T::from_f64(gd[ch].as_f64() * invstd[ch]);
                            let out = &mut dx[r.clone()];
                            if *train {
                                let (mb, mg) = (T::from_f64(dbeta[ch] / m), T::from_f64(dgamma[ch] / m));
                                for ((d, &gv), &h) in out.iter_mut().zip(&g[r.clone()]).zip(&xhat[r.clone()]) {
                                    *d = k * (gv - mb - h * mg);
                                }
                            } else {
                                for (d, &gv) in out.iter_mut().zip(&g[r.clone()]) {
                                    *d = k * gv;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, dgamma.into_iter().map(T::from_f64).collect());
                self.accumulate(grads, *beta, dbeta.into_iter().map(T::from_f64).collect());
            }
            Op::Relu(x) => {
                let dx = g.iter().zip(&node.value.data).map(|(&gv, &y)| if y > T::zero() { gv } else { T::zero() }).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&gv, &at) in g.iter().zip(argmax) {
                    dx[at as usize] = dx[at as usize] + gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let inv = T::from_f64(1.0 / hw as f64);
                let mut dx = Vec::with_capacity(g.len() * hw);
                for &gv in g {
                    dx.extend(std::iter::repeat(gv * inv).take(hw));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let (n, inp) = (self.shape(*x)[0], self.shape(*x)[1]);
                let out = self.shape(*w)[0];
                if self.requires_grad(*x) {
                    let mut dx = vec![T::zero(); n * inp];
                    gemm(n, out, inp, MatRef::rows(g, out), MatRef::rows(&self.value(*w).data, inp), T::zero(), &mut dx);
                    self.accumulate(grads, *x, dx);
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![T::zero(); out * inp];
                    gemm(out, n, inp, MatRef::rows_t(g, out), MatRef::rows(&self.value(*x).data, inp), T::zero(), &mut dw);
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    let mut db = vec![0f64; out];
                    for row in g.chunks(out.max(1)) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v.as_f64();
                        }
                    }
                    self.accumulate(grads, *b, db.into_iter().map(T::from_f64).collect());
                }
            }
            Op::Concat { inputs } => {
                let (n, total) = (node.value.shape[0], node.value.shape[1]);
                let mut offset = 0;
                for &v in inputs {
                    let d = self.shape(v)[1];
                    let mut dv = Vec::with_capacity(n * d);
                    for row in 0..n {
                        dv.extend_from_slice(&g[row * total + offset..row * total + offset + d]);
                    }
                    offset += d;
                    self.accumulate(grads, v, dv);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Scale(x, s) => {
                let k = T::from_f64(*s);
                self.accumulate(grads, *x, g.iter().map(|&v| v * k).collect());
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let c = self.shape(*logits)[1];
                let k = T::from_f64(g[0].as_f64() / targets.len() as f64);
                let mut dz: Vec<T> = probs.iter().map(|&p| p * k).collect();
                for (i, &t) in targets.iter().enumerate() {
                    dz[i * c + t] = dz[i * c + t] - k;
                }
                self.accumulate(grads, *logits, dz);
            }
            Op::Mse { pred, target } => {
                let p = &self.value(*pred).data;
                let k = 2.0 * g[0].as_f64() / p.len() as f64;
                let dp = p.iter().zip(target).map(|(&a, &b)| T::from_f64(k * (a.as_f64() - b.as_f64()))).collect();
                self.accumulate(grads, *pred, dp);
            }
            Op::WeightedSum { x, weights } => {
                let k = g[0];
                self.accumulate(grads, *x, weights.iter().map(|&w| w * k).collect());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64(&[3], &[-2.0, 0.0, 3.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data, vec![0.0, 0.0, 3.0]);
    }

    #[test]
    fn mse_scalar_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let loss = g.mse(x, &Tensor::scalar(0.0)).unwrap();
        assert_eq!(g.value(loss).item(), 9.0);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn uniform_logits_cross_entropy() {
        let mut g = Graph::<f64>::new();
        let z = g.param(Tensor::zeros(&[4, 36]));
        let loss = g.softmax_cross_entropy(z, &[0, 5, 17, 35]).unwrap();
        assert!((g.value(loss).item() - 36f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_is_stable_for_large_logits() {
        let mut g = Graph::<f32>::new();
        let z = g.param(Tensor::from_f64(&[1, 3], &[1000.0, 0.0, -1000.0]).unwrap());
        let loss = g.softmax_cross_entropy(z, &[0]).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
        let loss_wrong = {
            let z = g.param(Tensor::from_f64(&[1, 3], &[1000.0, 0.0, -1000.0]).unwrap());
            g.softmax_cross_entropy(z, &[1]).unwrap()
        };
        assert!((g.value(loss_wrong).item() - 1000.0).abs() < 1e-3);
    }

    #[test]
    fn fan_out_sums_paths() {
        // y = x + 3x, dy/dx = 4.
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[2], &[1.0, -2.0]).unwrap());
        let t = g.scale(x, 3.0);
        let y = g.add(x, t).unwrap();
        let loss = g.weighted_sum(y, &Tensor::from_f64(&[2], &[1.0, 1.0]).unwrap()).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[4.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(s)) if s == vec![2, 2]));
    }

    #[test]
    fn unreached_leaves_get_zero_gradients() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::zeros(&[3]));
        let b = g.param(Tensor::scalar(2.0));
        let loss = g.mse(b, &Tensor::scalar(1.0)).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn batchnorm_eval_is_batch_independent() {
        let mean = [0.5f64, -1.0];
        let var = [2.0f64, 0.25];
        let run = |data: &[f64], n: usize| {
            let mut g = Graph::<f64>::new();
            let x = g.input(Tensor::from_f64(&[n, 2, 1, 2], data).unwrap());
            let gamma = g.input(Tensor::from_f64(&[2], &[1.5, -0.5]).unwrap());
            let beta = g.input(Tensor::from_f64(&[2], &[0.1, 0.2]).unwrap());
            let (y, stats) = g.batchnorm2d(x, gamma, beta, BnMode::Eval { mean: &mean, var: &var }).unwrap();
            assert!(stats.is_none());
            g.value(y).data.clone()
        };
        let one = run(&[1.0, 2.0, 3.0, 4.0], 1);
        let two = run(&[1.0, 2.0, 3.0, 4.0, -7.0, 8.0, 9.0, 0.0], 2);
        assert_eq!(one[..], two[..4]);
        let expect = 1.5 * (1.0 - 0.5) / (2.0 + BN_EPS).sqrt() + 0.1;
        assert!((one[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_train_statistics() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64(&[2, 1, 1, 2], &[1.0, 2.0, 3.0, 6.0]).unwrap());
        let gamma = g.input(Tensor::from_f64(&[1], &[1.0]).unwrap());
        let beta = g.input(Tensor::from_f64(&[1], &[0.0]).unwrap());
        let (y, stats) = g.batchnorm2d(x, gamma, beta, BnMode::Train).unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![3.0]);
        assert!((stats.var_unbiased[0] - 14.0 / 3.0).abs() < 1e-12);
        let out = &g.value(y).data;
        let m: f64 = out.iter().sum::<f64>() / 4.0;
        let v: f64 = out.iter().map(|o| o * o).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-4);
    }
}
