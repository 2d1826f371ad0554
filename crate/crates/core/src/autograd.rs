//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its output value. `backward` walks the
//! nodes in exact reverse order of recording, so a node's gradient is complete
//! before it is propagated to its inputs.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Statistics for BatchNorm.
#[derive(Clone, Debug)]
pub enum NormStats<'a> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with fixed statistics (`mean`, biased `var`) per channel.
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics observed by a batch-mode BatchNorm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Biased variance (divided by the element count).
    pub var: Vec<f64>,
    /// Number of elements per channel.
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Conv {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch: bool,
    },
    Relu(Var),
    Softmax(Var, usize),
    Mean(Var),
    Sum(Var),
    Concat(Vec<Var>, usize),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    IndexSelect {
        x: Var,
        axis: usize,
        index: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records differentiable operations and replays them backward.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    grad_enabled: bool,
    params: HashMap<ParamId, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            params: HashMap::new(),
        }
    }

    /// A tape that computes values only; nothing on it requires a gradient.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param, p.trainable);
        self.params.insert(id, v);
        v
    }

    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() {
            return Err(Error::dim(op, format!("rank mismatch {sa:?} vs {sb:?}")));
        }
        sa.iter()
            .zip(sb)
            .map(|(&x, &y)| match (x, y) {
                _ if x == y => Ok(x),
                (1, _) => Ok(y),
                (_, 1) => Ok(x),
                _ => Err(Error::dim(op, format!("cannot broadcast {sa:?} with {sb:?}"))),
            })
            .collect()
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let full = self.broadcast_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let n = full.iter().product();
            let mut out = vec![0.0; n];
            let sa = kernels::broadcast_strides(ta.shape(), &full);
            let sb = kernels::broadcast_strides(tb.shape(), &full);
            let (da, db) = (ta.data(), tb.data());
            kernels::for_each_broadcast(&full, &sa, &sb, |i, oa, ob| out[i] = f(da[oa], db[ob]));
            out
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(full, data), op, rg))
    }

    /// Elementwise sum, broadcasting over singleton axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product, broadcasting over singleton axes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() != 2 {
            return Err(Error::dim("transpose", format!("expected a matrix, got {:?}", t.shape())));
        }
        let out = t.permute(&[1, 0])?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    /// Cross-correlation along axis 2 of `x: [N, C_in, T, V]` with
    /// `w: [C_out, C_in, K, 1]`, zero-padding `pad` frames on both ends.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::dim("conv2d", format!("input {sx:?}, kernel {sw:?}")));
        }
        if sw[1] != sx[1] {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {sw:?} expects {} input channels, input {sx:?}", sw[1]),
            ));
        }
        if sw[3] != 1 {
            return Err(Error::dim("conv2d", format!("joint-axis kernel extent must be 1, got {sw:?}")));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be positive"));
        }
        let padded = sx[2] + 2 * pad;
        if sw[2] > padded {
            return Err(Error::dim(
                "conv2d",
                format!("kernel length {} exceeds padded input length {padded}", sw[2]),
            ));
        }
        let geom = ConvGeom {
            n: sx[0],
            c_in: sx[1],
            c_out: sw[0],
            t_in: sx[2],
            t_out: (padded - sw[2]) / stride + 1,
            v: sx[3],
            k: sw[2],
            stride,
            pad,
        };
        let out = kernels::conv_forward(&geom, self.value(x).data(), self.value(w).data());
        let shape = vec![geom.n, geom.c_out, geom.t_out, geom.v];
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv { x, w, geom }, rg))
    }

    /// Per-channel normalization of `x: [N, C, ...]` over every axis but 1,
    /// followed by `gamma * xhat + beta`. Returns the batch moments when
    /// `stats` is [`NormStats::Batch`].
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(Error::dim("batchnorm", format!("expected [N, C, ...], got {sx:?}")));
        }
        let c = sx[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(
                "batchnorm",
                format!("affine shapes {:?}/{:?} for {c} channels", self.shape(gamma), self.shape(beta)),
            ));
        }
        let n = sx[0];
        let s: usize = sx[2..].iter().product();
        let count = n * s;
        let xd = self.value(x).data();
        let (mean, var, batch) = match stats {
            NormStats::Batch => {
                if count < 2 {
                    return Err(Error::dim(
                        "batchnorm",
                        format!("batch statistics need at least 2 values per channel, got {count}"),
                    ));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for i in 0..n {
                        acc += xd[(i * c + ch) * s..(i * c + ch + 1) * s].iter().sum::<f64>();
                    }
                    let mu = acc / count as f64;
                    let mut sq = 0.0;
                    for i in 0..n {
                        sq += xd[(i * c + ch) * s..(i * c + ch + 1) * s]
                            .iter()
                            .map(|&v| (v - mu) * (v - mu))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = sq / count as f64;
                }
                (mean, var, true)
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::dim("batchnorm", "running statistics have the wrong length"));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                for j in base..base + s {
                    let h = (xd[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    out[j] = g[ch] * h + b[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let moments = batch.then(|| BatchMoments {
            mean: mean.clone(),
            var: var.clone(),
            count,
        });
        let (xhat, inv_std) = if rg && self.grad_enabled {
            (xhat, inv_std)
        } else {
            (Vec::new(), Vec::new())
        };
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch,
        };
        Ok((self.push(Tensor::from_parts(sx, out), op, rg), moments))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.ndim() {
            return Err(Error::dim("softmax", format!("axis {axis} for shape {:?}", t.shape())));
        }
        let (outer, d, inner) = kernels::split_axis(t.shape(), axis);
        let x = t.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * d + k) * inner + i;
                let m = (0..d).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..d {
                    let e = (x[at(k)] - m).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..d {
                    out[at(k)] /= z;
                }
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(a, axis), rg))
    }

    /// Mean over `axes`, keeping them as extent-1 axes.
    pub fn mean_pool(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axes.iter().any(|&ax| ax >= shape.len()) {
            return Err(Error::dim("mean_pool", format!("axes {axes:?} for shape {shape:?}")));
        }
        let mut small = shape.clone();
        for &ax in axes {
            small[ax] = 1;
        }
        let count = (shape.iter().product::<usize>() / small.iter().product::<usize>()) as f64;
        let mut sum = kernels::reduce_to(self.value(a).data(), &shape, &small);
        sum.iter_mut().for_each(|v| *v /= count);
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(small, sum), Op::Mean(a), rg))
    }

    /// Sum of all entries as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::dim("concat", "no operands"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let agree = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !agree {
                return Err(Error::dim("concat", format!("{s:?} does not match {base:?} off axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let t = self.value(x);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(xs.to_vec(), axis), rg))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).narrow(axis, start, len)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Narrow { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Gathers entries `index[i]` along `axis`; indices may repeat.
    pub fn index_select(&mut self, x: Var, axis: usize, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || index.is_empty() || index.iter().any(|&i| i >= shape[axis]) {
            return Err(Error::dim("index_select", format!("indices {index:?} on axis {axis} of {shape:?}")));
        }
        let (outer, d, inner) = kernels::split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * index.len() * inner);
        for o in 0..outer {
            for &i in index {
                let at = (o * d + i) * inner;
                data.extend_from_slice(&src[at..at + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = index.len();
        let rg = self.rg(x);
        let op = Op::IndexSelect {
            x,
            axis,
            index: index.to_vec(),
        };
        Ok(self.push(Tensor::from_parts(out_shape, data), op, rg))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)` for
    /// `logits: [N, K]`. Returns a `[1]` tensor.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim(
                "cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Usage(format!("label {bad} outside [0, {k})")));
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &x[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            let log_z = z.ln() + m;
            loss += log_z - row[labels[i]];
            for j in 0..k {
                probs[i * k + j] = (row[j] - log_z).exp();
            }
        }
        let rg = self.rg(logits);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss / n as f64), op, rg))
    }

    /// Populates gradients of the scalar `loss` for every node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Adds the gradient of every bound parameter into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (&id, &v) in &self.params {
            if let Some(g) = self.grad(v) {
                let p = store.get_mut(id);
                for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.rg(*a) {
                    let r = kernels::reduce_to(gd, g.shape(), self.shape(*a));
                    self.acc(grads, *a, r);
                }
                if self.rg(*b) {
                    let mut r = kernels::reduce_to(gd, g.shape(), self.shape(*b));
                    if sign < 0.0 {
                        r.iter_mut().for_each(|v| *v = -*v);
                    }
                    self.acc(grads, *b, r);
                }
            }
            Op::Mul(a, b) => {
                let full = g.shape();
                let (ta, tb) = (self.value(*a), self.value(*b));
                let sa = kernels::broadcast_strides(ta.shape(), full);
                let sb = kernels::broadcast_strides(tb.shape(), full);
                let (da, db) = (ta.data(), tb.data());
                if self.rg(*a) {
                    let mut r = vec![0.0; da.len()];
                    kernels::for_each_broadcast(full, &sa, &sb, |k, oa, ob| r[oa] += gd[k] * db[ob]);
                    self.acc(grads, *a, r);
                }
                if self.rg(*b) {
                    let mut r = vec![0.0; db.len()];
                    kernels::for_each_broadcast(full, &sa, &sb, |k, oa, ob| r[ob] += gd[k] * da[oa]);
                    self.acc(grads, *b, r);
                }
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, gd.iter().map(|v| v * c).collect());
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.rg(*a) {
                    let mut r = vec![0.0; m * k];
                    kernels::gemm(m, n, k, gd, false, tb.data(), true, &mut r, false);
                    self.acc(grads, *a, r);
                }
                if self.rg(*b) {
                    let mut r = vec![0.0; k * n];
                    kernels::gemm(k, m, n, ta.data(), true, gd, false, &mut r, false);
                    self.acc(grads, *b, r);
                }
            }
            Op::Transpose(a) => {
                let r = g.permute(&[1, 0]).expect("matrix");
                self.acc(grads, *a, r.into_data());
            }
            Op::Conv { x, w, geom } => {
                let (dx, dw) = kernels::conv_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    self.rg(*x),
                    self.rg(*w),
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.acc(grads, *w, dw);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            } => {
                let sx = g.shape();
                let (n, c) = (sx[0], sx[1]);
                let s: usize = sx[2..].iter().product();
                let m = (n * s) as f64;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * s;
                        for j in base..base + s {
                            dgamma[ch] += gd[j] * xhat[j];
                            dbeta[ch] += gd[j];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * s;
                            let scale = gam[ch] * inv_std[ch];
                            for j in base..base + s {
                                dx[j] = if *batch {
                                    scale * (gd[j] - dbeta[ch] / m - xhat[j] * dgamma[ch] / m)
                                } else {
                                    scale * gd[j]
                                };
                            }
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                if self.rg(*gamma) {
                    self.acc(grads, *gamma, dgamma);
                }
                if self.rg(*beta) {
                    self.acc(grads, *beta, dbeta);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let r = gd
                    .iter()
                    .zip(x)
                    .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
                    .collect();
                self.acc(grads, *a, r);
            }
            Op::Softmax(a, axis) => {
                let y = node.value.data();
                let (outer, d, inner) = kernels::split_axis(g.shape(), *axis);
                let mut r = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * d + k) * inner + i;
                        let dot: f64 = (0..d).map(|k| gd[at(k)] * y[at(k)]).sum();
                        for k in 0..d {
                            r[at(k)] = y[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                self.acc(grads, *a, r);
            }
            Op::Mean(a) => {
                let full = self.shape(*a);
                let count = (full.iter().product::<usize>() / gd.len()) as f64;
                let st = kernels::broadcast_strides(g.shape(), full);
                let mut r = vec![0.0; full.iter().product()];
                kernels::for_each_broadcast(full, &st, &st, |k, o, _| r[k] = gd[o] / count);
                self.acc(grads, *a, r);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.acc(grads, *a, vec![gd[0]; n]);
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = kernels::split_axis(g.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let d = self.shape(x)[*axis];
                    if self.rg(x) {
                        let mut r = Vec::with_capacity(outer * d * inner);
                        for o in 0..outer {
                            let at = (o * total + offset) * inner;
                            r.extend_from_slice(&gd[at..at + d * inner]);
                        }
                        self.acc(grads, x, r);
                    }
                    offset += d;
                }
            }
            Op::Narrow { x, axis, start } => {
                let full = self.shape(*x);
                let (outer, d, inner) = kernels::split_axis(full, *axis);
                let len = g.shape()[*axis];
                let mut r = vec![0.0; outer * d * inner];
                for o in 0..outer {
                    let dst = (o * d + start) * inner;
                    r[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc(grads, *x, r);
            }
            Op::Reshape(a) => {
                self.acc(grads, *a, gd.to_vec());
            }
            Op::IndexSelect { x, axis, index } => {
                let full = self.shape(*x);
                let (outer, d, inner) = kernels::split_axis(full, *axis);
                let mut r = vec![0.0; outer * d * inner];
                for o in 0..outer {
                    for (j, &i) in index.iter().enumerate() {
                        let src = (o * index.len() + j) * inner;
                        let dst = (o * d + i) * inner;
                        for t in 0..inner {
                            r[dst + t] += gd[src + t];
                        }
                    }
                }
                self.acc(grads, *x, r);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = gd[0] / n as f64;
                let mut r: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    r[i * k + l] -= scale;
                }
                self.acc(grads, *logits, r);
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, delta: Vec<f64>) {
        match &mut grads[v.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(&delta) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::from_parts(self.shape(v).to_vec(), delta));
            }
        }
    }
}
