use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{GradError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const ELU_ALPHA: f64 = 1.0;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
pub const SELU_SCALE: f64 = 1.050_700_987_355_480_5;
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
    Elu,
    Selu,
    LeakyRelu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Relu => x.max(0.0),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    ELU_ALPHA * x.exp_m1()
                }
            }
            Activation::Selu => {
                if x > 0.0 {
                    SELU_SCALE * x
                } else {
                    SELU_SCALE * SELU_ALPHA * x.exp_m1()
                }
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative at input `x` with output `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => f64::from(x > 0.0),
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + ELU_ALPHA
                }
            }
            Activation::Selu => {
                if x > 0.0 {
                    SELU_SCALE
                } else {
                    y + SELU_SCALE * SELU_ALPHA
                }
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }

    /// Whether the first derivative jumps at zero.
    pub fn has_kink(self) -> bool {
        matches!(self, Activation::Relu | Activation::Selu | Activation::LeakyRelu)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Act(Var, Activation),
    Softmax(Var, usize),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Mean(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Dropout(Var, Vec<f64>),
    Scalar { inputs: Vec<Var>, grads: Vec<Tensor> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records values and the ops that produced them, in creation order, so
/// reverse-mode gradients can be propagated from any scalar.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    kink_margin: f64,
}

/// Gradients indexed by [`Var`]. Only values that require gradients and
/// influence the loss have an entry.
#[derive(Debug)]
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zeros of the right shape if `v` did not influence
    /// the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn axis_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// C (m x n) += A (m x k) * B (k x n) with arbitrary strides on A and B.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the caller passes slices that cover every index reachable from
    // the given dimensions and strides; C is contiguous row-major m x n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            kink_margin: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest |input| seen at a kinked activation, or recorded through
    /// [`Tape::note_kink`]. Gradient checks use it to avoid sampling points
    /// where the function is not differentiable.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    pub fn note_kink(&mut self, distance: f64) {
        self.kink_margin = self.kink_margin.min(distance.abs());
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> GradError {
        GradError::ShapeMismatch {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    /// 2-D matrix product `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out).expect("shape"), Op::MatMul(a, b), rg))
    }

    /// Elementwise sum. `b` may have the shape of a trailing part of `a`'s
    /// shape and is then broadcast over the leading dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(self.mismatch("add", a, b));
        }
        let bd = self.value(b).data();
        let mut out = self.value(a).clone();
        if !bd.is_empty() {
            for chunk in out.data_mut().chunks_exact_mut(bd.len()) {
                chunk.iter_mut().zip(bd).for_each(|(o, v)| *o += v);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Elementwise product of equally shaped values.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let mut out = self.value(a).clone();
        out.data_mut()
            .iter_mut()
            .zip(self.value(b).data())
            .for_each(|(o, v)| *o *= v);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        if act == Activation::Linear {
            return x;
        }
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
        if act.has_kink() {
            let m = self
                .value(x)
                .data()
                .iter()
                .fold(f64::INFINITY, |m, v| m.min(v.abs()));
            self.note_kink(m);
        }
        let rg = self.rg(x);
        self.push(out, Op::Act(x, act), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, GradError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(GradError::BadAxis { axis, shape });
        }
        let (outer, dim, inner) = axis_dims(&shape, axis);
        let mut out = self.value(x).clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * dim + k) * inner + i;
                let mx = (0..dim).fold(f64::NEG_INFINITY, |m, k| m.max(d[idx(k)]));
                let mut sum = 0.0;
                for k in 0..dim {
                    let e = (d[idx(k)] - mx).exp();
                    d[idx(k)] = e;
                    sum += e;
                }
                for k in 0..dim {
                    d[idx(k)] /= sum;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x, axis), rg))
    }

    /// Joins values along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, GradError> {
        let first = *xs.first().ok_or(GradError::EmptyConcat)?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(GradError::BadAxis { axis, shape: base });
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(self.mismatch("concat", first, v));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_dims(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in xs {
                let dim = self.shape(v)[axis];
                let block = dim * inner;
                out.extend_from_slice(&self.value(v).data()[o * block..(o + 1) * block]);
            }
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::new(shape, out).expect("shape"), Op::Concat(xs.to_vec(), axis), rg))
    }

    pub fn slice(&mut self, x: Var, axis: usize, range: Range<usize>) -> Result<Var, GradError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || range.end > shape[axis] || range.start > range.end {
            return Err(GradError::BadSlice {
                axis,
                start: range.start,
                end: range.end,
                shape,
            });
        }
        let (outer, dim, inner) = axis_dims(&shape, axis);
        let len = range.len();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + range.start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(new_shape, out).expect("shape"),
            Op::Slice {
                x,
                axis,
                start: range.start,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, GradError> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(GradError::ShapeMismatch {
                op: "reshape",
                left: self.shape(x).to_vec(),
                right: shape.to_vec(),
            });
        }
        let out = self.value(x).clone().reshaped(shape.to_vec());
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.value(x).data();
        let m = d.iter().sum::<f64>() / d.len().max(1) as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Batch normalization of `x: [B, F]` with batch statistics (population
    /// variance). Returns the output with the batch mean and variance so the
    /// caller can update running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>), GradError> {
        let (b, f) = self.bn_shapes(x, gamma, beta)?;
        let d = self.value(x).data();
        let mut mean = vec![0.0; f];
        let mut var = vec![0.0; f];
        for r in 0..b {
            for j in 0..f {
                mean[j] += d[r * f + j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= b as f64);
        for r in 0..b {
            for j in 0..f {
                let c = d[r * f + j] - mean[j];
                var[j] += c * c;
            }
        }
        var.iter_mut().for_each(|v| *v /= b as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.bn_forward(x, gamma, beta, &mean, inv_std, true);
        Ok((out, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var, GradError> {
        let (_, f) = self.bn_shapes(x, gamma, beta)?;
        if running_mean.len() != f || running_var.len() != f {
            return Err(GradError::ShapeMismatch {
                op: "batch_norm",
                left: self.shape(x).to_vec(),
                right: vec![running_mean.len()],
            });
        }
        let inv_std = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        Ok(self.bn_forward(x, gamma, beta, running_mean, inv_std, false))
    }

    fn bn_shapes(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize), GradError> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(self.mismatch("batch_norm", x, gamma));
        }
        if self.shape(gamma) != [s[1]] {
            return Err(self.mismatch("batch_norm", x, gamma));
        }
        if self.shape(beta) != [s[1]] {
            return Err(self.mismatch("batch_norm", x, beta));
        }
        Ok((s[0], s[1]))
    }

    fn bn_forward(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        batch_stats: bool,
    ) -> Var {
        let shape = self.shape(x).to_vec();
        let f = shape[1];
        let xhat: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - mean[i % f]) * inv_std[i % f])
            .collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| v * g[i % f] + be[i % f])
            .collect();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::new(shape, out).expect("shape"),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        )
    }

    /// Inverted dropout: each element is zeroed with probability `rate` and
    /// survivors are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().zip(&mask).for_each(|(o, m)| *o *= m);
        let rg = self.rg(x);
        self.push(out, Op::Dropout(x, mask), rg)
    }

    /// Records a scalar computed outside the tape together with its gradient
    /// with respect to each input.
    pub fn scalar_fn(&mut self, inputs: &[Var], value: f64, grads: Vec<Tensor>) -> Result<Var, GradError> {
        for (&v, g) in inputs.iter().zip(&grads) {
            if self.shape(v) != g.shape() {
                return Err(GradError::ShapeMismatch {
                    op: "scalar_fn",
                    left: self.shape(v).to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        if inputs.len() != grads.len() {
            return Err(GradError::ShapeMismatch {
                op: "scalar_fn",
                left: vec![inputs.len()],
                right: vec![grads.len()],
            });
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::scalar(value),
            Op::Scalar {
                inputs: inputs.to_vec(),
                grads,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, GradError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(GradError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients(
            grads
                .into_iter()
                .enumerate()
                .map(|(i, g)| g.map(|d| Tensor::new(self.nodes[i].value.shape().to_vec(), d).expect("shape")))
                .collect(),
        ))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.rg(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.value(v).len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                // dA = dC * B^T, dB = A^T * dC.
                acc(*a, &mut |ga| gemm_acc(m, n, k, g, (n as isize, 1), bd, (1, n as isize), ga));
                acc(*b, &mut |gb| gemm_acc(k, m, n, ad, (1, k as isize), g, (n as isize, 1), gb));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| {
                    let w = gb.len();
                    if w == 0 {
                        return;
                    }
                    for chunk in g.chunks_exact(w) {
                        gb.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(bd) {
                        *x += y * v;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, y), v) in gb.iter_mut().zip(g).zip(ad) {
                        *x += y * v;
                    }
                });
            }
            Op::Act(x, act) => {
                let xd = self.value(*x).data();
                let yd = node.value.data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * act.derivative(xd[i], yd[i]);
                    }
                });
            }
            Op::Softmax(x, axis) => {
                let (outer, dim, inner) = axis_dims(node.value.shape(), *axis);
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * dim + k) * inner + i;
                            let dot: f64 = (0..dim).map(|k| g[idx(k)] * y[idx(k)]).sum();
                            for k in 0..dim {
                                gx[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = axis_dims(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let dim = self.shape(v)[*axis];
                    let block = dim * inner;
                    acc(v, &mut |gv| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            gv[o * block..(o + 1) * block]
                                .iter_mut()
                                .zip(&g[src..src + block])
                                .for_each(|(x, y)| *x += y);
                        }
                    });
                    offset += dim;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, dim, inner) = axis_dims(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        let dst = (o * dim + start) * inner;
                        let src = o * len * inner;
                        gx[dst..dst + len * inner]
                            .iter_mut()
                            .zip(&g[src..src + len * inner])
                            .for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Reshape(x) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len().max(1) as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0] / n));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let f = inv_std.len();
                let b = xhat.len() / f.max(1);
                let gd = self.value(*gamma).data();
                acc(*gamma, &mut |gg| {
                    for (i, (y, h)) in g.iter().zip(xhat).enumerate() {
                        gg[i % f] += y * h;
                    }
                });
                acc(*beta, &mut |gb| {
                    for (i, y) in g.iter().enumerate() {
                        gb[i % f] += y;
                    }
                });
                acc(*x, &mut |gx| {
                    if *batch_stats {
                        let mut sum = vec![0.0; f];
                        let mut sum_h = vec![0.0; f];
                        for i in 0..g.len() {
                            let dh = g[i] * gd[i % f];
                            sum[i % f] += dh;
                            sum_h[i % f] += dh * xhat[i];
                        }
                        let bf = b as f64;
                        for i in 0..g.len() {
                            let j = i % f;
                            let dh = g[i] * gd[j];
                            gx[i] += inv_std[j] / bf * (bf * dh - sum[j] - xhat[i] * sum_h[j]);
                        }
                    } else {
                        for i in 0..g.len() {
                            gx[i] += g[i] * gd[i % f] * inv_std[i % f];
                        }
                    }
                });
            }
            Op::Dropout(x, mask) => {
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * mask[i];
                    }
                });
            }
            Op::Scalar { inputs, grads: local } => {
                for (&v, lg) in inputs.iter().zip(local) {
                    acc(v, &mut |gv| {
                        gv.iter_mut().zip(lg.data()).for_each(|(a, b)| *a += g[0] * b);
                    });
                }
            }
        }
    }
}
