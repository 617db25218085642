//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns every intermediate value of one forward pass. Operations
//! append nodes in execution order, so the node list is already a valid
//! topological order and the reverse pass is a single backwards sweep.

use alloc::vec;
use alloc::vec::Vec;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{bcast_plan, broadcast_shapes, numel, permute_data, Bcast, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Sigmoid(Var),
    Gelu(Var),
    Clamp(Var, T, T),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    FrobNorm {
        x: Var,
        eps: T,
        norms: Vec<T>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Roll(Var, usize, isize),
    Narrow(Var, usize, usize),
    Concat(Vec<Var>, usize),
    Expand(Var),
    SumAll(Var),
    SumAxis(Var, usize),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    track: bool,
}

/// Leaf gradients produced by one [`Graph::backward`] call.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    /// A graph that records operations for differentiation.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            track: true,
        }
    }

    /// A graph that only evaluates; `backward` yields no gradients.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            track: false,
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.track,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = self.track && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if rg { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- linear algebra ----

    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let plan = MatMulPlan::new(sa, sb)?;
        let mut out = vec![T::zero(); numel(&plan.out_shape)];
        plan.forward(self.value(a).data(), self.value(b).data(), &mut out);
        let t = Tensor::new(&plan.out_shape, out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    // ---- elementwise ----

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shapes(name, sa, sb)?;
        let pa = bcast_plan(&out_shape, sa);
        let pb = bcast_plan(&out_shape, sb);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n = numel(&out_shape);
        let data = match (&pa, &pb) {
            (Bcast::Same, Bcast::Same) => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            (Bcast::Same, Bcast::Cycle(p)) => {
                let mut out = Vec::with_capacity(n);
                for chunk in da.chunks(*p) {
                    out.extend(chunk.iter().zip(db).map(|(&x, &y)| f(x, y)));
                }
                out
            }
            _ => (0..n).map(|i| f(da[pa.src(i)], db[pb.src(i)])).collect(),
        };
        Tensor::new(&out_shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    /// Hadamard product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|v| v * s);
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|v| v + s);
        self.push(t, Op::Offset(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(kernels::sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(kernels::gelu);
        self.push(t, Op::Gelu(a), &[a])
    }

    /// Elementwise `min(max(x, lo), hi)`. The reverse pass lets gradient
    /// through on the closed interval `[lo, hi]`, boundary included.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Error::Argument(alloc::format!(
                "clamp bounds lo={:?} > hi={:?}",
                lo,
                hi
            )));
        }
        let t = self.value(a).map(|v| v.max(lo).min(hi));
        Ok(self.push(t, Op::Clamp(a, lo, hi), &[a]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let w = *x.shape().last().ok_or_else(|| Error::dim("softmax", x.shape(), &[]))?;
        let mut out = vec![T::zero(); x.len()];
        if w > 0 {
            kernels::softmax_rows(x.data(), w, &mut out);
        }
        let t = Tensor::new(x.shape(), out)?;
        Ok(self.push(t, Op::Softmax(a), &[a]))
    }

    /// Normalizes the last axis to zero mean and unit (biased) variance,
    /// then applies the optional affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: T) -> Result<Var> {
        let xs = self.shape(x);
        let w = *xs.last().ok_or_else(|| Error::dim("layer_norm", xs, &[]))?;
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [w] {
                return Err(Error::dim("layer_norm", xs, self.shape(p)));
            }
        }
        let xv = self.value(x).data();
        let (mean, rstd) = kernels::row_moments(xv, w, eps);
        let g = gamma.map(|v| self.value(v).data());
        let b = beta.map(|v| self.value(v).data());
        let mut out = Vec::with_capacity(xv.len());
        for (r, row) in xv.chunks_exact(w).enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let mut y = (v - mean[r]) * rstd[r];
                if let Some(g) = g {
                    y = y * g[j];
                }
                if let Some(b) = b {
                    y = y + b[j];
                }
                out.push(y);
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        let mut inputs = vec![x];
        inputs.extend(gamma);
        inputs.extend(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            &inputs,
        ))
    }

    /// Divides each matrix slice (last two axes) by its Frobenius norm plus `eps`.
    pub fn frobenius_normalize(&mut self, x: Var, eps: T) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() < 2 || !(eps > T::zero()) {
            return Err(Error::Argument(alloc::format!(
                "frobenius_normalize needs rank >= 2 and eps > 0, got {:?}, {:?}",
                xs,
                eps
            )));
        }
        let slice = xs[xs.len() - 2] * xs[xs.len() - 1];
        let xv = self.value(x).data();
        let mut norms = Vec::with_capacity(xv.len() / slice.max(1));
        let mut out = Vec::with_capacity(xv.len());
        for chunk in xv.chunks(slice.max(1)) {
            let n = chunk.iter().map(|&v| v * v).sum::<T>().sqrt();
            let c = T::one() / (n + eps);
            out.extend(chunk.iter().map(|&v| v * c));
            norms.push(n);
        }
        let t = Tensor::new(xs, out)?;
        Ok(self.push(t, Op::FrobNorm { x, eps, norms }, &[x]))
    }

    // ---- structural ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(a).permute(axes)?;
        Ok(self.push(t, Op::Permute(a, axes.to_vec()), &[a]))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::dim("transpose", self.shape(a), &[]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    /// Cyclic shift along `axis`: `out[i] = in[(i - shift) mod n]`.
    pub fn roll(&mut self, a: Var, axis: usize, shift: isize) -> Result<Var> {
        let s = self.shape(a);
        if axis >= s.len() {
            return Err(Error::dim("roll", s, &[axis]));
        }
        let data = roll_data(s, self.value(a).data(), axis, shift);
        let t = Tensor::new(s, data)?;
        Ok(self.push(t, Op::Roll(a, axis, shift), &[a]))
    }

    /// Slice `[start, start + len)` of `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::dim("narrow", &s, &[axis, start, len]));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Narrow(a, axis, start), &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::Argument("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::dim("concat", &first, s));
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// Broadcasts `a` to `shape` by trailing-axis alignment.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        let b = broadcast_shapes("expand", shape, s)?;
        if b != shape {
            return Err(Error::dim("expand", s, shape));
        }
        let plan = bcast_plan(shape, s);
        let src = self.value(a).data();
        let data = (0..numel(shape)).map(|i| src[plan.src(i)]).collect();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Expand(a), &[a]))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis_keep(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::dim("sum_axis", &s, &[axis]));
        }
        let (outer, n, inner) = (numel(&s[..axis]), s[axis], numel(&s[axis + 1..]));
        let src = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let row = &src[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d = *d + v;
                }
            }
        }
        let mut shape = s;
        shape[axis] = 1;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::SumAxis(a, axis), &[a]))
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(Error::dim("mean_axis", &s, &[axis]));
        }
        let n = s[axis];
        let summed = self.sum_axis_keep(a, axis)?;
        let mut shape = s;
        shape.remove(axis);
        let r = self.reshape(summed, &shape)?;
        Ok(self.scale(r, T::one() / T::of(n as f64)))
    }

    /// Mean softmax cross-entropy of `logits` (M×N) against class `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::dim("cross_entropy", s, &[labels.len()]));
        }
        let (m, n) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::Argument(alloc::format!("label {bad} out of range for {n} classes")));
        }
        let mut probs = vec![T::zero(); m * n];
        kernels::softmax_rows(self.value(logits).data(), n, &mut probs);
        let x = self.value(logits).data();
        let mut loss = T::zero();
        for (r, &l) in labels.iter().enumerate() {
            let row = &x[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss = loss + (lse - row[l]);
        }
        loss = loss / T::of(m as f64);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    // ---- reverse pass ----

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward", self.shape(loss), &[1]));
        }
        self.backward_with(loss, Tensor::ones(self.shape(loss)))
    }

    /// Reverse pass seeded with an explicit output cotangent.
    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(out) {
            return Err(Error::dim("backward", self.shape(out), seed.shape()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(out.0 + 1);
        grads.resize_with(out.0 + 1, || None);
        if self.nodes[out.0].requires_grad {
            grads[out.0] = Some(seed.into_data());
        }
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (g, &node.op) {
                    (Some(g), Op::Leaf) if node.requires_grad => {
                        Some(Tensor::new(node.value.shape(), g).expect("grad shape"))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn reduce_to(&self, g: &[T], out_shape: &[usize], v: Var) -> Vec<T> {
        let in_shape = self.shape(v);
        match bcast_plan(out_shape, in_shape) {
            Bcast::Same => g.to_vec(),
            plan => {
                let mut acc = vec![T::zero(); numel(in_shape)];
                for (i, &gv) in g.iter().enumerate() {
                    let j = plan.src(i);
                    acc[j] = acc[j] + gv;
                }
                acc
            }
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let out_shape = node.value.shape();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let plan = MatMulPlan::new(self.shape(*a), self.shape(*b))?;
                let (ga, gb) = plan.backward(
                    self.value(*a).data(),
                    self.value(*b).data(),
                    g,
                    self.requires_grad(*a),
                    self.requires_grad(*b),
                );
                if let Some(ga) = ga {
                    self.accum(grads, *a, ga);
                }
                if let Some(gb) = gb {
                    self.accum(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                let ga = self.reduce_to(g, out_shape, *a);
                self.accum(grads, *a, ga);
                let gb = self.reduce_to(g, out_shape, *b);
                self.accum(grads, *b, gb);
            }
            Op::Sub(a, b) => {
                let ga = self.reduce_to(g, out_shape, *a);
                self.accum(grads, *a, ga);
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                let gb = self.reduce_to(&neg, out_shape, *b);
                self.accum(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let pa = bcast_plan(out_shape, self.shape(*a));
                let pb = bcast_plan(out_shape, self.shape(*b));
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    let prod: Vec<T> = g.iter().enumerate().map(|(i, &gv)| gv * db[pb.src(i)]).collect();
                    let ga = self.reduce_to(&prod, out_shape, *a);
                    self.accum(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let prod: Vec<T> = g.iter().enumerate().map(|(i, &gv)| gv * da[pa.src(i)]).collect();
                    let gb = self.reduce_to(&prod, out_shape, *b);
                    self.accum(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => self.accum(grads, *a, g.iter().map(|&v| v * *s).collect()),
            Op::Offset(a) | Op::Reshape(a) => self.accum(grads, *a, g.to_vec()),
            Op::Sigmoid(a) => {
                let ga = g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (T::one() - yv)).collect();
                self.accum(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let ga = g.iter().zip(x).map(|(&gv, &xv)| gv * kernels::gelu_grad(xv)).collect();
                self.accum(grads, *a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv >= *lo && xv <= *hi { gv } else { T::zero() })
                    .collect();
                self.accum(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let w = *out_shape.last().unwrap_or(&1);
                let mut ga = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(w.max(1)).zip(y.chunks(w.max(1))) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    ga.extend(grow.iter().zip(yrow).map(|(&gv, &yv)| yv * (gv - dot)));
                }
                self.accum(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let w = *out_shape.last().unwrap_or(&1);
                let xv = self.value(*x).data();
                let gam = gamma.map(|v| self.value(v).data());
                let mut gx = Vec::with_capacity(xv.len());
                let mut ggamma = vec![T::zero(); w];
                let mut gbeta = vec![T::zero(); w];
                let inv_w = T::one() / T::of(w as f64);
                let mut dxhat = vec![T::zero(); w];
                for (r, (xrow, grow)) in xv.chunks_exact(w).zip(g.chunks_exact(w)).enumerate() {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for j in 0..w {
                        let xhat = (xrow[j] - mu) * rs;
                        ggamma[j] = ggamma[j] + grow[j] * xhat;
                        gbeta[j] = gbeta[j] + grow[j];
                        let d = match gam {
                            Some(gm) => grow[j] * gm[j],
                            None => grow[j],
                        };
                        dxhat[j] = d;
                        sum_d = sum_d + d;
                        sum_dx = sum_dx + d * xhat;
                    }
                    let (md, mdx) = (sum_d * inv_w, sum_dx * inv_w);
                    for j in 0..w {
                        let xhat = (xrow[j] - mu) * rs;
                        gx.push(rs * (dxhat[j] - md - xhat * mdx));
                    }
                }
                self.accum(grads, *x, gx);
                if let Some(gm) = gamma {
                    self.accum(grads, *gm, ggamma);
                }
                if let Some(bt) = beta {
                    self.accum(grads, *bt, gbeta);
                }
            }
            Op::FrobNorm { x, eps, norms } => {
                let xv = self.value(*x).data();
                let r = self.shape(*x).len();
                let slice = (self.shape(*x)[r - 2] * self.shape(*x)[r - 1]).max(1);
                let mut gx = Vec::with_capacity(xv.len());
                for ((xs, gs), &n) in xv.chunks(slice).zip(g.chunks(slice)).zip(norms) {
                    let c = T::one() / (n + *eps);
                    if n > T::zero() {
                        let dot: T = xs.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                        let k = c * c * dot / n;
                        gx.extend(xs.iter().zip(gs).map(|(&xv, &gv)| c * gv - k * xv));
                    } else {
                        gx.extend(gs.iter().map(|&gv| c * gv));
                    }
                }
                self.accum(grads, *x, gx);
            }
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                let (_, ga) = permute_data(out_shape, g, &inv)?;
                self.accum(grads, *a, ga);
            }
            Op::Roll(a, axis, shift) => {
                let ga = roll_data(out_shape, g, *axis, -*shift);
                self.accum(grads, *a, ga);
            }
            Op::Narrow(a, axis, start) => {
                let s = self.shape(*a);
                let (outer, n, inner) = (numel(&s[..*axis]), s[*axis], numel(&s[*axis + 1..]));
                let len = out_shape[*axis];
                let mut ga = vec![T::zero(); numel(s)];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    ga[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accum(grads, *a, ga);
            }
            Op::Concat(parts, axis) => {
                let outer = numel(&out_shape[..*axis]);
                let inner = numel(&out_shape[*axis + 1..]);
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    if self.requires_grad(p) {
                        let mut gp = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            gp.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                        }
                        self.accum(grads, p, gp);
                    }
                    offset += len;
                }
            }
            Op::Expand(a) => {
                let ga = self.reduce_to(g, out_shape, *a);
                self.accum(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let n = self.value(*a).len();
                self.accum(grads, *a, vec![g[0]; n]);
            }
            Op::SumAxis(a, axis) => {
                let s = self.shape(*a);
                let (outer, n, inner) = (numel(&s[..*axis]), s[*axis], numel(&s[*axis + 1..]));
                let mut ga = Vec::with_capacity(numel(s));
                for o in 0..outer {
                    for _ in 0..n {
                        ga.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                self.accum(grads, *a, ga);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = self.shape(*logits)[1];
                let m = labels.len();
                let scale = g[0] / T::of(m as f64);
                let mut ga: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    ga[r * n + l] = ga[r * n + l] - scale;
                }
                self.accum(grads, *logits, ga);
            }
        }
        Ok(())
    }
}

fn roll_data<T: Copy>(shape: &[usize], src: &[T], axis: usize, shift: isize) -> Vec<T> {
    let (outer, n, inner) = (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]));
    if n == 0 {
        return src.to_vec();
    }
    let mut out = Vec::with_capacity(src.len());
    let s = shift.rem_euclid(n as isize) as usize;
    for o in 0..outer {
        for i in 0..n {
            let j = (i + n - s) % n;
            let base = (o * n + j) * inner;
            out.extend_from_slice(&src[base..base + inner]);
        }
    }
    out
}

/// Batch layout of a broadcast matrix product.
struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    a_offsets: Vec<usize>,
    b_offsets: Vec<usize>,
    /// every batch of `a` pairs with the single matrix `b`
    shared_rhs: bool,
}

impl MatMulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shapes("matmul", ba, bb).map_err(|_| Error::dim("matmul", sa, sb))?;
        let nb = numel(&batch);
        let offsets = |shape: &[usize], stride: usize| -> Vec<usize> {
            let plan = bcast_plan(&batch, shape);
            (0..nb).map(|i| plan.src(i) * stride).collect()
        };
        let shared_rhs = numel(bb) == 1 && ba == batch.as_slice();
        let mut out_shape = batch.clone();
        out_shape.push(m);
        out_shape.push(n);
        Ok(MatMulPlan {
            m,
            k,
            n,
            out_shape,
            a_offsets: offsets(ba, m * k),
            b_offsets: offsets(bb, k * n),
            shared_rhs,
        })
    }

    fn batches(&self) -> usize {
        self.a_offsets.len()
    }

    fn forward<T: Element>(&self, a: &[T], b: &[T], c: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.shared_rhs {
            kernels::gemm_nn(m * self.batches(), k, n, a, b, c);
            return;
        }
        for (i, (&ao, &bo)) in self.a_offsets.iter().zip(&self.b_offsets).enumerate() {
            kernels::gemm_nn(m, k, n, &a[ao..ao + m * k], &b[bo..bo + k * n], &mut c[i * m * n..(i + 1) * m * n]);
        }
    }

    fn backward<T: Element>(
        &self,
        a: &[T],
        b: &[T],
        g: &[T],
        want_a: bool,
        want_b: bool,
    ) -> (Option<Vec<T>>, Option<Vec<T>>) {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut ga = want_a.then(|| vec![T::zero(); a.len()]);
        let mut gb = want_b.then(|| vec![T::zero(); b.len()]);
        if self.shared_rhs {
            let rows = m * self.batches();
            if let Some(ga) = ga.as_mut() {
                kernels::gemm_nt(rows, n, k, g, b, ga);
            }
            if let Some(gb) = gb.as_mut() {
                kernels::gemm_tn(k, rows, n, a, g, gb);
            }
            return (ga, gb);
        }
        for (i, (&ao, &bo)) in self.a_offsets.iter().zip(&self.b_offsets).enumerate() {
            let gc = &g[i * m * n..(i + 1) * m * n];
            if let Some(ga) = ga.as_mut() {
                kernels::gemm_nt(m, n, k, gc, &b[bo..bo + k * n], &mut ga[ao..ao + m * k]);
            }
            if let Some(gb) = gb.as_mut() {
                kernels::gemm_tn(k, m, n, &a[ao..ao + m * k], gc, &mut gb[bo..bo + k * n]);
            }
        }
        (ga, gb)
    }
}
