//! Dense row-major arrays.
//!
//! [`Tensor`] is a plain value: shape plus a contiguous buffer. Differentiation
//! lives in [`crate::autograd`], which records operations over tensors.

use alloc::vec;
use alloc::vec::Vec;

use crate::element::{DType, Element};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::dim("tensor", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Reorders axes; `axes[i]` is the source axis of output axis `i`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let (shape, data) = permute_data(&self.shape, &self.data, axes)?;
        Ok(Tensor { shape, data })
    }

    /// Pads the last two axes symmetrically with `fill` up to `h`×`w`.
    /// An odd surplus puts the extra row/column at the bottom/right.
    pub fn pad_spatial(&self, h: usize, w: usize, fill: &[T]) -> Result<Self> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::dim("pad_spatial", &self.shape, &[h, w]));
        }
        let (ih, iw) = (self.shape[r - 2], self.shape[r - 1]);
        if h < ih || w < iw {
            return Err(Error::dim("pad_spatial", &self.shape, &[h, w]));
        }
        let planes = numel(&self.shape[..r - 2]);
        // fill is per channel (axis r-3) or a single value
        let channels = if r >= 3 { self.shape[r - 3] } else { 1 };
        if fill.len() != 1 && fill.len() != channels {
            return Err(Error::Argument(alloc::format!(
                "pad fill has {} values for {} channels",
                fill.len(),
                channels
            )));
        }
        let top = (h - ih) / 2;
        let left = (w - iw) / 2;
        let mut out = Vec::with_capacity(planes * h * w);
        for p in 0..planes {
            let v = if fill.len() == 1 { fill[0] } else { fill[p % channels] };
            let start = out.len();
            out.resize(start + h * w, v);
            for y in 0..ih {
                let src = &self.data[(p * ih + y) * iw..(p * ih + y + 1) * iw];
                let dst = start + (y + top) * w + left;
                out[dst..dst + iw].copy_from_slice(src);
            }
        }
        let mut shape = self.shape.clone();
        shape[r - 2] = h;
        shape[r - 1] = w;
        Tensor::new(&shape, out)
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn permute_data<T: Copy>(
    shape: &[usize],
    data: &[T],
    axes: &[usize],
) -> Result<(Vec<usize>, Vec<T>)> {
    let r = shape.len();
    let mut seen = vec![false; r];
    if axes.len() != r || axes.iter().any(|&a| a >= r || core::mem::replace(&mut seen[a], true)) {
        return Err(Error::dim("permute", shape, axes));
    }
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if r == 0 {
        out.extend_from_slice(data);
        return Ok((out_shape, out));
    }
    if n == 0 {
        return Ok((out_shape, out));
    }
    // innermost axis copied as a strided run
    let inner = out_shape[r - 1];
    let inner_stride = src_strides[r - 1];
    let mut idx = vec![0usize; r];
    let mut base = 0usize;
    loop {
        for j in 0..inner {
            out.push(data[base + j * inner_stride]);
        }
        // advance the outer multi-index
        let mut ax = r - 1;
        loop {
            if ax == 0 {
                return Ok((out_shape, out));
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

/// Trailing-axis broadcast of two shapes.
pub fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::dim(op, a, b));
        };
    }
    Ok(out)
}

/// How an input of shape `inp` is laid over a broadcast output `out`.
pub(crate) enum Bcast {
    Same,
    /// input repeats with period `len` (input is a trailing suffix of out)
    Cycle(usize),
    /// explicit source offset for every output element
    Map(Vec<usize>),
}

pub(crate) fn bcast_plan(out: &[usize], inp: &[usize]) -> Bcast {
    if out == inp {
        return Bcast::Same;
    }
    let n_in = numel(inp);
    // strip leading ones from the input
    let lead = inp.iter().take_while(|&&d| d == 1).count();
    let core = &inp[lead..];
    if core.len() <= out.len() && out[out.len() - core.len()..] == *core {
        return Bcast::Cycle(n_in.max(1));
    }
    let r = out.len();
    let in_strides = strides_of(inp);
    let mut eff = vec![0usize; r];
    for i in 0..r {
        if i + inp.len() >= r {
            let k = i + inp.len() - r;
            eff[i] = if inp[k] == 1 { 0 } else { in_strides[k] };
        }
    }
    let n = numel(out);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Bcast::Map(map)
}

impl Bcast {
    #[inline]
    pub(crate) fn src(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Cycle(p) => i % p,
            Bcast::Map(m) => m[i],
        }
    }
}

/// Splits `images` (B×C×H×W) into non-overlapping `patch`×`patch` tiles,
/// returned as B×N×(C·patch²) with tiles in row-major grid order.
pub fn patchify<T: Element>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 || patch == 0 || !s[2].is_multiple_of(patch) || !s[3].is_multiple_of(patch) {
        return Err(Error::dim("patchify", s, &[patch, patch]));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / patch, w / patch);
    let t = images.clone().reshape(&[b, c, gh, patch, gw, patch])?;
    t.permute(&[0, 2, 4, 1, 3, 5])?
        .reshape(&[b, gh * gw, c * patch * patch])
}

/// Inverse of [`patchify`] for a known image extent.
pub fn unpatchify<T: Element>(
    tokens: &Tensor<T>,
    channels: usize,
    h: usize,
    w: usize,
    patch: usize,
) -> Result<Tensor<T>> {
    let s = tokens.shape();
    if s.len() != 3
        || patch == 0
        || !h.is_multiple_of(patch)
        || !w.is_multiple_of(patch)
        || s[1] != (h / patch) * (w / patch)
        || s[2] != channels * patch * patch
    {
        return Err(Error::dim("unpatchify", s, &[channels, h, w, patch]));
    }
    let (gh, gw) = (h / patch, w / patch);
    let t = tokens
        .clone()
        .reshape(&[s[0], gh, gw, channels, patch, patch])?;
    t.permute(&[0, 3, 1, 4, 2, 5])?.reshape(&[s[0], channels, h, w])
}
