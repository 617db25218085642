//! Slice-level numeric kernels shared by forward and reverse passes.

use crate::element::Element;

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm(m, k, n, &a[..m * k], (k, 1), &b[..k * n], (n, 1), &mut c[..m * n], (n, 1));
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm(m, k, n, &a[..m * k], (k, 1), &b[..n * k], (1, k), &mut c[..m * n], (n, 1));
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm(m, k, n, &a[..k * m], (1, m), &b[..k * n], (n, 1), &mut c[..m * n], (n, 1));
}

pub fn softmax_rows<T: Element>(x: &[T], width: usize, out: &mut [T]) {
    for (row, orow) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            total = total + *o;
        }
        for o in orow.iter_mut() {
            *o = *o / total;
        }
    }
}

#[inline]
pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn gelu<T: Element>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(core::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad<T: Element>(x: T) -> T {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (x * T::of(core::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::of(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// Per-row mean and reciprocal standard deviation (biased variance).
pub fn row_moments<T: Element>(x: &[T], width: usize, eps: T) -> (alloc::vec::Vec<T>, alloc::vec::Vec<T>) {
    let rows = x.len() / width;
    let mut mean = alloc::vec::Vec::with_capacity(rows);
    let mut rstd = alloc::vec::Vec::with_capacity(rows);
    let inv_w = T::one() / T::of(width as f64);
    for row in x.chunks_exact(width) {
        let mu = row.iter().copied().sum::<T>() * inv_w;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_w;
        mean.push(mu);
        rstd.push(T::one() / (var + eps).sqrt());
    }
    (mean, rstd)
}
