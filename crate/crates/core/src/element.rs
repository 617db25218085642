use core::fmt::Debug;
use core::iter::Sum;

use num_traits::Float;

/// Storage type tag, persisted in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "float32",
            DType::F64 => "float64",
        }
    }
}

/// Floating-point element usable in tensors and the autodiff graph.
pub trait Element: Float + Default + Debug + Sum + Send + Sync + 'static {
    const DTYPE: DType;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn erf(self) -> Self;
    fn write_le(self, out: &mut alloc::vec::Vec<u8>);
    /// `bytes` must hold exactly `DTYPE.size_of()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
    /// `c += a · b` for an `m×k` by `k×n` product addressed through
    /// (row, column) strides. Callers guarantee every addressed index is in bounds.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: Strides, b: &[Self], sb: Strides, c: &mut [Self], sc: Strides);
}

/// Row and column stride of a matrix view.
pub type Strides = (usize, usize);

fn span((m, n): (usize, usize), (rs, cs): Strides) -> usize {
    if m == 0 || n == 0 {
        0
    } else {
        (m - 1) * rs + (n - 1) * cs + 1
    }
}

/// Below this many multiply-adds the blocked kernel's packing costs more
/// than it saves.
const SMALL_GEMM: usize = 4096;

#[allow(clippy::too_many_arguments)]
fn small_gemm<T: Float>(m: usize, k: usize, n: usize, a: &[T], sa: Strides, b: &[T], sb: Strides, c: &mut [T], sc: Strides) {
    if sb.1 == 1 && sc.1 == 1 {
        // rows of b and c are contiguous: axpy form, which vectorizes
        for i in 0..m {
            let crow = &mut c[i * sc.0..i * sc.0 + n];
            for p in 0..k {
                let av = a[i * sa.0 + p * sa.1];
                let brow = &b[p * sb.0..p * sb.0 + n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv = *cv + av * bv;
                }
            }
        }
        return;
    }
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::zero();
            for p in 0..k {
                acc = acc + a[i * sa.0 + p * sa.1] * b[p * sb.0 + j * sb.1];
            }
            let ci = i * sc.0 + j * sc.1;
            c[ci] = c[ci] + acc;
        }
    }
}

macro_rules! checked_gemm {
    ($f:path, $m:expr, $k:expr, $n:expr, $a:expr, $sa:expr, $b:expr, $sb:expr, $c:expr, $sc:expr) => {{
        assert!(span(($m, $k), $sa) <= $a.len(), "gemm: a too short");
        assert!(span(($k, $n), $sb) <= $b.len(), "gemm: b too short");
        assert!(span(($m, $n), $sc) <= $c.len(), "gemm: c too short");
        if $m == 0 || $n == 0 {
            return;
        }
        if $m * $k * $n <= SMALL_GEMM {
            return small_gemm($m, $k, $n, $a, $sa, $b, $sb, $c, $sc);
        }
        // SAFETY: the asserts above bound every index the kernel touches.
        unsafe {
            $f(
                $m, $k, $n, 1.0,
                $a.as_ptr(), $sa.0 as isize, $sa.1 as isize,
                $b.as_ptr(), $sb.0 as isize, $sb.1 as isize,
                1.0,
                $c.as_mut_ptr(), $sc.0 as isize, $sc.1 as isize,
            )
        }
    }};
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn write_le(self, out: &mut alloc::vec::Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 4];
        b.copy_from_slice(bytes);
        f32::from_le_bytes(b)
    }
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: Strides, b: &[Self], sb: Strides, c: &mut [Self], sc: Strides) {
        checked_gemm!(matrixmultiply::sgemm, m, k, n, a, sa, b, sb, c, sc)
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn write_le(self, out: &mut alloc::vec::Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(bytes);
        f64::from_le_bytes(b)
    }
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: Strides, b: &[Self], sb: Strides, c: &mut [Self], sc: Strides) {
        checked_gemm!(matrixmultiply::dgemm, m, k, n, a, sa, b, sb, c, sc)
    }
}
