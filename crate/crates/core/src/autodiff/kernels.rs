//! Dense kernels shared by forward and backward passes.

use alloc::vec;
use alloc::vec::Vec;

/// Read-only strided matrix view.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> MatRef<'a> {
    /// Row-major `rows x cols` view of `data`.
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "matrix view out of bounds");
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    /// Columns `[start, start + width)`.
    pub fn cols(self, start: usize, width: usize) -> Self {
        assert!(start + width <= self.cols, "column range out of bounds");
        Self {
            data: &self.data[start * self.cs..],
            cols: width,
            ..self
        }
    }

    /// Rows `[start, start + height)`.
    pub fn rows(self, start: usize, height: usize) -> Self {
        assert!(start + height <= self.rows, "row range out of bounds");
        Self {
            data: &self.data[start * self.rs..],
            rows: height,
            ..self
        }
    }
}

/// Mutable strided matrix view.
#[derive(Debug)]
pub struct MatMut<'a> {
    data: &'a mut [f64],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> MatMut<'a> {
    pub fn new(data: &'a mut [f64], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "matrix view out of bounds");
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    pub fn cols(self, start: usize, width: usize) -> Self {
        assert!(start + width <= self.cols, "column range out of bounds");
        Self {
            data: &mut self.data[start * self.cs..],
            cols: width,
            ..self
        }
    }

    pub fn rows(self, start: usize, height: usize) -> Self {
        assert!(start + height <= self.rows, "row range out of bounds");
        Self {
            data: &mut self.data[start * self.rs..],
            rows: height,
            ..self
        }
    }
}

fn fits(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> bool {
    rows == 0 || cols == 0 || (rows - 1) * rs + (cols - 1) * cs < len
}

/// `c = alpha * a * b + beta * c`; with `beta == 0` the prior contents of `c`
/// are ignored.
pub fn gemm_into(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: MatMut<'_>) {
    assert!(
        a.cols == b.rows && a.rows == c.rows && b.cols == c.cols,
        "gemm shape mismatch"
    );
    assert!(fits(a.data.len(), a.rows, a.cols, a.rs, a.cs));
    assert!(fits(b.data.len(), b.rows, b.cols, b.rs, b.cs));
    assert!(fits(c.data.len(), c.rows, c.cols, c.rs, c.cs));
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols == 0 {
        for r in 0..c.rows {
            for col in 0..c.cols {
                let x = &mut c.data[r * c.rs + col * c.cs];
                *x = if beta == 0.0 { 0.0 } else { beta * *x };
            }
        }
        return;
    }
    // SAFETY: every view was bounds-checked above for its full extent, and
    // `c` is uniquely borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// `out (m x n) += a (m x k) * b (k x n)`, all row-major.
pub fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_into(
        1.0,
        MatRef::new(a, m, k),
        MatRef::new(b, k, n),
        1.0,
        MatMut::new(out, m, n),
    );
}

pub fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm_into(
        1.0,
        MatRef::new(a, m, k),
        MatRef::new(b, k, n),
        0.0,
        MatMut::new(&mut out, m, n),
    );
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

// fdlibm's published split of ln 2, digits kept verbatim.
#[allow(clippy::excessive_precision)]
const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
#[allow(clippy::excessive_precision)]
const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
/// `1.5 * 2^52`: adding it rounds to an integer held in the low mantissa bits.
const ROUND_MAGIC: f64 = 6_755_399_441_055_744.0;

/// `exp(x)` for `x <= 0`, branch-free so row loops vectorize. Inputs below
/// -700 flush towards zero; `exp(0)` is exactly 1.
#[inline(always)]
pub fn exp_nonpositive(x: f64) -> f64 {
    let x = x.max(-700.0);
    let t = x * core::f64::consts::LOG2_E + ROUND_MAGIC;
    let k = t - ROUND_MAGIC;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Taylor series to degree 13 on |r| <= ln2 / 2.
    let mut p = 1.0 / 6_227_020_800.0;
    p = p * r + 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let k_bits = t.to_bits().wrapping_sub(ROUND_MAGIC.to_bits());
    let scale = f64::from_bits(k_bits.wrapping_add(1023) << 52);
    p * scale
}

/// In-place softmax of one row, max-shifted.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for x in row.iter_mut() {
        *x = exp_nonpositive(*x - max);
    }
    let sum: f64 = row.iter().sum();
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Given softmax output `y` and upstream `dy`, writes `y * (dy - <y, dy>)` into `dx`.
pub fn softmax_row_backward(y: &[f64], dy: &[f64], dx: &mut [f64]) {
    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    for ((d, &yi), &dyi) in dx.iter_mut().zip(y).zip(dy) {
        *d += yi * (dyi - dot);
    }
}

/// [`softmax_row_backward`] overwriting `dy` with the input gradient.
pub fn softmax_row_backward_in_place(y: &[f64], dy: &mut [f64]) {
    let dot: f64 = y.iter().zip(dy.iter()).map(|(a, b)| a * b).sum();
    for (d, &yi) in dy.iter_mut().zip(y) {
        *d = yi * (*d - dot);
    }
}

/// Copies columns `[start, start + width)` of a row-major matrix.
pub fn gather_cols(a: &[f64], rows: usize, cols: usize, start: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        out.extend_from_slice(&a[r * cols + start..r * cols + start + width]);
    }
    out
}

/// Adds `src (rows x width)` into columns `[start, start + width)` of `dst`.
pub fn scatter_cols_add(dst: &mut [f64], cols: usize, src: &[f64], start: usize, width: usize) {
    for (r, chunk) in src.chunks_exact(width).enumerate() {
        for (d, s) in dst[r * cols + start..r * cols + start + width]
            .iter_mut()
            .zip(chunk)
        {
            *d += s;
        }
    }
}
