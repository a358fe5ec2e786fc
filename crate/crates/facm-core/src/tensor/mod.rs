//! Dense f64 tensors and the primitive kernels shared by every execution mode.
//!
//! A [`Tensor`] is an immutable shape + contiguous row-major buffer. The
//! buffer lives behind an `Arc`, so clones are cheap and tensors are safe to
//! share across threads; the optimizer uses copy-on-write mutation.
//!
//! The kernels defined here are the single source of truth for arithmetic:
//! the recording tape (reverse mode), the dual-number forward sweep (JVP),
//! and plain inference all dispatch into the same functions, which is what
//! makes "taped primal is bit-identical to the plain forward" hold by
//! construction rather than by testing luck.
//!
//! Everything is f64. Shape mismatches are contract violations and panic.

pub mod tape;

use std::sync::Arc;

pub use tape::{gradient, jvp, DualTensor, Gradients, Tape, ValueId};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    /// New tensor from a shape and matching buffer. Panics if
    /// `product(shape) != data.len()`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {:?} implies {} elements, buffer has {}",
            shape,
            numel,
            data.len()
        );
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![0.0; numel]) }
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![v; numel]) }
    }

    /// Rank-0 scalar.
    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: Arc::new(vec![v]) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Copy-on-write access to the buffer.
    pub fn data_mut(&mut self) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.data)
    }

    /// The two dimensions of a rank-2 tensor. Panics on other ranks.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected rank 2, got shape {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on shape {:?}", self.shape);
        self.data[0]
    }

    /// Element (r, c) of a rank-2 tensor.
    pub fn at(&self, r: usize, c: usize) -> f64 {
        let (_, cols) = self.dims2();
        self.data[r * cols + c]
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let (_, cols) = self.dims2();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(
            self.shape, other.shape,
            "elementwise op on mismatched shapes {:?} vs {:?}",
            self.shape, other.shape
        );
        let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data) }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// Add a rank-1 row vector to every row of a rank-2 tensor.
    pub fn add_row(&self, row: &Tensor) -> Tensor {
        let (m, n) = self.dims2();
        assert_eq!(row.numel(), n, "bias of {} elements onto {} columns", row.numel(), n);
        let r = row.data();
        let mut out = self.data.as_ref().clone();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += r[j];
            }
        }
        Tensor { shape: self.shape.clone(), data: Arc::new(out) }
    }

    /// Scale every row of a rank-2 tensor by the matching entry of a
    /// per-row column (rank-1 of length m, or rank-2 of shape (m, 1)).
    pub fn mul_col(&self, col: &Tensor) -> Tensor {
        let (m, n) = self.dims2();
        assert_eq!(col.numel(), m, "column of {} entries onto {} rows", col.numel(), m);
        let c = col.data();
        let mut out = self.data.as_ref().clone();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] *= c[i];
            }
        }
        Tensor { shape: self.shape.clone(), data: Arc::new(out) }
    }

    /// Column sums of a rank-2 tensor, as rank-1 of length n.
    pub fn col_sum(&self) -> Tensor {
        let (m, n) = self.dims2();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += self.data[i * n + j];
            }
        }
        Tensor { shape: vec![n], data: Arc::new(out) }
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, k) = self.dims2();
        let (k2, n) = other.dims2();
        assert_eq!(k, k2, "matmul: ({m}, {k}) x ({k2}, {n})");
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Tensor { shape: vec![m, n], data: Arc::new(out) }
    }

    /// `self * other^T` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Tensor) -> Tensor {
        let (m, n) = self.dims2();
        let (k, n2) = other.dims2();
        assert_eq!(n, n2, "matmul_nt: ({m}, {n}) x ({k}, {n2})^T");
        let a = self.data();
        let b = other.data();
        let mut out = vec![0.0; m * k];
        for i in 0..m {
            let arow = &a[i * n..(i + 1) * n];
            for kk in 0..k {
                let brow = &b[kk * n..(kk + 1) * n];
                let mut acc = 0.0;
                for j in 0..n {
                    acc += arow[j] * brow[j];
                }
                out[i * k + kk] = acc;
            }
        }
        Tensor { shape: vec![m, k], data: Arc::new(out) }
    }

    /// `self^T * other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Tensor) -> Tensor {
        let (m, k) = self.dims2();
        let (m2, n) = other.dims2();
        assert_eq!(m, m2, "matmul_tn: ({m}, {k})^T x ({m2}, {n})");
        let a = self.data();
        let b = other.data();
        let mut out = vec![0.0; k * n];
        for i in 0..m {
            let brow = &b[i * n..(i + 1) * n];
            for kk in 0..k {
                let aik = a[i * k + kk];
                if aik != 0.0 {
                    let crow = &mut out[kk * n..(kk + 1) * n];
                    for j in 0..n {
                        crow[j] += aik * brow[j];
                    }
                }
            }
        }
        Tensor { shape: vec![k, n], data: Arc::new(out) }
    }

    pub fn silu(&self) -> Tensor {
        self.map(|x| x * sigmoid(x))
    }

    /// Elementwise derivative of silu, used by both derivative modes.
    pub fn silu_prime(&self) -> Tensor {
        self.map(|x| {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        })
    }

    /// Elementwise clamp to `[lo, hi]`. NaN entries stay NaN. Panics if
    /// `lo > hi` (contract violation).
    pub fn clamp_el(&self, lo: f64, hi: f64) -> Tensor {
        assert!(lo <= hi, "clamp bounds inverted: lo {lo} > hi {hi}");
        self.map(|x| x.clamp(lo, hi))
    }

    /// 1.0 where `lo <= x <= hi`, 0.0 elsewhere (including NaN). This is the
    /// mask both derivative modes apply: pass-through strictly inside the
    /// range and at its endpoints, zero outside.
    pub fn clamp_mask(&self, lo: f64, hi: f64) -> Tensor {
        self.map(|x| if x >= lo && x <= hi { 1.0 } else { 0.0 })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    /// Euclidean norm of the whole buffer.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        assert_eq!(
            self.shape, other.shape,
            "dot on mismatched shapes {:?} vs {:?}",
            self.shape, other.shape
        );
        self.data.iter().zip(other.data.iter()).map(|(&a, &b)| a * b).sum()
    }

    /// Per-row sum of squares of a rank-2 tensor, shape (m, 1).
    pub fn row_sumsq(&self) -> Tensor {
        let (m, n) = self.dims2();
        let mut out = vec![0.0; m];
        for i in 0..m {
            out[i] = self.data[i * n..(i + 1) * n].iter().map(|v| v * v).sum();
        }
        Tensor { shape: vec![m, 1], data: Arc::new(out) }
    }

    /// Per-row Euclidean norm of a rank-2 tensor, shape (m, 1).
    pub fn row_norm(&self) -> Tensor {
        let mut out = self.row_sumsq();
        for v in out.data_mut() {
            *v = v.sqrt();
        }
        out
    }

    /// Rows of `table` selected by `idx`, shape (idx.len(), n).
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let (v, n) = self.dims2();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            assert!(i < v, "row index {i} out of range for table with {v} rows");
            out.extend_from_slice(&self.data[i * n..(i + 1) * n]);
        }
        Tensor { shape: vec![idx.len(), n], data: Arc::new(out) }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Work threshold below which matmul stays single-threaded; row-parallel
/// execution is bitwise identical to serial because every output row is an
/// independent chain of operations.
const PAR_FLOPS: usize = 1 << 21;

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let row = |arow: &[f64], crow: &mut [f64]| {
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    };
    if m * k * n >= PAR_FLOPS && rayon::current_num_threads() > 1 {
        use rayon::prelude::*;
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, crow)| row(&a[i * k..(i + 1) * k], crow));
    } else {
        for i in 0..m {
            row(&a[i * k..(i + 1) * k], &mut out[i * n..(i + 1) * n]);
        }
    }
}

/// Sinusoidal features of a per-sample column: for each frequency f_i the
/// output carries sin(c * f_i) and cos(c * f_i) in adjacent slots.
pub fn time_embed(col: &Tensor, freqs: &[f64]) -> Tensor {
    let m = col.numel();
    let d = 2 * freqs.len();
    let c = col.data();
    let mut out = Vec::with_capacity(m * d);
    for &cb in c.iter().take(m) {
        for &f in freqs {
            let (s, co) = (cb * f).sin_cos();
            out.push(s);
            out.push(co);
        }
    }
    Tensor::new(vec![m, d], out)
}

/// Per-row cosine distance 1 - a.b / (|a| |b|), shape (m, 1). Rows where
/// either norm is below 1e-12 contribute 0 (degenerate-direction convention).
pub fn row_cosine_distance(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "cosine distance on mismatched shapes");
    let (m, n) = a.dims2();
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m];
    for i in 0..m {
        let ra = &ad[i * n..(i + 1) * n];
        let rb = &bd[i * n..(i + 1) * n];
        let na = ra.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = rb.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na < COS_DEGENERATE_NORM || nb < COS_DEGENERATE_NORM {
            out[i] = 0.0;
        } else {
            let d = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum::<f64>();
            out[i] = 1.0 - d / (na * nb);
        }
    }
    Tensor::new(vec![m, 1], out)
}

/// Norm floor below which a direction is considered degenerate for cosine
/// distance.
pub const COS_DEGENERATE_NORM: f64 = 1e-12;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_buffer_agreement_is_enforced() {
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]);
        assert_eq!(t.numel(), 6);
        let r = std::panic::catch_unwind(|| Tensor::new(vec![2, 3], vec![0.0; 5]));
        assert!(r.is_err());
    }

    #[test]
    fn matmul_matches_hand_example() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_matmuls_agree_with_explicit_transpose() {
        let a = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0]);
        let g = Tensor::new(vec![2, 2], vec![0.3, -0.7, 1.1, 0.2]);
        // a^T g via matmul_tn vs. building a^T by hand
        let at = Tensor::new(vec![3, 2], vec![1.0, 3.0, -2.0, 4.0, 0.5, -1.0]);
        let want = at.matmul(&g);
        let got = a.matmul_tn(&g);
        for (x, y) in got.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-15);
        }
        // g b^T via matmul_nt
        let b = Tensor::new(vec![3, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let bt = Tensor::new(vec![2, 3], vec![0.1, 0.3, 0.5, 0.2, 0.4, 0.6]);
        let want = g.matmul(&bt);
        let got = g.matmul_nt(&b);
        for (x, y) in got.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn silu_fixed_points() {
        let t = Tensor::new(vec![3], vec![0.0, 20.0, -20.0]);
        let s = t.silu();
        assert_eq!(s.data()[0], 0.0);
        assert!((s.data()[1] - 20.0).abs() < 1e-7);
        assert!(s.data()[2].abs() < 1e-7);
    }

    #[test]
    fn clamp_passes_nan_through_and_rejects_inverted_bounds() {
        let t = Tensor::new(vec![3], vec![f64::NAN, 2.0, -2.0]);
        let c = t.clamp_el(-1.0, 1.0);
        assert!(c.data()[0].is_nan());
        assert_eq!(&c.data()[1..], &[1.0, -1.0]);
        assert!(t.has_non_finite());
        let r = std::panic::catch_unwind(|| t.clamp_el(1.0, -1.0));
        assert!(r.is_err());
    }

    #[test]
    fn clamp_mask_zero_outside_one_inside_including_boundary() {
        let t = Tensor::new(vec![5], vec![-2.0, -1.0, 0.0, 1.0, 1.5]);
        assert_eq!(t.clamp_mask(-1.0, 1.0).data(), &[0.0, 1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn row_reductions() {
        let t = Tensor::new(vec![2, 2], vec![3.0, 4.0, 0.0, 0.0]);
        assert_eq!(t.row_sumsq().data(), &[25.0, 0.0]);
        assert_eq!(t.row_norm().data(), &[5.0, 0.0]);
        assert_eq!(t.col_sum().data(), &[3.0, 4.0]);
    }

    #[test]
    fn cosine_distance_conventions() {
        // antiparallel unit vectors: distance 2
        let a = Tensor::new(vec![1, 2], vec![1.0, 0.0]);
        let b = Tensor::new(vec![1, 2], vec![-1.0, 0.0]);
        assert!((row_cosine_distance(&a, &b).item() - 2.0).abs() < 1e-15);
        // degenerate: zero vector contributes 0
        let z = Tensor::zeros(vec![1, 2]);
        assert_eq!(row_cosine_distance(&z, &b).item(), 0.0);
        // parallel: 0
        assert!(row_cosine_distance(&a, &a).item().abs() < 1e-15);
    }

    #[test]
    fn time_embed_layout_and_range() {
        let col = Tensor::new(vec![2, 1], vec![0.0, 2.0]);
        let freqs = [0.5, 0.25];
        let e = time_embed(&col, &freqs);
        assert_eq!(e.shape(), &[2, 4]);
        assert_eq!(e.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((e.at(1, 0) - 1.0f64.sin()).abs() < 1e-15);
        assert!((e.at(1, 1) - 1.0f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn gather_rows_selects_and_bounds_checks() {
        let table = Tensor::new(vec![3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let g = table.gather_rows(&[2, 0]);
        assert_eq!(g.data(), &[4.0, 5.0, 0.0, 1.0]);
        let r = std::panic::catch_unwind(|| table.gather_rows(&[3]));
        assert!(r.is_err());
    }
}
