//! Dense containers and the handful of kernels the attention pipelines need.
//!
//! Every kernel states its rounding points explicitly: GEMM accumulates in
//! ascending inner-index order with each product and each partial sum rounded
//! to the accumulation precision, then rounds once more at store. Row
//! reductions run left to right with per-operation rounding.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::halfprec::{round_to_f16, Precision};

/// Row-major matrix of f64 carriers, every element exactly representable in
/// `prec`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    prec: Precision,
}

impl Matrix2D {
    /// Wraps `data`, checking length and representability.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>, prec: Precision) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} elements for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, &v)| !prec.is_representable(v))
        {
            return Err(Error::NotRepresentable {
                index,
                value,
                precision: prec,
            });
        }
        Ok(Matrix2D {
            rows,
            cols,
            data,
            prec,
        })
    }

    /// Rounds every element of `data` into `prec`.
    pub fn rounded(rows: usize, cols: usize, mut data: Vec<f64>, prec: Precision) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} elements for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        for v in &mut data {
            *v = prec.round(*v);
        }
        Ok(Matrix2D {
            rows,
            cols,
            data,
            prec,
        })
    }

    pub fn zeros(rows: usize, cols: usize, prec: Precision) -> Self {
        Matrix2D {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            prec,
        }
    }

    pub fn identity(n: usize, prec: Precision) -> Self {
        Self::from_fn(n, n, prec, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    /// Builds from a generator; values are rounded into `prec`.
    pub fn from_fn(rows: usize, cols: usize, prec: Precision, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(prec.round(f(r, c)));
            }
        }
        Matrix2D {
            rows,
            cols,
            data,
            prec,
        }
    }

    /// Internal constructor for kernel outputs that are rounded by construction.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>, prec: Precision) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix2D {
            rows,
            cols,
            data,
            prec,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn precision(&self) -> Precision {
        self.prec
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix2D {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Matrix2D::from_raw(self.cols, self.rows, data, self.prec)
    }

    /// Re-tags the matrix, rounding every element into `prec`.
    pub fn to_precision(&self, prec: Precision) -> Matrix2D {
        Matrix2D::from_raw(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| prec.round(v)).collect(),
            prec,
        )
    }

    /// True when every element re-rounds to itself in the tagged precision.
    pub fn is_consistent(&self) -> bool {
        self.data.iter().all(|&v| self.prec.is_representable(v))
    }

    /// (min, max) over all elements, NAN if any element is NAN.
    pub fn min_max(&self) -> (f64, f64) {
        min_max(&self.data)
    }
}

/// (min, max) of a slice; NAN propagates, empty input gives (INF, -INF).
pub fn min_max(values: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        if v.is_nan() {
            return (f64::NAN, f64::NAN);
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

/// 4-D tensor (batch, heads, sequence, head_dim), row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "{} elements for shape {shape:?}",
                data.len()
            )));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor4 {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn heads(&self) -> usize {
        self.shape[1]
    }

    pub fn seq_len(&self) -> usize {
        self.shape[2]
    }

    pub fn head_dim(&self) -> usize {
        self.shape[3]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn head_range(&self, b: usize, h: usize) -> std::ops::Range<usize> {
        let per_head = self.shape[2] * self.shape[3];
        let start = (b * self.shape[1] + h) * per_head;
        start..start + per_head
    }

    pub fn head_slice(&self, b: usize, h: usize) -> &[f64] {
        &self.data[self.head_range(b, h)]
    }

    /// Copies one (batch, head) slice out as a `seq x dim` matrix tagged `prec`.
    /// Values are rounded into `prec` on the way.
    pub fn head(&self, b: usize, h: usize, prec: Precision) -> Matrix2D {
        let data = self.head_slice(b, h).iter().map(|&v| prec.round(v)).collect();
        Matrix2D::from_raw(self.shape[2], self.shape[3], data, prec)
    }

    pub fn set_head(&mut self, b: usize, h: usize, m: &Matrix2D) {
        let range = self.head_range(b, h);
        assert_eq!(m.data().len(), range.len(), "head slice size");
        self.data[range].copy_from_slice(m.data());
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Assembles a tensor from per-head matrices in (batch, head) order.
    pub fn from_heads(shape: [usize; 4], heads: Vec<Matrix2D>) -> Result<Self> {
        if heads.len() != shape[0] * shape[1] {
            return Err(Error::Shape(format!(
                "{} head slices for shape {shape:?}",
                heads.len()
            )));
        }
        let mut data = Vec::with_capacity(shape.iter().product());
        for m in heads {
            if m.rows() != shape[2] || m.cols() != shape[3] {
                return Err(Error::Shape(format!(
                    "head slice {}x{} for shape {shape:?}",
                    m.rows(),
                    m.cols()
                )));
            }
            data.extend_from_slice(m.data());
        }
        Ok(Tensor4 { shape, data })
    }
}

/// Named precision allocation of a pipeline run.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PolicyName {
    GoldenFp64,
    FaFp32,
    FaPartialFp16,
    FaFullFp16,
    PasaFp16,
}

impl PolicyName {
    pub const ALL: [PolicyName; 5] = [
        PolicyName::GoldenFp64,
        PolicyName::FaFp32,
        PolicyName::FaPartialFp16,
        PolicyName::FaFullFp16,
        PolicyName::PasaFp16,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyName::GoldenFp64 => "GOLDEN_FP64",
            PolicyName::FaFp32 => "FA_FP32",
            PolicyName::FaPartialFp16 => "FA_PARTIAL_FP16",
            PolicyName::FaFullFp16 => "FA_FULL_FP16",
            PolicyName::PasaFp16 => "PASA_FP16",
        }
    }

    /// Whether runs under this policy go through the shifting pipeline.
    pub fn is_pasa(self) -> bool {
        matches!(self, PolicyName::PasaFp16)
    }
}

impl fmt::Display for PolicyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let up = s.to_ascii_uppercase().replace('-', "_");
        PolicyName::ALL
            .into_iter()
            .find(|p| p.as_str() == up)
            .ok_or_else(|| format!("unknown policy {s:?}"))
    }
}

/// Precision assigned to each pipeline stage.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PrecisionPolicy {
    pub name: PolicyName,
    /// Precision of GEMM products and partial sums.
    pub gemm_accum: Precision,
    /// Precision GEMM results are stored in.
    pub gemm_store: Precision,
    /// Precision of the vector unit: scaling, exp, reductions and online updates.
    pub vector_prec: Precision,
}

impl PrecisionPolicy {
    pub fn new(name: PolicyName) -> Self {
        use Precision::*;
        let (gemm_accum, gemm_store, vector_prec) = match name {
            PolicyName::GoldenFp64 => (Fp64, Fp64, Fp64),
            PolicyName::FaFp32 => (Fp32, Fp32, Fp32),
            PolicyName::FaPartialFp16 => (Fp32, Fp16, Fp16),
            PolicyName::FaFullFp16 => (Fp16, Fp16, Fp16),
            PolicyName::PasaFp16 => (Fp32, Fp16, Fp16),
        };
        PrecisionPolicy {
            name,
            gemm_accum,
            gemm_store,
            vector_prec,
        }
    }

    pub fn golden() -> Self {
        Self::new(PolicyName::GoldenFp64)
    }

    pub fn with_vector_prec(mut self, prec: Precision) -> Self {
        self.vector_prec = prec;
        self
    }
}

impl From<PolicyName> for PrecisionPolicy {
    fn from(name: PolicyName) -> Self {
        PrecisionPolicy::new(name)
    }
}

/// `A · B` (or `A · Bᵀ` when `b_transposed`), accumulated in
/// `policy.gemm_accum` and stored in `policy.gemm_store`.
pub fn gemm(a: &Matrix2D, b_transposed: bool, b: &Matrix2D, policy: &PrecisionPolicy) -> Result<Matrix2D> {
    gemm_with(a, b_transposed, b, policy.gemm_accum, policy.gemm_store)
}

/// GEMM with explicit accumulation and store precisions.
pub fn gemm_with(
    a: &Matrix2D,
    b_transposed: bool,
    b: &Matrix2D,
    accum: Precision,
    store: Precision,
) -> Result<Matrix2D> {
    let transposed;
    let b = if b_transposed {
        transposed = b.transpose();
        &transposed
    } else {
        b
    };
    if a.cols() != b.rows() {
        return Err(Error::Shape(format!(
            "gemm inner dimensions {}x{} . {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let a_row = a.row(r);
        let out_row = &mut out[r * n..(r + 1) * n];
        accumulate_row(a_row, b.data(), k, n, accum, out_row);
        for v in out_row.iter_mut() {
            *v = store.round(*v);
        }
    }
    Ok(Matrix2D::from_raw(m, n, out, store))
}

/// out[c] = Σ_k a[k]·b[k][c], summed in ascending k. Written column-parallel
/// so the per-element sequence of roundings is the sequential one while the
/// inner loop still vectorizes.
fn accumulate_row(a_row: &[f64], b: &[f64], k: usize, n: usize, accum: Precision, out: &mut [f64]) {
    match accum {
        Precision::Fp64 => {
            out.fill(0.0);
            for (kk, &av) in a_row.iter().enumerate().take(k) {
                let b_row = &b[kk * n..(kk + 1) * n];
                for (o, &bv) in out.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
        Precision::Fp32 => {
            let mut acc = vec![0.0f32; n];
            for (kk, &av) in a_row.iter().enumerate().take(k) {
                let b_row = &b[kk * n..(kk + 1) * n];
                for (o, &bv) in acc.iter_mut().zip(b_row) {
                    *o += (av * bv) as f32;
                }
            }
            for (o, &v) in out.iter_mut().zip(&acc) {
                *o = v as f64;
            }
        }
        Precision::Fp16 => {
            out.fill(0.0);
            for (kk, &av) in a_row.iter().enumerate().take(k) {
                let b_row = &b[kk * n..(kk + 1) * n];
                for (o, &bv) in out.iter_mut().zip(b_row) {
                    *o = round_to_f16(*o + round_to_f16(av * bv));
                }
            }
        }
    }
}

#[inline]
pub(crate) fn nan_max(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

/// Row maxima. Exact; a NAN anywhere in a row makes that row's max NAN.
pub fn rowmax(a: &Matrix2D) -> Vec<f64> {
    (0..a.rows())
        .map(|r| a.row(r).iter().fold(f64::NEG_INFINITY, |m, &v| nan_max(m, v)))
        .collect()
}

/// Row sums accumulated left to right, each addition rounded to `prec`.
pub fn rowsum(a: &Matrix2D, prec: Precision) -> Vec<f64> {
    (0..a.rows()).map(|r| sum_seq(a.row(r), prec)).collect()
}

/// Row means: [`rowsum`] followed by one rounded division by the column count.
pub fn rowmean(a: &Matrix2D, prec: Precision) -> Vec<f64> {
    let n = a.cols() as f64;
    rowsum(a, prec).into_iter().map(|s| prec.div(s, n)).collect()
}

/// Row sums accumulated at `accum` and rounded once to `store`, the way a
/// vector unit reduces into a wide register before writing back.
pub fn rowsum_with(a: &Matrix2D, accum: Precision, store: Precision) -> Vec<f64> {
    rowsum(a, accum).into_iter().map(|s| store.round(s)).collect()
}

/// Row means computed at `accum` and rounded once to `store`.
pub fn rowmean_with(a: &Matrix2D, accum: Precision, store: Precision) -> Vec<f64> {
    rowmean(a, accum).into_iter().map(|s| store.round(s)).collect()
}

#[inline]
pub(crate) fn sum_seq(values: &[f64], prec: Precision) -> f64 {
    values.iter().fold(0.0, |s, &v| prec.add(s, v))
}

/// `out[r][c] = round(exp(round(a[r][c] - shift[r])))` in `prec`.
pub fn exp_elementwise(a: &Matrix2D, shift: &[f64], prec: Precision) -> Result<Matrix2D> {
    if shift.len() != a.rows() {
        return Err(Error::Shape(format!(
            "shift of length {} for {} rows",
            shift.len(),
            a.rows()
        )));
    }
    let cols = a.cols();
    let mut data = Vec::with_capacity(a.data().len());
    for (r, &s) in shift.iter().enumerate() {
        data.extend(a.row(r).iter().map(|&v| prec.exp(prec.sub(v, s))));
    }
    Ok(Matrix2D::from_raw(a.rows(), cols, data, prec))
}
