//! Reference attention: unblocked FP64 golden output and blocked online-softmax
//! flash attention under a precision policy.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::halfprec::Precision;
use crate::tensors::{exp_elementwise, gemm, nan_max, rowmax, rowsum_with, Matrix2D, PrecisionPolicy, Tensor4};

/// Q (B, N, S1, d), K and V (B, N, S2, d), plus the block sizes.
#[derive(Clone, Debug)]
pub struct AttentionProblem {
    pub q: Tensor4,
    pub k: Tensor4,
    pub v: Tensor4,
    pub s1: usize,
    pub s2: usize,
    /// Static scale; scores are divided by it.
    pub alpha: f64,
}

impl AttentionProblem {
    /// Validates shapes and finiteness; `alpha` defaults to `sqrt(d)`.
    pub fn new(q: Tensor4, k: Tensor4, v: Tensor4, s1: usize, s2: usize) -> Result<Self> {
        let alpha = (q.head_dim() as f64).sqrt();
        Self::with_alpha(q, k, v, s1, s2, alpha)
    }

    pub fn with_alpha(q: Tensor4, k: Tensor4, v: Tensor4, s1: usize, s2: usize, alpha: f64) -> Result<Self> {
        let [b, n, seq_q, d] = q.shape();
        let [kb, kn, seq_kv, kd] = k.shape();
        if k.shape() != v.shape() {
            return Err(Error::Shape(format!("K {:?} vs V {:?}", k.shape(), v.shape())));
        }
        if (b, n, d) != (kb, kn, kd) {
            return Err(Error::Shape(format!("Q {:?} vs K {:?}", q.shape(), k.shape())));
        }
        if d == 0 || seq_q == 0 || seq_kv == 0 {
            return Err(Error::Shape("empty sequence or head dimension".into()));
        }
        if s1 == 0 || seq_q % s1 != 0 {
            return Err(Error::Shape(format!("S1 = {seq_q} is not a multiple of s1 = {s1}")));
        }
        if s2 == 0 || seq_kv % s2 != 0 {
            return Err(Error::Shape(format!("S2 = {seq_kv} is not a multiple of s2 = {s2}")));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidParameter(format!("alpha = {alpha}")));
        }
        for (name, t) in [("Q", &q), ("K", &k), ("V", &v)] {
            if let Some(i) = t.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name}[{i}] is not finite")));
            }
        }
        Ok(AttentionProblem {
            q,
            k,
            v,
            s1,
            s2,
            alpha,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        self.q.shape()
    }

    pub fn head_count(&self) -> usize {
        self.q.batch() * self.q.heads()
    }

    /// (batch, head) of a flat head index.
    pub fn head_coords(&self, idx: usize) -> (usize, usize) {
        (idx / self.q.heads(), idx % self.q.heads())
    }

    pub(crate) fn map_heads<F>(&self, f: F) -> Result<Tensor4>
    where
        F: Fn(usize, usize) -> Matrix2D + Sync,
    {
        let heads: Vec<Matrix2D> = (0..self.head_count())
            .into_par_iter()
            .map(|idx| {
                let (b, h) = self.head_coords(idx);
                f(b, h)
            })
            .collect();
        Tensor4::from_heads(self.output_shape(), heads)
    }
}

/// Initial running maximum of the online softmax.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum M0Mode {
    /// m_0 = -INF; the first block's maximum is taken as is.
    #[default]
    NegInf,
    /// m_0 = 0, the initialisation of the original formulation.
    Zero,
}

impl M0Mode {
    pub fn initial(self) -> f64 {
        match self {
            M0Mode::NegInf => f64::NEG_INFINITY,
            M0Mode::Zero => 0.0,
        }
    }
}

impl std::str::FromStr for M0Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "neg_inf" | "neg-inf" | "-inf" => Ok(M0Mode::NegInf),
            "zero" | "0" => Ok(M0Mode::Zero),
            other => Err(format!("unknown m0 mode {other:?}")),
        }
    }
}

/// Unblocked FP64 attention: softmax(QKᵀ/α)V with max subtraction.
pub fn golden_attention(problem: &AttentionProblem) -> Result<Tensor4> {
    problem.map_heads(|b, h| golden_head(problem, b, h))
}

fn golden_head(problem: &AttentionProblem, b: usize, h: usize) -> Matrix2D {
    let q = problem.q.head(b, h, Precision::Fp64);
    let k = problem.k.head(b, h, Precision::Fp64);
    let v = problem.v.head(b, h, Precision::Fp64);
    let scores = gemm(&q, true, &k, &PrecisionPolicy::golden()).expect("validated shapes");
    let (s1, s2, d) = (q.rows(), k.rows(), q.cols());
    let mut out = vec![0.0; s1 * d];
    let mut weights = vec![0.0; s2];
    for r in 0..s1 {
        let row = scores.row(r);
        let mut max = f64::NEG_INFINITY;
        for (w, &s) in weights.iter_mut().zip(row) {
            *w = s / problem.alpha;
            max = max.max(*w);
        }
        let mut denom = 0.0;
        for w in weights.iter_mut() {
            *w = (*w - max).exp();
            denom += *w;
        }
        let o = &mut out[r * d..(r + 1) * d];
        for (kk, &w) in weights.iter().enumerate() {
            for (oc, &vc) in o.iter_mut().zip(v.row(kk)) {
                *oc += w * vc;
            }
        }
        for oc in o.iter_mut() {
            *oc /= denom;
        }
    }
    Matrix2D::from_raw(s1, d, out, Precision::Fp64)
}

/// Blocked flash attention with m_0 = -INF.
pub fn flash_attention(problem: &AttentionProblem, policy: &PrecisionPolicy) -> Result<Tensor4> {
    flash_attention_with(problem, policy, M0Mode::NegInf)
}

/// Blocked flash attention. Overflow is never masked: an INF score turns the
/// affected rows into NAN, which is the outcome the experiments measure.
pub fn flash_attention_with(problem: &AttentionProblem, policy: &PrecisionPolicy, m0: M0Mode) -> Result<Tensor4> {
    problem.map_heads(|b, h| flash_head(problem, policy, m0, b, h))
}

fn flash_head(problem: &AttentionProblem, policy: &PrecisionPolicy, m0: M0Mode, b: usize, h: usize) -> Matrix2D {
    let store = policy.gemm_store;
    let vec = policy.vector_prec;
    let q = problem.q.head(b, h, store);
    let k = problem.k.head(b, h, store);
    let v = problem.v.head(b, h, store);
    let d = q.cols();
    let (s1, s2) = (problem.s1, problem.s2);
    let alpha = vec.round(problem.alpha);
    let k_blocks: Vec<Matrix2D> = row_blocks(&k, s2);
    let v_blocks: Vec<Matrix2D> = row_blocks(&v, s2);

    let mut out = Vec::with_capacity(q.rows() * d);
    for q_i in row_blocks(&q, s1) {
        let mut m = vec![m0.initial(); s1];
        let mut l = vec![0.0; s1];
        let mut o = vec![0.0; s1 * d];
        for (k_j, v_j) in k_blocks.iter().zip(&v_blocks) {
            let raw = gemm(&q_i, true, k_j, policy).expect("block shapes");
            let scores = Matrix2D::from_raw(
                raw.rows(),
                raw.cols(),
                raw.data().iter().map(|&s| vec.div(s, alpha)).collect(),
                vec,
            );
            let block_max = rowmax(&scores);
            let m_new: Vec<f64> = m.iter().zip(&block_max).map(|(&a, &b)| nan_max(a, b)).collect();
            let p = exp_elementwise(&scores, &m_new, vec).expect("shift length");
            let p_sum = rowsum_with(&p, policy.gemm_accum, vec);
            let pv = gemm(&p, false, v_j, policy).expect("block shapes");
            for r in 0..s1 {
                let scale = vec.exp(vec.sub(m[r], m_new[r]));
                l[r] = vec.add(vec.mul(scale, l[r]), p_sum[r]);
                let o_row = &mut o[r * d..(r + 1) * d];
                for (oc, &pvc) in o_row.iter_mut().zip(pv.row(r)) {
                    *oc = vec.add(vec.mul(scale, *oc), vec.round(pvc));
                }
            }
            m = m_new;
        }
        for r in 0..s1 {
            out.extend(o[r * d..(r + 1) * d].iter().map(|&oc| vec.div(oc, l[r])));
        }
    }
    Matrix2D::from_raw(q.rows(), d, out, vec)
}

/// Splits a matrix into consecutive row blocks of `size` rows.
pub(crate) fn row_blocks(m: &Matrix2D, size: usize) -> Vec<Matrix2D> {
    let cols = m.cols();
    m.data()
        .chunks(size * cols)
        .map(|chunk| Matrix2D::from_raw(chunk.len() / cols, cols, chunk.to_vec(), m.precision()))
        .collect()
}
