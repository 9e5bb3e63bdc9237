//! Pseudo-average shifting attention.
//!
//! Keys are right-multiplied by the shifting matrix `M = (I - βJ/s2)/α`,
//! which removes the fraction β of each key block's mean and applies the
//! static scale inside one GEMM. Scores `S' = Q·KᵀM` are therefore small
//! enough for FP16 storage. Because each block removes a different mean, the
//! online softmax tracks a running global pseudo-average `F̄` and corrects the
//! running maximum, denominator and output with
//!
//! ```text
//! Δm'_prev = Inva·(F̄_{j-1} - F̄_j)        Δm'_cur = Inva·(S̄'_j - F̄_j)
//! m_j      = max(m_{j-1} + Δm'_prev, m'_j + Δm'_cur)
//! Δm_prev  = m_{j-1} - m_j + Δm'_prev    Δm_cur  = m'_j - m_j + Δm'_cur
//! l_j      = e^{Δm_prev}·l_{j-1} + e^{Δm_cur}·l'_j
//! O_j      = e^{Δm_cur}·P'_j V_j + e^{Δm_prev}·O_{j-1}
//! ```
//!
//! where `Inva = β/(1-β)` is taken from the rounded-entry invariance so the
//! correction matches the matrix that was actually applied.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{flash_attention_with, row_blocks, AttentionProblem, M0Mode};
use crate::beta::realized_invariance;
use crate::error::{Error, Result};
use crate::halfprec::Precision;
use crate::tensors::{
    exp_elementwise, gemm, gemm_with, nan_max, rowmax, rowmean_with, rowsum_with, Matrix2D, PrecisionPolicy, Tensor4,
};

/// β used unless configured otherwise: the fixed point reached from 1 - 2^-6
/// with 128-wide blocks.
pub const DEFAULT_BETA: f64 = 0.984497;

/// Shifting matrix `(I - βJ/s2)/α` with every entry in `prec`.
///
/// The unscaled entries `1 - β/s2` and `-β/s2` are rounded first, as the
/// invariance analysis assumes, then divided by α and rounded again. When α
/// is a power of two the second rounding is exact.
pub fn build_shifting_matrix(s2: usize, beta: f64, alpha: f64, prec: Precision) -> Result<Matrix2D> {
    if s2 == 0 {
        return Err(Error::InvalidParameter("s2 = 0".into()));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidParameter(format!("beta = {beta} outside [0, 1]")));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::InvalidParameter(format!("alpha = {alpha}")));
    }
    let n = s2 as f64;
    let diag = prec.div(prec.round(1.0 - beta / n), alpha);
    let off = prec.div(prec.round(-beta / n), alpha);
    Ok(Matrix2D::from_fn(s2, s2, prec, |r, c| if r == c { diag } else { off }))
}

/// Closed-form inverse of `I - λJ` (size `s`): `I + λ/(1 - λs)·J`.
pub fn shifting_matrix_inverse(s: usize, lambda: f64) -> Result<Matrix2D> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidParameter(format!("lambda = {lambda}")));
    }
    let denom = 1.0 - lambda * s as f64;
    if denom.abs() <= 4.0 * f64::EPSILON {
        return Err(Error::Singular(format!("lambda * s = 1 (lambda = {lambda}, s = {s})")));
    }
    let off = lambda / denom;
    Ok(Matrix2D::from_fn(s, s, Precision::Fp64, |r, c| {
        if r == c {
            1.0 + off
        } else {
            off
        }
    }))
}

/// Shifting configuration of a run.
#[derive(Clone, Debug)]
pub struct PasaParams {
    pub beta: f64,
    pub alpha: f64,
    pub s2: usize,
    /// Shifting matrix, `s2 x s2`.
    pub m: Matrix2D,
    /// β/(1-β) as realised by the rounded entries of `m`.
    pub invariance: f64,
}

impl PasaParams {
    /// Builds the shifting matrix in `prec` (the GEMM storage precision of the
    /// run) and materialises the invariance factor once.
    pub fn new(beta: f64, alpha: f64, s2: usize, prec: Precision) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::InvalidParameter(format!(
                "beta = {beta}: must lie in [0, 1) for the mean to be recoverable"
            )));
        }
        let m = build_shifting_matrix(s2, beta, alpha, prec)?;
        let invariance = if beta == 0.0 {
            0.0
        } else {
            realized_invariance(beta, s2, prec)?
        };
        Ok(PasaParams {
            beta,
            alpha,
            s2,
            m,
            invariance,
        })
    }

    /// Parameters matching a problem's block size and scale.
    pub fn for_problem(problem: &AttentionProblem, beta: f64, policy: &PrecisionPolicy) -> Result<Self> {
        Self::new(beta, problem.alpha, problem.s2, policy.gemm_store)
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PasaOptions {
    pub m0: M0Mode,
    /// Also record FP64 ranges of the unshifted scores.
    pub diagnose: bool,
}

/// Per (batch, head) score ranges observed during a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadDiagnostics {
    pub batch: usize,
    pub head: usize,
    /// Range of the stored shifted scores S' over all blocks. Absent when the
    /// run degraded to plain flash attention (β = 0).
    pub shifted: Option<(f64, f64)>,
    /// FP64 range of QKᵀ/α.
    pub unshifted: Option<(f64, f64)>,
    /// FP64 max |QKᵀ| before scaling, the quantity an FP16 store overflows on.
    pub max_abs_qk: Option<f64>,
    /// FP64 range of Q·(KᵀM).
    pub shifted_exact: Option<(f64, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunDiagnostics {
    pub heads: Vec<HeadDiagnostics>,
}

impl RunDiagnostics {
    fn merge(ranges: impl Iterator<Item = Option<(f64, f64)>>) -> Option<(f64, f64)> {
        let mut acc: Option<(f64, f64)> = None;
        for r in ranges {
            let (lo, hi) = r?;
            acc = Some(match acc {
                None => (lo, hi),
                Some((a, b)) => (min_nan(a, lo), nan_max(b, hi)),
            });
        }
        acc
    }

    pub fn shifted_range(&self) -> Option<(f64, f64)> {
        Self::merge(self.heads.iter().map(|h| h.shifted))
    }

    pub fn unshifted_range(&self) -> Option<(f64, f64)> {
        Self::merge(self.heads.iter().map(|h| h.unshifted))
    }

    pub fn max_abs_qk(&self) -> Option<f64> {
        self.heads
            .iter()
            .map(|h| h.max_abs_qk)
            .try_fold(0.0f64, |m, v| v.map(|v| nan_max(m, v)))
    }
}

fn min_nan(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.min(b)
    }
}

/// `Kᵀ·M` for one key block (`s2 x d` in, `d x s2` out).
pub fn preprocess_keys(k_block: &Matrix2D, m: &Matrix2D, policy: &PrecisionPolicy) -> Result<Matrix2D> {
    if k_block.rows() != m.rows() {
        return Err(Error::Shape(format!(
            "key block of {} rows for a {}x{} shifting matrix",
            k_block.rows(),
            m.rows(),
            m.cols()
        )));
    }
    gemm(&k_block.transpose(), false, m, policy)
}

/// Running mean of per-block row means: `((j-1)·F̄ + S̄') / j` in `prec`.
pub fn recover_global_mean(f_prev: &[f64], s_bar: &[f64], j: usize, prec: Precision) -> Vec<f64> {
    assert!(j >= 1, "block index starts at 1");
    if j == 1 {
        return s_bar.to_vec();
    }
    let prev_weight = (j - 1) as f64;
    let count = j as f64;
    f_prev
        .iter()
        .zip(s_bar)
        .map(|(&f, &s)| prec.div(prec.add(prec.mul(prev_weight, f), s), count))
        .collect()
}

/// Maximum correction terms `(Δm'_prev, Δm'_cur)` for the invariance factor
/// `invariance` = β/(1-β).
pub fn correction_terms(
    f_prev: &[f64],
    f_new: &[f64],
    s_bar: &[f64],
    invariance: f64,
    prec: Precision,
) -> (Vec<f64>, Vec<f64>) {
    let factor = prec.round(invariance);
    let prev = f_prev
        .iter()
        .zip(f_new)
        .map(|(&a, &b)| prec.mul(factor, prec.sub(a, b)))
        .collect();
    let cur = s_bar
        .iter()
        .zip(f_new)
        .map(|(&a, &b)| prec.mul(factor, prec.sub(a, b)))
        .collect();
    (prev, cur)
}

/// Online state of one query block.
#[derive(Clone, Debug)]
pub struct OnlineState {
    /// Running corrected maximum.
    pub m: Vec<f64>,
    /// Running corrected denominator.
    pub l: Vec<f64>,
    /// Global pseudo-average over the blocks seen so far.
    pub f_bar: Vec<f64>,
    /// Unnormalised output accumulator, `rows x d`.
    pub o_acc: Vec<f64>,
    /// Blocks consumed.
    pub j: usize,
    rows: usize,
    d: usize,
    m0: M0Mode,
}

impl OnlineState {
    pub fn new(rows: usize, d: usize, m0: M0Mode) -> Self {
        OnlineState {
            m: vec![m0.initial(); rows],
            l: vec![0.0; rows],
            f_bar: vec![0.0; rows],
            o_acc: vec![0.0; rows * d],
            j: 0,
            rows,
            d,
            m0,
        }
    }

    /// Absorbs one block of shifted scores `s_prime` (`rows x s2`) with its
    /// value block `v` (`s2 x d`).
    pub fn absorb(&mut self, s_prime: &Matrix2D, v: &Matrix2D, invariance: f64, policy: &PrecisionPolicy) {
        let vec = policy.vector_prec;
        let (rows, d) = (self.rows, self.d);
        debug_assert_eq!(s_prime.rows(), rows);

        let local_max = rowmax(s_prime);
        let p = exp_elementwise(s_prime, &local_max, vec).expect("shift length");
        let local_sum = rowsum_with(&p, policy.gemm_accum, vec);
        let s_bar = rowmean_with(s_prime, policy.gemm_accum, vec);
        let pv = gemm(&p, false, v, policy).expect("block shapes");
        self.j += 1;

        if self.j == 1 && self.m0 == M0Mode::NegInf {
            // No history: F̄¹ = S̄'¹ so both correction terms vanish.
            self.f_bar = s_bar;
            self.m = local_max;
            self.l = local_sum;
            for (o, &x) in self.o_acc.iter_mut().zip(pv.data()) {
                *o = vec.round(x);
            }
            return;
        }

        let f_new = recover_global_mean(&self.f_bar, &s_bar, self.j, vec);
        // With m_0 = 0 the first block has no previous mean either.
        let f_prev = if self.j == 1 { &f_new } else { &self.f_bar };
        let (dm_prev, dm_cur) = correction_terms(f_prev, &f_new, &s_bar, invariance, vec);

        for r in 0..rows {
            let prev_max = vec.add(self.m[r], dm_prev[r]);
            let cur_max = vec.add(local_max[r], dm_cur[r]);
            let m_new = nan_max(prev_max, cur_max);
            // (m + Δm') - m_new reuses the rounded candidates, so one exponent is
            // exactly zero and the other is never positive. Regrouping the sum
            // as (m - m_new) + Δm' can round above zero when |m| is large and
            // then inflates O block after block.
            let delta_prev = vec.sub(prev_max, m_new);
            let delta_cur = vec.sub(cur_max, m_new);
            let e_prev = vec.exp(delta_prev);
            let e_cur = vec.exp(delta_cur);
            self.l[r] = vec.add(vec.mul(e_prev, self.l[r]), vec.mul(e_cur, local_sum[r]));
            let o_row = &mut self.o_acc[r * d..(r + 1) * d];
            for (o, &x) in o_row.iter_mut().zip(pv.row(r)) {
                *o = vec.add(vec.mul(e_cur, vec.round(x)), vec.mul(e_prev, *o));
            }
            self.m[r] = m_new;
        }
        self.f_bar = f_new;
    }

    /// Final normalisation `O / l`.
    pub fn finish(self, vec: Precision) -> Matrix2D {
        let d = self.d;
        let data = self
            .o_acc
            .chunks(d)
            .zip(&self.l)
            .flat_map(|(row, &l)| row.iter().map(move |&o| vec.div(o, l)))
            .collect();
        Matrix2D::from_raw(self.rows, d, data, vec)
    }
}

/// Shifting attention with m_0 = -INF and no diagnostics.
pub fn pasa_attention(
    problem: &AttentionProblem,
    params: &PasaParams,
    policy: &PrecisionPolicy,
) -> Result<(Tensor4, RunDiagnostics)> {
    pasa_attention_with(problem, params, policy, PasaOptions::default())
}

/// Shifting attention. With β = 0 the shifting matrix is a pure scale and the
/// algorithm is flash attention, so the flash kernel is run directly.
pub fn pasa_attention_with(
    problem: &AttentionProblem,
    params: &PasaParams,
    policy: &PrecisionPolicy,
    options: PasaOptions,
) -> Result<(Tensor4, RunDiagnostics)> {
    if params.beta == 0.0 {
        let out = flash_attention_with(problem, policy, options.m0)?;
        let heads = if options.diagnose {
            (0..problem.head_count())
                .into_par_iter()
                .map(|idx| {
                    let (b, h) = problem.head_coords(idx);
                    let mut diag = exact_ranges(problem, params, b, h);
                    diag.shifted = None;
                    diag
                })
                .collect()
        } else {
            Vec::new()
        };
        return Ok((out, RunDiagnostics { heads }));
    }
    shifted_attention(problem, params, policy, options)
}

/// The shifting pipeline for any β in [0, 1), including β = 0.
pub fn shifted_attention(
    problem: &AttentionProblem,
    params: &PasaParams,
    policy: &PrecisionPolicy,
    options: PasaOptions,
) -> Result<(Tensor4, RunDiagnostics)> {
    if params.s2 != problem.s2 || params.m.rows() != problem.s2 {
        return Err(Error::Shape(format!(
            "shifting matrix built for s2 = {} but the problem uses s2 = {}",
            params.s2, problem.s2
        )));
    }
    let results: Vec<(Matrix2D, HeadDiagnostics)> = (0..problem.head_count())
        .into_par_iter()
        .map(|idx| {
            let (b, h) = problem.head_coords(idx);
            pasa_head(problem, params, policy, options, b, h)
        })
        .collect();
    let (heads, diags): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let out = Tensor4::from_heads(problem.output_shape(), heads)?;
    Ok((out, RunDiagnostics { heads: diags }))
}

fn pasa_head(
    problem: &AttentionProblem,
    params: &PasaParams,
    policy: &PrecisionPolicy,
    options: PasaOptions,
    b: usize,
    h: usize,
) -> (Matrix2D, HeadDiagnostics) {
    let store = policy.gemm_store;
    let q = problem.q.head(b, h, store);
    let k = problem.k.head(b, h, store);
    let v = problem.v.head(b, h, store);
    let d = q.cols();
    let m = params.m.to_precision(store);

    let shifted_keys: Vec<Matrix2D> = row_blocks(&k, problem.s2)
        .iter()
        .map(|k_j| preprocess_keys(k_j, &m, policy).expect("block shapes"))
        .collect();
    let v_blocks = row_blocks(&v, problem.s2);

    let mut range = (f64::INFINITY, f64::NEG_INFINITY);
    let mut out = Vec::with_capacity(q.rows() * d);
    for q_i in row_blocks(&q, problem.s1) {
        let mut state = OnlineState::new(q_i.rows(), d, options.m0);
        for (kp_j, v_j) in shifted_keys.iter().zip(&v_blocks) {
            let s_prime = gemm(&q_i, false, kp_j, policy).expect("block shapes");
            let (lo, hi) = s_prime.min_max();
            range = (min_nan(range.0, lo), nan_max(range.1, hi));
            state.absorb(&s_prime, v_j, params.invariance, policy);
        }
        out.extend(state.finish(policy.vector_prec).into_data());
    }

    let mut diag = if options.diagnose {
        exact_ranges(problem, params, b, h)
    } else {
        HeadDiagnostics {
            batch: b,
            head: h,
            shifted: None,
            unshifted: None,
            max_abs_qk: None,
            shifted_exact: None,
        }
    };
    diag.shifted = Some(range);
    (Matrix2D::from_raw(q.rows(), d, out, policy.vector_prec), diag)
}

/// FP64 side-channel ranges for one head: QKᵀ/α, max |QKᵀ| and Q·(KᵀM).
fn exact_ranges(problem: &AttentionProblem, params: &PasaParams, b: usize, h: usize) -> HeadDiagnostics {
    let q = problem.q.head(b, h, Precision::Fp64);
    let k = problem.k.head(b, h, Precision::Fp64);
    let s = gemm_with(&q, true, &k, Precision::Fp64, Precision::Fp64).expect("shapes");
    let (lo, hi) = s.min_max();
    let max_abs = lo.abs().max(hi.abs());
    let m = params.m.to_precision(Precision::Fp64);
    let mut shifted = (f64::INFINITY, f64::NEG_INFINITY);
    for k_j in row_blocks(&k, params.s2) {
        let kp = gemm_with(&k_j.transpose(), false, &m, Precision::Fp64, Precision::Fp64).expect("shapes");
        let sp = gemm_with(&q, false, &kp, Precision::Fp64, Precision::Fp64).expect("shapes");
        let (a, c) = sp.min_max();
        shifted = (min_nan(shifted.0, a), nan_max(shifted.1, c));
    }
    HeadDiagnostics {
        batch: b,
        head: h,
        shifted: None,
        unshifted: Some((lo / problem.alpha, hi / problem.alpha)),
        max_abs_qk: Some(max_abs),
        shifted_exact: Some(shifted),
    }
}
