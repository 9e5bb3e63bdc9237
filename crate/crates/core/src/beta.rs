//! Optimal shifting fraction β.
//!
//! Rounding the shifting-matrix entries to the storage format changes the
//! fraction of the mean that is actually removed, while the correction terms
//! use β/(1-β). The optimal choice makes the two agree:
//!
//! ```text
//! β / (1 - β) = f(β),   f(β) = b·n / (a·(a - b·n)) + (1 - a) / a
//! b = fl(β / n),        a = fl(1 - β / n) + b
//! ```
//!
//! solved by the fixed-point iteration `β ← f(β) / (1 + f(β))`. Everything
//! outside the two roundings runs in f64.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::halfprec::Precision;

pub const DEFAULT_TOL: f64 = 1e-8;
pub const MAX_ITERATIONS: usize = 10_000;

/// Ideal versus realised invariance for one β.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub beta: f64,
    pub n: usize,
    pub a: f64,
    pub b: f64,
    /// β / (1 - β).
    pub inva_ideal: f64,
    /// f(β) with rounded entries.
    pub inva_actual: f64,
    /// |ideal - actual| / |ideal|.
    pub rel_err: f64,
}

/// Rounded entries `(a, b)` of the unscaled shifting matrix.
pub fn rounded_entries(beta: f64, n: usize, tp: Precision) -> (f64, f64) {
    let n = n as f64;
    let off = tp.round(-beta / n);
    let diag = tp.round(1.0 - beta / n);
    let b = -off;
    (diag + b, b)
}

/// f(β): the invariance realised by the rounded shifting matrix.
pub fn realized_invariance(beta: f64, n: usize, tp: Precision) -> Result<f64> {
    let (a, b) = rounded_entries(beta, n, tp);
    let bn = b * n as f64;
    let denom = a * (a - bn);
    if denom == 0.0 {
        return Err(Error::Singular(format!(
            "a - b*n = 0 for beta = {beta}, n = {n} in {tp}"
        )));
    }
    Ok(bn / denom + (1.0 - a) / a)
}

pub fn invariance_parameter(beta: f64, n: usize, tp: Precision) -> Result<InvarianceReport> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidParameter(format!("beta = {beta} outside (0, 1)")));
    }
    if n == 0 {
        return Err(Error::InvalidParameter("n = 0".into()));
    }
    let (a, b) = rounded_entries(beta, n, tp);
    let inva_actual = realized_invariance(beta, n, tp)?;
    let inva_ideal = beta / (1.0 - beta);
    Ok(InvarianceReport {
        beta,
        n,
        a,
        b,
        inva_ideal,
        inva_actual,
        rel_err: (inva_ideal - inva_actual).abs() / inva_ideal.abs(),
    })
}

/// One step of the fixed-point map.
pub fn fixed_point_step(beta: f64, n: usize, tp: Precision) -> Result<f64> {
    let f = realized_invariance(beta, n, tp)?;
    Ok(f / (1.0 + f))
}

/// Iterates the fixed-point map from `beta0` until the relative change is at
/// most `tol`.
pub fn optimal_beta(beta0: f64, n: usize, tol: f64, tp: Precision) -> Result<f64> {
    if !(beta0 > 0.0 && beta0 < 1.0) {
        return Err(Error::InvalidParameter(format!("beta0 = {beta0} outside (0, 1)")));
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::InvalidParameter(format!("tol = {tol}")));
    }
    if n == 0 {
        return Err(Error::InvalidParameter("n = 0".into()));
    }
    let mut beta = beta0;
    let mut change = f64::INFINITY;
    for _ in 0..MAX_ITERATIONS {
        let next = fixed_point_step(beta, n, tp)?;
        change = (next - beta).abs() / beta.abs();
        beta = next;
        if change <= tol {
            return Ok(beta);
        }
    }
    Err(Error::Divergence {
        iterations: MAX_ITERATIONS,
        last_change: change,
    })
}

/// Solves for β and reports the invariance at the solution.
pub fn solve(beta0: f64, n: usize, tol: f64, tp: Precision) -> Result<InvarianceReport> {
    let beta = optimal_beta(beta0, n, tol, tp)?;
    invariance_parameter(beta, n, tp)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FP16: Precision = Precision::Fp16;

    #[test]
    fn exact_fp16_beta_has_integer_invariance() {
        let r = invariance_parameter(0.9375, 128, FP16).unwrap();
        assert_eq!(r.inva_ideal, 15.0);
        assert_eq!(r.inva_actual, 15.0);
        assert_eq!(r.rel_err, 0.0);
    }

    #[test]
    fn rounding_perturbs_invariance() {
        let r = invariance_parameter(0.99, 128, FP16).unwrap();
        assert!((r.inva_actual - 102.2).abs() < 0.05, "{r:?}");
        // Reference percentages are truncated to two decimals.
        assert_eq!((r.rel_err * 1e4).floor() / 100.0, 3.23, "{r:?}");
        let r = invariance_parameter(0.999, 128, FP16).unwrap();
        assert!((r.inva_actual - 1031.0).abs() < 0.5, "{r:?}");
    }

    #[test]
    fn entries_follow_rounding_formula() {
        let beta = 0.984497;
        let (a, b) = rounded_entries(beta, 128, FP16);
        assert_eq!(b, FP16.round(beta / 128.0));
        assert_eq!(a, FP16.round(1.0 - beta / 128.0) + b);
    }

    #[test]
    fn solver_seeds() {
        for (seed, expect) in [(0.9375, 0.937500), (0.96875, 0.968994), (0.984375, 0.984497)] {
            let beta = optimal_beta(seed, 128, DEFAULT_TOL, FP16).unwrap();
            assert!((beta - expect).abs() < 5e-7, "{seed}: {beta}");
        }
    }

    #[test]
    fn solution_is_a_fixed_point() {
        let beta = optimal_beta(0.984375, 128, DEFAULT_TOL, FP16).unwrap();
        let next = fixed_point_step(beta, 128, FP16).unwrap();
        assert!((next - beta).abs() / beta <= DEFAULT_TOL);
        assert_eq!(invariance_parameter(beta, 128, FP16).unwrap().rel_err, 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(optimal_beta(1.0, 128, DEFAULT_TOL, FP16).is_err());
        assert!(optimal_beta(0.5, 128, 0.0, FP16).is_err());
        assert!(invariance_parameter(0.0, 128, FP16).is_err());
        assert!(invariance_parameter(0.5, 0, FP16).is_err());
    }
}
