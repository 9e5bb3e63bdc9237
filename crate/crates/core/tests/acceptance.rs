//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! The overflow and RMSE criteria run the full (1, 16, 1280, 128) sweep, which
//! takes a few minutes under emulation. Set `PASA_ACCEPTANCE_SMALL=1` to run
//! them at the reduced shape instead; overflow outcomes are then checked
//! against the FP64 pre-scale score diagnostic.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use half::f16;
use pasa_core::bench::{
    generate, range_report, rmse, sweep, DistributionKind, DistributionSpec, Preset, RunReport, SweepConfig,
    PAPER_SHAPE, SMALL_SHAPE,
};
use pasa_core::beta::{invariance_parameter, optimal_beta, DEFAULT_TOL};
use pasa_core::halfprec::{f16_binop, f16_exp, f16_round, BinOp, F16Value, F16_MAX};
use pasa_core::pasa::{build_shifting_matrix, shifting_matrix_inverse, shifted_attention, PasaOptions};
use pasa_core::tensors::{gemm_with, rowmean, Matrix2D};
use pasa_core::{
    flash_attention, golden_attention, pasa_attention, AttentionProblem, Error, PasaParams, PolicyName, Precision,
    PrecisionPolicy, DEFAULT_BETA,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: Error) -> String {
    e.to_string()
}

fn round_to(x: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    (x * s).round() / s
}

/// Rounds to `digits` significant digits.
fn sig(x: f64, digits: i32) -> f64 {
    let e = x.abs().log10().floor() as i32;
    round_to(x, digits - 1 - e)
}

fn beta_solver() -> Outcome {
    let fp16 = Precision::Fp16;
    for (seed, expect) in [(1.0 - 2f64.powi(-4), 0.937500), (1.0 - 2f64.powi(-5), 0.968994), (1.0 - 2f64.powi(-6), 0.984497)] {
        let beta = optimal_beta(seed, 128, DEFAULT_TOL, fp16).map_err(err)?;
        check(round_to(beta, 6) == expect, || format!("seed {seed}: beta {beta:.7}, want {expect}"))?;
    }

    // (β, Inva, Inva₁, Rel. Err. %) as tabulated: four significant digits for
    // the invariances and percentages truncated to two decimals.
    let initial = [
        (0.9, 9.000, 8.971, 0.32),
        (0.9375, 15.00, 15.00, 0.0),
        (0.96875, 31.00, 31.25, 0.81),
        (0.984375, 63.00, 63.50, 0.79),
        (0.99, 99.00, 102.2, 3.23),
        (0.999, 999.0, 1031.0, 3.20),
    ];
    for (beta, ideal, actual, pct) in initial {
        let r = invariance_parameter(beta, 128, fp16).map_err(err)?;
        let got_pct = (r.rel_err * 1e4).floor() / 100.0;
        check(
            sig(r.inva_ideal, 4) == ideal && sig(r.inva_actual, 4) == actual && got_pct == pct,
            || format!("beta {beta}: {r:?}"),
        )?;
    }

    // Optimised β from each initial value, shown to the table's precision.
    let optimised = [
        (0.9, 1, 8.971),
        (0.9375, 4, 15.00),
        (0.96875, 5, 31.25),
        (0.984375, 6, 63.50),
        (0.99, 6, 102.2),
        (0.999, 6, 1031.0),
    ];
    let shown = [0.9, 0.9375, 0.96899, 0.984497, 0.990311, 0.999031];
    for ((seed, decimals, inva), want_beta) in optimised.into_iter().zip(shown) {
        let beta = optimal_beta(seed, 128, DEFAULT_TOL, fp16).map_err(err)?;
        let r = invariance_parameter(beta, 128, fp16).map_err(err)?;
        check(
            round_to(beta, decimals) == want_beta
                && sig(r.inva_ideal, 4) == inva
                && sig(r.inva_actual, 4) == inva
                && round_to(100.0 * r.rel_err, 1) == 0.0,
            || format!("optimised from {seed}: beta {beta}, {r:?}"),
        )?;
    }
    Ok("3 seeds and 12 table rows reproduced".into())
}

fn random_problem(rng: &mut ChaCha8Rng, seed: u64) -> Result<AttentionProblem, String> {
    let (s1_len, s2_len) = [(256, 256), (128, 512), (512, 128), (256, 512)][rng.random_range(0..4)];
    let d = [16, 32, 64][rng.random_range(0..3)];
    let heads = rng.random_range(1..=2);
    let s1 = [64, 128][rng.random_range(0..2)];
    let s2 = [64, 128][rng.random_range(0..2)];
    let x0 = rng.random_range(-8.0..8.0);
    let am = rng.random_range(0.25..4.0);
    let kind = rng.random_bool(0.5);
    let make = |shape, stream| {
        let spec = if kind {
            DistributionSpec::uniform(x0, am, seed * 7 + stream, shape)
        } else {
            DistributionSpec::hybrid(x0, am, seed * 7 + stream, shape)
        };
        generate(&spec).map_err(err)
    };
    let qs = make([1, heads, s1_len, d], 0)?;
    let kv = make([1, heads, s2_len, d], 1)?;
    AttentionProblem::new(qs.q, kv.k, kv.v, s1, s2).map_err(err)
}

fn equivalence() -> Outcome {
    let golden_policy = PrecisionPolicy::golden();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let problems = 52;
    for seed in 0..problems {
        let problem = random_problem(&mut rng, seed)?;
        let golden = golden_attention(&problem).map_err(err)?;
        for beta in [0.0, 0.5, 0.9375, DEFAULT_BETA] {
            let params = PasaParams::new(beta, problem.alpha, problem.s2, Precision::Fp64).map_err(err)?;
            let (out, _) = pasa_attention(&problem, &params, &golden_policy).map_err(err)?;
            let e = rmse(&out, &golden).map_err(err)?;
            worst = worst.max(e);
            check(e <= 1e-10, || format!("problem {seed}, beta {beta}: rmse {e:e}"))?;
            // The generic shifting path must agree as well, β = 0 included.
            let (generic, _) = shifted_attention(&problem, &params, &golden_policy, PasaOptions::default()).map_err(err)?;
            let e = rmse(&generic, &golden).map_err(err)?;
            worst = worst.max(e);
            check(e <= 1e-10, || format!("problem {seed}, beta {beta} (shifting path): rmse {e:e}"))?;
        }
        for name in PolicyName::ALL {
            let policy = PrecisionPolicy::new(name);
            let params = PasaParams::for_problem(&problem, 0.0, &policy).map_err(err)?;
            let (pasa, _) = pasa_attention(&problem, &params, &policy).map_err(err)?;
            let flash = flash_attention(&problem, &policy).map_err(err)?;
            let same = pasa.data().iter().zip(flash.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            check(same, || format!("problem {seed}: beta = 0 differs from flash under {name}"))?;
        }
    }
    Ok(format!("{problems} problems, worst relative RMSE {worst:.2e}"))
}

fn inverse_identity() -> Outcome {
    let mut worst: f64 = 0.0;
    for s in [2usize, 4, 128] {
        for lambda in [0.0, 0.001, 1.0 / (2.0 * s as f64)] {
            let inv = shifting_matrix_inverse(s, lambda).map_err(err)?;
            let a = Matrix2D::from_fn(s, s, Precision::Fp64, |r, c| f64::from(r == c) - lambda);
            let prod = gemm_with(&a, false, &inv, Precision::Fp64, Precision::Fp64).map_err(err)?;
            for r in 0..s {
                for c in 0..s {
                    let e = (prod.get(r, c) - f64::from(r == c)).abs();
                    worst = worst.max(e);
                    check(e <= 1e-13, || format!("s {s}, lambda {lambda}: entry ({r},{c}) off by {e:e}"))?;
                }
            }
        }
        let singular = shifting_matrix_inverse(s, 1.0 / s as f64);
        check(matches!(singular, Err(Error::Singular(_))), || format!("s {s}: lambda = 1/s gave {singular:?}"))?;
    }
    Ok(format!("9 cases, worst deviation {worst:.1e}; lambda = 1/s singular"))
}

fn recovery_relation() -> Outcome {
    let fp64 = Precision::Fp64;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for beta in [0.5, 0.9375, DEFAULT_BETA] {
        for trial in 0..10 {
            let rows = rng.random_range(1..=64);
            let cols = [16, 64, 128][trial % 3];
            // Half the trials add a large bias, as attention scores often have.
            let offset = if trial % 2 == 0 { 0.0 } else { rng.random_range(-100.0..100.0) };
            let s = Matrix2D::from_fn(rows, cols, fp64, |_, _| offset + rng.random_range(-1.0..1.0));
            let m = build_shifting_matrix(cols, beta, 1.0, fp64).map_err(err)?;
            let shifted = gemm_with(&s, false, &m, fp64, fp64).map_err(err)?;
            for (a, b) in rowmean(&shifted, fp64).iter().zip(rowmean(&s, fp64)) {
                // Absolute for unit-scale rows, relative once the mean is large.
                let e = (a / (1.0 - beta) - b).abs() / b.abs().max(1.0);
                worst = worst.max(e);
                check(e <= 1e-12, || format!("beta {beta}: {} vs {b}", a / (1.0 - beta)))?;
            }
        }
    }
    Ok(format!("30 random matrices, worst deviation {worst:.1e}"))
}

fn cell(reports: &[RunReport], kind: DistributionKind, x0: f64, am: f64, policy: PolicyName) -> Result<&RunReport, String> {
    reports
        .iter()
        .find(|r| r.kind == kind && r.x0 == x0 && r.am == am && r.policy == policy)
        .ok_or_else(|| format!("no {policy} cell for {kind:?} x0 = {x0}, Am = {am}"))
}

fn no_errors(reports: &[RunReport]) -> Result<(), String> {
    match reports.iter().find(|r| r.error.is_some()) {
        Some(r) => Err(format!("{} {:?} x0 = {} Am = {}: {}", r.policy, r.kind, r.x0, r.am, r.error.as_deref().unwrap_or(""))),
        None => Ok(()),
    }
}

fn overflow_full(reports: &[RunReport], elapsed: Duration) -> Outcome {
    use DistributionKind::*;
    use PolicyName::*;
    no_errors(reports)?;
    let mut summary = Vec::new();
    for (kind, x0, am) in [(Uniform, 30.0, 0.5), (Hybrid, 30.0, 10.0)] {
        let partial = cell(reports, kind, x0, am, FaPartialFp16)?.nan_pct;
        check(partial == 100.0, || format!("{kind:?} x0 {x0} Am {am}: partial FP16 NAN {partial}%"))?;
        summary.push(format!("{partial}%"));
    }
    for (kind, x0, am, reference) in [
        (Uniform, 20.0, 15.0, 0.12),
        (Uniform, 20.0, 20.0, 8.14),
        (Hybrid, 20.0, 50.0, 0.04),
        (Hybrid, 20.0, 100.0, 1.11),
    ] {
        let got = cell(reports, kind, x0, am, FaPartialFp16)?.nan_pct;
        let ratio = got / reference;
        check(got > 0.0 && got < 100.0 && (0.1..=10.0).contains(&ratio), || {
            format!("{kind:?} x0 {x0} Am {am}: partial FP16 NAN {got}% vs reference {reference}%")
        })?;
        summary.push(format!("{got:.3}%"));
    }
    for r in reports.iter().filter(|r| r.policy != FaPartialFp16) {
        check(r.nan_pct == 0.0, || format!("{} {:?} x0 {} Am {}: NAN {}%", r.policy, r.kind, r.x0, r.am, r.nan_pct))?;
    }
    check(elapsed < Duration::from_secs(15 * 60), || format!("sweep took {elapsed:?}"))?;
    Ok(format!(
        "partial FP16 NAN {}; PASA and FP32 finite everywhere ({:.0} s)",
        summary.join(" / "),
        elapsed.as_secs_f64()
    ))
}

fn overflow_small(reports: &[RunReport]) -> Outcome {
    // With d = 64 the preset grid stays below the FP16 limit, so add cells
    // whose scores do overflow at this shape.
    let extra: Vec<_> = [(30.0, 0.5), (35.0, 0.5), (40.0, 0.5)]
        .into_iter()
        .map(|(x0, am)| DistributionSpec::uniform(x0, am, 0, SMALL_SHAPE))
        .chain([(40.0, 10.0), (30.0, 100.0)].into_iter().map(|(x0, am)| DistributionSpec::hybrid(x0, am, 0, SMALL_SHAPE)))
        .collect();
    let extra = sweep(&Preset::policies(), &extra, &SweepConfig::default());
    no_errors(reports)?;
    no_errors(&extra)?;
    let mut overflowing = 0;
    for r in reports.iter().chain(&extra) {
        match r.policy {
            PolicyName::FaPartialFp16 => {
                let pre_scale = r.s_max_before * (r.d as f64).sqrt();
                let predicted = pre_scale > F16_MAX;
                overflowing += usize::from(predicted);
                check((r.nan_pct > 0.0) == predicted, || {
                    format!("{:?} x0 {} Am {}: NAN {}% with max QK {pre_scale}", r.kind, r.x0, r.am, r.nan_pct)
                })?;
            }
            _ => check(r.nan_pct == 0.0, || format!("{} {:?} x0 {} Am {}: NAN {}%", r.policy, r.kind, r.x0, r.am, r.nan_pct))?,
        }
    }
    check(overflowing > 0, || "no overflowing cell at the reduced shape".into())?;
    Ok(format!("reduced shape: partial FP16 NAN iff FP64 max QK > 65504 ({overflowing} overflowing cells); PASA and FP32 finite"))
}

fn rmse_ordering(reports: &[RunReport]) -> Outcome {
    use PolicyName::*;
    no_errors(reports)?;
    let mut compared = 0;
    for pasa in reports.iter().filter(|r| r.policy == PasaFp16 && r.x0 != 0.0) {
        let partial = cell(reports, pasa.kind, pasa.x0, pasa.am, FaPartialFp16)?;
        let fp32 = cell(reports, pasa.kind, pasa.x0, pasa.am, FaFp32)?;
        if partial.nan_pct > 0.0 || pasa.nan_pct > 0.0 || fp32.nan_pct > 0.0 {
            continue;
        }
        compared += 1;
        check(fp32.rmse <= pasa.rmse && pasa.rmse <= partial.rmse, || {
            format!(
                "{:?} x0 {} Am {}: FP32 {:e}, PASA {:e}, partial {:e}",
                pasa.kind, pasa.x0, pasa.am, fp32.rmse, pasa.rmse, partial.rmse
            )
        })?;
    }
    check(compared > 0, || "no comparable cells".into())?;
    Ok(format!("FP32 <= PASA <= partial FP16 in all {compared} non-overflow cells with x0 != 0"))
}

fn range_reduction(reports: &[RunReport]) -> Outcome {
    let abs_max = |(lo, hi): (f64, f64)| lo.abs().max(hi.abs());
    let mut checked = 0;
    for r in reports.iter().filter(|r| r.policy == PolicyName::PasaFp16 && r.x0 >= 10.0 * r.am) {
        let before = abs_max((r.s_min_before, r.s_max_before));
        let after = abs_max((r.s_min_after, r.s_max_after));
        checked += 1;
        check(after < 0.2 * before, || format!("{:?} x0 {} Am {}: {after} vs {before}", r.kind, r.x0, r.am))?;
    }
    // Per head, on extra biased workloads of both kinds.
    for (seed, (x0, am, uniform)) in [(10.0, 1.0, true), (30.0, 0.5, true), (50.0, 5.0, false), (100.0, 10.0, false)].into_iter().enumerate() {
        let shape = [1, 2, 256, 64];
        let spec = if uniform {
            DistributionSpec::uniform(x0, am, seed as u64, shape)
        } else {
            DistributionSpec::hybrid(x0, am, seed as u64, shape)
        };
        let g = generate(&spec).map_err(err)?;
        let problem = AttentionProblem::new(g.q, g.k, g.v, 128, 128).map_err(err)?;
        let params = PasaParams::new(DEFAULT_BETA, problem.alpha, 128, Precision::Fp16).map_err(err)?;
        for h in range_report(&problem, &params).map_err(err)? {
            checked += 1;
            let (before, after) = (abs_max(h.s_before), abs_max(h.s_after));
            check(after < 0.2 * before, || format!("x0 {x0} Am {am} head {}: {after} vs {before}", h.head))?;
        }
    }
    Ok(format!("max|S'| < 0.2 max|S/alpha| in {checked} biased cases"))
}

fn oracle(x: f64) -> f16 {
    common::nearest_f16(x)
}

fn same_f16(a: F16Value, b: f16) -> bool {
    a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan())
}

fn emulation_fidelity() -> Outcome {
    let mut mismatches = Vec::new();
    for bits in 0..=u16::MAX {
        let x = f16::from_bits(bits);
        let xv = F16Value::from_bits(bits);
        let xf = x.to_f64();
        // Decoding, identity rounding, and the carrier fast path.
        if !(xv.to_f64() == xf || (xf.is_nan() && xv.to_f64().is_nan())) || !same_f16(f16_round(xf), x) {
            mismatches.push(format!("round {bits:#06x}"));
        }
        if xf.is_finite() && Precision::Fp16.round(xf) != xf {
            mismatches.push(format!("carrier {bits:#06x}"));
        }
        // Points between this value and its successor hit every tie and
        // directed-rounding case, including the overflow threshold.
        if xf.is_finite() && !x.is_sign_negative() {
            let step = if bits == 0x7BFF { 32.0 } else { f16::from_bits(bits + 1).to_f64() - xf };
            for frac in [0.25, 0.5, 0.75] {
                for y in [xf + frac * step, -(xf + frac * step)] {
                    if !same_f16(f16_round(y), oracle(y)) {
                        mismatches.push(format!("round {y:e}"));
                    }
                }
            }
        }
        if !same_f16(f16_exp(xv), oracle(xf.exp())) {
            mismatches.push(format!("exp {bits:#06x}"));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let pairs = 1_000_000;
    for _ in 0..pairs {
        let (a, b): (u16, u16) = (rng.random(), rng.random());
        let (ha, hb) = (f16::from_bits(a), f16::from_bits(b));
        let (va, vb) = (F16Value::from_bits(a), F16Value::from_bits(b));
        for (op, expect) in [(BinOp::Add, ha + hb), (BinOp::Sub, ha - hb), (BinOp::Mul, ha * hb), (BinOp::Div, ha / hb)] {
            if !same_f16(f16_binop(va, vb, op), expect) {
                mismatches.push(format!("{op:?} {a:#06x} {b:#06x}"));
            }
        }
    }
    check(mismatches.is_empty(), || format!("{} mismatches, first: {:?}", mismatches.len(), &mismatches[..mismatches.len().min(5)]))?;
    Ok(format!("65536 patterns for round/exp, {pairs} pairs x 4 binops: 0 mismatches"))
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = f();
    let secs = start.elapsed().as_secs_f64();
    match &outcome {
        Ok(detail) => println!("PASS  {name} ({secs:.1} s): {detail}"),
        Err(detail) => println!("FAIL  {name} ({secs:.1} s): {detail}"),
    }
    outcome.is_ok()
}

fn main() -> ExitCode {
    let small = std::env::var("PASA_ACCEPTANCE_SMALL").is_ok_and(|v| !v.is_empty() && v != "0");
    let mut ok = true;
    ok &= run("1 beta solver conformance", || {
        let start = Instant::now();
        let detail = beta_solver()?;
        check(start.elapsed() < Duration::from_secs(1), || format!("took {:?}", start.elapsed()))?;
        Ok(detail)
    });
    ok &= run("2 mathematical equivalence", || {
        let start = Instant::now();
        let detail = equivalence()?;
        check(start.elapsed() < Duration::from_secs(120), || format!("took {:?}", start.elapsed()))?;
        Ok(detail)
    });
    ok &= run("3 shifting-matrix inverse", inverse_identity);
    ok &= run("4 mean recovery relation", recovery_relation);

    let shape = if small { SMALL_SHAPE } else { PAPER_SHAPE };
    let start = Instant::now();
    let reports = sweep(&Preset::policies(), &Preset::Paper.specs(shape, 0), &SweepConfig::default());
    let elapsed = start.elapsed();
    ok &= run("5 overflow reproduction", || {
        if small {
            overflow_small(&reports)
        } else {
            overflow_full(&reports, elapsed)
        }
    });
    if small {
        println!("SKIP  6 RMSE ordering: defined on the full-shape sweep");
    } else {
        ok &= run("6 RMSE ordering", || rmse_ordering(&reports));
    }
    ok &= run("7 range reduction", || range_reduction(&reports));
    ok &= run("8 emulation fidelity", emulation_fidelity);

    if ok {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: FAILED");
        ExitCode::FAILURE
    }
}
