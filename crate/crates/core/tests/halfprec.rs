mod common;

use common::{nearest, nearest_f16};
use half::f16;
use pasa_core::halfprec::{f16_binop, f16_exp, f16_round, BinOp, F16Value, F16_MAX, F16_UNIT_ROUNDOFF};
use pasa_core::Precision;
use proptest::prelude::*;

#[test]
fn oracle_agrees_with_half_on_f32_inputs() {
    // f32 to f16 in `half` is a single correctly rounded step, so it checks
    // the oracle on a dense sample of f32 values including every tie.
    for bits in (0..u32::MAX).step_by(997) {
        let x = f32::from_bits(bits);
        let (a, b) = (nearest_f16(x as f64), f16::from_f32(x));
        assert!(a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()), "{x:e}");
    }
}

#[test]
fn every_pattern_decodes_and_round_trips() {
    for bits in 0..=u16::MAX {
        let v = F16Value::from_bits(bits);
        let h = f16::from_bits(bits);
        if h.is_nan() {
            assert!(v.is_nan() && v.to_f64().is_nan());
            continue;
        }
        assert_eq!(v.to_f64(), h.to_f64(), "{bits:#06x}");
        assert_eq!(f16_round(v.to_f64()).to_bits(), bits);
        assert_eq!(v.is_subnormal(), h.classify() == std::num::FpCategory::Subnormal);
    }
}

#[test]
fn exp_matches_oracle_for_every_pattern() {
    for bits in 0..=u16::MAX {
        let x = F16Value::from_bits(bits);
        let want = nearest_f16(x.to_f64().exp());
        let got = f16_exp(x);
        assert!(got.to_bits() == want.to_bits() || (got.is_nan() && want.is_nan()), "{bits:#06x}");
        if x.is_finite() {
            assert_eq!(Precision::Fp16.exp(x.to_f64()), want.to_f64());
        }
    }
}

#[test]
fn overflow_threshold() {
    assert_eq!(f16_round(65519.99).to_f64(), F16_MAX);
    assert!(f16_round(65520.0).is_infinite());
    assert!(f16_round(-65520.0).to_f64() == f64::NEG_INFINITY);
}

fn any_f16() -> impl Strategy<Value = F16Value> {
    any::<u16>().prop_map(F16Value::from_bits)
}

fn finite_f16() -> impl Strategy<Value = f64> {
    any::<u16>()
        .prop_map(|b| F16Value::from_bits(b).to_f64())
        .prop_filter("finite", |x| x.is_finite())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4096))]

    #[test]
    fn rounding_is_monotone(a in -70000.0f64..70000.0, b in -70000.0f64..70000.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(f16_round(lo).to_f64() <= f16_round(hi).to_f64());
    }

    #[test]
    fn relative_error_is_bounded(x in prop_oneof![6.2e-5f64..65504.0, -65504.0f64..-6.2e-5]) {
        let r = Precision::Fp16.round(x);
        prop_assert!(((r - x) / x).abs() <= F16_UNIT_ROUNDOFF);
    }

    #[test]
    fn rounding_is_idempotent(x in any::<f64>()) {
        let once = Precision::Fp16.round(x);
        let twice = Precision::Fp16.round(once);
        prop_assert!(once.to_bits() == twice.to_bits() || (once.is_nan() && twice.is_nan()));
        prop_assert!(once.is_nan() || once.to_bits() == nearest(x).to_bits());
    }

    #[test]
    fn add_and_mul_commute(a in any_f16(), b in any_f16()) {
        for op in [BinOp::Add, BinOp::Mul] {
            let (x, y) = (f16_binop(a, b, op), f16_binop(b, a, op));
            prop_assert!(x.to_bits() == y.to_bits() || (x.is_nan() && y.is_nan()));
        }
    }

    #[test]
    fn carrier_ops_match_bit_ops(a in finite_f16(), b in finite_f16()) {
        let p = Precision::Fp16;
        let fa = F16Value::from_f64(a);
        let fb = F16Value::from_f64(b);
        for (op, got) in [(BinOp::Add, p.add(a, b)), (BinOp::Sub, p.sub(a, b)), (BinOp::Mul, p.mul(a, b)), (BinOp::Div, p.div(a, b))] {
            let want = f16_binop(fa, fb, op).to_f64();
            prop_assert!(got.to_bits() == want.to_bits() || (got.is_nan() && want.is_nan()), "{op:?} {a} {b}");
        }
    }

    #[test]
    fn fp32_rounding_matches_native(x in any::<f64>()) {
        let r = Precision::Fp32.round(x);
        let native = x as f32 as f64;
        prop_assert!(r.to_bits() == native.to_bits() || (r.is_nan() && native.is_nan()));
    }
}
