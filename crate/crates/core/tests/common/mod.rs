//! Shared test oracles, independent of the crate's rounding code.

#![allow(dead_code)]

use half::f16;

/// Largest magnitude that still rounds to a finite binary16 value: the
/// midpoint between 65504 and 2^16 rounds to even, which is infinity.
const OVERFLOW_MIDPOINT: f64 = 65520.0;

/// Position of a finite value in the ordered list of binary16 values.
fn key(h: f16) -> i32 {
    let mag = i32::from(h.to_bits() & 0x7FFF);
    if h.is_sign_negative() {
        -mag
    } else {
        mag
    }
}

fn from_key(k: i32) -> f16 {
    if k < 0 {
        f16::from_bits(0x8000 | (-k) as u16)
    } else {
        f16::from_bits(k as u16)
    }
}

/// Round-to-nearest-even f64 to binary16 by exhaustive comparison of the
/// nearby representable values. Distances are exact because the candidate
/// and the input lie within a factor of two of each other, or the
/// difference is a small multiple of the subnormal spacing.
pub fn nearest_f16(y: f64) -> f16 {
    if y.is_nan() {
        return f16::NAN;
    }
    if y.abs() >= OVERFLOW_MIDPOINT {
        return if y > 0.0 { f16::INFINITY } else { f16::NEG_INFINITY };
    }
    let guess = f16::from_f64(y);
    let guess = if guess.is_infinite() { f16::from_bits((guess.to_bits() & 0x8000) | 0x7BFF) } else { guess };
    let mut best = guess;
    let k = key(guess);
    let cands = (k - 2..=k + 2).filter(|c| c.abs() <= 0x7BFF).map(from_key);
    for c in cands {
        let (dc, db) = ((c.to_f64() - y).abs(), (best.to_f64() - y).abs());
        if dc < db || (dc == db && c.to_bits() & 1 == 0 && best.to_bits() & 1 == 1) {
            best = c;
        }
    }
    // Signed zero follows the input.
    if best.to_f64() == 0.0 {
        return if y.is_sign_negative() { f16::NEG_ZERO } else { f16::ZERO };
    }
    best
}

/// The same oracle for carrier-value comparisons.
pub fn nearest(y: f64) -> f64 {
    nearest_f16(y).to_f64()
}
