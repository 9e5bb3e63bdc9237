//! Software IEEE 754 binary16 arithmetic.
//!
//! Values travel through the kernels as `f64` carriers that are always exactly
//! representable in the precision they are tagged with. [`F16Value`] holds the
//! raw 16-bit pattern and is used at encode/decode boundaries.
//!
//! Rounding is round-to-nearest-even everywhere. Basic operations are computed
//! exactly (or with a single f64 rounding) and then rounded once to the target
//! format. Because f64 carries more than `2p + 2` mantissa bits for both
//! binary16 and binary32, that double rounding is innocuous for `+ - * /`.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Largest finite binary16 value.
pub const F16_MAX: f64 = 65504.0;
/// Smallest positive normal binary16 value, 2^-14.
pub const F16_MIN_POSITIVE: f64 = 6.103_515_625e-5;
/// Unit roundoff of binary16, 2^-11.
pub const F16_UNIT_ROUNDOFF: f64 = 4.882_812_5e-4;

const EXP_MASK: u16 = 0x7C00;
const MANT_MASK: u16 = 0x03FF;
const SIGN_MASK: u16 = 0x8000;
const QUIET_NAN: u16 = 0x7E00;

/// 2^52: adding and subtracting it rounds a value in `[0, 2^52)` to an integer
/// with ties to even under the host's default rounding.
const TWO_POW_52: f64 = 4_503_599_627_370_496.0;

/// A binary16 bit pattern: 1 sign bit, 5 exponent bits, 10 mantissa bits.
#[derive(Copy, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct F16Value(u16);

impl F16Value {
    pub const ZERO: F16Value = F16Value(0);
    pub const ONE: F16Value = F16Value(0x3C00);
    pub const INFINITY: F16Value = F16Value(EXP_MASK);
    pub const NEG_INFINITY: F16Value = F16Value(SIGN_MASK | EXP_MASK);
    pub const NAN: F16Value = F16Value(QUIET_NAN);
    pub const MAX: F16Value = F16Value(0x7BFF);

    pub const fn from_bits(bits: u16) -> Self {
        F16Value(bits)
    }

    pub const fn to_bits(self) -> u16 {
        self.0
    }

    pub fn is_nan(self) -> bool {
        self.0 & EXP_MASK == EXP_MASK && self.0 & MANT_MASK != 0
    }

    pub fn is_infinite(self) -> bool {
        self.0 & !SIGN_MASK == EXP_MASK
    }

    pub fn is_finite(self) -> bool {
        self.0 & EXP_MASK != EXP_MASK
    }

    pub fn is_subnormal(self) -> bool {
        self.0 & EXP_MASK == 0 && self.0 & MANT_MASK != 0
    }

    /// Exact decode to f64.
    pub fn to_f64(self) -> f64 {
        let sign = if self.0 & SIGN_MASK != 0 { -1.0 } else { 1.0 };
        let exp = ((self.0 & EXP_MASK) >> 10) as i32;
        let mant = (self.0 & MANT_MASK) as f64;
        match exp {
            0 => sign * mant * pow2(-24),
            31 if mant == 0.0 => sign * f64::INFINITY,
            31 => f64::NAN,
            _ => sign * (1024.0 + mant) * pow2(exp - 25),
        }
    }

    /// Round an f64 to the nearest binary16 pattern.
    pub fn from_f64(x: f64) -> Self {
        f16_round(x)
    }
}

impl fmt::Debug for F16Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "F16Value({:#06x} = {})", self.0, self.to_f64())
    }
}

impl fmt::Display for F16Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_f64())
    }
}

impl From<F16Value> for f64 {
    fn from(v: F16Value) -> f64 {
        v.to_f64()
    }
}

/// Exact power of two for exponents inside the normal f64 range.
#[inline(always)]
fn pow2(e: i32) -> f64 {
    f64::from_bits(((e + 1023) as u64) << 52)
}

/// Rounds `|x|` (finite, non-negative) to an integer multiple of the binary16
/// quantum at its exponent. Returns the integer significand and the exponent
/// it is scaled by, so that the rounded value is `sig * 2^(exp - 10)`.
///
/// `exp` is clamped to -14 so subnormals come out with `sig < 1024`.
#[inline(always)]
fn round_significand(a: f64) -> (f64, i32) {
    let biased = ((a.to_bits() >> 52) & 0x7FF) as i32;
    // Below 2^-14 the quantum is fixed at 2^-24; f64 subnormals land here too
    // and scale to zero.
    let exp = (biased - 1023).max(-14);
    let scaled = a * pow2(10 - exp);
    let sig = (scaled + TWO_POW_52) - TWO_POW_52;
    (sig, exp)
}

/// Nearest binary16 value of `x`, round-to-nearest-even. Magnitudes that round
/// above 65504 become infinite; NAN stays NAN.
pub fn f16_round(x: f64) -> F16Value {
    if x.is_nan() {
        return F16Value(if x.is_sign_negative() { SIGN_MASK | QUIET_NAN } else { QUIET_NAN });
    }
    let sign = if x.is_sign_negative() { SIGN_MASK } else { 0 };
    let a = x.abs();
    if a.is_infinite() {
        return F16Value(sign | EXP_MASK);
    }
    let (sig, mut exp) = round_significand(a);
    let mut sig = sig as u32;
    if sig < 1024 {
        // Subnormal (exp == -14). sig == 1024 would already be the smallest normal.
        return F16Value(sign | sig as u16);
    }
    if sig == 2048 {
        sig = 1024;
        exp += 1;
    }
    if exp > 15 {
        return F16Value(sign | EXP_MASK);
    }
    F16Value(sign | (((exp + 15) as u16) << 10) | (sig as u16 - 1024))
}

/// Carrier form of [`f16_round`]: returns the rounded value as f64 without
/// building the bit pattern. This is the hot path used by the kernels.
#[inline]
pub fn round_to_f16(x: f64) -> f64 {
    let a = x.abs();
    if !a.is_finite() {
        return x;
    }
    let (sig, exp) = round_significand(a);
    let r = sig * pow2(exp - 10);
    if r > F16_MAX {
        f64::INFINITY.copysign(x)
    } else {
        r.copysign(x)
    }
}

/// True when `x` is exactly a binary16 value (INF and NAN count).
pub fn is_f16_representable(x: f64) -> bool {
    x.is_nan() || round_to_f16(x).to_bits() == x.to_bits()
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    #[inline(always)]
    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }
}

/// Correctly rounded binary16 arithmetic.
pub fn f16_binop(a: F16Value, b: F16Value, op: BinOp) -> F16Value {
    f16_round(op.apply(a.to_f64(), b.to_f64()))
}

/// `e^x` rounded to binary16, with the exponential evaluated in f64.
pub fn f16_exp(x: F16Value) -> F16Value {
    f16_round(x.to_f64().exp())
}

/// Storage/arithmetic precision of a pipeline stage.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Precision {
    Fp16,
    Fp32,
    Fp64,
}

impl Precision {
    #[inline(always)]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::Fp16 => round_to_f16(x),
            Precision::Fp32 => x as f32 as f64,
            Precision::Fp64 => x,
        }
    }

    #[inline(always)]
    pub fn binop(self, a: f64, b: f64, op: BinOp) -> f64 {
        self.round(op.apply(a, b))
    }

    #[inline(always)]
    pub fn add(self, a: f64, b: f64) -> f64 {
        self.round(a + b)
    }

    #[inline(always)]
    pub fn sub(self, a: f64, b: f64) -> f64 {
        self.round(a - b)
    }

    #[inline(always)]
    pub fn mul(self, a: f64, b: f64) -> f64 {
        self.round(a * b)
    }

    #[inline(always)]
    pub fn div(self, a: f64, b: f64) -> f64 {
        self.round(a / b)
    }

    #[inline(always)]
    pub fn exp(self, x: f64) -> f64 {
        self.round(x.exp())
    }

    pub fn is_representable(self, x: f64) -> bool {
        x.is_nan() || self.round(x).to_bits() == x.to_bits()
    }

    /// Largest finite value of the format.
    pub fn max_finite(self) -> f64 {
        match self {
            Precision::Fp16 => F16_MAX,
            Precision::Fp32 => f32::MAX as f64,
            Precision::Fp64 => f64::MAX,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::Fp16 => "FP16",
            Precision::Fp32 => "FP32",
            Precision::Fp64 => "FP64",
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "FP16" | "F16" | "HALF" => Ok(Precision::Fp16),
            "FP32" | "F32" | "FLOAT" => Ok(Precision::Fp32),
            "FP64" | "F64" | "DOUBLE" => Ok(Precision::Fp64),
            other => Err(format!("unknown precision {other:?}")),
        }
    }
}

/// Decode a bfloat16 pattern. Every bfloat16 value is an f32 value.
pub fn bf16_to_f64(bits: u16) -> f64 {
    f32::from_bits((bits as u32) << 16) as f64
}
