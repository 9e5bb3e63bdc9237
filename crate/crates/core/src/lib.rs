//! Blocked attention under emulated low-precision arithmetic, and the
//! pseudo-average shifting (PASA) variant that keeps FP16 score storage free
//! of overflow.
//!
//! * [`halfprec`]: bit-exact binary16 rounding and arithmetic.
//! * [`tensors`]: matrices, precision policies, GEMM and row kernels with
//!   explicit rounding points.
//! * [`attention`]: FP64 golden attention and flash attention.
//! * [`pasa`]: shifting matrix, key preprocessing, online global recovery.
//! * [`beta`]: optimal β from the rounded-entry invariance condition.
//! * [`bench`]: workload generators, RMSE/NAN metrics, range reports, sweeps.

pub mod attention;
pub mod bench;
pub mod beta;
pub mod error;
pub mod halfprec;
pub mod pasa;
pub mod tensors;

pub use attention::{flash_attention, flash_attention_with, golden_attention, AttentionProblem, M0Mode};
pub use beta::{invariance_parameter, optimal_beta, InvarianceReport};
pub use error::{Error, Result};
pub use halfprec::{f16_binop, f16_exp, f16_round, BinOp, F16Value, Precision};
pub use pasa::{pasa_attention, pasa_attention_with, PasaOptions, PasaParams, RunDiagnostics, DEFAULT_BETA};
pub use tensors::{gemm, Matrix2D, PolicyName, PrecisionPolicy, Tensor4};
