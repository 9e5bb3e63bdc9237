//! Shared fixtures for the kernel benchmarks.

use pasa_core::bench::{generate, DistributionSpec};
use pasa_core::AttentionProblem;

/// A uniform problem of the given shape with 128-wide blocks (or the whole
/// sequence when shorter).
pub fn uniform_problem(x0: f64, am: f64, shape: [usize; 4]) -> AttentionProblem {
    let inputs = generate(&DistributionSpec::uniform(x0, am, 0, shape)).expect("valid spec");
    let block = shape[2].min(128);
    AttentionProblem::new(inputs.q, inputs.k, inputs.v, block, block).expect("valid problem")
}
