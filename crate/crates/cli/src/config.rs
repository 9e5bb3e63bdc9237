//! Experiment configuration: JSON file values, overridden by flags.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use pasa_core::bench::{DistributionKind, DistributionSpec, Preset, DEFAULT_OUTLIER_P, PAPER_SHAPE, SMALL_SHAPE};
use pasa_core::beta::DEFAULT_TOL;
use pasa_core::{M0Mode, PolicyName, Precision, PrecisionPolicy, DEFAULT_BETA};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::npy::DType;

#[derive(Debug, Error)]
#[error("config error: {0}")]
pub struct ConfigError(pub String);

fn bad<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

/// A fixed β or the keyword `"solve"`.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BetaSetting {
    Value(f64),
    Keyword(BetaKeyword),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BetaKeyword {
    Solve,
}

impl Default for BetaSetting {
    fn default() -> Self {
        BetaSetting::Value(DEFAULT_BETA)
    }
}

impl FromStr for BetaSetting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("solve") {
            return Ok(BetaSetting::Keyword(BetaKeyword::Solve));
        }
        s.parse::<f64>()
            .map(BetaSetting::Value)
            .map_err(|_| format!("beta must be a number or \"solve\", got {s:?}"))
    }
}

/// One workload of an explicit grid; seed and shape come from the config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridPoint {
    pub kind: DistributionKind,
    pub x0: f64,
    #[serde(rename = "Am")]
    pub am: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputFiles {
    pub q: PathBuf,
    pub k: PathBuf,
    pub v: PathBuf,
}

/// Everything an experiment depends on. Serialized into every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub policies: Vec<PolicyName>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<GridPoint>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inputs: Option<InputFiles>,
    /// Element type of the input files.
    pub dtype: DType,
    /// Workload shape for generated inputs; validated against file inputs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shape: Option<[usize; 4]>,
    /// Use the reduced shape when `shape` is unset.
    pub small: bool,
    pub seed: u64,
    pub beta: BetaSetting,
    /// Starting point and tolerance when `beta` is `"solve"`.
    pub beta0: f64,
    pub tol: f64,
    /// Matrix size of the β solve; defaults to s2.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    pub s1: usize,
    pub s2: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub diagnose: bool,
    pub m0_mode: M0Mode,
    /// Policies whose output must be free of NAN/INF (exit code 2 otherwise).
    pub must_be_finite: Vec<PolicyName>,
    /// Overrides the vector-unit precision of every selected policy.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vector_prec: Option<Precision>,
    /// Drop trailing rows of file inputs so the sequence length divides
    /// both block sizes.
    pub truncate_seq: bool,
    /// Record wall-clock time per cell (makes reports non-reproducible).
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            policies: Preset::policies().iter().map(|p| p.name).collect(),
            preset: None,
            grid: None,
            inputs: None,
            dtype: DType::Auto,
            shape: None,
            small: false,
            seed: 0,
            beta: BetaSetting::default(),
            beta0: 1.0 - 2f64.powi(-6),
            tol: DEFAULT_TOL,
            n: None,
            s1: 128,
            s2: 128,
            output: None,
            diagnose: false,
            m0_mode: M0Mode::NegInf,
            must_be_finite: Vec::new(),
            vector_prec: None,
            truncate_seq: false,
            timing: false,
        }
    }
}

/// Where the experiment's inputs come from after validation.
#[derive(Clone, Debug, PartialEq)]
pub enum Workload {
    Generated(Vec<DistributionSpec>),
    Files(InputFiles),
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))
    }

    pub fn resolved_shape(&self) -> [usize; 4] {
        self.shape.unwrap_or(if self.small { SMALL_SHAPE } else { PAPER_SHAPE })
    }

    pub fn solve_size(&self) -> usize {
        self.n.unwrap_or(self.s2)
    }

    pub fn precision_policies(&self) -> Vec<PrecisionPolicy> {
        self.policies
            .iter()
            .map(|&name| {
                let p = PrecisionPolicy::new(name);
                match self.vector_prec {
                    Some(v) => p.with_vector_prec(v),
                    None => p,
                }
            })
            .collect()
    }

    /// Checks cross-field rules and returns the workload.
    pub fn validate(&self) -> Result<Workload, ConfigError> {
        if self.policies.is_empty() {
            return bad("no policies selected");
        }
        if self.s1 == 0 || self.s2 == 0 {
            return bad(format!("block sizes must be positive (s1 = {}, s2 = {})", self.s1, self.s2));
        }
        match self.beta {
            BetaSetting::Value(b) if !(0.0..1.0).contains(&b) => return bad(format!("beta = {b} outside [0, 1)")),
            BetaSetting::Keyword(BetaKeyword::Solve) => {
                if self.solve_size() != self.s2 {
                    return bad(format!(
                        "beta \"solve\" needs n == s2, got n = {} and s2 = {}",
                        self.solve_size(),
                        self.s2
                    ));
                }
                if !(self.beta0 > 0.0 && self.beta0 < 1.0) {
                    return bad(format!("beta0 = {} outside (0, 1)", self.beta0));
                }
                if self.tol.is_nan() || self.tol <= 0.0 {
                    return bad(format!("tol = {} must be positive", self.tol));
                }
            }
            _ => {}
        }
        let sources = [self.preset.is_some(), self.grid.is_some(), self.inputs.is_some()];
        if sources.iter().filter(|s| **s).count() > 1 {
            return bad("choose one of preset, grid or inputs");
        }
        if let Some(files) = &self.inputs {
            return Ok(Workload::Files(files.clone()));
        }
        let shape = self.resolved_shape();
        if shape.contains(&0) {
            return bad(format!("shape {shape:?} has an empty dimension"));
        }
        if !shape[2].is_multiple_of(self.s1) || !shape[2].is_multiple_of(self.s2) {
            return bad(format!(
                "sequence length {} is not a multiple of s1 = {} and s2 = {}",
                shape[2], self.s1, self.s2
            ));
        }
        let specs = match (&self.grid, self.preset) {
            (Some(grid), _) => {
                if grid.is_empty() {
                    return bad("grid is empty");
                }
                grid.iter()
                    .map(|g| DistributionSpec {
                        kind: g.kind,
                        x0: g.x0,
                        am: g.am,
                        p: g.p.unwrap_or(DEFAULT_OUTLIER_P),
                        seed: self.seed,
                        shape,
                    })
                    .collect()
            }
            (None, preset) => preset.unwrap_or(Preset::Paper).specs(shape, self.seed),
        };
        for spec in &specs {
            spec.validate().map_err(|e| ConfigError(e.to_string()))?;
        }
        Ok(Workload::Generated(specs))
    }
}
