//! Benchmark workloads, error metrics, range diagnostics and sweeps.

use std::io::Write;
use std::time::Instant;

use rand::distr::{Bernoulli, Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{flash_attention_with, golden_attention, AttentionProblem, M0Mode};
use crate::error::{Error, Result};
use crate::halfprec::Precision;
use crate::pasa::{pasa_attention_with, PasaOptions, PasaParams};
use crate::tensors::{gemm_with, PolicyName, PrecisionPolicy, Tensor4};

pub const PAPER_SHAPE: [usize; 4] = [1, 16, 1280, 128];
pub const SMALL_SHAPE: [usize; 4] = [1, 2, 256, 64];
pub const DEFAULT_OUTLIER_P: f64 = 0.001;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistributionKind {
    /// U(x0 - Am, x0 + Am)
    Uniform,
    /// N(x0, 1) + N(0, Am²)·Bernoulli(p)
    Hybrid,
}

impl DistributionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DistributionKind::Uniform => "uniform",
            DistributionKind::Hybrid => "hybrid",
        }
    }
}

impl std::str::FromStr for DistributionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(DistributionKind::Uniform),
            "hybrid" => Ok(DistributionKind::Hybrid),
            other => Err(format!("unknown distribution {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionSpec {
    pub kind: DistributionKind,
    pub x0: f64,
    #[serde(rename = "Am")]
    pub am: f64,
    #[serde(default = "default_p")]
    pub p: f64,
    pub seed: u64,
    pub shape: [usize; 4],
}

fn default_p() -> f64 {
    DEFAULT_OUTLIER_P
}

impl DistributionSpec {
    pub fn uniform(x0: f64, am: f64, seed: u64, shape: [usize; 4]) -> Self {
        DistributionSpec {
            kind: DistributionKind::Uniform,
            x0,
            am,
            p: DEFAULT_OUTLIER_P,
            seed,
            shape,
        }
    }

    pub fn hybrid(x0: f64, am: f64, seed: u64, shape: [usize; 4]) -> Self {
        DistributionSpec {
            kind: DistributionKind::Hybrid,
            ..Self::uniform(x0, am, seed, shape)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x0.is_finite() && self.am.is_finite() && self.am >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "x0 = {}, Am = {}",
                self.x0, self.am
            )));
        }
        if self.kind == DistributionKind::Hybrid && !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::InvalidParameter(format!("p = {} outside (0, 1)", self.p)));
        }
        if self.shape.contains(&0) {
            return Err(Error::InvalidParameter(format!("shape {:?}", self.shape)));
        }
        Ok(())
    }
}

/// Generated Q, K, V (rounded to FP16) and the number of Bernoulli outliers
/// drawn across all three.
#[derive(Clone, Debug)]
pub struct GeneratedInputs {
    pub q: Tensor4,
    pub k: Tensor4,
    pub v: Tensor4,
    pub outliers: usize,
}

/// Draws Q, K and V. Each tensor has its own ChaCha8 stream (0, 1, 2) keyed
/// by the seed, so the output is a pure function of the spec.
pub fn generate(spec: &DistributionSpec) -> Result<GeneratedInputs> {
    spec.validate()?;
    let draw = |stream: u64| -> Result<(Tensor4, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        let n: usize = spec.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut outliers = 0;
        match spec.kind {
            DistributionKind::Uniform => {
                let dist = Uniform::new_inclusive(spec.x0 - spec.am, spec.x0 + spec.am)
                    .map_err(|e| Error::InvalidParameter(e.to_string()))?;
                data.extend((0..n).map(|_| Precision::Fp16.round(dist.sample(&mut rng))));
            }
            DistributionKind::Hybrid => {
                let gate = Bernoulli::new(spec.p).map_err(|e| Error::InvalidParameter(e.to_string()))?;
                for _ in 0..n {
                    let base: f64 = StandardNormal.sample(&mut rng);
                    let outlier: f64 = StandardNormal.sample(&mut rng);
                    let mut x = spec.x0 + base;
                    if gate.sample(&mut rng) {
                        outliers += 1;
                        x += spec.am * outlier;
                    }
                    data.push(Precision::Fp16.round(x));
                }
            }
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "generated element {i} is not finite in FP16"
            )));
        }
        Ok((Tensor4::new(spec.shape, data)?, outliers))
    };
    let (q, oq) = draw(0)?;
    let (k, ok) = draw(1)?;
    let (v, ov) = draw(2)?;
    Ok(GeneratedInputs {
        q,
        k,
        v,
        outliers: oq + ok + ov,
    })
}

/// ‖computed - golden‖₂ / ‖golden‖₂ in f64. NAN when `computed` holds NAN/INF.
pub fn rmse(computed: &Tensor4, golden: &Tensor4) -> Result<f64> {
    if computed.shape() != golden.shape() {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            computed.shape(),
            golden.shape()
        )));
    }
    let mut diff = 0.0;
    let mut norm = 0.0;
    for (&c, &g) in computed.data().iter().zip(golden.data()) {
        diff += (c - g) * (c - g);
        norm += g * g;
    }
    if norm == 0.0 {
        return Err(Error::UndefinedMetric("golden output has zero norm".into()));
    }
    if computed.data().iter().any(|x| !x.is_finite()) {
        return Ok(f64::NAN);
    }
    Ok((diff / norm).sqrt())
}

/// Percentage of NAN or INF elements.
pub fn nan_stats(t: &Tensor4) -> f64 {
    if t.is_empty() {
        return 0.0;
    }
    let bad = t.data().iter().filter(|x| !x.is_finite()).count();
    100.0 * bad as f64 / t.len() as f64
}

/// FP64 value ranges of one (batch, head) before and after shifting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadRange {
    pub batch: usize,
    pub head: usize,
    pub k_before: (f64, f64),
    /// Range of KᵀM.
    pub k_after: (f64, f64),
    /// Range of QKᵀ/α.
    pub s_before: (f64, f64),
    /// Range of Q(KᵀM).
    pub s_after: (f64, f64),
    /// max |QKᵀ| before the static scale.
    pub max_abs_qk: f64,
}

fn widen(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    if [a.0, a.1, b.0, b.1].iter().any(|v| v.is_nan()) {
        return (f64::NAN, f64::NAN);
    }
    (a.0.min(b.0), a.1.max(b.1))
}

pub fn range_report(problem: &AttentionProblem, params: &PasaParams) -> Result<Vec<HeadRange>> {
    if params.s2 != problem.s2 {
        return Err(Error::Shape(format!(
            "shifting matrix for s2 = {} on a problem with s2 = {}",
            params.s2, problem.s2
        )));
    }
    let fp64 = Precision::Fp64;
    let m = params.m.to_precision(fp64);
    (0..problem.head_count())
        .into_par_iter()
        .map(|idx| {
            let (b, h) = problem.head_coords(idx);
            let q = problem.q.head(b, h, fp64);
            let k = problem.k.head(b, h, fp64);
            let s = gemm_with(&q, true, &k, fp64, fp64)?;
            let (lo, hi) = s.min_max();
            let mut k_after = (f64::INFINITY, f64::NEG_INFINITY);
            let mut s_after = k_after;
            for k_j in crate::attention::row_blocks(&k, params.s2) {
                let kp = gemm_with(&k_j.transpose(), false, &m, fp64, fp64)?;
                k_after = widen(k_after, kp.min_max());
                let sp = gemm_with(&q, false, &kp, fp64, fp64)?;
                s_after = widen(s_after, sp.min_max());
            }
            Ok(HeadRange {
                batch: b,
                head: h,
                k_before: k.min_max(),
                k_after,
                s_before: (lo / problem.alpha, hi / problem.alpha),
                s_after,
                max_abs_qk: lo.abs().max(hi.abs()),
            })
        })
        .collect()
}

/// Range over all heads.
pub fn overall_range(ranges: &[HeadRange], pick: impl Fn(&HeadRange) -> (f64, f64)) -> (f64, f64) {
    ranges
        .iter()
        .map(pick)
        .fold((f64::INFINITY, f64::NEG_INFINITY), widen)
}

/// Deserializes a float that JSON may carry as `null` (serde_json writes
/// NAN and INF that way) back to NAN.
pub fn nan_if_null<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// One policy evaluated on one generated workload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub policy: PolicyName,
    pub kind: DistributionKind,
    pub x0: f64,
    #[serde(rename = "Am")]
    pub am: f64,
    pub p: f64,
    pub seed: u64,
    #[serde(rename = "B")]
    pub b: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "S")]
    pub s: usize,
    pub d: usize,
    pub beta: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub rmse: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub nan_pct: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub s_min_before: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub s_max_before: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub s_min_after: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub s_max_after: f64,
    pub wall_s: f64,
    /// Set when the cell could not be evaluated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// CSV column order of [`RunReport`].
pub const CSV_HEADER: [&str; 18] = [
    "policy",
    "kind",
    "x0",
    "Am",
    "p",
    "seed",
    "B",
    "N",
    "S",
    "d",
    "beta",
    "rmse",
    "nan_pct",
    "s_min_before",
    "s_max_before",
    "s_min_after",
    "s_max_after",
    "wall_s",
];

impl RunReport {
    fn csv_record(&self) -> [String; 18] {
        [
            self.policy.to_string(),
            self.kind.as_str().to_string(),
            self.x0.to_string(),
            self.am.to_string(),
            self.p.to_string(),
            self.seed.to_string(),
            self.b.to_string(),
            self.n.to_string(),
            self.s.to_string(),
            self.d.to_string(),
            self.beta.to_string(),
            self.rmse.to_string(),
            self.nan_pct.to_string(),
            self.s_min_before.to_string(),
            self.s_max_before.to_string(),
            self.s_min_after.to_string(),
            self.s_max_after.to_string(),
            self.wall_s.to_string(),
        ]
    }

    pub fn is_finite_output(&self) -> bool {
        self.error.is_none() && self.nan_pct == 0.0
    }
}

pub fn write_csv<W: Write>(reports: &[RunReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in reports {
        w.write_record(r.csv_record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<RunReport>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// Settings shared by all cells of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub beta: f64,
    pub s1: usize,
    pub s2: usize,
    #[serde(default)]
    pub m0: M0Mode,
    /// Record wall-clock time per cell. Off by default so reports are
    /// reproducible byte for byte.
    #[serde(default)]
    pub timing: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            beta: crate::pasa::DEFAULT_BETA,
            s1: 128,
            s2: 128,
            m0: M0Mode::NegInf,
            timing: false,
        }
    }
}

/// Runs one policy on a problem.
pub fn run_policy(
    problem: &AttentionProblem,
    policy: &PrecisionPolicy,
    beta: f64,
    m0: M0Mode,
) -> Result<Tensor4> {
    match policy.name {
        PolicyName::PasaFp16 => {
            let params = PasaParams::for_problem(problem, beta, policy)?;
            let options = PasaOptions { m0, diagnose: false };
            Ok(pasa_attention_with(problem, &params, policy, options)?.0)
        }
        _ => flash_attention_with(problem, policy, m0),
    }
}

/// Evaluates every policy on every spec. Inputs for a spec are generated
/// once and shared by all its policies; failures are recorded per cell.
pub fn sweep(policies: &[PrecisionPolicy], specs: &[DistributionSpec], config: &SweepConfig) -> Vec<RunReport> {
    let cells: Vec<Vec<RunReport>> = specs
        .par_iter()
        .map(|spec| sweep_spec(policies, spec, config))
        .collect();
    cells.into_iter().flatten().collect()
}

fn sweep_spec(policies: &[PrecisionPolicy], spec: &DistributionSpec, config: &SweepConfig) -> Vec<RunReport> {
    let template = |policy: &PrecisionPolicy| RunReport {
        policy: policy.name,
        kind: spec.kind,
        x0: spec.x0,
        am: spec.am,
        p: spec.p,
        seed: spec.seed,
        b: spec.shape[0],
        n: spec.shape[1],
        s: spec.shape[2],
        d: spec.shape[3],
        beta: if policy.name.is_pasa() { config.beta } else { 0.0 },
        rmse: f64::NAN,
        nan_pct: f64::NAN,
        s_min_before: f64::NAN,
        s_max_before: f64::NAN,
        s_min_after: f64::NAN,
        s_max_after: f64::NAN,
        wall_s: 0.0,
        error: None,
    };
    let prepared = (|| -> Result<_> {
        let inputs = generate(spec)?;
        let problem = AttentionProblem::new(inputs.q, inputs.k, inputs.v, config.s1, config.s2)?;
        let golden = golden_attention(&problem)?;
        let params = PasaParams::new(config.beta, problem.alpha, config.s2, Precision::Fp16)?;
        let ranges = range_report(&problem, &params)?;
        Ok((problem, golden, ranges))
    })();
    let (problem, golden, ranges) = match prepared {
        Ok(p) => p,
        Err(e) => {
            return policies
                .iter()
                .map(|p| RunReport {
                    error: Some(e.to_string()),
                    ..template(p)
                })
                .collect()
        }
    };
    let before = overall_range(&ranges, |r| r.s_before);
    let after = overall_range(&ranges, |r| r.s_after);
    policies
        .iter()
        .map(|policy| {
            let mut report = template(policy);
            (report.s_min_before, report.s_max_before) = before;
            (report.s_min_after, report.s_max_after) = after;
            let start = Instant::now();
            let outcome = run_policy(&problem, policy, config.beta, config.m0).and_then(|out| {
                let nan_pct = nan_stats(&out);
                Ok((rmse(&out, &golden)?, nan_pct))
            });
            if config.timing {
                report.wall_s = start.elapsed().as_secs_f64();
            }
            match outcome {
                Ok((rmse, nan_pct)) => {
                    report.rmse = rmse;
                    report.nan_pct = nan_pct;
                }
                Err(e) => report.error = Some(e.to_string()),
            }
            report
        })
        .collect()
}

/// Named sweep grids.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Uniform inputs: Am = 0.5 with varying x0, then x0 = 20 with varying Am.
    PaperUniform,
    /// Hybrid inputs: Am = 10 with varying x0, then x0 = 20 with varying Am.
    PaperHybrid,
    /// Both of the above.
    Paper,
    /// The six rows of the NAN-percentage table.
    NanTable,
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper-uniform" => Ok(Preset::PaperUniform),
            "paper-hybrid" => Ok(Preset::PaperHybrid),
            "paper" => Ok(Preset::Paper),
            "nan-table" => Ok(Preset::NanTable),
            other => Err(format!("unknown preset {other:?}")),
        }
    }
}

impl Preset {
    pub fn specs(self, shape: [usize; 4], seed: u64) -> Vec<DistributionSpec> {
        let u = |x0, am| DistributionSpec::uniform(x0, am, seed, shape);
        let h = |x0, am| DistributionSpec::hybrid(x0, am, seed, shape);
        match self {
            Preset::PaperUniform => [0.0, 10.0, 20.0, 30.0]
                .into_iter()
                .map(|x0| u(x0, 0.5))
                .chain([1.0, 5.0, 10.0, 15.0, 20.0].into_iter().map(|am| u(20.0, am)))
                .collect(),
            Preset::PaperHybrid => [0.0, 10.0, 20.0, 30.0]
                .into_iter()
                .map(|x0| h(x0, 10.0))
                .chain([20.0, 50.0, 100.0].into_iter().map(|am| h(20.0, am)))
                .collect(),
            Preset::Paper => {
                let mut all = Preset::PaperUniform.specs(shape, seed);
                all.extend(Preset::PaperHybrid.specs(shape, seed));
                all
            }
            Preset::NanTable => vec![
                u(30.0, 0.5),
                u(20.0, 15.0),
                u(20.0, 20.0),
                h(30.0, 10.0),
                h(20.0, 50.0),
                h(20.0, 100.0),
            ],
        }
    }

    /// The three policies the reference sweeps compare.
    pub fn policies() -> Vec<PrecisionPolicy> {
        [PolicyName::FaFp32, PolicyName::FaPartialFp16, PolicyName::PasaFp16]
            .into_iter()
            .map(PrecisionPolicy::new)
            .collect()
    }
}
