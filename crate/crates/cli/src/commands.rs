//! Subcommand implementations. Each returns a [`Status`] or an error; the
//! binary maps them to exit codes.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use pasa_core::bench::{
    generate, nan_if_null, nan_stats, overall_range, range_report, read_csv, rmse, run_policy, sweep, write_csv,
    DistributionSpec, HeadRange, RunReport, SweepConfig,
};
use pasa_core::beta::{self, InvarianceReport};
use pasa_core::{
    golden_attention, pasa_attention_with, AttentionProblem, PasaOptions, PasaParams, PolicyName, Precision,
    RunDiagnostics, Tensor4,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{BetaKeyword, BetaSetting, ConfigError, ExperimentConfig, Workload};
use crate::npy::{self, NpyError};

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Npy(#[from] NpyError),
    #[error(transparent)]
    Core(#[from] pasa_core::Error),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CommandError + '_ {
    move |source| CommandError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Result of a command that ran to completion.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// Policies marked must-be-finite that produced NAN/INF or failed.
    NonFinite(Vec<PolicyName>),
}

/// Single-run result on file inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRunReport {
    pub policy: PolicyName,
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
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Ranges observed inside the shifting pipeline (diagnose mode, PASA only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<RunDiagnostics>,
}

impl FileRunReport {
    fn is_finite_output(&self) -> bool {
        self.error.is_none() && self.nan_pct == 0.0
    }
}

/// Range report of one generated workload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRanges {
    pub spec: DistributionSpec,
    pub heads: Vec<HeadRange>,
}

/// Everything an experiment produced, with the resolved config embedded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    /// β actually used by shifting policies.
    pub beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_solve: Option<InvarianceReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reports: Vec<RunReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub file_reports: Vec<FileRunReport>,
    /// Per-head FP64 ranges of file inputs (diagnose mode).
    #[serde(default, skip_serializing_if = "Vec::is_empty", skip_deserializing)]
    pub ranges: Vec<HeadRange>,
    /// Per-head FP64 ranges of each generated workload (diagnose mode).
    #[serde(default, skip_serializing_if = "Vec::is_empty", skip_deserializing)]
    pub cell_ranges: Vec<CellRanges>,
}

impl ExperimentReport {
    /// Policies in `required` with at least one non-finite or failed cell,
    /// in config order.
    pub fn non_finite(&self, required: &[PolicyName]) -> Vec<PolicyName> {
        let mut bad: Vec<PolicyName> = Vec::new();
        let rows = self
            .reports
            .iter()
            .map(|r| (r.policy, r.is_finite_output()))
            .chain(self.file_reports.iter().map(|r| (r.policy, r.is_finite_output())));
        for (policy, finite) in rows {
            if !finite && required.contains(&policy) && !bad.contains(&policy) {
                bad.push(policy);
            }
        }
        bad
    }

    fn status(&self) -> Status {
        let bad = self.non_finite(&self.config.must_be_finite);
        if bad.is_empty() {
            Status::Ok
        } else {
            Status::NonFinite(bad)
        }
    }
}

/// Shifting matrices are stored at FP16 by every shifting policy, so that is
/// the precision β is solved in.
const SOLVE_PRECISION: Precision = Precision::Fp16;

pub fn solve_beta(beta0: f64, n: usize, tol: f64, precision: Precision, json: bool) -> Result<Status, CommandError> {
    let report = beta::solve(beta0, n, tol, precision)?;
    let mut out = io::stdout().lock();
    let written = if json {
        serde_json::to_writer_pretty(&mut out, &report)
            .map_err(io::Error::from)
            .and_then(|_| writeln!(out))
    } else {
        writeln!(out, "β={:.6}", report.beta).and_then(|_| {
            writeln!(
                out,
                "n={} precision={} a={} b={} inva_ideal={:.6} inva_actual={:.6} rel_err={:.3e}",
                report.n, precision, report.a, report.b, report.inva_ideal, report.inva_actual, report.rel_err
            )
        })
    };
    written.map_err(io_err(Path::new("<stdout>")))?;
    Ok(Status::Ok)
}

/// Generates Q, K and V for one workload and writes `q.npy`, `k.npy`, `v.npy`.
pub fn gen(spec: &DistributionSpec, out_dir: &Path, as_f32: bool) -> Result<Status, CommandError> {
    let inputs = generate(spec)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut files = Vec::new();
    for (name, t) in [("q", &inputs.q), ("k", &inputs.k), ("v", &inputs.v)] {
        let path = out_dir.join(format!("{name}.npy"));
        npy::save_tensor_file(&path, t, as_f32)?;
        files.push(path);
    }
    let summary = serde_json::json!({
        "spec": spec,
        "outliers": inputs.outliers,
        "files": files,
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(Status::Ok)
}

/// Runs an experiment and writes its reports.
pub fn run(config: &ExperimentConfig) -> Result<Status, CommandError> {
    let report = execute(config)?;
    emit(&report)?;
    Ok(report.status())
}

/// Runs an experiment without writing anything.
pub fn execute(config: &ExperimentConfig) -> Result<ExperimentReport, CommandError> {
    let workload = config.validate()?;
    let (beta, beta_solve) = match config.beta {
        BetaSetting::Value(b) => (b, None),
        BetaSetting::Keyword(BetaKeyword::Solve) => {
            let r = beta::solve(config.beta0, config.solve_size(), config.tol, SOLVE_PRECISION)?;
            (r.beta, Some(r))
        }
    };
    let mut report = ExperimentReport {
        config: config.clone(),
        beta,
        beta_solve,
        reports: Vec::new(),
        file_reports: Vec::new(),
        ranges: Vec::new(),
        cell_ranges: Vec::new(),
    };
    match workload {
        Workload::Generated(specs) => {
            let sweep_config = SweepConfig {
                beta,
                s1: config.s1,
                s2: config.s2,
                m0: config.m0_mode,
                timing: config.timing,
            };
            report.reports = sweep(&config.precision_policies(), &specs, &sweep_config);
            if config.diagnose {
                report.cell_ranges = specs
                    .iter()
                    .map(|spec| {
                        let g = generate(spec)?;
                        let problem = AttentionProblem::new(g.q, g.k, g.v, config.s1, config.s2)?;
                        let params = PasaParams::new(beta, problem.alpha, config.s2, SOLVE_PRECISION)?;
                        Ok(CellRanges {
                            spec: spec.clone(),
                            heads: range_report(&problem, &params)?,
                        })
                    })
                    .collect::<Result<_, pasa_core::Error>>()?;
            }
        }
        Workload::Files(files) => {
            let load = |path: &Path, block: usize| -> Result<Tensor4, CommandError> {
                let t = npy::load_tensor_file(path, config.dtype)?;
                Ok(if config.truncate_seq { truncate_seq(&t, block) } else { t })
            };
            let q = load(&files.q, config.s1)?;
            let k = load(&files.k, config.s2)?;
            let v = load(&files.v, config.s2)?;
            if let Some(shape) = config.shape {
                if q.shape() != shape {
                    return Err(ConfigError(format!("Q has shape {:?}, config expects {shape:?}", q.shape())).into());
                }
            }
            if k.shape() != v.shape() || q.shape()[..2] != k.shape()[..2] || q.shape()[3] != k.shape()[3] {
                return Err(ConfigError(format!(
                    "inputs disagree: Q {:?}, K {:?}, V {:?}",
                    q.shape(),
                    k.shape(),
                    v.shape()
                ))
                .into());
            }
            let problem = AttentionProblem::new(q, k, v, config.s1, config.s2)?;
            let (file_reports, ranges) = run_files(&problem, config, beta)?;
            report.file_reports = file_reports;
            if config.diagnose {
                report.ranges = ranges;
            }
        }
    }
    Ok(report)
}

fn run_files(
    problem: &AttentionProblem,
    config: &ExperimentConfig,
    beta: f64,
) -> Result<(Vec<FileRunReport>, Vec<HeadRange>), CommandError> {
    let golden = golden_attention(problem)?;
    let params = PasaParams::new(beta, problem.alpha, problem.s2, SOLVE_PRECISION)?;
    let ranges = range_report(problem, &params)?;
    let before = overall_range(&ranges, |r| r.s_before);
    let after = overall_range(&ranges, |r| r.s_after);
    let [b, n, s, d] = problem.q.shape();
    let reports = config
        .precision_policies()
        .iter()
        .map(|policy| {
            let start = Instant::now();
            let outcome = if policy.name.is_pasa() && config.diagnose {
                PasaParams::for_problem(problem, beta, policy).and_then(|params| {
                    let options = PasaOptions {
                        m0: config.m0_mode,
                        diagnose: true,
                    };
                    pasa_attention_with(problem, &params, policy, options).map(|(o, diag)| (o, Some(diag)))
                })
            } else {
                run_policy(problem, policy, beta, config.m0_mode).map(|o| (o, None))
            };
            let wall_s = if config.timing { start.elapsed().as_secs_f64() } else { 0.0 };
            let mut row = FileRunReport {
                policy: policy.name,
                b,
                n,
                s,
                d,
                beta: if policy.name.is_pasa() { beta } else { 0.0 },
                rmse: f64::NAN,
                nan_pct: f64::NAN,
                s_min_before: before.0,
                s_max_before: before.1,
                s_min_after: after.0,
                s_max_after: after.1,
                wall_s,
                error: None,
                diagnostics: None,
            };
            match outcome.and_then(|(out, diag)| Ok((rmse(&out, &golden)?, nan_stats(&out), diag))) {
                Ok((e, pct, diag)) => {
                    row.rmse = e;
                    row.nan_pct = pct;
                    row.diagnostics = diag;
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            row
        })
        .collect();
    Ok((reports, ranges))
}

/// Keeps the leading `S - S % multiple` rows of every head.
fn truncate_seq(t: &Tensor4, multiple: usize) -> Tensor4 {
    let [b, h, s, d] = t.shape();
    let keep = s - s % multiple;
    if keep == s || keep == 0 {
        return t.clone();
    }
    let mut data = Vec::with_capacity(b * h * keep * d);
    for bi in 0..b {
        for hi in 0..h {
            data.extend_from_slice(&t.head_slice(bi, hi)[..keep * d]);
        }
    }
    Tensor4::new([b, h, keep, d], data).expect("truncated shape matches data")
}

const FILE_CSV_HEADER: [&str; 14] = [
    "policy",
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
    "error",
];

fn write_file_csv<W: Write>(rows: &[FileRunReport], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(FILE_CSV_HEADER)?;
    for r in rows {
        let nums = [
            r.beta,
            r.rmse,
            r.nan_pct,
            r.s_min_before,
            r.s_max_before,
            r.s_min_after,
            r.s_max_after,
            r.wall_s,
        ];
        let mut rec = vec![
            r.policy.to_string(),
            r.b.to_string(),
            r.n.to_string(),
            r.s.to_string(),
            r.d.to_string(),
        ];
        rec.extend(nums.iter().map(f64::to_string));
        rec.push(r.error.clone().unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// `<stem>.csv` and `<stem>.json` for an output path with or without one of
/// those extensions.
pub fn output_paths(output: &Path) -> (PathBuf, PathBuf) {
    let stem = match output.extension().and_then(|e| e.to_str()) {
        Some("csv" | "json") => output.with_extension(""),
        _ => output.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(".");
        s.push(ext);
        PathBuf::from(s)
    };
    (with("csv"), with("json"))
}

/// Writes CSV and JSON next to the configured output, or JSON to stdout.
fn emit(report: &ExperimentReport) -> Result<(), CommandError> {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    let Some(output) = &report.config.output else {
        println!("{json}");
        return Ok(());
    };
    let (csv_path, json_path) = output_paths(output);
    if let Some(dir) = csv_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file = File::create(&csv_path).map_err(io_err(&csv_path))?;
    let written = if report.file_reports.is_empty() {
        write_csv(&report.reports, BufWriter::new(file))
    } else {
        write_file_csv(&report.file_reports, BufWriter::new(file)).map_err(pasa_core::Error::from)
    };
    written?;
    fs::write(&json_path, json + "\n").map_err(io_err(&json_path))?;
    eprintln!("wrote {} and {}", csv_path.display(), json_path.display());
    Ok(())
}

/// Partial view of a JSON report for summarizing.
#[derive(Deserialize)]
struct SavedReport {
    #[serde(default)]
    config: Option<ExperimentConfig>,
    #[serde(default)]
    reports: Vec<RunReport>,
    #[serde(default)]
    file_reports: Vec<FileRunReport>,
}

/// Prints a summary table of a saved CSV or JSON report and applies the
/// must-be-finite gate (flags first, then the embedded config).
pub fn report(input: &Path, must_be_finite: &[PolicyName]) -> Result<Status, CommandError> {
    let text = fs::read(input).map_err(io_err(input))?;
    let is_json = input.extension().is_some_and(|e| e == "json");
    let saved = if is_json {
        serde_json::from_slice::<SavedReport>(&text)
            .map_err(|e| ConfigError(format!("{}: {e}", input.display())))?
    } else {
        SavedReport {
            config: None,
            reports: read_csv(text.as_slice())?,
            file_reports: Vec::new(),
        }
    };
    let required = if must_be_finite.is_empty() {
        saved.config.as_ref().map(|c| c.must_be_finite.clone()).unwrap_or_default()
    } else {
        must_be_finite.to_vec()
    };

    let mut out = io::stdout().lock();
    let mut print = || -> io::Result<()> {
        writeln!(
            out,
            "{:<16} {:<8} {:>7} {:>7} {:>12} {:>9}  range before -> after",
            "policy", "kind", "x0", "Am", "rmse", "nan_pct"
        )?;
        for r in &saved.reports {
            writeln!(
                out,
                "{:<16} {:<8} {:>7} {:>7} {:>12.4e} {:>8.3}%  [{:.4}, {:.4}] -> [{:.4}, {:.4}]{}",
                r.policy.as_str(),
                r.kind.as_str(),
                r.x0,
                r.am,
                r.rmse,
                r.nan_pct,
                r.s_min_before,
                r.s_max_before,
                r.s_min_after,
                r.s_max_after,
                r.error.as_ref().map(|e| format!("  error: {e}")).unwrap_or_default()
            )?;
        }
        for r in &saved.file_reports {
            writeln!(
                out,
                "{:<16} {:<8} {:>7} {:>7} {:>12.4e} {:>8.3}%  [{:.4}, {:.4}] -> [{:.4}, {:.4}]{}",
                r.policy.as_str(),
                "file",
                "-",
                "-",
                r.rmse,
                r.nan_pct,
                r.s_min_before,
                r.s_max_before,
                r.s_min_after,
                r.s_max_after,
                r.error.as_ref().map(|e| format!("  error: {e}")).unwrap_or_default()
            )?;
        }
        Ok(())
    };
    print().map_err(io_err(Path::new("<stdout>")))?;

    let view = ExperimentReport {
        config: ExperimentConfig::default(),
        beta: 0.0,
        beta_solve: None,
        reports: saved.reports,
        file_reports: saved.file_reports,
        ranges: Vec::new(),
        cell_ranges: Vec::new(),
    };
    let bad = view.non_finite(&required);
    Ok(if bad.is_empty() { Status::Ok } else { Status::NonFinite(bad) })
}
