//! Experiment harness: benchmark systems, run configurations, result files,
//! comparison tables and the oracle validation suite.

mod report;
pub mod validate;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gramian;
use crate::indicator::Normalization;
use crate::irka::IrkaOptions;
use crate::model::{scaled_index, DamperConfig, ExampleId, ModalSystem, SystemSpec};
use crate::optimize::{
    self, DriverOptions, Method, Mode, NelderMeadOptions, ObjectiveSpec, OptimizationReport, PositionObjective,
    TraceEntry,
};
use crate::subspace::Truncation;

pub use report::{compare, read_results, read_timings, Column, Comparison, Group};

/// Dimension used when a benchmark example is requested without `n`.
pub fn desk_dimension(example: ExampleId) -> usize {
    match example {
        ExampleId::Two => 103,
        _ => 100,
    }
}

pub fn full_dimension(example: ExampleId) -> usize {
    match example {
        ExampleId::Two => 901,
        _ => 1000,
    }
}

/// Everything needed to reproduce one optimization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub example: ExampleId,
    pub n: Option<usize>,
    /// System definition file; takes precedence over `example`.
    pub system_file: Option<PathBuf>,
    pub method: Method,
    pub mode: Mode,
    /// Initial positions `c₀` (1-based).
    pub positions: Option<Vec<usize>>,
    /// Initial gains `g₀`; fixed in positions mode.
    pub gains: Option<Vec<f64>>,
    pub tol_opt: f64,
    pub tol_err1: f64,
    pub tol_err2: Option<f64>,
    pub truncation: Truncation,
    pub irka_order: Option<usize>,
    pub irka_max_iter: usize,
    pub normalization: Normalization,
    pub position_objective: Option<PositionObjective>,
    pub max_eval: usize,
    pub max_outer: usize,
    /// Recorded with the results and used for the random instances of the
    /// validation suite. The drivers themselves draw no random numbers.
    pub seed: u64,
    /// Output file stem; `None` writes nothing.
    pub output: Option<PathBuf>,
    /// Use the full benchmark dimensions when `n` is unset.
    pub full_scale: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = DriverOptions::default();
        Self {
            example: ExampleId::One,
            n: None,
            system_file: None,
            method: Method::Full,
            mode: Mode::Positions,
            positions: None,
            gains: None,
            tol_opt: d.nm.tol,
            tol_err1: d.tol_err1,
            tol_err2: None,
            truncation: d.truncation,
            irka_order: None,
            irka_max_iter: d.irka.max_iter,
            normalization: d.normalization,
            position_objective: None,
            max_eval: d.nm.max_eval,
            max_outer: d.max_outer,
            seed: 0,
            output: None,
            full_scale: false,
        }
    }
}

/// A resolved configuration with the system assembled.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub label: String,
    pub sys: ModalSystem,
    pub cfg0: DamperConfig,
    pub spec: ObjectiveSpec,
    pub opts: DriverOptions,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    fn system_spec(&self) -> Result<(SystemSpec, PathBuf, String)> {
        if let Some(path) = &self.system_file {
            let (mut spec, base) = SystemSpec::load(path)?;
            if self.n.is_some() {
                spec.n = self.n;
            }
            let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            return Ok((spec, base, label));
        }
        if self.example == ExampleId::Custom {
            return Err(Error::InvalidConfig("a custom system needs a system file".into()));
        }
        let n = self.n.unwrap_or(if self.full_scale {
            full_dimension(self.example)
        } else {
            desk_dimension(self.example)
        });
        let id = if self.example == ExampleId::Two { 2 } else { 1 };
        Ok((SystemSpec::example(self.example, n), PathBuf::new(), format!("example-{id}")))
    }

    /// Check the configuration and build the system.
    pub fn prepare(&self) -> Result<Prepared> {
        for (name, v) in [("tol_opt", self.tol_opt), ("tol_err1", self.tol_err1)]
            .into_iter()
            .chain(self.tol_err2.map(|t| ("tol_err2", t)))
        {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        let (Truncation::EigenRelative(t) | Truncation::TraceFraction(t)) = self.truncation;
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::InvalidConfig(format!("truncation tolerance must be positive, got {t}")));
        }
        if self.max_eval == 0 || self.max_outer == 0 || self.irka_max_iter == 0 {
            return Err(Error::InvalidConfig("iteration caps must be at least 1".into()));
        }
        let (spec, base, label) = self.system_spec()?;
        if let Some(n) = spec.n {
            if n < 2 {
                return Err(Error::InvalidConfig(format!("system dimension must be at least 2, got {n}")));
            }
        }
        let sys = spec.build(&base)?.to_modal()?;
        let n = sys.n();
        let label = format!("{label} n={n}");

        let positions = match &self.positions {
            Some(p) => p.clone(),
            None => default_positions(spec.example, n, spec.default_damper_count())?,
        };
        let gains = match &self.gains {
            Some(g) => g.clone(),
            None => vec![1000.0; positions.len()],
        };
        if gains.len() != positions.len() {
            return Err(Error::InvalidConfig(format!(
                "{} positions but {} gains",
                positions.len(),
                gains.len()
            )));
        }
        let (lo, hi) = spec.gain_bounds();
        let cfg0 = DamperConfig::new(positions, gains).with_bounds(lo, hi);
        cfg0.validate(n)?;

        let mut ospec = ObjectiveSpec::new(self.mode);
        if let Some(p) = self.position_objective {
            ospec = ospec.with_position_objective(p);
        }
        ospec.validate(cfg0.len())?;

        let opts = DriverOptions {
            nm: NelderMeadOptions {
                tol: self.tol_opt,
                max_eval: self.max_eval,
            },
            tol_err1: self.tol_err1,
            tol_err2: self.tol_err2.unwrap_or(default_tol_err2(spec.example)),
            normalization: self.normalization,
            truncation: self.truncation,
            irka: IrkaOptions {
                r: self.irka_order.unwrap_or_else(|| default_irka_order(n)),
                max_iter: self.irka_max_iter,
                ..IrkaOptions::default()
            },
            max_outer: self.max_outer,
        };
        if opts.irka.r == 0 || opts.irka.r > n {
            return Err(Error::InvalidConfig(format!("IRKA order must lie in [1, {n}]")));
        }
        Ok(Prepared {
            label,
            sys,
            cfg0,
            spec: ospec,
            opts,
        })
    }
}

/// Benchmark starting positions `[50, 90]` (example 1, `n = 1000`) and
/// `[100, 300, 500]` (example 2, `n = 901`), scaled to `n`. Custom systems
/// spread the dampers evenly.
pub fn default_positions(example: ExampleId, n: usize, count: usize) -> Result<Vec<usize>> {
    let p: Vec<usize> = match example {
        ExampleId::One => [50.0, 90.0].iter().map(|c| scaled_index(c / 1000.0, n)).collect(),
        ExampleId::Two => [100.0, 300.0, 500.0].iter().map(|c| scaled_index(c / 901.0, n)).collect(),
        ExampleId::Custom => (1..=count).map(|i| scaled_index(i as f64 / (count + 1) as f64, n)).collect(),
    };
    let mut q = p.clone();
    q.sort_unstable();
    q.dedup();
    if q.len() != p.len() {
        return Err(Error::InvalidConfig(format!(
            "n = {n} is too small for distinct default positions; pass them explicitly"
        )));
    }
    Ok(p)
}

pub fn default_tol_err2(example: ExampleId) -> f64 {
    match example {
        ExampleId::Two => 1e-1,
        _ => 1e-4,
    }
}

/// IRKA order for `V_H` enrichments: a tenth of `n`, capped at 30.
pub fn default_irka_order(n: usize) -> usize {
    (n / 10).clamp(1, 30).min(n)
}

/// Deterministic part of a run: everything except wall-clock times.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub system: String,
    pub n: usize,
    pub method: Method,
    pub mode: Mode,
    pub positions: Vec<usize>,
    pub gains: Vec<f64>,
    /// Objective value seen by the optimizer at its minimizer.
    pub objective: f64,
    /// Full-order response at the returned configuration.
    pub full_response: f64,
    pub dim: usize,
    pub runs: usize,
    pub enrichments: usize,
    pub full_solves: usize,
    pub reduced_solves: usize,
    pub indicator_solves: usize,
    pub termination: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub system: String,
    pub method: Method,
    pub mode: Mode,
    /// Seconds spent building bases.
    pub basis: f64,
    /// Seconds spent optimizing.
    pub optimization: f64,
}

impl Timing {
    pub fn total(&self) -> f64 {
        self.basis + self.optimization
    }
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub summary: RunSummary,
    pub timing: Timing,
    pub report: OptimizationReport,
}

/// A failed run with whatever trace was recorded before the failure.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub trace: Vec<TraceEntry>,
}

impl From<Error> for RunFailure {
    fn from(error: Error) -> Self {
        Self {
            error,
            trace: Vec::new(),
        }
    }
}

/// Run one configuration. Timing excludes system construction.
pub fn run(cfg: &RunConfig) -> std::result::Result<RunRecord, RunFailure> {
    let p = cfg.prepare()?;
    run_prepared(&p, cfg.method, cfg.seed)
}

pub fn run_prepared(p: &Prepared, method: Method, seed: u64) -> std::result::Result<RunRecord, RunFailure> {
    let report = optimize::optimize_traced(&p.sys, &p.cfg0, &p.spec, method, &p.opts).map_err(|f| RunFailure {
        error: f.error,
        trace: f.trace,
    })?;
    let mut star = DamperConfig::new(report.positions.clone(), report.gains.clone());
    star.gain_bounds = p.cfg0.gain_bounds.clone();
    let full_response = gramian::system_response(&p.sys, &star)?;
    let summary = RunSummary {
        system: p.label.clone(),
        n: p.sys.n(),
        method,
        mode: p.spec.mode,
        positions: report.positions.clone(),
        gains: report.gains.clone(),
        objective: report.objective,
        full_response,
        dim: report.dim,
        runs: report.runs,
        enrichments: report.enrichments.len(),
        full_solves: report.solves.full,
        reduced_solves: report.solves.reduced,
        indicator_solves: report.solves.indicator,
        termination: report.termination.as_str().to_string(),
        seed,
    };
    let timing = Timing {
        system: p.label.clone(),
        method,
        mode: p.spec.mode,
        basis: report.timings.basis.as_secs_f64(),
        optimization: report.timings.optimization.as_secs_f64(),
    };
    Ok(RunRecord {
        summary,
        timing,
        report,
    })
}

/// Files written for an output stem.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputPaths {
    pub results: PathBuf,
    pub timings: PathBuf,
    pub trace: PathBuf,
    pub deltas: PathBuf,
    pub table: PathBuf,
}

impl OutputPaths {
    pub fn for_stem(stem: &Path) -> Self {
        let with = |ext: &str| {
            let mut s = stem.as_os_str().to_owned();
            s.push(ext);
            PathBuf::from(s)
        };
        Self {
            results: with(".results.csv"),
            timings: with(".timings.csv"),
            trace: with(".trace.csv"),
            deltas: with(".deltas.csv"),
            table: with(".table.txt"),
        }
    }
}

/// Write results, timings, trace, indicator log and the human-readable
/// table for one run.
fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

pub fn write_outputs(stem: &Path, rec: &RunRecord) -> Result<OutputPaths> {
    let paths = OutputPaths::for_stem(stem);
    ensure_parent(&paths.results)?;
    report::write_results(&paths.results, std::slice::from_ref(&rec.summary))?;
    report::write_timings(&paths.timings, std::slice::from_ref(&rec.timing))?;
    report::write_trace(&paths.trace, &rec.report.trace)?;
    if rec.summary.method.uses_indicator() {
        report::write_deltas(&paths.deltas, &rec.report.deltas)?;
    }
    std::fs::write(&paths.table, single_table(rec))?;
    Ok(paths)
}

pub fn write_partial_trace(stem: &Path, trace: &[TraceEntry]) -> Result<PathBuf> {
    let path = OutputPaths::for_stem(stem).trace;
    ensure_parent(&path)?;
    report::write_trace(&path, trace)?;
    Ok(path)
}

/// Table for a single run: errors and acceleration need a baseline and
/// show as `-`.
pub fn single_table(rec: &RunRecord) -> String {
    let mut c = compare(&[(rec.summary.clone(), Some(rec.timing.clone()))]);
    for g in &mut c.groups {
        g.notice = None;
    }
    c.render()
}

/// Run independent configurations on worker threads; results keep the
/// input order.
pub fn run_batch(cfgs: &[RunConfig]) -> Vec<std::result::Result<RunRecord, RunFailure>> {
    crate::par::map(cfgs, run)
}

/// Batch file: a list of `[[run]]` tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchFile {
    pub run: Vec<RunConfig>,
}

impl BatchFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}
