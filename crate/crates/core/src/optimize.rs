//! Nelder–Mead, objective wrappers for grid positions, and the optimization
//! drivers: full order, reduced basis with consecutive-optima stopping, and
//! reduced basis guarded by the trace error indicator.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gramian;
use crate::indicator::{IndicatorContext, Normalization};
use crate::irka::{self, IrkaOptions};
use crate::model::{DamperConfig, ModalSystem};
use crate::par;
use crate::subspace::{self, EnrichmentEvent, OrthoBasis, ProjectedSystem, Truncation};

// ---------------------------------------------------------------------------
// Nelder–Mead

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NelderMeadOptions {
    /// Tolerance on both the function-value spread and the simplex diameter.
    pub tol: f64,
    pub max_eval: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            tol: 1e-3,
            max_eval: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmStep {
    pub iteration: usize,
    pub evaluations: usize,
    pub best_f: f64,
    pub best_x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    /// `false` when `max_eval` was exhausted.
    pub converged: bool,
    pub trace: Vec<NmStep>,
}

/// Early exit requested by the objective. `best_x` is the best point
/// evaluated successfully before the exit, if any.
#[derive(Debug)]
pub struct NmAbort<E> {
    pub error: E,
    pub best_x: Option<Vec<f64>>,
    pub best_f: f64,
    pub evaluations: usize,
    pub trace: Vec<NmStep>,
}

struct Tracker<'f, E> {
    f: &'f mut dyn FnMut(&[f64]) -> std::result::Result<f64, E>,
    evaluations: usize,
    best: Option<(Vec<f64>, f64)>,
}

impl<E> Tracker<'_, E> {
    fn eval(&mut self, x: &[f64]) -> std::result::Result<f64, E> {
        self.evaluations += 1;
        let v = (self.f)(x)?;
        if self.best.as_ref().is_none_or(|(_, b)| v < *b) {
            self.best = Some((x.to_vec(), v));
        }
        Ok(v)
    }
}

fn affine(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    // a + t (b − a)
    a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect()
}

/// Simplex search with reflection 1, expansion 2, contraction 1/2 and
/// shrink 1/2. Stops when both the function-value spread and the simplex
/// diameter (max norm) are at most `tol`; an initial simplex with zero
/// spread stops immediately at `x0`.
pub fn nelder_mead<E>(
    mut f: impl FnMut(&[f64]) -> std::result::Result<f64, E>,
    x0: &[f64],
    opts: NelderMeadOptions,
) -> std::result::Result<NmResult, NmAbort<E>> {
    let n = x0.len();
    let mut tr = Tracker {
        f: &mut f,
        evaluations: 0,
        best: None,
    };
    let mut trace = Vec::new();
    macro_rules! eval {
        ($x:expr) => {
            match tr.eval($x) {
                Ok(v) => v,
                Err(error) => {
                    let (best_x, best_f) = match tr.best.take() {
                        Some((x, v)) => (Some(x), v),
                        None => (None, f64::INFINITY),
                    };
                    return Err(NmAbort {
                        error,
                        best_x,
                        best_f,
                        evaluations: tr.evaluations,
                        trace,
                    });
                }
            }
        };
    }

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let f0 = eval!(x0);
    simplex.push((x0.to_vec(), f0));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] = if x[i] != 0.0 { 1.05 * x[i] } else { 0.00025 };
        let v = eval!(&x);
        simplex.push((x, v));
    }
    let sort = |s: &mut Vec<(Vec<f64>, f64)>| s.sort_by(|a, b| a.1.total_cmp(&b.1));
    sort(&mut simplex);
    if simplex.iter().all(|(_, v)| *v == f0) {
        return Ok(NmResult {
            x: x0.to_vec(),
            f: f0,
            iterations: 0,
            evaluations: tr.evaluations,
            converged: true,
            trace: vec![NmStep {
                iteration: 0,
                evaluations: tr.evaluations,
                best_f: f0,
                best_x: x0.to_vec(),
            }],
        });
    }
    let mut iteration = 0;
    loop {
        trace.push(NmStep {
            iteration,
            evaluations: tr.evaluations,
            best_f: simplex[0].1,
            best_x: simplex[0].0.clone(),
        });
        let (xb, fb) = (&simplex[0].0, simplex[0].1);
        let spread = simplex.iter().map(|(_, v)| (v - fb).abs()).fold(0.0, f64::max);
        let diameter = simplex
            .iter()
            .map(|(x, _)| x.iter().zip(xb).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if spread <= opts.tol && diameter <= opts.tol {
            return Ok(NmResult {
                x: simplex[0].0.clone(),
                f: fb,
                iterations: iteration,
                evaluations: tr.evaluations,
                converged: true,
                trace,
            });
        }
        if tr.evaluations >= opts.max_eval {
            return Ok(NmResult {
                x: simplex[0].0.clone(),
                f: fb,
                iterations: iteration,
                evaluations: tr.evaluations,
                converged: false,
                trace,
            });
        }
        iteration += 1;

        let mut centroid = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(x) {
                *c += v / n as f64;
            }
        }
        let worst = simplex[n].clone();
        let xr = affine(&centroid, &worst.0, -1.0);
        let fr = eval!(&xr);
        if fr < simplex[0].1 {
            let xe = affine(&centroid, &worst.0, -2.0);
            let fe = eval!(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let mut shrink = true;
            if fr < worst.1 {
                let xc = affine(&centroid, &xr, 0.5);
                let fc = eval!(&xc);
                if fc <= fr {
                    simplex[n] = (xc, fc);
                    shrink = false;
                }
            } else {
                let xcc = affine(&centroid, &worst.0, 0.5);
                let fcc = eval!(&xcc);
                if fcc < worst.1 {
                    simplex[n] = (xcc, fcc);
                    shrink = false;
                }
            }
            if shrink {
                let best = simplex[0].0.clone();
                for i in 1..=n {
                    let x = affine(&best, &simplex[i].0, 0.5);
                    let v = eval!(&x);
                    simplex[i] = (x, v);
                }
            }
        }
        sort(&mut simplex);
    }
}

// ---------------------------------------------------------------------------
// Objectives

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "positions")]
    Positions,
    #[serde(rename = "positions+gains")]
    PositionsAndGains,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Positions => "positions",
            Mode::PositionsAndGains => "positions+gains",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Mode::Positions, Mode::PositionsAndGains]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionObjective {
    /// `J([c], g)` with half-up rounding.
    Rounded,
    /// Multilinear blend of `J` over the `2^ℓ` surrounding grid points.
    Interpolated,
}

pub const DEFAULT_CORNER_CAP: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub mode: Mode,
    pub position_objective: PositionObjective,
    /// Upper bound on `ℓ` for the interpolated objective.
    pub corner_cap: usize,
}

impl ObjectiveSpec {
    /// Interpolated positions when only positions move, rounded otherwise.
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            position_objective: match mode {
                Mode::Positions => PositionObjective::Interpolated,
                Mode::PositionsAndGains => PositionObjective::Rounded,
            },
            corner_cap: DEFAULT_CORNER_CAP,
        }
    }

    pub fn with_position_objective(mut self, p: PositionObjective) -> Self {
        self.position_objective = p;
        self
    }

    pub fn validate(&self, dampers: usize) -> Result<()> {
        if self.position_objective == PositionObjective::Interpolated && dampers > self.corner_cap {
            return Err(Error::InvalidParameter(format!(
                "interpolated objective needs 2^{dampers} evaluations per call, cap is {}",
                self.corner_cap
            )));
        }
        Ok(())
    }
}

/// Round half-up, clamp to `[1, n]` and move collisions to the nearest free
/// index (the lower one on ties).
pub fn round_positions(c: &[f64], n: usize) -> Vec<usize> {
    let ints: Vec<i64> = c.iter().map(|x| (x + 0.5).floor() as i64).collect();
    dedup_positions(&ints, n)
}

fn dedup_positions(ints: &[i64], n: usize) -> Vec<usize> {
    let n = n as i64;
    let mut out: Vec<usize> = Vec::with_capacity(ints.len());
    for &p in ints {
        let p = p.clamp(1, n);
        let free = |q: i64, out: &[usize]| q >= 1 && q <= n && !out.contains(&(q as usize));
        let mut chosen = p;
        if !free(p, &out) {
            for d in 1..n {
                if free(p - d, &out) {
                    chosen = p - d;
                    break;
                }
                if free(p + d, &out) {
                    chosen = p + d;
                    break;
                }
            }
        }
        out.push(chosen as usize);
    }
    out
}

/// Something that maps a damper configuration to a system response.
pub trait ResponseModel: Sync {
    fn response(&self, sys: &ModalSystem, cfg: &DamperConfig) -> Result<f64>;
    fn is_reduced(&self) -> bool;
}

pub struct FullModel;

impl ResponseModel for FullModel {
    fn response(&self, sys: &ModalSystem, cfg: &DamperConfig) -> Result<f64> {
        gramian::system_response(sys, cfg)
    }

    fn is_reduced(&self) -> bool {
        false
    }
}

impl ResponseModel for ProjectedSystem {
    fn response(&self, sys: &ModalSystem, cfg: &DamperConfig) -> Result<f64> {
        ProjectedSystem::response(self, sys, cfg)
    }

    fn is_reduced(&self) -> bool {
        true
    }
}

/// Threshold check of the relative indicator before every evaluation.
pub struct Guard<'a> {
    pub ctx: &'a IndicatorContext,
    pub tol: f64,
    pub normalization: Normalization,
}

/// Reason an objective evaluation stopped the optimizer.
#[derive(Debug)]
pub enum Stop {
    /// The indicator at `positions` reached the threshold.
    Triggered {
        positions: Vec<usize>,
        gains: Vec<f64>,
        relative: f64,
    },
    Failed(Error),
}

impl From<Error> for Stop {
    fn from(e: Error) -> Self {
        Stop::Failed(e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRecord {
    pub positions: Vec<usize>,
    pub delta: f64,
    pub relative: f64,
    pub triggered: bool,
}

#[derive(Debug, Default)]
struct Counters {
    full: AtomicUsize,
    reduced: AtomicUsize,
    indicator: AtomicUsize,
}

/// Objective over the optimizer's variables: positions (continuous) and,
/// in joint mode, the logarithms of the gains.
pub struct Objective<'a> {
    sys: &'a ModalSystem,
    spec: &'a ObjectiveSpec,
    model: &'a dyn ResponseModel,
    guard: Option<Guard<'a>>,
    fixed_gains: Vec<f64>,
    bounds: Vec<(f64, f64)>,
    cache: Mutex<HashMap<(Vec<usize>, Vec<u64>), f64>>,
    deltas: Mutex<HashMap<Vec<usize>, (f64, f64)>>,
    delta_log: Mutex<Vec<DeltaRecord>>,
    clamps: AtomicUsize,
    counters: Counters,
}

impl<'a> Objective<'a> {
    pub fn new(
        sys: &'a ModalSystem,
        spec: &'a ObjectiveSpec,
        cfg0: &DamperConfig,
        model: &'a dyn ResponseModel,
        guard: Option<Guard<'a>>,
    ) -> Result<Self> {
        cfg0.validate(sys.n())?;
        spec.validate(cfg0.len())?;
        Ok(Self {
            sys,
            spec,
            model,
            guard,
            fixed_gains: cfg0.gains.clone(),
            bounds: cfg0.gain_bounds.clone(),
            cache: Mutex::new(HashMap::new()),
            deltas: Mutex::new(HashMap::new()),
            delta_log: Mutex::new(Vec::new()),
            clamps: AtomicUsize::new(0),
            counters: Counters::default(),
        })
    }

    fn dampers(&self) -> usize {
        self.fixed_gains.len()
    }

    /// Starting point in optimizer variables.
    pub fn encode(&self, cfg: &DamperConfig) -> Vec<f64> {
        let mut x: Vec<f64> = cfg.positions.iter().map(|&p| p as f64).collect();
        if self.spec.mode == Mode::PositionsAndGains {
            x.extend(cfg.gains.iter().map(|g| g.ln()));
        }
        x
    }

    /// Gains for optimizer variables, clamped to their bounds.
    pub fn gains_of(&self, x: &[f64]) -> Vec<f64> {
        match self.spec.mode {
            Mode::Positions => self.fixed_gains.clone(),
            Mode::PositionsAndGains => x[self.dampers()..]
                .iter()
                .zip(&self.bounds)
                .map(|(v, &(lo, hi))| v.exp().clamp(lo, hi))
                .collect(),
        }
    }

    /// Grid configuration represented by optimizer variables.
    pub fn decode(&self, x: &[f64]) -> DamperConfig {
        let l = self.dampers();
        let mut cfg = DamperConfig::new(round_positions(&x[..l], self.sys.n()), self.gains_of(x));
        cfg.gain_bounds = self.bounds.clone();
        cfg
    }

    fn check(&self, positions: &[usize], gains: &[f64]) -> std::result::Result<(), Stop> {
        let Some(guard) = &self.guard else {
            return Ok(());
        };
        if let Some(&(_, rel)) = self.deltas.lock().unwrap().get(positions) {
            return if rel < guard.tol {
                Ok(())
            } else {
                Err(Stop::Triggered {
                    positions: positions.to_vec(),
                    gains: gains.to_vec(),
                    relative: rel,
                })
            };
        }
        self.counters.indicator.fetch_add(1, Ordering::Relaxed);
        let ind = guard.ctx.evaluate(self.sys, positions, guard.normalization)?;
        let triggered = !(ind.relative.abs() < guard.tol);
        self.deltas
            .lock()
            .unwrap()
            .insert(positions.to_vec(), (ind.delta, ind.relative));
        self.delta_log.lock().unwrap().push(DeltaRecord {
            positions: positions.to_vec(),
            delta: ind.delta,
            relative: ind.relative,
            triggered,
        });
        if triggered {
            Err(Stop::Triggered {
                positions: positions.to_vec(),
                gains: gains.to_vec(),
                relative: ind.relative,
            })
        } else {
            Ok(())
        }
    }

    /// `J` (or `J_r`) at a grid configuration, cached.
    pub fn at_grid(&self, positions: &[usize], gains: &[f64]) -> Result<f64> {
        let key = (positions.to_vec(), gains.iter().map(|g| g.to_bits()).collect::<Vec<_>>());
        if let Some(&v) = self.cache.lock().unwrap().get(&key) {
            return Ok(v);
        }
        let mut cfg = DamperConfig::new(positions.to_vec(), gains.to_vec());
        cfg.gain_bounds = self.bounds.clone();
        let v = self.model.response(self.sys, &cfg)?;
        if self.model.is_reduced() {
            self.counters.reduced.fetch_add(1, Ordering::Relaxed);
        } else {
            self.counters.full.fetch_add(1, Ordering::Relaxed);
        }
        self.cache.lock().unwrap().insert(key, v);
        Ok(v)
    }

    /// Rounded objective `J([c], g)`.
    pub fn rounded(&self, x: &[f64]) -> std::result::Result<f64, Stop> {
        let cfg = self.decode(x);
        self.check(&cfg.positions, &cfg.gains)?;
        Ok(self.at_grid(&cfg.positions, &cfg.gains)?)
    }

    /// Multilinear interpolation over the grid cell containing `c`;
    /// coordinates outside `[1, n−1]` are clamped.
    pub fn interpolated(&self, x: &[f64]) -> std::result::Result<f64, Stop> {
        let l = self.dampers();
        let n = self.sys.n();
        let gains = self.gains_of(x);
        let hi = (n - 1) as f64;
        let mut base = Vec::with_capacity(l);
        let mut frac = Vec::with_capacity(l);
        for &c in &x[..l] {
            let cc = if c.is_nan() { 1.0 } else { c.clamp(1.0, hi) };
            if cc != c {
                self.clamps.fetch_add(1, Ordering::Relaxed);
            }
            let fl = cc.floor().min(hi - 1.0).max(1.0);
            let fl = if n == 2 { 1.0 } else { fl };
            let t = cc - fl;
            base.push(fl as i64);
            frac.push(t);
        }
        let mut corners: Vec<(Vec<usize>, f64)> = Vec::new();
        for mask in 0..(1usize << l) {
            let mut w = 1.0;
            let mut pos = Vec::with_capacity(l);
            for j in 0..l {
                let up = mask >> j & 1 == 1;
                w *= if up { frac[j] } else { 1.0 - frac[j] };
                pos.push(base[j] + up as i64);
            }
            if w > 0.0 {
                corners.push((dedup_positions(&pos, n), w));
            }
        }
        for (pos, _) in &corners {
            self.check(pos, &gains)?;
        }
        let values = par::try_map(&corners, |(pos, _)| self.at_grid(pos, &gains))?;
        Ok(corners.iter().zip(values).map(|((_, w), v)| w * v).sum())
    }

    pub fn eval(&self, x: &[f64]) -> std::result::Result<f64, Stop> {
        match self.spec.position_objective {
            PositionObjective::Rounded => self.rounded(x),
            PositionObjective::Interpolated => self.interpolated(x),
        }
    }

    pub fn solves(&self) -> SolveCounts {
        SolveCounts {
            full: self.counters.full.load(Ordering::Relaxed),
            reduced: self.counters.reduced.load(Ordering::Relaxed),
            indicator: self.counters.indicator.load(Ordering::Relaxed),
        }
    }

    pub fn take_delta_log(&self) -> Vec<DeltaRecord> {
        std::mem::take(&mut self.delta_log.lock().unwrap())
    }

    pub fn clamp_count(&self) -> usize {
        self.clamps.load(Ordering::Relaxed)
    }
}

// ---------------------------------------------------------------------------
// Drivers

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Enrichment {
    Vf,
    Vh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Full,
    Vf,
    VfDelta,
    Vh,
    VhDelta,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Full, Method::Vf, Method::VfDelta, Method::Vh, Method::VhDelta];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::Vf => "vf",
            Method::VfDelta => "vf-delta",
            Method::Vh => "vh",
            Method::VhDelta => "vh-delta",
        }
    }

    pub fn enrichment(&self) -> Option<Enrichment> {
        match self {
            Method::Full => None,
            Method::Vf | Method::VfDelta => Some(Enrichment::Vf),
            Method::Vh | Method::VhDelta => Some(Enrichment::Vh),
        }
    }

    pub fn uses_indicator(&self) -> bool {
        matches!(self, Method::VfDelta | Method::VhDelta)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverOptions {
    pub nm: NelderMeadOptions,
    /// Consecutive-minimizer tolerance of the outer loop.
    pub tol_err1: f64,
    /// Threshold on the relative indicator.
    pub tol_err2: f64,
    pub normalization: Normalization,
    /// Truncation of the Gramian factors behind `V₀` and `V_F`.
    pub truncation: Truncation,
    pub irka: IrkaOptions,
    /// Cap on outer iterations (enrichments).
    pub max_outer: usize,
}

impl Default for DriverOptions {
    fn default() -> Self {
        Self {
            nm: NelderMeadOptions::default(),
            tol_err1: 1e-2,
            tol_err2: 1e-4,
            normalization: Normalization::default(),
            truncation: Truncation::default(),
            irka: IrkaOptions::default(),
            max_outer: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    OptConverged,
    OuterConverged,
    DeltaTriggered,
    MaxIter,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::OptConverged => "opt-converged",
            Termination::OuterConverged => "outer-converged",
            Termination::DeltaTriggered => "delta-triggered",
            Termination::MaxIter => "max-iter",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolveCounts {
    /// Full-order Lyapunov solves.
    pub full: usize,
    /// Reduced-order Lyapunov solves for `J_r`.
    pub reduced: usize,
    /// Reduced Lyapunov solves for the indicator.
    pub indicator: usize,
}

impl std::ops::AddAssign for SolveCounts {
    fn add_assign(&mut self, o: Self) {
        self.full += o.full;
        self.reduced += o.reduced;
        self.indicator += o.indicator;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// Inner optimization run this step belongs to.
    pub run: usize,
    pub iteration: usize,
    pub evaluations: usize,
    pub best_f: f64,
    pub best_x: Vec<f64>,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub basis: Duration,
    pub optimization: Duration,
}

impl Timings {
    pub fn total(&self) -> Duration {
        self.basis + self.optimization
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub method: Method,
    pub mode: Mode,
    pub positions: Vec<usize>,
    pub gains: Vec<f64>,
    /// Objective at the minimizer (reduced response for reduced methods).
    pub objective: f64,
    /// Final basis dimension (`n` for the full driver).
    pub dim: usize,
    pub runs: usize,
    pub trace: Vec<TraceEntry>,
    pub enrichments: Vec<EnrichmentEvent>,
    pub deltas: Vec<DeltaRecord>,
    pub solves: SolveCounts,
    pub timings: Timings,
    pub termination: Termination,
    pub warnings: Vec<String>,
}

struct RunOutcome {
    x: Vec<f64>,
    f: f64,
    converged: bool,
}

struct Collector {
    trace: Vec<TraceEntry>,
    deltas: Vec<DeltaRecord>,
    solves: SolveCounts,
    clamps: usize,
    runs: usize,
}

impl Collector {
    fn new() -> Self {
        Self {
            trace: Vec::new(),
            deltas: Vec::new(),
            solves: SolveCounts::default(),
            clamps: 0,
            runs: 0,
        }
    }

    fn absorb(&mut self, obj: &Objective, steps: Vec<NmStep>, dim: usize) {
        let run = self.runs;
        self.runs += 1;
        self.trace.extend(steps.into_iter().map(|s| TraceEntry {
            run,
            iteration: s.iteration,
            evaluations: s.evaluations,
            best_f: s.best_f,
            best_x: s.best_x,
            dim,
        }));
        self.deltas.extend(obj.take_delta_log());
        self.solves += obj.solves();
        self.clamps += obj.clamp_count();
    }

    fn warnings(&self) -> Vec<String> {
        if self.clamps > 0 {
            vec![format!("{} position coordinates clamped into the grid", self.clamps)]
        } else {
            Vec::new()
        }
    }
}

/// One unguarded inner run.
fn inner(obj: &Objective, x0: &[f64], nm: NelderMeadOptions, col: &mut Collector, dim: usize) -> Result<RunOutcome> {
    match nelder_mead(|x| obj.eval(x), x0, nm) {
        Ok(r) => {
            col.absorb(obj, r.trace, dim);
            Ok(RunOutcome {
                x: r.x,
                f: r.f,
                converged: r.converged,
            })
        }
        Err(a) => match a.error {
            Stop::Failed(e) => Err(e),
            Stop::Triggered { .. } => Err(Error::InvalidParameter("unguarded objective triggered".into())),
        },
    }
}

fn finish(
    method: Method,
    spec: &ObjectiveSpec,
    obj_decode: DamperConfig,
    f: f64,
    dim: usize,
    basis: Option<&OrthoBasis>,
    col: &mut Collector,
    timings: Timings,
    termination: Termination,
) -> OptimizationReport {
    let warnings = col.warnings();
    OptimizationReport {
        method,
        mode: spec.mode,
        positions: obj_decode.positions,
        gains: obj_decode.gains,
        objective: f,
        dim,
        runs: col.runs,
        trace: std::mem::take(&mut col.trace),
        enrichments: basis.map(|b| b.log().to_vec()).unwrap_or_default(),
        deltas: std::mem::take(&mut col.deltas),
        solves: col.solves,
        timings,
        termination,
        warnings,
    }
}

/// Reference driver: every evaluation solves the full-order problem.
pub fn optimize_full(
    sys: &ModalSystem,
    cfg0: &DamperConfig,
    spec: &ObjectiveSpec,
    opts: &DriverOptions,
) -> Result<OptimizationReport> {
    run_full(sys, cfg0, spec, opts, &mut Collector::new())
}

fn run_full(
    sys: &ModalSystem,
    cfg0: &DamperConfig,
    spec: &ObjectiveSpec,
    opts: &DriverOptions,
    col: &mut Collector,
) -> Result<OptimizationReport> {
    let start = Instant::now();
    let model = FullModel;
    let obj = Objective::new(sys, spec, cfg0, &model, None)?;
    let x0 = obj.encode(cfg0);
    let out = inner(&obj, &x0, opts.nm, col, sys.n())?;
    let timings = Timings {
        basis: Duration::ZERO,
        optimization: start.elapsed(),
    };
    let termination = if out.converged {
        Termination::OptConverged
    } else {
        Termination::MaxIter
    };
    Ok(finish(
        Method::Full,
        spec,
        obj.decode(&out.x),
        out.f,
        sys.n(),
        None,
        col,
        timings,
        termination,
    ))
}

/// Basis addition for an enrichment at a grid configuration.
pub fn enrichment_basis(
    sys: &ModalSystem,
    cfg: &DamperConfig,
    kind: Enrichment,
    opts: &DriverOptions,
) -> Result<OrthoBasis> {
    match kind {
        Enrichment::Vf => subspace::build_vf(sys, &cfg.positions, opts.truncation),
        Enrichment::Vh => {
            let r = opts.irka.r.min(sys.n());
            let res = irka::sym2irka(sys, cfg, IrkaOptions { r, ..opts.irka })?;
            subspace::build_vh(sys, cfg, &res.state.shifts)
        }
    }
}

const MAX_REFINE: i32 = 6;

/// Options for the `level`-th re-enrichment at the same positions: the
/// truncation tolerance shrinks tenfold and the IRKA order doubles per level.
fn refined(opts: &DriverOptions, level: i32, n: usize) -> DriverOptions {
    let mut o = opts.clone();
    o.truncation = opts.truncation.scaled(10f64.powi(-level));
    o.irka.r = opts.irka.r.saturating_mul(1 << level.min(16)).min(n);
    o
}

fn relative_change(new: &[f64], old: &[f64]) -> f64 {
    let num: f64 = new.iter().zip(old).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let den: f64 = new.iter().map(|a| a * a).sum::<f64>().sqrt();
    if num == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn outer_distance(spec: &ObjectiveSpec, l: usize, new: &[f64], old: &[f64]) -> f64 {
    let pos = relative_change(&new[..l], &old[..l]);
    match spec.mode {
        Mode::Positions => pos,
        Mode::PositionsAndGains => {
            let g = |x: &[f64]| x[l..].iter().map(|v| v.exp()).collect::<Vec<_>>();
            pos + relative_change(&g(new), &g(old))
        }
    }
}

fn initial_basis(sys: &ModalSystem, opts: &DriverOptions, start: Option<&OrthoBasis>) -> Result<OrthoBasis> {
    match start {
        Some(b) => Ok(b.clone()),
        None => subspace::build_v0(sys, opts.truncation),
    }
}

/// Reduced-basis optimization enriched at consecutive minimizers until
/// they agree to `tol_err1`. `start` replaces the default `V₀`.
pub fn optimize_rbm(
    sys: &ModalSystem,
    cfg0: &DamperConfig,
    spec: &ObjectiveSpec,
    enrichment: Enrichment,
    opts: &DriverOptions,
    start: Option<&OrthoBasis>,
) -> Result<OptimizationReport> {
    run_rbm(sys, cfg0, spec, enrichment, opts, start, &mut Collector::new())
}

fn run_rbm(
    sys: &ModalSystem,
    cfg0: &DamperConfig,
    spec: &ObjectiveSpec,
    enrichment: Enrichment,
    opts: &DriverOptions,
    start: Option<&OrthoBasis>,
    col: &mut Collector,
) -> Result<OptimizationReport> {
    let method = match enrichment {
        Enrichment::Vf => Method::Vf,
        Enrichment::Vh => Method::Vh,
    };
    let mut timings = Timings::default();
    let t = Instant::now();
    let mut basis = initial_basis(sys, opts, start)?;
    timings.basis += t.elapsed();
    let l = cfg0.len();
    let mut x0 = {
        let model = FullModel;
        Objective::new(sys, spec, cfg0, &model, None)?.encode(cfg0)
    };
    let mut outer = 0;
    loop {
        outer += 1;
        let t = Instant::now();
        let proj = ProjectedSystem::new(sys, &basis);
        let obj = Objective::new(sys, spec, cfg0, &proj, None)?;
        let out = inner(&obj, &x0, opts.nm, col, basis.dim())?;
        timings.optimization += t.elapsed();
        let cfg_star = obj.decode(&out.x);
        let dist = outer_distance(spec, l, &out.x, &x0);
        let done = dist <= opts.tol_err1;
        if done || outer >= opts.max_outer {
            let termination = if done {
                Termination::OuterConverged
            } else {
                Termination::MaxIter
            };
            return Ok(finish(method, spec, cfg_star, out.f, basis.dim(), Some(&basis), col, timings, termination));
        }
        let t = Instant::now();
        let add = enrichment_basis(sys, &cfg_star, enrichment, opts)?;
        basis = subspace::enrich(&basis, &add)?;
        timings.basis += t.elapsed();
        x0 = out.x;
    }
}

/// Reduced-basis optimization in which every evaluation is guarded by the
/// relative indicator. A trigger aborts the inner run, enriches the basis
/// at the triggering configuration and restarts from there.
pub fn optimize_rbm_delta(
    sys: &ModalSystem,
    cfg0: &DamperConfig,
    spec: &ObjectiveSpec,
    enrichment: Enrichment,
    opts: &DriverOptions,
    start: Option<&OrthoBasis>,
) -> Result<OptimizationReport> {
    run_rbm_delta(sys, cfg0, spec, enrichment, opts, start, &mut Collector::new())
}

fn run_rbm_delta(
    sys: &ModalSystem,
    cfg0: &DamperConfig,
    spec: &ObjectiveSpec,
    enrichment: Enrichment,
    opts: &DriverOptions,
    start: Option<&OrthoBasis>,
    col: &mut Collector,
) -> Result<OptimizationReport> {
    let method = match enrichment {
        Enrichment::Vf => Method::VfDelta,
        Enrichment::Vh => Method::VhDelta,
    };
    let mut timings = Timings::default();
    let t = Instant::now();
    let mut basis = initial_basis(sys, opts, start)?;
    let mut ctx = IndicatorContext::new(sys, &basis)?;
    timings.basis += t.elapsed();
    let mut x0 = {
        let model = FullModel;
        Objective::new(sys, spec, cfg0, &model, None)?.encode(cfg0)
    };
    let mut seen: HashMap<Vec<usize>, i32> = HashMap::new();
    let mut restarts = 0;
    loop {
        let t = Instant::now();
        let guard = Guard {
            ctx: &ctx,
            tol: opts.tol_err2,
            normalization: opts.normalization,
        };
        let obj = Objective::new(sys, spec, cfg0, &ctx.proj, Some(guard))?;
        let res = nelder_mead(|x| obj.eval(x), &x0, opts.nm);
        timings.optimization += t.elapsed();
        match res {
            Ok(r) => {
                col.absorb(&obj, r.trace, basis.dim());
                let termination = if !r.converged {
                    Termination::MaxIter
                } else if restarts > 0 {
                    Termination::DeltaTriggered
                } else {
                    Termination::OptConverged
                };
                let cfg_star = obj.decode(&r.x);
                return Ok(finish(method, spec, cfg_star, r.f, basis.dim(), Some(&basis), col, timings, termination));
            }
            Err(abort) => {
                col.absorb(&obj, abort.trace, basis.dim());
                let (positions, gains) = match abort.error {
                    Stop::Failed(e) => return Err(e),
                    Stop::Triggered { positions, gains, .. } => (positions, gains),
                };
                let mut level = seen.get(&positions).copied().unwrap_or(0);
                restarts += 1;
                if restarts > opts.max_outer {
                    let x = abort.best_x.unwrap_or(x0);
                    let cfg_star = obj.decode(&x);
                    let f = abort.best_f;
                    return Ok(finish(method, spec, cfg_star, f, basis.dim(), Some(&basis), col, timings, Termination::MaxIter));
                }
                let t = Instant::now();
                let mut trig = DamperConfig::new(positions, gains);
                trig.gain_bounds = cfg0.gain_bounds.clone();
                x0 = obj.encode(&trig);
                // A configuration whose own enrichment is already in the basis
                // gets a finer one until something new enters.
                let before = basis.dim();
                loop {
                    let add = enrichment_basis(sys, &trig, enrichment, &refined(opts, level, sys.n()))?;
                    basis = subspace::enrich(&basis, &add)?;
                    if basis.dim() > before {
                        break;
                    }
                    level += 1;
                    if level > MAX_REFINE {
                        return Err(Error::Livelock(format!(
                            "positions {:?} keep triggering at basis dimension {before}",
                            trig.positions
                        )));
                    }
                }
                seen.insert(trig.positions.clone(), level);
                ctx = IndicatorContext::new(sys, &basis)?;
                timings.basis += t.elapsed();
            }
        }
    }
}

/// A failed run together with the trace recorded up to the failure.
#[derive(Debug)]
pub struct Failure {
    pub error: Error,
    pub trace: Vec<TraceEntry>,
}

/// Like [`optimize`], but a failure keeps the partial trace.
pub fn optimize_traced(
    sys: &ModalSystem,
    cfg0: &DamperConfig,
    spec: &ObjectiveSpec,
    method: Method,
    opts: &DriverOptions,
) -> std::result::Result<OptimizationReport, Failure> {
    let mut col = Collector::new();
    let res = match method {
        Method::Full => run_full(sys, cfg0, spec, opts, &mut col),
        Method::Vf => run_rbm(sys, cfg0, spec, Enrichment::Vf, opts, None, &mut col),
        Method::Vh => run_rbm(sys, cfg0, spec, Enrichment::Vh, opts, None, &mut col),
        Method::VfDelta => run_rbm_delta(sys, cfg0, spec, Enrichment::Vf, opts, None, &mut col),
        Method::VhDelta => run_rbm_delta(sys, cfg0, spec, Enrichment::Vh, opts, None, &mut col),
    };
    res.map_err(|error| Failure {
        error,
        trace: col.trace,
    })
}

/// Dispatch on the method.
pub fn optimize(
    sys: &ModalSystem,
    cfg0: &DamperConfig,
    spec: &ObjectiveSpec,
    method: Method,
    opts: &DriverOptions,
) -> Result<OptimizationReport> {
    optimize_traced(sys, cfg0, spec, method, opts).map_err(|f| f.error)
}
