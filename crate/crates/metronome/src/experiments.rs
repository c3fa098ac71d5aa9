//! Parameter scans, ensembles and disorder averages, with resumable
//! on-disk results.
//!
//! A scan directory holds `manifest.json`, one `points/<i>_<j>.json` record
//! per `(ε_i, ε′_j)` (plus `points/<i>_<j>_<r>.json` per disorder
//! realization) and the matching `traces/*.csv`. Point records never carry
//! timings, so two runs of one spec produce identical point files.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::mpsc;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use metronome_core::basis::sample_random_bitstring;
use metronome_core::fitting::{fit_cosine_points, fit_sigmoid_points, FitError, RESOLVABLE_MAX, RESOLVABLE_MIN};
use metronome_core::model::{build_geometry, derive_seed, sample_disorder};
use metronome_core::observables::{
    average_traces, bitstring_label, global_magnetization, parity_expectation, record_trace, site_magnetization,
    Observable, TraceMetadata,
};
use metronome_core::propagator::{build_bundle, BundleOptions, EffectivePropagator, MAX_PERIOD};
use metronome_core::{
    DisorderDistribution, EffectiveHamiltonian, FitResult, FitWindow, FloquetParams, Geometry, LatticeSpec, StateVector, Strategy,
    TimeGrid, TimeTrace,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::formats::{self, read_trace_csv, write_atomic, write_trace_csv};

/// How the initial state is prepared and which fit reads the trace.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    /// `|↑…↑⟩`, global magnetization, cosine fit.
    Polarized,
    /// Average over `count` random product states of every site
    /// autocorrelator; not fitted.
    Bitstrings(usize),
    /// Polarized state averaged over disorder realizations, sigmoid fit.
    Disorder,
}

impl FromStr for Protocol {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "polarized" => Ok(Protocol::Polarized),
            "disorder" => Ok(Protocol::Disorder),
            _ => {
                let count = s
                    .strip_prefix("bitstrings:")
                    .ok_or_else(|| anyhow!("unknown protocol `{s}` (polarized | bitstrings:N | disorder)"))?;
                let count: usize = count.parse().with_context(|| format!("bad bitstring count in `{s}`"))?;
                if count == 0 {
                    bail!("bitstring ensembles need at least one state");
                }
                Ok(Protocol::Bitstrings(count))
            }
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Polarized => f.write_str("polarized"),
            Protocol::Bitstrings(n) => write!(f, "bitstrings:{n}"),
            Protocol::Disorder => f.write_str("disorder"),
        }
    }
}

/// Sample spacing of a [`GridSpec`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Spacing {
    /// Dense even points to 200, then 30 per decade.
    Default,
    Log(u32),
    Linear(u64),
}

impl FromStr for Spacing {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "default" {
            return Ok(Spacing::Default);
        }
        let (kind, value) = s
            .split_once(':')
            .ok_or_else(|| anyhow!("grid `{s}` is not default, log:PPD or linear:STEP"))?;
        match kind {
            "log" => {
                let ppd: u32 = value.parse().with_context(|| format!("bad points per decade in `{s}`"))?;
                if ppd == 0 {
                    bail!("log grid needs a positive points-per-decade");
                }
                Ok(Spacing::Log(ppd))
            }
            "linear" => {
                let step = parse_count(value).with_context(|| format!("bad step in `{s}`"))?;
                if step == 0 {
                    bail!("linear grid needs a positive step");
                }
                Ok(Spacing::Linear(step))
            }
            _ => bail!("grid `{s}` is not default, log:PPD or linear:STEP"),
        }
    }
}

impl fmt::Display for Spacing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Spacing::Default => f.write_str("default"),
            Spacing::Log(p) => write!(f, "log:{p}"),
            Spacing::Linear(s) => write!(f, "linear:{s}"),
        }
    }
}

macro_rules! string_serde {
    ($ty:ty) => {
        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let text = String::deserialize(d)?;
                text.parse().map_err(|e: anyhow::Error| serde::de::Error::custom(format!("{e:#}")))
            }
        }
    };
}

string_serde!(Protocol);
string_serde!(Spacing);

/// Parses a non-negative integer count, accepting scientific notation
/// (`1e10`) as long as the value is integral.
pub fn parse_count(text: &str) -> Result<u64> {
    if let Ok(n) = text.trim().parse::<u64>() {
        return Ok(n);
    }
    let x: f64 = text.trim().parse().with_context(|| format!("`{text}` is not a number"))?;
    count_from_f64(x)
}

fn count_from_f64(x: f64) -> Result<u64> {
    if !(x >= 0.0 && x.fract() == 0.0 && x <= MAX_PERIOD as f64) {
        bail!("{x} is not an integer in 0..={MAX_PERIOD}");
    }
    Ok(x as u64)
}

fn de_count<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Num {
        Int(u64),
        Float(f64),
    }
    match Num::deserialize(d)? {
        Num::Int(n) => Ok(n),
        Num::Float(x) => count_from_f64(x).map_err(serde::de::Error::custom),
    }
}

/// Period grid parameters. The origin `n = 0` is always included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Last period.
    #[serde(deserialize_with = "de_count")]
    pub periods: u64,
    #[serde(default = "default_spacing")]
    pub spacing: Spacing,
    #[serde(default = "yes")]
    pub even_only: bool,
}

fn default_spacing() -> Spacing {
    Spacing::Default
}

fn yes() -> bool {
    true
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            periods: 10_000_000_000,
            spacing: Spacing::Default,
            even_only: true,
        }
    }
}

impl GridSpec {
    pub fn build(&self) -> Result<TimeGrid> {
        let grid = match self.spacing {
            Spacing::Default => {
                if !self.even_only {
                    bail!("the default grid is even-only; pick log:PPD or linear:STEP");
                }
                TimeGrid::default_to(self.periods)?
            }
            Spacing::Log(ppd) => TimeGrid::log(1, self.periods.max(1), ppd, self.even_only)?,
            Spacing::Linear(step) => {
                let grid = TimeGrid::linear(0, self.periods, step)?;
                if self.even_only && !grid.even_only() {
                    let evens = grid.periods().iter().copied().filter(|n| n % 2 == 0).collect();
                    TimeGrid::from_periods(evens, true)?
                } else {
                    grid
                }
            }
        };
        Ok(grid.with_origin())
    }
}

/// Coupling and field ranges of the disorder protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisorderSpec {
    pub j_range: (f64, f64),
    pub h_range: (f64, f64),
    pub realizations: usize,
}

/// Fit window and resolvability limits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSpec {
    #[serde(default = "default_window_start")]
    pub window_start: f64,
    #[serde(default = "default_min")]
    pub resolvable_min: f64,
    #[serde(default = "default_max")]
    pub resolvable_max: f64,
}

fn default_window_start() -> f64 {
    100.0
}

fn default_min() -> f64 {
    RESOLVABLE_MIN
}

fn default_max() -> f64 {
    RESOLVABLE_MAX
}

impl Default for FitSpec {
    fn default() -> Self {
        FitSpec {
            window_start: default_window_start(),
            resolvable_min: RESOLVABLE_MIN,
            resolvable_max: RESOLVABLE_MAX,
        }
    }
}

/// A scan over `epsilon × epsilon_prime`, read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSpec {
    pub geometry: Geometry,
    #[serde(rename = "L")]
    pub spins: usize,
    #[serde(default = "one")]
    pub t1: f64,
    #[serde(rename = "J", default = "one")]
    pub coupling: f64,
    #[serde(default)]
    pub h: f64,
    pub epsilon: Vec<f64>,
    pub epsilon_prime: Vec<f64>,
    pub protocol: Protocol,
    /// Defaults to [`Strategy::default_for`] the chain length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; all cores when absent. Never affects results.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disorder: Option<DisorderSpec>,
    #[serde(default)]
    pub fit: FitSpec,
}

fn one() -> f64 {
    1.0
}

impl ScanSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ScanSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.geometry == Geometry::Custom {
            bail!("scans run on preset geometries only");
        }
        if self.epsilon.is_empty() || self.epsilon_prime.is_empty() {
            bail!("epsilon and epsilon_prime grids must be non-empty");
        }
        for (name, grid) in [("epsilon", &self.epsilon), ("epsilon_prime", &self.epsilon_prime)] {
            if let Some(x) = grid.iter().find(|x| !(**x > 0.0 && **x <= 1.0)) {
                bail!("{name} value {x} outside (0, 1]");
            }
        }
        if self.jobs == Some(0) {
            bail!("jobs must be at least 1");
        }
        match (self.protocol, &self.disorder) {
            (Protocol::Disorder, None) => bail!("the disorder protocol needs a [disorder] section"),
            (Protocol::Disorder, Some(d)) => {
                DisorderDistribution::new(d.j_range, d.h_range, d.realizations, self.seed)?;
            }
            (_, Some(_)) => bail!("a [disorder] section needs protocol = \"disorder\""),
            _ => {}
        }
        FloquetParams::new(self.t1)?;
        // lattice and grid errors surface here rather than per point
        self.lattice(self.epsilon[0], self.epsilon_prime[0])?;
        self.grid.build()?;
        Ok(())
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy.unwrap_or_else(|| Strategy::default_for(self.spins))
    }

    pub fn params(&self) -> Result<FloquetParams> {
        Ok(FloquetParams::new(self.t1)?)
    }

    pub fn lattice(&self, eps: f64, eps_prime: f64) -> Result<LatticeSpec> {
        Ok(build_geometry(self.geometry, self.spins, self.coupling, self.h, eps, eps_prime)?)
    }

    pub fn distribution(&self) -> Option<DisorderDistribution> {
        self.disorder.as_ref().map(|d| DisorderDistribution {
            j_range: d.j_range,
            h_range: d.h_range,
            realizations: d.realizations,
            base_seed: self.seed,
        })
    }

    pub fn window(&self) -> FitWindow {
        FitWindow::from(self.fit.window_start)
    }

    fn realizations(&self) -> usize {
        self.disorder.as_ref().map_or(0, |d| d.realizations)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Ok,
    /// Lifetime beyond the resolvable window (or no decay seen at all).
    UnresolvedHigh,
    /// Lifetime shorter than the resolvable window.
    UnresolvedLow,
    Failed,
}

/// Result of one protocol run at one parameter point.
#[derive(Clone, Debug, PartialEq)]
pub struct PointOutcome {
    pub trace: TimeTrace,
    pub fit: Option<FitResult>,
    pub status: Status,
    /// Why the fit failed or the point is unresolved.
    pub note: Option<String>,
}

/// Magnetization plus the metronome's `σ_z` for polarized runs; every site
/// autocorrelator for bitstring ensembles.
pub fn default_observables(protocol: Protocol, spec: &LatticeSpec) -> Vec<Observable> {
    match protocol {
        Protocol::Bitstrings(_) => (1..=spec.spins()).map(Observable::Autocorrelator).collect(),
        _ => {
            let mut observables = vec![Observable::Magnetization];
            observables.extend(spec.metronome_site().map(Observable::Site));
            observables
        }
    }
}

/// Trace of `U_F^n |↑…↑⟩` for one lattice.
pub fn polarized_trace(
    spec: &LatticeSpec,
    params: &FloquetParams,
    grid: &TimeGrid,
    strategy: Strategy,
    observables: &[Observable],
) -> Result<TimeTrace> {
    let bundle = build_bundle(spec, params, BundleOptions::for_strategy(strategy))?;
    let metadata = TraceMetadata {
        lattice: Some(spec.clone()),
        params: Some(*params),
        initial_state: Protocol::Polarized.to_string(),
        strategy: Some(strategy),
        ..TraceMetadata::default()
    };
    let initial = StateVector::polarized(spec.spins())?;
    Ok(record_trace(&initial, &bundle, grid, strategy, observables, metadata)?)
}

/// Trace of `e^{−iH nT}|ψ0⟩` under an effective Hamiltonian. Effective
/// generators describe the stroboscopic motion at even `n`, where the
/// rotating-frame sign of autocorrelators is `+1`.
pub fn effective_trace(
    h: &EffectiveHamiltonian,
    initial: &StateVector,
    grid: &TimeGrid,
    observables: &[Observable],
    mut metadata: TraceMetadata,
) -> Result<TimeTrace> {
    if !grid.even_only() {
        bail!("effective evolution is stroboscopic at even periods only");
    }
    let propagator = EffectivePropagator::new(h)?;
    let period = h.params().period();
    let bits = if observables.iter().any(|o| matches!(o, Observable::Autocorrelator(_))) {
        Some(initial.as_product_state().ok_or_else(|| anyhow!("autocorrelators need a product initial state"))?)
    } else {
        None
    };
    let mut columns = vec![Vec::with_capacity(grid.len()); observables.len()];
    for &n in grid.periods() {
        let state = propagator.evolve(initial, n as f64 * period)?;
        for (obs, column) in observables.iter().zip(columns.iter_mut()) {
            column.push(match *obs {
                Observable::Magnetization => global_magnetization(&state),
                Observable::Site(i) => site_magnetization(&state, i)?,
                Observable::Parity => parity_expectation(&state),
                Observable::Autocorrelator(i) => {
                    bits.as_ref().map_or(1.0, |b| b[i - 1].z()) * site_magnetization(&state, i)?
                }
            });
        }
    }
    metadata.effective = Some(h.kind());
    let mut trace = TimeTrace::new(grid.clone(), metadata);
    for (obs, column) in observables.iter().zip(columns) {
        trace.insert(obs.name(), column)?;
    }
    Ok(trace)
}

/// `observables` averaged over `count` random product states. State `k` is drawn from seed `derive_seed(seed, k)`, so every
/// parameter point sees the same ensemble.
pub fn ensemble_trace(
    spec: &LatticeSpec,
    params: &FloquetParams,
    grid: &TimeGrid,
    strategy: Strategy,
    count: usize,
    seed: u64,
    observables: &[Observable],
) -> Result<TimeTrace> {
    if count == 0 {
        bail!("bitstring ensembles need at least one state");
    }
    let bundle = build_bundle(spec, params, BundleOptions::for_strategy(strategy))?;
    let seeds: Vec<u64> = (0..count as u64).map(|k| derive_seed(seed, k)).collect();
    let traces = seeds
        .par_iter()
        .map(|s| {
            let bits = sample_random_bitstring(spec.spins(), &mut ChaCha8Rng::seed_from_u64(*s));
            let metadata = TraceMetadata {
                initial_state: bitstring_label(&bits),
                ..TraceMetadata::default()
            };
            let initial = StateVector::from_spins(&bits)?;
            Ok(record_trace(&initial, &bundle, grid, strategy, observables, metadata)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut trace = average_traces(&traces)?;
    trace.metadata = TraceMetadata {
        lattice: Some(spec.clone()),
        params: Some(*params),
        initial_state: Protocol::Bitstrings(count).to_string(),
        strategy: Some(strategy),
        seeds,
        ensemble_size: Some(count),
        ..TraceMetadata::default()
    };
    Ok(trace)
}

/// Polarized trace of disorder realization `index` of `spec`.
pub fn realization_trace(
    spec: &LatticeSpec,
    dist: &DisorderDistribution,
    index: usize,
    params: &FloquetParams,
    grid: &TimeGrid,
    strategy: Strategy,
) -> Result<TimeTrace> {
    let lattice = sample_disorder(spec, dist, index as u64);
    let observables = default_observables(Protocol::Disorder, &lattice);
    let mut trace = polarized_trace(&lattice, params, grid, strategy, &observables)?;
    trace.metadata.seeds = vec![derive_seed(dist.base_seed, index as u64)];
    Ok(trace)
}

/// Pointwise mean over all realizations of `dist`, computed in parallel and
/// summed in index order.
pub fn disorder_average(
    spec: &LatticeSpec,
    dist: &DisorderDistribution,
    params: &FloquetParams,
    grid: &TimeGrid,
    strategy: Strategy,
) -> Result<TimeTrace> {
    dist.validate()?;
    let traces = (0..dist.realizations)
        .into_par_iter()
        .map(|r| realization_trace(spec, dist, r, params, grid, strategy))
        .collect::<Result<Vec<_>>>()?;
    Ok(average_disorder(spec, dist, &traces)?)
}

fn average_disorder(spec: &LatticeSpec, dist: &DisorderDistribution, traces: &[TimeTrace]) -> Result<TimeTrace> {
    let mut trace = average_traces(traces)?;
    trace.metadata.lattice = Some(spec.clone());
    trace.metadata.initial_state = Protocol::Disorder.to_string();
    trace.metadata.seeds = (0..dist.realizations as u64).map(|r| derive_seed(dist.base_seed, r)).collect();
    trace.metadata.ensemble_size = None;
    trace.metadata.disorder_realizations = Some(dist.realizations);
    Ok(trace)
}

/// Fraction of the windowed signal power a fitted cosine leaves
/// unexplained.
fn unexplained(points: &[(f64, f64)], fit: &FitResult) -> f64 {
    let (amp, period) = (fit.params["A"], fit.params["T_R"]);
    let (mut residual, mut power) = (0.0, 0.0);
    for &(t, y) in points.iter().filter(|p| fit.window.contains(p.0)) {
        residual += (y - amp * (TAU * t / period).cos()).powi(2);
        power += y * y;
    }
    if power > 0.0 {
        residual / power
    } else {
        1.0
    }
}

fn classify_lifetime(lifetime: f64, fit: &FitSpec) -> Status {
    if lifetime < fit.resolvable_min {
        Status::UnresolvedLow
    } else if lifetime > fit.resolvable_max {
        Status::UnresolvedHigh
    } else {
        Status::Ok
    }
}

/// A cosine leaving more than this fraction of the windowed signal
/// unexplained does not describe the trace: the plateau has already been
/// scrambled by fast dynamics.
pub const MAX_UNEXPLAINED: f64 = 0.5;

/// Cosine fit of polarized magnetization plus resolvability:
///
/// - no crossing in the fit window while the trace stays positive → high;
/// - a fit that explains less than half of the windowed signal → low;
/// - otherwise the fitted `T_R` decides.
pub fn classify_cosine(points: &[(f64, f64)], window: FitWindow, fit: &FitSpec) -> (Option<FitResult>, Status, Option<String>) {
    match fit_cosine_points(points, window) {
        Ok(result) => match (result.converged, result.lifetime) {
            (true, Some(t)) => {
                let misfit = unexplained(points, &result);
                if misfit > MAX_UNEXPLAINED {
                    let note = format!("cosine leaves {:.0}% of the signal unexplained", 100.0 * misfit);
                    (Some(result), Status::UnresolvedLow, Some(note))
                } else {
                    (Some(result), classify_lifetime(t, fit), None)
                }
            }
            _ => (Some(result), Status::Failed, Some("cosine fit did not converge".into())),
        },
        Err(FitError::Unresolvable(why)) => {
            let tail: Vec<f64> = points.iter().filter(|p| window.contains(p.0)).map(|p| p.1).collect();
            let positive = !tail.is_empty() && tail.iter().all(|y| *y > 0.0);
            let status = if positive { Status::UnresolvedHigh } else { Status::UnresolvedLow };
            (None, status, Some(why))
        }
        Err(e) => (None, Status::Failed, Some(e.to_string())),
    }
}

/// Sigmoid fit of a disorder-averaged magnetization; a trace that never
/// decays inside the window is unresolved-high.
pub fn classify_sigmoid(points: &[(f64, f64)], window: FitWindow, fit: &FitSpec) -> (Option<FitResult>, Status, Option<String>) {
    match fit_sigmoid_points(points, window) {
        Ok(result) => match (result.converged, result.lifetime) {
            (true, Some(t)) => (Some(result), classify_lifetime(t, fit), None),
            _ => (Some(result), Status::Failed, Some("sigmoid fit did not converge".into())),
        },
        Err(FitError::NonDecaying) => (None, Status::UnresolvedHigh, Some(FitError::NonDecaying.to_string())),
        Err(e) => (None, Status::Failed, Some(e.to_string())),
    }
}

/// Fit and status of a finished protocol trace.
pub fn analyze(spec: &ScanSpec, trace: TimeTrace) -> Result<PointOutcome> {
    let (fit, status, note) = match spec.protocol {
        Protocol::Polarized => classify_cosine(&trace.points("magnetization")?, spec.window(), &spec.fit),
        Protocol::Disorder => classify_sigmoid(&trace.points("magnetization")?, spec.window(), &spec.fit),
        Protocol::Bitstrings(_) => (None, Status::Ok, None),
    };
    Ok(PointOutcome { trace, fit, status, note })
}

/// Runs the protocol of `spec` at `(ε, ε′)`, fits and classifies.
pub fn run_point(spec: &ScanSpec, eps: f64, eps_prime: f64) -> Result<PointOutcome> {
    let lattice = spec.lattice(eps, eps_prime)?;
    let params = spec.params()?;
    let grid = spec.grid.build()?;
    let strategy = spec.strategy();
    let observables = default_observables(spec.protocol, &lattice);
    let trace = match spec.protocol {
        Protocol::Polarized => polarized_trace(&lattice, &params, &grid, strategy, &observables)?,
        Protocol::Bitstrings(count) => ensemble_trace(&lattice, &params, &grid, strategy, count, spec.seed, &observables)?,
        Protocol::Disorder => {
            let dist = spec.distribution().ok_or_else(|| anyhow!("missing [disorder] section"))?;
            disorder_average(&lattice, &dist, &params, &grid, strategy)?
        }
    };
    analyze(spec, trace)
}

/// Grid coordinates of a record; `r` only for single disorder realizations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PointIndex {
    pub i: usize,
    pub j: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<usize>,
}

impl PointIndex {
    pub fn stem(&self) -> String {
        match self.r {
            Some(r) => format!("{}_{}_{}", self.i, self.j, r),
            None => format!("{}_{}", self.i, self.j),
        }
    }
}

/// Content of `points/<stem>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub index: PointIndex,
    pub epsilon: f64,
    pub epsilon_prime: f64,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lifetime: Option<f64>,
    /// Trace CSV relative to the scan directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<TraceMetadata>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointTiming {
    pub index: PointIndex,
    pub status: Status,
    /// Absent for records found on disk when resuming.
    pub seconds: Option<f64>,
}

/// Content of `manifest.json`: the resolved spec plus run bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub spec: ScanSpec,
    pub strategy: Strategy,
    pub grid_points: usize,
    pub complete: bool,
    pub points: Vec<PointTiming>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanResult {
    /// One record per `(i, j)`, in grid order.
    pub records: Vec<PointRecord>,
    pub manifest: Manifest,
}

impl ScanResult {
    /// `(x, lifetime)` pairs of resolved points along `ε′` (at `ε_i`).
    pub fn lifetimes_along_eps_prime(&self, i: usize) -> Vec<(f64, f64)> {
        self.records
            .iter()
            .filter(|r| r.index.i == i && r.status == Status::Ok)
            .filter_map(|r| r.lifetime.map(|t| (r.epsilon_prime, t)))
            .collect()
    }

    /// `(x, lifetime)` pairs of resolved points along `ε` (at `ε′_j`).
    pub fn lifetimes_along_eps(&self, j: usize) -> Vec<(f64, f64)> {
        self.records
            .iter()
            .filter(|r| r.index.j == j && r.status == Status::Ok)
            .filter_map(|r| r.lifetime.map(|t| (r.epsilon, t)))
            .collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct ScanOptions {
    /// Keep finished records found in the directory instead of refusing to
    /// run.
    pub resume: bool,
}

/// Progress of a running scan, reported once per finished task.
#[derive(Clone, Debug)]
pub struct Progress {
    pub index: PointIndex,
    pub status: Status,
    pub done: usize,
    pub total: usize,
}

pub fn point_path(dir: &Path, index: PointIndex) -> PathBuf {
    dir.join("points").join(format!("{}.json", index.stem()))
}

pub fn trace_path(dir: &Path, index: PointIndex) -> PathBuf {
    dir.join("traces").join(format!("{}.csv", index.stem()))
}

/// `lifetimes/eps_<i>.csv` runs along ε′ at fixed ε; `eps_prime_<j>.csv` along ε.
pub fn lifetime_table_path(dir: &Path, along_eps_prime: bool, index: usize) -> PathBuf {
    let stem = if along_eps_prime { "eps" } else { "eps_prime" };
    dir.join("lifetimes").join(format!("{stem}_{index}.csv"))
}

fn write_lifetime_tables(spec: &ScanSpec, dir: &Path, result: &ScanResult) -> Result<()> {
    let tables = (0..spec.epsilon.len())
        .map(|i| (lifetime_table_path(dir, true, i), result.lifetimes_along_eps_prime(i)))
        .chain((0..spec.epsilon_prime.len()).map(|j| (lifetime_table_path(dir, false, j), result.lifetimes_along_eps(j))));
    for (path, points) in tables {
        let mut bytes = Vec::new();
        formats::write_lifetime_table(&points, &mut bytes)?;
        formats::write_atomic(&path, &bytes)?;
    }
    Ok(())
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

/// Loads all `(i, j)` records of a finished or partial scan, in grid order.
pub fn load_records(dir: &Path) -> Result<Vec<PointRecord>> {
    let manifest: Manifest = formats::read_json(&manifest_path(dir))?;
    let mut records = Vec::new();
    for i in 0..manifest.spec.epsilon.len() {
        for j in 0..manifest.spec.epsilon_prime.len() {
            let path = point_path(dir, PointIndex { i, j, r: None });
            if path.exists() {
                records.push(formats::read_json(&path)?);
            }
        }
    }
    Ok(records)
}

struct TaskOutput {
    index: PointIndex,
    record: PointRecord,
    trace_csv: Option<Vec<u8>>,
    seconds: f64,
}

fn record_for(index: PointIndex, eps: f64, eps_prime: f64, outcome: Result<PointOutcome>, dir_rel: bool) -> (PointRecord, Option<Vec<u8>>) {
    match outcome {
        Ok(out) => {
            let mut csv = Vec::new();
            let written = write_trace_csv(&out.trace, &mut csv);
            let (trace, csv) = match written {
                Ok(()) if dir_rel => (Some(format!("traces/{}.csv", index.stem())), Some(csv)),
                _ => (None, None),
            };
            let record = PointRecord {
                index,
                epsilon: eps,
                epsilon_prime: eps_prime,
                status: out.status,
                lifetime: out.fit.as_ref().and_then(|f| f.lifetime),
                fit: out.fit,
                trace,
                metadata: Some(out.trace.metadata),
                note: out.note,
            };
            (record, csv)
        }
        Err(e) => (
            PointRecord {
                index,
                epsilon: eps,
                epsilon_prime: eps_prime,
                status: Status::Failed,
                fit: None,
                lifetime: None,
                trace: None,
                metadata: None,
                note: Some(format!("{e:#}")),
            },
            None,
        ),
    }
}

fn write_output(dir: &Path, out: &TaskOutput) -> Result<()> {
    // trace first: a record on disk implies its trace is complete
    if let Some(csv) = &out.trace_csv {
        write_atomic(&trace_path(dir, out.index), csv)?;
    }
    write_atomic(&point_path(dir, out.index), formats::to_json(&out.record)?.as_bytes())
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    write_atomic(&manifest_path(dir), formats::to_json(manifest)?.as_bytes())
}

/// Runs every task not yet on disk on `pool`, handing outputs to a single
/// writer that persists them in index order.
fn execute<F>(
    dir: &Path,
    pool: &rayon::ThreadPool,
    tasks: Vec<PointIndex>,
    run: F,
    timings: &mut BTreeMap<PointIndex, PointTiming>,
    progress: &mut dyn FnMut(&Progress),
) -> Result<()>
where
    F: Fn(PointIndex) -> (PointRecord, Option<Vec<u8>>) + Sync,
{
    let total = tasks.len();
    let (tx, rx) = mpsc::channel::<TaskOutput>();
    std::thread::scope(|scope| -> Result<()> {
        let tasks = &tasks;
        let run = &run;
        scope.spawn(move || {
            pool.install(|| {
                tasks.par_iter().for_each_with(tx, |tx, index| {
                    let start = Instant::now();
                    let (record, trace_csv) = run(*index);
                    let seconds = start.elapsed().as_secs_f64();
                    // the writer only stops early on a storage error
                    let _ = tx.send(TaskOutput { index: *index, record, trace_csv, seconds });
                });
            });
        });
        let mut pending: BTreeMap<usize, TaskOutput> = BTreeMap::new();
        let position: BTreeMap<PointIndex, usize> = tasks.iter().enumerate().map(|(k, i)| (*i, k)).collect();
        let mut next = 0;
        for out in rx {
            pending.insert(position[&out.index], out);
            while let Some(out) = pending.remove(&next) {
                write_output(dir, &out)?;
                timings.insert(
                    out.index,
                    PointTiming {
                        index: out.index,
                        status: out.record.status,
                        seconds: Some(out.seconds),
                    },
                );
                next += 1;
                progress(&Progress {
                    index: out.index,
                    status: out.record.status,
                    done: next,
                    total,
                });
            }
        }
        Ok(())
    })
}

/// Runs (or resumes) a scan into `dir`.
///
/// Work items are grid points, or grid points × realizations for the
/// disorder protocol; each realization is persisted before the averaged
/// point is fitted, so an interrupted scan loses at most the items in
/// flight. Results do not depend on `jobs` or on scheduling.
pub fn run_scan(spec: &ScanSpec, dir: &Path, options: &ScanOptions, progress: &mut dyn FnMut(&Progress)) -> Result<ScanResult> {
    spec.validate()?;
    let started = Instant::now();
    let grid = spec.grid.build()?;
    let params = spec.params()?;
    let strategy = spec.strategy();

    let existing = manifest_path(dir);
    if existing.exists() {
        if !options.resume {
            bail!("{} already holds a scan; pass --resume to continue it", dir.display());
        }
        let previous: Manifest = formats::read_json(&existing)?;
        if previous.spec != *spec {
            bail!("{} holds a scan of a different spec", dir.display());
        }
    }
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        spec: spec.clone(),
        strategy,
        grid_points: grid.len(),
        complete: false,
        points: Vec::new(),
        total_seconds: None,
    };
    write_manifest(dir, &manifest)?;

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = spec.jobs {
        pool = pool.num_threads(jobs);
    }
    let pool = pool.build()?;

    let points: Vec<PointIndex> = (0..spec.epsilon.len())
        .flat_map(|i| (0..spec.epsilon_prime.len()).map(move |j| PointIndex { i, j, r: None }))
        .collect();
    let mut timings: BTreeMap<PointIndex, PointTiming> = BTreeMap::new();
    let mark_resumed = |index: PointIndex, timings: &mut BTreeMap<PointIndex, PointTiming>| -> Result<bool> {
        let path = point_path(dir, index);
        if !path.exists() {
            return Ok(false);
        }
        let record: PointRecord = formats::read_json(&path)?;
        timings.insert(index, PointTiming { index, status: record.status, seconds: None });
        Ok(true)
    };
    let mut todo = Vec::new();
    for &index in &points {
        if !mark_resumed(index, &mut timings)? {
            todo.push(index);
        }
    }
    let eps_of = |index: PointIndex| (spec.epsilon[index.i], spec.epsilon_prime[index.j]);

    if spec.protocol == Protocol::Disorder {
        let dist = spec.distribution().ok_or_else(|| anyhow!("missing [disorder] section"))?;
        let mut realizations = Vec::new();
        for point in &todo {
            for r in 0..spec.realizations() {
                let index = PointIndex { r: Some(r), ..*point };
                if !mark_resumed(index, &mut timings)? {
                    realizations.push(index);
                }
            }
        }
        let run = |index: PointIndex| {
            let (eps, eps_prime) = eps_of(index);
            let outcome = spec.lattice(eps, eps_prime).and_then(|lattice| {
                let trace = realization_trace(&lattice, &dist, index.r.unwrap_or(0), &params, &grid, strategy)?;
                Ok(PointOutcome { trace, fit: None, status: Status::Ok, note: None })
            });
            record_for(index, eps, eps_prime, outcome, true)
        };
        execute(dir, &pool, realizations, run, &mut timings, progress)?;
        let average = |index: PointIndex| {
            let (eps, eps_prime) = eps_of(index);
            let outcome = (|| {
                let lattice = spec.lattice(eps, eps_prime)?;
                let mut traces = Vec::with_capacity(dist.realizations);
                for r in 0..dist.realizations {
                    let sub = PointIndex { r: Some(r), ..index };
                    let record: PointRecord = formats::read_json(&point_path(dir, sub))?;
                    if record.status == Status::Failed {
                        bail!("realization {r} failed: {}", record.note.unwrap_or_default());
                    }
                    let file = std::fs::File::open(trace_path(dir, sub))?;
                    let mut trace = read_trace_csv(file)?;
                    trace.metadata = record.metadata.unwrap_or_default();
                    traces.push(trace);
                }
                analyze(spec, average_disorder(&lattice, &dist, &traces)?)
            })();
            record_for(index, eps, eps_prime, outcome, true)
        };
        execute(dir, &pool, todo, average, &mut timings, progress)?;
    } else {
        let run = |index: PointIndex| {
            let (eps, eps_prime) = eps_of(index);
            record_for(index, eps, eps_prime, run_point(spec, eps, eps_prime), true)
        };
        execute(dir, &pool, todo, run, &mut timings, progress)?;
    }

    let mut records = Vec::with_capacity(points.len());
    for &index in &points {
        records.push(formats::read_json(&point_path(dir, index))?);
    }
    let result = ScanResult { records, manifest };
    write_lifetime_tables(spec, dir, &result)?;
    let ScanResult { records, mut manifest } = result;
    manifest.points = timings.into_values().collect();
    manifest.complete = true;
    manifest.total_seconds = Some(started.elapsed().as_secs_f64());
    write_manifest(dir, &manifest)?;
    Ok(ScanResult { records, manifest })
}
