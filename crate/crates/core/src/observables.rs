//! Magnetisations, rotating-frame autocorrelators, ensemble averages and
//! spectral diagnostics.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::basis::{domain_wall_number, full_mask, z_of_bit, BasisIndex, Spin, StateVector};
use crate::model::{EffectiveHamiltonian, EffectiveKind, FloquetParams, LatticeSpec};
use crate::propagator::{evolve_on_grid, PropagatorBundle, Strategy, TimeGrid};
use crate::{Error, Result};

/// `|⟨P⟩|` needed before an eigenstate gets a parity label.
pub const PARITY_LABEL_THRESHOLD: f64 = 0.99;

/// `⟨Σ_i σ_z^i⟩ / L`.
pub fn global_magnetization(state: &StateVector) -> f64 {
    let spins = state.spins();
    let total: f64 = state
        .amplitudes()
        .iter()
        .enumerate()
        .map(|(b, a)| a.norm_sqr() * (spins as f64 - 2.0 * b.count_ones() as f64))
        .sum();
    total / spins as f64
}

/// `⟨σ_z^site⟩`, `site` in `1..=L`.
pub fn site_magnetization(state: &StateVector, site: usize) -> Result<f64> {
    if site == 0 || site > state.spins() {
        return Err(Error::SiteOutOfRange {
            site,
            spins: state.spins(),
        });
    }
    Ok(site_z(state, site - 1))
}

fn site_z(state: &StateVector, bit: usize) -> f64 {
    state
        .amplitudes()
        .iter()
        .enumerate()
        .map(|(b, a)| a.norm_sqr() * z_of_bit(b, bit))
        .sum()
}

/// `⟨P⟩` for the global spin flip `P = ⊗_i σ_x^i`.
pub fn parity_expectation(state: &StateVector) -> f64 {
    let mask = full_mask(state.spins());
    let amps = state.amplitudes();
    amps.iter()
        .enumerate()
        .map(|(b, a)| (a.conj() * amps[b ^ mask]).re)
        .sum()
}

/// Named quantity recorded along a trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Observable {
    /// `⟨Σσ_z⟩/L`.
    Magnetization,
    /// `⟨σ_z^i⟩`.
    Site(usize),
    /// `z_i(0) ⟨σ_z^i(n)⟩ (−1)^n` for a product initial state.
    Autocorrelator(usize),
    /// `⟨P⟩`.
    Parity,
}

impl Observable {
    /// Column label: `magnetization`, `sz_<i>`, `Z_<i>` or `parity`.
    pub fn name(&self) -> String {
        match self {
            Observable::Magnetization => "magnetization".to_string(),
            Observable::Site(i) => format!("sz_{i}"),
            Observable::Autocorrelator(i) => format!("Z_{i}"),
            Observable::Parity => "parity".to_string(),
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        let unknown = || Error::UnknownObservable(name.to_string());
        let site = |s: &str| s.parse::<usize>().map_err(|_| unknown());
        match name {
            "magnetization" => Ok(Observable::Magnetization),
            "parity" => Ok(Observable::Parity),
            _ => {
                if let Some(rest) = name.strip_prefix("sz_") {
                    Ok(Observable::Site(site(rest)?))
                } else if let Some(rest) = name.strip_prefix("Z_") {
                    Ok(Observable::Autocorrelator(site(rest)?))
                } else {
                    Err(unknown())
                }
            }
        }
    }

    fn check(&self, spins: usize) -> Result<()> {
        match *self {
            Observable::Site(i) | Observable::Autocorrelator(i) if i == 0 || i > spins => {
                Err(Error::SiteOutOfRange { site: i, spins })
            }
            _ => Ok(()),
        }
    }
}

/// Run description stored with every trace.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceMetadata {
    pub lattice: Option<LatticeSpec>,
    pub params: Option<FloquetParams>,
    /// `polarized`, `bitstring:<bits>`, `bitstrings:<count>`, …
    pub initial_state: String,
    pub strategy: Option<Strategy>,
    pub effective: Option<EffectiveKind>,
    pub seeds: Vec<u64>,
    pub ensemble_size: Option<usize>,
    pub disorder_realizations: Option<usize>,
}

/// Observable series sampled on a period grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeTrace {
    pub grid: TimeGrid,
    pub series: BTreeMap<String, Vec<f64>>,
    /// Standard error per point, for averaged series.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub stderr: BTreeMap<String, Vec<f64>>,
    pub metadata: TraceMetadata,
}

impl TimeTrace {
    pub fn new(grid: TimeGrid, metadata: TraceMetadata) -> Self {
        TimeTrace {
            grid,
            series: BTreeMap::new(),
            stderr: BTreeMap::new(),
            metadata,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        self.check_len(values.len())?;
        self.series.insert(name.into(), values);
        Ok(())
    }

    pub fn insert_stderr(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        self.check_len(values.len())?;
        self.stderr.insert(name.into(), values);
        Ok(())
    }

    fn check_len(&self, found: usize) -> Result<()> {
        if found == self.grid.len() {
            Ok(())
        } else {
            Err(Error::LengthMismatch {
                expected: self.grid.len(),
                found,
            })
        }
    }

    pub fn periods(&self) -> &[u64] {
        self.grid.periods()
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        self.series
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownObservable(name.to_string()))
    }

    /// `(n, value)` pairs of one series.
    pub fn points(&self, name: &str) -> Result<Vec<(f64, f64)>> {
        let values = self.get(name)?;
        Ok(self.periods().iter().map(|n| *n as f64).zip(values.iter().copied()).collect())
    }

    /// Checks the per-point invariants: one value per grid point, and
    /// magnetisation-like series inside `[−1, 1]` (up to rounding).
    pub fn validate(&self) -> Result<()> {
        for (name, values) in self.series.iter().chain(self.stderr.iter()) {
            self.check_len(values.len())?;
            if values.iter().any(|v| v.is_nan()) {
                return Err(Error::InvalidParameter(format!("series {name} contains NaN")));
            }
        }
        for (name, values) in &self.series {
            if let Ok(obs) = Observable::parse(name) {
                if obs != Observable::Parity && values.iter().any(|v| v.abs() > 1.0 + 1e-9) {
                    return Err(Error::InvalidParameter(format!("series {name} leaves [-1, 1]")));
                }
            }
        }
        Ok(())
    }
}

/// Records `observables` along `U_F^n ψ0` for every grid point.
///
/// Autocorrelators require `initial` to be a computational-basis product
/// state.
pub fn record_trace(
    initial: &StateVector,
    bundle: &PropagatorBundle,
    grid: &TimeGrid,
    strategy: Strategy,
    observables: &[Observable],
    metadata: TraceMetadata,
) -> Result<TimeTrace> {
    let spins = initial.spins();
    for obs in observables {
        obs.check(spins)?;
    }
    let initial_bits = if observables.iter().any(|o| matches!(o, Observable::Autocorrelator(_))) {
        Some(initial.as_product_state().ok_or(Error::NotProductState)?)
    } else {
        None
    };
    let mut columns: Vec<Vec<f64>> = vec![Vec::with_capacity(grid.len()); observables.len()];
    evolve_on_grid(initial, bundle, grid, strategy, |_, n, state| {
        let frame = if n % 2 == 0 { 1.0 } else { -1.0 };
        for (obs, column) in observables.iter().zip(columns.iter_mut()) {
            let value = match *obs {
                Observable::Magnetization => global_magnetization(state),
                Observable::Site(i) => site_z(state, i - 1),
                Observable::Parity => parity_expectation(state),
                Observable::Autocorrelator(i) => {
                    let z0 = initial_bits.as_ref().map_or(1.0, |bits| bits[i - 1].z());
                    z0 * site_z(state, i - 1) * frame
                }
            };
            column.push(value);
        }
        Ok(())
    })?;
    let mut trace = TimeTrace::new(grid.clone(), metadata);
    for (obs, column) in observables.iter().zip(columns) {
        trace.insert(obs.name(), column)?;
    }
    Ok(trace)
}

/// `Z_i(n)` for each site in `sites`, from one evolution of the bitstring.
pub fn autocorrelator_trace(
    bits: &[Spin],
    bundle: &PropagatorBundle,
    grid: &TimeGrid,
    sites: &[usize],
    strategy: Strategy,
) -> Result<TimeTrace> {
    let initial = StateVector::from_spins(bits)?;
    let observables: Vec<Observable> = sites.iter().map(|s| Observable::Autocorrelator(*s)).collect();
    let metadata = TraceMetadata {
        initial_state: bitstring_label(bits),
        strategy: Some(strategy),
        ..TraceMetadata::default()
    };
    record_trace(&initial, bundle, grid, strategy, &observables, metadata)
}

/// `bitstring:↑↓…` rendered with `u`/`d`.
pub fn bitstring_label(bits: &[Spin]) -> String {
    let body: String = bits
        .iter()
        .map(|s| if *s == Spin::Up { 'u' } else { 'd' })
        .collect();
    format!("bitstring:{body}")
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
struct Compensated {
    sum: f64,
    carry: f64,
}

impl Compensated {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum + self.carry
    }
}

/// Pointwise mean of traces sharing one grid and one set of series, with a
/// per-point standard error when more than one trace is given. Metadata is
/// taken from the first trace.
pub fn average_traces(traces: &[TimeTrace]) -> Result<TimeTrace> {
    let first = traces
        .first()
        .ok_or_else(|| Error::InvalidParameter("average of zero traces".into()))?;
    for t in &traces[1..] {
        if t.grid != first.grid {
            return Err(Error::InvalidParameter("traces have different grids".into()));
        }
        if t.series.keys().ne(first.series.keys()) {
            return Err(Error::InvalidParameter("traces have different series".into()));
        }
    }
    let count = traces.len() as f64;
    let mut out = TimeTrace::new(first.grid.clone(), first.metadata.clone());
    out.metadata.ensemble_size = Some(traces.len());
    for name in first.series.keys() {
        let points = first.grid.len();
        let mut mean = Vec::with_capacity(points);
        let mut stderr = Vec::with_capacity(points);
        for k in 0..points {
            let mut sum = Compensated::default();
            traces.iter().for_each(|t| sum.add(t.series[name][k]));
            let m = sum.value() / count;
            let mut squares = Compensated::default();
            traces.iter().for_each(|t| squares.add((t.series[name][k] - m).powi(2)));
            mean.push(m);
            if traces.len() > 1 {
                stderr.push((squares.value() / (count - 1.0) / count).sqrt());
            }
        }
        out.insert(name.clone(), mean)?;
        if traces.len() > 1 {
            out.insert_stderr(name.clone(), stderr)?;
        }
    }
    Ok(out)
}

/// Averages `count` traces produced in index order by `producer`.
pub fn ensemble_average<F>(count: usize, mut producer: F) -> Result<TimeTrace>
where
    F: FnMut(usize) -> Result<TimeTrace>,
{
    if count == 0 {
        return Err(Error::InvalidParameter("empty ensemble".into()));
    }
    let traces = (0..count).map(&mut producer).collect::<Result<Vec<_>>>()?;
    average_traces(&traces)
}

/// Spectrum of an effective Hamiltonian with symmetry and domain-wall labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub kind: EffectiveKind,
    pub spins: usize,
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// `±1`, or `None` where `|⟨P⟩| ≤ 0.99` ("mixed"). Absent when the
    /// generator carries longitudinal fields.
    pub parity: Option<Vec<Option<i8>>>,
    /// Domain-wall sector holding the largest weight of each eigenstate.
    pub domain_walls: Vec<u32>,
    /// That largest weight.
    pub domain_wall_weight: Vec<f64>,
    /// `E_1 − E_0`.
    pub delta: f64,
}

impl SpectrumReport {
    /// Splitting of the two highest levels.
    pub fn top_delta(&self) -> f64 {
        let n = self.eigenvalues.len();
        if n < 2 {
            0.0
        } else {
            self.eigenvalues[n - 1] - self.eigenvalues[n - 2]
        }
    }
}

/// Dense diagonalisation with labels. `with_parity` asks for parity labels,
/// which are only defined when no longitudinal field breaks the flip
/// symmetry.
pub fn spectrum_report(h: &EffectiveHamiltonian, with_parity: bool) -> Result<SpectrumReport> {
    let defect = h.matrix().hermiticity_defect();
    if defect > 1e-12 {
        return Err(Error::NotHermitian { defect });
    }
    if with_parity && h.has_longitudinal_field() {
        return Err(Error::ParityUndefined);
    }
    let eig = h.eigen()?;
    let spins = h.spins();
    let dim = 1usize << spins;
    let mask = full_mask(spins);
    let walls: Vec<u32> = (0..dim).map(|b| domain_wall_number(BasisIndex(b), spins)).collect();
    let sectors = spins.max(1);

    let mut parity = Vec::with_capacity(dim);
    let mut domain_walls = Vec::with_capacity(dim);
    let mut domain_wall_weight = Vec::with_capacity(dim);
    let mut weights = vec![0.0; sectors];
    for k in 0..dim {
        weights.iter_mut().for_each(|w| *w = 0.0);
        let mut p = 0.0;
        for b in 0..dim {
            let v = eig.vectors[(b, k)];
            weights[walls[b] as usize] += v.norm_sqr();
            p += (v.conj() * eig.vectors[(b ^ mask, k)]).re;
        }
        // ties go to the lower sector
        let (sector, weight) = weights
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (s, w)| if *w > best.1 { (s, *w) } else { best });
        domain_walls.push(sector as u32);
        domain_wall_weight.push(weight);
        parity.push(if p.abs() > PARITY_LABEL_THRESHOLD {
            Some(if p > 0.0 { 1 } else { -1 })
        } else {
            None
        });
    }
    let delta = if dim > 1 { eig.values[1] - eig.values[0] } else { 0.0 };
    Ok(SpectrumReport {
        kind: h.kind(),
        spins,
        eigenvalues: eig.values,
        parity: with_parity.then_some(parity),
        domain_walls,
        domain_wall_weight,
        delta,
    })
}
