//! The one-cycle operator `U_F = (⊗_i R_x(θ_i)) · e^{−i H_int t1}` and
//! stroboscopic evolution on period grids.
//!
//! Three interchangeable long-horizon strategies are provided:
//!
//! - [`Strategy::Step`] applies the factored cycle `n` times, `O(n L 2^L)`.
//! - [`Strategy::BinaryPower`] keeps `U^{2^j}` for increasing `j` and applies
//!   it to every sample whose period index has bit `j` set.
//! - [`Strategy::Spectral`] evaluates `V e^{iφ n} V† ψ` from one unitary
//!   eigendecomposition.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::basis::{check_spin_count, StateVector, MAX_DENSE_SPINS, MAX_SPINS};
use crate::linalg::{self, CMatrix, HermitianEigen, UnitaryEigen};
use crate::model::{interaction_diagonal, EffectiveHamiltonian, FloquetParams, LatticeSpec};
use crate::{Error, Result};

/// Largest period index any grid may reach.
pub const MAX_PERIOD: u64 = 1_000_000_000_000;

/// Powers `U^{2^j}` are re-orthonormalised once their unitarity defect
/// exceeds this.
const REORTHONORMALIZE_ABOVE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleOptions {
    pub dense: bool,
    pub spectral: bool,
}

impl BundleOptions {
    /// Forms needed by `strategy`.
    pub fn for_strategy(strategy: Strategy) -> Self {
        match strategy {
            Strategy::Step => BundleOptions::default(),
            Strategy::BinaryPower => BundleOptions { dense: true, spectral: false },
            Strategy::Spectral => BundleOptions { dense: true, spectral: true },
        }
    }
}

#[derive(Clone, Debug)]
pub struct PropagatorBundle {
    spins: usize,
    interaction_phases: Vec<C64>,
    rotations: Vec<f64>,
    dense: Option<CMatrix>,
    spectral: Option<UnitaryEigen>,
}

pub fn build_bundle(spec: &LatticeSpec, params: &FloquetParams, options: BundleOptions) -> Result<PropagatorBundle> {
    check_spin_count(spec.spins(), MAX_SPINS)?;
    let t1 = params.t1();
    let interaction_phases = interaction_diagonal(spec)
        .into_iter()
        .map(|e| C64::from_polar(1.0, -e * t1))
        .collect();
    let mut bundle = PropagatorBundle {
        spins: spec.spins(),
        interaction_phases,
        rotations: spec.rotation_angles(),
        dense: None,
        spectral: None,
    };
    if options.dense || options.spectral {
        bundle.dense = Some(bundle.dense_matrix()?);
    }
    if options.spectral {
        bundle.spectral = Some(diagonalize_unitary(&bundle)?);
    }
    Ok(bundle)
}

impl PropagatorBundle {
    pub fn spins(&self) -> usize {
        self.spins
    }

    pub fn dim(&self) -> usize {
        1 << self.spins
    }

    pub fn interaction_phases(&self) -> &[C64] {
        &self.interaction_phases
    }

    pub fn rotations(&self) -> &[f64] {
        &self.rotations
    }

    pub fn dense(&self) -> Option<&CMatrix> {
        self.dense.as_ref()
    }

    pub fn spectral(&self) -> Option<&UnitaryEigen> {
        self.spectral.as_ref()
    }

    /// Adds whatever `strategy` needs and is still missing.
    pub fn prepare(&mut self, strategy: Strategy) -> Result<()> {
        let wanted = BundleOptions::for_strategy(strategy);
        if wanted.dense && self.dense.is_none() {
            self.dense = Some(self.dense_matrix()?);
        }
        if wanted.spectral && self.spectral.is_none() {
            self.spectral = Some(diagonalize_unitary(self)?);
        }
        Ok(())
    }

    /// One cycle applied in place: interaction phases, then the site
    /// rotations by pairwise amplitude mixing.
    pub fn step_in_place(&self, amplitudes: &mut [C64]) {
        debug_assert_eq!(amplitudes.len(), self.dim());
        for (a, p) in amplitudes.iter_mut().zip(&self.interaction_phases) {
            *a *= p;
        }
        for (bit, theta) in self.rotations.iter().enumerate() {
            rotate_site(amplitudes, bit, *theta);
        }
    }

    /// `U_F` as a dense matrix, column `k` being `U_F |k⟩`.
    pub fn dense_matrix(&self) -> Result<CMatrix> {
        check_spin_count(self.spins, MAX_DENSE_SPINS).map_err(|_| Error::DenseCap {
            spins: self.spins,
            cap: MAX_DENSE_SPINS,
        })?;
        let dim = self.dim();
        let mut u = CMatrix::zeros(dim, dim);
        let mut column = vec![C64::new(0.0, 0.0); dim];
        for k in 0..dim {
            column.iter_mut().for_each(|c| *c = C64::new(0.0, 0.0));
            column[k] = C64::new(1.0, 0.0);
            self.step_in_place(&mut column);
            for (r, value) in column.iter().enumerate() {
                u[(r, k)] = *value;
            }
        }
        Ok(u)
    }
}

/// `R_x(θ) = cos(θ/2) I − i sin(θ/2) σ_x` on one bit.
fn rotate_site(amplitudes: &mut [C64], bit: usize, theta: f64) {
    let (s, c) = (0.5 * theta).sin_cos();
    let mix = C64::new(0.0, -s);
    let stride = 1usize << bit;
    for block in amplitudes.chunks_exact_mut(2 * stride) {
        let (low, high) = block.split_at_mut(stride);
        for (a, b) in low.iter_mut().zip(high.iter_mut()) {
            let (x, y) = (*a, *b);
            *a = x * c + y * mix;
            *b = x * mix + y * c;
        }
    }
}

fn check_dims(state: &StateVector, bundle: &PropagatorBundle) -> Result<()> {
    if state.spins() != bundle.spins {
        Err(Error::LengthMismatch {
            expected: bundle.dim(),
            found: state.dim(),
        })
    } else {
        Ok(())
    }
}

pub fn floquet_step(state: &StateVector, bundle: &PropagatorBundle) -> Result<StateVector> {
    check_dims(state, bundle)?;
    let mut next = state.clone();
    bundle.step_in_place(next.amplitudes_mut());
    Ok(next)
}

/// Eigendecomposition of the dense form of `bundle`.
pub fn diagonalize_unitary(bundle: &PropagatorBundle) -> Result<UnitaryEigen> {
    let dense = bundle.dense.as_ref().ok_or(Error::MissingForm {
        strategy: "spectral",
        form: "dense",
    })?;
    linalg::diagonalize_unitary(dense)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Step,
    BinaryPower,
    Spectral,
}

impl Strategy {
    /// Spectral up to 12 spins, binary powering up to the dense cap,
    /// stepping beyond.
    pub fn default_for(spins: usize) -> Self {
        match spins {
            0..=12 => Strategy::Spectral,
            13..=MAX_DENSE_SPINS => Strategy::BinaryPower,
            _ => Strategy::Step,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Step => "step",
            Strategy::BinaryPower => "binary-power",
            Strategy::Spectral => "spectral",
        }
    }
}

/// Strictly increasing stroboscopic sample points `n` (time `nT`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    periods: Vec<u64>,
    even_only: bool,
    points_per_decade: Option<u32>,
}

impl TimeGrid {
    pub fn from_periods(periods: Vec<u64>, even_only: bool) -> Result<Self> {
        if periods.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter("grid periods must increase strictly".into()));
        }
        if even_only && periods.iter().any(|n| n % 2 != 0) {
            return Err(Error::InvalidParameter("odd period in an even-only grid".into()));
        }
        if let Some(&last) = periods.last() {
            if last > MAX_PERIOD {
                return Err(Error::PeriodOverflow {
                    period: last,
                    max: MAX_PERIOD,
                });
            }
        }
        Ok(TimeGrid {
            periods,
            even_only,
            points_per_decade: None,
        })
    }

    /// `start, start + step, …` up to and including `stop`.
    pub fn linear(start: u64, stop: u64, step: u64) -> Result<Self> {
        if step == 0 {
            return Err(Error::InvalidParameter("linear grid step must be positive".into()));
        }
        let periods: Vec<u64> = (start..=stop).step_by(step as usize).collect();
        let even_only = start % 2 == 0 && step % 2 == 0;
        TimeGrid::from_periods(periods, even_only)
    }

    /// About `ppd` points per decade between `start` and `stop` (both
    /// included after rounding), rounded to even indices when asked.
    pub fn log(start: u64, stop: u64, ppd: u32, even_only: bool) -> Result<Self> {
        if start == 0 || stop < start || ppd == 0 {
            return Err(Error::InvalidParameter(format!(
                "log grid needs 0 < start ≤ stop and ppd > 0, got start={start}, stop={stop}, ppd={ppd}"
            )));
        }
        if stop > MAX_PERIOD {
            return Err(Error::PeriodOverflow {
                period: stop,
                max: MAX_PERIOD,
            });
        }
        let round = |x: f64| -> u64 {
            let n = x.round() as u64;
            if even_only {
                // nearest even, ties upward
                (n + 1) & !1
            } else {
                n
            }
        };
        let (lo, hi) = ((start as f64).log10(), (stop as f64).log10());
        let count = ((hi - lo) * ppd as f64).ceil() as u64;
        let mut periods = Vec::with_capacity(count as usize + 1);
        for k in 0..=count {
            let x = 10f64.powf(lo + (hi - lo) * k as f64 / count.max(1) as f64);
            let n = round(x).clamp(round(start as f64), stop);
            if periods.last().map_or(true, |last| n > *last) && (!even_only || n % 2 == 0) {
                periods.push(n);
            }
        }
        let mut grid = TimeGrid::from_periods(periods, even_only)?;
        grid.points_per_decade = Some(ppd);
        Ok(grid)
    }

    /// Even indices `2, 4, …, 200` followed by an even log grid with 30
    /// points per decade up to `stop`.
    pub fn default_to(stop: u64) -> Result<Self> {
        let linear_end = stop.min(200);
        let mut periods: Vec<u64> = (2..=linear_end).step_by(2).collect();
        if stop > 200 {
            let tail = TimeGrid::log(200, stop, 30, true)?;
            periods.extend(tail.periods.into_iter().filter(|n| *n > 200));
        }
        let mut grid = TimeGrid::from_periods(periods, true)?;
        grid.points_per_decade = Some(30);
        Ok(grid)
    }

    /// `self` with `n = 0` prepended.
    pub fn with_origin(mut self) -> Self {
        if self.periods.first() != Some(&0) {
            self.periods.insert(0, 0);
        }
        self
    }

    /// Points with `n ≤ max`.
    pub fn truncated(&self, max: u64) -> Self {
        TimeGrid {
            periods: self.periods.iter().copied().filter(|n| *n <= max).collect(),
            even_only: self.even_only,
            points_per_decade: self.points_per_decade,
        }
    }

    pub fn periods(&self) -> &[u64] {
        &self.periods
    }

    pub fn len(&self) -> usize {
        self.periods.len()
    }

    pub fn is_empty(&self) -> bool {
        self.periods.is_empty()
    }

    pub fn even_only(&self) -> bool {
        self.even_only
    }

    pub fn points_per_decade(&self) -> Option<u32> {
        self.points_per_decade
    }

    pub fn max_period(&self) -> u64 {
        self.periods.last().copied().unwrap_or(0)
    }
}

impl Default for TimeGrid {
    fn default() -> Self {
        TimeGrid::default_to(10_000_000_000).expect("default grid is valid")
    }
}

/// Calls `observer(k, n_k, ψ(n_k))` for every grid point in order.
pub fn evolve_on_grid<F>(
    initial: &StateVector,
    bundle: &PropagatorBundle,
    grid: &TimeGrid,
    strategy: Strategy,
    mut observer: F,
) -> Result<()>
where
    F: FnMut(usize, u64, &StateVector) -> Result<()>,
{
    check_dims(initial, bundle)?;
    if grid.max_period() > MAX_PERIOD {
        return Err(Error::PeriodOverflow {
            period: grid.max_period(),
            max: MAX_PERIOD,
        });
    }
    match strategy {
        Strategy::Step => {
            let mut state = initial.clone();
            let mut at = 0u64;
            for (k, &n) in grid.periods().iter().enumerate() {
                while at < n {
                    bundle.step_in_place(state.amplitudes_mut());
                    at += 1;
                }
                observer(k, n, &state)?;
            }
            Ok(())
        }
        Strategy::BinaryPower => {
            let dense = bundle.dense.as_ref().ok_or(Error::MissingForm {
                strategy: "binary-power",
                form: "dense",
            })?;
            let states = binary_power_states(initial, dense, grid.periods());
            for (k, (n, amplitudes)) in grid.periods().iter().zip(states).enumerate() {
                observer(k, *n, &StateVector::from_raw(initial.spins(), amplitudes))?;
            }
            Ok(())
        }
        Strategy::Spectral => {
            let spectral = bundle.spectral.as_ref().ok_or(Error::MissingForm {
                strategy: "spectral",
                form: "spectral",
            })?;
            spectral_states(initial, &spectral.phases, &spectral.vectors, grid.periods(), |k, state| {
                observer(k, grid.periods()[k], state)
            })
        }
    }
}

/// States at every grid point, collected.
pub fn evolve_states(
    initial: &StateVector,
    bundle: &PropagatorBundle,
    grid: &TimeGrid,
    strategy: Strategy,
) -> Result<Vec<StateVector>> {
    let mut out = Vec::with_capacity(grid.len());
    evolve_on_grid(initial, bundle, grid, strategy, |_, _, s| {
        out.push(s.clone());
        Ok(())
    })?;
    Ok(out)
}

/// Visits `U^{2^j}` for `j = 0..=max_exponent`, re-orthonormalising each
/// power whose unitarity defect has grown past `1e−9`.
pub fn power_ladder(u: &CMatrix, max_exponent: u32, mut visit: impl FnMut(u32, &CMatrix)) {
    let mut power = u.clone();
    for j in 0..=max_exponent {
        if j > 0 {
            power = power.matmul(&power);
            reorthonormalize(&mut power);
        }
        visit(j, &power);
    }
}

fn reorthonormalize(m: &mut CMatrix) {
    // Newton–Schulz converges quadratically from a near-unitary start
    for _ in 0..4 {
        if m.unitarity_defect() <= REORTHONORMALIZE_ABOVE {
            break;
        }
        *m = m.newton_schulz_step();
    }
}

/// Every sample shares one ladder of powers; sample `k` picks up `U^{2^j}`
/// whenever bit `j` of `n_k` is set, so each power is built once.
fn binary_power_states(initial: &StateVector, u: &CMatrix, periods: &[u64]) -> Vec<Vec<C64>> {
    let mut states: Vec<Vec<C64>> = periods.iter().map(|_| initial.amplitudes().to_vec()).collect();
    let top = periods.iter().copied().max().unwrap_or(0);
    if top == 0 {
        return states;
    }
    let max_exponent = 63 - top.leading_zeros();
    let mut scratch = vec![C64::new(0.0, 0.0); u.rows()];
    power_ladder(u, max_exponent, |j, power| {
        for (state, n) in states.iter_mut().zip(periods) {
            if n >> j & 1 == 1 {
                power.matvec_into(state, &mut scratch);
                state.copy_from_slice(&scratch);
            }
        }
    });
    states
}

/// Samples evolved together, `BLOCK` columns per matrix product.
fn spectral_states<F>(initial: &StateVector, phases: &[f64], vectors: &CMatrix, periods: &[u64], mut emit: F) -> Result<()>
where
    F: FnMut(usize, &StateVector) -> Result<()>,
{
    const BLOCK: usize = 32;
    let dim = vectors.rows();
    let coefficients = vectors.adjoint_matvec(initial.amplitudes());
    let mut column = vec![C64::new(0.0, 0.0); dim];
    for (chunk_index, chunk) in periods.chunks(BLOCK).enumerate() {
        let width = chunk.len();
        let rotated = CMatrix::from_fn(dim, width, |r, c| {
            coefficients[r] * C64::from_polar(1.0, phase_times(phases[r], chunk[c]))
        });
        let states = vectors.matmul(&rotated);
        for c in 0..width {
            let k = chunk_index * BLOCK + c;
            if chunk[c] == 0 {
                emit(k, initial)?;
                continue;
            }
            for (r, value) in column.iter_mut().enumerate() {
                *value = states[(r, c)];
            }
            emit(k, &StateVector::from_raw(initial.spins(), column.clone()))?;
        }
    }
    Ok(())
}

/// `φ n` modulo 2π. The eigenphase itself carries an absolute error near
/// `1e−15`, so phases at `n ~ 1e12` are good to roughly `1e−3` whatever the
/// reduction.
fn phase_times(phi: f64, n: u64) -> f64 {
    (phi * n as f64) % core::f64::consts::TAU
}

/// `e^{−iHt}` through one Hermitian eigendecomposition.
#[derive(Clone, Debug)]
pub struct EffectivePropagator {
    spins: usize,
    eigen: HermitianEigen,
}

impl EffectivePropagator {
    pub fn new(h: &EffectiveHamiltonian) -> Result<Self> {
        let defect = h.matrix().hermiticity_defect();
        if defect > 1e-12 {
            return Err(Error::NotHermitian { defect });
        }
        Ok(EffectivePropagator {
            spins: h.spins(),
            eigen: h.eigen()?,
        })
    }

    pub fn energies(&self) -> &[f64] {
        &self.eigen.values
    }

    pub fn evolve(&self, state: &StateVector, t: f64) -> Result<StateVector> {
        if state.spins() != self.spins {
            return Err(Error::LengthMismatch {
                expected: 1 << self.spins,
                found: state.dim(),
            });
        }
        let mut c = self.eigen.vectors.adjoint_matvec(state.amplitudes());
        for (ck, e) in c.iter_mut().zip(&self.eigen.values) {
            *ck *= C64::from_polar(1.0, -e * t);
        }
        Ok(StateVector::from_raw(self.spins, self.eigen.vectors.matvec(&c)))
    }
}

/// `e^{−iHt}|ψ⟩` at each physical time `t`.
pub fn effective_evolve(state: &StateVector, h: &EffectiveHamiltonian, times: &[f64]) -> Result<Vec<StateVector>> {
    let propagator = EffectivePropagator::new(h)?;
    times.iter().map(|t| propagator.evolve(state, *t)).collect()
}
