//! Lattices, drive parameters, disorder, and the Hamiltonians of the
//! two-step cycle.
//!
//! One cycle of period `T = t1 + π` applies
//!
//! ```text
//! H_int = Σ_edges J_ij s_z^i s_z^j + Σ_i h_i s_z^i      for t1
//! H_x   = Σ_i (1 − ε_i) s_x^i                          for π
//! ```
//!
//! with `s = σ/2`. The effective (average) Hamiltonians below are the
//! leading terms of the Magnus expansion of that cycle.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{check_spin_count, z_of_bit, BasisIndex, MAX_DENSE_SPINS, MAX_SPINS};
use crate::linalg::{eigh, CMatrix, HermitianEigen};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Geometry {
    /// Open chain, metronome on site 1.
    ChainBoundary,
    /// Open chain, metronome on the central site `⌊(L+1)/2⌋`.
    ChainCenter,
    /// Open chain on sites `1..L−1`; the metronome is site `L`, hanging off
    /// the chain's central site `⌊L/2⌋`.
    External,
    /// Arbitrary coupling graph read from a file.
    Custom,
}

impl Geometry {
    pub fn min_spins(self) -> usize {
        match self {
            Geometry::ChainBoundary => 2,
            Geometry::ChainCenter => 3,
            Geometry::External => 4,
            Geometry::Custom => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Geometry::ChainBoundary => "chain-boundary",
            Geometry::ChainCenter => "chain-center",
            Geometry::External => "external",
            Geometry::Custom => "custom",
        }
    }

    /// Site carrying the metronome for a preset of `spins` sites.
    pub fn metronome_site(self, spins: usize) -> Option<usize> {
        match self {
            Geometry::ChainBoundary => Some(1),
            Geometry::ChainCenter => Some((spins + 1) / 2),
            Geometry::External => Some(spins),
            Geometry::Custom => None,
        }
    }
}

/// Ising bond between sites `a` and `b` (1-based).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub coupling: f64,
}

impl Edge {
    pub fn new(a: usize, b: usize, coupling: f64) -> Self {
        Edge { a, b, coupling }
    }

    pub fn touches(&self, site: usize) -> bool {
        self.a == site || self.b == site
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    spins: usize,
    geometry: Geometry,
    edges: Vec<Edge>,
    fields: Vec<f64>,
    deviations: Vec<f64>,
    metronome_site: Option<usize>,
}

impl LatticeSpec {
    pub fn new(
        spins: usize,
        geometry: Geometry,
        edges: Vec<Edge>,
        fields: Vec<f64>,
        deviations: Vec<f64>,
        metronome_site: Option<usize>,
    ) -> Result<Self> {
        let spec = LatticeSpec {
            spins,
            geometry,
            edges,
            fields,
            deviations,
            metronome_site,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.spins;
        check_spin_count(l, MAX_SPINS)?;
        if l < self.geometry.min_spins() {
            return Err(Error::InvalidLattice(format!(
                "{} needs at least {} spins, got {l}",
                self.geometry.name(),
                self.geometry.min_spins()
            )));
        }
        for (what, len) in [("fields", self.fields.len()), ("deviations", self.deviations.len())] {
            if len != l {
                return Err(Error::InvalidLattice(format!(
                    "{what} has {len} entries for {l} spins"
                )));
            }
        }
        for (k, e) in self.edges.iter().enumerate() {
            for site in [e.a, e.b] {
                if site == 0 || site > l {
                    return Err(Error::SiteOutOfRange { site, spins: l });
                }
            }
            if e.a == e.b {
                return Err(Error::InvalidLattice(format!("self-edge on site {}", e.a)));
            }
            if !e.coupling.is_finite() {
                return Err(Error::InvalidLattice(format!("edge ({}, {}) has non-finite coupling", e.a, e.b)));
            }
            let key = (e.a.min(e.b), e.a.max(e.b));
            if self.edges[..k].iter().any(|f| (f.a.min(f.b), f.a.max(f.b)) == key) {
                return Err(Error::InvalidLattice(format!("duplicate edge ({}, {})", key.0, key.1)));
            }
        }
        if let Some((i, h)) = self.fields.iter().enumerate().find(|(_, h)| !h.is_finite()) {
            return Err(Error::InvalidLattice(format!("field on site {} is {h}", i + 1)));
        }
        if let Some((i, eps)) = self
            .deviations
            .iter()
            .enumerate()
            .find(|(_, e)| !(0.0..=1.0).contains(*e))
        {
            return Err(Error::InvalidLattice(format!(
                "deviation on site {} is {eps}, outside [0, 1]",
                i + 1
            )));
        }
        if let Some(m) = self.metronome_site {
            if m == 0 || m > l {
                return Err(Error::SiteOutOfRange { site: m, spins: l });
            }
        }
        Ok(())
    }

    pub fn spins(&self) -> usize {
        self.spins
    }

    pub fn dim(&self) -> usize {
        1 << self.spins
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn fields(&self) -> &[f64] {
        &self.fields
    }

    pub fn deviations(&self) -> &[f64] {
        &self.deviations
    }

    pub fn metronome_site(&self) -> Option<usize> {
        self.metronome_site
    }

    /// Rotation angle `π(1 − ε_i)` of every site, in site order.
    pub fn rotation_angles(&self) -> Vec<f64> {
        self.deviations.iter().map(|e| PI * (1.0 - e)).collect()
    }

    pub fn has_fields(&self) -> bool {
        self.fields.iter().any(|h| *h != 0.0)
    }

    /// Copy with new deviations; geometry and couplings untouched.
    pub fn with_deviations(&self, deviations: Vec<f64>) -> Result<Self> {
        let mut spec = self.clone();
        spec.deviations = deviations;
        spec.validate()?;
        Ok(spec)
    }

    /// Copy with every field set to zero.
    pub fn without_fields(&self) -> Self {
        let mut spec = self.clone();
        spec.fields.iter_mut().for_each(|h| *h = 0.0);
        spec
    }
}

/// Preset lattices with uniform coupling `j`, field `h`, bulk deviation `eps`
/// and metronome deviation `eps_prime`.
pub fn build_geometry(
    geometry: Geometry,
    spins: usize,
    j: f64,
    h: f64,
    eps: f64,
    eps_prime: f64,
) -> Result<LatticeSpec> {
    if geometry == Geometry::Custom {
        return Err(Error::InvalidLattice(
            "custom lattices need an explicit edge list".into(),
        ));
    }
    if spins < geometry.min_spins() {
        return Err(Error::InvalidLattice(format!(
            "{} needs at least {} spins, got {spins}",
            geometry.name(),
            geometry.min_spins()
        )));
    }
    for (name, value) in [("J", j), ("h", h), ("epsilon", eps), ("epsilon_prime", eps_prime)] {
        if !value.is_finite() {
            return Err(Error::InvalidParameter(format!("{name} = {value}")));
        }
    }
    let chain_len = if geometry == Geometry::External { spins - 1 } else { spins };
    let mut edges: Vec<Edge> = (1..chain_len).map(|i| Edge::new(i, i + 1, j)).collect();
    if geometry == Geometry::External {
        edges.push(Edge::new(spins / 2, spins, j));
    }
    let metronome = geometry.metronome_site(spins);
    let mut deviations = vec![eps; spins];
    if let Some(m) = metronome {
        deviations[m - 1] = eps_prime;
    }
    LatticeSpec::new(spins, geometry, edges, vec![h; spins], deviations, metronome)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FloquetParams {
    t1: f64,
}

impl FloquetParams {
    pub fn new(t1: f64) -> Result<Self> {
        if t1.is_finite() && t1 > 0.0 {
            Ok(FloquetParams { t1 })
        } else {
            Err(Error::InvalidParameter(format!("t1 must be positive, got {t1}")))
        }
    }

    pub fn t1(&self) -> f64 {
        self.t1
    }

    pub fn drive_duration(&self) -> f64 {
        PI
    }

    /// `T = t1 + π`.
    pub fn period(&self) -> f64 {
        self.t1 + PI
    }
}

impl Default for FloquetParams {
    fn default() -> Self {
        FloquetParams { t1: 1.0 }
    }
}

/// I.i.d. uniform couplings and fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisorderDistribution {
    pub j_range: (f64, f64),
    pub h_range: (f64, f64),
    pub realizations: usize,
    pub base_seed: u64,
}

impl DisorderDistribution {
    pub fn new(j_range: (f64, f64), h_range: (f64, f64), realizations: usize, base_seed: u64) -> Result<Self> {
        let dist = DisorderDistribution {
            j_range,
            h_range,
            realizations,
            base_seed,
        };
        dist.validate()?;
        Ok(dist)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("J", self.j_range), ("h", self.h_range)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidParameter(format!("{name} range [{lo}, {hi}]")));
            }
        }
        if self.realizations == 0 {
            return Err(Error::InvalidParameter("zero disorder realizations".into()));
        }
        Ok(())
    }
}

/// Seed of item `index` in a family keyed by `base`: two rounds of the
/// SplitMix64 finaliser, so neighbouring indices give unrelated streams.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(mix(base.wrapping_add(0x9e37_79b9_7f4a_7c15)) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03))
}

/// Realisation `index` of `dist` on the graph of `spec`: couplings drawn in
/// edge order, then fields in site order. Deviations are kept.
pub fn sample_disorder(spec: &LatticeSpec, dist: &DisorderDistribution, index: u64) -> LatticeSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(dist.base_seed, index));
    let mut uniform = |(lo, hi): (f64, f64)| lo + (hi - lo) * rng.gen::<f64>();
    let mut out = spec.clone();
    for e in &mut out.edges {
        e.coupling = uniform(dist.j_range);
    }
    for h in &mut out.fields {
        *h = uniform(dist.h_range);
    }
    out
}

/// Eigenvalue of `Σ J s_z s_z` on a basis state, without fields.
fn bond_energy(index: usize, spec: &LatticeSpec) -> f64 {
    spec.edges
        .iter()
        .map(|e| 0.25 * e.coupling * z_of_bit(index, e.a - 1) * z_of_bit(index, e.b - 1))
        .sum()
}

fn field_energy(index: usize, spec: &LatticeSpec) -> f64 {
    spec.fields
        .iter()
        .enumerate()
        .map(|(i, h)| 0.5 * h * z_of_bit(index, i))
        .sum()
}

/// Eigenvalue of `H_int` on a computational basis state.
pub fn interaction_energy(index: BasisIndex, spec: &LatticeSpec) -> f64 {
    bond_energy(index.0, spec) + field_energy(index.0, spec)
}

/// `H_int` on every basis state, in index order.
pub fn interaction_diagonal(spec: &LatticeSpec) -> Vec<f64> {
    (0..spec.dim()).map(|b| interaction_energy(BasisIndex(b), spec)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EffectiveKind {
    OnePeriodAverage,
    TwoPeriodAverage,
    Bulk,
    FirstOrderMagnus,
}

impl EffectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            EffectiveKind::OnePeriodAverage => "one-period-average",
            EffectiveKind::TwoPeriodAverage => "two-period-average",
            EffectiveKind::Bulk => "bulk",
            EffectiveKind::FirstOrderMagnus => "first-order-magnus",
        }
    }
}

/// Which way the frozen metronome points when it is traded for a static
/// field on its neighbours.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetronomeOrientation {
    Up,
    Down,
}

impl MetronomeOrientation {
    pub fn sign(self) -> f64 {
        match self {
            MetronomeOrientation::Up => 1.0,
            MetronomeOrientation::Down => -1.0,
        }
    }
}

/// Dense Hermitian generator together with the lattice it acts on.
///
/// For [`EffectiveKind::Bulk`] the lattice is the relabelled bulk (the
/// original sites `2..=L` become `1..=L−1`).
#[derive(Clone, Debug)]
pub struct EffectiveHamiltonian {
    kind: EffectiveKind,
    matrix: CMatrix,
    spec: LatticeSpec,
    params: FloquetParams,
    longitudinal: bool,
}

impl EffectiveHamiltonian {
    pub fn kind(&self) -> EffectiveKind {
        self.kind
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn spec(&self) -> &LatticeSpec {
        &self.spec
    }

    pub fn params(&self) -> &FloquetParams {
        &self.params
    }

    pub fn spins(&self) -> usize {
        self.spec.spins
    }

    /// Whether a `z` field (which breaks the global spin-flip symmetry)
    /// enters the generator.
    pub fn has_longitudinal_field(&self) -> bool {
        self.longitudinal
    }

    pub fn eigen(&self) -> Result<HermitianEigen> {
        eigh(&self.matrix)
    }
}

fn check_dense(spec: &LatticeSpec) -> Result<()> {
    if spec.spins > MAX_DENSE_SPINS {
        Err(Error::DenseCap {
            spins: spec.spins,
            cap: MAX_DENSE_SPINS,
        })
    } else {
        Ok(())
    }
}

/// `diag(d) + Σ_i x_i s_x^i` as a dense matrix.
fn diagonal_plus_transverse(spins: usize, diagonal: &[f64], transverse: &[f64]) -> CMatrix {
    let dim = 1usize << spins;
    let mut m = CMatrix::from_real_diagonal(diagonal);
    for (bit, x) in transverse.iter().enumerate() {
        if *x == 0.0 {
            continue;
        }
        let element = C64::new(0.5 * x, 0.0);
        for b in 0..dim {
            m[(b, b ^ (1 << bit))] += element;
        }
    }
    m
}

/// `H = (1/T)[t1 Σ J s_z s_z − π Σ ε_i s_x^i]`. Fields average out over
/// two cycles on every site, the metronome included.
pub fn two_period_average_hamiltonian(spec: &LatticeSpec, params: &FloquetParams) -> Result<EffectiveHamiltonian> {
    check_dense(spec)?;
    let (t1, period) = (params.t1, params.period());
    let diagonal: Vec<f64> = (0..spec.dim()).map(|b| t1 * bond_energy(b, spec) / period).collect();
    let transverse: Vec<f64> = spec.deviations.iter().map(|e| -PI * e / period).collect();
    Ok(EffectiveHamiltonian {
        kind: EffectiveKind::TwoPeriodAverage,
        matrix: diagonal_plus_transverse(spec.spins, &diagonal, &transverse),
        spec: spec.clone(),
        params: *params,
        longitudinal: false,
    })
}

/// `H = (1/T)[t1 H_int + π Σ (1 − ε_i) s_x^i]`.
pub fn one_period_average_hamiltonian(spec: &LatticeSpec, params: &FloquetParams) -> Result<EffectiveHamiltonian> {
    check_dense(spec)?;
    let (t1, period) = (params.t1, params.period());
    let diagonal: Vec<f64> = interaction_diagonal(spec).iter().map(|e| t1 * e / period).collect();
    let transverse: Vec<f64> = spec.deviations.iter().map(|e| PI * (1.0 - e) / period).collect();
    Ok(EffectiveHamiltonian {
        kind: EffectiveKind::OnePeriodAverage,
        matrix: diagonal_plus_transverse(spec.spins, &diagonal, &transverse),
        spec: spec.clone(),
        params: *params,
        longitudinal: spec.has_fields(),
    })
}

/// Second Magnus term of the two-step cycle. With `H_int` on `[0, t1]` and
/// `H_x` on `(t1, T]` the time-ordered double integral reduces to
/// `π t1 [H_x, H_int]`, so `H⁽¹⁾ = (π t1 / 2T i) [H_x, H_int]`.
pub fn first_order_magnus(spec: &LatticeSpec, params: &FloquetParams) -> Result<EffectiveHamiltonian> {
    check_dense(spec)?;
    let (t1, period) = (params.t1, params.period());
    let zeros = vec![0.0; spec.dim()];
    let drive: Vec<f64> = spec.deviations.iter().map(|e| 1.0 - e).collect();
    let h_x = diagonal_plus_transverse(spec.spins, &zeros, &drive);
    let h_int = CMatrix::from_real_diagonal(&interaction_diagonal(spec));
    let prefactor = C64::new(0.0, -PI * t1 / (2.0 * period));
    Ok(EffectiveHamiltonian {
        kind: EffectiveKind::FirstOrderMagnus,
        matrix: h_x.commutator(&h_int).scale(prefactor),
        spec: spec.clone(),
        params: *params,
        longitudinal: spec.has_fields(),
    })
}

/// Two-period average on the bulk of a chain whose site-1 metronome is
/// frozen along `orientation`: each bond `J_1k s_z^1 s_z^k` becomes the
/// static field `h̃ s_z^k` with `h̃ = ±t1 J_1k / 2` (already multiplied by
/// `t1`, as it enters alongside `t1 Σ J s_z s_z`).
pub fn bulk_effective_hamiltonian(
    spec: &LatticeSpec,
    params: &FloquetParams,
    orientation: MetronomeOrientation,
) -> Result<EffectiveHamiltonian> {
    let sign = orientation.sign();
    bulk_hamiltonian_with(spec, params, |coupling| sign * params.t1 * coupling / 2.0)
}

/// [`bulk_effective_hamiltonian`] with the substituted field `h̃` given
/// explicitly for every neighbour of the metronome.
pub fn bulk_effective_hamiltonian_with_field(
    spec: &LatticeSpec,
    params: &FloquetParams,
    h_tilde: f64,
) -> Result<EffectiveHamiltonian> {
    bulk_hamiltonian_with(spec, params, |_| h_tilde)
}

fn bulk_hamiltonian_with(
    spec: &LatticeSpec,
    params: &FloquetParams,
    field_for: impl Fn(f64) -> f64,
) -> Result<EffectiveHamiltonian> {
    if spec.metronome_site != Some(1) || spec.spins < 2 {
        return Err(Error::InvalidLattice(
            "the bulk Hamiltonian needs a metronome on site 1".into(),
        ));
    }
    let bulk_spins = spec.spins - 1;
    let mut fields = vec![0.0; bulk_spins];
    let mut edges = Vec::new();
    for e in &spec.edges {
        if e.touches(1) {
            let other = if e.a == 1 { e.b } else { e.a };
            fields[other - 2] += field_for(e.coupling);
        } else {
            edges.push(Edge::new(e.a - 1, e.b - 1, e.coupling));
        }
    }
    let bulk = LatticeSpec::new(
        bulk_spins,
        Geometry::Custom,
        edges,
        fields,
        spec.deviations[1..].to_vec(),
        None,
    )?;
    check_dense(&bulk)?;

    let (t1, period) = (params.t1, params.period());
    // the substituted fields carry their own t1
    let diagonal: Vec<f64> = (0..bulk.dim())
        .map(|b| (t1 * bond_energy(b, &bulk) + field_energy(b, &bulk)) / period)
        .collect();
    let transverse: Vec<f64> = bulk.deviations.iter().map(|e| -PI * e / period).collect();
    Ok(EffectiveHamiltonian {
        kind: EffectiveKind::Bulk,
        matrix: diagonal_plus_transverse(bulk_spins, &diagonal, &transverse),
        longitudinal: bulk.has_fields(),
        spec: bulk,
        params: *params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::Spin;
    use crate::linalg::eigvalsh;

    fn chain(spins: usize, eps: f64, eps_prime: f64) -> LatticeSpec {
        build_geometry(Geometry::ChainBoundary, spins, 1.0, 0.0, eps, eps_prime).unwrap()
    }

    fn index(bits: &[Spin]) -> BasisIndex {
        BasisIndex::from_spins(bits)
    }

    /// Lowest splitting of `H_2P`.
    fn gap(spec: &LatticeSpec) -> f64 {
        let h = two_period_average_hamiltonian(spec, &FloquetParams::default()).unwrap();
        let values = eigvalsh(h.matrix()).unwrap();
        values[1] - values[0]
    }

    #[test]
    fn presets() {
        let s = build_geometry(Geometry::ChainBoundary, 14, 1.0, 0.0, 0.1, 1e-5).unwrap();
        assert_eq!(s.edges().len(), 13);
        assert_eq!(s.deviations()[0], 1e-5);
        assert!(s.deviations()[1..].iter().all(|e| *e == 0.1));

        let s = build_geometry(Geometry::ChainCenter, 13, 1.0, 0.0, 0.1, 1e-5).unwrap();
        assert_eq!(s.metronome_site(), Some(7));
        assert_eq!(s.deviations()[6], 1e-5);
        assert_eq!(s.deviations().iter().filter(|e| **e == 0.1).count(), 12);

        let s = build_geometry(Geometry::External, 14, 1.0, 0.0, 0.1, 1e-5).unwrap();
        assert_eq!(s.edges().len(), 13);
        assert!(s.edges()[..12].iter().all(|e| e.b == e.a + 1 && e.b <= 13));
        assert_eq!(s.edges()[12], Edge::new(7, 14, 1.0));
        assert_eq!(s.deviations()[13], 1e-5);
    }

    #[test]
    fn preset_minimum_sizes() {
        assert!(build_geometry(Geometry::ChainBoundary, 1, 1.0, 0.0, 0.1, 0.1).is_err());
        assert!(build_geometry(Geometry::ChainCenter, 2, 1.0, 0.0, 0.1, 0.1).is_err());
        assert!(build_geometry(Geometry::External, 3, 1.0, 0.0, 0.1, 0.1).is_err());
        assert!(build_geometry(Geometry::Custom, 5, 1.0, 0.0, 0.1, 0.1).is_err());
    }

    #[test]
    fn lattice_validation() {
        let ok = |edges: Vec<Edge>, eps: f64| {
            LatticeSpec::new(3, Geometry::Custom, edges, vec![0.0; 3], vec![eps; 3], None)
        };
        assert!(ok(vec![Edge::new(1, 2, 1.0), Edge::new(2, 3, 1.0)], 0.5).is_ok());
        assert!(ok(vec![Edge::new(1, 1, 1.0)], 0.5).is_err());
        assert!(ok(vec![Edge::new(1, 4, 1.0)], 0.5).is_err());
        assert!(ok(vec![Edge::new(1, 2, 1.0), Edge::new(2, 1, 1.0)], 0.5).is_err());
        assert!(ok(vec![], 1.5).is_err());
        assert!(ok(vec![], -0.1).is_err());
    }

    #[test]
    fn interaction_energy_examples() {
        use Spin::{Down as D, Up as U};
        let two = chain(2, 0.1, 0.1);
        assert_eq!(interaction_energy(index(&[U, U]), &two), 0.25);
        assert_eq!(interaction_energy(index(&[U, D]), &two), -0.25);
        let three = chain(3, 0.1, 0.1);
        assert_eq!(interaction_energy(index(&[U, D, U]), &three), -0.5);
        let fielded = LatticeSpec::new(2, Geometry::Custom, vec![Edge::new(1, 2, 1.0)], vec![1.0, 0.0], vec![0.1; 2], None).unwrap();
        assert_eq!(interaction_energy(index(&[U, U]), &fielded), 0.75);
    }

    #[test]
    fn two_period_average_elements() {
        let h = two_period_average_hamiltonian(&chain(2, 0.1, 0.1), &FloquetParams::default()).unwrap();
        let period = 1.0 + PI;
        // ⟨↑↓| H |↑↑⟩: site 2 is bit 1
        let element = h.matrix()[(0b10, 0b00)];
        assert!((element.re + PI * 0.1 / (2.0 * period)).abs() < 1e-15);
        assert_eq!(element.im, 0.0);
        assert!((h.matrix()[(0, 0)].re - 0.25 / period).abs() < 1e-15);
        assert!(h.matrix().hermiticity_defect() < 1e-12);
        // no element between states two flips apart
        assert_eq!(h.matrix()[(0b11, 0b00)], C64::new(0.0, 0.0));
    }

    #[test]
    fn two_period_average_is_diagonal_without_drive_error() {
        let h = two_period_average_hamiltonian(&chain(4, 0.0, 0.0), &FloquetParams::default()).unwrap();
        let m = h.matrix();
        for r in 0..16 {
            for c in 0..16 {
                if r != c {
                    assert_eq!(m[(r, c)], C64::new(0.0, 0.0));
                }
            }
        }
    }

    #[test]
    fn two_period_average_commutes_with_global_flip() {
        let spec = sample_disorder(
            &chain(5, 0.13, 0.02),
            &DisorderDistribution::new((0.5, 1.5), (-1.0, 1.0), 1, 9).unwrap(),
            0,
        );
        assert!(spec.has_fields());
        let h = two_period_average_hamiltonian(&spec, &FloquetParams::new(0.7).unwrap()).unwrap();
        let dim = 32;
        let flip = CMatrix::from_fn(dim, dim, |r, c| {
            if r == (c ^ (dim - 1)) {
                C64::new(1.0, 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        });
        assert!(h.matrix().commutator(&flip).max_abs() < 1e-12);
    }

    #[test]
    fn one_period_average_limits() {
        let params = FloquetParams::default();
        let period = params.period();
        // ε = 1: the drive term vanishes
        let spec = LatticeSpec::new(3, Geometry::Custom, vec![Edge::new(1, 2, 1.0), Edge::new(2, 3, 0.7)], vec![0.3, -0.2, 0.1], vec![1.0; 3], None).unwrap();
        let h = one_period_average_hamiltonian(&spec, &params).unwrap();
        let expected = CMatrix::from_real_diagonal(
            &interaction_diagonal(&spec).iter().map(|e| e / period).collect::<Vec<_>>(),
        );
        assert!(h.matrix().max_abs_diff(&expected) < 1e-15);

        let single = LatticeSpec::new(1, Geometry::Custom, vec![], vec![0.0], vec![0.0], None).unwrap();
        let values = eigvalsh(one_period_average_hamiltonian(&single, &params).unwrap().matrix()).unwrap();
        assert!((values[0] + PI / (2.0 * period)).abs() < 1e-15);
        assert!((values[1] - PI / (2.0 * period)).abs() < 1e-15);
    }

    #[test]
    fn one_period_average_two_site_regression() {
        // oracle: literal Kronecker construction of (t1 H_int + π Σ(1−ε) s_x)/T
        let spec = LatticeSpec::new(2, Geometry::Custom, vec![Edge::new(1, 2, 0.8)], vec![0.4, -0.6], vec![0.1, 0.3], None).unwrap();
        let params = FloquetParams::new(1.3).unwrap();
        let h = one_period_average_hamiltonian(&spec, &params).unwrap();
        let period = 1.3 + PI;
        let sz = [[0.5, 0.0], [0.0, -0.5]];
        let sx = [[0.0, 0.5], [0.5, 0.0]];
        let id = [[1.0, 0.0], [0.0, 1.0]];
        // kron(a, b) with site 2 as the high bit: element [(r2 r1), (c2 c1)] = b[r2][c2]·a[r1][c1]
        let kron = |a: [[f64; 2]; 2], b: [[f64; 2]; 2]| {
            let mut out = [[0.0; 4]; 4];
            for r in 0..4 {
                for c in 0..4 {
                    out[r][c] = a[r & 1][c & 1] * b[r >> 1][c >> 1];
                }
            }
            out
        };
        let terms = [
            (1.3 * 0.8, kron(sz, sz)),
            (1.3 * 0.4, kron(sz, id)),
            (1.3 * -0.6, kron(id, sz)),
            (PI * 0.9, kron(sx, id)),
            (PI * 0.7, kron(id, sx)),
        ];
        for r in 0..4 {
            for c in 0..4 {
                let expected: f64 = terms.iter().map(|(w, m)| w * m[r][c]).sum::<f64>() / period;
                assert!((h.matrix()[(r, c)] - C64::new(expected, 0.0)).norm() < 1e-15);
            }
        }
    }

    /// `(1/2Ti) ∫_0^T dt ∫_0^t dt' [H(t), H(t')]` by the midpoint rule, with
    /// `steps` cells on each half of the cycle.
    fn magnus_quadrature(spec: &LatticeSpec, params: &FloquetParams, steps: usize) -> CMatrix {
        let dim = spec.dim();
        let drive: Vec<f64> = spec.deviations().iter().map(|e| 1.0 - e).collect();
        let h_x = diagonal_plus_transverse(spec.spins(), &vec![0.0; dim], &drive);
        let h_int = CMatrix::from_real_diagonal(&interaction_diagonal(spec));
        let period = params.period();
        let cells = (0..steps)
            .map(|_| (&h_int, params.t1() / steps as f64))
            .chain((0..steps).map(|_| (&h_x, PI / steps as f64)));
        let mut acc = CMatrix::zeros(dim, dim);
        // ∫ H(t') dt' over the cells already passed; the diagonal cell
        // contributes [H, H] = 0
        let mut integral = CMatrix::zeros(dim, dim);
        for (h, dt) in cells {
            acc = acc.add_scaled(C64::new(dt, 0.0), &h.commutator(&integral));
            integral = integral.add_scaled(C64::new(dt, 0.0), h);
        }
        acc.scale(C64::new(0.0, -1.0 / (2.0 * period)))
    }

    #[test]
    fn first_order_magnus_matches_quadrature() {
        let params = FloquetParams::new(0.8).unwrap();
        for spins in [1, 2, 3] {
            let spec = sample_disorder(
                &LatticeSpec::new(
                    spins,
                    Geometry::Custom,
                    (1..spins).map(|i| Edge::new(i, i + 1, 1.0)).collect(),
                    vec![0.0; spins],
                    (0..spins).map(|i| 0.05 + 0.1 * i as f64).collect(),
                    None,
                )
                .unwrap(),
                &DisorderDistribution::new((0.5, 1.5), (-1.0, 1.0), 1, 4).unwrap(),
                spins as u64,
            );
            let h = first_order_magnus(&spec, &params).unwrap();
            assert!(h.matrix().hermiticity_defect() < 1e-12);
            let diff = h.matrix().max_abs_diff(&magnus_quadrature(&spec, &params, 500));
            assert!(diff < 1e-8, "spins {spins}: {diff:e}");
        }
    }

    #[test]
    fn first_order_magnus_vanishes_for_commuting_halves() {
        let single = LatticeSpec::new(1, Geometry::Custom, vec![], vec![0.0], vec![0.2], None).unwrap();
        let h = first_order_magnus(&single, &FloquetParams::default()).unwrap();
        assert_eq!(h.matrix().max_abs(), 0.0);
    }

    #[test]
    fn bulk_with_zero_field_is_two_period_average_of_the_bulk() {
        let spec = chain(6, 0.1, 1e-4);
        let params = FloquetParams::default();
        let bulk = bulk_effective_hamiltonian_with_field(&spec, &params, 0.0).unwrap();
        let reduced = two_period_average_hamiltonian(&chain(5, 0.1, 0.1), &params).unwrap();
        assert!(bulk.matrix().max_abs_diff(reduced.matrix()) < 1e-15);
        assert!(!bulk.has_longitudinal_field());
    }

    #[test]
    fn bulk_requires_boundary_metronome() {
        let centre = build_geometry(Geometry::ChainCenter, 5, 1.0, 0.0, 0.1, 0.01).unwrap();
        assert!(bulk_effective_hamiltonian(&centre, &FloquetParams::default(), MetronomeOrientation::Up).is_err());
    }

    #[test]
    fn bulk_ground_state_is_nondegenerate() {
        let spec = chain(6, 0.1, 1e-4);
        let params = FloquetParams::default();
        let symmetric = gap(&chain(5, 0.1, 0.1));
        for orientation in [MetronomeOrientation::Up, MetronomeOrientation::Down] {
            let h = bulk_effective_hamiltonian(&spec, &params, orientation).unwrap();
            let values = eigvalsh(h.matrix()).unwrap();
            let (bottom, top) = (values[1] - values[0], values[31] - values[30]);
            assert!(bottom > 5.0 * symmetric, "{bottom:e} vs {symmetric:e}");
            assert!(top > 5.0 * symmetric, "{top:e} vs {symmetric:e}");
        }
    }

    #[test]
    fn polarized_bulk_is_close_to_an_extremal_eigenstate() {
        // J > 0 puts the ferromagnetic states at the top of the spectrum.
        // Frozen values: overlaps from a dense diagonalisation at t1 = 1.
        let spec = chain(6, 0.1, 1e-4);
        let params = FloquetParams::default();
        let overlaps = |h: &EffectiveHamiltonian| -> Vec<f64> {
            let eig = h.eigen().unwrap();
            (0..32).map(|k| eig.vectors[(0, k)].norm_sqr()).collect()
        };
        let up = overlaps(&bulk_effective_hamiltonian(&spec, &params, MetronomeOrientation::Up).unwrap());
        let best = up.iter().cloned().fold(0.0, f64::max);
        assert_eq!(up[31], best);
        assert!(up[31] > 0.75, "{}", up[31]);
        let down = overlaps(&bulk_effective_hamiltonian(&spec, &params, MetronomeOrientation::Down).unwrap());
        let zero = overlaps(&bulk_effective_hamiltonian_with_field(&spec, &params, 0.0).unwrap());
        assert!(best > down.iter().cloned().fold(0.0, f64::max));
        assert!(best > zero.iter().cloned().fold(0.0, f64::max));
    }

    #[test]
    fn gap_regressions() {
        // frozen from an independent dense diagonalisation at t1 = 1
        let uniform = gap(&chain(4, 0.1, 0.1));
        assert!((uniform - 0.012_043_173_524_908_44).abs() < 1e-12, "{uniform:e}");
        let metronome = gap(&chain(4, 0.1, 0.01));
        assert!((metronome - 0.001_478_160_830_148_98).abs() < 1e-12, "{metronome:e}");
    }

    #[test]
    fn uniform_gap_scales_as_eps_to_the_l_for_small_eps() {
        for spins in [4usize, 6] {
            // splittings stay far above rounding (≥ 1e-10) in this range
            let (a, b) = (5e-3, 1e-2);
            let slope = (gap(&chain(spins, b, b)) / gap(&chain(spins, a, a))).ln() / (b / a).ln();
            assert!((slope - spins as f64).abs() < 0.05, "L={spins}: {slope}");
        }
    }

    #[test]
    fn metronome_gap_is_linear_in_eps_prime() {
        let (a, b) = (1e-4, 1e-2);
        let slope = (gap(&chain(8, 0.1, b)) / gap(&chain(8, 0.1, a))).ln() / (b / a).ln();
        assert!((slope - 1.0).abs() < 0.05, "{slope}");
    }

    #[test]
    fn disorder_is_deterministic_and_respects_ranges() {
        let spec = chain(6, 0.1, 0.01);
        let dist = DisorderDistribution::new((0.5, 1.5), (-1.0, 1.0), 10, 42).unwrap();
        let a = sample_disorder(&spec, &dist, 3);
        assert_eq!(a, sample_disorder(&spec, &dist, 3));
        assert_ne!(a, sample_disorder(&spec, &dist, 4));
        assert!(a.edges().iter().all(|e| (0.5..1.5).contains(&e.coupling)));
        assert!(a.fields().iter().all(|h| (-1.0..1.0).contains(h)));
        assert_eq!(a.deviations(), spec.deviations());

        let fixed = DisorderDistribution::new((1.0, 1.0), (0.0, 0.0), 1, 42).unwrap();
        assert_eq!(sample_disorder(&spec, &fixed, 0), spec);
    }

    #[test]
    fn disorder_mean_coupling() {
        // 10^4 draws from U(0.5, 1.5): standard error 0.0029
        let spec = chain(2, 0.1, 0.1);
        let dist = DisorderDistribution::new((0.5, 1.5), (-1.0, 1.0), 10_000, 7).unwrap();
        let mean = (0..10_000u64)
            .map(|k| sample_disorder(&spec, &dist, k).edges()[0].coupling)
            .sum::<f64>()
            / 1e4;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
    }

    #[test]
    fn dense_cap() {
        let spec = chain(15, 0.1, 0.1);
        assert!(matches!(
            two_period_average_hamiltonian(&spec, &FloquetParams::default()),
            Err(Error::DenseCap { .. })
        ));
    }
}
