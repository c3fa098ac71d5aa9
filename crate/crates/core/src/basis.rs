//! Computational-basis conventions and state construction.
//!
//! A basis index stores one bit per site: site `i` (1-based) is bit `i − 1`,
//! a cleared bit is spin up (`σ_z = +1`) and a set bit is spin down.

use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64 as C64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Largest chain a [`StateVector`] may describe.
pub const MAX_SPINS: usize = 26;

/// Largest chain for which dense `2^L × 2^L` matrices are built.
pub const MAX_DENSE_SPINS: usize = 14;

pub(crate) const NORM_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spin {
    Up,
    Down,
}

impl Spin {
    /// Eigenvalue of `σ_z`.
    pub fn z(self) -> f64 {
        match self {
            Spin::Up => 1.0,
            Spin::Down => -1.0,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Spin::Up => Spin::Down,
            Spin::Down => Spin::Up,
        }
    }

    fn from_bit(bit: usize) -> Self {
        if bit == 0 {
            Spin::Up
        } else {
            Spin::Down
        }
    }
}

/// Index of a computational basis state of an `L`-site chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BasisIndex(pub usize);

impl BasisIndex {
    pub fn from_spins(spins: &[Spin]) -> Self {
        let index = spins
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == Spin::Down)
            .fold(0usize, |acc, (bit, _)| acc | (1 << bit));
        BasisIndex(index)
    }

    /// Spin at the 1-based `site`.
    pub fn spin(self, site: usize) -> Spin {
        Spin::from_bit((self.0 >> (site - 1)) & 1)
    }

    /// `σ_z` eigenvalue at the 1-based `site`.
    #[inline]
    pub fn z(self, site: usize) -> f64 {
        z_of_bit(self.0, site - 1)
    }

    pub fn spins(self, spins: usize) -> Vec<Spin> {
        (1..=spins).map(|site| self.spin(site)).collect()
    }

    /// Index of the state with every spin reversed.
    pub fn flipped(self, spins: usize) -> Self {
        BasisIndex(self.0 ^ full_mask(spins))
    }
}

#[inline]
pub(crate) fn z_of_bit(index: usize, bit: usize) -> f64 {
    1.0 - 2.0 * ((index >> bit) & 1) as f64
}

#[inline]
pub(crate) fn full_mask(spins: usize) -> usize {
    (1usize << spins) - 1
}

/// Number of anti-aligned nearest-neighbour bonds along the open chain
/// `1 – 2 – … – L`.
pub fn domain_wall_number(index: BasisIndex, spins: usize) -> u32 {
    if spins < 2 {
        return 0;
    }
    let bonds = (1usize << (spins - 1)) - 1;
    ((index.0 ^ (index.0 >> 1)) & bonds).count_ones()
}

pub(crate) fn check_spin_count(spins: usize, max: usize) -> Result<()> {
    if spins == 0 || spins > max {
        Err(Error::SpinCount { spins, max })
    } else {
        Ok(())
    }
}

/// Independent fair coin per site.
pub fn sample_random_bitstring<R: Rng + ?Sized>(spins: usize, rng: &mut R) -> Vec<Spin> {
    (0..spins)
        .map(|_| if rng.gen::<bool>() { Spin::Down } else { Spin::Up })
        .collect()
}

/// Normalised amplitude vector over the `2^L` computational basis states.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    spins: usize,
    amplitudes: Vec<C64>,
}

impl StateVector {
    /// `|↑↑…↑⟩`.
    pub fn polarized(spins: usize) -> Result<Self> {
        Self::basis_state(spins, BasisIndex(0))
    }

    pub fn from_spins(spins: &[Spin]) -> Result<Self> {
        Self::basis_state(spins.len(), BasisIndex::from_spins(spins))
    }

    pub fn basis_state(spins: usize, index: BasisIndex) -> Result<Self> {
        check_spin_count(spins, MAX_SPINS)?;
        let dim = 1usize << spins;
        if index.0 >= dim {
            return Err(Error::InvalidParameter(alloc::format!(
                "basis index {} outside 0..{dim}",
                index.0
            )));
        }
        let mut amplitudes = vec![C64::new(0.0, 0.0); dim];
        amplitudes[index.0] = C64::new(1.0, 0.0);
        Ok(StateVector { spins, amplitudes })
    }

    /// Wraps raw amplitudes, rejecting wrong lengths and non-unit norms.
    pub fn from_amplitudes(spins: usize, amplitudes: Vec<C64>) -> Result<Self> {
        check_spin_count(spins, MAX_SPINS)?;
        let expected = 1usize << spins;
        if amplitudes.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                found: amplitudes.len(),
            });
        }
        let state = StateVector { spins, amplitudes };
        let norm = state.norm();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::NotNormalized { norm });
        }
        Ok(state)
    }

    /// Rescales arbitrary non-zero amplitudes to unit norm.
    pub fn normalized(spins: usize, mut amplitudes: Vec<C64>) -> Result<Self> {
        let norm = amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::NotNormalized { norm });
        }
        let scale = 1.0 / norm.sqrt();
        amplitudes.iter_mut().for_each(|a| *a *= scale);
        Self::from_amplitudes(spins, amplitudes)
    }

    pub(crate) fn from_raw(spins: usize, amplitudes: Vec<C64>) -> Self {
        debug_assert_eq!(amplitudes.len(), 1 << spins);
        StateVector { spins, amplitudes }
    }

    pub fn spins(&self) -> usize {
        self.spins
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amplitudes
    }

    pub(crate) fn amplitudes_mut(&mut self) -> &mut [C64] {
        &mut self.amplitudes
    }

    pub fn into_amplitudes(self) -> Vec<C64> {
        self.amplitudes
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    /// `⟨self|other⟩`.
    pub fn overlap(&self, other: &StateVector) -> C64 {
        self.amplitudes
            .iter()
            .zip(&other.amplitudes)
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    /// Moves the amplitude at `k` to `(2^L − 1) XOR k`.
    pub fn global_spin_flip(&self) -> StateVector {
        let mask = full_mask(self.spins);
        let mut amplitudes = vec![C64::new(0.0, 0.0); self.dim()];
        for (k, a) in self.amplitudes.iter().enumerate() {
            amplitudes[k ^ mask] = *a;
        }
        StateVector {
            spins: self.spins,
            amplitudes,
        }
    }

    /// The bit string if this is a single basis state up to a global phase.
    pub fn as_product_state(&self) -> Option<Vec<Spin>> {
        let (index, peak) = self
            .amplitudes
            .iter()
            .enumerate()
            .map(|(k, a)| (k, a.norm_sqr()))
            .fold((0, 0.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if (peak - 1.0).abs() > NORM_TOLERANCE {
            return None;
        }
        Some(BasisIndex(index).spins(self.spins))
    }
}

pub fn make_polarized_state(spins: usize) -> Result<StateVector> {
    StateVector::polarized(spins)
}

pub fn make_bitstring_state(bits: &[Spin]) -> Result<StateVector> {
    StateVector::from_spins(bits)
}

pub fn global_spin_flip(state: &StateVector) -> StateVector {
    state.global_spin_flip()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observables::{global_magnetization, parity_expectation, site_magnetization};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use Spin::{Down, Up};

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    #[test]
    fn polarized_state_sits_on_index_zero() {
        let s = make_polarized_state(2).unwrap();
        assert_eq!(s.amplitudes(), &[c(1.0), c(0.0), c(0.0), c(0.0)]);
        let s = make_polarized_state(1).unwrap();
        assert_eq!(s.amplitudes(), &[c(1.0), c(0.0)]);
        assert_eq!(global_magnetization(&make_polarized_state(14).unwrap()), 1.0);
    }

    #[test]
    fn spin_count_is_validated() {
        assert!(matches!(make_polarized_state(0), Err(Error::SpinCount { .. })));
        assert!(matches!(
            make_polarized_state(MAX_SPINS + 1),
            Err(Error::SpinCount { .. })
        ));
        assert!(matches!(make_bitstring_state(&[]), Err(Error::SpinCount { .. })));
    }

    #[test]
    fn bitstring_encoding() {
        let s = make_bitstring_state(&[Down, Up]).unwrap();
        assert_eq!(s.amplitudes()[1], c(1.0));
        assert_eq!(site_magnetization(&s, 1).unwrap(), -1.0);
        assert_eq!(site_magnetization(&s, 2).unwrap(), 1.0);
        assert_eq!(
            make_bitstring_state(&[Up; 5]).unwrap(),
            make_polarized_state(5).unwrap()
        );
    }

    #[test]
    fn amplitudes_are_validated() {
        assert!(matches!(
            StateVector::from_amplitudes(2, vec![c(1.0); 3]),
            Err(Error::LengthMismatch { expected: 4, found: 3 })
        ));
        assert!(matches!(
            StateVector::from_amplitudes(1, vec![c(1.0), c(1.0)]),
            Err(Error::NotNormalized { .. })
        ));
        let s = StateVector::normalized(1, vec![c(1.0), c(1.0)]).unwrap();
        assert!((s.norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn random_bitstrings_are_reproducible() {
        let a = sample_random_bitstring(12, &mut ChaCha8Rng::seed_from_u64(7));
        let b = sample_random_bitstring(12, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
        let one = sample_random_bitstring(1, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn random_bitstrings_are_fair() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let samples = 10_000;
        let mut ups = [0usize; 10];
        for _ in 0..samples {
            for (count, s) in ups.iter_mut().zip(sample_random_bitstring(10, &mut rng)) {
                *count += (s == Up) as usize;
            }
        }
        // binomial standard error is 0.005; 0.02 is four sigma
        for count in ups {
            let frac = count as f64 / samples as f64;
            assert!((frac - 0.5).abs() < 0.02, "{frac}");
        }
    }

    #[test]
    fn global_flip() {
        let up = make_polarized_state(2).unwrap();
        let down = make_bitstring_state(&[Down, Down]).unwrap();
        assert_eq!(global_spin_flip(&up), down);

        let h = core::f64::consts::FRAC_1_SQRT_2;
        let cat = StateVector::from_amplitudes(2, vec![c(h), c(0.0), c(0.0), c(h)]).unwrap();
        assert!((parity_expectation(&cat) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn domain_walls() {
        let dw = |bits: &[Spin]| domain_wall_number(BasisIndex::from_spins(bits), bits.len());
        assert_eq!(dw(&[Up, Up, Up, Up]), 0);
        assert_eq!(dw(&[Up, Down, Up, Down]), 3);
        assert_eq!(dw(&[Up, Up, Down, Down]), 1);
        assert_eq!(dw(&[Down]), 0);
    }

    fn arb_state(max_spins: usize) -> impl Strategy<Value = StateVector> {
        (1..=max_spins).prop_flat_map(|spins| {
            proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1 << spins).prop_filter_map(
                "zero vector",
                move |raw| {
                    let amps = raw.into_iter().map(|(re, im)| C64::new(re, im)).collect();
                    StateVector::normalized(spins, amps).ok()
                },
            )
        })
    }

    proptest! {
        #[test]
        fn bitstring_round_trip(bits in proptest::collection::vec(any::<bool>(), 1..12)) {
            let spins: Vec<Spin> = bits.iter().map(|&b| if b { Down } else { Up }).collect();
            let state = make_bitstring_state(&spins).unwrap();
            prop_assert!((state.norm() - 1.0).abs() < NORM_TOLERANCE);
            for (i, s) in spins.iter().enumerate() {
                prop_assert_eq!(site_magnetization(&state, i + 1).unwrap(), s.z());
            }
            prop_assert_eq!(state.as_product_state(), Some(spins));
        }

        #[test]
        fn flip_is_a_norm_preserving_involution(state in arb_state(6)) {
            let flipped = global_spin_flip(&state);
            prop_assert!((flipped.norm() - 1.0).abs() < NORM_TOLERANCE);
            prop_assert_eq!(global_spin_flip(&flipped), state);
        }

        #[test]
        fn domain_walls_are_flip_invariant(spins in 1usize..16, raw in any::<usize>()) {
            let index = BasisIndex(raw & full_mask(spins));
            let dw = domain_wall_number(index, spins);
            prop_assert!(dw as usize <= spins - 1);
            prop_assert_eq!(dw, domain_wall_number(index.flipped(spins), spins));
        }
    }
}
