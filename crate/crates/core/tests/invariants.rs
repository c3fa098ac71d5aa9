//! Invariants of the public API over randomised lattices.

use metronome_core::basis::{make_bitstring_state, sample_random_bitstring};
use metronome_core::model::{build_geometry, sample_disorder, two_period_average_hamiltonian};
use metronome_core::observables::{global_magnetization, parity_expectation, record_trace, spectrum_report, Observable};
use metronome_core::propagator::{build_bundle, evolve_states, BundleOptions};
use metronome_core::{
    DisorderDistribution, FloquetParams, Geometry, LatticeSpec, StateVector, Strategy as Evolution, TimeGrid, C64,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn geometry() -> impl Strategy<Value = Geometry> {
    prop_oneof![Just(Geometry::ChainBoundary), Just(Geometry::ChainCenter), Just(Geometry::External)]
}

fn lattice() -> impl Strategy<Value = LatticeSpec> {
    (geometry(), 4usize..=7, 0.0..0.5f64, 0.0..0.5f64, 0.3..2.0f64).prop_map(|(g, l, eps, eps_prime, j)| {
        build_geometry(g, l, j, 0.0, eps, eps_prime).unwrap()
    })
}

fn random_state(spins: usize, seed: u64) -> StateVector {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amplitudes = (0..1 << spins).map(|_| C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)).collect();
    StateVector::normalized(spins, amplitudes).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn evolution_preserves_norm(spec in lattice(), t1 in 0.2..3.0f64, seed in any::<u64>()) {
        let params = FloquetParams::new(t1).unwrap();
        let bundle = build_bundle(&spec, &params, BundleOptions::default()).unwrap();
        let grid = TimeGrid::linear(0, 500, 50).unwrap();
        for state in evolve_states(&random_state(spec.spins(), seed), &bundle, &grid, Evolution::Step).unwrap() {
            prop_assert!((state.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn parity_is_conserved_without_fields(spec in lattice(), seed in any::<u64>()) {
        let bundle = build_bundle(&spec, &FloquetParams::default(), BundleOptions::default()).unwrap();
        let initial = random_state(spec.spins(), seed);
        let p0 = parity_expectation(&initial);
        let grid = TimeGrid::linear(0, 300, 30).unwrap();
        for state in evolve_states(&initial, &bundle, &grid, Evolution::Step).unwrap() {
            prop_assert!((parity_expectation(&state) - p0).abs() < 1e-11);
        }
    }

    #[test]
    fn strategies_agree(spec in lattice(), seed in any::<u64>()) {
        let bundle = build_bundle(&spec, &FloquetParams::default(), BundleOptions { dense: true, spectral: true }).unwrap();
        let initial = random_state(spec.spins(), seed);
        let grid = TimeGrid::from_periods(vec![0, 1, 7, 64, 333, 2048], false).unwrap();
        let reference = evolve_states(&initial, &bundle, &grid, Evolution::Step).unwrap();
        for strategy in [Evolution::BinaryPower, Evolution::Spectral] {
            for (a, b) in evolve_states(&initial, &bundle, &grid, strategy).unwrap().iter().zip(&reference) {
                let worst = a.amplitudes().iter().zip(b.amplitudes()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
                prop_assert!(worst < 1e-6, "{strategy:?}: {worst}");
            }
        }
    }

    #[test]
    fn flipped_bitstrings_mirror_magnetization(spec in lattice(), seed in any::<u64>()) {
        let bundle = build_bundle(&spec, &FloquetParams::default(), BundleOptions::default()).unwrap();
        let bits = sample_random_bitstring(spec.spins(), &mut ChaCha8Rng::seed_from_u64(seed));
        let up = make_bitstring_state(&bits).unwrap();
        let down = up.global_spin_flip();
        let grid = TimeGrid::linear(0, 200, 20).unwrap();
        let a = evolve_states(&up, &bundle, &grid, Evolution::Step).unwrap();
        let b = evolve_states(&down, &bundle, &grid, Evolution::Step).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((global_magnetization(x) + global_magnetization(y)).abs() < 1e-12);
        }
    }

    #[test]
    fn autocorrelators_start_at_one(spec in lattice(), seed in any::<u64>()) {
        let bundle = build_bundle(&spec, &FloquetParams::default(), BundleOptions::default()).unwrap();
        let bits = sample_random_bitstring(spec.spins(), &mut ChaCha8Rng::seed_from_u64(seed));
        let observables: Vec<Observable> = (1..=spec.spins()).map(Observable::Autocorrelator).collect();
        let grid = TimeGrid::linear(0, 10, 1).unwrap();
        let trace = record_trace(&make_bitstring_state(&bits).unwrap(), &bundle, &grid, Evolution::Step, &observables, Default::default()).unwrap();
        for obs in &observables {
            prop_assert_eq!(trace.get(&obs.name()).unwrap()[0], 1.0);
        }
        trace.validate().unwrap();
    }

    #[test]
    fn spectrum_is_sorted_and_symmetric(spec in lattice()) {
        let h = two_period_average_hamiltonian(&spec, &FloquetParams::default()).unwrap();
        let report = spectrum_report(&h, true).unwrap();
        prop_assert!(report.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(report.delta >= 0.0);
        let n = report.eigenvalues.len();
        for k in 0..n {
            prop_assert!((report.eigenvalues[k] + report.eigenvalues[n - 1 - k]).abs() < 1e-9);
        }
    }
}

#[test]
fn disorder_keeps_deviations_and_graph() {
    let spec = build_geometry(Geometry::External, 7, 1.0, 0.0, 0.1, 1e-3).unwrap();
    let dist = DisorderDistribution::new((0.5, 1.5), (-1.0, 1.0), 4, 17).unwrap();
    for r in 0..4 {
        let sample = sample_disorder(&spec, &dist, r);
        assert_eq!(sample.deviations(), spec.deviations());
        assert_eq!(sample.metronome_site(), spec.metronome_site());
        for (a, b) in sample.edges().iter().zip(spec.edges()) {
            assert_eq!((a.a, a.b), (b.a, b.b));
            assert!((0.5..=1.5).contains(&a.coupling));
        }
        assert!(sample.fields().iter().all(|h| (-1.0..=1.0).contains(h)));
        sample.validate().unwrap();
    }
}
