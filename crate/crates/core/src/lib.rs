//! Exact state-vector simulation of periodically driven spin-1/2 Ising chains.
//!
//! The crate models a two-step Floquet cycle: an Ising interaction phase of
//! duration `t1`, followed by per-site `x` rotations by `π(1 − ε_i)`. A spin
//! whose deviation `ε_i` is much smaller than the rest of the chain acts as a
//! metronome that stabilises the period-doubled response of the whole chain.
//!
//! Modules, bottom up:
//!
//! - [`basis`]: computational-basis conventions and state construction.
//! - [`linalg`]: dense complex matrices, a Hermitian eigensolver and unitary
//!   diagonalisation.
//! - [`model`]: lattice geometries, disorder, and the interaction, drive and
//!   effective (average) Hamiltonians.
//! - [`propagator`]: the one-cycle operator and long-horizon stroboscopic
//!   evolution (stepping, binary powering, spectral).
//! - [`observables`]: magnetisations, rotating-frame autocorrelators, ensemble
//!   averages and spectral diagnostics.
//! - [`fitting`]: damped Gauss–Newton fits of cosine, sigmoid and power-law
//!   models, and lifetime extraction.
//!
//! Sites are labelled `1..=L` at every public interface. Site `i` lives in bit
//! `i − 1` of a basis index, and a cleared bit is spin up (`σ_z = +1`).
//!
//! The crate is `no_std` and only needs `alloc`; file formats, parallel
//! execution and the command line live in the `metronome` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod basis;
mod error;
pub mod fitting;
pub mod linalg;
pub mod model;
pub mod observables;
pub mod propagator;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;

pub use basis::{BasisIndex, Spin, StateVector};
pub use fitting::{FitKind, FitResult, FitWindow};
pub use model::{
    DisorderDistribution, EffectiveHamiltonian, EffectiveKind, FloquetParams, Geometry,
    LatticeSpec, MetronomeOrientation,
};
pub use observables::{SpectrumReport, TimeTrace};
pub use propagator::{PropagatorBundle, Strategy, TimeGrid};
