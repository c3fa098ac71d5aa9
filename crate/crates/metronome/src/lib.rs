//! File formats, scans and the command line for the `metronome-core`
//! simulator.

pub mod cli;
pub mod experiments;
pub mod formats;
