use alloc::string::String;

use crate::fitting::FitError;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("spin count {spins} outside supported range 1..={max}")]
    SpinCount { spins: usize, max: usize },

    #[error("expected length {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("site {site} outside 1..={spins}")]
    SiteOutOfRange { site: usize, spins: usize },

    #[error("state norm {norm} differs from 1")]
    NotNormalized { norm: f64 },

    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dense form requested for {spins} spins, cap is {cap}")]
    DenseCap { spins: usize, cap: usize },

    #[error("matrix is not Hermitian (max |H - H^dagger| = {defect:e})")]
    NotHermitian { defect: f64 },

    #[error("eigensolver did not converge")]
    NoConvergence,

    #[error("diagonalization failed, reconstruction residual {residual:e}")]
    Diagonalization { residual: f64 },

    #[error("strategy {strategy} needs the {form} form of the propagator")]
    MissingForm {
        strategy: &'static str,
        form: &'static str,
    },

    #[error("period index {period} exceeds {max}")]
    PeriodOverflow { period: u64, max: u64 },

    #[error("autocorrelators need a computational-basis product state")]
    NotProductState,

    #[error("parity labels are undefined with longitudinal fields present")]
    ParityUndefined,

    #[error("unknown observable `{0}`")]
    UnknownObservable(String),

    #[error(transparent)]
    Fit(#[from] FitError),
}
