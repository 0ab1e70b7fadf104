use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A documented precondition did not hold.
    #[error("contract violation: {0}")]
    Contract(String),
    /// The state lattice is larger than the enumeration cap.
    #[error("state lattice has {states} states, enumeration cap is {cap}")]
    CapExceeded { states: u128, cap: u64 },
    /// No support answer is consistent with the unmasked entries.
    #[error("off-support state {state:?}")]
    OffSupport { state: Vec<u8> },
    /// The first distribution puts mass where the second has none.
    #[error("support violation at atom {atom:?}: p = {mass}, q = 0")]
    SupportViolation { atom: Vec<u8>, mass: f64 },
    /// The reference policy gives zero probability to a taken action.
    #[error("realization mismatch: {0}")]
    RealizationMismatch(String),
    /// An invalid parameter in a configuration.
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    /// Task generation could not satisfy the requested constraints.
    #[error("infeasible task: {0}")]
    Infeasible(String),
    /// A NaN or infinity surfaced during optimization.
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
