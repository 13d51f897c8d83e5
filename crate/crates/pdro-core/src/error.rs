//! Error type shared by every module.

use alloc::string::String;

/// Contract violations surfaced by the library.
///
/// Numerical poisoning (NaN/Inf escaping an operation) is always an error,
/// never silent propagation; training divergence is *not* an error (see
/// [`crate::trainer::RunHistory::abort`]).
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("empty input to {0}")]
    EmptyInput(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("adversary family mismatch")]
    FamilyMismatch,
    #[error("{0} is not supported for this adversary family")]
    UnsupportedFamily(&'static str),
    #[error("token id {id} out of vocabulary of size {vocab}")]
    OutOfVocab { id: u32, vocab: usize },
    #[error("group key sets differ between accuracies and frequencies")]
    KeyMismatch,
    #[error("group frequencies must sum to 1, got {0}")]
    BadFrequencies(f64),
    #[error("exp(loss/tau) overflowed the normalizer; raise tau")]
    NormalizerOverflow,
    #[error("unmapped group id {0}")]
    UnmappedGroup(u32),
    #[error("malformed posterior row")]
    BadPosterior,
    #[error("runs were evaluated on different validation sets")]
    ValidationMismatch,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}
