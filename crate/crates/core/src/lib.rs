//! Decomposed reward models over frozen preference embeddings.
//!
//! A preference pair is reduced to the difference `z = φ(chosen) − φ(rejected)`
//! of its embeddings. The principal directions of the diff covariance, each
//! taken with both signs, form a bank of linear reward heads. At test time a
//! handful of labeled diffs picks a softmax mixture of those heads.

pub mod adapt;
pub mod analysis;
pub mod dataio;
pub mod decompose;
pub mod error;
pub mod eval;
pub mod heads;
pub mod linalg;
pub mod rng;
pub mod synth;

pub use adapt::{adapt_basis, AdaptConfig, AdaptationResult, NormMode, Normalizer};
pub use dataio::{EmbeddingDiffDataset, Metadata, Mode, PairDataset, PairRecord, Split};
pub use decompose::{BasisSource, EigenPairs, RewardBasis};
pub use error::{DrmError, Result};
pub use eval::{pairwise_accuracy, run_adaptation_protocol, EvalProtocol, EvalReport};
pub use heads::{HeadVector, NormPolicy};
