//! Moment accumulation, covariance eigendecomposition and the signed head
//! bank built from it.

pub mod basis;
pub mod moments;
pub mod spectral;

pub use basis::{build_basis, read_basis, write_basis, BasisSource, RewardBasis};
pub use moments::{accumulate, accumulate_parallel, MomentAccumulator};
pub use spectral::{
    covariance, eigendecompose, eigendecompose_symmetric, CovarianceMatrix, EigenPairs, TopH,
};
