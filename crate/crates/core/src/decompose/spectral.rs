//! Covariance construction and symmetric eigendecomposition.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::decompose::moments::MomentAccumulator;
use crate::error::{DrmError, Result};

/// Relative tolerance for accepting a matrix as symmetric.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Eigenvalues down to `-PSD_TOL · λ_max` are treated as rounding and clamped.
pub const PSD_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix {
    pub matrix: DMatrix<f64>,
    /// `sum / N`, whether or not it was subtracted.
    pub mean: Vec<f64>,
    pub n: u64,
    pub centered: bool,
}

/// Population covariance (denominator N) of the accumulated records.
pub fn covariance(acc: &MomentAccumulator, center: bool) -> Result<CovarianceMatrix> {
    if acc.count() == 0 {
        return Err(DrmError::EmptyDataset(
            "covariance needs at least one record".into(),
        ));
    }
    let n = acc.count() as f64;
    let mean: Vec<f64> = acc.sum().iter().map(|s| s / n).collect();
    let scatter = acc.scatter();
    let d = acc.d();
    let matrix = DMatrix::from_fn(d, d, |i, j| {
        let m2 = scatter[(i, j)] / n;
        if center {
            m2 - mean[i] * mean[j]
        } else {
            m2
        }
    });
    Ok(CovarianceMatrix {
        matrix,
        mean,
        n: acc.count(),
        centered: center,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopH {
    All,
    Count(usize),
}

/// Eigenpairs sorted by descending eigenvalue; `vectors` is d×H, one unit
/// eigenvector per column.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

impl EigenPairs {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn d(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn vector(&self, j: usize) -> Vec<f64> {
        self.vectors.column(j).iter().copied().collect()
    }

    /// W Λ Wᵀ.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(self.d(), self.len(), |i, j| {
            self.vectors[(i, j)] * self.values[j]
        });
        &scaled * self.vectors.transpose()
    }
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(DrmError::Validation(format!(
            "matrix is {}×{}, not square",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(DrmError::Validation("matrix has non-finite entries".into()));
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(DrmError::Validation(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

/// Eigendecomposition of an arbitrary symmetric matrix. No clamping; the
/// sign of every eigenvector is fixed so its largest-magnitude component is
/// positive.
pub fn eigendecompose_symmetric(m: &DMatrix<f64>, top: TopH) -> Result<EigenPairs> {
    check_symmetric(m)?;
    let n = m.nrows();
    let h = match top {
        TopH::All => n,
        TopH::Count(h) if h <= n => h,
        TopH::Count(h) => {
            return Err(DrmError::Validation(format!(
                "requested {h} eigenpairs from a {n}×{n} matrix"
            )))
        }
    };
    // symmetrize exactly so the solver sees what the caller meant
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    order.truncate(h);

    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vectors = DMatrix::zeros(n, h);
    for (dst, &k) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(k);
        let pivot = col.iter().fold(
            0.0f64,
            |best, &x| {
                if x.abs() > best.abs() {
                    x
                } else {
                    best
                }
            },
        );
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        vectors.set_column(dst, &(col * sign));
    }
    Ok(EigenPairs { values, vectors })
}

/// Eigendecomposition of a covariance matrix. Eigenvalues within the PSD
/// tolerance below zero are clamped to 0; anything more negative means the
/// input was not a covariance.
pub fn eigendecompose(cov: &CovarianceMatrix, top: TopH) -> Result<EigenPairs> {
    let mut pairs = eigendecompose_symmetric(&cov.matrix, TopH::All)?;
    let lambda_max = pairs.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if let Some(&min) = pairs.values.last() {
        if min < -PSD_TOL * lambda_max {
            return Err(DrmError::Validation(format!(
                "covariance has eigenvalue {min:e}, below the PSD tolerance"
            )));
        }
    }
    pairs.values.iter_mut().for_each(|v| *v = v.max(0.0));
    if let TopH::Count(h) = top {
        pairs.values.truncate(h);
        pairs.vectors = pairs.vectors.columns(0, h).into_owned();
    }
    Ok(pairs)
}
