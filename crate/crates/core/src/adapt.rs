//! Test-time weighting of a head bank from a small adaptation set.
//!
//! Each head gets the Bradley–Terry loss of the adaptation diffs after a
//! normalization fitted on that same set; the weights are `softmax(−loss)`
//! and the adapted head is the weighted sum of the bank.
//!
//! [`NormMode::UnitNorm`], the default, rescales every diff to unit length so
//! that no single large-norm sample dominates the loss. The per-dimension
//! modes are kept for comparison. [`NormMode::ScaleOnly`] divides each
//! dimension by its standard deviation over the adaptation set; with a
//! handful of samples this inflates near-constant directions to unit scale
//! and lets pure-noise heads fit the set by chance. [`NormMode::ZScore`] also
//! subtracts the per-dimension mean. On a diff set the mean is exactly the
//! preference signal, and since `softplus(−m) − softplus(m) = −m`, a centered
//! set gives `L(w) = L(−w)` for every head: every sign pair ties and the
//! adapted head cancels to zero.

use serde::{Deserialize, Serialize};

use crate::dataio::EmbeddingDiffDataset;
use crate::decompose::{BasisSource, RewardBasis};
use crate::error::{ensure, DrmError, Result};
use crate::heads::HeadVector;
use crate::linalg::{dot, log_sigmoid};

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    #[default]
    UnitNorm,
    ScaleOnly,
    ZScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub epsilon: f64,
    pub mode: NormMode,
}

impl Normalizer {
    pub fn d(&self) -> usize {
        self.mu.len()
    }

    fn offset(&self, j: usize) -> f64 {
        match self.mode {
            NormMode::ZScore => self.mu[j],
            _ => 0.0,
        }
    }

    pub fn apply(&self, z: &[f32]) -> Vec<f64> {
        if self.mode == NormMode::UnitNorm {
            let n = z.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            let n = n.max(self.epsilon);
            return z.iter().map(|&x| x as f64 / n).collect();
        }
        z.iter()
            .enumerate()
            .map(|(j, &x)| (x as f64 - self.offset(j)) / self.sigma[j])
            .collect()
    }

    /// Inverse of [`Normalizer::apply`]. `None` for [`NormMode::UnitNorm`],
    /// which discards each record's length.
    pub fn invert(&self, u: &[f64]) -> Option<Vec<f64>> {
        if self.mode == NormMode::UnitNorm {
            return None;
        }
        Some(
            u.iter()
                .enumerate()
                .map(|(j, &x)| x * self.sigma[j] + self.offset(j))
                .collect(),
        )
    }

    /// Row-major normalized copy of the dataset.
    pub fn apply_all(&self, data: &EmbeddingDiffDataset) -> Vec<f64> {
        data.records().flat_map(|z| self.apply(z)).collect()
    }
}

/// Per-dimension mean and population standard deviation, the latter
/// floored at `epsilon`.
pub fn fit_normalizer(
    adapt: &EmbeddingDiffDataset,
    epsilon: f64,
    mode: NormMode,
) -> Result<Normalizer> {
    ensure(epsilon.is_finite() && epsilon > 0.0, || {
        "epsilon must be positive".into()
    })?;
    if adapt.is_empty() {
        return Err(DrmError::Validation("adaptation set is empty".into()));
    }
    let d = adapt.d();
    let n = adapt.len() as f64;
    let mut mu = vec![0.0; d];
    for z in adapt.records() {
        mu.iter_mut().zip(z).for_each(|(m, &x)| *m += x as f64);
    }
    mu.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for z in adapt.records() {
        for j in 0..d {
            let c = z[j] as f64 - mu[j];
            var[j] += c * c;
        }
    }
    let sigma = var.iter().map(|v| (v / n).sqrt().max(epsilon)).collect();
    Ok(Normalizer {
        mu,
        sigma,
        epsilon,
        mode,
    })
}

fn check_dims(head_d: usize, data: &EmbeddingDiffDataset, norm: &Normalizer) -> Result<()> {
    if head_d != data.d() || norm.d() != data.d() {
        return Err(DrmError::Validation(format!(
            "dimension mismatch: head {}, data {}, normalizer {}",
            head_d,
            data.d(),
            norm.d()
        )));
    }
    Ok(())
}

fn loss_on_normalized(w: &[f64], rows: &[f64], d: usize) -> f64 {
    let n = rows.len() / d;
    rows.chunks_exact(d)
        .map(|u| -log_sigmoid(dot(w, u)))
        .sum::<f64>()
        / n as f64
}

/// −mean_i log σ(w · norm(z_i)).
pub fn head_loss(
    head: &HeadVector,
    adapt: &EmbeddingDiffDataset,
    norm: &Normalizer,
) -> Result<f64> {
    check_dims(head.d(), adapt, norm)?;
    if adapt.is_empty() {
        return Err(DrmError::Validation("adaptation set is empty".into()));
    }
    Ok(loss_on_normalized(
        head.w(),
        &norm.apply_all(adapt),
        adapt.d(),
    ))
}

/// k_m = exp(−L_m / T) / Σ_j exp(−L_j / T), shifted by the minimum loss.
pub fn softmax_weights(losses: &[f64], temperature: f64) -> Result<Vec<f64>> {
    ensure(!losses.is_empty(), || "no losses to weight".into())?;
    ensure(temperature.is_finite() && temperature > 0.0, || {
        "temperature must be positive".into()
    })?;
    if let Some(bad) = losses.iter().position(|l| !l.is_finite()) {
        return Err(DrmError::Validation(format!(
            "loss of head {bad} is not finite"
        )));
    }
    let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let unnorm: Vec<f64> = losses
        .iter()
        .map(|l| (-(l - min) / temperature).exp())
        .collect();
    let total: f64 = unnorm.iter().sum();
    Ok(unnorm.into_iter().map(|u| u / total).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub epsilon: f64,
    pub temperature: f64,
    pub norm_mode: NormMode,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            temperature: 1.0,
            norm_mode: NormMode::UnitNorm,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationResult {
    pub losses: Vec<f64>,
    pub weights: Vec<f64>,
    /// Σ_m k_m w_m, in normalized feature space.
    pub combined: HeadVector,
    pub normalizer: Normalizer,
    pub adapt_ids: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct AdaptationJson {
    losses: Vec<f64>,
    weights: Vec<f64>,
    adapt_ids: Vec<String>,
    normalizer: Normalizer,
    combined_drmb: String,
}

impl AdaptationResult {
    pub fn to_json_value(&self) -> Result<serde_json::Value> {
        let combined = RewardBasis::from_head(&self.combined, BasisSource::Adapted)?;
        Ok(serde_json::to_value(AdaptationJson {
            losses: self.losses.clone(),
            weights: self.weights.clone(),
            adapt_ids: self.adapt_ids.clone(),
            normalizer: self.normalizer.clone(),
            combined_drmb: combined.to_base64()?,
        })?)
    }

    pub fn from_json_value(v: serde_json::Value) -> Result<Self> {
        let raw: AdaptationJson = serde_json::from_value(v)?;
        let basis = RewardBasis::from_base64(&raw.combined_drmb)?;
        Ok(Self {
            losses: raw.losses,
            weights: raw.weights,
            combined: basis.head(0),
            normalizer: raw.normalizer,
            adapt_ids: raw.adapt_ids,
        })
    }
}

pub fn adapt_basis(
    basis: &RewardBasis,
    adapt: &EmbeddingDiffDataset,
    cfg: &AdaptConfig,
) -> Result<AdaptationResult> {
    if basis.d() != adapt.d() {
        return Err(DrmError::Validation(format!(
            "basis dimension {} does not match adaptation data dimension {}",
            basis.d(),
            adapt.d()
        )));
    }
    let normalizer = fit_normalizer(adapt, cfg.epsilon, cfg.norm_mode)?;
    let rows = normalizer.apply_all(adapt);
    let losses: Vec<f64> = basis
        .heads()
        .iter()
        .map(|w| loss_on_normalized(w, &rows, adapt.d()))
        .collect();
    let weights = softmax_weights(&losses, cfg.temperature)?;
    let mut combined = vec![0.0; basis.d()];
    for (w, k) in basis.heads().iter().zip(&weights) {
        combined.iter_mut().zip(w).for_each(|(c, x)| *c += k * x);
    }
    let adapt_ids = (0..adapt.len()).map(|i| adapt.id(i)).collect();
    Ok(AdaptationResult {
        losses,
        weights,
        combined: HeadVector::raw(combined),
        normalizer,
        adapt_ids,
    })
}
