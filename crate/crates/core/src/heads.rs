//! Baseline head banks and scoring.
//!
//! The trained single head minimizes the diff-form Bradley–Terry loss
//! `L(w) = −mean_i log σ(wᵀz_i) + λ‖w‖²` by seeded mini-batch gradient
//! descent. Random heads are componentwise uniform or Gaussian draws,
//! L2-normalized.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::EmbeddingDiffDataset;
use crate::decompose::{BasisSource, RewardBasis};
use crate::error::{ensure, DrmError, Result};
use crate::linalg::{dot_f32, log_sigmoid, norm, sigmoid};
use crate::rng::{substream, STREAM_RANDOM_HEADS, STREAM_TRAIN};

pub const UNIT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPolicy {
    Unit,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadVector {
    w: Vec<f64>,
    norm_policy: NormPolicy,
}

impl HeadVector {
    pub fn raw(w: Vec<f64>) -> Self {
        Self {
            w,
            norm_policy: NormPolicy::Raw,
        }
    }

    /// Scales `w` to unit length.
    pub fn unit(mut w: Vec<f64>) -> Result<Self> {
        let n = norm(&w);
        if !(n.is_finite() && n > 0.0) {
            return Err(DrmError::Validation(
                "cannot normalize a zero or non-finite head".into(),
            ));
        }
        w.iter_mut().for_each(|x| *x /= n);
        Ok(Self {
            w,
            norm_policy: NormPolicy::Unit,
        })
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn d(&self) -> usize {
        self.w.len()
    }

    pub fn norm_policy(&self) -> NormPolicy {
        self.norm_policy
    }

    pub fn normalized(&self) -> Result<Self> {
        Self::unit(self.w.clone())
    }

    pub fn negated(&self) -> Self {
        Self {
            w: self.w.iter().map(|x| -x).collect(),
            norm_policy: self.norm_policy,
        }
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self::raw(self.w.iter().map(|x| alpha * x).collect())
    }
}

/// Reward margin of a diff under a head: w · z.
pub fn score(head: &HeadVector, z: &[f32]) -> Result<f64> {
    if head.d() != z.len() {
        return Err(DrmError::Validation(format!(
            "head of dimension {} scored against record of length {}",
            head.d(),
            z.len()
        )));
    }
    Ok(dot_f32(head.w(), z))
}

pub fn score_all(head: &HeadVector, data: &EmbeddingDiffDataset) -> Result<Vec<f64>> {
    if head.d() != data.d() {
        return Err(DrmError::Validation(format!(
            "head of dimension {} against data of dimension {}",
            head.d(),
            data.d()
        )));
    }
    Ok(data.records().map(|z| dot_f32(head.w(), z)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    Zeros,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub seed: u64,
    pub init: Init,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            epochs: 1,
            batch_size: 16,
            l2: 0.0,
            seed: 0,
            init: Init::Zeros,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(
            self.learning_rate.is_finite() && self.learning_rate > 0.0,
            || "learning_rate must be positive".into(),
        )?;
        ensure(self.epochs >= 1, || "epochs must be at least 1".into())?;
        ensure(self.batch_size >= 1, || {
            "batch_size must be at least 1".into()
        })?;
        ensure(self.l2.is_finite() && self.l2 >= 0.0, || {
            "l2 must be nonnegative".into()
        })
    }
}

/// Std of the Gaussian initializer.
const INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Final weights as optimized.
    pub head: HeadVector,
    /// Mean NLL over the full dataset after each epoch (no L2 term).
    pub loss_curve: Vec<f64>,
}

impl TrainOutcome {
    pub fn unit_head(&self) -> Result<HeadVector> {
        self.head.normalized()
    }
}

/// Mean negative log-likelihood −mean_i log σ(wᵀz_i) over all records.
pub fn bt_nll(w: &[f64], data: &EmbeddingDiffDataset) -> f64 {
    let n = data.len() as f64;
    data.records()
        .map(|z| -log_sigmoid(dot_f32(w, z)))
        .sum::<f64>()
        / n
}

/// Regularized loss and its gradient over a subset of records.
pub fn bt_loss_and_grad(
    w: &[f64],
    data: &EmbeddingDiffDataset,
    indices: &[usize],
    l2: f64,
) -> (f64, Vec<f64>) {
    let m = indices.len() as f64;
    let mut grad = vec![0.0; w.len()];
    let mut loss = 0.0;
    for &i in indices {
        let z = data.record(i);
        let margin = dot_f32(w, z);
        loss -= log_sigmoid(margin);
        let coeff = 1.0 - sigmoid(margin);
        grad.iter_mut()
            .zip(z)
            .for_each(|(g, &zj)| *g -= coeff * zj as f64);
    }
    loss /= m;
    let wsq: f64 = w.iter().map(|x| x * x).sum();
    grad.iter_mut()
        .zip(w)
        .for_each(|(g, wj)| *g = *g / m + 2.0 * l2 * wj);
    (loss + l2 * wsq, grad)
}

pub fn train_single_head(data: &EmbeddingDiffDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(DrmError::EmptyDataset("no records to train on".into()));
    }
    let d = data.d();
    let mut rng = substream(cfg.seed, STREAM_TRAIN);
    let mut w = match cfg.init {
        Init::Zeros => vec![0.0; d],
        Init::Gaussian => {
            let dist = Normal::new(0.0, INIT_STD).expect("valid std");
            (0..d).map(|_| rng.sample(dist)).collect()
        }
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (_, grad) = bt_loss_and_grad(&w, data, batch, cfg.l2);
            w.iter_mut()
                .zip(&grad)
                .for_each(|(wj, g)| *wj -= cfg.learning_rate * g);
        }
        let loss = bt_nll(&w, data);
        if !loss.is_finite() || w.iter().any(|x| !x.is_finite()) {
            return Err(DrmError::TrainingDiverged { epoch, loss });
        }
        log::debug!("epoch {epoch}: nll {loss:.6}");
        loss_curve.push(loss);
    }
    Ok(TrainOutcome {
        head: HeadVector::raw(w),
        loss_curve,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RandomDist {
    Uniform,
    Gaussian,
}

pub fn random_heads(seed: u64, count: usize, d: usize, dist: RandomDist) -> Result<RewardBasis> {
    ensure(count >= 1, || "count must be at least 1".into())?;
    ensure(d >= 1, || "d must be positive".into())?;
    let mut rng = substream(seed, STREAM_RANDOM_HEADS);
    let mut heads = Vec::with_capacity(count);
    while heads.len() < count {
        let w: Vec<f64> = match dist {
            RandomDist::Uniform => (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect(),
            RandomDist::Gaussian => (0..d).map(|_| rng.sample(StandardNormal)).collect(),
        };
        // an all-zero draw cannot be normalized; draw again
        if let Ok(h) = HeadVector::unit(w) {
            heads.push(h.w().to_vec());
        }
    }
    let source = match dist {
        RandomDist::Uniform => BasisSource::RandomUniform,
        RandomDist::Gaussian => BasisSource::RandomGaussian,
    };
    RewardBasis::unsigned(d, heads, source)
}
