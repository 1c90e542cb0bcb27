//! Synthetic preference worlds with known latent attribute directions.
//!
//! Each attribute `a` owns a unit direction `v_a`; the directions are
//! mutually orthonormal. A record of attribute `a` is
//! `z' = γ_a·|t|·v_a + ε` with `t ~ N(0, 1)` and `ε ~ N(0, σ²·I)`, stored
//! as `z'` with probability `σ(β·v_a·z')` and as `−z'` otherwise. Flipping
//! the sign is how a mislabeled pair looks once it has been reduced to
//! `chosen − rejected`.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{EmbeddingDiffDataset, Metadata, Split};
use crate::error::{ensure, Result};
use crate::linalg::{dot, sigmoid};
use crate::rng::{substream, STREAM_ATTRIBUTE, STREAM_DIRECTIONS};

const ORTHO_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub seed: u64,
    pub d: usize,
    pub k: usize,
    pub n_per_attr: usize,
    pub attr_scales: Vec<f64>,
    pub noise_sigma: f64,
    pub beta: f64,
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        ensure(self.d >= 1, || "d must be positive".into())?;
        ensure(self.k >= 1, || "K must be at least 1".into())?;
        ensure(self.k <= self.d, || {
            format!("K = {} exceeds dimension d = {}", self.k, self.d)
        })?;
        ensure(self.n_per_attr >= 1, || {
            "n_per_attr must be at least 1".into()
        })?;
        ensure(self.attr_scales.len() == self.k, || {
            format!(
                "{} attribute scales given for K = {}",
                self.attr_scales.len(),
                self.k
            )
        })?;
        ensure(
            self.attr_scales.iter().all(|g| g.is_finite() && *g > 0.0),
            || "attribute scales must be positive".into(),
        )?;
        ensure(
            self.noise_sigma.is_finite() && self.noise_sigma >= 0.0,
            || "noise_sigma must be nonnegative".into(),
        )?;
        ensure(self.beta.is_finite() && self.beta > 0.0, || {
            "beta must be positive".into()
        })
    }

    pub fn attribute_name(a: usize) -> String {
        format!("attr_{a}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub d: usize,
    pub directions: Vec<Vec<f64>>,
    pub spec: WorldSpec,
}

impl GroundTruth {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Gram–Schmidt with a second projection pass. Returns `None` if some input
/// is (numerically) in the span of the ones before it.
pub fn orthonormalize(vectors: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(vectors.len());
    for v in vectors {
        let mut u = v.clone();
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&u, b);
                u.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = dot(&u, &u).sqrt();
        if n < ORTHO_TOL {
            return None;
        }
        u.iter_mut().for_each(|x| *x /= n);
        basis.push(u);
    }
    Some(basis)
}

fn draw_directions(spec: &WorldSpec) -> Vec<Vec<f64>> {
    let mut rng = substream(spec.seed, STREAM_DIRECTIONS);
    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(spec.k);
    while directions.len() < spec.k {
        let candidate: Vec<f64> = (0..spec.d).map(|_| rng.sample(StandardNormal)).collect();
        let mut trial = directions.clone();
        trial.push(candidate);
        // a degenerate draw is discarded and redrawn from the same stream
        if let Some(ortho) = orthonormalize(&trial) {
            directions = ortho;
        }
    }
    directions
}

fn gen_attribute(spec: &WorldSpec, a: usize, v: &[f64]) -> (Vec<f32>, Vec<Metadata>) {
    let mut rng = substream(spec.seed ^ a as u64, STREAM_ATTRIBUTE);
    let gamma = spec.attr_scales[a];
    let name = WorldSpec::attribute_name(a);
    let mut data = Vec::with_capacity(spec.n_per_attr * spec.d);
    let mut meta = Vec::with_capacity(spec.n_per_attr);
    let mut z = vec![0.0f64; spec.d];
    for i in 0..spec.n_per_attr {
        let t: f64 = rng.sample(StandardNormal);
        let scale = gamma * t.abs();
        for (zj, vj) in z.iter_mut().zip(v) {
            let eps: f64 = rng.sample(StandardNormal);
            *zj = scale * vj + spec.noise_sigma * eps;
        }
        let keep = rng.random::<f64>() < sigmoid(spec.beta * dot(v, &z));
        let sign = if keep { 1.0 } else { -1.0 };
        data.extend(z.iter().map(|x| (sign * x) as f32));
        meta.push(Metadata::new(
            format!("{name}_{i}"),
            name.clone(),
            Split::Test,
        ));
    }
    (data, meta)
}

pub fn gen_world(spec: &WorldSpec) -> Result<(EmbeddingDiffDataset, GroundTruth)> {
    spec.validate()?;
    let directions = draw_directions(spec);
    let parts: Vec<(Vec<f32>, Vec<Metadata>)> = (0..spec.k)
        .into_par_iter()
        .map(|a| gen_attribute(spec, a, &directions[a]))
        .collect();
    let mut data = Vec::with_capacity(spec.k * spec.n_per_attr * spec.d);
    let mut meta = Vec::with_capacity(spec.k * spec.n_per_attr);
    for (d, m) in parts {
        data.extend(d);
        meta.extend(m);
    }
    let dataset = EmbeddingDiffDataset::from_flat(spec.d, data, Some(meta))?;
    let truth = GroundTruth {
        seed: spec.seed,
        d: spec.d,
        directions,
        spec: spec.clone(),
    };
    Ok((dataset, truth))
}
