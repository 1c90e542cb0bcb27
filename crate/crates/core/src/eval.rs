//! Measurement protocols: pairwise accuracy, repeated-sampling test-time
//! adaptation, per-head attribute tables and ablation grids.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{adapt_basis, AdaptConfig, Normalizer};
use crate::dataio::EmbeddingDiffDataset;
use crate::decompose::RewardBasis;
use crate::error::{ensure, DrmError, Result};
use crate::heads::HeadVector;
use crate::linalg::{dot, dot_f32};
use crate::rng::{fnv1a, substream, STREAM_ADAPT_SAMPLE};

/// Sign counts of the margins of a head over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarginCounts {
    pub positive: u64,
    pub negative: u64,
    pub zero: u64,
}

impl MarginCounts {
    pub fn total(&self) -> u64 {
        self.positive + self.negative + self.zero
    }

    /// (positive + tie_value·zero) / total.
    pub fn accuracy(&self, tie_value: f64) -> f64 {
        (self.positive as f64 + tie_value * self.zero as f64) / self.total() as f64
    }

    /// Counts for the negated head.
    pub fn mirrored(&self) -> Self {
        Self {
            positive: self.negative,
            negative: self.positive,
            zero: self.zero,
        }
    }

    fn tally(&mut self, margin: f64) {
        if margin > 0.0 {
            self.positive += 1;
        } else if margin < 0.0 {
            self.negative += 1;
        } else {
            self.zero += 1;
        }
    }
}

pub fn margin_counts(
    head: &HeadVector,
    data: &EmbeddingDiffDataset,
    norm: Option<&Normalizer>,
) -> Result<MarginCounts> {
    if data.is_empty() {
        return Err(DrmError::Validation("accuracy of an empty dataset".into()));
    }
    if head.d() != data.d() || norm.is_some_and(|n| n.d() != data.d()) {
        return Err(DrmError::Validation(format!(
            "head of dimension {} against data of dimension {}",
            head.d(),
            data.d()
        )));
    }
    let mut counts = MarginCounts {
        positive: 0,
        negative: 0,
        zero: 0,
    };
    for z in data.records() {
        let m = match norm {
            Some(n) => dot(head.w(), &n.apply(z)),
            None => dot_f32(head.w(), z),
        };
        counts.tally(m);
    }
    Ok(counts)
}

/// Fraction of records scored above zero, zero margins counting `tie_value`.
pub fn pairwise_accuracy(
    head: &HeadVector,
    data: &EmbeddingDiffDataset,
    norm: Option<&Normalizer>,
    tie_value: f64,
) -> Result<f64> {
    Ok(margin_counts(head, data, norm)?.accuracy(tie_value))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub n_adapt: usize,
    pub n_seeds: usize,
    pub tie_value: f64,
    pub seed: u64,
    #[serde(default)]
    pub adapt: AdaptConfig,
}

impl EvalProtocol {
    pub fn new(n_adapt: usize, seed: u64) -> Self {
        Self {
            n_adapt,
            n_seeds: 20,
            tie_value: 0.5,
            seed,
            adapt: AdaptConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.n_adapt >= 1, || "n_adapt must be at least 1".into())?;
        ensure(self.n_seeds >= 1, || "n_seeds must be at least 1".into())?;
        ensure((0.0..=1.0).contains(&self.tie_value), || {
            "tie_value must lie in [0, 1]".into()
        })
    }

    /// Seed of the adaptation draw for one (attribute, repetition).
    pub fn sub_seed(&self, attribute: &str, rep: usize) -> u64 {
        self.seed ^ fnv1a(attribute.as_bytes()) ^ rep as u64
    }
}

/// Splits an attribute's record indices into (adaptation, evaluation) for
/// one repetition. The evaluation part keeps record order.
pub fn split_for_repetition(
    indices: &[usize],
    n_adapt: usize,
    sub_seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut rng = substream(sub_seed, STREAM_ADAPT_SAMPLE);
    let picked = sample(&mut rng, indices.len(), n_adapt);
    let mut chosen = vec![false; indices.len()];
    let adapt = picked
        .iter()
        .map(|p| {
            chosen[p] = true;
            indices[p]
        })
        .collect();
    let rest = indices
        .iter()
        .zip(&chosen)
        .filter(|(_, &c)| !c)
        .map(|(&i, _)| i)
        .collect();
    (adapt, rest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub rep: usize,
    pub accuracy: f64,
    pub adapt_ids: Vec<String>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeReport {
    pub n_records: usize,
    pub mean: f64,
    /// Population standard deviation over repetitions.
    pub std: f64,
    pub per_seed: Vec<SeedResult>,
    /// Adaptation weights averaged over repetitions.
    pub mean_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_attribute: BTreeMap<String, AttributeReport>,
    pub overall: f64,
    pub n_heads: usize,
    pub protocol: EvalProtocol,
}

impl EvalReport {
    /// Mean over attributes of the per-attribute standard deviation.
    pub fn mean_std(&self) -> f64 {
        self.per_attribute.values().map(|a| a.std).sum::<f64>() / self.per_attribute.len() as f64
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["kind", "attribute", "seed", "accuracy", "std"])?;
        for (attr, rep) in &self.per_attribute {
            for s in &rep.per_seed {
                w.write_record([
                    "seed",
                    attr,
                    &s.rep.to_string(),
                    &s.accuracy.to_string(),
                    "",
                ])?;
            }
        }
        for (attr, rep) in &self.per_attribute {
            w.write_record([
                "summary",
                attr,
                "",
                &rep.mean.to_string(),
                &rep.std.to_string(),
            ])?;
        }
        w.write_record(["overall", "", "", &self.overall.to_string(), ""])?;
        w.flush().map_err(|e| DrmError::io(path, e))?;
        Ok(())
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

struct Repetition {
    accuracy: f64,
    weights: Vec<f64>,
    adapt_ids: Vec<String>,
}

pub fn run_adaptation_protocol(
    basis: &RewardBasis,
    data: &EmbeddingDiffDataset,
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    protocol.validate()?;
    if basis.d() != data.d() {
        return Err(DrmError::Validation(format!(
            "basis dimension {} does not match data dimension {}",
            basis.d(),
            data.d()
        )));
    }
    let groups = data.attribute_groups()?;
    for (attr, idx) in &groups {
        if idx.len() <= protocol.n_adapt {
            return Err(DrmError::InsufficientData {
                attribute: attr.clone(),
                available: idx.len(),
                required: protocol.n_adapt,
            });
        }
    }
    let tasks: Vec<(&String, &Vec<usize>, usize)> = groups
        .iter()
        .flat_map(|(a, idx)| (0..protocol.n_seeds).map(move |r| (a, idx, r)))
        .collect();
    let reps: Vec<Repetition> = tasks
        .par_iter()
        .map(|&(attr, idx, rep)| {
            let (adapt_idx, test_idx) =
                split_for_repetition(idx, protocol.n_adapt, protocol.sub_seed(attr, rep));
            let adapt_set = data.subset(&adapt_idx);
            let result = adapt_basis(basis, &adapt_set, &protocol.adapt)?;
            let accuracy = pairwise_accuracy(
                &result.combined,
                &data.subset(&test_idx),
                Some(&result.normalizer),
                protocol.tie_value,
            )?;
            Ok(Repetition {
                accuracy,
                weights: result.weights,
                adapt_ids: result.adapt_ids,
            })
        })
        .collect::<Result<_>>()?;

    let mut per_attribute = BTreeMap::new();
    for ((attr, idx), chunk) in groups.iter().zip(reps.chunks(protocol.n_seeds)) {
        let accs: Vec<f64> = chunk.iter().map(|r| r.accuracy).collect();
        let (mean, std) = mean_std(&accs);
        let mut mean_weights = vec![0.0; basis.len()];
        for r in chunk {
            mean_weights
                .iter_mut()
                .zip(&r.weights)
                .for_each(|(m, w)| *m += w / chunk.len() as f64);
        }
        let per_seed = chunk
            .iter()
            .enumerate()
            .map(|(rep, r)| SeedResult {
                rep,
                accuracy: r.accuracy,
                adapt_ids: r.adapt_ids.clone(),
                weights: r.weights.clone(),
            })
            .collect();
        per_attribute.insert(
            attr.clone(),
            AttributeReport {
                n_records: idx.len(),
                mean,
                std,
                per_seed,
                mean_weights,
            },
        );
    }
    let overall = per_attribute.values().map(|a| a.mean).sum::<f64>() / per_attribute.len() as f64;
    Ok(EvalReport {
        per_attribute,
        overall,
        n_heads: basis.len(),
        protocol: protocol.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerHeadRow {
    pub head: usize,
    pub attribute: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxHead {
    /// Every head attaining the maximum, in index order.
    pub heads: Vec<usize>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerHeadReport {
    pub rows: Vec<PerHeadRow>,
    /// Unweighted mean over attributes, per head.
    pub head_overall: Vec<f64>,
    pub max_head: BTreeMap<String, MaxHead>,
    /// Heads attaining the highest `head_overall`.
    pub best_overall: MaxHead,
}

impl PerHeadReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["head", "attribute", "accuracy"])?;
        for r in &self.rows {
            w.write_record([&r.head.to_string(), &r.attribute, &r.accuracy.to_string()])?;
        }
        for (h, acc) in self.head_overall.iter().enumerate() {
            w.write_record([&h.to_string(), "overall", &acc.to_string()])?;
        }
        w.flush().map_err(|e| DrmError::io(path, e))?;
        Ok(())
    }
}

fn argmax_all(values: impl Iterator<Item = (usize, f64)>) -> MaxHead {
    let mut best = MaxHead {
        heads: Vec::new(),
        accuracy: f64::NEG_INFINITY,
    };
    for (h, v) in values {
        if v > best.accuracy {
            best = MaxHead {
                heads: vec![h],
                accuracy: v,
            };
        } else if v == best.accuracy {
            best.heads.push(h);
        }
    }
    best
}

/// Accuracy of each of the first `top_n` heads on every attribute subset.
pub fn per_head_report(
    basis: &RewardBasis,
    data: &EmbeddingDiffDataset,
    top_n: usize,
    tie_value: f64,
) -> Result<PerHeadReport> {
    ensure(top_n >= 1 && top_n <= basis.len(), || {
        format!("top_n = {top_n} outside 1..={}", basis.len())
    })?;
    let groups = data.attribute_groups()?;
    let subsets: Vec<(String, EmbeddingDiffDataset)> = groups
        .iter()
        .map(|(a, idx)| (a.clone(), data.subset(idx)))
        .collect();
    let table: Vec<Vec<f64>> = (0..top_n)
        .into_par_iter()
        .map(|h| {
            let head = basis.head(h);
            subsets
                .iter()
                .map(|(_, sub)| pairwise_accuracy(&head, sub, None, tie_value))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(top_n * subsets.len());
    for (a, (attr, _)) in subsets.iter().enumerate() {
        for (h, accs) in table.iter().enumerate() {
            rows.push(PerHeadRow {
                head: h,
                attribute: attr.clone(),
                accuracy: accs[a],
            });
        }
    }
    let head_overall: Vec<f64> = table
        .iter()
        .map(|accs| accs.iter().sum::<f64>() / accs.len() as f64)
        .collect();
    let max_head = subsets
        .iter()
        .enumerate()
        .map(|(a, (attr, _))| {
            (
                attr.clone(),
                argmax_all(table.iter().map(|accs| accs[a]).enumerate()),
            )
        })
        .collect();
    let best_overall = argmax_all(head_overall.iter().copied().enumerate());
    Ok(PerHeadReport {
        rows,
        head_overall,
        max_head,
        best_overall,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub n_adapt: usize,
    pub n_heads: usize,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub cells: Vec<AblationCell>,
}

impl AblationGrid {
    pub fn get(&self, n_adapt: usize, n_heads: usize) -> Option<&EvalReport> {
        self.cells
            .iter()
            .find(|c| c.n_adapt == n_adapt && c.n_heads == n_heads)
            .map(|c| &c.report)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["n_adapt", "n_heads", "overall", "mean_std"])?;
        for c in &self.cells {
            w.write_record([
                c.n_adapt.to_string(),
                c.n_heads.to_string(),
                c.report.overall.to_string(),
                c.report.mean_std().to_string(),
            ])?;
        }
        w.flush().map_err(|e| DrmError::io(path, e))?;
        Ok(())
    }
}

/// Protocol over the cross product of adaptation sizes and head counts.
/// Each head count keeps the first `h` heads of the bank.
pub fn ablation_sweep(
    basis: &RewardBasis,
    data: &EmbeddingDiffDataset,
    n_values: &[usize],
    h_values: &[usize],
    protocol: &EvalProtocol,
) -> Result<AblationGrid> {
    ensure(!n_values.is_empty() && !h_values.is_empty(), || {
        "ablation needs at least one adaptation size and one head count".into()
    })?;
    let truncated: Vec<(usize, RewardBasis)> = h_values
        .iter()
        .map(|&h| basis.truncate(h).map(|b| (h, b)))
        .collect::<Result<_>>()?;
    let smallest = data
        .attribute_groups()?
        .into_iter()
        .map(|(a, idx)| (idx.len(), a))
        .min()
        .expect("attribute_groups is non-empty for a non-empty sidecar");
    for &n in n_values {
        if n >= smallest.0 {
            return Err(DrmError::InsufficientData {
                attribute: smallest.1,
                available: smallest.0,
                required: n,
            });
        }
    }
    let mut cells = Vec::with_capacity(n_values.len() * h_values.len());
    for &n in n_values {
        for (h, b) in &truncated {
            let p = EvalProtocol {
                n_adapt: n,
                ..protocol.clone()
            };
            cells.push(AblationCell {
                n_adapt: n,
                n_heads: *h,
                report: run_adaptation_protocol(b, data, &p)?,
            });
        }
    }
    Ok(AblationGrid { cells })
}
