//! Plot-ready summaries: cumulative explained variance, Pearson correlation
//! of adaptation weight signatures, and per-head score distributions.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::EmbeddingDiffDataset;
use crate::decompose::RewardBasis;
use crate::error::{ensure, DrmError, Result};
use crate::linalg::dot_f32;

/// Prefix sums of `λ_j / Σλ`.
pub fn variance_explained(eigenvalues: &[f64]) -> Result<Vec<f64>> {
    ensure(
        eigenvalues.iter().all(|&l| l >= 0.0 && l.is_finite()),
        || "eigenvalues must be finite and nonnegative".into(),
    )?;
    let total: f64 = eigenvalues.iter().sum();
    ensure(total > 0.0, || "spectrum is identically zero".into())?;
    let mut acc = 0.0;
    Ok(eigenvalues
        .iter()
        .map(|l| {
            acc += l;
            acc / total
        })
        .collect())
}

/// Adaptation weights of one attribute, one entry per head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeWeights {
    pub attribute: String,
    pub k: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub attributes: Vec<String>,
    pub r: Vec<Vec<f64>>,
}

fn centered(k: &[f64]) -> (Vec<f64>, f64) {
    let mean = k.iter().sum::<f64>() / k.len() as f64;
    let c: Vec<f64> = k.iter().map(|x| x - mean).collect();
    let ss = c.iter().map(|x| x * x).sum::<f64>();
    (c, ss)
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ca, sa) = centered(a);
    let (cb, sb) = centered(b);
    if sa == 0.0 || sb == 0.0 {
        return None;
    }
    let cov: f64 = ca.iter().zip(&cb).map(|(x, y)| x * y).sum();
    Some((cov / (sa * sb).sqrt()).clamp(-1.0, 1.0))
}

pub fn weight_correlation(weights: &[AttributeWeights]) -> Result<CorrelationMatrix> {
    ensure(weights.len() >= 2, || {
        "correlation needs at least two attributes".into()
    })?;
    let len = weights[0].k.len();
    ensure(len >= 2, || {
        "weight vectors need at least two entries".into()
    })?;
    ensure(weights.iter().all(|w| w.k.len() == len), || {
        "weight vectors differ in length".into()
    })?;
    let n = weights.len();
    let mut r = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = pearson(&weights[i].k, &weights[j].k).ok_or_else(|| {
                DrmError::UndefinedCorrelation {
                    first: weights[i].attribute.clone(),
                    second: weights[j].attribute.clone(),
                }
            })?;
            let v = if i == j { 1.0 } else { v };
            r[i][j] = v;
            r[j][i] = v;
        }
    }
    Ok(CorrelationMatrix {
        attributes: weights.iter().map(|w| w.attribute.clone()).collect(),
        r,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadStats {
    pub head: usize,
    pub min: f64,
    pub p5: f64,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
    pub p95: f64,
    pub max: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub outlier: bool,
}

/// Percentile of sorted data by linear interpolation between closest ranks.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn median_of(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    percentile(&xs, 0.5)
}

/// Score distribution of every head over every record. A head is flagged
/// as an outlier when its |mean| exceeds three times the median |mean|.
pub fn head_score_stats(
    basis: &RewardBasis,
    data: &EmbeddingDiffDataset,
) -> Result<Vec<HeadStats>> {
    ensure(!data.is_empty(), || {
        "score statistics of an empty dataset".into()
    })?;
    ensure(basis.d() == data.d(), || {
        format!(
            "basis dimension {} does not match data dimension {}",
            basis.d(),
            data.d()
        )
    })?;
    let mut stats: Vec<HeadStats> = basis
        .heads()
        .par_iter()
        .enumerate()
        .map(|(head, w)| {
            let mut s: Vec<f64> = data.records().map(|z| dot_f32(w, z)).collect();
            let n = s.len() as f64;
            let mean = s.iter().sum::<f64>() / n;
            let std = (s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            s.sort_by(f64::total_cmp);
            HeadStats {
                head,
                min: s[0],
                p5: percentile(&s, 0.05),
                p25: percentile(&s, 0.25),
                median: percentile(&s, 0.5),
                p75: percentile(&s, 0.75),
                p95: percentile(&s, 0.95),
                max: s[s.len() - 1],
                mean,
                std,
                outlier: false,
            }
        })
        .collect();
    let med = median_of(stats.iter().map(|s| s.mean.abs()).collect());
    for s in &mut stats {
        s.outlier = s.mean.abs() > 3.0 * med;
    }
    Ok(stats)
}

fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| DrmError::io(path, e))
}

pub fn write_variance_csv(path: impl AsRef<Path>, eigenvalues: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let fractions = variance_explained(eigenvalues)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["component", "eigenvalue", "cumulative_fraction"])?;
    for (j, (l, f)) in eigenvalues.iter().zip(&fractions).enumerate() {
        w.write_record([j.to_string(), l.to_string(), f.to_string()])?;
    }
    finish(w, path)
}

/// One row per signed head: index, eigenvector index, sign, eigenvalue and
/// weight. Heads without a pairing leave those columns empty.
pub fn write_weights_csv(
    path: impl AsRef<Path>,
    basis: &RewardBasis,
    weights: &AttributeWeights,
) -> Result<()> {
    let path = path.as_ref();
    ensure(weights.k.len() == basis.len(), || {
        format!(
            "{} weights for a basis of {} heads",
            weights.k.len(),
            basis.len()
        )
    })?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["head", "pair", "sign", "eigenvalue", "weight"])?;
    for (h, k) in weights.k.iter().enumerate() {
        let pair = basis
            .pair_index(h)
            .map(|p| p.to_string())
            .unwrap_or_default();
        let eig = basis
            .eigenvalue_of(h)
            .map(|l| l.to_string())
            .unwrap_or_default();
        w.write_record([
            h.to_string(),
            pair,
            basis.sign_of(h).to_string(),
            eig,
            k.to_string(),
        ])?;
    }
    finish(w, path)
}

pub fn write_correlation_csv(path: impl AsRef<Path>, corr: &CorrelationMatrix) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![String::from("attribute")];
    header.extend(corr.attributes.iter().cloned());
    w.write_record(&header)?;
    for (a, row) in corr.attributes.iter().zip(&corr.r) {
        let mut rec = vec![a.clone()];
        rec.extend(row.iter().map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    finish(w, path)
}

pub fn write_head_stats_csv(path: impl AsRef<Path>, stats: &[HeadStats]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for s in stats {
        w.serialize(s)?;
    }
    finish(w, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decompose::BasisSource;
    use crate::heads::{random_heads, NormPolicy, RandomDist};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn variance_examples() {
        assert!(close(
            &variance_explained(&[4.0, 1.0]).unwrap(),
            &[0.8, 1.0]
        ));
        assert!(close(
            &variance_explained(&[2.0; 4]).unwrap(),
            &[0.25, 0.5, 0.75, 1.0]
        ));
        assert!(variance_explained(&[0.0, 0.0]).is_err());
        assert!(variance_explained(&[1.0, -0.5]).is_err());
    }

    fn aw(name: &str, k: &[f64]) -> AttributeWeights {
        AttributeWeights {
            attribute: name.into(),
            k: k.to_vec(),
        }
    }

    #[test]
    fn correlation_examples() {
        let a = [0.5, 0.3, 0.2];
        let m = weight_correlation(&[aw("a", &a), aw("b", &a)]).unwrap();
        assert_eq!(m.r[0][1], 1.0);
        let flipped: Vec<f64> = a.iter().map(|x| 1.0 - 2.0 * x).collect();
        let m = weight_correlation(&[aw("a", &a), aw("b", &flipped)]).unwrap();
        assert!((m.r[0][1] + 1.0).abs() < 1e-12);
        // centered a = (1/6, −1/30, −2/15), b its reversal; r = −13/14
        let m = weight_correlation(&[aw("a", &a), aw("b", &[0.2, 0.3, 0.5])]).unwrap();
        assert!((m.r[0][1] + 13.0 / 14.0).abs() < 1e-12, "{}", m.r[0][1]);
    }

    #[test]
    fn correlation_errors() {
        assert!(weight_correlation(&[aw("a", &[0.5, 0.5])]).is_err());
        assert!(weight_correlation(&[aw("a", &[0.5, 0.5]), aw("b", &[0.2, 0.8, 0.0])]).is_err());
        match weight_correlation(&[aw("a", &[0.1, 0.9]), aw("flat", &[0.5, 0.5])]) {
            Err(DrmError::UndefinedCorrelation { first, second }) => {
                assert_eq!((first.as_str(), second.as_str()), ("a", "flat"))
            }
            other => panic!("expected undefined correlation, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn correlation_matrix_well_formed(
            ks in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 5), 2..5),
            scale in 0.1f64..10.0,
            shift in -3.0f64..3.0,
        ) {
            let ws: Vec<AttributeWeights> = ks
                .iter()
                .enumerate()
                .map(|(i, k)| aw(&i.to_string(), k))
                .collect();
            let Ok(m) = weight_correlation(&ws) else { return Ok(()); };
            for i in 0..ws.len() {
                prop_assert_eq!(m.r[i][i], 1.0);
                for j in 0..ws.len() {
                    prop_assert_eq!(m.r[i][j], m.r[j][i]);
                    prop_assert!((-1.0..=1.0).contains(&m.r[i][j]));
                }
            }
            let moved: Vec<f64> = ks[1].iter().map(|x| scale * x + shift).collect();
            let r = pearson(&ks[0], &moved).unwrap();
            prop_assert!((r - m.r[0][1]).abs() < 1e-9);
        }

        #[test]
        fn variance_curve_monotone(ls in prop::collection::vec(0.0f64..5.0, 1..20)) {
            prop_assume!(ls.iter().sum::<f64>() > 0.0);
            let f = variance_explained(&ls).unwrap();
            prop_assert!(f.windows(2).all(|w| w[1] >= w[0]));
            prop_assert!((f[f.len() - 1] - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn percentile_interpolates() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&s, 0.5), 3.0);
        assert_eq!(percentile(&s, 0.25), 2.0);
        assert!((percentile(&s, 0.05) - 1.2).abs() < 1e-15);
        assert_eq!(percentile(&[7.0], 0.95), 7.0);
    }

    fn two_heads() -> RewardBasis {
        RewardBasis::new(
            3,
            vec![vec![0.0, 0.0, 1.0], vec![0.0, 0.0, -1.0]],
            vec![Some(1.0); 2],
            vec![1, -1],
            BasisSource::Pca,
            NormPolicy::Unit,
        )
        .unwrap()
    }

    #[test]
    fn orthogonal_head_has_zero_stats_and_negation_mirrors() {
        let flat: Vec<f32> = (0..30)
            .map(|i| if i % 3 == 2 { 0.0 } else { i as f32 - 10.0 })
            .collect();
        let data = EmbeddingDiffDataset::from_flat(3, flat, None).unwrap();
        let st = head_score_stats(&two_heads(), &data).unwrap();
        for s in &st {
            for v in [
                s.min, s.p5, s.p25, s.median, s.p75, s.p95, s.max, s.mean, s.std,
            ] {
                assert_eq!(v, 0.0);
            }
        }

        let flat: Vec<f32> = (0..30).map(|i| ((i * 7) % 11) as f32 - 4.0).collect();
        let data = EmbeddingDiffDataset::from_flat(3, flat, None).unwrap();
        let st = head_score_stats(&two_heads(), &data).unwrap();
        let (p, n) = (&st[0], &st[1]);
        assert_eq!(p.min, -n.max);
        assert_eq!(p.max, -n.min);
        assert_eq!(p.mean, -n.mean);
        assert!((p.p5 + n.p95).abs() < 1e-12);
        assert!((p.median + n.median).abs() < 1e-12);
        assert_eq!(p.std, n.std);
    }

    #[test]
    fn random_heads_on_gaussian_data_center_at_zero() {
        let (n, d) = (4000usize, 8usize);
        let mut rng = crate::rng::substream(5, 99);
        let flat: Vec<f32> = (0..n * d)
            .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
            .collect();
        let data = EmbeddingDiffDataset::from_flat(d, flat, None).unwrap();
        let basis = random_heads(1, 16, d, RandomDist::Gaussian).unwrap();
        let bound = 4.0 / (n as f64).sqrt();
        for s in head_score_stats(&basis, &data).unwrap() {
            assert!(s.mean.abs() <= bound, "head {} mean {}", s.head, s.mean);
        }
    }

    #[test]
    fn outlier_flag_uses_median_abs_mean() {
        // means along e1, e2, e3 are 1, 1, 10
        let data = EmbeddingDiffDataset::from_flat(3, vec![1.0, 1.0, 10.0], None).unwrap();
        let basis = RewardBasis::unsigned(
            3,
            vec![
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
            BasisSource::RandomGaussian,
        )
        .unwrap();
        let flags: Vec<bool> = head_score_stats(&basis, &data)
            .unwrap()
            .iter()
            .map(|s| s.outlier)
            .collect();
        assert_eq!(flags, vec![false, false, true]);
    }

    #[test]
    fn csv_outputs_have_expected_rows() {
        let dir = tempfile::tempdir().unwrap();
        write_variance_csv(dir.path().join("variance.csv"), &[3.0, 1.0]).unwrap();
        let text = std::fs::read_to_string(dir.path().join("variance.csv")).unwrap();
        assert_eq!(text.lines().nth(2).unwrap(), "1,1,1");

        let b = two_heads();
        write_weights_csv(dir.path().join("w.csv"), &b, &aw("a", &[0.7, 0.3])).unwrap();
        let text = std::fs::read_to_string(dir.path().join("w.csv")).unwrap();
        assert_eq!(text.lines().nth(2).unwrap(), "1,0,-1,1,0.3");
        assert!(write_weights_csv(dir.path().join("x.csv"), &b, &aw("a", &[1.0])).is_err());
    }
}
