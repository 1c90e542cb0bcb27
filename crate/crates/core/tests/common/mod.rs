#![allow(dead_code)]

use drm_core::dataio::{EmbeddingDiffDataset, Metadata, Split};
use drm_core::decompose::{
    accumulate_parallel, build_basis, covariance, eigendecompose, EigenPairs, RewardBasis, TopH,
};
use drm_core::linalg::{dot, sigmoid};
use drm_core::rng::substream;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

/// Cyclic Jacobi rotations. Eigenvalues sorted descending, eigenvectors
/// as the matching columns.
pub fn jacobi(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let mut a = m.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let scale = a.norm().max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[(y, y)].total_cmp(&a[(x, x)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    (values, vectors)
}

pub fn jacobi_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    jacobi(m).0
}

pub fn random_symmetric(seed: u64, d: usize) -> DMatrix<f64> {
    let mut rng = substream(seed, 1000);
    let b = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    (&b + b.transpose()) * 0.5
}

pub fn gaussian_flat(seed: u64, n: usize, d: usize) -> Vec<f32> {
    let mut rng = substream(seed, 1001);
    (0..n * d)
        .map(|_| rng.sample::<f64, _>(StandardNormal) as f32 + 0.25)
        .collect()
}

/// Plain single-pass f64 sum and full scatter.
pub fn batch_moments(flat: &[f32], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0; d];
    let mut scatter = vec![0.0; d * d];
    let mut z = vec![0.0f64; d];
    for rec in flat.chunks_exact(d) {
        for (zj, &x) in z.iter_mut().zip(rec) {
            *zj = x as f64;
        }
        for i in 0..d {
            sum[i] += z[i];
            let zi = z[i];
            let row = &mut scatter[i * d..(i + 1) * d];
            for j in i..d {
                row[j] += zi * z[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            scatter[i * d + j] = scatter[j * d + i];
        }
    }
    (sum, scatter)
}

pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}

/// Centered PCA over the whole dataset and a sign-calibrated bank of
/// `2·h_distinct` heads.
pub fn pca_basis(data: &EmbeddingDiffDataset, h_distinct: usize) -> (EigenPairs, RewardBasis) {
    let acc = accumulate_parallel(data, 256).unwrap();
    let cov = covariance(&acc, true).unwrap();
    let pairs = eigendecompose(&cov, TopH::All).unwrap();
    let basis = build_basis(&pairs, h_distinct, Some(data)).unwrap();
    (pairs, basis)
}

/// Index of the head with the largest signed cosine to `v`.
pub fn aligned_head(basis: &RewardBasis, v: &[f64]) -> usize {
    (0..basis.len())
        .max_by(|&a, &b| dot(&basis.heads()[a], v).total_cmp(&dot(&basis.heads()[b], v)))
        .unwrap()
}

fn unit_axes(d: usize, k: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|a| (0..d).map(|j| if j == a { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// Builds a labelled dataset from a per-attribute sampler returning
/// `(z', preference direction)`; the record is stored as `z'` with
/// probability `σ(β·u·z')` and as `−z'` otherwise.
fn labelled<F>(
    seed: u64,
    d: usize,
    attrs: usize,
    n_per_attr: usize,
    beta: f64,
    mut draw: F,
) -> EmbeddingDiffDataset
where
    F: FnMut(usize, &mut rand_chacha::ChaCha8Rng) -> (Vec<f64>, Vec<f64>),
{
    let mut rng = substream(seed, 1002);
    let mut flat = Vec::with_capacity(attrs * n_per_attr * d);
    let mut meta = Vec::with_capacity(attrs * n_per_attr);
    for a in 0..attrs {
        let name = format!("attr_{a}");
        for i in 0..n_per_attr {
            let (z, u) = draw(a, &mut rng);
            let keep = rng.random::<f64>() < sigmoid(beta * dot(&u, &z));
            let s = if keep { 1.0 } else { -1.0 };
            flat.extend(z.iter().map(|x| (s * x) as f32));
            meta.push(Metadata::new(
                format!("{name}_{i}"),
                name.clone(),
                Split::Test,
            ));
        }
    }
    EmbeddingDiffDataset::from_flat(d, flat, Some(meta)).unwrap()
}

/// Two attributes over the same diff distribution, anisotropic in the
/// (e0, e1) plane; attribute 0 prefers e0, attribute 1 prefers e1. No single
/// direction serves both.
pub fn conflict_world(
    seed: u64,
    d: usize,
    n_per_attr: usize,
    scales: [f64; 2],
) -> (EmbeddingDiffDataset, Vec<Vec<f64>>) {
    let axes = unit_axes(d, 2);
    let data = labelled(seed, d, 2, n_per_attr, 50.0, |a, rng| {
        let mut z: Vec<f64> = (0..d)
            .map(|_| 0.05 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        z[0] += scales[0] * rng.sample::<f64, _>(StandardNormal);
        z[1] += scales[1] * rng.sample::<f64, _>(StandardNormal);
        (z, axes[a].clone())
    });
    (data, axes)
}

/// A dominant shared direction e0 that every attribute prefers, plus a
/// weaker attribute-specific direction e_{a+1}.
pub fn shared_direction_world(
    seed: u64,
    d: usize,
    k: usize,
    n_per_attr: usize,
) -> EmbeddingDiffDataset {
    let axes = unit_axes(d, k + 1);
    labelled(seed, d, k, n_per_attr, 2.0, |a, rng| {
        let mut z: Vec<f64> = (0..d)
            .map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        z[0] += 5.0 * rng.sample::<f64, _>(StandardNormal).abs();
        z[a + 1] += 1.5 * rng.sample::<f64, _>(StandardNormal).abs();
        let u: Vec<f64> = axes[0]
            .iter()
            .zip(&axes[a + 1])
            .map(|(x, y)| x + y)
            .collect();
        (z, u)
    })
}
