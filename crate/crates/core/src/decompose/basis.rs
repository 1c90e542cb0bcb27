//! Head banks and their `.drmb` file format.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "DRMB"
//!      4     2  version (u16) = 1
//!      6     2  reserved (u16) = 0
//!      8     4  d (u32)
//!     12     4  H (u32)
//!     16     4  JSON header length in bytes (u32)
//!     20     -  JSON header, then H×d little-endian f32, one head per row
//! ```

use std::path::Path;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::dataio::EmbeddingDiffDataset;
use crate::decompose::spectral::EigenPairs;
use crate::error::{ensure, DrmError, Result};
use crate::heads::{HeadVector, NormPolicy, UNIT_TOL};
use crate::linalg::{dot_f32, norm};

pub const BASIS_MAGIC: [u8; 4] = *b"DRMB";
pub const BASIS_VERSION: u16 = 1;
const BASIS_HEADER_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisSource {
    Pca,
    RandomUniform,
    RandomGaussian,
    Trained,
    /// Combined head produced by test-time adaptation.
    Adapted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardBasis {
    d: usize,
    heads: Vec<Vec<f64>>,
    eigenvalues: Vec<Option<f64>>,
    signs: Vec<i8>,
    source: BasisSource,
    norm_policy: NormPolicy,
    spectrum: Option<Vec<f64>>,
    extra: serde_json::Value,
}

impl RewardBasis {
    pub fn new(
        d: usize,
        heads: Vec<Vec<f64>>,
        eigenvalues: Vec<Option<f64>>,
        signs: Vec<i8>,
        source: BasisSource,
        norm_policy: NormPolicy,
    ) -> Result<Self> {
        let basis = Self {
            d,
            heads,
            eigenvalues,
            signs,
            source,
            norm_policy,
            spectrum: None,
            extra: serde_json::Value::Null,
        };
        basis.validate()?;
        Ok(basis)
    }

    /// Unit heads with no eigenvalue and sign +1 (random or trained banks).
    pub fn unsigned(d: usize, heads: Vec<Vec<f64>>, source: BasisSource) -> Result<Self> {
        let h = heads.len();
        Self::new(
            d,
            heads,
            vec![None; h],
            vec![1; h],
            source,
            NormPolicy::Unit,
        )
    }

    pub fn from_head(head: &HeadVector, source: BasisSource) -> Result<Self> {
        Self::new(
            head.d(),
            vec![head.w().to_vec()],
            vec![None],
            vec![1],
            source,
            head.norm_policy(),
        )
    }

    fn validate(&self) -> Result<()> {
        let h = self.heads.len();
        ensure(self.d >= 1, || "basis dimension must be positive".into())?;
        ensure(h >= 1, || "basis has no heads".into())?;
        ensure(self.eigenvalues.len() == h && self.signs.len() == h, || {
            "eigenvalue and sign tables must have one entry per head".into()
        })?;
        for (i, w) in self.heads.iter().enumerate() {
            ensure(w.len() == self.d, || {
                format!("head {i} has length {}, expected {}", w.len(), self.d)
            })?;
            ensure(w.iter().all(|x| x.is_finite()), || {
                format!("head {i} has a non-finite component")
            })?;
            if self.norm_policy == NormPolicy::Unit {
                let n = norm(w);
                ensure((n - 1.0).abs() <= UNIT_TOL, || {
                    format!("head {i} has norm {n}, expected unit")
                })?;
            }
        }
        ensure(self.signs.iter().all(|&s| s == 1 || s == -1), || {
            "signs must be ±1".into()
        })?;
        if self.source == BasisSource::Pca {
            ensure(h.is_multiple_of(2), || {
                "a pca basis must hold sign pairs".into()
            })?;
            for j in 0..h / 2 {
                let (a, b) = (&self.heads[2 * j], &self.heads[2 * j + 1]);
                ensure(a.iter().zip(b).all(|(x, y)| *x == -*y), || {
                    format!("heads {} and {} are not a sign pair", 2 * j, 2 * j + 1)
                })?;
                ensure(
                    self.signs[2 * j] == 1
                        && self.signs[2 * j + 1] == -1
                        && self.eigenvalues[2 * j].is_some()
                        && self.eigenvalues[2 * j] == self.eigenvalues[2 * j + 1],
                    || format!("pair {j} has inconsistent sign or eigenvalue entries"),
                )?;
                if j > 0 {
                    ensure(
                        self.eigenvalues[2 * j] <= self.eigenvalues[2 * j - 1],
                        || "pca heads must be ordered by descending eigenvalue".into(),
                    )?;
                }
            }
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn heads(&self) -> &[Vec<f64>] {
        &self.heads
    }

    pub fn head(&self, i: usize) -> HeadVector {
        match self.norm_policy {
            NormPolicy::Unit => HeadVector::unit(self.heads[i].clone())
                .expect("basis heads are validated unit vectors"),
            NormPolicy::Raw => HeadVector::raw(self.heads[i].clone()),
        }
    }

    pub fn eigenvalue_of(&self, i: usize) -> Option<f64> {
        self.eigenvalues[i]
    }

    pub fn sign_of(&self, i: usize) -> i8 {
        self.signs[i]
    }

    pub fn source(&self) -> BasisSource {
        self.source
    }

    pub fn norm_policy(&self) -> NormPolicy {
        self.norm_policy
    }

    /// Full eigenvalue spectrum of the covariance the basis came from.
    pub fn spectrum(&self) -> Option<&[f64]> {
        self.spectrum.as_deref()
    }

    pub fn set_spectrum(&mut self, spectrum: Vec<f64>) {
        self.spectrum = Some(spectrum);
    }

    /// Free-form JSON carried in the file header (config echo, training curve).
    pub fn extra(&self) -> &serde_json::Value {
        &self.extra
    }

    pub fn set_extra(&mut self, extra: serde_json::Value) {
        self.extra = extra;
    }

    /// Index of the distinct eigenvector a head derives from (pca only).
    pub fn pair_index(&self, i: usize) -> Option<usize> {
        (self.source == BasisSource::Pca).then_some(i / 2)
    }

    /// The first `h` heads. Sign pairs of a pca basis stay together, so `h`
    /// must be even there.
    pub fn truncate(&self, h: usize) -> Result<Self> {
        ensure(h >= 1 && h <= self.len(), || {
            format!("cannot keep {h} heads of {}", self.len())
        })?;
        ensure(
            self.source != BasisSource::Pca || h.is_multiple_of(2),
            || format!("truncating a pca basis to {h} heads would split a sign pair"),
        )?;
        let mut out = self.clone();
        out.heads.truncate(h);
        out.eigenvalues.truncate(h);
        out.signs.truncate(h);
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = FileHeader {
            d: self.d,
            n_heads: self.len(),
            source: self.source,
            norm_policy: self.norm_policy,
            eigenvalues: self.eigenvalues.clone(),
            signs: self.signs.clone(),
            spectrum: self.spectrum.clone(),
            extra: self.extra.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let too_big = |what: &str| DrmError::Format(format!("{what} exceeds u32"));
        let mut out = Vec::with_capacity(BASIS_HEADER_LEN + json.len() + self.len() * self.d * 4);
        out.extend_from_slice(&BASIS_MAGIC);
        out.extend_from_slice(&BASIS_VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(
            &u32::try_from(self.d)
                .map_err(|_| too_big("d"))?
                .to_le_bytes(),
        );
        out.extend_from_slice(
            &u32::try_from(self.len())
                .map_err(|_| too_big("head count"))?
                .to_le_bytes(),
        );
        out.extend_from_slice(
            &u32::try_from(json.len())
                .map_err(|_| too_big("header"))?
                .to_le_bytes(),
        );
        out.extend_from_slice(&json);
        for w in &self.heads {
            for &x in w {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses `.drmb` bytes. Unit-policy heads are renormalized in f64 after
    /// the f32 round trip.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| DrmError::Corruption {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 4 || bytes[0..4] != BASIS_MAGIC {
            return Err(DrmError::UnsupportedFormat {
                path: path.to_path_buf(),
                reason: "missing DRMB magic".into(),
            });
        }
        if bytes.len() < BASIS_HEADER_LEN {
            return Err(corrupt("header truncated".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != BASIS_VERSION {
            return Err(DrmError::UnsupportedFormat {
                path: path.to_path_buf(),
                reason: format!("version {version}"),
            });
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let (d, h, json_len) = (u32_at(8), u32_at(12), u32_at(16));
        let json_end = BASIS_HEADER_LEN
            .checked_add(json_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("JSON header runs past end of file".into()))?;
        let header: FileHeader = serde_json::from_slice(&bytes[BASIS_HEADER_LEN..json_end])?;
        if header.d != d || header.n_heads != h {
            return Err(corrupt(format!(
                "binary header says d={d}, H={h}; JSON says d={}, H={}",
                header.d, header.n_heads
            )));
        }
        let payload = &bytes[json_end..];
        if payload.len() != h * d * 4 {
            return Err(corrupt(format!(
                "head payload is {} bytes, expected {}",
                payload.len(),
                h * d * 4
            )));
        }
        let mut heads: Vec<Vec<f64>> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect::<Vec<_>>()
            .chunks_exact(d.max(1))
            .map(|w| w.to_vec())
            .collect();
        if header.norm_policy == NormPolicy::Unit {
            for w in &mut heads {
                let n = norm(w);
                if n > 0.0 {
                    w.iter_mut().for_each(|x| *x /= n);
                }
            }
        }
        let mut basis = Self::new(
            d,
            heads,
            header.eigenvalues,
            header.signs,
            header.source,
            header.norm_policy,
        )?;
        basis.spectrum = header.spectrum;
        basis.extra = header.extra;
        Ok(basis)
    }

    pub fn to_base64(&self) -> Result<String> {
        Ok(base64::engine::general_purpose::STANDARD.encode(self.to_bytes()?))
    }

    pub fn from_base64(s: &str) -> Result<Self> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(s)
            .map_err(|e| DrmError::Format(format!("bad base64 head payload: {e}")))?;
        Self::from_bytes(&bytes, Path::new("<embedded>"))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FileHeader {
    d: usize,
    n_heads: usize,
    source: BasisSource,
    norm_policy: NormPolicy,
    eigenvalues: Vec<Option<f64>>,
    signs: Vec<i8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spectrum: Option<Vec<f64>>,
    #[serde(default)]
    extra: serde_json::Value,
}

pub fn write_basis(basis: &RewardBasis, path: impl AsRef<Path>) -> Result<u64> {
    let path = path.as_ref();
    let bytes = basis.to_bytes()?;
    std::fs::write(path, &bytes).map_err(|e| DrmError::io(path, e))?;
    Ok(bytes.len() as u64)
}

pub fn read_basis(path: impl AsRef<Path>) -> Result<RewardBasis> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| DrmError::io(path, e))?;
    RewardBasis::from_bytes(&bytes, path)
}

/// True when `w` should be flipped: more calibration records disagree with
/// it than agree. Ties keep the original sign.
fn disagrees(w: &[f64], calibration: &EmbeddingDiffDataset) -> bool {
    let (mut pos, mut neg) = (0usize, 0usize);
    for z in calibration.records() {
        let s = dot_f32(w, z);
        if s > 0.0 {
            pos += 1;
        } else if s < 0.0 {
            neg += 1;
        }
    }
    neg > pos
}

/// Signed head bank from the top `h_distinct` eigenvectors: `+w_j, −w_j`
/// for each, by descending eigenvalue. With calibration data, `+w_j` is the
/// orientation whose pairwise accuracy on it is at least 1/2.
pub fn build_basis(
    pairs: &EigenPairs,
    h_distinct: usize,
    calibration: Option<&EmbeddingDiffDataset>,
) -> Result<RewardBasis> {
    ensure(h_distinct >= 1, || "h_distinct must be at least 1".into())?;
    ensure(h_distinct <= pairs.len(), || {
        format!(
            "asked for {h_distinct} distinct heads, only {} eigenpairs available",
            pairs.len()
        )
    })?;
    if let Some(cal) = calibration {
        ensure(cal.d() == pairs.d(), || {
            format!(
                "calibration data has d = {}, eigenvectors have d = {}",
                cal.d(),
                pairs.d()
            )
        })?;
    }
    let mut heads = Vec::with_capacity(2 * h_distinct);
    let mut eigenvalues = Vec::with_capacity(2 * h_distinct);
    let mut signs = Vec::with_capacity(2 * h_distinct);
    for j in 0..h_distinct {
        let mut w = pairs.vector(j);
        let n = norm(&w);
        w.iter_mut().for_each(|x| *x /= n);
        if calibration.is_some_and(|cal| disagrees(&w, cal)) {
            w.iter_mut().for_each(|x| *x = -*x);
        }
        let neg: Vec<f64> = w.iter().map(|x| -x).collect();
        heads.push(w);
        heads.push(neg);
        eigenvalues.extend([Some(pairs.values[j]); 2]);
        signs.extend([1i8, -1]);
    }
    let mut basis = RewardBasis::new(
        pairs.d(),
        heads,
        eigenvalues,
        signs,
        BasisSource::Pca,
        NormPolicy::Unit,
    )?;
    basis.set_spectrum(pairs.values.clone());
    Ok(basis)
}
