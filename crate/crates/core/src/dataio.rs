//! Binary storage for embedding pairs and embedding differences.
//!
//! Layout (little-endian):
//!
//! ```text
//! offset  size  field
//!      0     4  magic  "DRME"
//!      4     2  version (u16) = 1
//!      6     1  mode    (u8)  0 = pairs, 1 = diffs
//!      7     1  dtype   (u8)  0 = f32
//!      8     4  d       (u32)
//!     12     8  N       (u64)
//!     20     -  N records of (2d | d) f32 values
//! ```
//!
//! A pair record stores the chosen embedding followed by the rejected one.
//! Per-record metadata lives in a JSONL sidecar at `<path>.meta.jsonl`; the
//! record index is the only join key, so nothing here ever reorders records.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{DrmError, Result};

pub const MAGIC: [u8; 4] = *b"DRME";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Pairs,
    Diffs,
}

impl Mode {
    fn code(self) -> u8 {
        match self {
            Mode::Pairs => 0,
            Mode::Diffs => 1,
        }
    }

    /// Number of d-vectors per record.
    pub fn width(self) -> usize {
        match self {
            Mode::Pairs => 2,
            Mode::Diffs => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Adapt,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metadata {
    pub id: String,
    pub attribute: String,
    pub split: Split,
}

impl Metadata {
    pub fn new(id: impl Into<String>, attribute: impl Into<String>, split: Split) -> Self {
        Self {
            id: id.into(),
            attribute: attribute.into(),
            split,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.attribute.is_empty() {
            return Err(DrmError::Validation(format!(
                "record `{}` has an empty attribute",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub chosen: Vec<f32>,
    pub rejected: Vec<f32>,
}

impl PairRecord {
    pub fn new(chosen: Vec<f32>, rejected: Vec<f32>) -> Self {
        Self { chosen, rejected }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffRecord {
    pub z: Vec<f32>,
}

impl DiffRecord {
    pub fn new(z: Vec<f32>) -> Self {
        Self { z }
    }
}

impl AsRef<[f32]> for DiffRecord {
    fn as_ref(&self) -> &[f32] {
        &self.z
    }
}

fn check_finite(values: &[f32], what: impl FnOnce() -> String) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DrmError::Validation(format!(
            "{} has a non-finite component",
            what()
        )))
    }
}

fn check_meta(meta: Option<&[Metadata]>, n: usize) -> Result<()> {
    if let Some(meta) = meta {
        if meta.len() != n {
            return Err(DrmError::Validation(format!(
                "metadata has {} entries for {} records",
                meta.len(),
                n
            )));
        }
        meta.iter().try_for_each(Metadata::validate)?;
    }
    Ok(())
}

/// N×d matrix of embedding differences, stored row-major as f32.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDiffDataset {
    d: usize,
    data: Vec<f32>,
    meta: Option<Vec<Metadata>>,
}

impl EmbeddingDiffDataset {
    pub fn empty(d: usize) -> Result<Self> {
        Self::from_flat(d, Vec::new(), None)
    }

    pub fn from_flat(d: usize, data: Vec<f32>, meta: Option<Vec<Metadata>>) -> Result<Self> {
        if d == 0 {
            return Err(DrmError::Validation("dimension must be positive".into()));
        }
        if !data.len().is_multiple_of(d) {
            return Err(DrmError::Format(format!(
                "payload of {} values is not a multiple of d = {}",
                data.len(),
                d
            )));
        }
        check_finite(&data, || "diff dataset".to_string())?;
        check_meta(meta.as_deref(), data.len() / d)?;
        Ok(Self { d, data, meta })
    }

    pub fn from_records(records: &[DiffRecord], meta: Option<Vec<Metadata>>) -> Result<Self> {
        let d = records
            .first()
            .map(|r| r.z.len())
            .ok_or_else(|| DrmError::Validation("cannot infer d from zero records".into()))?;
        Self::from_rows(d, records.iter().map(|r| r.z.as_slice()), meta)
    }

    pub fn from_rows<'a>(
        d: usize,
        rows: impl IntoIterator<Item = &'a [f32]>,
        meta: Option<Vec<Metadata>>,
    ) -> Result<Self> {
        let mut data = Vec::new();
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != d {
                return Err(DrmError::Format(format!(
                    "record {} has length {}, expected {}",
                    i,
                    row.len(),
                    d
                )));
            }
            data.extend_from_slice(row);
        }
        Self::from_flat(d, data, meta)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn record(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn records(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.d)
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.data
    }

    pub fn meta(&self) -> Option<&[Metadata]> {
        self.meta.as_deref()
    }

    pub fn with_meta(mut self, meta: Vec<Metadata>) -> Result<Self> {
        check_meta(Some(&meta), self.len())?;
        self.meta = Some(meta);
        Ok(self)
    }

    /// Record id: the sidecar id when present, the index otherwise.
    pub fn id(&self, i: usize) -> String {
        match &self.meta {
            Some(meta) => meta[i].id.clone(),
            None => i.to_string(),
        }
    }

    /// Records at `indices`, in the order given, metadata carried along.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            data.extend_from_slice(self.record(i));
        }
        let meta = self
            .meta
            .as_ref()
            .map(|m| indices.iter().map(|&i| m[i].clone()).collect());
        Self {
            d: self.d,
            data,
            meta,
        }
    }

    /// Record indices grouped by attribute label, in record order.
    pub fn attribute_groups(&self) -> Result<BTreeMap<String, Vec<usize>>> {
        let meta = self
            .meta
            .as_ref()
            .ok_or_else(|| DrmError::Validation("dataset carries no attribute metadata".into()))?;
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, m) in meta.iter().enumerate() {
            groups.entry(m.attribute.clone()).or_default().push(i);
        }
        Ok(groups)
    }

    /// Concatenates datasets of equal dimension. Metadata is kept only if
    /// every part has it.
    pub fn concat(parts: &[&EmbeddingDiffDataset]) -> Result<Self> {
        let d = parts
            .first()
            .map(|p| p.d)
            .ok_or_else(|| DrmError::Validation("nothing to concatenate".into()))?;
        if parts.iter().any(|p| p.d != d) {
            return Err(DrmError::Format("datasets differ in dimension".into()));
        }
        let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        let meta = if parts.iter().all(|p| p.meta.is_some()) {
            Some(
                parts
                    .iter()
                    .flat_map(|p| p.meta.as_ref().unwrap().iter().cloned())
                    .collect(),
            )
        } else {
            None
        };
        Ok(Self { d, data, meta })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    d: usize,
    pairs: Vec<PairRecord>,
    meta: Option<Vec<Metadata>>,
}

impl PairDataset {
    pub fn new(d: usize, pairs: Vec<PairRecord>, meta: Option<Vec<Metadata>>) -> Result<Self> {
        if d == 0 {
            return Err(DrmError::Validation("dimension must be positive".into()));
        }
        for (i, p) in pairs.iter().enumerate() {
            if p.chosen.len() != d || p.rejected.len() != d {
                return Err(DrmError::Format(format!(
                    "pair {} has lengths ({}, {}), expected {}",
                    i,
                    p.chosen.len(),
                    p.rejected.len(),
                    d
                )));
            }
            check_finite(&p.chosen, || format!("pair {i} chosen embedding"))?;
            check_finite(&p.rejected, || format!("pair {i} rejected embedding"))?;
        }
        check_meta(meta.as_deref(), pairs.len())?;
        Ok(Self { d, pairs, meta })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[PairRecord] {
        &self.pairs
    }

    pub fn meta(&self) -> Option<&[Metadata]> {
        self.meta.as_deref()
    }

    pub fn to_diffs(&self) -> Result<EmbeddingDiffDataset> {
        pairs_to_diffs(&self.pairs, self.meta.clone())
    }
}

/// z_i = chosen_i − rejected_i, record order and metadata preserved.
pub fn pairs_to_diffs(
    pairs: &[PairRecord],
    meta: Option<Vec<Metadata>>,
) -> Result<EmbeddingDiffDataset> {
    let d = pairs
        .first()
        .map(|p| p.chosen.len())
        .ok_or_else(|| DrmError::Validation("cannot infer d from zero pairs".into()))?;
    let mut data = Vec::with_capacity(pairs.len() * d);
    for (i, p) in pairs.iter().enumerate() {
        if p.chosen.len() != d || p.rejected.len() != d {
            return Err(DrmError::Validation(format!(
                "pair {} has lengths ({}, {}), expected {}",
                i,
                p.chosen.len(),
                p.rejected.len(),
                d
            )));
        }
        data.extend(p.chosen.iter().zip(&p.rejected).map(|(c, r)| c - r));
    }
    EmbeddingDiffDataset::from_flat(d, data, meta)
}

#[derive(Debug, Clone, PartialEq)]
pub enum StoredDataset {
    Pairs(PairDataset),
    Diffs(EmbeddingDiffDataset),
}

impl StoredDataset {
    pub fn mode(&self) -> Mode {
        match self {
            StoredDataset::Pairs(_) => Mode::Pairs,
            StoredDataset::Diffs(_) => Mode::Diffs,
        }
    }

    /// Diff view of the stored data, converting pairs when needed.
    pub fn into_diffs(self) -> Result<EmbeddingDiffDataset> {
        match self {
            StoredDataset::Pairs(p) => p.to_diffs(),
            StoredDataset::Diffs(d) => Ok(d),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Header {
    pub version: u16,
    pub mode: Mode,
    pub dtype: u8,
    pub d: u32,
    pub n: u64,
}

impl Header {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut buf = [0u8; HEADER_LEN];
        buf[0..4].copy_from_slice(&MAGIC);
        buf[4..6].copy_from_slice(&self.version.to_le_bytes());
        buf[6] = self.mode.code();
        buf[7] = self.dtype;
        buf[8..12].copy_from_slice(&self.d.to_le_bytes());
        buf[12..20].copy_from_slice(&self.n.to_le_bytes());
        buf
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let unsupported = |reason: String| DrmError::UnsupportedFormat {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 4 || bytes[0..4] != MAGIC {
            return Err(unsupported("missing DRME magic".into()));
        }
        if bytes.len() < HEADER_LEN {
            return Err(DrmError::Corruption {
                path: path.to_path_buf(),
                reason: format!("header truncated to {} bytes", bytes.len()),
            });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(unsupported(format!("version {version}")));
        }
        let mode = match bytes[6] {
            0 => Mode::Pairs,
            1 => Mode::Diffs,
            m => return Err(unsupported(format!("mode {m}"))),
        };
        let dtype = bytes[7];
        if dtype != 0 {
            return Err(unsupported(format!("dtype {dtype}")));
        }
        let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        Ok(Header {
            version,
            mode,
            dtype,
            d,
            n,
        })
    }

    /// Exact payload size in bytes, or `None` on overflow.
    pub fn payload_len(&self) -> Option<u64> {
        self.n
            .checked_mul(self.mode.width() as u64)?
            .checked_mul(self.d as u64)?
            .checked_mul(4)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.jsonl");
    PathBuf::from(s)
}

fn write_file(
    path: &Path,
    mode: Mode,
    d: usize,
    rows: impl Iterator<Item = f32>,
    n: usize,
    meta: Option<&[Metadata]>,
) -> Result<u64> {
    let header = Header {
        version: VERSION,
        mode,
        dtype: 0,
        d: u32::try_from(d).map_err(|_| DrmError::Format(format!("d = {d} exceeds u32")))?,
        n: n as u64,
    };
    let file = File::create(path).map_err(|e| DrmError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut written = HEADER_LEN as u64;
    w.write_all(&header.encode())
        .map_err(|e| DrmError::io(path, e))?;
    for v in rows {
        w.write_all(&v.to_le_bytes())
            .map_err(|e| DrmError::io(path, e))?;
        written += 4;
    }
    w.flush().map_err(|e| DrmError::io(path, e))?;

    let sidecar = sidecar_path(path);
    match meta {
        Some(meta) => {
            let file = File::create(&sidecar).map_err(|e| DrmError::io(&sidecar, e))?;
            let mut w = BufWriter::new(file);
            for m in meta {
                serde_json::to_writer(&mut w, m)?;
                w.write_all(b"\n").map_err(|e| DrmError::io(&sidecar, e))?;
            }
            w.flush().map_err(|e| DrmError::io(&sidecar, e))?;
        }
        None => {
            // a stale sidecar would be joined to the new payload on read
            if sidecar.exists() {
                std::fs::remove_file(&sidecar).map_err(|e| DrmError::io(&sidecar, e))?;
            }
        }
    }
    Ok(written)
}

/// Writes a diff-mode file; returns the number of payload+header bytes.
pub fn write_diffs(dataset: &EmbeddingDiffDataset, path: impl AsRef<Path>) -> Result<u64> {
    write_file(
        path.as_ref(),
        Mode::Diffs,
        dataset.d,
        dataset.data.iter().copied(),
        dataset.len(),
        dataset.meta(),
    )
}

/// Writes a pair-mode file; returns the number of payload+header bytes.
pub fn write_pairs(dataset: &PairDataset, path: impl AsRef<Path>) -> Result<u64> {
    let values = dataset
        .pairs
        .iter()
        .flat_map(|p| p.chosen.iter().chain(&p.rejected).copied());
    write_file(
        path.as_ref(),
        Mode::Pairs,
        dataset.d,
        values,
        dataset.len(),
        dataset.meta(),
    )
}

pub fn write_dataset(dataset: &StoredDataset, path: impl AsRef<Path>) -> Result<u64> {
    match dataset {
        StoredDataset::Pairs(p) => write_pairs(p, path),
        StoredDataset::Diffs(d) => write_diffs(d, path),
    }
}

pub fn read_header(path: impl AsRef<Path>) -> Result<Header> {
    use std::io::Read;
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(HEADER_LEN);
    File::open(path)
        .map_err(|e| DrmError::io(path, e))?
        .take(HEADER_LEN as u64)
        .read_to_end(&mut buf)
        .map_err(|e| DrmError::io(path, e))?;
    Header::decode(&buf, path)
}

fn read_sidecar(path: &Path, expected: usize) -> Result<Option<Vec<Metadata>>> {
    let sidecar = sidecar_path(path);
    if !sidecar.exists() {
        return Ok(None);
    }
    let file = File::open(&sidecar).map_err(|e| DrmError::io(&sidecar, e))?;
    let mut meta = Vec::with_capacity(expected);
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| DrmError::io(&sidecar, e))?;
        if line.trim().is_empty() {
            continue;
        }
        meta.push(serde_json::from_str::<Metadata>(&line)?);
    }
    if meta.len() != expected {
        return Err(DrmError::MetadataMismatch {
            path: sidecar,
            expected,
            found: meta.len(),
        });
    }
    Ok(Some(meta))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<StoredDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| DrmError::io(path, e))?;
    let header = Header::decode(&bytes, path)?;
    let corrupt = |reason: String| DrmError::Corruption {
        path: path.to_path_buf(),
        reason,
    };
    if header.d == 0 {
        return Err(corrupt("header declares d = 0".into()));
    }
    let expected = header
        .payload_len()
        .ok_or_else(|| corrupt("declared payload size overflows".into()))?;
    let actual = (bytes.len() - HEADER_LEN) as u64;
    if actual != expected {
        return Err(corrupt(format!(
            "payload is {actual} bytes, header implies {expected}"
        )));
    }
    let values: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(corrupt(format!("non-finite value at payload index {pos}")));
    }
    let n = header.n as usize;
    let d = header.d as usize;
    let meta = read_sidecar(path, n)?;
    match header.mode {
        Mode::Diffs => Ok(StoredDataset::Diffs(EmbeddingDiffDataset::from_flat(
            d, values, meta,
        )?)),
        Mode::Pairs => {
            let pairs = values
                .chunks_exact(2 * d)
                .map(|rec| PairRecord::new(rec[..d].to_vec(), rec[d..].to_vec()))
                .collect();
            Ok(StoredDataset::Pairs(PairDataset::new(d, pairs, meta)?))
        }
    }
}

/// Reads a file of either mode and returns diffs.
pub fn read_diffs(path: impl AsRef<Path>) -> Result<EmbeddingDiffDataset> {
    read_dataset(path)?.into_diffs()
}
