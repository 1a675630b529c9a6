//! VLAD aggregation of regional features.
//!
//! Residuals to the assigned visual word are summed per word, passed through
//! a signed power law and L2-normalized word by word. Words that received no
//! regions keep an all-zero row.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codebook::{Codebook, Labels};
use crate::error::{Error, Result};
use crate::regions::RegionalFeatures;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VladConfig {
    /// Power-law exponent applied elementwise before normalization.
    pub gamma: f64,
}

impl Default for VladConfig {
    fn default() -> Self {
        Self { gamma: 0.5 }
    }
}

impl VladConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        Ok(())
    }
}

/// `V x K` matrix whose rows are unit vectors or exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct VladDescriptor {
    pub image_id: String,
    clusters: usize,
    dim: usize,
    data: Vec<f64>,
    pub gamma: f64,
}

impl VladDescriptor {
    /// Wraps an existing matrix, e.g. one read from a store. Rows are not
    /// renormalized.
    pub fn from_matrix(
        image_id: impl Into<String>,
        clusters: usize,
        dim: usize,
        data: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        if clusters == 0 || dim == 0 || data.len() != clusters * dim {
            return Err(Error::Input(format!(
                "{} values do not form a {clusters}x{dim} descriptor",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("descriptor values must be finite".into()));
        }
        Ok(Self {
            image_id: image_id.into(),
            clusters,
            dim,
            data,
            gamma,
        })
    }

    pub fn clusters(&self) -> usize {
        self.clusters
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, u: usize) -> &[f64] {
        &self.data[u * self.dim..(u + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn nonzero_rows(&self) -> usize {
        self.rows().filter(|r| r.iter().any(|&v| v != 0.0)).count()
    }
}

/// Encodes one image's regional features against `codebook`.
pub fn encode_vlad(
    features: &RegionalFeatures,
    labels: &Labels,
    codebook: &Codebook,
    cfg: &VladConfig,
) -> Result<VladDescriptor> {
    cfg.validate()?;
    if labels.len() != features.rows() {
        return Err(Error::Input(format!(
            "{} labels for {} regional features",
            labels.len(),
            features.rows()
        )));
    }
    if features.dim() != codebook.dim() {
        return Err(Error::Input(format!(
            "features have {} columns, codebook expects {}",
            features.dim(),
            codebook.dim()
        )));
    }
    let (clusters, dim) = (codebook.clusters(), codebook.dim());
    if let Some(&bad) = labels.iter().find(|&&l| l >= clusters) {
        return Err(Error::Input(format!("label {bad} out of range for {clusters} clusters")));
    }

    let mut data = vec![0.0f64; clusters * dim];
    for (row, &u) in features.iter_rows().zip(labels.iter()) {
        let centre = codebook.centroid_f64(u);
        for ((acc, f), c) in data[u * dim..(u + 1) * dim].iter_mut().zip(row).zip(centre) {
            *acc += f - c;
        }
    }

    for v in data.chunks_exact_mut(dim) {
        for x in v.iter_mut() {
            *x = x.signum() * x.abs().powf(cfg.gamma);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in v.iter_mut() {
                *x /= norm;
            }
        } else {
            // collapse -0.0 so empty words are bitwise zero
            v.fill(0.0);
        }
    }

    VladDescriptor::from_matrix(features.image_id.clone(), clusters, dim, data, cfg.gamma)
}

const STORE_MAGIC: &[u8; 5] = b"RVLD1";

/// Writes descriptors as `RVLD1 | count | V | K` followed by one
/// `id_len | id | V*K f32` record per image, all little-endian.
pub fn write_store<'a, I>(path: impl AsRef<Path>, clusters: usize, dim: usize, descriptors: I) -> Result<()>
where
    I: IntoIterator<Item = &'a VladDescriptor>,
    I::IntoIter: ExactSizeIterator,
{
    let path = path.as_ref();
    let iter = descriptors.into_iter();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    out.write_all(STORE_MAGIC).map_err(io)?;
    out.write_all(&(iter.len() as u32).to_le_bytes()).map_err(io)?;
    out.write_all(&(clusters as u32).to_le_bytes()).map_err(io)?;
    out.write_all(&(dim as u32).to_le_bytes()).map_err(io)?;
    for d in iter {
        if d.clusters != clusters || d.dim != dim {
            return Err(Error::Input(format!(
                "descriptor '{}' is {}x{}, store is {clusters}x{dim}",
                d.image_id, d.clusters, d.dim
            )));
        }
        let id = d.image_id.as_bytes();
        out.write_all(&(id.len() as u32).to_le_bytes()).map_err(io)?;
        out.write_all(id).map_err(io)?;
        for &v in &d.data {
            out.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

/// Sequential reader over a descriptor store.
pub struct StoreReader<R> {
    input: R,
    remaining: usize,
    clusters: usize,
    dim: usize,
    buf: Vec<u8>,
}

impl StoreReader<BufReader<fs::File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::new(BufReader::new(file))
    }
}

impl<R: Read> StoreReader<R> {
    pub fn new(mut input: R) -> Result<Self> {
        let mut header = [0u8; 17];
        input
            .read_exact(&mut header)
            .map_err(|_| Error::Format("truncated descriptor store header".into()))?;
        if &header[..5] != STORE_MAGIC {
            return Err(Error::Format("not a descriptor store".into()));
        }
        let u32_at = |at: usize| u32::from_le_bytes(header[at..at + 4].try_into().unwrap()) as usize;
        let (remaining, clusters, dim) = (u32_at(5), u32_at(9), u32_at(13));
        if clusters == 0 || dim == 0 {
            return Err(Error::Format("descriptor store has an empty shape".into()));
        }
        Ok(Self {
            input,
            remaining,
            clusters,
            dim,
            buf: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.remaining
    }

    pub fn is_empty(&self) -> bool {
        self.remaining == 0
    }

    pub fn clusters(&self) -> usize {
        self.clusters
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn read_record(&mut self) -> Result<VladDescriptor> {
        let truncated = |_| Error::Format("truncated descriptor record".into());
        let mut len = [0u8; 4];
        self.input.read_exact(&mut len).map_err(truncated)?;
        let mut id = vec![0u8; u32::from_le_bytes(len) as usize];
        self.input.read_exact(&mut id).map_err(truncated)?;
        let id = String::from_utf8(id).map_err(|_| Error::Format("descriptor id is not UTF-8".into()))?;
        self.buf.resize(self.clusters * self.dim * 4, 0);
        self.input.read_exact(&mut self.buf).map_err(truncated)?;
        let data = self
            .buf
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        VladDescriptor::from_matrix(id, self.clusters, self.dim, data, f64::NAN)
            .map_err(|e| Error::Format(e.to_string()))
    }
}

impl<R: Read> Iterator for StoreReader<R> {
    type Item = Result<VladDescriptor>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let record = self.read_record();
        if record.is_err() {
            self.remaining = 0;
        }
        Some(record)
    }
}
