//! Synthetic activation volumes for tests, demos and timing runs.
//!
//! A "place" is a sparse post-ReLU-like tensor: each channel holds a few
//! rectangular blobs at a constant positive level over a zero background.
//! Revisits of a place add Gaussian noise scaled to the place's value range.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor_io::{save_tensor, DatasetManifest, FeatureTensor, GroundTruth, ManifestEntry, Traverse};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub max_blobs: usize,
    pub max_blob_side: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            height: 13,
            width: 13,
            max_blobs: 3,
            max_blob_side: 4,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn conv3() -> Self {
        Self {
            channels: 384,
            ..Self::default()
        }
    }
}

pub fn place(id: impl Into<String>, cfg: &SyntheticConfig, rng: &mut impl Rng) -> FeatureTensor {
    let (h, w) = (cfg.height, cfg.width);
    let mut data = vec![0.0f32; cfg.channels * h * w];
    for plane in data.chunks_exact_mut(h * w) {
        for _ in 0..rng.random_range(1..=cfg.max_blobs.max(1)) {
            let bh = rng.random_range(1..=cfg.max_blob_side.min(h));
            let bw = rng.random_range(1..=cfg.max_blob_side.min(w));
            let r0 = rng.random_range(0..=h - bh);
            let c0 = rng.random_range(0..=w - bw);
            let level: f32 = rng.random_range(0.5..4.0);
            for r in r0..r0 + bh {
                for c in c0..c0 + bw {
                    plane[r * w + c] = plane[r * w + c].max(level);
                }
            }
        }
    }
    FeatureTensor::new(id, cfg.channels, h, w, data).expect("generated values are finite")
}

/// Adds `N(0, (sigma * range)^2)` noise, where `range` is the tensor's
/// max minus min.
pub fn perturb(tensor: &FeatureTensor, id: impl Into<String>, sigma: f64, rng: &mut impl Rng) -> FeatureTensor {
    let (lo, hi) = tensor
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let scale = sigma * f64::from(hi - lo);
    let data: Vec<f32> = if scale > 0.0 {
        let noise = Normal::new(0.0, scale).expect("positive scale");
        tensor
            .data()
            .iter()
            .map(|&v| (f64::from(v) + noise.sample(rng)) as f32)
            .collect()
    } else {
        tensor.data().to_vec()
    };
    let (k, y, x) = tensor.shape();
    FeatureTensor::new(id, k, y, x, data).expect("noisy values are finite")
}

/// Query and reference traverses of `places` revisited places.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub queries: Vec<FeatureTensor>,
    pub references: Vec<FeatureTensor>,
    /// `(query_index, reference_index)` of every true match.
    pub pairs: Vec<(usize, usize)>,
}

impl SyntheticDataset {
    /// Queries are clean places; references are noisy revisits of the first
    /// `places - unmatched` of them, so the last `unmatched` queries have no
    /// true counterpart.
    pub fn generate(places: usize, unmatched: usize, sigma: f64, cfg: &SyntheticConfig) -> Self {
        assert!(unmatched <= places);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let queries: Vec<FeatureTensor> = (0..places)
            .map(|i| place(format!("q{i:04}"), cfg, &mut rng))
            .collect();
        let matched = places - unmatched;
        let references = queries[..matched]
            .iter()
            .enumerate()
            .map(|(i, q)| perturb(q, format!("r{i:04}"), sigma, &mut rng))
            .collect();
        Self {
            queries,
            references,
            pairs: (0..matched).map(|i| (i, i)).collect(),
        }
    }

    /// Writes every tensor under `dir` and a `manifest.json` with explicit
    /// ground-truth pairs. Returns the manifest path.
    pub fn write(&self, dir: impl AsRef<Path>, name: &str) -> Result<std::path::PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write_all = |tensors: &[FeatureTensor], traverse| {
            tensors
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let path = dir.join(format!("{}.npy", t.image_id()));
                    save_tensor(t, &path)?;
                    Ok(ManifestEntry {
                        image_id: t.image_id().to_string(),
                        tensor_path: path,
                        frame: Some(i as i64),
                        traverse,
                    })
                })
                .collect::<Result<Vec<_>>>()
        };
        let manifest = DatasetManifest::new(
            name,
            write_all(&self.queries, Traverse::Query)?,
            write_all(&self.references, Traverse::Reference)?,
            GroundTruth::Pairs(self.pairs.clone()),
        )?;
        let path = dir.join("manifest.json");
        manifest.save(&path)?;
        Ok(path)
    }
}
