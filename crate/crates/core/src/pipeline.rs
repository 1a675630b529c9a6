//! End-to-end glue: tensors to regional features, vocabularies and VLADs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::{quantize, train_codebook, Codebook, KMeansConfig};
use crate::error::Result;
use crate::regions::{aggregate_regions, extract_regions, RegionConfig, RegionalFeatures};
use crate::tensor_io::{load_tensor, DatasetManifest, FeatureTensor, Traverse};
use crate::vlad::{encode_vlad, VladConfig, VladDescriptor};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub regions: RegionConfig,
    pub kmeans: KMeansConfig,
    pub vlad: VladConfig,
}

impl PipelineConfig {
    /// `N` regions per image against a `V`-word vocabulary.
    pub fn with_sizes(top_n: usize, clusters: usize) -> Self {
        Self {
            regions: RegionConfig::with_top_n(top_n),
            kmeans: KMeansConfig::with_clusters(clusters),
            vlad: VladConfig::default(),
        }
    }

    /// N=200, V=128.
    pub fn compact() -> Self {
        Self::with_sizes(200, 128)
    }

    /// N=400, V=256 (the default).
    pub fn full() -> Self {
        Self::with_sizes(400, 256)
    }

    pub fn validate(&self) -> Result<()> {
        self.regions.validate()?;
        self.kmeans.validate()?;
        self.vlad.validate()
    }
}

pub fn regional_features(tensor: &FeatureTensor, cfg: &RegionConfig) -> Result<RegionalFeatures> {
    let set = extract_regions(tensor, cfg)?;
    aggregate_regions(tensor, &set)
}

pub fn encode_features(
    features: &RegionalFeatures,
    codebook: &Codebook,
    cfg: &VladConfig,
) -> Result<VladDescriptor> {
    let labels = quantize(features, codebook)?;
    encode_vlad(features, &labels, codebook, cfg)
}

pub fn encode_image(tensor: &FeatureTensor, codebook: &Codebook, cfg: &PipelineConfig) -> Result<VladDescriptor> {
    encode_features(&regional_features(tensor, &cfg.regions)?, codebook, &cfg.vlad)
}

/// Regional features for many images, in input order.
pub fn regional_features_all(tensors: &[FeatureTensor], cfg: &RegionConfig) -> Result<Vec<RegionalFeatures>> {
    tensors.par_iter().map(|t| regional_features(t, cfg)).collect()
}

pub fn encode_all(
    tensors: &[FeatureTensor],
    codebook: &Codebook,
    cfg: &PipelineConfig,
) -> Result<Vec<VladDescriptor>> {
    tensors.par_iter().map(|t| encode_image(t, codebook, cfg)).collect()
}

pub fn build_vocabulary(tensors: &[FeatureTensor], cfg: &PipelineConfig) -> Result<Codebook> {
    let features = regional_features_all(tensors, &cfg.regions)?;
    train_codebook(&features, &cfg.kmeans)
}

/// Loads one traverse's tensors, naming each after its manifest entry.
pub fn load_traverse(manifest: &DatasetManifest, which: Traverse) -> Result<Vec<FeatureTensor>> {
    manifest
        .traverse(which)
        .par_iter()
        .map(|e| Ok(load_tensor(&e.tensor_path)?.with_image_id(e.image_id.clone())))
        .collect()
}

/// Loads every tensor of the manifest, queries first.
pub fn load_all(manifest: &DatasetManifest) -> Result<Vec<FeatureTensor>> {
    let mut all = load_traverse(manifest, Traverse::Query)?;
    all.extend(load_traverse(manifest, Traverse::Reference)?);
    Ok(all)
}
