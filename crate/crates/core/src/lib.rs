//! Region-based VLAD place recognition.
//!
//! The pipeline runs on convolutional activation volumes produced by an
//! external network:
//!
//! 1. [`regions::extract_regions`] finds connected regions of similar
//!    activation on every feature map and ranks them by mean energy.
//! 2. [`regions::aggregate_regions`] sums the per-location descriptors under
//!    the bounding box of each selected region.
//! 3. [`codebook::train_codebook`] learns a regional vocabulary with k-means,
//!    and [`codebook::quantize`] assigns regional features to it.
//! 4. [`vlad::encode_vlad`] accumulates residuals per visual word and
//!    normalizes them.
//! 5. [`matcher`] scores descriptors by summed per-word cosine similarity and
//!    [`evaluator`] turns the matches into precision-recall curves.

pub mod codebook;
pub mod error;
pub mod evaluator;
pub mod matcher;
pub mod pipeline;
pub mod regions;
pub mod synthetic;
pub mod tensor_io;
pub mod vlad;

pub use codebook::{quantize, train_codebook, Codebook, InitMethod, KMeansConfig, Labels};
pub use error::{Error, Result};
pub use evaluator::{pr_curve, recall_at_1, run_timing, PrCurve, TimingReport};
pub use matcher::{
    match_pair, retrieve, suggest_threshold, threshold_partition, MatchResult, Outcome,
    ThresholdReport, VladStore,
};
pub use regions::{
    aggregate_regions, extract_regions, AggregationMode, Neighbourhood, Region, RegionConfig,
    RegionSet, RegionalFeatures,
};
pub use tensor_io::{load_manifest, load_tensor, save_tensor, DatasetManifest, FeatureTensor};
pub use vlad::{encode_vlad, VladConfig, VladDescriptor};
