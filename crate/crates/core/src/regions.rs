//! Salient region proposals on convolutional feature maps.
//!
//! Every channel is labelled independently: two neighbouring cells belong to
//! the same region when both exceed the activation floor and their values
//! differ by at most `similarity_tau` times the channel's dynamic range.
//! Regions are ranked by mean activation and the top `N` are turned into
//! `K`-dimensional regional features by summing the local descriptors under
//! their bounding boxes.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::FeatureTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Neighbourhood {
    #[serde(rename = "4")]
    Four,
    #[serde(rename = "8")]
    Eight,
}

impl Neighbourhood {
    /// Offsets to the already-scanned half of the neighbourhood.
    fn backward_offsets(self) -> &'static [(isize, isize)] {
        match self {
            Neighbourhood::Four => &[(0, -1), (-1, 0)],
            Neighbourhood::Eight => &[(0, -1), (-1, -1), (-1, 0), (-1, 1)],
        }
    }
}

/// Which cells contribute to a regional feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationMode {
    /// Every location inside the region's bounding box.
    #[default]
    BoundingBox,
    /// Only the region's own pixels.
    Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegionConfig {
    pub top_n: usize,
    pub neighbourhood: Neighbourhood,
    pub similarity_tau: f64,
    pub activation_floor: f32,
    pub aggregation: AggregationMode,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self {
            top_n: 400,
            neighbourhood: Neighbourhood::Eight,
            similarity_tau: 0.05,
            activation_floor: 0.0,
            aggregation: AggregationMode::BoundingBox,
        }
    }
}

impl RegionConfig {
    pub fn with_top_n(top_n: usize) -> Self {
        Self {
            top_n,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_n == 0 {
            return Err(Error::Config("top_n must be at least 1".into()));
        }
        if !(self.similarity_tau > 0.0 && self.similarity_tau <= 1.0) {
            return Err(Error::Config(format!(
                "similarity_tau must lie in (0, 1], got {}",
                self.similarity_tau
            )));
        }
        if !self.activation_floor.is_finite() {
            return Err(Error::Config("activation_floor must be finite".into()));
        }
        Ok(())
    }
}

/// Inclusive axis-aligned hull of a region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub row_min: usize,
    pub row_max: usize,
    pub col_min: usize,
    pub col_max: usize,
}

impl BoundingBox {
    fn point(row: usize, col: usize) -> Self {
        Self {
            row_min: row,
            row_max: row,
            col_min: col,
            col_max: col,
        }
    }

    fn include(&mut self, row: usize, col: usize) {
        self.row_min = self.row_min.min(row);
        self.row_max = self.row_max.max(row);
        self.col_min = self.col_min.min(col);
        self.col_max = self.col_max.max(col);
    }

    pub fn area(&self) -> usize {
        (self.row_max - self.row_min + 1) * (self.col_max - self.col_min + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub channel: usize,
    /// `(row, col)` in raster order.
    pub pixels: Vec<(usize, usize)>,
    pub bbox: BoundingBox,
    pub mean_energy: f64,
    /// Position in the per-image scan (channel-major, then raster order of
    /// each region's first pixel).
    pub discovery_rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionSet {
    pub image_id: String,
    /// `(K, Y, X)` of the source tensor.
    pub shape: (usize, usize, usize),
    pub regions: Vec<Region>,
    /// Indices into `regions`, highest mean energy first.
    pub selected: Vec<usize>,
    pub aggregation: AggregationMode,
}

impl RegionSet {
    pub fn selected_regions(&self) -> impl Iterator<Item = &Region> {
        self.selected.iter().map(|&i| &self.regions[i])
    }

    /// Region summary for overlay tooling.
    pub fn debug_json(&self) -> serde_json::Value {
        let describe = |r: &Region| {
            serde_json::json!({
                "channel": r.channel,
                "bbox": [r.bbox.row_min, r.bbox.row_max, r.bbox.col_min, r.bbox.col_max],
                "mean_energy": r.mean_energy,
                "pixel_count": r.pixels.len(),
            })
        };
        serde_json::json!({
            "image_id": self.image_id,
            "shape": [self.shape.0, self.shape.1, self.shape.2],
            "region_count": self.regions.len(),
            "selected": self.selected_regions().map(describe).collect::<Vec<_>>(),
            "regions": self.regions.iter().map(describe).collect::<Vec<_>>(),
        })
    }
}

/// `rows x K` regional descriptors of one image, row `t` for the `t`-th
/// selected region.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionalFeatures {
    pub image_id: String,
    dim: usize,
    data: Vec<f64>,
}

impl RegionalFeatures {
    pub fn new(image_id: impl Into<String>, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Input("feature dimension must be positive".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::Input(format!(
                "{} values do not form rows of length {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("regional features must be finite".into()));
        }
        Ok(Self {
            image_id: image_id.into(),
            dim,
            data,
        })
    }

    pub fn from_rows(image_id: impl Into<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Input("ragged feature rows".into()));
        }
        Self::new(image_id, dim, rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n as u32).collect(),
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let grand = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = grand;
            x = grand;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // keep the earlier cell as root so labels follow raster order
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Labels one feature map. Returns regions in raster order of their first
/// pixel with `discovery_rank` counted from `first_rank`.
fn label_channel(
    plane: &[f32],
    height: usize,
    width: usize,
    channel: usize,
    cfg: &RegionConfig,
    first_rank: usize,
) -> Vec<Region> {
    let floor = cfg.activation_floor;
    let active = |v: f32| v > floor;

    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in plane.iter().filter(|v| active(**v)) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        return Vec::new();
    }
    let tolerance = cfg.similarity_tau * (f64::from(hi) - f64::from(lo));

    let mut sets = DisjointSet::new(plane.len());
    // a flat channel has no contrast to split on: all its active cells form
    // a single region, connected or not
    let flat = lo == hi;
    let mut first_active = None;
    for row in 0..height {
        for col in 0..width {
            let here = row * width + col;
            let value = plane[here];
            if !active(value) {
                continue;
            }
            if flat {
                let anchor = *first_active.get_or_insert(here);
                sets.union(anchor as u32, here as u32);
                continue;
            }
            for &(dr, dc) in cfg.neighbourhood.backward_offsets() {
                let (r, c) = (row as isize + dr, col as isize + dc);
                if r < 0 || c < 0 || c >= width as isize {
                    continue;
                }
                let there = r as usize * width + c as usize;
                let other = plane[there];
                if active(other) && (f64::from(value) - f64::from(other)).abs() <= tolerance {
                    sets.union(here as u32, there as u32);
                }
            }
        }
    }

    let mut slot_of_root = vec![u32::MAX; plane.len()];
    let mut regions: Vec<Region> = Vec::new();
    let mut sums: Vec<f64> = Vec::new();
    for row in 0..height {
        for col in 0..width {
            let here = row * width + col;
            if !active(plane[here]) {
                continue;
            }
            let root = sets.find(here as u32) as usize;
            let slot = match slot_of_root[root] {
                u32::MAX => {
                    slot_of_root[root] = regions.len() as u32;
                    regions.push(Region {
                        channel,
                        pixels: Vec::new(),
                        bbox: BoundingBox::point(row, col),
                        mean_energy: 0.0,
                        discovery_rank: first_rank + regions.len(),
                    });
                    sums.push(0.0);
                    regions.len() - 1
                }
                s => s as usize,
            };
            let region = &mut regions[slot];
            region.pixels.push((row, col));
            region.bbox.include(row, col);
            sums[slot] += f64::from(plane[here]);
        }
    }
    for (region, sum) in regions.iter_mut().zip(sums) {
        region.mean_energy = sum / region.pixels.len() as f64;
    }
    regions
}

/// Energy ranking: higher mean first, then larger region, lower channel,
/// earlier discovery.
fn rank_order(a: &Region, b: &Region) -> Ordering {
    b.mean_energy
        .partial_cmp(&a.mean_energy)
        .unwrap_or(Ordering::Equal)
        .then_with(|| b.pixels.len().cmp(&a.pixels.len()))
        .then_with(|| a.channel.cmp(&b.channel))
        .then_with(|| a.discovery_rank.cmp(&b.discovery_rank))
}

/// Identifies all regions of every channel and selects the `top_n` most
/// energetic ones.
pub fn extract_regions(tensor: &FeatureTensor, cfg: &RegionConfig) -> Result<RegionSet> {
    cfg.validate()?;
    let (channels, height, width) = tensor.shape();

    let mut regions = Vec::new();
    for k in 0..channels {
        let found = label_channel(tensor.channel(k), height, width, k, cfg, regions.len());
        regions.extend(found);
    }

    let mut order: Vec<usize> = (0..regions.len()).collect();
    let keep = cfg.top_n.min(regions.len());
    if keep < order.len() {
        order.select_nth_unstable_by(keep, |&a, &b| rank_order(&regions[a], &regions[b]));
        order.truncate(keep);
    }
    order.sort_unstable_by(|&a, &b| rank_order(&regions[a], &regions[b]));

    Ok(RegionSet {
        image_id: tensor.image_id().to_string(),
        shape: tensor.shape(),
        regions,
        selected: order,
        aggregation: cfg.aggregation,
    })
}

/// Sums the `K`-dimensional local descriptors covered by each selected
/// region, across all channels regardless of the channel the region was
/// found on.
pub fn aggregate_regions(tensor: &FeatureTensor, set: &RegionSet) -> Result<RegionalFeatures> {
    if set.image_id != tensor.image_id() {
        return Err(Error::Input(format!(
            "region set belongs to '{}', tensor is '{}'",
            set.image_id,
            tensor.image_id()
        )));
    }
    if set.shape != tensor.shape() {
        return Err(Error::Input(format!(
            "region set shape {:?} does not match tensor shape {:?}",
            set.shape,
            tensor.shape()
        )));
    }
    let (channels, _, width) = tensor.shape();
    let mut data = vec![0.0f64; set.selected.len() * channels];
    for (row_out, region) in data.chunks_exact_mut(channels).zip(set.selected_regions()) {
        for (k, acc) in row_out.iter_mut().enumerate() {
            let plane = tensor.channel(k);
            match set.aggregation {
                AggregationMode::BoundingBox => {
                    let b = region.bbox;
                    for r in b.row_min..=b.row_max {
                        let line = &plane[r * width + b.col_min..=r * width + b.col_max];
                        *acc += line.iter().map(|&v| f64::from(v)).sum::<f64>();
                    }
                }
                AggregationMode::Mask => {
                    *acc += region
                        .pixels
                        .iter()
                        .map(|&(r, c)| f64::from(plane[r * width + c]))
                        .sum::<f64>();
                }
            }
        }
    }
    RegionalFeatures::new(tensor.image_id(), channels, data)
}
