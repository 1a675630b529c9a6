//! Precision-recall evaluation and the per-stage timing harness.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::codebook::{quantize, Codebook};
use crate::error::{Error, Result};
use crate::matcher::{match_pair, MatchResult};
use crate::pipeline::PipelineConfig;
use crate::regions::{aggregate_regions, extract_regions};
use crate::tensor_io::{DatasetManifest, FeatureTensor};
use crate::vlad::encode_vlad;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// Ordered by descending threshold.
    pub points: Vec<PrPoint>,
    pub auc: f64,
    pub n_queries: usize,
    /// Queries left out for lacking ground truth.
    pub excluded: Vec<String>,
}

impl PrCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,precision,recall\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{}", p.threshold, p.precision, p.recall);
        }
        out
    }

    /// Whitespace-separated `recall precision threshold` columns for gnuplot.
    pub fn to_dat(&self) -> String {
        let mut out = String::from("# recall precision threshold\n");
        for p in &self.points {
            let _ = writeln!(out, "{} {} {}", p.recall, p.precision, p.threshold);
        }
        out
    }
}

/// `(best_score, correct)` for every ground-truthed query, plus the ids of
/// queries without ground truth.
fn scored_queries(results: &[MatchResult], manifest: &DatasetManifest) -> Result<(Vec<(f64, bool)>, Vec<String>)> {
    let by_id: HashMap<&str, &MatchResult> =
        results.iter().map(|r| (r.query_id.as_str(), r)).collect();
    let mut scored = Vec::new();
    let mut excluded = Vec::new();
    for (q, entry) in manifest.queries().iter().enumerate() {
        if !manifest.has_ground_truth(q) {
            excluded.push(entry.image_id.clone());
            continue;
        }
        let r = by_id.get(entry.image_id.as_str()).ok_or_else(|| {
            Error::Input(format!("no match result for query '{}'", entry.image_id))
        })?;
        scored.push((r.best_score, manifest.is_correct(q, r.best_index)));
    }
    if scored.is_empty() {
        return Err(Error::Input("no ground-truthed queries to evaluate".into()));
    }
    Ok((scored, excluded))
}

/// Sweeps the acceptance threshold over the distinct best-match scores.
///
/// At threshold `θ` a query is accepted when its best score is at least `θ`;
/// accepted correct matches are true positives, accepted wrong matches false
/// positives and every rejected query a false negative.
pub fn pr_curve(results: &[MatchResult], manifest: &DatasetManifest) -> Result<PrCurve> {
    let (mut scored, excluded) = scored_queries(results, manifest)?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n = scored.len();

    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < n {
        let threshold = scored[i].0;
        while i < n && scored[i].0 == threshold {
            if scored[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let fn_ = n - tp - fp;
        let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        points.push(PrPoint {
            threshold,
            precision,
            recall,
        });
    }

    let auc = trapezoid_auc(&points);
    Ok(PrCurve {
        points,
        auc,
        n_queries: n,
        excluded,
    })
}

/// Trapezoidal area under precision over recall, starting from a recall-0
/// anchor at the first point's precision.
pub fn trapezoid_auc(points: &[PrPoint]) -> f64 {
    let Some(first) = points.first() else {
        return 0.0;
    };
    let mut area = 0.0;
    let (mut r0, mut p0) = (0.0, first.precision);
    for p in points {
        area += (p.recall - r0) * (p.precision + p0) / 2.0;
        r0 = p.recall;
        p0 = p.precision;
    }
    area
}

/// Fraction of ground-truthed queries whose best match is admissible.
pub fn recall_at_1(results: &[MatchResult], manifest: &DatasetManifest) -> Result<f64> {
    let (scored, _) = scored_queries(results, manifest)?;
    Ok(scored.iter().filter(|s| s.1).count() as f64 / scored.len() as f64)
}

/// JSON summary of an evaluation.
pub fn summary_json(curve: &PrCurve, recall1: f64) -> serde_json::Value {
    serde_json::json!({
        "auc": curve.auc,
        "recall_at_1": recall1,
        "n_queries": curve.n_queries,
        "n_excluded": curve.excluded.len(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    fn of(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationTiming {
    pub extraction_s: f64,
    pub encoding_ms: f64,
    pub matching_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub top_n: usize,
    pub clusters: usize,
    pub iterations: usize,
    pub images: usize,
    pub pairs: usize,
    pub workers: usize,
    /// Region extraction and aggregation, seconds per image.
    pub extraction_s: Stat,
    /// Quantization and VLAD encoding, milliseconds per image.
    pub encoding_ms: Stat,
    /// Descriptor comparison, milliseconds per pair.
    pub matching_ms: Stat,
    pub extraction_samples: usize,
    pub encoding_samples: usize,
    /// Per-iteration means of each stage.
    pub per_iteration: Vec<IterationTiming>,
}

impl TimingReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "N={} V={} images={} pairs={} iterations={} workers={}",
            self.top_n, self.clusters, self.images, self.pairs, self.iterations, self.workers
        );
        let _ = writeln!(out, "{:<28} {:>14} {:>14}", "stage", "mean", "std");
        let rows = [
            ("Extraction time (s)", self.extraction_s),
            ("VLAD encoding (ms)", self.encoding_ms),
            ("VLAD matching (ms)", self.matching_ms),
        ];
        for (label, s) in rows {
            let _ = writeln!(out, "{label:<28} {:>14.6} {:>14.6}", s.mean, s.std);
        }
        out
    }
}

/// Times each pipeline stage single-threaded over in-memory tensors.
///
/// Every iteration extracts regional features for all images, encodes them
/// against `codebook`, then compares every image against every other up to
/// `max_pairs` comparisons.
pub fn run_timing(
    cfg: &PipelineConfig,
    tensors: &[FeatureTensor],
    codebook: &Codebook,
    iterations: usize,
    max_pairs: usize,
) -> Result<TimingReport> {
    cfg.validate()?;
    if iterations == 0 {
        return Err(Error::Config("timing needs at least one iteration".into()));
    }
    if tensors.is_empty() {
        return Err(Error::Input("timing needs at least one image".into()));
    }

    let mut extraction = Vec::new();
    let mut encoding = Vec::new();
    let mut matching = Vec::new();
    let mut per_iteration = Vec::new();
    let mut pairs = 0;

    for _ in 0..iterations {
        let mut features = Vec::with_capacity(tensors.len());
        let mut it_extraction = Vec::with_capacity(tensors.len());
        for t in tensors {
            let start = Instant::now();
            let set = extract_regions(t, &cfg.regions)?;
            let f = aggregate_regions(t, &set)?;
            it_extraction.push(start.elapsed().as_secs_f64());
            features.push(f);
        }

        let mut descriptors = Vec::with_capacity(features.len());
        let mut it_encoding = Vec::with_capacity(features.len());
        for f in &features {
            let start = Instant::now();
            let labels = quantize(f, codebook)?;
            let d = encode_vlad(f, &labels, codebook, &cfg.vlad)?;
            it_encoding.push(start.elapsed().as_secs_f64() * 1e3);
            descriptors.push(d);
        }

        let mut checksum = 0.0;
        let mut it_pairs = 0;
        let start = Instant::now();
        'scan: for a in &descriptors {
            for b in &descriptors {
                if it_pairs == max_pairs.max(1) {
                    break 'scan;
                }
                checksum += match_pair(a, b)?;
                it_pairs += 1;
            }
        }
        let per_pair_ms = start.elapsed().as_secs_f64() * 1e3 / it_pairs as f64;
        std::hint::black_box(checksum);
        pairs = it_pairs;

        per_iteration.push(IterationTiming {
            extraction_s: Stat::of(&it_extraction).mean,
            encoding_ms: Stat::of(&it_encoding).mean,
            matching_ms: per_pair_ms,
        });
        extraction.extend(it_extraction);
        encoding.extend(it_encoding);
        matching.push(per_pair_ms);
    }

    Ok(TimingReport {
        top_n: cfg.regions.top_n,
        clusters: codebook.clusters(),
        iterations,
        images: tensors.len(),
        pairs,
        workers: 1,
        extraction_s: Stat::of(&extraction),
        encoding_ms: Stat::of(&encoding),
        matching_ms: Stat::of(&matching),
        extraction_samples: extraction.len(),
        encoding_samples: encoding.len(),
        per_iteration,
    })
}
