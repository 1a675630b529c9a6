//! Exhaustive VLAD matching and score thresholding.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::DatasetManifest;
use crate::vlad::{self, StoreReader, VladDescriptor};

/// Cosine similarity of two descriptor rows; zero when either row is zero.
#[inline]
pub fn row_cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    // sqrt(aa * bb) rather than sqrt(aa) * sqrt(bb): a row against itself is exactly 1
    (dot / (aa * bb).sqrt()).clamp(-1.0, 1.0)
}

/// Sum over visual words of the per-word cosine similarity.
pub fn match_pair(a: &VladDescriptor, b: &VladDescriptor) -> Result<f64> {
    if a.clusters() != b.clusters() || a.dim() != b.dim() {
        return Err(Error::Input(format!(
            "cannot match a {}x{} descriptor against a {}x{} one",
            a.clusters(),
            a.dim(),
            b.clusters(),
            b.dim()
        )));
    }
    Ok(a.rows().zip(b.rows()).map(|(x, y)| row_cosine(x, y)).sum())
}

/// Reference descriptors held in memory for scanning.
#[derive(Debug, Clone, PartialEq)]
pub struct VladStore {
    clusters: usize,
    dim: usize,
    descriptors: Vec<VladDescriptor>,
}

impl VladStore {
    pub fn new(clusters: usize, dim: usize) -> Self {
        Self {
            clusters,
            dim,
            descriptors: Vec::new(),
        }
    }

    pub fn from_descriptors(descriptors: Vec<VladDescriptor>) -> Result<Self> {
        let first = descriptors
            .first()
            .ok_or_else(|| Error::Input("cannot infer store shape from no descriptors".into()))?;
        let mut store = Self::new(first.clusters(), first.dim());
        for d in descriptors {
            store.push(d)?;
        }
        Ok(store)
    }

    pub fn push(&mut self, descriptor: VladDescriptor) -> Result<()> {
        if descriptor.clusters() != self.clusters || descriptor.dim() != self.dim {
            return Err(Error::Input(format!(
                "descriptor '{}' is {}x{}, store is {}x{}",
                descriptor.image_id,
                descriptor.clusters(),
                descriptor.dim(),
                self.clusters,
                self.dim
            )));
        }
        self.descriptors.push(descriptor);
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let reader = StoreReader::open(path)?;
        let mut store = Self::new(reader.clusters(), reader.dim());
        for d in reader {
            store.push(d?)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        vlad::write_store(path, self.clusters, self.dim, self.descriptors.iter())
    }

    pub fn clusters(&self) -> usize {
        self.clusters
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&VladDescriptor> {
        self.descriptors.get(index)
    }

    pub fn descriptors(&self) -> &[VladDescriptor] {
        &self.descriptors
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ScanTiming {
    pub total_ms: f64,
    pub per_pair_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub query_id: String,
    /// `(reference_index, score)` for every scored reference.
    pub scores: Vec<(usize, f64)>,
    pub best_index: usize,
    pub best_id: String,
    pub best_score: f64,
    pub timing: ScanTiming,
}

impl MatchResult {
    /// References ordered by descending score, ties by index.
    pub fn ranking(&self) -> Vec<(usize, f64)> {
        let mut ranked = self.scores.clone();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked
    }
}

/// Scores `query` against every reference and picks the best (lowest index
/// on ties).
pub fn retrieve(query: &VladDescriptor, refs: &VladStore) -> Result<MatchResult> {
    if refs.is_empty() {
        return Err(Error::Input("reference store is empty".into()));
    }
    if query.clusters() != refs.clusters() || query.dim() != refs.dim() {
        return Err(Error::Input(format!(
            "query '{}' is {}x{}, store is {}x{}",
            query.image_id,
            query.clusters(),
            query.dim(),
            refs.clusters(),
            refs.dim()
        )));
    }
    let started = Instant::now();
    let scores: Vec<(usize, f64)> = refs
        .descriptors
        .par_iter()
        .enumerate()
        .map(|(i, r)| (i, query.rows().zip(r.rows()).map(|(x, y)| row_cosine(x, y)).sum()))
        .collect();
    let total_ms = started.elapsed().as_secs_f64() * 1e3;

    let (best_index, best_score) = scores
        .iter()
        .fold((0, f64::NEG_INFINITY), |best, &(i, s)| if s > best.1 { (i, s) } else { best });
    Ok(MatchResult {
        query_id: query.image_id.clone(),
        best_id: refs.descriptors[best_index].image_id.clone(),
        scores,
        best_index,
        best_score,
        timing: ScanTiming {
            total_ms,
            per_pair_ms: total_ms / refs.len() as f64,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    #[serde(rename = "TP")]
    TruePositive,
    #[serde(rename = "FN")]
    FalseNegative,
    #[serde(rename = "FP")]
    FalsePositive,
    #[serde(rename = "TN")]
    TrueNegative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub threshold: f64,
    /// `(query_id, outcome)` in manifest query order.
    pub outcomes: Vec<(String, Outcome)>,
    pub true_positives: usize,
    pub false_negatives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
}

impl ThresholdReport {
    pub fn total(&self) -> usize {
        self.true_positives + self.false_negatives + self.false_positives + self.true_negatives
    }
}

/// Classifies every manifest query by whether its best match is accepted at
/// `threshold` and whether it is correct.
pub fn threshold_partition(
    results: &[MatchResult],
    manifest: &DatasetManifest,
    threshold: f64,
) -> Result<ThresholdReport> {
    let by_id: HashMap<&str, &MatchResult> =
        results.iter().map(|r| (r.query_id.as_str(), r)).collect();
    let mut report = ThresholdReport {
        threshold,
        outcomes: Vec::with_capacity(manifest.queries().len()),
        true_positives: 0,
        false_negatives: 0,
        false_positives: 0,
        true_negatives: 0,
    };
    for (q, entry) in manifest.queries().iter().enumerate() {
        let result = by_id.get(entry.image_id.as_str()).ok_or_else(|| {
            Error::Input(format!("no match result for query '{}'", entry.image_id))
        })?;
        let accepted = result.best_score >= threshold;
        let outcome = match (manifest.has_ground_truth(q), accepted) {
            (true, true) if manifest.is_correct(q, result.best_index) => Outcome::TruePositive,
            (true, true) => Outcome::FalsePositive,
            (true, false) => Outcome::FalseNegative,
            (false, true) => Outcome::FalsePositive,
            (false, false) => Outcome::TrueNegative,
        };
        match outcome {
            Outcome::TruePositive => report.true_positives += 1,
            Outcome::FalseNegative => report.false_negatives += 1,
            Outcome::FalsePositive => report.false_positives += 1,
            Outcome::TrueNegative => report.true_negatives += 1,
        }
        report.outcomes.push((entry.image_id.clone(), outcome));
    }
    Ok(report)
}

/// Mean best score over queries known to have no true match.
pub fn suggest_threshold(known_negatives: &[MatchResult]) -> Result<f64> {
    if known_negatives.is_empty() {
        return Err(Error::Input("threshold suggestion needs at least one known negative".into()));
    }
    Ok(known_negatives.iter().map(|r| r.best_score).sum::<f64>() / known_negatives.len() as f64)
}

#[derive(Debug, Serialize, Deserialize)]
struct ResultRow {
    query_id: String,
    reference_id: String,
    rank: usize,
    score: f64,
}

/// Writes `query_id,reference_id,rank,score` rows; `top_k = None` keeps
/// every reference.
pub fn write_results_csv(
    path: impl AsRef<Path>,
    results: &[MatchResult],
    refs: &VladStore,
    top_k: Option<usize>,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in results {
        let ranked = r.ranking();
        let keep = top_k.unwrap_or(ranked.len()).min(ranked.len());
        for (rank, &(index, score)) in ranked[..keep].iter().enumerate() {
            let reference_id = refs
                .get(index)
                .ok_or_else(|| Error::Input(format!("reference index {index} outside the store")))?
                .image_id
                .clone();
            out.serialize(ResultRow {
                query_id: r.query_id.clone(),
                reference_id,
                rank: rank + 1,
                score,
            })
            .map_err(|e| csv_error(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a results CSV back into match results, resolving reference ids
/// through `reference_ids`. Queries keep first-appearance order.
pub fn read_results_csv(path: impl AsRef<Path>, reference_ids: &[String]) -> Result<Vec<MatchResult>> {
    let path = path.as_ref();
    let index_of: HashMap<&str, usize> = reference_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(usize, usize, f64)>> = HashMap::new();
    for row in reader.deserialize::<ResultRow>() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let index = *index_of.get(row.reference_id.as_str()).ok_or_else(|| {
            Error::Input(format!("unknown reference '{}' in {}", row.reference_id, path.display()))
        })?;
        if !rows.contains_key(&row.query_id) {
            order.push(row.query_id.clone());
        }
        rows.entry(row.query_id).or_default().push((row.rank, index, row.score));
    }
    order
        .into_iter()
        .map(|query_id| {
            let mut entries = rows.remove(&query_id).unwrap_or_default();
            entries.sort_by_key(|e| e.0);
            let &(_, best_index, best_score) = entries
                .first()
                .ok_or_else(|| Error::Input(format!("no rows for query '{query_id}'")))?;
            let mut scores: Vec<(usize, f64)> = entries.iter().map(|&(_, i, s)| (i, s)).collect();
            scores.sort_by_key(|s| s.0);
            Ok(MatchResult {
                query_id,
                best_id: reference_ids[best_index].clone(),
                scores,
                best_index,
                best_score,
                timing: ScanTiming::default(),
            })
        })
        .collect()
}

/// JSON summary of a matching run. Wall-clock timing is left out so that
/// repeated runs produce identical files.
pub fn results_summary(results: &[MatchResult], refs: &VladStore) -> serde_json::Value {
    serde_json::json!({
        "n_queries": results.len(),
        "n_references": refs.len(),
        "best_matches": results.iter().map(|r| serde_json::json!({
            "query_id": r.query_id,
            "reference_id": r.best_id,
            "reference_index": r.best_index,
            "score": r.best_score,
        })).collect::<Vec<_>>(),
    })
}

pub fn write_json(path: impl AsRef<Path>, value: &serde_json::Value) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Format(format!("{}: {e}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_io::{GroundTruth, ManifestEntry, Traverse};
    use std::path::PathBuf;

    fn desc(id: &str, clusters: usize, dim: usize, data: Vec<f64>) -> VladDescriptor {
        VladDescriptor::from_matrix(id, clusters, dim, data, 0.5).unwrap()
    }

    fn result(id: &str, best_index: usize, best_score: f64) -> MatchResult {
        MatchResult {
            query_id: id.into(),
            scores: vec![(best_index, best_score)],
            best_index,
            best_id: format!("r{best_index}"),
            best_score,
            timing: ScanTiming::default(),
        }
    }

    fn manifest(queries: usize, references: usize, pairs: Vec<(usize, usize)>) -> DatasetManifest {
        let entries = |n, t, p: &str| {
            (0..n)
                .map(|i| ManifestEntry {
                    image_id: format!("{p}{i}"),
                    tensor_path: PathBuf::new(),
                    frame: Some(i as i64),
                    traverse: t,
                })
                .collect()
        };
        DatasetManifest::new(
            "m",
            entries(queries, Traverse::Query, "q"),
            entries(references, Traverse::Reference, "r"),
            GroundTruth::Pairs(pairs),
        )
        .unwrap()
    }

    #[test]
    fn self_match_counts_nonzero_rows() {
        let s = 0.5f64.sqrt();
        let a = desc("a", 3, 2, vec![s, s, 0., 0., 0.6, -0.8]);
        assert_eq!(match_pair(&a, &a).unwrap(), 2.0);
    }

    #[test]
    fn zero_descriptor_scores_zero() {
        let z = desc("z", 2, 2, vec![0.; 4]);
        let a = desc("a", 2, 2, vec![1., 0., 0., 1.]);
        assert_eq!(match_pair(&z, &a).unwrap(), 0.0);
        assert_eq!(match_pair(&z, &z).unwrap(), 0.0);
    }

    #[test]
    fn per_word_cosines_sum() {
        let a = desc("a", 2, 2, vec![1., 0., 0., 1.]);
        let b = desc("b", 2, 2, vec![0., 1., 0., 1.]);
        assert_eq!(match_pair(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn scaled_rows_keep_their_cosine() {
        let a = desc("a", 1, 3, vec![0.2, -0.4, 0.1]);
        let b = desc("b", 1, 3, vec![0.6, 0.3, 0.9]);
        let b3 = desc("b3", 1, 3, vec![1.8, 0.9, 2.7]);
        let (x, y) = (match_pair(&a, &b).unwrap(), match_pair(&a, &b3).unwrap());
        assert!((x - y).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = desc("a", 2, 2, vec![1., 0., 0., 1.]);
        let b = desc("b", 1, 4, vec![1., 0., 0., 1.]);
        assert!(matches!(match_pair(&a, &b), Err(Error::Input(_))));
    }

    #[test]
    fn retrieve_prefers_self_and_breaks_ties_low() {
        let q = desc("q", 2, 2, vec![1., 0., 0., 1.]);
        let orth = desc("o", 2, 2, vec![0., 1., 1., 0.]);
        let store = VladStore::from_descriptors(vec![q.clone(), orth]).unwrap();
        let r = retrieve(&q, &store).unwrap();
        assert_eq!((r.best_index, r.best_score), (0, 2.0));
        assert_eq!(r.best_id, "q");

        let store = VladStore::from_descriptors(vec![q.clone(), q.clone(), desc("x", 2, 2, vec![0.; 4])]).unwrap();
        assert_eq!(retrieve(&q, &store).unwrap().best_index, 0);
    }

    #[test]
    fn retrieve_from_empty_store() {
        let q = desc("q", 1, 1, vec![1.]);
        assert!(matches!(retrieve(&q, &VladStore::new(1, 1)), Err(Error::Input(_))));
    }

    #[test]
    fn partition_rules() {
        // q0, q1 correct (3.0, 1.0); q2 has no ground truth (0.5)
        let m = manifest(3, 3, vec![(0, 0), (1, 1)]);
        let results = vec![result("q0", 0, 3.0), result("q1", 1, 1.0), result("q2", 2, 0.5)];
        let r = threshold_partition(&results, &m, 0.8).unwrap();
        assert_eq!((r.true_positives, r.true_negatives, r.false_positives, r.false_negatives), (2, 1, 0, 0));

        let low = threshold_partition(&results, &m, f64::NEG_INFINITY).unwrap();
        assert_eq!(low.false_negatives + low.true_negatives, 0);
        assert_eq!(low.true_positives + low.false_positives, 3);

        let high = threshold_partition(&results, &m, f64::INFINITY).unwrap();
        assert_eq!((high.false_negatives, high.true_negatives), (2, 1));
    }

    #[test]
    fn wrong_accepted_match_is_false_positive() {
        let m = manifest(1, 2, vec![(0, 0)]);
        let r = threshold_partition(&[result("q0", 1, 2.0)], &m, 1.0).unwrap();
        assert_eq!(r.outcomes, vec![("q0".to_string(), Outcome::FalsePositive)]);
    }

    #[test]
    fn partition_requires_every_query() {
        let m = manifest(2, 2, vec![(0, 0)]);
        assert!(matches!(
            threshold_partition(&[result("q0", 0, 1.0)], &m, 0.0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn threshold_suggestion_is_mean() {
        let rs = [result("a", 0, 0.2), result("b", 0, 0.4)];
        assert!((suggest_threshold(&rs).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(suggest_threshold(&[result("c", 0, 1.7)]).unwrap(), 1.7);
        assert!(suggest_threshold(&[]).is_err());
    }

    #[test]
    fn csv_roundtrip_keeps_best_matches() {
        let s = 0.5f64.sqrt();
        let refs = VladStore::from_descriptors(vec![
            desc("r0", 2, 2, vec![1., 0., 0., 1.]),
            desc("r1", 2, 2, vec![s, s, 0., 1.]),
            desc("r2", 2, 2, vec![0., 1., 1., 0.]),
        ])
        .unwrap();
        let queries = [desc("q0", 2, 2, vec![0., 1., 0., 1.]), desc("q1", 2, 2, vec![0., 1., 1., 0.])];
        let results: Vec<MatchResult> = queries.iter().map(|q| retrieve(q, &refs).unwrap()).collect();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_results_csv(&path, &results, &refs, None).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("query_id,reference_id,rank,score\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 3);

        let ids: Vec<String> = refs.descriptors().iter().map(|d| d.image_id.clone()).collect();
        let back = read_results_csv(&path, &ids).unwrap();
        for (a, b) in results.iter().zip(&back) {
            assert_eq!(a.query_id, b.query_id);
            assert_eq!(a.best_index, b.best_index);
            assert_eq!(a.best_score, b.best_score);
            assert_eq!(a.scores, b.scores);
        }

        write_results_csv(&path, &results, &refs, Some(1)).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 3);
    }
}
