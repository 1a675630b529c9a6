use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Traverse {
    Query,
    Reference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image_id: String,
    /// Resolved against the manifest directory on load.
    pub tensor_path: PathBuf,
    pub frame: Option<i64>,
    pub traverse: Traverse,
}

/// How admissible (query, reference) pairs are declared.
#[derive(Debug, Clone, PartialEq)]
pub enum GroundTruth {
    /// A query matches every reference whose frame index is within the
    /// tolerance of its own.
    Tolerance(u64),
    /// Explicit `(query_index, reference_index)` pairs.
    Pairs(Vec<(usize, usize)>),
}

/// A query and reference traverse together with their ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    queries: Vec<ManifestEntry>,
    references: Vec<ManifestEntry>,
    ground_truth: GroundTruth,
    admissible: Vec<Vec<usize>>,
}

impl DatasetManifest {
    pub fn new(
        name: impl Into<String>,
        queries: Vec<ManifestEntry>,
        references: Vec<ManifestEntry>,
        ground_truth: GroundTruth,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in queries.iter().chain(&references) {
            if !seen.insert(e.image_id.as_str()) {
                return Err(Error::Manifest(format!("duplicate image id '{}'", e.image_id)));
            }
        }
        let admissible = materialize(&queries, &references, &ground_truth)?;
        Ok(Self {
            name: name.into(),
            queries,
            references,
            ground_truth,
            admissible,
        })
    }

    pub fn queries(&self) -> &[ManifestEntry] {
        &self.queries
    }

    pub fn references(&self) -> &[ManifestEntry] {
        &self.references
    }

    pub fn traverse(&self, which: Traverse) -> &[ManifestEntry] {
        match which {
            Traverse::Query => &self.queries,
            Traverse::Reference => &self.references,
        }
    }

    /// Queries first, then references.
    pub fn entries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.queries.iter().chain(&self.references)
    }

    pub fn ground_truth(&self) -> &GroundTruth {
        &self.ground_truth
    }

    /// Reference indices admissible for a query, ascending. Empty when the
    /// query has no counterpart in the reference traverse.
    pub fn admissible(&self, query: usize) -> &[usize] {
        &self.admissible[query]
    }

    pub fn has_ground_truth(&self, query: usize) -> bool {
        !self.admissible[query].is_empty()
    }

    pub fn is_correct(&self, query: usize, reference: usize) -> bool {
        self.admissible[query].binary_search(&reference).is_ok()
    }

    /// All admissible pairs, ordered by query then reference.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.admissible
            .iter()
            .enumerate()
            .flat_map(|(q, refs)| refs.iter().map(move |&r| (q, r)))
            .collect()
    }

    pub fn query_index(&self, image_id: &str) -> Option<usize> {
        self.queries.iter().position(|e| e.image_id == image_id)
    }

    pub fn reference_index(&self, image_id: &str) -> Option<usize> {
        self.references.iter().position(|e| e.image_id == image_id)
    }

    /// Writes the manifest as JSON. Tensor paths under `path`'s directory are
    /// stored relative to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        let entry = |e: &ManifestEntry| EntryFile {
            id: e.image_id.clone(),
            tensor: e
                .tensor_path
                .strip_prefix(base)
                .unwrap_or(&e.tensor_path)
                .to_string_lossy()
                .into_owned(),
            frame: e.frame,
        };
        let ground_truth = match &self.ground_truth {
            GroundTruth::Tolerance(t) => GroundTruthFile {
                mode: GroundTruthMode::Tolerance,
                tolerance: Some(*t),
                pairs: None,
            },
            GroundTruth::Pairs(p) => GroundTruthFile {
                mode: GroundTruthMode::Pairs,
                tolerance: None,
                pairs: Some(p.iter().map(|&(q, r)| [q, r]).collect()),
            },
        };
        let file = ManifestFile {
            name: self.name.clone(),
            queries: self.queries.iter().map(entry).collect(),
            references: self.references.iter().map(entry).collect(),
            ground_truth,
        };
        let text = serde_json::to_string_pretty(&file)
            .map_err(|e| Error::Manifest(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn materialize(
    queries: &[ManifestEntry],
    references: &[ManifestEntry],
    ground_truth: &GroundTruth,
) -> Result<Vec<Vec<usize>>> {
    let mut admissible = vec![Vec::new(); queries.len()];
    match ground_truth {
        GroundTruth::Tolerance(tol) => {
            let frame = |e: &ManifestEntry| {
                e.frame.ok_or_else(|| {
                    Error::Manifest(format!(
                        "entry '{}' lacks a frame index required by tolerance ground truth",
                        e.image_id
                    ))
                })
            };
            let ref_frames = references.iter().map(frame).collect::<Result<Vec<_>>>()?;
            for (q, entry) in queries.iter().enumerate() {
                let qf = frame(entry)?;
                admissible[q] = ref_frames
                    .iter()
                    .enumerate()
                    .filter(|(_, &rf)| qf.abs_diff(rf) <= *tol)
                    .map(|(r, _)| r)
                    .collect();
            }
        }
        GroundTruth::Pairs(pairs) => {
            for &(q, r) in pairs {
                if q >= queries.len() {
                    return Err(Error::Manifest(format!(
                        "ground-truth query index {q} out of range ({} queries)",
                        queries.len()
                    )));
                }
                if r >= references.len() {
                    return Err(Error::Manifest(format!(
                        "ground-truth reference index {r} out of range ({} references)",
                        references.len()
                    )));
                }
                admissible[q].push(r);
            }
            for refs in &mut admissible {
                refs.sort_unstable();
                refs.dedup();
            }
        }
    }
    Ok(admissible)
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    name: String,
    queries: Vec<EntryFile>,
    references: Vec<EntryFile>,
    ground_truth: GroundTruthFile,
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryFile {
    id: String,
    tensor: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frame: Option<i64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum GroundTruthMode {
    Tolerance,
    Pairs,
}

#[derive(Debug, Serialize, Deserialize)]
struct GroundTruthFile {
    mode: GroundTruthMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tolerance: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pairs: Option<Vec<[usize; 2]>>,
}

/// Reads and validates a manifest, resolving tensor paths against the
/// manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ManifestFile =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let convert = |entries: Vec<EntryFile>, traverse| {
        entries
            .into_iter()
            .map(|e| ManifestEntry {
                image_id: e.id,
                tensor_path: base.join(e.tensor),
                frame: e.frame,
                traverse,
            })
            .collect::<Vec<_>>()
    };
    let ground_truth = match file.ground_truth.mode {
        GroundTruthMode::Tolerance => GroundTruth::Tolerance(
            file.ground_truth
                .tolerance
                .ok_or_else(|| Error::Manifest("tolerance mode requires 'tolerance'".into()))?,
        ),
        GroundTruthMode::Pairs => GroundTruth::Pairs(
            file.ground_truth
                .pairs
                .ok_or_else(|| Error::Manifest("pairs mode requires 'pairs'".into()))?
                .into_iter()
                .map(|[q, r]| (q, r))
                .collect(),
        ),
    };
    DatasetManifest::new(
        file.name,
        convert(file.queries, Traverse::Query),
        convert(file.references, Traverse::Reference),
        ground_truth,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entries(n: usize, traverse: Traverse, prefix: &str) -> Vec<ManifestEntry> {
        (0..n)
            .map(|i| ManifestEntry {
                image_id: format!("{prefix}{i}"),
                tensor_path: PathBuf::from(format!("{prefix}{i}.npy")),
                frame: Some(i as i64),
                traverse,
            })
            .collect()
    }

    fn write(dir: &Path, json: &str) -> PathBuf {
        let path = dir.join("m.json");
        fs::write(&path, json).unwrap();
        path
    }

    #[test]
    fn tolerance_two_clips_to_traverse() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            r#"{"name": "t",
                "queries": [{"id": "q0", "tensor": "q0.npy", "frame": 0},
                            {"id": "q1", "tensor": "q1.npy", "frame": 1}],
                "references": [{"id": "r0", "tensor": "r/r0.npy", "frame": 0},
                               {"id": "r1", "tensor": "r/r1.npy", "frame": 1}],
                "ground_truth": {"mode": "tolerance", "tolerance": 2}}"#,
        );
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.pairs(), vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(m.references()[1].tensor_path, dir.path().join("r/r1.npy"));
    }

    #[test]
    fn tolerance_zero_admits_aligned_reference() {
        let m = DatasetManifest::new(
            "z",
            entries(4, Traverse::Query, "q"),
            entries(4, Traverse::Reference, "r"),
            GroundTruth::Tolerance(0),
        )
        .unwrap();
        for q in 0..4 {
            assert_eq!(m.admissible(q), &[q]);
        }
    }

    #[test]
    fn dangling_reference_index() {
        let err = DatasetManifest::new(
            "d",
            entries(10, Traverse::Query, "q"),
            entries(10, Traverse::Reference, "r"),
            GroundTruth::Pairs(vec![(0, 99)]),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Manifest(_)));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut refs = entries(2, Traverse::Reference, "r");
        refs[1].image_id = "q0".into();
        let err = DatasetManifest::new(
            "dup",
            entries(1, Traverse::Query, "q"),
            refs,
            GroundTruth::Pairs(vec![]),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Manifest(ref m) if m.contains("duplicate")));
    }

    #[test]
    fn tolerance_requires_frames() {
        let mut qs = entries(1, Traverse::Query, "q");
        qs[0].frame = None;
        assert!(DatasetManifest::new("f", qs, entries(1, Traverse::Reference, "r"), GroundTruth::Tolerance(1)).is_err());
    }

    #[test]
    fn save_then_load_preserves_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let rebase = |v: Vec<ManifestEntry>| {
            v.into_iter()
                .map(|mut e| {
                    e.tensor_path = dir.path().join(&e.tensor_path);
                    e
                })
                .collect::<Vec<_>>()
        };
        let m = DatasetManifest::new(
            "s",
            rebase(entries(3, Traverse::Query, "q")),
            rebase(entries(2, Traverse::Reference, "r")),
            GroundTruth::Pairs(vec![(0, 1), (2, 0)]),
        )
        .unwrap();
        let path = dir.path().join("s.json");
        m.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"tensor\": \"q0.npy\""));
        assert_eq!(load_manifest(&path).unwrap(), m);
        assert!(!m.has_ground_truth(1));
    }

    proptest! {
        #[test]
        fn tolerance_matches_brute_force(
            qf in proptest::collection::vec(0i64..60, 0..50),
            rf in proptest::collection::vec(0i64..60, 0..50),
            tol in 0u64..6,
        ) {
            let mk = |frames: &[i64], t, p: &str| frames.iter().enumerate().map(|(i, &f)| ManifestEntry {
                image_id: format!("{p}{i}"),
                tensor_path: PathBuf::new(),
                frame: Some(f),
                traverse: t,
            }).collect::<Vec<_>>();
            let m = DatasetManifest::new("p", mk(&qf, Traverse::Query, "q"), mk(&rf, Traverse::Reference, "r"), GroundTruth::Tolerance(tol)).unwrap();
            let mut expected = Vec::new();
            for (q, a) in qf.iter().enumerate() {
                for (r, b) in rf.iter().enumerate() {
                    if (a - b).abs() <= tol as i64 {
                        expected.push((q, r));
                    }
                }
            }
            prop_assert_eq!(m.pairs(), expected);
        }
    }
}
