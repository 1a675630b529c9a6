//! Regional vocabulary learning (k-means) and hard assignment.

use std::fs;
use std::io::Write;
use std::ops::Deref;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regions::RegionalFeatures;

const CODEBOOK_MAGIC: &[u8; 5] = b"RVCB1";
const CODEBOOK_HEADER_LEN: usize = 5 + 4 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMethod {
    /// Greedy k-means++: each new center is the best of several
    /// distance-weighted candidates.
    PlusPlus,
    /// Distinct training rows drawn uniformly.
    RandomPoints,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub clusters: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once the mean centroid displacement drops below this.
    pub tol: f64,
    pub init: InitMethod,
    pub restarts: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            clusters: 256,
            seed: 0,
            max_iters: 100,
            tol: 1e-4,
            init: InitMethod::PlusPlus,
            restarts: 1,
        }
    }
}

impl KMeansConfig {
    pub fn with_clusters(clusters: usize) -> Self {
        Self {
            clusters,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 {
            return Err(Error::Config("the vocabulary needs at least one cluster".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be positive".into()));
        }
        if self.restarts == 0 {
            return Err(Error::Config("restarts must be positive".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::Config("tol must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub iterations_run: usize,
    /// Inertia of the training rows against the stored centroids.
    pub final_inertia: f64,
    /// Inertia after each assignment step of the winning run.
    #[serde(default)]
    pub inertia_history: Vec<f64>,
    #[serde(default)]
    pub training_rows: usize,
}

/// `V x K` centroid matrix.
#[derive(Debug, Clone)]
pub struct Codebook {
    clusters: usize,
    dim: usize,
    centroids: Vec<f32>,
    wide: Vec<f64>,
    pub meta: TrainMeta,
}

impl PartialEq for Codebook {
    fn eq(&self, other: &Self) -> bool {
        self.clusters == other.clusters
            && self.dim == other.dim
            && self.centroids == other.centroids
            && self.meta == other.meta
    }
}

impl Codebook {
    pub fn from_centroids(clusters: usize, dim: usize, centroids: Vec<f32>, meta: TrainMeta) -> Result<Self> {
        if clusters == 0 || dim == 0 {
            return Err(Error::Input("codebook dimensions must be positive".into()));
        }
        if centroids.len() != clusters * dim {
            return Err(Error::Input(format!(
                "{} centroid values do not form a {clusters}x{dim} matrix",
                centroids.len()
            )));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("centroids must be finite".into()));
        }
        if let Some((a, b)) = duplicate_rows(&centroids, dim) {
            return Err(Error::Input(format!("centroids {a} and {b} are identical")));
        }
        let wide = centroids.iter().map(|&v| f64::from(v)).collect();
        Ok(Self {
            clusters,
            dim,
            centroids,
            wide,
            meta,
        })
    }

    /// `V`
    pub fn clusters(&self) -> usize {
        self.clusters
    }

    /// `K`
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self, u: usize) -> &[f32] {
        &self.centroids[u * self.dim..(u + 1) * self.dim]
    }

    pub(crate) fn centroid_f64(&self, u: usize) -> &[f64] {
        &self.wide[u * self.dim..(u + 1) * self.dim]
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    /// Nearest centroid to `row`, lowest index on ties.
    pub fn nearest(&self, row: &[f64]) -> (usize, f64) {
        nearest(row, &self.wide, self.dim)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CODEBOOK_HEADER_LEN + self.centroids.len() * 4);
        out.extend_from_slice(CODEBOOK_MAGIC);
        out.extend_from_slice(&(self.clusters as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&self.meta.seed.to_le_bytes());
        for v in &self.centroids {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses the binary part; `meta` carries only the seed.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CODEBOOK_HEADER_LEN || &bytes[..5] != CODEBOOK_MAGIC {
            return Err(Error::Format("not a codebook file".into()));
        }
        let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let clusters = u32_at(5);
        let dim = u32_at(9);
        let seed = u64::from_le_bytes(bytes[13..21].try_into().unwrap());
        let payload = &bytes[CODEBOOK_HEADER_LEN..];
        if payload.len() != clusters * dim * 4 {
            return Err(Error::Format(format!(
                "codebook payload holds {} bytes, {clusters}x{dim} needs {}",
                payload.len(),
                clusters * dim * 4
            )));
        }
        let centroids = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let meta = TrainMeta {
            seed,
            iterations_run: 0,
            final_inertia: f64::NAN,
            inertia_history: Vec::new(),
            training_rows: 0,
        };
        Self::from_centroids(clusters, dim, centroids, meta).map_err(|e| match e {
            Error::Input(m) => Error::Format(m),
            other => other,
        })
    }

    /// Writes the codebook and a `<path>.json` sidecar with the training
    /// metadata.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))?;
        let sidecar = sidecar_path(path);
        let text = serde_json::to_string_pretty(&self.meta).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))
    }

    /// Reads a codebook; the sidecar is optional.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut cb = Self::from_bytes(&bytes)?;
        let sidecar = sidecar_path(path);
        if sidecar.exists() {
            let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
            let meta: TrainMeta = serde_json::from_str(&text)
                .map_err(|e| Error::Format(format!("{}: {e}", sidecar.display())))?;
            if meta.seed != cb.meta.seed {
                return Err(Error::Format("codebook sidecar seed does not match header".into()));
            }
            cb.meta = meta;
        }
        Ok(cb)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

fn duplicate_rows(values: &[f32], dim: usize) -> Option<(usize, usize)> {
    let mut rows: Vec<(Vec<u32>, usize)> = values
        .chunks_exact(dim)
        .enumerate()
        // +0.0 and -0.0 compare equal
        .map(|(i, r)| (r.iter().map(|v| (v + 0.0).to_bits()).collect(), i))
        .collect();
    rows.sort();
    rows.windows(2)
        .find(|w| w[0].0 == w[1].0)
        .map(|w| (w[0].1.min(w[1].1), w[0].1.max(w[1].1)))
}

#[inline(always)]
fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    // eight independent accumulators so the loop vectorises; the summation
    // order is fixed, so results stay deterministic
    const LANES: usize = 8;
    let mut acc = [0.0f64; LANES];
    let body = a.len() - a.len() % LANES;
    let (a_body, a_tail) = a.split_at(body);
    let (b_body, b_tail) = b.split_at(body);
    for (x, y) in a_body.chunks_exact(LANES).zip(b_body.chunks_exact(LANES)) {
        for l in 0..LANES {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    let mut total = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in a_tail.iter().zip(b_tail) {
        let d = x - y;
        total += d * d;
    }
    total
}

#[inline]
fn nearest(row: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (u, c) in centroids.chunks_exact(dim).enumerate() {
        let d = squared_distance(row, c);
        if d < best.1 {
            best = (u, d);
        }
    }
    best
}

/// One cluster index per regional feature row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labels(pub Vec<usize>);

impl Deref for Labels {
    type Target = [usize];

    fn deref(&self) -> &[usize] {
        &self.0
    }
}

/// Assigns every row of `features` to its nearest centroid (squared
/// Euclidean, lowest index on ties).
pub fn quantize(features: &RegionalFeatures, codebook: &Codebook) -> Result<Labels> {
    if features.dim() != codebook.dim() {
        return Err(Error::Input(format!(
            "features have {} columns, codebook expects {}",
            features.dim(),
            codebook.dim()
        )));
    }
    let mut assigned = Vec::with_capacity(features.rows());
    assign_rows(features.as_slice(), &codebook.wide, codebook.dim, &mut assigned);
    Ok(Labels(assigned.into_iter().map(|(u, _)| u).collect()))
}

/// Nearest centroid and squared distance for every packed row, in row order,
/// split across the rayon pool.
fn assign_par(rows: &[f64], centroids: &[f64], dim: usize) -> Vec<(usize, f64)> {
    rows.par_chunks(dim * 64)
        .map(|chunk| {
            let mut out = Vec::with_capacity(chunk.len() / dim);
            assign_rows(chunk, centroids, dim, &mut out);
            out
        })
        .flatten_iter()
        .collect()
}

/// Nearest-centroid labels for packed `rows`. On x86-64 hosts with AVX2 the
/// same kernel is compiled a second time with wider vectors; no FMA, so the
/// arithmetic (and therefore every label) is identical on either path.
fn assign_rows(rows: &[f64], centroids: &[f64], dim: usize, out: &mut Vec<(usize, f64)>) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime just above.
        unsafe { assign_rows_avx2(rows, centroids, dim, out) };
        return;
    }
    assign_rows_kernel(rows, centroids, dim, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn assign_rows_avx2(rows: &[f64], centroids: &[f64], dim: usize, out: &mut Vec<(usize, f64)>) {
    assign_rows_kernel(rows, centroids, dim, out);
}

#[inline(always)]
fn assign_rows_kernel(rows: &[f64], centroids: &[f64], dim: usize, out: &mut Vec<(usize, f64)>) {
    // blocks of rows share each centroid while it is still in L1
    const BLOCK: usize = 8;
    if dim == 0 {
        return;
    }
    for block in rows.chunks(BLOCK * dim) {
        let mut best = [(0usize, f64::INFINITY); BLOCK];
        for (u, c) in centroids.chunks_exact(dim).enumerate() {
            for (slot, row) in best.iter_mut().zip(block.chunks_exact(dim)) {
                let d = squared_distance(row, c);
                if d < slot.1 {
                    *slot = (u, d);
                }
            }
        }
        out.extend_from_slice(&best[..block.len() / dim]);
    }
}

/// Learns a `V`-word vocabulary from the rows of all `features`.
pub fn train_codebook(features: &[RegionalFeatures], cfg: &KMeansConfig) -> Result<Codebook> {
    let dim = match features.iter().find(|f| f.rows() > 0) {
        Some(f) => f.dim(),
        None => features.first().map(RegionalFeatures::dim).unwrap_or(0),
    };
    if let Some(f) = features.iter().find(|f| f.dim() != dim) {
        return Err(Error::Input(format!(
            "features of '{}' have {} columns, expected {dim}",
            f.image_id,
            f.dim()
        )));
    }
    let mut rows = Vec::with_capacity(features.iter().map(|f| f.as_slice().len()).sum());
    for f in features {
        rows.extend_from_slice(f.as_slice());
    }
    train_codebook_rows(&rows, dim.max(1), cfg)
}

/// [`train_codebook`] over a flat row-major `n x dim` matrix.
pub fn train_codebook_rows(rows: &[f64], dim: usize, cfg: &KMeansConfig) -> Result<Codebook> {
    cfg.validate()?;
    if dim == 0 || !rows.len().is_multiple_of(dim) {
        return Err(Error::Input("training rows do not match the dimension".into()));
    }
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("training rows must be finite".into()));
    }
    let n = rows.len() / dim;
    if n < cfg.clusters {
        return Err(Error::Train(format!(
            "insufficient features: {n} training rows for {} clusters",
            cfg.clusters
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<LloydRun> = None;
    for _ in 0..cfg.restarts {
        let init = match cfg.init {
            InitMethod::PlusPlus => init_plus_plus(rows, dim, cfg.clusters, &mut rng),
            InitMethod::RandomPoints => init_random_points(rows, dim, cfg.clusters, &mut rng),
        };
        let run = lloyd(rows, dim, init, cfg.max_iters, cfg.tol);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let best = best.expect("restarts >= 1");

    let centroids: Vec<f32> = best.centroids.iter().map(|&v| v as f32).collect();
    if let Some((a, b)) = duplicate_rows(&centroids, dim) {
        return Err(Error::Train(format!(
            "insufficient features: only duplicate rows left for clusters {a} and {b}"
        )));
    }
    let wide: Vec<f64> = centroids.iter().map(|&v| f64::from(v)).collect();
    let final_inertia = assign_par(rows, &wide, dim).iter().map(|a| a.1).sum();
    let meta = TrainMeta {
        seed: cfg.seed,
        iterations_run: best.iterations,
        final_inertia,
        inertia_history: best.history,
        training_rows: n,
    };
    Codebook::from_centroids(cfg.clusters, dim, centroids, meta)
}

fn init_random_points(rows: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rows.len() / dim;
    let mut picked = index::sample(rng, n, k).into_vec();
    picked.sort_unstable();
    picked
        .iter()
        .flat_map(|&i| rows[i * dim..(i + 1) * dim].iter().copied())
        .collect()
}

fn init_plus_plus(rows: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rows.len() / dim;
    let row = |i: usize| &rows[i * dim..(i + 1) * dim];
    let trials = 2 + (k as f64).ln().floor() as usize;

    let first = rng.random_range(0..n);
    let mut centroids = row(first).to_vec();
    let mut closest: Vec<f64> = rows
        .par_chunks_exact(dim)
        .map(|r| squared_distance(r, row(first)))
        .collect();

    for _ in 1..k {
        let total: f64 = closest.iter().sum();
        let mut best: Option<(f64, Vec<f64>, usize)> = None;
        for _ in 0..trials {
            let candidate = if total > 0.0 {
                let target = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut pick = n - 1;
                for (i, d) in closest.iter().enumerate() {
                    acc += d;
                    if acc > target {
                        pick = i;
                        break;
                    }
                }
                pick
            } else {
                rng.random_range(0..n)
            };
            let updated: Vec<f64> = rows
                .par_chunks_exact(dim)
                .zip(closest.par_iter())
                .map(|(r, &d)| d.min(squared_distance(r, row(candidate))))
                .collect();
            let potential: f64 = updated.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, updated, candidate));
            }
        }
        let (_, updated, chosen) = best.expect("at least two trials");
        centroids.extend_from_slice(row(chosen));
        closest = updated;
    }
    centroids
}

struct LloydRun {
    centroids: Vec<f64>,
    inertia: f64,
    history: Vec<f64>,
    iterations: usize,
}

fn lloyd(rows: &[f64], dim: usize, mut centroids: Vec<f64>, max_iters: usize, tol: f64) -> LloydRun {
    let n = rows.len() / dim;
    let k = centroids.len() / dim;
    let mut history = Vec::new();
    let mut iterations = 0;

    loop {
        let (mut labels, mut dists): (Vec<usize>, Vec<f64>) =
            assign_par(rows, &centroids, dim).into_iter().unzip();
        let inertia: f64 = dists.iter().sum();
        debug_assert!(
            history.last().is_none_or(|&prev| inertia <= prev),
            "inertia rose from {:?} to {inertia}",
            history.last()
        );
        history.push(inertia);
        if iterations == max_iters {
            break;
        }
        iterations += 1;

        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        // Empty clusters take the row farthest from its centroid.
        for u in 0..k {
            if counts[u] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| counts[labels[i]] > 1)
                .fold(None, |acc: Option<usize>, i| match acc {
                    Some(j) if dists[j] >= dists[i] => Some(j),
                    _ => Some(i),
                });
            if let Some(i) = far {
                counts[labels[i]] -= 1;
                counts[u] = 1;
                labels[i] = u;
                dists[i] = 0.0;
                centroids[u * dim..(u + 1) * dim].copy_from_slice(&rows[i * dim..(i + 1) * dim]);
            }
        }

        let mut sums = vec![0.0f64; k * dim];
        for (r, &l) in rows.chunks_exact(dim).zip(&labels) {
            for (s, v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(r) {
                *s += v;
            }
        }
        let mut displacement = 0.0;
        for u in 0..k {
            if counts[u] == 0 {
                continue;
            }
            let inv = counts[u] as f64;
            let old = &mut centroids[u * dim..(u + 1) * dim];
            let mut shift = 0.0;
            for (c, s) in old.iter_mut().zip(&sums[u * dim..(u + 1) * dim]) {
                let mean = s / inv;
                shift += (mean - *c) * (mean - *c);
                *c = mean;
            }
            displacement += shift.sqrt();
        }
        displacement /= k as f64;
        if displacement < tol || displacement == 0.0 {
            // one more assignment pass records the inertia of the final centroids
            let inertia: f64 = assign_par(rows, &centroids, dim).iter().map(|a| a.1).sum();
            debug_assert!(history.last().is_none_or(|&prev| inertia <= prev));
            history.push(inertia);
            break;
        }
    }

    LloydRun {
        centroids,
        inertia: *history.last().expect("at least one assignment"),
        history,
        iterations,
    }
}
