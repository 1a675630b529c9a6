use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, ValueEnum};
use region_vlad::evaluator::summary_json;
use region_vlad::matcher::{read_results_csv, results_summary, write_json, write_results_csv};
use region_vlad::pipeline::{encode_image, load_traverse, regional_features_all, PipelineConfig};
use region_vlad::synthetic::{SyntheticConfig, SyntheticDataset};
use region_vlad::tensor_io::Traverse;
use region_vlad::{
    load_manifest, pr_curve, recall_at_1, retrieve, run_timing, suggest_threshold, threshold_partition,
    train_codebook, Codebook, DatasetManifest, FeatureTensor, MatchResult, VladStore,
};
use serde_json::json;

use crate::{log, require_file, CliError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TraverseArg {
    Query,
    Reference,
    All,
}

fn load_tensors(manifest: &DatasetManifest, which: TraverseArg) -> Result<Vec<FeatureTensor>, CliError> {
    let tensors = match which {
        TraverseArg::Query => load_traverse(manifest, Traverse::Query)?,
        TraverseArg::Reference => load_traverse(manifest, Traverse::Reference)?,
        TraverseArg::All => {
            let mut all = load_traverse(manifest, Traverse::Query)?;
            all.extend(load_traverse(manifest, Traverse::Reference)?);
            all
        }
    };
    if tensors.is_empty() {
        return Err(CliError::user(format!("manifest has no {which:?} tensors").to_lowercase()));
    }
    Ok(tensors)
}

fn open_manifest(path: &Path) -> Result<DatasetManifest, CliError> {
    require_file("manifest", path)?;
    Ok(load_manifest(path)?)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError { code: 1, message: format!("cannot create {}: {e}", dir.display()) })
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError { code: 1, message: format!("cannot write {}: {e}", path.display()) })
}

#[derive(Debug, Args)]
pub struct BuildVocab {
    /// Manifest listing the vocabulary tensors.
    #[arg(long)]
    manifest: PathBuf,
    /// Codebook file to write (a `.json` sidecar is written next to it).
    #[arg(long)]
    out: PathBuf,
    /// Which traverse of the manifest to learn from.
    #[arg(long, value_enum, default_value = "all")]
    traverse: TraverseArg,
}

impl BuildVocab {
    pub fn run(self, cfg: &PipelineConfig) -> Result<(), CliError> {
        let manifest = open_manifest(&self.manifest)?;
        let tensors = load_tensors(&manifest, self.traverse)?;
        let started = Instant::now();
        let features = regional_features_all(&tensors, &cfg.regions)?;
        let rows: usize = features.iter().map(|f| f.rows()).sum();
        log!("regions", images = tensors.len(), rows = rows, seconds = format!("{:.3}", started.elapsed().as_secs_f64()));

        let started = Instant::now();
        let codebook = train_codebook(&features, &cfg.kmeans)?;
        log!(
            "trained",
            clusters = codebook.clusters(),
            dim = codebook.dim(),
            iterations = codebook.meta.iterations_run,
            inertia = codebook.meta.final_inertia,
            seconds = format!("{:.3}", started.elapsed().as_secs_f64()),
        );
        if let Some(parent) = self.out.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        codebook.save(&self.out)?;
        println!("V={} K={} inertia={}", codebook.clusters(), codebook.dim(), codebook.meta.final_inertia);
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct Encode {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    codebook: PathBuf,
    /// Traverse to encode.
    #[arg(long, value_enum)]
    traverse: TraverseArg,
    /// VLAD store to write.
    #[arg(long)]
    out: PathBuf,
}

impl Encode {
    pub fn run(self, cfg: &PipelineConfig) -> Result<(), CliError> {
        require_file("codebook", &self.codebook)?;
        let manifest = open_manifest(&self.manifest)?;
        let codebook = Codebook::load(&self.codebook)?;
        let tensors = load_tensors(&manifest, self.traverse)?;
        if let Some(t) = tensors.iter().find(|t| t.channels() != codebook.dim()) {
            return Err(CliError::user(format!(
                "tensor '{}' has {} channels, codebook expects {}",
                t.image_id(),
                t.channels(),
                codebook.dim()
            )));
        }

        let started = Instant::now();
        let mut store = VladStore::new(codebook.clusters(), codebook.dim());
        for t in &tensors {
            let d = encode_image(t, &codebook, cfg)?;
            log!("encoded", image = t.image_id(), nonzero_rows = d.nonzero_rows());
            store.push(d)?;
        }
        if let Some(parent) = self.out.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        store.save(&self.out)?;
        log!(
            "store_written",
            path = self.out.display(),
            records = store.len(),
            clusters = store.clusters(),
            dim = store.dim(),
            seconds = format!("{:.3}", started.elapsed().as_secs_f64()),
        );
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct Match {
    /// Query VLAD store.
    #[arg(long)]
    queries: PathBuf,
    /// Reference VLAD store.
    #[arg(long)]
    references: PathBuf,
    /// Directory for results.csv and results.json.
    #[arg(long)]
    out_dir: PathBuf,
    /// Keep only the best K references per query in the CSV (default: all).
    #[arg(long)]
    top_k: Option<usize>,
}

impl Match {
    pub fn run(self) -> Result<(), CliError> {
        require_file("query store", &self.queries)?;
        require_file("reference store", &self.references)?;
        if self.top_k == Some(0) {
            return Err(CliError::user("top-k must be at least 1"));
        }
        let queries = VladStore::load(&self.queries)?;
        let references = VladStore::load(&self.references)?;
        if references.is_empty() {
            return Err(CliError::user("reference store is empty"));
        }
        let results = queries
            .descriptors()
            .iter()
            .map(|q| retrieve(q, &references))
            .collect::<region_vlad::Result<Vec<MatchResult>>>()?;
        let total_ms: f64 = results.iter().map(|r| r.timing.total_ms).sum();
        let pairs = results.len() * references.len();
        log!(
            "matched",
            queries = results.len(),
            references = references.len(),
            total_ms = format!("{total_ms:.3}"),
            per_pair_ms = format!("{:.6}", if pairs > 0 { total_ms / pairs as f64 } else { 0.0 }),
        );

        create_dir(&self.out_dir)?;
        write_results_csv(self.out_dir.join("results.csv"), &results, &references, self.top_k)?;
        write_json(self.out_dir.join("results.json"), &results_summary(&results, &references))?;
        log!("written", dir = self.out_dir.display());
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct Evaluate {
    /// Manifest with the ground truth.
    #[arg(long)]
    manifest: PathBuf,
    /// results.csv produced by `match`.
    #[arg(long)]
    results: PathBuf,
    /// Directory for pr.csv, pr.json, pr.dat and threshold.json.
    #[arg(long)]
    out_dir: PathBuf,
    /// Classify queries at this acceptance threshold.
    #[arg(long, conflicts_with = "suggest_threshold")]
    threshold: Option<f64>,
    /// Results CSV of queries known to have no true match; the threshold is
    /// the mean of their best scores.
    #[arg(long, value_name = "NEGATIVES_CSV")]
    suggest_threshold: Option<PathBuf>,
}

impl Evaluate {
    pub fn run(self) -> Result<(), CliError> {
        require_file("results", &self.results)?;
        if let Some(path) = &self.suggest_threshold {
            require_file("negatives", path)?;
        }
        if self.threshold.is_some_and(|t| !t.is_finite()) {
            return Err(CliError::user("threshold must be finite"));
        }
        let manifest = open_manifest(&self.manifest)?;
        let reference_ids: Vec<String> = manifest.references().iter().map(|e| e.image_id.clone()).collect();
        let results = read_results_csv(&self.results, &reference_ids)?;

        let curve = pr_curve(&results, &manifest)?;
        let r1 = recall_at_1(&results, &manifest)?;
        let mut summary = summary_json(&curve, r1);
        summary["points"] = serde_json::to_value(&curve.points).expect("points serialize");
        summary["excluded"] = json!(curve.excluded);

        create_dir(&self.out_dir)?;
        write_text(&self.out_dir.join("pr.csv"), &curve.to_csv())?;
        write_text(&self.out_dir.join("pr.dat"), &curve.to_dat())?;
        write_json(self.out_dir.join("pr.json"), &summary)?;
        log!("evaluated", queries = curve.n_queries, excluded = curve.excluded.len(), auc = curve.auc, recall_at_1 = r1);
        println!("auc={} recall_at_1={}", curve.auc, r1);

        let threshold = match (&self.threshold, &self.suggest_threshold) {
            (Some(t), _) => Some((*t, json!({"source": "flag"}))),
            (None, Some(path)) => {
                let negatives = read_results_csv(path, &reference_ids)?;
                let t = suggest_threshold(&negatives)?;
                log!("threshold_suggested", threshold = t, negatives = negatives.len());
                Some((t, json!({"source": "suggested", "negatives": negatives.len()})))
            }
            (None, None) => None,
        };
        if let Some((t, source)) = threshold {
            let report = threshold_partition(&results, &manifest, t)?;
            let mut value = serde_json::to_value(&report).expect("report serializes");
            value["provenance"] = source;
            write_json(self.out_dir.join("threshold.json"), &value)?;
            log!(
                "partitioned",
                threshold = t,
                tpos = report.true_positives,
                fneg = report.false_negatives,
                fpos = report.false_positives,
                tneg = report.true_negatives,
            );
            println!("threshold={t}");
        }
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct Timing {
    /// Manifest whose tensors (both traverses) are timed.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    codebook: PathBuf,
    #[arg(long, default_value_t = 5)]
    iterations: usize,
    /// Upper bound on descriptor pairs compared per iteration.
    #[arg(long, default_value_t = 10_000)]
    max_pairs: usize,
    /// Directory for timing.json and timing.txt.
    #[arg(long)]
    out_dir: PathBuf,
}

impl Timing {
    pub fn run(self, cfg: &PipelineConfig, workers: usize) -> Result<(), CliError> {
        require_file("codebook", &self.codebook)?;
        let manifest = open_manifest(&self.manifest)?;
        let codebook = Codebook::load(&self.codebook)?;
        let tensors = load_tensors(&manifest, TraverseArg::All)?;
        let mut cfg = cfg.clone();
        cfg.kmeans.clusters = codebook.clusters();
        let mut report = run_timing(&cfg, &tensors, &codebook, self.iterations, self.max_pairs)?;
        report.workers = workers;
        create_dir(&self.out_dir)?;
        write_json(self.out_dir.join("timing.json"), &serde_json::to_value(&report).expect("report serializes"))?;
        let table = report.to_table();
        write_text(&self.out_dir.join("timing.txt"), &table)?;
        log!(
            "timing",
            top_n = report.top_n,
            clusters = report.clusters,
            extraction_s = report.extraction_s.mean,
            encoding_ms = report.encoding_ms.mean,
            matching_ms = report.matching_ms.mean,
        );
        print!("{table}");
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct Synth {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 50)]
    places: usize,
    /// Trailing queries that get no reference.
    #[arg(long, default_value_t = 0)]
    unmatched: usize,
    /// Reference noise as a fraction of each tensor's value range.
    #[arg(long, default_value_t = 0.01)]
    sigma: f64,
    #[arg(long = "synth-seed", default_value_t = 0)]
    synth_seed: u64,
    #[arg(long, default_value_t = 64)]
    channels: usize,
    #[arg(long, default_value_t = 13)]
    height: usize,
    #[arg(long, default_value_t = 13)]
    width: usize,
}

impl Synth {
    pub fn run(self) -> Result<(), CliError> {
        if self.places == 0 || self.unmatched > self.places {
            return Err(CliError::user("need places >= 1 and unmatched <= places"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(CliError::user("sigma must be a non-negative number"));
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(CliError::user("tensor dimensions must be positive"));
        }
        let cfg = SyntheticConfig {
            channels: self.channels,
            height: self.height,
            width: self.width,
            seed: self.synth_seed,
            ..SyntheticConfig::default()
        };
        let ds = SyntheticDataset::generate(self.places, self.unmatched, self.sigma, &cfg);
        let path = ds.write(&self.out_dir, "synthetic")?;
        log!("synthesized", queries = ds.queries.len(), references = ds.references.len(), manifest = path.display());
        println!("{}", path.display());
        Ok(())
    }
}
