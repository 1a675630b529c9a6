//! Resolution of pipeline settings: preset, then config file, then flags.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use region_vlad::pipeline::PipelineConfig;
use region_vlad::{AggregationMode, InitMethod, Neighbourhood};
use serde::Deserialize;
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// N=400 regions, V=256 words.
    Default,
    /// N=200 regions, V=128 words.
    Compact,
}

impl Preset {
    fn pipeline(self) -> PipelineConfig {
        match self {
            Preset::Default => PipelineConfig::full(),
            Preset::Compact => PipelineConfig::compact(),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum NeighbourhoodArg {
    #[value(name = "4")]
    Four,
    #[value(name = "8")]
    Eight,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AggregationArg {
    Bbox,
    Mask,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InitArg {
    PlusPlus,
    RandomPoints,
}

/// Numeric knobs shared by every pipeline command.
#[derive(Debug, Clone, Default, Args)]
pub struct Knobs {
    /// JSON config file with optional "preset", "workers", "regions",
    /// "kmeans" and "vlad" sections; flags override it.
    #[arg(long, value_name = "FILE", global = true)]
    pub config: Option<PathBuf>,
    /// Named setting: default (N=400, V=256) or compact (N=200, V=128).
    #[arg(long, value_enum, global = true)]
    pub preset: Option<Preset>,
    /// Regions kept per image.
    #[arg(long, global = true)]
    pub top_n: Option<usize>,
    /// Grouping tolerance as a fraction of each channel's activation range.
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    #[arg(long, value_enum, global = true)]
    pub neighbourhood: Option<NeighbourhoodArg>,
    /// Cells at or below this value are ignored.
    #[arg(long, global = true)]
    pub activation_floor: Option<f32>,
    #[arg(long, value_enum, global = true)]
    pub aggregation: Option<AggregationArg>,
    /// Vocabulary size.
    #[arg(long, global = true)]
    pub clusters: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub max_iters: Option<usize>,
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    #[arg(long, value_enum, global = true)]
    pub init: Option<InitArg>,
    #[arg(long, global = true)]
    pub restarts: Option<usize>,
    /// Power-normalization exponent.
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    preset: Option<Preset>,
    workers: Option<usize>,
    regions: Option<Value>,
    kmeans: Option<Value>,
    vlad: Option<Value>,
}

#[derive(Debug, Clone)]
pub struct Resolved {
    pub pipeline: PipelineConfig,
    pub workers: Option<usize>,
}

fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

fn read_config(path: &Path) -> Result<ConfigFile, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::user(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::user(format!("config {}: {e}", path.display())))
}

impl Knobs {
    pub fn resolve(&self, workers_flag: Option<usize>) -> Result<Resolved, CliError> {
        let file = match &self.config {
            Some(path) => read_config(path)?,
            None => ConfigFile::default(),
        };
        let preset = self.preset.or(file.preset).unwrap_or(Preset::Default);
        let mut value = serde_json::to_value(preset.pipeline()).expect("pipeline config serializes");
        for (key, section) in [("regions", &file.regions), ("kmeans", &file.kmeans), ("vlad", &file.vlad)] {
            if let Some(section) = section {
                merge(&mut value[key], section);
            }
        }
        let mut p: PipelineConfig =
            serde_json::from_value(value).map_err(|e| CliError::user(format!("config: {e}")))?;

        let r = &mut p.regions;
        if let Some(v) = self.top_n {
            r.top_n = v;
        }
        if let Some(v) = self.tau {
            r.similarity_tau = v;
        }
        if let Some(v) = self.neighbourhood {
            r.neighbourhood = match v {
                NeighbourhoodArg::Four => Neighbourhood::Four,
                NeighbourhoodArg::Eight => Neighbourhood::Eight,
            };
        }
        if let Some(v) = self.activation_floor {
            r.activation_floor = v;
        }
        if let Some(v) = self.aggregation {
            r.aggregation = match v {
                AggregationArg::Bbox => AggregationMode::BoundingBox,
                AggregationArg::Mask => AggregationMode::Mask,
            };
        }
        let k = &mut p.kmeans;
        if let Some(v) = self.clusters {
            k.clusters = v;
        }
        if let Some(v) = self.seed {
            k.seed = v;
        }
        if let Some(v) = self.max_iters {
            k.max_iters = v;
        }
        if let Some(v) = self.tol {
            k.tol = v;
        }
        if let Some(v) = self.init {
            k.init = match v {
                InitArg::PlusPlus => InitMethod::PlusPlus,
                InitArg::RandomPoints => InitMethod::RandomPoints,
            };
        }
        if let Some(v) = self.restarts {
            k.restarts = v;
        }
        if let Some(v) = self.gamma {
            p.vlad.gamma = v;
        }
        p.validate()?;

        let workers = workers_flag.or(file.workers);
        if workers == Some(0) {
            return Err(CliError::user("workers must be at least 1"));
        }
        Ok(Resolved { pipeline: p, workers })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_preset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"preset": "compact", "regions": {"top_n": 50}, "kmeans": {"seed": 9}}"#).unwrap();
        let knobs = Knobs { config: Some(path), seed: Some(3), ..Knobs::default() };
        let r = knobs.resolve(None).unwrap();
        assert_eq!(r.pipeline.regions.top_n, 50);
        assert_eq!(r.pipeline.kmeans.clusters, 128);
        assert_eq!(r.pipeline.kmeans.seed, 3);
    }

    #[test]
    fn unknown_sections_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"kmenas": {}}"#).unwrap();
        let knobs = Knobs { config: Some(path), ..Knobs::default() };
        assert_eq!(knobs.resolve(None).unwrap_err().code, 2);
    }

    #[test]
    fn invalid_values_are_user_errors() {
        let knobs = Knobs { gamma: Some(-1.0), ..Knobs::default() };
        assert_eq!(knobs.resolve(None).unwrap_err().code, 2);
    }
}
