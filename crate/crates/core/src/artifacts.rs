//! Files written by a fit: the point estimate, posterior draws, a manifest
//! sufficient to rerun the fit, and run diagnostics.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::{compute_metrics, MetricsReport};
use crate::params::{DrawsManifest, PosteriorDraws};
use crate::runtime::{PipelineConfig, PipelineResult};

pub const CLUSTERS_FILE: &str = "c_star.csv";
pub const DRAWS_FILE: &str = "draws.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const METRICS_FILE: &str = "metrics.json";

/// Where the data came from and how it was read.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DataSource {
    pub path: PathBuf,
    pub columns: Option<Vec<String>>,
    pub label: Option<String>,
    pub log_columns: Vec<String>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FitManifest {
    pub tool_version: String,
    pub data: DataSource,
    pub config: PipelineConfig,
    pub draws: DrawsManifest,
}

impl FitManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Data(format!("serializing {}: {e}", path.display())))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}

/// Writes `row,cluster,subcomponent` with one-based labels.
pub fn write_clusters(path: &Path, clusters: &[usize], subs: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(["row", "cluster", "subcomponent"])
        .map_err(io)?;
    for (i, (c, s)) in clusters.iter().zip(subs).enumerate() {
        w.write_record([i.to_string(), (c + 1).to_string(), (s + 1).to_string()])
            .map_err(io)?;
    }
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Writes every fit artifact into `dir`, plus metrics when true labels are
/// given for some rows.
pub fn write_fit(
    dir: &Path,
    source: DataSource,
    result: &PipelineResult,
    truth: Option<&[Option<usize>]>,
) -> Result<Option<MetricsReport>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    write_clusters(
        &dir.join(CLUSTERS_FILE),
        &result.clusters,
        &result.subcomponents,
    )?;
    result.draws.save(dir.join(DRAWS_FILE))?;
    let manifest = FitManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        data: source,
        config: result.diagnostics.config.clone(),
        draws: DrawsManifest::new(
            &result.draws,
            &result.stats,
            &result.diagnostics.config.param_chain(),
        ),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    write_json(&dir.join(DIAGNOSTICS_FILE), &result.diagnostics)?;
    let metrics = match truth {
        Some(labels) => {
            let (t, p): (Vec<usize>, Vec<usize>) = labels
                .iter()
                .zip(&result.clusters)
                .filter_map(|(t, p)| t.map(|t| (t, p + 1)))
                .unzip();
            if t.is_empty() {
                None
            } else {
                let m = compute_metrics(&t, &p)?;
                write_json(&dir.join(METRICS_FILE), &m)?;
                Some(m)
            }
        }
        None => None,
    };
    Ok(metrics)
}

/// One-based labels and per-cluster probabilities for new points.
pub fn classify_points(
    draws: &PosteriorDraws,
    points: &crate::model::Points,
) -> Result<Vec<(usize, Vec<f64>)>> {
    let c = crate::params::Classifier::new(draws)?;
    points
        .rows()
        .map(|y| c.classify(y).map(|(l, p)| (l + 1, p)))
        .collect()
}
