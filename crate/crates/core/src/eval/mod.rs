//! Benchmark data, CSV ingestion and clustering validation metrics.

pub mod data;
pub mod metrics;
pub mod synthetic;

pub use data::{load_csv, read_labels, write_labels, write_points, CsvSchema, LoadedData};
pub use metrics::{
    compute_metrics, optimal_label_map, pair_counts, MappedLabel, MetricsReport, PairCounts,
};
pub use synthetic::{generate_synthetic, SyntheticData, SyntheticSpec};
