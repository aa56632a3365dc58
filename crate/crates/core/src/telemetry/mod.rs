//! Experiment configuration, metric records and sinks, and measurement probes.

pub mod bench;
pub mod config;
pub mod metrics;
pub mod probes;

pub use bench::{bench_points, sample_bench};
pub use config::{BenchConfig, EvalConfig, ExperimentConfig, NetConfig, SecondaryConfig, TelemetryConfig, Topology, CONFIG_VERSION};
pub use metrics::{
    read_metrics, read_params, report, summarize, write_metrics, write_params, BenchRecord, CosineRecord, CsvSink,
    EvalRecord, IntensityRecord, NormRow, Record, RunSummary, ScoreRecord, ScoreTracker,
};
pub use probes::{cosine_probe, cosines_from_halves, eval_pause, track_norms, CosinePair, EvalResult, NormTracker};
