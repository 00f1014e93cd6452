//! Experiment harness: configuration, the run driver, and report emission.

pub mod config;
pub mod report;
pub mod runner;

pub use config::{AlgorithmKind, ExperimentConfig};
pub use report::{aggregate, emit_report, AggregateRow, ReportFormat};
pub use runner::{
    adapt_with, build_network, evaluate, load_checkpoint, make_target, memory_overhead,
    run_adaptation, run_cell, run_sweep, run_tradeoff, save_checkpoint, train_source, MetricsRow,
    Predictor, TradeoffRow,
};
