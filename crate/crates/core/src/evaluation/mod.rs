//! Metrics, the degradation suite, robustness and forgetting reports, and
//! the synthetic two-domain benchmark.

mod degrade;
mod metrics;
mod reports;
mod synthetic;

pub use degrade::{apply_degradation, default_suite, DegradationKind, DegradationSpec};
pub use metrics::{compute_metrics, ClassMetrics, Metrics};
pub use reports::{
    evaluate_checkpoint, evaluate_split, forgetting_report, robustness_report, write_text, ForgettingReport,
    RobustnessReport, RobustnessRow,
};
pub use synthetic::{
    generate_synthetic_benchmark, split_sizes, write_benchmark, SyntheticBenchmark, SyntheticConfig, CLASS_NAMES,
    MIN_SAMPLES_PER_CLASS,
};
