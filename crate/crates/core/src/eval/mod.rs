//! Questionnaire aggregation, latency statistics and behavioural probes.

pub mod fixtures;
pub mod latency;
pub mod likert;
pub mod probe;

pub use latency::{compare, nearest_rank, parse_baseline, read_baseline, write_plot_csv, LatencyComparison, LatencyStats, Percentiles};
pub use likert::{
    aggregate, basis_points, fmt_bp, parse_records_csv, read_records, read_records_csv, write_records_csv, write_report_csv, AggregateReport, EvalRecord,
    ItemReport, LevelShare, Likert, FORM_ITEMS,
};
pub use probe::{load_probe_cases, probe_behavior, ProbeCase, ProbeOutcome, ProbeScores};
