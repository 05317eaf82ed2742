//! Bundled evaluation data: a 160-rating questionnaire table over 150 cases
//! and a synthetic human-consultation latency trace.

use super::latency::parse_baseline;
use super::likert::{parse_records_csv, EvalRecord};
use crate::error::Result;

/// 150 cases, the first ten rated twice.
pub const REFERENCE_RATINGS_CSV: &str = include_str!("../../fixtures/reference_ratings.csv");

/// Synthetic, minutes-scale response times of a human consultation service.
/// Replace with a measured trace when one is available.
pub const SYNTHETIC_HUMAN_LATENCY_CSV: &str = include_str!("../../fixtures/synthetic_human_latency.csv");

pub fn reference_records() -> Result<Vec<EvalRecord>> {
    parse_records_csv(REFERENCE_RATINGS_CSV.as_bytes(), "reference_ratings.csv")
}

pub fn synthetic_human_latency() -> Result<Vec<f64>> {
    parse_baseline(SYNTHETIC_HUMAN_LATENCY_CSV.as_bytes(), "synthetic_human_latency.csv")
}
