//! Response-time samples, order-statistic percentiles and the comparison
//! against a human consultation trace.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nearest-rank percentile of ascending `sorted`: the value at rank
/// `ceil(p/100 · n)`, so the result is always one of the samples.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    /// Ascending.
    samples: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub n: usize,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub mean: f64,
}

impl LatencyStats {
    /// `None` for an empty sample.
    pub fn new(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        Some(Self { samples: s })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn percentile(&self, p: f64) -> f64 {
        nearest_rank(&self.samples, p)
    }

    pub fn percentiles(&self) -> Percentiles {
        Percentiles {
            n: self.samples.len(),
            p50: self.percentile(50.0),
            p90: self.percentile(90.0),
            p99: self.percentile(99.0),
            mean: self.samples.iter().sum::<f64>() / self.samples.len() as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyComparison {
    pub service: Percentiles,
    pub baseline: Percentiles,
    /// `baseline.p50 / service.p50`; above 1 means the service answers faster.
    pub p50_ratio: f64,
    pub service_faster: bool,
}

pub fn compare(service: &[f64], baseline: &[f64]) -> Result<LatencyComparison> {
    let s = LatencyStats::new(service).ok_or_else(|| Error::Validation("no service latency samples".into()))?;
    let b = LatencyStats::new(baseline).ok_or_else(|| Error::Validation("no baseline latency samples".into()))?;
    let (s, b) = (s.percentiles(), b.percentiles());
    let p50_ratio = if s.p50 > 0.0 { b.p50 / s.p50 } else { f64::INFINITY };
    Ok(LatencyComparison { service: s, baseline: b, p50_ratio, service_faster: s.p50 < b.p50 })
}

#[derive(Debug, Serialize, Deserialize)]
struct BaselineRow {
    latency_s: f64,
    #[serde(default)]
    source: String,
}

/// A CSV with a `latency_s` column (seconds); other columns are ignored.
pub fn read_baseline(path: &Path) -> Result<Vec<f64>> {
    let file = std::fs::File::open(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    parse_baseline(file, &path.display().to_string())
}

pub fn parse_baseline<R: std::io::Read>(reader: R, origin: &str) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for row in r.deserialize::<BaselineRow>() {
        let row = row?;
        if !(row.latency_s >= 0.0 && row.latency_s.is_finite()) {
            return Err(Error::Validation(format!("{origin}: latency {} is not a duration", row.latency_s)));
        }
        out.push(row.latency_s);
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset(format!("{origin} has no latency samples")));
    }
    Ok(out)
}

/// Plot data: `series,rank,latency_s`, samples ascending per series.
pub fn write_plot_csv(path: &Path, service: &[f64], baseline: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["series", "rank", "latency_s"])?;
    for (name, data) in [("service", service), ("baseline", baseline)] {
        if let Some(s) = LatencyStats::new(data) {
            for (i, v) in s.samples().iter().enumerate() {
                w.write_record([name.to_string(), (i + 1).to_string(), v.to_string()])?;
            }
        }
    }
    w.flush().map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}
