//! Seven-item questionnaire, rating records and their aggregation.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::latency::{LatencyStats, Percentiles};
use crate::error::{Error, Result};

/// The evaluation form, in order.
pub const FORM_ITEMS: [&str; 7] = [
    "SkinGPT-4's diagnosis is correct or relevant.",
    "SkinGPT-4's description is informative.",
    "SkinGPT-4's suggestions are useful.",
    "SkinGPT-4 can help doctors with diagnosis.",
    "SkinGPT-4 can help patients to understand their disease better.",
    "If SkinGPT-4 can be deployed locally, it protects patients' privacy.",
    "Willingness to use SkinGPT-4.",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Likert {
    #[serde(rename = "strongly agree", alias = "strongly_agree")]
    StronglyAgree,
    #[serde(rename = "agree")]
    Agree,
    #[serde(rename = "neutral")]
    Neutral,
    #[serde(rename = "disagree")]
    Disagree,
    #[serde(rename = "strongly disagree", alias = "strongly_disagree")]
    StronglyDisagree,
}

impl Likert {
    pub const ALL: [Likert; 5] = [Likert::StronglyAgree, Likert::Agree, Likert::Neutral, Likert::Disagree, Likert::StronglyDisagree];

    pub fn label(self) -> &'static str {
        match self {
            Likert::StronglyAgree => "strongly agree",
            Likert::Agree => "agree",
            Likert::Neutral => "neutral",
            Likert::Disagree => "disagree",
            Likert::StronglyDisagree => "strongly disagree",
        }
    }

    pub fn is_positive(self) -> bool {
        matches!(self, Likert::StronglyAgree | Likert::Agree)
    }

    /// Accepts labels with spaces or underscores, any case.
    pub fn parse(s: &str) -> Option<Likert> {
        let key = s.trim().to_lowercase().replace('_', " ");
        Likert::ALL.into_iter().find(|l| l.label() == key)
    }
}

impl fmt::Display for Likert {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One rater's scores for one case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub case_id: String,
    pub rater_id: String,
    /// One entry per form item; `None` marks an unanswered item.
    pub ratings: Vec<Option<Likert>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<String>,
    pub latency_s: f64,
}

impl EvalRecord {
    pub fn validate(&self) -> Result<()> {
        let mut missing: Vec<usize> = (0..FORM_ITEMS.len()).filter(|&i| self.ratings.get(i).copied().flatten().is_none()).collect();
        if self.ratings.len() > FORM_ITEMS.len() {
            return Err(Error::Validation(format!(
                "record for case {} has {} ratings, the form has {}",
                self.case_id,
                self.ratings.len(),
                FORM_ITEMS.len()
            )));
        }
        missing.iter_mut().for_each(|i| *i += 1);
        if !missing.is_empty() {
            return Err(Error::Validation(format!("record for case {} is missing items {missing:?}", self.case_id)));
        }
        if !(self.latency_s >= 0.0 && self.latency_s.is_finite()) {
            return Err(Error::Validation(format!("record for case {} has latency {}", self.case_id, self.latency_s)));
        }
        Ok(())
    }
}

/// Hundredths of a percent, rounded half up: `count / n` as basis points.
pub fn basis_points(count: u64, n: u64) -> u64 {
    (2 * count * 10_000 + n) / (2 * n)
}

/// `7313` → `"73.13"`.
pub fn fmt_bp(bp: u64) -> String {
    format!("{}.{:02}", bp / 100, bp % 100)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelShare {
    pub level: Likert,
    pub count: u64,
    /// Rounded percentage in hundredths.
    pub bp: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemReport {
    pub item: usize,
    pub text: String,
    pub levels: Vec<LevelShare>,
    pub positive_count: u64,
    pub n: u64,
    /// `positive_count / n` rounded half up.
    pub positive_bp: u64,
    /// Sum of the two rounded positive levels; can differ from `positive_bp` by rounding.
    pub positive_sum_of_rounded_bp: u64,
}

impl ItemReport {
    pub fn level_bp(&self, l: Likert) -> u64 {
        self.levels.iter().find(|s| s.level == l).map_or(0, |s| s.bp)
    }

    pub fn positive_fraction(&self) -> String {
        format!("{}/{}", self.positive_count, self.n)
    }

    pub fn positive_exact(&self) -> f64 {
        self.positive_count as f64 * 100.0 / self.n as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub items: Vec<ItemReport>,
    /// Number of rating records.
    pub ratings: usize,
    /// Number of distinct cases; differs from `ratings` when cases were rated more than once.
    pub cases: usize,
    pub raters: usize,
    pub latency: Option<Percentiles>,
}

pub fn aggregate(records: &[EvalRecord]) -> Result<AggregateReport> {
    if records.is_empty() {
        return Err(Error::Validation("no evaluation records".into()));
    }
    for r in records {
        r.validate()?;
    }
    let n = records.len() as u64;
    let items = (0..FORM_ITEMS.len())
        .map(|i| {
            let levels: Vec<LevelShare> = Likert::ALL
                .iter()
                .map(|&level| {
                    let count = records.iter().filter(|r| r.ratings[i] == Some(level)).count() as u64;
                    LevelShare { level, count, bp: basis_points(count, n) }
                })
                .collect();
            let positive_count = levels.iter().filter(|s| s.level.is_positive()).map(|s| s.count).sum();
            let positive_sum_of_rounded_bp = levels.iter().filter(|s| s.level.is_positive()).map(|s| s.bp).sum();
            ItemReport {
                item: i + 1,
                text: FORM_ITEMS[i].to_string(),
                levels,
                positive_count,
                n,
                positive_bp: basis_points(positive_count, n),
                positive_sum_of_rounded_bp,
            }
        })
        .collect();
    let cases: BTreeSet<&str> = records.iter().map(|r| r.case_id.as_str()).collect();
    let raters: BTreeSet<&str> = records.iter().map(|r| r.rater_id.as_str()).collect();
    let latencies: Vec<f64> = records.iter().map(|r| r.latency_s).collect();
    Ok(AggregateReport {
        items,
        ratings: records.len(),
        cases: cases.len(),
        raters: raters.len(),
        latency: LatencyStats::new(&latencies).map(|s| s.percentiles()),
    })
}

impl AggregateReport {
    /// One line per item: level percentages then the positive rate.
    pub fn table(&self) -> String {
        let mut out = format!("{} ratings over {} cases\n", self.ratings, self.cases);
        for it in &self.items {
            let levels: Vec<String> = it.levels.iter().map(|l| format!("{} {}%", l.level, fmt_bp(l.bp))).collect();
            out.push_str(&format!(
                "item {}: {} | positive {} = {}% (sum of rounded {}%)\n",
                it.item,
                levels.join(", "),
                it.positive_fraction(),
                fmt_bp(it.positive_bp),
                fmt_bp(it.positive_sum_of_rounded_bp)
            ));
        }
        out
    }
}

/// Plot data: `item,level,count,n,percent`, with a `positive` row per item.
pub fn write_report_csv(path: &Path, report: &AggregateReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["item", "level", "count", "n", "percent"])?;
    for it in &report.items {
        for l in &it.levels {
            w.write_record([it.item.to_string(), l.level.label().to_string(), l.count.to_string(), it.n.to_string(), fmt_bp(l.bp)])?;
        }
        w.write_record([
            it.item.to_string(),
            "positive".to_string(),
            it.positive_count.to_string(),
            it.n.to_string(),
            fmt_bp(it.positive_bp),
        ])?;
    }
    w.flush().map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

/// Flat CSV form: `case_id,rater_id,item1..item7,latency_s,transcript`.
#[derive(Serialize, Deserialize)]
struct CsvRow {
    case_id: String,
    rater_id: String,
    item1: String,
    item2: String,
    item3: String,
    item4: String,
    item5: String,
    item6: String,
    item7: String,
    latency_s: f64,
    #[serde(default)]
    transcript: String,
}

pub fn read_records_csv(path: &Path) -> Result<Vec<EvalRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    parse_records_csv(file, &path.display().to_string())
}

/// `origin` names the source in error messages.
pub fn parse_records_csv<R: std::io::Read>(reader: R, origin: &str) -> Result<Vec<EvalRecord>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for (line, row) in r.deserialize::<CsvRow>().enumerate() {
        let row = row?;
        let raw = [&row.item1, &row.item2, &row.item3, &row.item4, &row.item5, &row.item6, &row.item7];
        let mut ratings = Vec::new();
        for s in raw {
            if s.trim().is_empty() {
                ratings.push(None);
            } else {
                ratings.push(Some(
                    Likert::parse(s)
                        .ok_or_else(|| Error::Validation(format!("{origin}:{}: unknown rating {s:?}", line + 2)))?,
                ));
            }
        }
        out.push(EvalRecord {
            case_id: row.case_id,
            rater_id: row.rater_id,
            ratings,
            transcript: (!row.transcript.is_empty()).then_some(row.transcript),
            latency_s: row.latency_s,
        });
    }
    Ok(out)
}

pub fn write_records_csv(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        let item = |i: usize| r.ratings.get(i).copied().flatten().map(|l| l.label().to_string()).unwrap_or_default();
        w.serialize(CsvRow {
            case_id: r.case_id.clone(),
            rater_id: r.rater_id.clone(),
            item1: item(0),
            item2: item(1),
            item3: item(2),
            item4: item(3),
            item5: item(4),
            item6: item(5),
            item7: item(6),
            latency_s: r.latency_s,
            transcript: r.transcript.clone().unwrap_or_default(),
        })?;
    }
    w.flush().map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

/// Reads records from `.csv` or JSON lines (anything else).
pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        return read_records_csv(path);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Validation(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}
