//! Pearson correlations and least-squares slopes.
//!
//! Pitch/creak reports use mean pitch in Hz as `x` and creak probability as
//! `y`, so a slope reads as probability change per Hz.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::creak::Gender;
use crate::error::{Error, Result};

/// Reports with `|R|` below this are flagged as not meaningful.
pub const MEANINGFUL_R: f64 = 0.1;
const RELATIVE_VARIANCE_FLOOR: f64 = 1e-12;
pub const PITCH_CREAK_UNITS: &str = "creak probability per Hz";

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::DimMismatch {
            expected: xs.len(),
            got: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::Degenerate(format!("need at least 2 points, got {}", xs.len())));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite value in series"));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Centered sum of squares, or an error when it is negligible relative to
/// the raw magnitude of the series.
fn spread(v: &[f64], name: &str) -> Result<f64> {
    let m = mean(v);
    let ss: f64 = v.iter().map(|x| (x - m).powi(2)).sum();
    let raw: f64 = v.iter().map(|x| x * x).sum();
    if ss <= RELATIVE_VARIANCE_FLOOR * raw || ss == 0.0 {
        return Err(Error::Degenerate(format!("{name} has zero variance")));
    }
    Ok(ss)
}

fn cross(xs: &[f64], ys: &[f64]) -> f64 {
    let (mx, my) = (mean(xs), mean(ys));
    xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum()
}

/// Product-moment correlation coefficient.
pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    let sxx = spread(xs, "x")?;
    let syy = spread(ys, "y")?;
    Ok((cross(xs, ys) / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Least-squares fit of `y` on `x`: `(slope, intercept)`.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    check_pair(xs, ys)?;
    let sxx = spread(xs, "x")?;
    let slope = cross(xs, ys) / sxx;
    Ok((slope, mean(ys) - slope * mean(xs)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub group: String,
    pub n: usize,
    pub r: f64,
    pub slope: f64,
    pub intercept: f64,
    pub x_name: String,
    pub y_name: String,
    pub units: String,
}

impl CorrelationReport {
    pub fn fit(group: &str, xs: &[f64], ys: &[f64], x_name: &str, y_name: &str, units: &str) -> Result<Self> {
        let r = pearson_r(xs, ys)?;
        let (slope, intercept) = ols_slope(xs, ys)?;
        Ok(Self {
            group: group.to_string(),
            n: xs.len(),
            r,
            slope,
            intercept,
            x_name: x_name.to_string(),
            y_name: y_name.to_string(),
            units: units.to_string(),
        })
    }

    pub fn is_meaningful(&self) -> bool {
        self.r.abs() >= MEANINGFUL_R
    }
}

/// A group either produced a report or was skipped with a reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum GroupOutcome {
    Report(CorrelationReport),
    Skipped { group: String, n: usize, reason: String },
}

impl GroupOutcome {
    pub fn group(&self) -> &str {
        match self {
            GroupOutcome::Report(r) => &r.group,
            GroupOutcome::Skipped { group, .. } => group,
        }
    }

    pub fn report(&self) -> Option<&CorrelationReport> {
        match self {
            GroupOutcome::Report(r) => Some(r),
            GroupOutcome::Skipped { .. } => None,
        }
    }
}

/// One utterance's pitch and creak label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PitchCreakRow {
    pub gender: Gender,
    pub mean_pitch_hz: f64,
    pub creak_prob: f64,
}

/// Pitch/creak report for one group of `(mean_pitch_hz, creak_prob)` pairs,
/// or the reason it was skipped. Independent of pair order.
pub fn pitch_creak_outcome(group: &str, pairs: impl IntoIterator<Item = (f64, f64)>) -> GroupOutcome {
    let mut pairs: Vec<(f64, f64)> = pairs.into_iter().collect();
    // canonical order so the result does not depend on row order
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    match CorrelationReport::fit(group, &xs, &ys, "mean_pitch_hz", "creak_prob", PITCH_CREAK_UNITS) {
        Ok(r) => GroupOutcome::Report(r),
        Err(e) => GroupOutcome::Skipped {
            group: group.to_string(),
            n: xs.len(),
            reason: e.to_string(),
        },
    }
}

/// Reports for male, female and all rows, in that order.
pub fn creak_pitch_report(rows: &[PitchCreakRow]) -> Vec<GroupOutcome> {
    let by = |g: Gender| {
        rows.iter()
            .filter(move |r| r.gender == g)
            .map(|r| (r.mean_pitch_hz, r.creak_prob))
    };
    vec![
        pitch_creak_outcome("male", by(Gender::Male)),
        pitch_creak_outcome("female", by(Gender::Female)),
        pitch_creak_outcome("overall", rows.iter().map(|r| (r.mean_pitch_hz, r.creak_prob))),
    ]
}

/// A metric change observed at creak shift `beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub beta: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSlope {
    pub metric: String,
    pub n: usize,
    pub slope: f64,
    pub intercept: f64,
    /// `None` when the deltas are constant.
    pub r: Option<f64>,
}

/// Per-metric slope and correlation of `delta` against `beta`, sorted by
/// metric name.
pub fn metric_slope_vs_beta(records: &[MetricRecord]) -> Result<Vec<MetricSlope>> {
    let mut groups: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for rec in records {
        groups.entry(rec.metric.as_str()).or_default().push((rec.beta, rec.delta));
    }
    groups
        .into_iter()
        .map(|(metric, mut pairs)| {
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
            let betas: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let deltas: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let distinct = betas.windows(2).filter(|w| w[0] != w[1]).count() + 1;
            if distinct < 2 {
                return Err(Error::Degenerate(format!("metric '{metric}' needs at least 2 distinct beta values")));
            }
            let (slope, intercept) = ols_slope(&betas, &deltas)?;
            let r = match pearson_r(&betas, &deltas) {
                Ok(r) => Some(r),
                Err(Error::Degenerate(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(MetricSlope {
                metric: metric.to_string(),
                n: betas.len(),
                slope,
                intercept,
                r,
            })
        })
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::invalid(format!("csv: {other:?}")),
    }
}

/// Writes `group,n,R,slope,intercept,note` rows in the given order.
pub fn write_reports_csv<W: Write>(out: W, outcomes: &[GroupOutcome]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["group", "n", "R", "slope", "intercept", "note"]).map_err(csv_err)?;
    for o in outcomes {
        let rec = match o {
            GroupOutcome::Report(r) => {
                let note = if r.is_meaningful() { "" } else { "not meaningful (|R| < 0.1)" };
                [
                    r.group.clone(),
                    r.n.to_string(),
                    format!("{:.6}", r.r),
                    format!("{:.6e}", r.slope),
                    format!("{:.6}", r.intercept),
                    note.to_string(),
                ]
            }
            GroupOutcome::Skipped { group, n, reason } => [
                group.clone(),
                n.to_string(),
                String::new(),
                String::new(),
                String::new(),
                format!("skipped: {reason}"),
            ],
        };
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `metric,n,slope,intercept,R` rows.
pub fn write_metric_slopes_csv<W: Write>(out: W, slopes: &[MetricSlope]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["metric", "n", "slope", "intercept", "R"]).map_err(csv_err)?;
    for s in slopes {
        w.write_record([
            s.metric.clone(),
            s.n.to_string(),
            format!("{:.6}", s.slope),
            format!("{:.6}", s.intercept),
            s.r.map_or_else(String::new, |r| format!("{r:.6}")),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
