//! Displacement, miss, overlap and average-precision metrics for
//! multi-modal predictions.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{io_error, RecoatError, Result};
use crate::net::PredictionSet;
use crate::scene::Point;

pub const MISS_THRESHOLD_M: f64 = 2.0;
pub const OVERLAP_RADIUS_M: f64 = 1.0;
/// Reporting horizons in future steps (3 s, 5 s and 8 s at 2 Hz).
pub const HORIZONS: [(usize, &str); 3] = [(6, "3s"), (10, "5s"), (16, "8s")];

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub scenario_id: String,
    pub pred: PredictionSet,
    pub gt_future: Vec<Point>,
    /// Future positions of every other agent; `None` where unobserved.
    pub others_future: Vec<Vec<Option<Point>>>,
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

impl EvalRecord {
    pub fn validate(&self) -> Result<()> {
        self.pred.validate()?;
        let t = self.gt_future.len();
        if t == 0 {
            return Err(RecoatError::InvalidInput(format!("record `{}` has an empty ground truth", self.scenario_id)));
        }
        if let Some(j) = self.pred.trajectories.iter().position(|m| m.len() != t) {
            return Err(RecoatError::InvalidInput(format!(
                "record `{}`: mode {j} has {} steps, ground truth has {t}",
                self.scenario_id,
                self.pred.trajectories[j].len()
            )));
        }
        if let Some(i) = self.others_future.iter().position(|o| o.len() != t) {
            return Err(RecoatError::InvalidInput(format!(
                "record `{}`: agent {i} future has {} steps, expected {t}",
                self.scenario_id,
                self.others_future[i].len()
            )));
        }
        Ok(())
    }

    /// The record restricted to its first `steps` future steps.
    pub fn truncated(&self, steps: usize) -> Self {
        let cut = |v: &Vec<Point>| v[..steps.min(v.len())].to_vec();
        Self {
            scenario_id: self.scenario_id.clone(),
            pred: PredictionSet {
                trajectories: self.pred.trajectories.iter().map(cut).collect(),
                probs: self.pred.probs.clone(),
            },
            gt_future: cut(&self.gt_future),
            others_future: self.others_future.iter().map(|o| o[..steps.min(o.len())].to_vec()).collect(),
        }
    }

    fn ades(&self) -> Vec<f64> {
        let n = self.gt_future.len() as f64;
        self.pred
            .trajectories
            .iter()
            .map(|m| m.iter().zip(&self.gt_future).map(|(&p, &q)| dist(p, q)).sum::<f64>() / n)
            .collect()
    }

    /// Final displacement error of every mode.
    pub fn fdes(&self) -> Vec<f64> {
        let end = *self.gt_future.last().expect("validated record");
        self.pred.trajectories.iter().map(|m| dist(*m.last().expect("validated record"), end)).collect()
    }
}

fn min(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(f64::INFINITY, f64::min)
}

pub fn min_ade(record: &EvalRecord) -> Result<f64> {
    record.validate()?;
    Ok(min(record.ades()))
}

pub fn min_fde(record: &EvalRecord) -> Result<f64> {
    record.validate()?;
    Ok(min(record.fdes()))
}

fn check_all(records: &[EvalRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(RecoatError::EmptyDataset);
    }
    records.iter().try_for_each(EvalRecord::validate)
}

fn fraction(records: &[EvalRecord], hit: impl Fn(&EvalRecord) -> bool) -> Result<f64> {
    check_all(records)?;
    Ok(records.iter().filter(|r| hit(r)).count() as f64 / records.len() as f64)
}

/// Fraction of records whose best endpoint is farther than `threshold`.
pub fn miss_rate(records: &[EvalRecord], threshold: f64) -> Result<f64> {
    fraction(records, |r| min(r.fdes()) > threshold)
}

/// True when the most probable mode passes within `radius` of another agent
/// at the same step.
pub fn overlaps(record: &EvalRecord, radius: f64) -> bool {
    let top = &record.pred.trajectories[record.pred.top_mode()];
    record.others_future.iter().any(|other| {
        top.iter()
            .zip(other)
            .any(|(&p, q)| q.is_some_and(|q| dist(p, q) <= radius))
    })
}

pub fn overlap_rate(records: &[EvalRecord], radius: f64) -> Result<f64> {
    fraction(records, |r| overlaps(r, radius))
}

/// Single-bucket average precision over confidence-ranked modes.
///
/// A mode is a true positive when its endpoint lies within `threshold` and no
/// higher-ranked mode of the same record already was one. Precision and
/// recall are only sampled at the end of each group of equal confidences, so
/// the result does not depend on how ties are ordered.
pub fn map_score(records: &[EvalRecord], threshold: f64) -> Result<f64> {
    check_all(records)?;
    let mut pairs: Vec<(f64, usize, bool)> = Vec::new();
    for (i, r) in records.iter().enumerate() {
        for (p, f) in r.pred.probs.iter().zip(r.fdes()) {
            pairs.push((*p, i, f <= threshold));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let total = records.len() as f64;
    let mut matched = vec![false; records.len()];
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut curve = Vec::new();
    let mut start = 0;
    while start < pairs.len() {
        let end = start + pairs[start..].iter().take_while(|p| p.0 == pairs[start].0).count();
        for &(_, i, hit) in &pairs[start..end] {
            if hit && !matched[i] {
                matched[i] = true;
                tp += 1;
            }
        }
        seen += end - start;
        curve.push((tp as f64 / total, tp as f64 / seen as f64));
        start = end;
    }

    let mut ap = 0.0;
    let mut best_precision = 0.0f64;
    let mut prev_recall = curve.last().map_or(0.0, |c| c.0);
    for &(recall, precision) in curve.iter().rev() {
        ap += (prev_recall - recall) * best_precision;
        best_precision = best_precision.max(precision);
        prev_recall = recall;
    }
    ap += prev_recall * best_precision;
    Ok(ap)
}

/// One line of a metrics report.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub count: usize,
}

fn report_rows(records: &[EvalRecord], suffix: &str, rows: &mut Vec<MetricRow>) -> Result<()> {
    let n = records.len();
    let mean = |f: fn(&EvalRecord) -> Result<f64>| -> Result<f64> {
        Ok(records.iter().map(f).collect::<Result<Vec<_>>>()?.iter().sum::<f64>() / n as f64)
    };
    let mut push = |name: &str, value: f64| {
        rows.push(MetricRow { metric: format!("{name}{suffix}"), value, count: n })
    };
    push("min_ade", mean(min_ade)?);
    push("min_fde", mean(min_fde)?);
    push("miss_rate", miss_rate(records, MISS_THRESHOLD_M)?);
    push("overlap_rate", overlap_rate(records, OVERLAP_RADIUS_M)?);
    push("map", map_score(records, MISS_THRESHOLD_M)?);
    Ok(())
}

/// Full-horizon metrics followed by the same metrics at each reporting
/// horizon no longer than the records.
pub fn evaluate(records: &[EvalRecord]) -> Result<Vec<MetricRow>> {
    check_all(records)?;
    let mut rows = Vec::new();
    report_rows(records, "", &mut rows)?;
    let len = records.iter().map(|r| r.gt_future.len()).min().unwrap_or(0);
    for (steps, label) in HORIZONS {
        if steps <= len {
            let cut: Vec<EvalRecord> = records.iter().map(|r| r.truncated(steps)).collect();
            report_rows(&cut, &format!("@{label}"), &mut rows)?;
        }
    }
    Ok(rows)
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("metric,value,count\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.metric, r.value, r.count);
    }
    s
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    std::fs::write(path, metrics_csv(rows)).map_err(io_error(path))
}
