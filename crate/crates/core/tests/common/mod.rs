//! Independent oracles shared by the integration tests.
//!
//! Everything here is written from the defining formulas with plain loops and
//! never calls into the library's own loss or metric code.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recoat::metrics::EvalRecord;
use recoat::net::PredictionSet;
use recoat::scene::{Point, Pose};

/// Weighted mean distance per mode, summed step by step from the defining formula.
pub fn oracle_mode_losses(pred: &[Vec<Point>], gt: &[Point], v: f64) -> Vec<f64> {
    let speed = if 4.0 - 0.2 * v > 1.0 { 4.0 - 0.2 * v } else { 1.0 };
    pred.iter()
        .map(|m| {
            let mut acc = 0.0;
            for t in 0..gt.len() {
                let seconds = (t + 1) as f64 / 2.0;
                let dx = gt[t][0] - m[t][0];
                let dy = gt[t][1] - m[t][1];
                acc += 0.5 * seconds * speed * (dx * dx + dy * dy).sqrt();
            }
            acc / gt.len() as f64
        })
        .collect()
}

pub fn oracle_traj(pred: &[Vec<Point>], gt: &[Point], v: f64) -> (f64, usize) {
    let l = oracle_mode_losses(pred, gt, v);
    let mut best = (l[0], 0);
    for (j, &x) in l.iter().enumerate() {
        if x < best.0 {
            best = (x, j);
        }
    }
    best
}

pub fn oracle_gt(ends: &[Point], gt: Point) -> Vec<f64> {
    let e: Vec<f64> = ends.iter().map(|p| (-((p[0] - gt[0]).powi(2) + (p[1] - gt[1]).powi(2)).sqrt()).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

pub fn oracle_ce(probs: &[f64], target: &[f64]) -> f64 {
    let mut s = 0.0;
    for j in 0..probs.len() {
        s -= target[j] * probs[j].ln();
    }
    s
}

fn d(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1])).sqrt()
}

/// Mean over records of the smallest per-mode average displacement.
pub fn oracle_min_ade(records: &[EvalRecord]) -> f64 {
    let mut total = 0.0;
    for r in records {
        let mut best = f64::INFINITY;
        for m in &r.pred.trajectories {
            let mut s = 0.0;
            for t in 0..r.gt_future.len() {
                s += d(m[t], r.gt_future[t]);
            }
            best = best.min(s / r.gt_future.len() as f64);
        }
        total += best;
    }
    total / records.len() as f64
}

fn best_fde(r: &EvalRecord) -> f64 {
    let last = r.gt_future.len() - 1;
    r.pred.trajectories.iter().map(|m| d(m[last], r.gt_future[last])).fold(f64::INFINITY, f64::min)
}

pub fn oracle_min_fde(records: &[EvalRecord]) -> f64 {
    records.iter().map(best_fde).sum::<f64>() / records.len() as f64
}

pub fn oracle_miss_rate(records: &[EvalRecord], threshold: f64) -> f64 {
    records.iter().filter(|r| best_fde(r) > threshold).count() as f64 / records.len() as f64
}

/// Highest probability wins; among equals the first listed mode.
fn top(r: &EvalRecord) -> usize {
    let mut best = 0;
    for j in 1..r.pred.probs.len() {
        if r.pred.probs[j] > r.pred.probs[best] {
            best = j;
        }
    }
    best
}

pub fn oracle_overlap_rate(records: &[EvalRecord], radius: f64) -> f64 {
    let mut hits = 0;
    for r in records {
        let m = &r.pred.trajectories[top(r)];
        let mut hit = false;
        for other in &r.others_future {
            for t in 0..m.len() {
                if let Some(q) = other[t] {
                    if d(m[t], q) <= radius {
                        hit = true;
                    }
                }
            }
        }
        hits += usize::from(hit);
    }
    hits as f64 / records.len() as f64
}

/// Average precision by enumerating every confidence threshold.
///
/// At threshold τ every mode with probability ≥ τ is a detection; a record
/// contributes one true positive when any selected mode ends within
/// `threshold`, and its other selected modes are false positives. The
/// interpolated precision at a recall level is the best precision at any
/// threshold reaching at least that recall.
pub fn oracle_map(records: &[EvalRecord], threshold: f64) -> f64 {
    let mut taus: Vec<f64> = records.iter().flat_map(|r| r.pred.probs.iter().copied()).collect();
    taus.sort_by(|a, b| b.total_cmp(a));
    taus.dedup();
    let n = records.len() as f64;
    let mut curve = Vec::new();
    for &tau in &taus {
        let (mut selected, mut tp) = (0usize, 0usize);
        for r in records {
            let last = r.gt_future.len() - 1;
            let mut found = false;
            for (j, m) in r.pred.trajectories.iter().enumerate() {
                if r.pred.probs[j] >= tau {
                    selected += 1;
                    if d(m[last], r.gt_future[last]) <= threshold {
                        found = true;
                    }
                }
            }
            tp += usize::from(found);
        }
        curve.push((tp as f64 / n, tp as f64 / selected as f64));
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for i in 0..curve.len() {
        let r = curve[i].0;
        if r > prev {
            let p = curve[i..].iter().map(|c| c.1).fold(0.0, f64::max);
            ap += (r - prev) * p;
            prev = r;
        }
    }
    ap
}

/// A random record set: 1–6 modes, quantized probabilities (so ties occur),
/// endpoints scattered around the 2 m threshold, and neighbors with gaps.
pub fn random_records(seed: u64, count: usize, steps: usize) -> Vec<EvalRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let k = rng.gen_range(1..7);
            let gt: Vec<Point> = (0..steps).map(|t| [t as f64 * rng.gen_range(0.5..2.0), rng.gen_range(-1.0..1.0)]).collect();
            let trajectories: Vec<Vec<Point>> = (0..k)
                .map(|_| {
                    let spread = rng.gen_range(0.0..4.0);
                    gt.iter().map(|p| [p[0] + rng.gen_range(-spread..spread), p[1] + rng.gen_range(-spread..spread)]).collect()
                })
                .collect();
            let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(1..5) as f64).collect();
            let z: f64 = raw.iter().sum();
            let others = (0..rng.gen_range(0..4))
                .map(|_| {
                    gt.iter()
                        .map(|p| rng.gen_bool(0.8).then(|| [p[0] + rng.gen_range(-4.0..4.0), p[1] + rng.gen_range(-4.0..4.0)]))
                        .collect()
                })
                .collect();
            EvalRecord {
                scenario_id: format!("r{i}"),
                pred: PredictionSet { trajectories, probs: raw.iter().map(|x| x / z).collect() },
                gt_future: gt,
                others_future: others,
            }
        })
        .collect()
}

/// Every point of every record mapped through `pose`.
pub fn moved(records: &[EvalRecord], pose: &Pose) -> Vec<EvalRecord> {
    records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            for m in &mut r.pred.trajectories {
                m.iter_mut().for_each(|p| *p = pose.to_world(*p));
            }
            r.gt_future.iter_mut().for_each(|p| *p = pose.to_world(*p));
            for o in &mut r.others_future {
                o.iter_mut().flatten().for_each(|p| *p = pose.to_world(*p));
            }
            r
        })
        .collect()
}
