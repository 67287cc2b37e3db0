//! Training losses: time- and speed-weighted trajectory regression with a
//! winner-take-all minimum over decoders, and a cross-entropy scoring loss
//! against a soft distribution derived from endpoint distances.

use recoat_tensor::{GradStore, Graph, Partition, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{RecoatError, Result};
use crate::net::{ForwardOutput, PredictionSet};
use crate::scene::{Point, FUTURE_DT};

/// Smallest probability fed to the logarithm in the scoring loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeUnit {
    /// `t` is the step time in seconds, so weights run from 0.25 to 4 at 2 Hz.
    Seconds,
    /// `t` is the one-based step index.
    Steps,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the trajectory term in the total loss.
    pub lambda: f64,
    pub time_weight_slope: f64,
    /// Speed factor is `max(speed_floor, speed_intercept + speed_slope · v)`.
    pub speed_intercept: f64,
    pub speed_slope: f64,
    pub speed_floor: f64,
    pub time_unit: TimeUnit,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            time_weight_slope: 0.5,
            speed_intercept: 4.0,
            speed_slope: -0.2,
            speed_floor: 1.0,
            time_unit: TimeUnit::Seconds,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.lambda, self.time_weight_slope, self.speed_intercept, self.speed_slope, self.speed_floor]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.lambda <= 0.0 {
            return Err(RecoatError::InvalidConfig(format!("loss lambda must be positive and finite, got {}", self.lambda)));
        }
        Ok(())
    }

    pub fn speed_factor(&self, v: f64) -> f64 {
        (self.speed_intercept + self.speed_slope * v).max(self.speed_floor)
    }

    fn time_of(&self, t: usize) -> f64 {
        match self.time_unit {
            TimeUnit::Seconds => t as f64 * FUTURE_DT,
            TimeUnit::Steps => t as f64,
        }
    }
}

/// Weight of future step `t` (one-based) for a target moving at `v` m/s.
pub fn step_weight(t: usize, v: f64, cfg: &LossConfig) -> f64 {
    debug_assert!(t >= 1 && v >= 0.0);
    cfg.time_weight_slope * cfg.time_of(t) * cfg.speed_factor(v)
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Weighted mean displacement of every decoder's trajectory.
pub fn decoder_losses(pred: &[Vec<Point>], gt: &[Point], v: f64, cfg: &LossConfig) -> Result<Vec<f64>> {
    if pred.is_empty() || gt.is_empty() {
        return Err(RecoatError::InvalidInput("trajectory loss needs at least one mode and one step".into()));
    }
    let n = gt.len() as f64;
    pred.iter()
        .enumerate()
        .map(|(j, traj)| {
            if traj.len() != gt.len() {
                return Err(RecoatError::InvalidInput(format!(
                    "mode {j} has {} steps, ground truth has {}",
                    traj.len(),
                    gt.len()
                )));
            }
            let sum: f64 = traj
                .iter()
                .zip(gt)
                .enumerate()
                .map(|(t, (&p, &q))| step_weight(t + 1, v, cfg) * dist(q, p))
                .sum();
            Ok(sum / n)
        })
        .collect()
}

/// Index of the smallest value; ties go to the lowest index.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = j;
        }
    }
    best
}

/// Minimum decoder loss and the winning decoder.
pub fn traj_loss(pred: &[Vec<Point>], gt: &[Point], v: f64, cfg: &LossConfig) -> Result<(f64, usize)> {
    let losses = decoder_losses(pred, gt, v, cfg)?;
    let j = argmin(&losses);
    Ok((losses[j], j))
}

/// Softmax of negative endpoint distances to the ground-truth endpoint.
pub fn gt_distribution(endpoints: &[Point], gt_endpoint: Point) -> Vec<f64> {
    let neg: Vec<f64> = endpoints.iter().map(|&e| -dist(e, gt_endpoint)).collect();
    softmax(&neg)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Cross entropy of `probs` against the target distribution `p_gt`.
pub fn score_loss(probs: &[f64], p_gt: &[f64]) -> f64 {
    -probs
        .iter()
        .zip(p_gt)
        .map(|(&p, &q)| q * p.max(PROB_FLOOR).ln())
        .sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub traj_loss: f64,
    pub score_loss: f64,
    pub total: f64,
    pub winner_index: usize,
}

pub fn total_loss(pred: &PredictionSet, gt: &[Point], v: f64, cfg: &LossConfig) -> Result<LossBreakdown> {
    pred.validate()?;
    let (traj, winner) = traj_loss(&pred.trajectories, gt, v, cfg)?;
    let gt_end = *gt.last().expect("non-empty ground truth checked above");
    let p_gt = gt_distribution(&pred.endpoints(), gt_end);
    let score = score_loss(&pred.probs, &p_gt);
    Ok(LossBreakdown {
        traj_loss: traj,
        score_loss: score,
        total: score + cfg.lambda * traj,
        winner_index: winner,
    })
}

/// Zeroes the regression gradients of every decoder that did not win.
///
/// `winners` holds the winning decoder of each example contributing to
/// `grads`. Scoring and shared gradients are left as they are.
pub fn wta_gradient_mask(grads: &mut GradStore, winners: &[usize], num_modes: usize) -> Result<()> {
    if let Some(&w) = winners.iter().find(|&&w| w >= num_modes) {
        return Err(RecoatError::InvalidInput(format!("winner index {w} out of range for {num_modes} decoders")));
    }
    let mut won = vec![false; num_modes];
    for &w in winners {
        won[w] = true;
    }
    for (name, t, part) in grads.iter_mut() {
        let j = match part {
            Partition::Regression(j) | Partition::Scoring(j) => j,
            Partition::Shared => continue,
        };
        if j >= num_modes {
            return Err(RecoatError::InvalidInput(format!("parameter `{name}` belongs to unknown partition {part}")));
        }
        if matches!(part, Partition::Regression(_)) && !won[j] {
            t.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }
    Ok(())
}

/// Supervision for one example of a batch.
#[derive(Clone, Debug)]
pub struct LossTarget<'a> {
    pub gt_future: &'a [Point],
    pub speed: f64,
}

/// Graph handles and values of a batch loss.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    /// Scalar `score + lambda · traj`, averaged over the batch.
    pub total: Var,
    pub traj_loss: f64,
    pub score_loss: f64,
    /// Winning decoder per example.
    pub winners: Vec<usize>,
}

impl BatchLoss {
    pub fn total_value(&self, g: &Graph) -> f64 {
        g.value(self.total).item()
    }
}

/// Builds the batch-mean loss on the tape.
///
/// The winner of each example is fixed from the forward values and enters as
/// a constant one-hot mask, so losing decoders receive exactly zero
/// trajectory gradient. The soft target distribution is a constant too.
pub fn batch_loss(g: &mut Graph, out: &ForwardOutput, targets: &[LossTarget<'_>], cfg: &LossConfig) -> Result<BatchLoss> {
    let b = out.batch;
    let k = out.xs.len();
    if targets.len() != b || k == 0 {
        return Err(RecoatError::InvalidInput(format!("{} loss targets for a batch of {b}", targets.len())));
    }
    let t = g.value(out.xs[0]).cols();
    let mut gx = Vec::with_capacity(b * t);
    let mut gy = Vec::with_capacity(b * t);
    let mut weights = Vec::with_capacity(b * t);
    for target in targets {
        if target.gt_future.len() != t {
            return Err(RecoatError::InvalidInput(format!(
                "ground truth has {} steps, model predicts {t}",
                target.gt_future.len()
            )));
        }
        for (i, p) in target.gt_future.iter().enumerate() {
            gx.push(p[0]);
            gy.push(p[1]);
            weights.push(step_weight(i + 1, target.speed, cfg) / t as f64);
        }
    }
    let gx = g.constant(Tensor::new(&[b, t], gx)?)?;
    let gy = g.constant(Tensor::new(&[b, t], gy)?)?;
    let weights = Tensor::new(&[b, t], weights)?;

    let mut per_mode = Vec::with_capacity(k);
    for j in 0..k {
        let dx = g.sub(out.xs[j], gx)?;
        let dy = g.sub(out.ys[j], gy)?;
        let d = g.hypot(dx, dy)?;
        let wd = g.mul_const(d, &weights)?;
        per_mode.push(g.sum_rows(wd)?);
    }
    let losses = g.concat_cols(&per_mode)?;

    let lv = g.value(losses).data().to_vec();
    let mut winners = Vec::with_capacity(b);
    let mut mask = vec![0.0; b * k];
    let mut p_gt = Vec::with_capacity(b * k);
    let mut traj_sum = 0.0;
    for i in 0..b {
        let row = &lv[i * k..(i + 1) * k];
        let w = argmin(row);
        winners.push(w);
        traj_sum += row[w];
        mask[i * k + w] = 1.0 / b as f64;
        let gt_end = targets[i].gt_future[t - 1];
        let ends: Vec<Point> = (0..k)
            .map(|j| [g.value(out.xs[j]).data()[i * t + t - 1], g.value(out.ys[j]).data()[i * t + t - 1]])
            .collect();
        p_gt.extend(gt_distribution(&ends, gt_end).into_iter().map(|p| -p / b as f64));
    }
    let routed = g.mul_const(losses, &Tensor::new(&[b, k], mask)?)?;
    let traj = g.sum(routed)?;

    let logp = g.clamp_min(out.log_probs, PROB_FLOOR.ln())?;
    let ce = g.mul_const(logp, &Tensor::new(&[b, k], p_gt)?)?;
    let score = g.sum(ce)?;

    let weighted = g.scale(traj, cfg.lambda)?;
    let total = g.add(score, weighted)?;
    Ok(BatchLoss {
        total,
        traj_loss: traj_sum / b as f64,
        score_loss: g.value(score).item(),
        winners,
    })
}
