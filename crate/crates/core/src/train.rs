//! Nadam optimizer, the epoch loop with winner-take-all routing, and
//! resumable checkpoints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use recoat_tensor::{checkpoint, GradStore, Graph, Mode, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{io_error, json_error, RecoatError, Result};
use crate::net::{prepare_inputs, NetConfig, RecoatNet, SceneInputs};
use crate::objective::{batch_loss, wta_gradient_mask, LossConfig, LossTarget};
use crate::raster::RasterConfig;
use crate::scene::{AgentType, Scene};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

const OPTIM_PREFIX: &str = "optim/";
pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "train_log.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay applied once per epoch.
    pub decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub agent_type: AgentType,
    /// Global gradient-norm clip; off when absent.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            decay: 0.9,
            epochs: 50,
            batch_size: 32,
            seed: 0,
            agent_type: AgentType::Vehicle,
            clip_norm: None,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RecoatError::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("decay {} must lie in (0, 1]", self.decay));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("clip norm {c} must be positive"));
            }
        }
        self.loss.validate()
    }

    /// Learning rate used throughout `epoch` (zero-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay.powi(epoch as i32)
    }
}

/// Model and training configuration stored next to checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub net: NetConfig,
}

impl RunConfig {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(CONFIG_FILE);
        let text = serde_json::to_string_pretty(self).map_err(json_error(&path))?;
        std::fs::write(&path, text).map_err(io_error(&path))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&path).map_err(io_error(&path))?;
        serde_json::from_str(&text).map_err(json_error(&path))
    }
}

/// Nadam moment estimates, aligned with the parameter store's order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t, _)| Tensor::zeros(t.shape())).collect();
        Self { step: 0, first: zeros.clone(), second: zeros }
    }

    pub fn quantize_f32(&mut self) {
        for t in self.first.iter_mut().chain(self.second.iter_mut()) {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// One Nadam update with constant momentum:
///
/// ```text
/// m ← β1·m + (1−β1)·g            v ← β2·v + (1−β2)·g²
/// m̂ = β1·m / (1−β1^(t+1)) + (1−β1)·g / (1−β1^t)
/// θ ← θ − lr · m̂ / (sqrt(v / (1−β2^t)) + ε)
/// ```
pub fn optimizer_step(params: &mut ParamStore, grads: &GradStore, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if state.first.len() != params.len() || state.second.len() != params.len() {
        return Err(RecoatError::InvalidInput(format!(
            "optimizer tracks {} tensors, model has {}",
            state.first.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1_next = 1.0 - BETA1.powi(t + 1);
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (i, (name, p)) in params.tensors_mut().enumerate() {
        let g = grads
            .get(name)
            .ok_or_else(|| RecoatError::InvalidInput(format!("no gradient for parameter `{name}`")))?;
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        if g.shape() != p.shape() || m.shape() != p.shape() || v.shape() != p.shape() {
            return Err(RecoatError::InvalidInput(format!(
                "shape mismatch for `{name}`: parameter {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        let (pd, gd) = (p.data_mut(), g.data());
        let (md, vd) = (m.data_mut(), v.data_mut());
        for k in 0..pd.len() {
            let gk = gd[k];
            md[k] = BETA1 * md[k] + (1.0 - BETA1) * gk;
            vd[k] = BETA2 * vd[k] + (1.0 - BETA2) * gk * gk;
            let m_hat = BETA1 * md[k] / c1_next + (1.0 - BETA1) * gk / c1;
            let v_hat = vd[k] / c2;
            pd[k] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    Ok(())
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream seed for a `(purpose, epoch, batch)` position.
pub fn derive_seed(seed: u64, purpose: u64, epoch: u64, batch: u64) -> u64 {
    [purpose, epoch, batch].iter().fold(splitmix(seed), |acc, &x| splitmix(acc ^ x))
}

/// Example order for `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1, epoch as u64, 0));
    order.shuffle(&mut rng);
    order
}

/// Loss statistics of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub batch: usize,
    pub traj_loss: f64,
    pub score_loss: f64,
    pub total: f64,
    /// Number of examples each decoder won.
    pub winner_histogram: Vec<usize>,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("epoch,batch,traj_loss,score_loss,total,winner_histogram\n");
    for r in rows {
        let hist: Vec<String> = r.winner_histogram.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.epoch,
            r.batch,
            r.traj_loss,
            r.score_loss,
            r.total,
            hist.join(";")
        );
    }
    s
}

/// Result of a single optimizer step.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub traj_loss: f64,
    pub score_loss: f64,
    pub total: f64,
    pub winners: Vec<usize>,
    pub grads: GradStore,
}

/// Forward, loss, backward, winner-take-all masking, optional clipping and
/// one Nadam update on `batch`.
pub fn train_step(
    net: &mut RecoatNet,
    state: &mut OptimizerState,
    batch: &[&SceneInputs],
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepReport> {
    let mut g = Graph::new();
    let out = net.forward(&mut g, batch, Mode::Train, rng)?;
    let targets: Vec<LossTarget<'_>> = batch
        .iter()
        .map(|s| LossTarget { gt_future: &s.gt_future, speed: s.speed })
        .collect();
    let loss = batch_loss(&mut g, &out, &targets, &cfg.loss)?;
    let grads = g.backward(loss.total)?;
    let mut grads = grads.for_params(&g, &net.params);
    wta_gradient_mask(&mut grads, &loss.winners, net.config.num_modes)?;
    if let Some(clip) = cfg.clip_norm {
        let norm = grads.global_norm();
        if norm > clip {
            grads.scale(clip / norm);
        }
    }
    optimizer_step(&mut net.params, &grads, state, lr)?;
    Ok(StepReport {
        traj_loss: loss.traj_loss,
        score_loss: loss.score_loss,
        total: loss.total_value(&g),
        winners: loss.winners,
        grads,
    })
}

/// Everything needed to continue training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub net: RecoatNet,
    pub optimizer: OptimizerState,
    /// Number of completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn fresh(cfg: &TrainConfig, net_cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        if net_cfg.agent_type != cfg.agent_type {
            return Err(RecoatError::InvalidConfig(format!(
                "model is for {} but training targets {}",
                net_cfg.agent_type, cfg.agent_type
            )));
        }
        let net = RecoatNet::new(net_cfg, cfg.seed)?;
        let optimizer = OptimizerState::new(&net.params);
        Ok(Self { net, optimizer, epoch: 0 })
    }

    fn entries(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> =
            self.net.params.iter().map(|(n, t, _)| (n.to_string(), t.clone())).collect();
        out.push((format!("{OPTIM_PREFIX}step"), Tensor::scalar(self.optimizer.step as f64)));
        out.push((format!("{OPTIM_PREFIX}epoch"), Tensor::scalar(self.epoch as f64)));
        for ((name, _, _), (m, v)) in self.net.params.iter().zip(self.optimizer.first.iter().zip(&self.optimizer.second)) {
            out.push((format!("{OPTIM_PREFIX}m/{name}"), m.clone()));
            out.push((format!("{OPTIM_PREFIX}v/{name}"), v.clone()));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries = self.entries();
        Ok(checkpoint::save(path, entries.iter().map(|(n, t)| (n.as_str(), t)))?)
    }

    /// Restores model and optimizer from a checkpoint written by [`TrainState::save`].
    pub fn load(path: &Path, net_cfg: NetConfig) -> Result<Self> {
        let entries = checkpoint::load(path)?;
        let net = RecoatNet::from_entries(net_cfg, &entries)?;
        let find = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| RecoatError::InvalidInput(format!("{}: checkpoint lacks `{name}`", path.display())))
        };
        let step = find(&format!("{OPTIM_PREFIX}step"))?.item() as u64;
        let epoch = find(&format!("{OPTIM_PREFIX}epoch"))?.item() as usize;
        let mut first = Vec::with_capacity(net.params.len());
        let mut second = Vec::with_capacity(net.params.len());
        for (name, t, _) in net.params.iter() {
            for (kind, dst) in [("m", &mut first), ("v", &mut second)] {
                let src = find(&format!("{OPTIM_PREFIX}{kind}/{name}"))?;
                if src.shape() != t.shape() {
                    return Err(RecoatError::InvalidInput(format!("{}: optimizer shape mismatch for `{name}`", path.display())));
                }
                dst.push(src.clone());
            }
        }
        Ok(Self { net, optimizer: OptimizerState { step, first, second }, epoch })
    }
}

/// Loads only the model parameters of a checkpoint.
pub fn load_model(path: &Path, net_cfg: NetConfig) -> Result<RecoatNet> {
    let entries = checkpoint::load(path)?;
    let model: Vec<(String, Tensor)> = entries.into_iter().filter(|(n, _)| !n.starts_with(OPTIM_PREFIX)).collect();
    RecoatNet::from_entries(net_cfg, &model)
}

pub fn checkpoint_name(epochs_done: usize) -> String {
    format!("epoch_{epochs_done:03}.rcat")
}

/// Converts scenes of the configured agent type into model inputs; other types are skipped.
pub fn prepare_dataset(scenes: &[Scene], net_cfg: &NetConfig, raster: &RasterConfig) -> Result<Vec<SceneInputs>> {
    scenes
        .iter()
        .filter(|s| s.target.agent_type == net_cfg.agent_type)
        .map(|s| prepare_inputs(s, net_cfg, raster))
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LogRow>,
    pub checkpoints: Vec<PathBuf>,
}

/// Runs epochs `state.epoch .. cfg.epochs`.
///
/// Parameters and moments are rounded to `f32` at the end of every epoch,
/// which is what checkpoints hold, so resuming from any checkpoint replays
/// the uninterrupted run bit for bit. When `out_dir` is set, a checkpoint
/// and the log so far are written after every epoch.
pub fn train(cfg: &TrainConfig, mut state: TrainState, data: &[SceneInputs], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(RecoatError::EmptyDataset);
    }
    let k = state.net.config.num_modes;
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(io_error(dir))?;
        RunConfig { train: cfg.clone(), net: state.net.config.clone() }.save(dir)?;
    }
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let lr = cfg.learning_rate_at(epoch);
        let order = epoch_order(cfg.seed, epoch, data.len());
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&SceneInputs> = chunk.iter().map(|&i| &data[i]).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2, epoch as u64, b as u64));
            let report = train_step(&mut state.net, &mut state.optimizer, &batch, cfg, lr, &mut rng)?;
            let mut hist = vec![0; k];
            for &w in &report.winners {
                hist[w] += 1;
            }
            log.push(LogRow {
                epoch,
                batch: b,
                traj_loss: report.traj_loss,
                score_loss: report.score_loss,
                total: report.total,
                winner_histogram: hist,
            });
        }
        state.net.params.quantize_f32();
        state.optimizer.quantize_f32();
        state.epoch += 1;
        if let Some(dir) = out_dir {
            let path = dir.join(checkpoint_name(state.epoch));
            state.save(&path)?;
            checkpoints.push(path);
            append_log(dir, &log, epoch)?;
        }
    }
    Ok(TrainOutcome { state, log, checkpoints })
}

/// Rewrites the log file keeping earlier epochs from previous runs.
fn append_log(dir: &Path, rows: &[LogRow], epoch: usize) -> Result<()> {
    let path = dir.join(LOG_FILE);
    let mut text = match std::fs::read_to_string(&path) {
        Ok(old) => old
            .lines()
            .filter(|l| l.split(',').next().and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e < epoch))
            .fold(String::from("epoch,batch,traj_loss,score_loss,total,winner_histogram\n"), |mut acc, l| {
                acc.push_str(l);
                acc.push('\n');
                acc
            }),
        Err(_) => log_csv(&[]),
    };
    let new = log_csv(&rows.iter().filter(|r| r.epoch == epoch).cloned().collect::<Vec<_>>());
    text.push_str(new.split_once('\n').map_or("", |(_, body)| body));
    std::fs::write(&path, text).map_err(io_error(&path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use recoat_tensor::Partition;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(&[1], vec![v]).unwrap(), Partition::Shared).unwrap();
        s
    }

    fn grad(store: &ParamStore, g: f64) -> GradStore {
        let mut gs = GradStore::zeros_like(store);
        gs.get_mut("w").unwrap().data_mut()[0] = g;
        gs
    }

    #[test]
    fn default_learning_rate_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.learning_rate_at(0), 3e-4);
        assert!((cfg.learning_rate_at(1) - 2.7e-4).abs() < 1e-18);
        for e in 0..50 {
            assert_eq!(cfg.learning_rate_at(e), 3e-4 * 0.9f64.powi(e as i32));
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar_store(0.7);
        let mut st = OptimizerState::new(&p);
        let g = grad(&p, 0.0);
        optimizer_step(&mut p, &g, &mut st, 1e-3).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 0.7);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut p = scalar_store(-1.25);
        let mut st = OptimizerState::new(&p);
        let g = grad(&p, 3.0);
        for _ in 0..3 {
            optimizer_step(&mut p, &g, &mut st, 0.0).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data()[0], -1.25);
    }

    #[test]
    fn three_constant_steps_match_unrolled_rule() {
        let (lr, g) = (0.01, 0.5);
        let mut p = scalar_store(1.0);
        let mut st = OptimizerState::new(&p);
        let gs = grad(&p, g);
        for _ in 0..3 {
            optimizer_step(&mut p, &gs, &mut st, lr).unwrap();
        }
        // Hand-unrolled: m_t = (1 - 0.9^t) g, v_t = (1 - 0.999^t) g².
        let mut theta = 1.0;
        for t in 1..=3 {
            let m = (1.0 - 0.9f64.powi(t)) * g;
            let v = (1.0 - 0.999f64.powi(t)) * g * g;
            let m_hat = 0.9 * m / (1.0 - 0.9f64.powi(t + 1)) + 0.1 * g / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            theta -= lr * m_hat / (v_hat.sqrt() + 1e-8);
        }
        assert!((p.get("w").unwrap().data()[0] - theta).abs() < 1e-12);
    }

    #[test]
    fn mismatched_state_rejected() {
        let mut p = scalar_store(1.0);
        let mut st = OptimizerState::new(&ParamStore::new());
        let g = grad(&p, 1.0);
        assert!(optimizer_step(&mut p, &g, &mut st, 0.1).is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(1, 2, 0, 0);
        assert_ne!(a, derive_seed(1, 2, 0, 1));
        assert_ne!(a, derive_seed(1, 2, 1, 0));
        assert_ne!(a, derive_seed(2, 2, 0, 0));
        assert_eq!(a, derive_seed(1, 2, 0, 0));
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        let mut o = epoch_order(5, 3, 100);
        assert_ne!(o, (0..100).collect::<Vec<_>>());
        o.sort();
        assert_eq!(o, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { decay: 1.5, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { clip_norm: Some(-1.0), ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn log_format() {
        let rows = vec![LogRow { epoch: 0, batch: 1, traj_loss: 1.5, score_loss: 0.5, total: 0.8, winner_histogram: vec![2, 0, 1] }];
        assert_eq!(log_csv(&rows), "epoch,batch,traj_loss,score_loss,total,winner_histogram\n0,1,1.5,0.5,0.8,2;0;1\n");
    }
}
