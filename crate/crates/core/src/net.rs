//! The ReCoAt network: trajectory encoders, CNN context encoder, path
//! encoder, distance attention over neighbors, and an ensemble of K
//! trajectory decoders with per-decoder scoring heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recoat_tensor::layers::{self, CnnParams, LstmParams};
use recoat_tensor::{fan_in_uniform, ConvBlock, Graph, Mode, Padding, ParamStore, Partition, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{RecoatError, Result};
use crate::raster::{rasterize, RasterConfig, IMAGE_SIZE};
use crate::scene::{
    build_neighbor_tensor, target_state_tensor, AgentType, NeighborTensor, Point, Polyline, Scene, FUTURE_LEN,
    HISTORY_LEN, MAX_NEIGHBORS, STATE_DIM,
};

/// Distance-attention settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub alpha: f64,
    /// Score given to padded rows.
    pub mask_value: f64,
    /// Distances below this are clamped before dividing.
    pub distance_floor: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            mask_value: -1e9,
            distance_floor: 0.1,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.distance_floor > 0.0) || !self.mask_value.is_finite() {
            return Err(RecoatError::InvalidConfig(format!("attention config {self:?}")));
        }
        Ok(())
    }
}

/// `alpha / max(floor, |p|)` for the first `count` rows, `mask_value` for padding.
pub fn att_scores(positions: &[Point; MAX_NEIGHBORS], count: usize, cfg: &AttentionConfig) -> [f64; MAX_NEIGHBORS] {
    let mut out = [cfg.mask_value; MAX_NEIGHBORS];
    for (s, p) in out.iter_mut().zip(positions).take(count) {
        *s = cfg.alpha / p[0].hypot(p[1]).max(cfg.distance_floor);
    }
    out
}

/// Softmax over all score rows.
pub fn att_weights(scores: &[f64; MAX_NEIGHBORS]) -> [f64; MAX_NEIGHBORS] {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = scores.map(|s| (s - max).exp());
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|w| *w /= total);
    out
}

/// `Σ_i weights[i] · values[i]`.
pub fn att_pool(weights: &[f64], values: &[Vec<f64>]) -> Result<Vec<f64>> {
    if weights.len() != values.len() {
        return Err(RecoatError::InvalidInput(format!(
            "att_pool: {} weights for {} value rows",
            weights.len(),
            values.len()
        )));
    }
    let dim = values.first().map_or(0, Vec::len);
    let mut out = vec![0.0; dim];
    for (w, v) in weights.iter().zip(values) {
        if v.len() != dim {
            return Err(RecoatError::InvalidInput("att_pool: ragged value rows".into()));
        }
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    Ok(out)
}

/// Architecture and hyperparameters of one type-specific model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub agent_type: AgentType,
    pub num_modes: usize,
    pub future_len: usize,
    pub conv1d_kernel: usize,
    pub conv1d_channels: usize,
    pub lstm_hidden: usize,
    pub image_size: usize,
    /// `[kernel, stride, channels]` per strided block; the last block's channels is the pooled feature size.
    pub cnn_blocks: Vec<[usize; 3]>,
    pub context_dim: usize,
    pub path_points: usize,
    pub path_max_lines: usize,
    /// `[kernel, stride, channels]` per 1-D conv over a centerline's points; the last channels is the path feature size.
    pub path_convs: Vec<[usize; 3]>,
    pub score_traj_dim: usize,
    pub score_hidden: usize,
    pub dropout: f64,
    pub attention: AttentionConfig,
    /// Multiplies every metric input (states, centerlines) before it enters the network.
    pub input_scale: f64,
    /// Multiplies the raw decoder outputs to give meters.
    pub output_scale: f64,
}

impl NetConfig {
    pub fn new(agent_type: AgentType) -> Self {
        Self {
            agent_type,
            num_modes: 6,
            future_len: FUTURE_LEN,
            conv1d_kernel: 3,
            conv1d_channels: 64,
            lstm_hidden: 128,
            image_size: IMAGE_SIZE,
            cnn_blocks: vec![[4, 4, 16], [4, 4, 32], [3, 2, 64], [3, 2, 256]],
            context_dim: 128,
            path_points: 50,
            path_max_lines: 3,
            path_convs: vec![[5, 2, 32], [5, 2, 64], [3, 1, 128]],
            score_traj_dim: 64,
            score_hidden: 64,
            dropout: 0.5,
            attention: AttentionConfig::default(),
            input_scale: 0.1,
            output_scale: 10.0,
        }
    }

    /// Path features are only used by vehicle models.
    pub fn uses_paths(&self) -> bool {
        self.agent_type == AgentType::Vehicle
    }

    pub fn fused_dim(&self) -> usize {
        let paths = if self.uses_paths() { self.path_dim() } else { 0 };
        2 * self.lstm_hidden + self.context_dim + paths
    }

    pub fn path_dim(&self) -> usize {
        self.path_convs.last().map_or(0, |c| c[2])
    }

    /// Positions left after the path convolutions, or `None` if a kernel outgrows the sequence.
    pub fn path_positions(&self) -> Option<usize> {
        self.path_convs.iter().try_fold(self.path_points, |t, &[k, s, _]| (t >= k).then(|| (t - k) / s + 1))
    }

    pub fn blocks(&self) -> Vec<ConvBlock> {
        self.cnn_blocks
            .iter()
            .map(|&[kernel, stride, channels]| ConvBlock { kernel, stride, channels })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        let bad = |m: &str| Err(RecoatError::InvalidConfig(m.to_string()));
        if self.num_modes == 0 || self.future_len == 0 {
            return bad("num_modes and future_len must be positive");
        }
        if self.conv1d_kernel % 2 == 0 {
            return bad("conv1d_kernel must be odd");
        }
        if self.cnn_blocks.is_empty() || self.cnn_blocks.iter().any(|b| b.contains(&0)) {
            return bad("cnn_blocks must be non-empty with positive entries");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.path_points < 2 {
            return bad("path_points must be at least 2");
        }
        if self.path_convs.is_empty() || self.path_convs.iter().any(|c| c.contains(&0)) {
            return bad("path_convs must be non-empty with positive entries");
        }
        if self.path_positions().is_none() {
            return bad("path_convs kernels are longer than the resampled centerline");
        }
        Ok(())
    }
}

/// Output of the model for one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    /// `num_modes × future_len` waypoints in the target frame, meters.
    pub trajectories: Vec<Vec<Point>>,
    /// Confidence per mode; non-negative and summing to one.
    pub probs: Vec<f64>,
}

impl PredictionSet {
    pub fn num_modes(&self) -> usize {
        self.trajectories.len()
    }

    pub fn endpoints(&self) -> Vec<Point> {
        self.trajectories.iter().map(|t| *t.last().unwrap_or(&[0.0, 0.0])).collect()
    }

    /// Mode with the highest probability; ties go to the lowest index.
    pub fn top_mode(&self) -> usize {
        let mut best = 0;
        for (j, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = j;
            }
        }
        best
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.trajectories.len();
        if k == 0 || self.probs.len() != k {
            return Err(RecoatError::InvalidInput(format!(
                "prediction has {k} trajectories and {} probabilities",
                self.probs.len()
            )));
        }
        if self.probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (self.probs.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(RecoatError::InvalidInput("probabilities are not a distribution".into()));
        }
        let t = self.trajectories[0].len();
        if self.trajectories.iter().any(|tr| tr.len() != t || tr.iter().any(|p| !p[0].is_finite() || !p[1].is_finite())) {
            return Err(RecoatError::InvalidInput("trajectories are ragged or non-finite".into()));
        }
        Ok(())
    }
}

/// Everything the network consumes for one scene, already in the target frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneInputs {
    pub scenario_id: String,
    /// `(HISTORY_LEN, STATE_DIM)` target history.
    pub target: Vec<f64>,
    pub neighbors: NeighborTensor,
    /// `(image_size, image_size, 3)` raster bytes.
    pub image: Vec<u8>,
    /// Resampled centerlines, each `path_points × 2` flattened, nearest first.
    pub centerlines: Vec<Vec<f64>>,
    /// Target speed at t0, m/s.
    pub speed: f64,
    /// Ground-truth future in the target frame, when known.
    pub gt_future: Vec<Point>,
    /// Other agents' futures in the target frame, for overlap evaluation.
    pub others_future: Vec<Vec<Option<Point>>>,
}

/// Resamples a polyline to `n` points equally spaced by arc length.
pub fn resample_polyline(line: &[Point], n: usize) -> Vec<Point> {
    match line.len() {
        0 => return vec![[0.0, 0.0]; n],
        1 => return vec![line[0]; n],
        _ => {}
    }
    let mut cum = vec![0.0];
    for w in line.windows(2) {
        cum.push(cum.last().unwrap() + (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]));
    }
    let total = *cum.last().unwrap();
    if total == 0.0 || n < 2 {
        return vec![line[0]; n];
    }
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for i in 0..n {
        let s = total * i as f64 / (n - 1) as f64;
        while seg + 2 < cum.len() && cum[seg + 1] < s {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let t = if len > 0.0 { ((s - cum[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
        let (a, b) = (line[seg], line[seg + 1]);
        out.push([a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]);
    }
    out
}

/// The `max_lines` centerlines passing closest to the origin, resampled and flattened.
pub fn select_centerlines(lines: &[Polyline], max_lines: usize, points: usize) -> Vec<Vec<f64>> {
    let mut ranked: Vec<(usize, f64)> = lines
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| (i, l.iter().map(|p| p[0].hypot(p[1])).fold(f64::INFINITY, f64::min)))
        .collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1));
    ranked
        .into_iter()
        .take(max_lines)
        .map(|(i, _)| resample_polyline(&lines[i], points).into_iter().flatten().collect())
        .collect()
}

/// Converts a world-frame scene into network inputs.
pub fn prepare_inputs(scene: &Scene, cfg: &NetConfig, raster: &RasterConfig) -> Result<SceneInputs> {
    let local = scene.to_target_frame()?;
    let image = if cfg.image_size == IMAGE_SIZE {
        rasterize(&local, cfg.agent_type, raster).pixels
    } else {
        return Err(RecoatError::InvalidConfig(format!(
            "rasterized inputs are {IMAGE_SIZE}px but the model expects {}px",
            cfg.image_size
        )));
    };
    let neighbors = build_neighbor_tensor(&local);
    let others_future = local
        .neighbors
        .iter()
        .filter_map(|n| n.future.clone())
        .collect();
    Ok(SceneInputs {
        scenario_id: scene.scenario_id.clone(),
        target: target_state_tensor(&local)?,
        neighbors,
        image,
        centerlines: if cfg.uses_paths() {
            select_centerlines(&local.centerlines, cfg.path_max_lines, cfg.path_points)
        } else {
            Vec::new()
        },
        speed: local.target_speed(),
        gt_future: local.target_future.clone(),
        others_future,
    })
}

/// Graph handles produced by [`RecoatNet::forward`].
pub struct ForwardOutput {
    /// Per mode, `(batch, future_len)` x coordinates in meters.
    pub xs: Vec<Var>,
    /// Per mode, `(batch, future_len)` y coordinates in meters.
    pub ys: Vec<Var>,
    /// `(batch, num_modes)` log-probabilities.
    pub log_probs: Var,
    pub batch: usize,
}

impl ForwardOutput {
    pub fn prediction(&self, g: &Graph, b: usize) -> PredictionSet {
        let t = g.value(self.xs[0]).cols();
        let trajectories = self
            .xs
            .iter()
            .zip(&self.ys)
            .map(|(&x, &y)| {
                let (xv, yv) = (g.value(x).data(), g.value(y).data());
                (0..t).map(|i| [xv[b * t + i], yv[b * t + i]]).collect()
            })
            .collect();
        let k = self.xs.len();
        let probs = g.value(self.log_probs).data()[b * k..(b + 1) * k].iter().map(|l| l.exp()).collect();
        PredictionSet { trajectories, probs }
    }
}

/// Model parameters plus the configuration they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct RecoatNet {
    pub config: NetConfig,
    pub params: ParamStore,
}

fn add(store: &mut ParamStore, name: String, t: Tensor, p: Partition) -> Result<()> {
    store.insert(&name, t, p).map_err(Into::into)
}

fn add_dense(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    out: usize,
    p: Partition,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    add(store, format!("{prefix}.weights"), fan_in_uniform(&[fan_in, out], fan_in, rng), p)?;
    add(store, format!("{prefix}.bias"), Tensor::zeros(&[out]), p)
}

fn add_track_encoder(store: &mut ParamStore, prefix: &str, cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let (k, c, h) = (cfg.conv1d_kernel, cfg.conv1d_channels, cfg.lstm_hidden);
    let p = Partition::Shared;
    add(store, format!("{prefix}.conv.kernel"), fan_in_uniform(&[k, STATE_DIM, c], k * STATE_DIM, rng), p)?;
    add(store, format!("{prefix}.conv.bias"), Tensor::zeros(&[c]), p)?;
    add(store, format!("{prefix}.lstm.w_input"), fan_in_uniform(&[c, 4 * h], c, rng), p)?;
    add(store, format!("{prefix}.lstm.w_hidden"), fan_in_uniform(&[h, 4 * h], h, rng), p)?;
    let mut bias = Tensor::zeros(&[4 * h]);
    bias.data_mut()[h..2 * h].fill(1.0);
    add(store, format!("{prefix}.lstm.bias"), bias, p)
}

struct TrackEncoder {
    conv_kernel: Var,
    conv_bias: Var,
    lstm: LstmParams,
}

impl RecoatNet {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        add_track_encoder(&mut store, "target_enc", &config, &mut rng)?;
        add_track_encoder(&mut store, "neighbor_enc", &config, &mut rng)?;
        let mut c_in = 3;
        for (i, b) in config.blocks().iter().enumerate() {
            let fan_in = b.kernel * b.kernel * c_in;
            add(
                &mut store,
                format!("cnn.block{i}.kernel"),
                fan_in_uniform(&[b.kernel, b.kernel, c_in, b.channels], fan_in, &mut rng),
                Partition::Shared,
            )?;
            add(&mut store, format!("cnn.block{i}.bias"), Tensor::zeros(&[b.channels]), Partition::Shared)?;
            c_in = b.channels;
        }
        add_dense(&mut store, "cnn.head", c_in, config.context_dim, Partition::Shared, &mut rng)?;
        if config.uses_paths() {
            let mut c_in = 2;
            for (i, &[k, _, c]) in config.path_convs.iter().enumerate() {
                let kernel = fan_in_uniform(&[1, k, c_in, c], k * c_in, &mut rng);
                add(&mut store, format!("path_enc.conv{i}.kernel"), kernel, Partition::Shared)?;
                add(&mut store, format!("path_enc.conv{i}.bias"), Tensor::zeros(&[c]), Partition::Shared)?;
                c_in = c;
            }
        }
        let fused = config.fused_dim();
        let t = config.future_len;
        for j in 0..config.num_modes {
            let reg = Partition::Regression(j);
            add_dense(&mut store, &format!("decoder{j}.x"), fused, t, reg, &mut rng)?;
            add_dense(&mut store, &format!("decoder{j}.y"), fused, t, reg, &mut rng)?;
            let sc = Partition::Scoring(j);
            add_dense(&mut store, &format!("decoder{j}.score.traj"), 2 * t, config.score_traj_dim, sc, &mut rng)?;
            add_dense(
                &mut store,
                &format!("decoder{j}.score.hidden"),
                fused + config.score_traj_dim,
                config.score_hidden,
                sc,
                &mut rng,
            )?;
            add_dense(&mut store, &format!("decoder{j}.score.out"), config.score_hidden, 1, sc, &mut rng)?;
        }
        store.validate_decoders(config.num_modes)?;
        Ok(Self { config, params: store })
    }

    /// Rebuilds the parameter layout for `config` and loads values from `(name, tensor)` pairs.
    pub fn from_entries(config: NetConfig, entries: &[(String, Tensor)]) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        net.params.load_from(entries)?;
        Ok(net)
    }

    fn bind_track_encoder(&self, g: &mut Graph, prefix: &str) -> Result<TrackEncoder> {
        let p = &self.params;
        Ok(TrackEncoder {
            conv_kernel: g.param(p, &format!("{prefix}.conv.kernel"))?,
            conv_bias: g.param(p, &format!("{prefix}.conv.bias"))?,
            lstm: LstmParams {
                w_input: g.param(p, &format!("{prefix}.lstm.w_input"))?,
                w_hidden: g.param(p, &format!("{prefix}.lstm.w_hidden"))?,
                bias: g.param(p, &format!("{prefix}.lstm.bias"))?,
            },
        })
    }

    /// conv1d → LSTM → last hidden state, on `(rows, HISTORY_LEN, STATE_DIM)` states already scaled.
    fn encode_tracks(&self, g: &mut Graph, enc: &TrackEncoder, states: Var) -> Result<Var> {
        let conv = layers::conv1d(g, states, enc.conv_kernel, enc.conv_bias, Padding::Same)?;
        Ok(layers::lstm_sequence(g, conv, &enc.lstm)?)
    }

    fn dense(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let w = g.param(&self.params, &format!("{prefix}.weights"))?;
        let b = g.param(&self.params, &format!("{prefix}.bias"))?;
        Ok(layers::dense(g, x, w, b)?)
    }

    /// Dense + ELU + dropout, the pattern of every hidden dense layer.
    fn hidden_dense(&self, g: &mut Graph, x: Var, prefix: &str, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Var> {
        let d = self.dense(g, x, prefix)?;
        let a = g.elu(d)?;
        Ok(layers::dropout(g, a, self.config.dropout, mode, rng)?)
    }

    fn check_inputs(&self, batch: &[&SceneInputs]) -> Result<()> {
        let img = self.config.image_size * self.config.image_size * 3;
        for s in batch {
            if s.target.len() != HISTORY_LEN * STATE_DIM
                || s.neighbors.data.len() != MAX_NEIGHBORS * HISTORY_LEN * STATE_DIM
                || s.neighbors.count > MAX_NEIGHBORS
                || s.image.len() != img
                || s.centerlines.iter().any(|c| c.len() != 2 * self.config.path_points)
            {
                return Err(RecoatError::InvalidInput(format!("{}: input shapes do not match the model", s.scenario_id)));
            }
        }
        Ok(())
    }

    /// Track encoding of a single `(HISTORY_LEN, STATE_DIM)` target-frame history with the target encoder.
    pub fn encode_track(&self, states: &[f64]) -> Result<Vec<f64>> {
        if states.len() != HISTORY_LEN * STATE_DIM {
            return Err(RecoatError::InvalidInput(format!("encode_track expects {} values", HISTORY_LEN * STATE_DIM)));
        }
        let mut g = Graph::new();
        let enc = self.bind_track_encoder(&mut g, "target_enc")?;
        let scaled: Vec<f64> = states.iter().map(|v| v * self.config.input_scale).collect();
        let x = g.constant(Tensor::new(&[1, HISTORY_LEN, STATE_DIM], scaled)?)?;
        let h = self.encode_tracks(&mut g, &enc, x)?;
        Ok(g.value(h).data().to_vec())
    }

    /// Path feature of one example's centerlines (each `path_points × 2` flattened); zero when there are none.
    pub fn encode_paths(&self, centerlines: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let v = self.path_feature(&mut g, &[centerlines])?;
        Ok(g.value(v).data().to_vec())
    }

    fn path_feature(&self, g: &mut Graph, lines: &[&[Vec<f64>]]) -> Result<Var> {
        let cfg = &self.config;
        let flat = 2 * cfg.path_points;
        let rows: usize = lines.iter().map(|l| l.len()).sum();
        if rows == 0 {
            return Ok(g.constant(Tensor::zeros(&[lines.len(), cfg.path_dim()]))?);
        }
        let mut data = Vec::with_capacity(rows * flat);
        let mut segments = Vec::with_capacity(lines.len());
        for example in lines {
            let start = data.len() / flat;
            for l in example.iter() {
                if l.len() != flat {
                    return Err(RecoatError::InvalidInput(format!("centerline has {} values, expected {flat}", l.len())));
                }
                data.extend(l.iter().map(|v| v * cfg.input_scale));
            }
            segments.push((start, data.len() / flat));
        }
        // Each centerline is a one-row NHWC image of `path_points` two-channel pixels.
        let mut h = g.constant(Tensor::new(&[rows, 1, cfg.path_points, 2], data)?)?;
        for (i, &[_, stride, _]) in cfg.path_convs.iter().enumerate() {
            let kernel = g.param(&self.params, &format!("path_enc.conv{i}.kernel"))?;
            let bias = g.param(&self.params, &format!("path_enc.conv{i}.bias"))?;
            h = g.conv2d(h, kernel, bias, stride, 0, 0)?;
            h = g.elu(h)?;
        }
        // Max over every position of every line of an example.
        let positions = g.value(h).shape()[2];
        let h = g.reshape(h, &[rows * positions, cfg.path_dim()])?;
        let segments: Vec<(usize, usize)> = segments.iter().map(|&(a, b)| (a * positions, b * positions)).collect();
        Ok(g.segment_max(h, &segments)?)
    }

    /// Batched forward pass. `rng` drives dropout in [`Mode::Train`].
    pub fn forward(&self, g: &mut Graph, batch: &[&SceneInputs], mode: Mode, rng: &mut ChaCha8Rng) -> Result<ForwardOutput> {
        if batch.is_empty() {
            return Err(RecoatError::EmptyDataset);
        }
        self.check_inputs(batch)?;
        let cfg = &self.config;
        let n = batch.len();
        let hidden = cfg.lstm_hidden;
        let row = HISTORY_LEN * STATE_DIM;

        // Target history.
        let target_data: Vec<f64> = batch.iter().flat_map(|s| s.target.iter().map(|v| v * cfg.input_scale)).collect();
        let target_in = g.constant(Tensor::new(&[n, HISTORY_LEN, STATE_DIM], target_data)?)?;
        let target_enc = self.bind_track_encoder(g, "target_enc")?;
        let target_feat = self.encode_tracks(g, &target_enc, target_in)?;

        // Neighbors: only real rows are encoded; padded rows carry zero attention weight.
        let total_rows: usize = batch.iter().map(|s| s.neighbors.count).sum();
        let interaction = if total_rows == 0 {
            g.constant(Tensor::zeros(&[n, hidden]))?
        } else {
            let mut data = Vec::with_capacity(total_rows * row);
            let mut weights = vec![0.0; n * total_rows];
            let mut offset = 0;
            for (b, s) in batch.iter().enumerate() {
                let nt = &s.neighbors;
                for i in 0..nt.count {
                    data.extend(nt.row(i).iter().map(|v| v * cfg.input_scale));
                }
                if nt.count > 0 {
                    let w = att_weights(&att_scores(&nt.padded_positions(), nt.count, &cfg.attention));
                    weights[b * total_rows + offset..b * total_rows + offset + nt.count].copy_from_slice(&w[..nt.count]);
                }
                offset += nt.count;
            }
            let nin = g.constant(Tensor::new(&[total_rows, HISTORY_LEN, STATE_DIM], data)?)?;
            let enc = self.bind_track_encoder(g, "neighbor_enc")?;
            let values = self.encode_tracks(g, &enc, nin)?;
            let attn = g.constant(Tensor::new(&[n, total_rows], weights)?)?;
            g.matmul(attn, values)?
        };

        // Raster context.
        let size = cfg.image_size;
        let pixels: Vec<f64> = batch.iter().flat_map(|s| s.image.iter().map(|&p| p as f64 / 255.0)).collect();
        let image = g.constant(Tensor::new(&[n, size, size, 3], pixels)?)?;
        let mut blocks = Vec::new();
        for (i, b) in cfg.blocks().into_iter().enumerate() {
            blocks.push((
                b,
                g.param(&self.params, &format!("cnn.block{i}.kernel"))?,
                g.param(&self.params, &format!("cnn.block{i}.bias"))?,
            ));
        }
        let cnn = CnnParams {
            blocks,
            head_weights: g.param(&self.params, "cnn.head.weights")?,
            head_bias: g.param(&self.params, "cnn.head.bias")?,
        };
        let context = layers::cnn_encode(g, image, &cnn)?;
        let context = layers::dropout(g, context, cfg.dropout, mode, rng)?;

        let mut parts = vec![target_feat, context, interaction];
        if cfg.uses_paths() {
            let lines: Vec<&[Vec<f64>]> = batch.iter().map(|s| s.centerlines.as_slice()).collect();
            parts.push(self.path_feature(g, &lines)?);
        }
        let fused = g.concat_cols(&parts)?;

        let mut xs = Vec::with_capacity(cfg.num_modes);
        let mut ys = Vec::with_capacity(cfg.num_modes);
        let mut scores = Vec::with_capacity(cfg.num_modes);
        for j in 0..cfg.num_modes {
            let x = self.dense(g, fused, &format!("decoder{j}.x"))?;
            let x = g.scale(x, cfg.output_scale)?;
            let y = self.dense(g, fused, &format!("decoder{j}.y"))?;
            let y = g.scale(y, cfg.output_scale)?;
            // The scoring branch sees the trajectory but never trains it.
            let traj = g.concat_cols(&[x, y])?;
            let traj = g.detach(traj)?;
            let traj = g.scale(traj, cfg.input_scale)?;
            let traj_feat = self.hidden_dense(g, traj, &format!("decoder{j}.score.traj"), mode, rng)?;
            let joint = g.concat_cols(&[fused, traj_feat])?;
            let h = self.hidden_dense(g, joint, &format!("decoder{j}.score.hidden"), mode, rng)?;
            scores.push(self.dense(g, h, &format!("decoder{j}.score.out"))?);
            xs.push(x);
            ys.push(y);
        }
        let stacked = g.concat_cols(&scores)?;
        let log_probs = g.log_softmax(stacked)?;
        Ok(ForwardOutput { xs, ys, log_probs, batch: n })
    }

    /// Inference-mode predictions for a batch of scenes.
    pub fn predict_batch(&self, batch: &[&SceneInputs]) -> Result<Vec<PredictionSet>> {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut g, batch, Mode::Infer, &mut rng)?;
        Ok((0..batch.len()).map(|b| out.prediction(&g, b)).collect())
    }

    pub fn predict(&self, inputs: &SceneInputs) -> Result<PredictionSet> {
        Ok(self.predict_batch(&[inputs])?.remove(0))
    }
}

/// Random tensor helper shared by tests and benches of the network.
#[doc(hidden)]
pub fn random_inputs(cfg: &NetConfig, neighbors: usize, lines: usize, seed: u64) -> SceneInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |scale: f64| rng.gen_range(-scale..scale);
    let target: Vec<f64> = (0..HISTORY_LEN * STATE_DIM).map(|_| u(5.0)).collect();
    let mut data = vec![0.0; MAX_NEIGHBORS * HISTORY_LEN * STATE_DIM];
    let count = neighbors.min(MAX_NEIGHBORS);
    let mut positions = Vec::new();
    for i in 0..count {
        for v in &mut data[i * HISTORY_LEN * STATE_DIM..(i + 1) * HISTORY_LEN * STATE_DIM] {
            *v = u(10.0);
        }
        let p = [data[(i * HISTORY_LEN + HISTORY_LEN - 1) * STATE_DIM], data[(i * HISTORY_LEN + HISTORY_LEN - 1) * STATE_DIM + 1]];
        positions.push(p);
    }
    let distances = positions.iter().map(|p| p[0].hypot(p[1])).collect();
    let image = (0..cfg.image_size * cfg.image_size * 3).map(|_| (u(1.0).abs() * 255.0) as u8).collect();
    let centerlines = (0..lines).map(|_| (0..2 * cfg.path_points).map(|_| u(20.0)).collect()).collect();
    SceneInputs {
        scenario_id: format!("random-{seed}"),
        target,
        neighbors: NeighborTensor {
            data,
            count,
            positions,
            distances,
            source: (0..count).collect(),
        },
        image,
        centerlines,
        speed: u(10.0).abs(),
        gt_future: (0..cfg.future_len).map(|_| [u(30.0), u(30.0)]).collect(),
        others_future: Vec::new(),
    }
}
