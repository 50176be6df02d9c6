//! Return-conditioned transformer policy, the goal-conditioned value network
//! that sets its initial return, training loops and transfer initialization.

use crate::collect::{quantize, Dataset, EpisodeSpec, Label, Policy, Rollout, StepObs, Trajectory};
use crate::error::{Error, Result};
use crate::geometry::{Pose2, Vec2};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::optim::{AdamW, AdamWConfig};
use crate::nn::params::normal;
use crate::nn::{Float, ParamStore, Tape, Tensor, Var};
use crate::rng::{derive_seed, stream};
use crate::robot::{Robot, RobotModel};
use crate::world::{GRID, OCC_LEN};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: [usize; 2],
    pub kernel: usize,
    pub stride: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            channels: [16, 32],
            kernel: 3,
            stride: 2,
        }
    }
}

impl ConvSpec {
    fn side(&self, input: usize) -> usize {
        (input - self.kernel) / self.stride + 1
    }

    /// Flattened feature size after both layers.
    pub fn flat_dim(&self) -> usize {
        let s = self.side(self.side(GRID));
        self.channels[1] * s * s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtConfig {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub context_k: usize,
    pub eval_context_k: usize,
    pub dropout: f64,
    pub proprio_dim: usize,
    pub action_dim: usize,
    pub goal_dim: usize,
    pub conv: ConvSpec,
    /// Returns are divided by this before embedding.
    pub rtg_scale: f64,
    /// Per-dimension action normalization.
    pub action_scale: Vec<f64>,
    /// False trains and runs without return tokens.
    pub use_returns: bool,
}

impl CtConfig {
    /// Small default: 2 layers, 2 heads, width 64, context 5.
    pub fn desk(robot: &Robot) -> Self {
        Self {
            layers: 2,
            heads: 2,
            embed_dim: 64,
            context_k: 5,
            eval_context_k: 5,
            dropout: 0.1,
            proprio_dim: robot.proprio_dim(),
            action_dim: robot.action_dim(),
            goal_dim: 2,
            conv: ConvSpec::default(),
            rtg_scale: 100.0,
            action_scale: action_scale(robot),
            use_returns: true,
        }
    }

    /// Turtlebot column of the reference hyperparameters.
    pub fn turtlebot(robot: &Robot) -> Self {
        Self {
            layers: 4,
            heads: 4,
            embed_dim: 128,
            ..Self::desk(robot)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.context_k == 0 || self.eval_context_k == 0 {
            return bad("context length must be at least 1".into());
        }
        if self.action_scale.len() != self.action_dim || self.action_scale.iter().any(|&s| s <= 0.0) {
            return bad("action_scale must have action_dim positive entries".into());
        }
        if !(0.0..1.0).contains(&self.dropout) || self.rtg_scale <= 0.0 {
            return bad("dropout must be in [0, 1) and rtg_scale positive".into());
        }
        Ok(())
    }

    pub fn max_context(&self) -> usize {
        self.context_k.max(self.eval_context_k)
    }
}

pub fn action_scale(robot: &Robot) -> Vec<f64> {
    match robot.model {
        RobotModel::DiffDrive(p) => vec![p.v_max, p.w_max],
        RobotModel::Point(p) => vec![p.v_max, p.v_max],
    }
}

/// Dense inputs for `b` windows of `t` steps each, padded at the end.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub b: usize,
    pub t: usize,
    pub rtg: Vec<f64>,
    pub obs: Vec<f32>,
    pub proprio: Vec<f64>,
    pub goal: Vec<f64>,
    pub action: Vec<f64>,
    /// False on padding steps.
    pub real: Vec<bool>,
}

impl Batch {
    pub fn new(b: usize, t: usize, proprio_dim: usize, action_dim: usize) -> Self {
        let n = b * t;
        Self {
            b,
            t,
            rtg: vec![0.0; n],
            obs: vec![0.0; n * OCC_LEN],
            proprio: vec![0.0; n * proprio_dim],
            goal: vec![0.0; n * 2],
            action: vec![0.0; n * action_dim],
            real: vec![false; n],
        }
    }

    /// Fill row `i` with steps `start..=end` of `traj`.
    pub fn set_window(&mut self, i: usize, traj: &Trajectory, start: usize, end: usize) -> Result<()> {
        let (p, a) = (self.proprio.len() / (self.b * self.t), self.action.len() / (self.b * self.t));
        for (k, tr) in traj.transitions[start..=end].iter().enumerate() {
            let row = i * self.t + k;
            self.rtg[row] = tr.rtg;
            tr.decode_obs(&mut self.obs[row * OCC_LEN..(row + 1) * OCC_LEN])?;
            if tr.proprio.len() != p || tr.action.len() != a {
                return Err(Error::Format("transition dimensions do not match the model".into()));
            }
            self.proprio[row * p..(row + 1) * p].copy_from_slice(&tr.proprio);
            self.goal[row * 2..row * 2 + 2].copy_from_slice(&tr.goal);
            self.action[row * a..(row + 1) * a].copy_from_slice(&tr.action);
            self.real[row] = true;
        }
        Ok(())
    }

    fn real_rows(&self) -> Vec<usize> {
        (0..self.real.len()).filter(|&i| self.real[i]).collect()
    }
}

/// Rolling context used at inference time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Window {
    pub rtg: VecDeque<f64>,
    pub obs: VecDeque<Vec<f32>>,
    pub proprio: VecDeque<Vec<f64>>,
    pub goal: VecDeque<[f64; 2]>,
    /// Actions taken; the slot for the current step is zero until recorded.
    pub action: VecDeque<Vec<f64>>,
}

impl Window {
    pub fn len(&self) -> usize {
        self.rtg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rtg.is_empty()
    }

    pub fn push(&mut self, rtg: f64, obs: Vec<f32>, proprio: Vec<f64>, goal: [f64; 2], action_dim: usize, k: usize) {
        self.rtg.push_back(rtg);
        self.obs.push_back(obs);
        self.proprio.push_back(proprio);
        self.goal.push_back(goal);
        self.action.push_back(vec![0.0; action_dim]);
        while self.len() > k {
            self.rtg.pop_front();
            self.obs.pop_front();
            self.proprio.pop_front();
            self.goal.pop_front();
            self.action.pop_front();
        }
    }

    pub fn set_last_action(&mut self, a: &[f64]) {
        if let Some(last) = self.action.back_mut() {
            last.copy_from_slice(a);
        }
    }

    fn to_batch(&self, proprio_dim: usize, action_dim: usize) -> Batch {
        let t = self.len();
        let mut b = Batch::new(1, t, proprio_dim, action_dim);
        for k in 0..t {
            b.rtg[k] = self.rtg[k];
            b.obs[k * OCC_LEN..(k + 1) * OCC_LEN].copy_from_slice(&self.obs[k]);
            b.proprio[k * proprio_dim..(k + 1) * proprio_dim].copy_from_slice(&self.proprio[k]);
            b.goal[k * 2..k * 2 + 2].copy_from_slice(&self.goal[k]);
            b.action[k * action_dim..(k + 1) * action_dim].copy_from_slice(&self.action[k]);
            b.real[k] = true;
        }
        b
    }
}

fn linear_params<T: Float, R: Rng>(ps: &mut ParamStore<T>, rng: &mut R, name: &str, i: usize, o: usize, std: f64) {
    ps.insert(format!("{name}.w"), normal(rng, vec![i, o], std), true);
    ps.insert(format!("{name}.b"), Tensor::zeros(vec![o]), false);
}

fn ln_params<T: Float>(ps: &mut ParamStore<T>, name: &str, d: usize) {
    ps.insert(format!("{name}.g"), Tensor::full(vec![d], T::one()), false);
    ps.insert(format!("{name}.b"), Tensor::zeros(vec![d]), false);
}

fn conv_params<T: Float, R: Rng>(ps: &mut ParamStore<T>, rng: &mut R, prefix: &str, spec: &ConvSpec) {
    let [c1, c2] = spec.channels;
    let k = spec.kernel;
    let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
    ps.insert(format!("{prefix}conv1.w"), normal(rng, vec![c1, 2, k, k], he(2 * k * k)), true);
    ps.insert(format!("{prefix}conv1.b"), Tensor::zeros(vec![c1]), false);
    ps.insert(format!("{prefix}conv2.w"), normal(rng, vec![c2, c1, k, k], he(c1 * k * k)), true);
    ps.insert(format!("{prefix}conv2.b"), Tensor::zeros(vec![c2]), false);
}

const INIT_STD: f64 = 0.02;

/// Parameters for a freshly initialized transformer.
pub fn init_ct_params<T: Float>(cfg: &CtConfig, seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new();
    let d = cfg.embed_dim;
    linear_params(&mut ps, &mut rng, "rtg", 1, d, INIT_STD);
    conv_params(&mut ps, &mut rng, "", &cfg.conv);
    linear_params(&mut ps, &mut rng, "conv.proj", cfg.conv.flat_dim(), d, INIT_STD);
    linear_params(&mut ps, &mut rng, "proprio", cfg.proprio_dim, d, INIT_STD);
    linear_params(&mut ps, &mut rng, "goal", cfg.goal_dim, d, INIT_STD);
    linear_params(&mut ps, &mut rng, "state", 3 * d, d, INIT_STD);
    linear_params(&mut ps, &mut rng, "action", cfg.action_dim, d, INIT_STD);
    ps.insert("pos", normal(&mut rng, vec![cfg.max_context(), d], INIT_STD), false);
    ln_params(&mut ps, "ln_embed", d);
    for l in 0..cfg.layers {
        ln_params(&mut ps, &format!("h{l}.ln1"), d);
        linear_params(&mut ps, &mut rng, &format!("h{l}.attn.qkv"), d, 3 * d, INIT_STD);
        linear_params(&mut ps, &mut rng, &format!("h{l}.attn.proj"), d, d, INIT_STD);
        ln_params(&mut ps, &format!("h{l}.ln2"), d);
        linear_params(&mut ps, &mut rng, &format!("h{l}.mlp.fc"), d, 4 * d, INIT_STD);
        linear_params(&mut ps, &mut rng, &format!("h{l}.mlp.proj"), 4 * d, d, INIT_STD);
    }
    ln_params(&mut ps, "ln_f", d);
    linear_params(&mut ps, &mut rng, "head", d, cfg.action_dim, INIT_STD * 0.1);
    ps
}

fn lin<T: Float>(tape: &mut Tape<'_, T>, x: Var, name: &str) -> Result<Var> {
    let w = tape.param(&format!("{name}.w"));
    let b = tape.param(&format!("{name}.b"));
    tape.linear(x, w, Some(b))
}

fn ln<T: Float>(tape: &mut Tape<'_, T>, x: Var, name: &str) -> Result<Var> {
    let g = tape.param(&format!("{name}.g"));
    let b = tape.param(&format!("{name}.b"));
    tape.layernorm(x, g, b)
}

fn conv_encoder<T: Float>(tape: &mut Tape<'_, T>, spec: &ConvSpec, prefix: &str, obs: &[f32], n: usize) -> Result<Var> {
    let x = tape.constant(Tensor::new(vec![n, 2, GRID, GRID], obs.iter().map(|&v| T::of(f64::from(v))).collect()));
    let mut h = x;
    for layer in ["conv1", "conv2"] {
        let w = tape.param(&format!("{prefix}{layer}.w"));
        let b = tape.param(&format!("{prefix}{layer}.b"));
        h = tape.conv2d(h, w, b, spec.stride, 0)?;
        h = tape.relu(h);
    }
    tape.reshape(h, vec![n, spec.flat_dim()])
}

fn constant_rows<T: Float>(tape: &mut Tape<'_, T>, data: &[f64], rows: usize, scale: impl Fn(usize) -> f64) -> Var {
    let cols = data.len().checked_div(rows).unwrap_or(0);
    let v = data.iter().enumerate().map(|(i, &x)| T::of(x / scale(i % cols.max(1)))).collect();
    tape.constant(Tensor::new(vec![rows, cols], v))
}

/// Transformer forward pass; returns normalized action predictions for every
/// step, shape `[b * t, action_dim]`.
pub fn ct_forward<T: Float>(cfg: &CtConfig, tape: &mut Tape<'_, T>, batch: &Batch) -> Result<Var> {
    let (b, t, d) = (batch.b, batch.t, cfg.embed_dim);
    let n = b * t;
    if t > cfg.max_context() {
        return Err(Error::Shape {
            op: "ct window",
            lhs: vec![t],
            rhs: vec![cfg.max_context()],
        });
    }
    let rtg: Vec<f64> = if cfg.use_returns {
        batch.rtg.clone()
    } else {
        vec![0.0; n]
    };
    let rtg_in = constant_rows(tape, &rtg, n, |_| cfg.rtg_scale);
    let rtg_e = lin(tape, rtg_in, "rtg")?;
    let feat = conv_encoder(tape, &cfg.conv, "", &batch.obs, n)?;
    let obs_e = lin(tape, feat, "conv.proj")?;
    let pr_in = {
        let v = batch.proprio.iter().map(|&x| T::of(x)).collect();
        tape.constant(Tensor::new(vec![n, cfg.proprio_dim], v))
    };
    let pr_e = lin(tape, pr_in, "proprio")?;
    let g_in = constant_rows(tape, &batch.goal, n, |_| 1.0);
    let g_e = lin(tape, g_in, "goal")?;
    let s_cat = tape.concat_cols(&[obs_e, pr_e, g_e])?;
    let s_e = lin(tape, s_cat, "state")?;
    let a_in = constant_rows(tape, &batch.action, n, |j| cfg.action_scale[j]);
    let a_e = lin(tape, a_in, "action")?;
    let tokens = tape.concat_cols(&[rtg_e, s_e, a_e])?;
    let tokens = tape.reshape(tokens, vec![3 * n, d])?;
    let pos_idx: Vec<usize> = (0..b).flat_map(|_| (0..t).flat_map(|k| [k, k, k])).collect();
    let table = tape.param("pos");
    let pos = tape.embed(table, &pos_idx)?;
    let mut x = tape.add(tokens, pos)?;
    x = ln(tape, x, "ln_embed")?;
    x = tape.dropout(x, cfg.dropout);
    for l in 0..cfg.layers {
        let h = ln(tape, x, &format!("h{l}.ln1"))?;
        let qkv = lin(tape, h, &format!("h{l}.attn.qkv"))?;
        let att = tape.causal_attention(qkv, b, 3 * t, cfg.heads)?;
        let att = lin(tape, att, &format!("h{l}.attn.proj"))?;
        let att = tape.dropout(att, cfg.dropout);
        x = tape.add(x, att)?;
        let h = ln(tape, x, &format!("h{l}.ln2"))?;
        let h = lin(tape, h, &format!("h{l}.mlp.fc"))?;
        let h = tape.relu(h);
        let h = lin(tape, h, &format!("h{l}.mlp.proj"))?;
        let h = tape.dropout(h, cfg.dropout);
        x = tape.add(x, h)?;
    }
    x = ln(tape, x, "ln_f")?;
    let state_rows: Vec<usize> = (0..n).map(|i| 3 * i + 1).collect();
    let s = tape.gather_rows(x, &state_rows)?;
    lin(tape, s, "head")
}

/// Mean squared normalized-action error over the real steps of a batch.
pub fn ct_loss<T: Float>(cfg: &CtConfig, tape: &mut Tape<'_, T>, batch: &Batch) -> Result<Var> {
    let pred = ct_forward(cfg, tape, batch)?;
    let rows = batch.real_rows();
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let a = cfg.action_dim;
    let target: Vec<T> = rows
        .iter()
        .flat_map(|&r| (0..a).map(move |j| (r, j)))
        .map(|(r, j)| T::of(batch.action[r * a + j] / cfg.action_scale[j]))
        .collect();
    let sel = tape.gather_rows(pred, &rows)?;
    tape.mse(sel, &Tensor::new(vec![rows.len(), a], target))
}

/// Loss value and parameter gradients (written onto `params`).
pub fn ct_loss_grad<T: Float>(cfg: &CtConfig, params: &mut ParamStore<T>, batch: &Batch, dropout_seed: Option<u64>) -> Result<f64> {
    let (loss, grads) = {
        let mut tape = Tape::new(&*params);
        if let Some(s) = dropout_seed {
            tape.train_mode(s);
        }
        let l = ct_loss(cfg, &mut tape, batch)?;
        (tape.value(l).data[0].f64(), tape.backward(l)?)
    };
    grads.write_to(params);
    Ok(loss)
}

/// Loss value and the sign pattern of every ReLU input, without gradients.
pub fn ct_loss_probe<T: Float>(
    cfg: &CtConfig,
    params: &ParamStore<T>,
    batch: &Batch,
    dropout_seed: Option<u64>,
) -> Result<(f64, Vec<bool>)> {
    let mut tape = Tape::new(params);
    if let Some(s) = dropout_seed {
        tape.train_mode(s);
    }
    let l = ct_loss(cfg, &mut tape, batch)?;
    Ok((tape.value(l).data[0].f64(), tape.relu_pattern()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlTransformer {
    pub config: CtConfig,
    pub params: ParamStore<f32>,
}

impl ControlTransformer {
    pub fn new(config: CtConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_ct_params(&config, seed);
        Ok(Self { config, params })
    }

    /// Action for the last step of `window`, in robot units.
    pub fn predict_action(&self, window: &Window) -> Result<Vec<f64>> {
        if window.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let batch = window.to_batch(self.config.proprio_dim, self.config.action_dim);
        let mut tape = Tape::new(&self.params);
        let pred = ct_forward(&self.config, &mut tape, &batch)?;
        let a = self.config.action_dim;
        let row = &tape.value(pred).data[(batch.t - 1) * a..batch.t * a];
        Ok(row
            .iter()
            .zip(&self.config.action_scale)
            .map(|(&v, &s)| f64::from(v) * s)
            .collect())
    }

    pub fn checkpoint(&self, optimizer: Option<AdamW<f32>>, extra: serde_json::Value) -> Checkpoint {
        let config = serde_json::json!({
            "kind": "ct",
            "model": self.config,
            "run": extra,
        });
        Checkpoint::new(config, self.params.clone(), optimizer)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.config.get("kind").and_then(|k| k.as_str()) != Some("ct") {
            return Err(Error::Checkpoint("not a transformer checkpoint".into()));
        }
        let config: CtConfig = serde_json::from_value(ck.config["model"].clone())?;
        config.validate()?;
        let fresh: ParamStore<f32> = init_ct_params(&config, 0);
        check_layout(&fresh, &ck.params)?;
        Ok(Self {
            config,
            params: ck.params.clone(),
        })
    }
}

fn check_layout(expected: &ParamStore<f32>, got: &ParamStore<f32>) -> Result<()> {
    if expected.names() != got.names() {
        return Err(Error::Checkpoint("parameter names do not match the configured model".into()));
    }
    for i in 0..expected.len() {
        if expected.tensor(i).shape != got.tensor(i).shape {
            return Err(Error::Checkpoint(format!(
                "parameter {} has shape {:?}, expected {:?}",
                expected.name(i),
                got.tensor(i).shape,
                expected.tensor(i).shape
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub updates: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup: u64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Small default sized for a single CPU core.
    pub fn desk() -> Self {
        Self {
            updates: 3_000,
            batch_size: 64,
            lr: 3e-4,
            weight_decay: 1e-4,
            warmup: 500,
            grad_clip: Some(1.0),
            seed: 0,
        }
    }

    /// Turtlebot column of the reference hyperparameters.
    pub fn turtlebot() -> Self {
        Self {
            updates: 15_000,
            batch_size: 128,
            lr: 1e-4,
            weight_decay: 1e-4,
            warmup: 10_000,
            grad_clip: Some(1.0),
            seed: 0,
        }
    }

    pub fn optimizer(&self) -> AdamW<f32> {
        let mut c = AdamWConfig::new(self.lr, self.weight_decay, self.warmup);
        c.grad_clip = self.grad_clip;
        AdamW::new(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.lr <= 0.0 {
            return Err(Error::Config("train: batch_size and lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub update: u64,
    pub loss: f64,
    pub lr: f64,
}

pub fn loss_curve_csv(curve: &[LossPoint]) -> String {
    let mut s = String::from("update,loss,lr\n");
    for p in curve {
        s.push_str(&format!("{},{},{}\n", p.update, p.loss, p.lr));
    }
    s
}

/// Every (trajectory, step) pair, for uniform window sampling.
fn step_index(data: &Dataset) -> Vec<(usize, usize)> {
    data.trajectories
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |k| (i, k)))
        .collect()
}

/// Batch of windows ending at uniformly sampled steps.
pub fn sample_batch<R: Rng>(
    data: &Dataset,
    steps: &[(usize, usize)],
    cfg: &CtConfig,
    batch_size: usize,
    rng: &mut R,
) -> Result<Batch> {
    let picks: Vec<(usize, usize)> = (0..batch_size).map(|_| steps[rng.gen_range(0..steps.len())]).collect();
    let t = picks.iter().map(|&(_, e)| (e + 1).min(cfg.context_k)).max().unwrap_or(1);
    let mut batch = Batch::new(batch_size, t, cfg.proprio_dim, cfg.action_dim);
    for (i, &(tr, end)) in picks.iter().enumerate() {
        let start = (end + 1).saturating_sub(cfg.context_k);
        batch.set_window(i, &data.trajectories[tr], start, end)?;
    }
    Ok(batch)
}

/// Minimize action MSE over sampled windows. Continues from `optimizer` when
/// given, keeping its step count and warmup position.
pub fn train_ct(
    model: &mut ControlTransformer,
    data: &Dataset,
    cfg: &TrainConfig,
    optimizer: Option<AdamW<f32>>,
) -> Result<(Vec<LossPoint>, AdamW<f32>)> {
    cfg.validate()?;
    let steps = step_index(data);
    if steps.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut opt = optimizer.unwrap_or_else(|| cfg.optimizer());
    let mut curve = Vec::with_capacity(cfg.updates);
    for _ in 0..cfg.updates {
        let u = opt.step;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream::TRAIN, u));
        let batch = sample_batch(data, &steps, &model.config, cfg.batch_size, &mut rng)?;
        let dropout_seed = rng.gen::<u64>();
        let loss = ct_loss_grad(&model.config, &mut model.params, &batch, Some(dropout_seed))?;
        let lr = opt.step(&mut model.params)?;
        curve.push(LossPoint {
            update: opt.step,
            loss,
            lr,
        });
    }
    Ok((curve, opt))
}

/// Mean loss over fixed evaluation batches, dropout off.
pub fn eval_ct_loss(model: &ControlTransformer, data: &Dataset, batches: usize, batch_size: usize, seed: u64) -> Result<f64> {
    let steps = step_index(data);
    if steps.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..batches {
        let batch = sample_batch(data, &steps, &model.config, batch_size, &mut rng)?;
        let mut tape = Tape::new(&model.params);
        let l = ct_loss(&model.config, &mut tape, &batch)?;
        total += f64::from(tape.value(l).data[0]);
    }
    Ok(total / batches.max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueConfig {
    pub proprio_dim: usize,
    pub goal_dim: usize,
    pub hidden: usize,
    pub conv: ConvSpec,
    pub value_scale: f64,
}

impl ValueConfig {
    pub fn for_model(cfg: &CtConfig) -> Self {
        Self {
            proprio_dim: cfg.proprio_dim,
            goal_dim: cfg.goal_dim,
            hidden: 128,
            conv: cfg.conv.clone(),
            value_scale: cfg.rtg_scale,
        }
    }
}

/// Goal-conditioned value regressor over a single state.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueNet {
    pub config: ValueConfig,
    pub params: ParamStore<f32>,
}

fn init_value_params<T: Float>(cfg: &ValueConfig, seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new();
    conv_params(&mut ps, &mut rng, "v.", &cfg.conv);
    let input = cfg.conv.flat_dim() + cfg.proprio_dim + cfg.goal_dim;
    // fan-in scaled so the head sees unit-order activations from raw goals
    linear_params(&mut ps, &mut rng, "v.fc1", input, cfg.hidden, (2.0 / input as f64).sqrt());
    linear_params(&mut ps, &mut rng, "v.fc2", cfg.hidden, cfg.hidden, (2.0 / cfg.hidden as f64).sqrt());
    linear_params(&mut ps, &mut rng, "v.out", cfg.hidden, 1, (1.0 / cfg.hidden as f64).sqrt());
    ps
}

/// Scaled value predictions, shape `[n, 1]`.
pub fn value_forward<T: Float>(cfg: &ValueConfig, tape: &mut Tape<'_, T>, obs: &[f32], proprio: &[f64], goal: &[f64], n: usize) -> Result<Var> {
    let feat = conv_encoder(tape, &cfg.conv, "v.", obs, n)?;
    let pr = constant_rows(tape, proprio, n, |_| 1.0);
    let pr = if cfg.proprio_dim == 0 {
        tape.constant(Tensor::zeros(vec![n, 0]))
    } else {
        pr
    };
    let g = constant_rows(tape, goal, n, |_| 1.0);
    let x = tape.concat_cols(&[feat, pr, g])?;
    let h = lin(tape, x, "v.fc1")?;
    let h = tape.relu(h);
    let h = lin(tape, h, "v.fc2")?;
    let h = tape.relu(h);
    lin(tape, h, "v.out")
}

impl ValueNet {
    pub fn new(config: ValueConfig, seed: u64) -> Self {
        let params = init_value_params(&config, seed);
        Self { config, params }
    }

    /// Predicted return-to-go for each state.
    pub fn predict_many(&self, obs: &[f32], proprio: &[f64], goal: &[f64], n: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let out = value_forward(&self.config, &mut tape, obs, proprio, goal, n)?;
        Ok(tape
            .value(out)
            .data
            .iter()
            .map(|&v| f64::from(v) * self.config.value_scale)
            .collect())
    }

    pub fn predict(&self, obs: &[f32], proprio: &[f64], goal: [f64; 2]) -> Result<f64> {
        Ok(self.predict_many(obs, proprio, &goal, 1)?[0])
    }

    pub fn checkpoint(&self, optimizer: Option<AdamW<f32>>, extra: serde_json::Value) -> Checkpoint {
        let config = serde_json::json!({
            "kind": "value",
            "model": self.config,
            "run": extra,
        });
        Checkpoint::new(config, self.params.clone(), optimizer)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.config.get("kind").and_then(|k| k.as_str()) != Some("value") {
            return Err(Error::Checkpoint("not a value-network checkpoint".into()));
        }
        let config: ValueConfig = serde_json::from_value(ck.config["model"].clone())?;
        check_layout(&init_value_params(&config, 0), &ck.params)?;
        Ok(Self {
            config,
            params: ck.params.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "percent", rename_all = "snake_case")]
pub enum TrajectoryFilter {
    All,
    TopPercent(f64),
    CollisionFree,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConditioningRule {
    pub k: f64,
    pub filter: TrajectoryFilter,
}

impl Default for ConditioningRule {
    fn default() -> Self {
        Self {
            k: 1.0,
            filter: TrajectoryFilter::CollisionFree,
        }
    }
}

impl ConditioningRule {
    pub fn validate(&self) -> Result<()> {
        if self.k <= 0.0 {
            return Err(Error::Config("conditioning multiplier k must be positive".into()));
        }
        if let TrajectoryFilter::TopPercent(x) = self.filter {
            if !(x > 0.0 && x <= 100.0) {
                return Err(Error::Config(format!("top percent {x} outside (0, 100]")));
            }
        }
        Ok(())
    }

    /// Indices of the trajectories the value network trains on, ascending.
    pub fn select(&self, data: &Dataset) -> Vec<usize> {
        let trajs = &data.trajectories;
        let mut idx: Vec<usize> = match self.filter {
            TrajectoryFilter::All => (0..trajs.len()).collect(),
            TrajectoryFilter::CollisionFree => (0..trajs.len()).filter(|&i| trajs[i].collided_steps == 0).collect(),
            TrajectoryFilter::TopPercent(x) => {
                let mut order: Vec<usize> = (0..trajs.len()).collect();
                order.sort_by(|&a, &b| trajs[b].ret().total_cmp(&trajs[a].ret()).then(a.cmp(&b)));
                let keep = ((trajs.len() as f64 * x / 100.0).ceil() as usize).min(trajs.len());
                order.truncate(keep);
                order
            }
        };
        idx.retain(|&i| !trajs[i].is_empty());
        idx.sort_unstable();
        idx
    }
}

/// Regress scaled return-to-go from single states of the selected
/// trajectories.
pub fn train_value(
    vnet: &mut ValueNet,
    data: &Dataset,
    rule: &ConditioningRule,
    cfg: &TrainConfig,
) -> Result<(Vec<LossPoint>, AdamW<f32>)> {
    rule.validate()?;
    cfg.validate()?;
    let chosen = rule.select(data);
    let steps: Vec<(usize, usize)> = chosen
        .iter()
        .flat_map(|&i| (0..data.trajectories[i].len()).map(move |k| (i, k)))
        .collect();
    if steps.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (p, n) = (vnet.config.proprio_dim, cfg.batch_size);
    let mut opt = cfg.optimizer();
    let mut curve = Vec::with_capacity(cfg.updates);
    let mut obs = vec![0.0f32; n * OCC_LEN];
    for _ in 0..cfg.updates {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream::TRAIN, opt.step));
        let mut proprio = Vec::with_capacity(n * p);
        let mut goal = Vec::with_capacity(n * 2);
        let mut target = Vec::with_capacity(n);
        for i in 0..n {
            let (tr, k) = steps[rng.gen_range(0..steps.len())];
            let x = &data.trajectories[tr].transitions[k];
            x.decode_obs(&mut obs[i * OCC_LEN..(i + 1) * OCC_LEN])?;
            if x.proprio.len() != p {
                return Err(Error::Format("transition proprio size does not match value net".into()));
            }
            proprio.extend_from_slice(&x.proprio);
            goal.extend_from_slice(&x.goal);
            target.push(x.rtg / vnet.config.value_scale);
        }
        let (loss, grads) = {
            let mut tape = Tape::new(&vnet.params);
            let out = value_forward(&vnet.config, &mut tape, &obs, &proprio, &goal, n)?;
            let l = tape.mse(out, &Tensor::from_f64(vec![n, 1], &target))?;
            (f64::from(tape.value(l).data[0]), tape.backward(l)?)
        };
        grads.write_to(&mut vnet.params);
        let lr = opt.step(&mut vnet.params)?;
        curve.push(LossPoint {
            update: opt.step,
            loss,
            lr,
        });
    }
    Ok((curve, opt))
}

/// A transformer policy acting through a rolling context window.
pub struct CtPolicy<'a> {
    model: &'a ControlTransformer,
    value: Option<(&'a ValueNet, f64)>,
    window: Window,
    rtg: f64,
    /// Return-to-go fed at each step.
    pub conditioning: Vec<f64>,
}

impl<'a> CtPolicy<'a> {
    /// With `value` absent the return stream is zero.
    pub fn new(model: &'a ControlTransformer, value: Option<(&'a ValueNet, f64)>) -> Self {
        Self {
            model,
            value,
            window: Window::default(),
            rtg: 0.0,
            conditioning: Vec::new(),
        }
    }
}

impl Policy for CtPolicy<'_> {
    fn reset(&mut self, first: &StepObs<'_>) -> Result<()> {
        self.window = Window::default();
        self.conditioning.clear();
        self.rtg = match (self.value, self.model.config.use_returns) {
            (Some((v, k)), true) => quantize(k * v.predict(&first.obs.cells, first.proprio, first.goal_delta)?),
            _ => 0.0,
        };
        Ok(())
    }

    fn act(&mut self, o: &StepObs<'_>) -> Result<Vec<f64>> {
        let cfg = &self.model.config;
        self.conditioning.push(self.rtg);
        self.window.push(
            self.rtg,
            o.obs.cells.clone(),
            o.proprio.to_vec(),
            o.goal_delta,
            cfg.action_dim,
            cfg.eval_context_k,
        );
        self.model.predict_action(&self.window)
    }

    fn record(&mut self, action: &[f64], reward: f64) {
        self.window.set_last_action(action);
        if self.value.is_some() && self.model.config.use_returns {
            self.rtg -= reward;
        }
    }

    fn conditioning(&self) -> &[f64] {
        &self.conditioning
    }
}

/// Result of one policy episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutReport {
    pub success: bool,
    pub steps: usize,
    /// Sum of rewards.
    pub ret: f64,
    pub collisions: usize,
    /// Per-step collision flags.
    pub collided: Vec<bool>,
    pub final_distance: f64,
    pub failed_at: Option<usize>,
    /// Start pose followed by the pose after every step.
    pub poses: Vec<Pose2>,
    pub goal: Vec2,
    pub rewards: Vec<f64>,
    pub actions: Vec<Vec<f64>>,
    /// Return-to-go fed to the policy at each step.
    pub conditioning: Vec<f64>,
}

impl RolloutReport {
    pub fn from_rollout(ro: &Rollout, goal: Vec2, conditioning: Vec<f64>) -> Self {
        let mut poses: Vec<Pose2> = ro.transitions.iter().map(|t| t.pose).collect();
        poses.push(ro.final_pose);
        Self {
            success: ro.success,
            steps: ro.transitions.len(),
            ret: ro.transitions.iter().map(|t| t.reward).sum(),
            collisions: ro.collided_steps,
            collided: ro.transitions.iter().map(|t| t.collided).collect(),
            final_distance: ro.final_pose.position().dist(goal),
            failed_at: ro.failed_at,
            poses,
            goal,
            rewards: ro.transitions.iter().map(|t| t.reward).collect(),
            actions: ro.transitions.iter().map(|t| t.action.clone()).collect(),
            conditioning,
        }
    }

    pub fn to_trajectory(&self, ro: &Rollout, world_seed: u64) -> Trajectory {
        Trajectory {
            world_seed,
            start: self.poses[0].position(),
            goal: self.goal,
            label: Label::Policy,
            collided_steps: self.collisions,
            final_pose: ro.final_pose,
            plan: Vec::new(),
            transitions: ro.transitions.clone(),
        }
    }
}

/// Episode under the transformer with `R~_0 = k V(s_0 | g_0)` and
/// `R~_t = R~_{t-1} - r_{t-1}`; `value = None` runs with a zero return stream.
pub fn rollout_conditioned(
    model: &ControlTransformer,
    value: Option<&ValueNet>,
    rule: &ConditioningRule,
    spec: &EpisodeSpec<'_>,
) -> Result<(RolloutReport, Rollout)> {
    let mut policy = CtPolicy::new(model, value.map(|v| (v, rule.k)));
    let ro = crate::collect::rollout(spec, &mut policy)?;
    let report = RolloutReport::from_rollout(&ro, spec.goal, policy.conditioning);
    Ok((report, ro))
}

fn is_trunk(name: &str) -> bool {
    !(name.starts_with("proprio.") || name.starts_with("goal.") || name.starts_with("action.") || name.starts_with("head."))
}

/// New model for different robot dimensions: trunk tensors (decoder blocks,
/// positional table, convolution encoder, return and state projections) are
/// copied; proprio, goal and action embedders and the action head are fresh.
pub fn transfer_init(source: &ControlTransformer, robot: &Robot, seed: u64) -> Result<ControlTransformer> {
    let s = &source.config;
    let cfg = CtConfig {
        proprio_dim: robot.proprio_dim(),
        action_dim: robot.action_dim(),
        action_scale: action_scale(robot),
        ..s.clone()
    };
    let mut target = ControlTransformer::new(cfg, seed)?;
    let mut mismatches = Vec::new();
    for i in 0..target.params.len() {
        let name = target.params.name(i).to_string();
        if !is_trunk(&name) {
            continue;
        }
        match source.params.get(&name) {
            Some(t) if t.shape == target.params.tensor(i).shape => {
                *target.params.tensor_mut(i) = t.clone();
            }
            Some(t) => mismatches.push(format!("{name}: source {:?} vs target {:?}", t.shape, target.params.tensor(i).shape)),
            None => mismatches.push(format!("{name}: missing in source")),
        }
    }
    if !mismatches.is_empty() {
        return Err(Error::TrunkMismatch(mismatches));
    }
    Ok(target)
}

/// Checks that trunk shapes of `source` match a model built from `target`.
pub fn check_trunk(source: &ControlTransformer, target: &CtConfig) -> Result<()> {
    let mut mismatches = Vec::new();
    let s = &source.config;
    for (what, a, b) in [
        ("embed_dim", s.embed_dim, target.embed_dim),
        ("layers", s.layers, target.layers),
        ("heads", s.heads, target.heads),
    ] {
        if a != b {
            mismatches.push(format!("{what}: source {a} vs target {b}"));
        }
    }
    if mismatches.is_empty() {
        Ok(())
    } else {
        Err(Error::TrunkMismatch(mismatches))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collect::{collect_planner_trajectories, CollectConfig};
    use crate::geometry::Rect;
    use crate::planner::PrmConfig;
    use crate::world::{World, WorldFamily};

    pub(crate) fn tiny(robot: &Robot) -> CtConfig {
        CtConfig {
            layers: 2,
            heads: 2,
            embed_dim: 16,
            context_k: 3,
            eval_context_k: 3,
            dropout: 0.0,
            ..CtConfig::desk(robot)
        }
    }

    fn data(robot: &Robot, n: usize) -> Dataset {
        let cfg = CollectConfig {
            trajectories: n,
            reset_interval: 4,
            prm: PrmConfig {
                n_samples: 40,
                ..PrmConfig::default()
            },
            batch: 4,
            ..CollectConfig::default()
        };
        let fam = WorldFamily::Fixed {
            world: World::new(Rect::new(0.0, 0.0, 3.0, 3.0), vec![Rect::new(1.3, 1.3, 1.7, 1.7)], 0).unwrap(),
        };
        Dataset::new(collect_planner_trajectories(&cfg, &fam, robot).unwrap())
    }

    fn window_from(traj: &Trajectory, end: usize, k: usize) -> Window {
        let mut w = Window::default();
        for t in &traj.transitions[(end + 1).saturating_sub(k)..=end] {
            w.push(t.rtg, t.obs_cells().unwrap(), t.proprio.clone(), t.goal, 2, k);
            w.set_last_action(&t.action);
        }
        w.set_last_action(&[0.0, 0.0]);
        w
    }

    #[test]
    fn token_counts() {
        let robot = Robot::diff_drive();
        let cfg = CtConfig {
            context_k: 5,
            eval_context_k: 5,
            ..tiny(&robot)
        };
        let ps: ParamStore<f64> = init_ct_params(&cfg, 1);
        let d = data(&robot, 1);
        for t in [1, 5] {
            let mut b = Batch::new(1, t, 2, 2);
            b.set_window(0, &d.trajectories[0], 0, t - 1).unwrap();
            let mut tape = Tape::new(&ps);
            let pred = ct_forward(&cfg, &mut tape, &b).unwrap();
            assert_eq!(tape.shape(pred), &[t, 2]);
        }
    }

    #[test]
    fn causal_and_context_bound() {
        let robot = Robot::diff_drive();
        let model = ControlTransformer::new(tiny(&robot), 3).unwrap();
        let d = data(&robot, 1);
        let traj = &d.trajectories[0];
        let w = window_from(traj, 6, 3);
        let a0 = model.predict_action(&w).unwrap();
        assert_eq!(a0.len(), 2);
        // the current action slot is not visible to the state token
        let mut w2 = w.clone();
        w2.set_last_action(&[5.0, -3.0]);
        assert_eq!(model.predict_action(&w2).unwrap(), a0);
        // a longer history is cut to the context length
        let mut w3 = window_from(traj, 6, 7);
        while w3.len() > 3 {
            w3.rtg.pop_front();
            w3.obs.pop_front();
            w3.proprio.pop_front();
            w3.goal.pop_front();
            w3.action.pop_front();
        }
        assert_eq!(model.predict_action(&w3).unwrap(), a0);
    }

    #[test]
    fn shared_positions() {
        let robot = Robot::diff_drive();
        let cfg = tiny(&robot);
        let d = data(&robot, 1);
        let mut b = Batch::new(1, 3, 2, 2);
        b.set_window(0, &d.trajectories[0], 2, 4).unwrap();
        let ps: ParamStore<f64> = init_ct_params(&cfg, 5);
        let run = |ps: &ParamStore<f64>| {
            let mut tape = Tape::new(ps);
            let p = ct_forward(&cfg, &mut tape, &b).unwrap();
            tape.value(p).data.clone()
        };
        let base = run(&ps);
        let mut swapped = ps.clone();
        let d_ = cfg.embed_dim;
        let pos = swapped.get_mut("pos").unwrap();
        let row0: Vec<f64> = pos.data[..d_].to_vec();
        let row1: Vec<f64> = pos.data[d_..2 * d_].to_vec();
        pos.data[..d_].copy_from_slice(&row1);
        pos.data[d_..2 * d_].copy_from_slice(&row0);
        assert_ne!(run(&swapped), base);
    }

    #[test]
    fn rule_filters() {
        let robot = Robot::point();
        let mut d = data(&robot, 6);
        d.trajectories[2].collided_steps = 3;
        let all = ConditioningRule {
            k: 1.0,
            filter: TrajectoryFilter::All,
        };
        assert_eq!(all.select(&d), vec![0, 1, 2, 3, 4, 5]);
        let cf = ConditioningRule::default();
        assert_eq!(cf.select(&d), vec![0, 1, 3, 4, 5]);
        let top = ConditioningRule {
            k: 1.0,
            filter: TrajectoryFilter::TopPercent(50.0),
        };
        let mut order: Vec<usize> = (0..6).collect();
        order.sort_by(|&a, &b| d.trajectories[b].ret().partial_cmp(&d.trajectories[a].ret()).unwrap().then(a.cmp(&b)));
        let mut want = order[..3].to_vec();
        want.sort_unstable();
        assert_eq!(top.select(&d), want);
    }

    #[test]
    fn checkpoint_predict_bitwise() {
        let robot = Robot::diff_drive();
        let model = ControlTransformer::new(tiny(&robot), 8).unwrap();
        let d = data(&robot, 1);
        let w = window_from(&d.trajectories[0], 4, 3);
        let ck = model.checkpoint(None, serde_json::json!({"seed": 8}));
        let back = ControlTransformer::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        let a = model.predict_action(&w).unwrap();
        let b = back.predict_action(&w).unwrap();
        assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert!(ValueNet::from_checkpoint(&ck).is_err());
    }

    #[test]
    fn transfer_copies_trunk() {
        let dd = Robot::diff_drive();
        let src = ControlTransformer::new(tiny(&dd), 1).unwrap();
        let same = transfer_init(&src, &dd, 2).unwrap();
        for (name, t) in same.params.iter() {
            let s = src.params.get(name).unwrap();
            if is_trunk(name) {
                assert_eq!(s, t, "{name}");
            } else if name.ends_with(".w") {
                assert_ne!(s, t, "{name}");
            }
        }
        let pt = transfer_init(&src, &Robot::point(), 2).unwrap();
        assert_eq!(pt.config.proprio_dim, 0);
        assert_eq!(pt.params.get("proprio.w").unwrap().shape, vec![0, 16]);
        let other = ControlTransformer::new(CtConfig { embed_dim: 32, ..tiny(&dd) }, 1).unwrap();
        assert!(check_trunk(&other, &pt.config).is_err());
    }

    #[test]
    fn value_constant_regression() {
        let robot = Robot::point();
        let mut d = data(&robot, 3);
        for t in &mut d.trajectories {
            for x in &mut t.transitions {
                x.rtg = -7.5;
            }
        }
        let mut cfg = ValueConfig::for_model(&tiny(&robot));
        cfg.hidden = 16;
        let mut v = ValueNet::new(cfg, 0);
        let tc = TrainConfig {
            updates: 300,
            batch_size: 16,
            lr: 1e-2,
            weight_decay: 0.0,
            warmup: 10,
            grad_clip: None,
            seed: 0,
        };
        train_value(&mut v, &d, &ConditioningRule::default(), &tc).unwrap();
        let x = &d.trajectories[1].transitions[3];
        let pred = v.predict(&x.obs_cells().unwrap(), &x.proprio, x.goal).unwrap();
        assert!((pred + 7.5).abs() < 5e-2, "{pred}");
    }

    #[test]
    fn empty_filter_errors() {
        let robot = Robot::point();
        let mut d = data(&robot, 2);
        for t in &mut d.trajectories {
            t.collided_steps = 1;
        }
        let mut v = ValueNet::new(ValueConfig::for_model(&tiny(&robot)), 0);
        let tc = TrainConfig {
            updates: 1,
            ..TrainConfig::turtlebot()
        };
        assert!(matches!(train_value(&mut v, &d, &ConditioningRule::default(), &tc), Err(Error::EmptyDataset)));
        let mut m = ControlTransformer::new(tiny(&robot), 0).unwrap();
        assert!(matches!(train_ct(&mut m, &Dataset::default(), &tc, None), Err(Error::EmptyDataset)));
    }
}
