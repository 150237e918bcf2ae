//! Independent PPO: every agent acts with the same network and all agents'
//! transitions are pooled into one training batch.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::AmrEnv;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::mesh::{Action, Level};
use crate::policies::{log_probs, read_checkpoint, select_action, write_checkpoint, PolicyWeights, Selection};

/// A cooperative environment with a fixed number of agents that all act at
/// once. Observations are returned flattened, one row per agent.
pub trait MultiAgentEnv {
    fn agent_count(&self) -> usize;
    /// `(channels, window)` of one agent's observation; valid after a reset.
    fn observation_shape(&self) -> (usize, [usize; 2]);
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>>;
    fn step(&mut self, actions: &[Action]) -> Result<EnvStep>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvStep {
    pub observations: Vec<f64>,
    pub rewards: Vec<f64>,
    pub done: bool,
}

impl MultiAgentEnv for AmrEnv {
    fn agent_count(&self) -> usize {
        AmrEnv::agent_count(self)
    }

    fn observation_shape(&self) -> (usize, [usize; 2]) {
        let law = self.problem().expect("reset before querying the shape").law();
        (self.config().channel_count(&law), self.config().window_shape())
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        Ok(AmrEnv::reset(self, rng)?.data)
    }

    fn step(&mut self, actions: &[Action]) -> Result<EnvStep> {
        let r = AmrEnv::step(self, actions)?;
        Ok(EnvStep {
            observations: r.observations.data,
            rewards: r.rewards,
            done: r.done,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub fragment_length: usize,
    /// per-agent transitions collected before each update
    pub train_batch_size: usize,
    pub minibatch_size: usize,
    pub epochs: usize,
    pub clip: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub vf_coeff: f64,
    pub entropy_coeff: f64,
    pub iterations: usize,
    pub num_envs: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            optimizer: OptimizerKind::Sgd,
            fragment_length: 20,
            train_batch_size: 1000,
            minibatch_size: 50,
            epochs: 1,
            clip: 0.3,
            gamma: 0.99,
            lambda: 1.0,
            vf_coeff: 1.0,
            entropy_coeff: 0.0,
            iterations: 100,
            num_envs: 1,
            seed: 0,
            hidden: crate::policies::DEFAULT_HIDDEN.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.fragment_length == 0 || self.train_batch_size == 0 || self.minibatch_size == 0 {
            return bad("fragment_length, train_batch_size and minibatch_size must be positive");
        }
        if self.minibatch_size > self.train_batch_size {
            return bad("minibatch_size must not exceed train_batch_size");
        }
        if self.epochs == 0 || self.num_envs == 0 {
            return bad("epochs and num_envs must be positive");
        }
        if !(self.clip > 0.0) {
            return bad("clip must be positive");
        }
        if !((0.0..=1.0).contains(&self.gamma) && (0.0..=1.0).contains(&self.lambda)) {
            return bad("gamma and lambda must lie in [0, 1]");
        }
        if !(self.vf_coeff >= 0.0 && self.entropy_coeff >= 0.0) {
            return bad("loss coefficients must be non-negative");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive");
        }
        Ok(())
    }
}

/// Pooled per-agent transitions. Each agent's fragment is stored
/// contiguously so that advantages can be computed per trajectory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryBuffer {
    pub dim: usize,
    pub obs: Vec<f64>,
    pub actions: Vec<Action>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// `(start, len, bootstrap value)` of every trajectory segment
    pub segments: Vec<(usize, usize, f64)>,
}

impl TrajectoryBuffer {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn mean_reward(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.len().max(1) as f64
    }

    /// Appends another buffer's segments.
    pub fn extend(&mut self, other: TrajectoryBuffer) {
        let base = self.len();
        self.obs.extend(other.obs);
        self.actions.extend(other.actions);
        self.log_probs.extend(other.log_probs);
        self.rewards.extend(other.rewards);
        self.values.extend(other.values);
        self.dones.extend(other.dones);
        self.advantages.extend(other.advantages);
        self.returns.extend(other.returns);
        self.segments
            .extend(other.segments.into_iter().map(|(s, l, b)| (s + base, l, b)));
    }

    /// Fills `advantages` and `returns` segment by segment.
    pub fn compute_advantages(&mut self, gamma: f64, lambda: f64) {
        self.advantages = vec![0.0; self.len()];
        self.returns = vec![0.0; self.len()];
        for &(s, l, boot) in &self.segments {
            let r = s..s + l;
            let (a, ret) = gae(&self.rewards[r.clone()], &self.values[r.clone()], &self.dones[r.clone()], boot, gamma, lambda);
            self.advantages[r.clone()].copy_from_slice(&a);
            self.returns[r].copy_from_slice(&ret);
        }
    }
}

/// Generalized advantage estimation on one agent's trajectory. `bootstrap`
/// is the value of the state following the last transition; it is ignored
/// when that transition ends an episode.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], bootstrap: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n);
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap;
    for t in (0..n).rev() {
        if dones[t] {
            next_adv = 0.0;
            next_value = 0.0;
        }
        let delta = rewards[t] + gamma * next_value - values[t];
        next_adv = delta + gamma * lambda * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// An environment together with its pending observation.
pub struct RolloutWorker<E> {
    pub env: E,
    obs: Option<Vec<f64>>,
}

impl<E: MultiAgentEnv> RolloutWorker<E> {
    pub fn new(env: E) -> Self {
        Self { env, obs: None }
    }

    fn observation(&mut self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        match self.obs.take() {
            Some(o) => Ok(o),
            None => self.env.reset(rng),
        }
    }
}

/// Advances every worker by `fragment_length` environment steps with
/// sampled actions, resetting finished episodes.
pub fn collect_rollouts<E: MultiAgentEnv>(
    workers: &mut [RolloutWorker<E>],
    weights: &PolicyWeights,
    fragment_length: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrajectoryBuffer> {
    let dim = weights.input_dim();
    let mut buffer = TrajectoryBuffer::new(dim);
    for w in workers.iter_mut() {
        let n = w.env.agent_count();
        // time-major scratch, reordered agent-major at the end
        let mut obs_t = Vec::with_capacity(fragment_length);
        let mut act_t = Vec::with_capacity(fragment_length);
        let mut lp_t = Vec::with_capacity(fragment_length);
        let mut rew_t = Vec::with_capacity(fragment_length);
        let mut val_t = Vec::with_capacity(fragment_length);
        let mut done_t = Vec::with_capacity(fragment_length);
        let mut obs = w.observation(rng)?;
        for _ in 0..fragment_length {
            if obs.len() != n * dim {
                return Err(Error::Shape(format!(
                    "environment produced {} observation values, expected {}",
                    obs.len(),
                    n * dim
                )));
            }
            let (logits, values) = weights.forward(&obs, n)?;
            let mut actions = Vec::with_capacity(n);
            let mut lps = Vec::with_capacity(n);
            for l in &logits {
                let (a, lp) = select_action(*l, Selection::Sample(rng));
                actions.push(a);
                lps.push(lp);
            }
            let step = w.env.step(&actions)?;
            obs_t.push(obs);
            act_t.push(actions);
            lp_t.push(lps);
            rew_t.push(step.rewards);
            val_t.push(values);
            done_t.push(step.done);
            obs = if step.done { w.env.reset(rng)? } else { step.observations };
        }
        let boot = if *done_t.last().unwrap() {
            vec![0.0; n]
        } else {
            weights.forward(&obs, n)?.1
        };
        w.obs = Some(obs);
        for a in 0..n {
            let start = buffer.len();
            for t in 0..fragment_length {
                buffer.obs.extend_from_slice(&obs_t[t][a * dim..(a + 1) * dim]);
                buffer.actions.push(act_t[t][a]);
                buffer.log_probs.push(lp_t[t][a]);
                buffer.rewards.push(rew_t[t][a]);
                buffer.values.push(val_t[t][a]);
                buffer.dones.push(done_t[t]);
            }
            buffer.segments.push((start, fragment_length, boot[a]));
        }
    }
    buffer.advantages = vec![0.0; buffer.len()];
    buffer.returns = vec![0.0; buffer.len()];
    Ok(buffer)
}

/// Mean losses over a set of transitions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub total: f64,
}

/// A minibatch view used by the loss.
pub struct Minibatch<'a> {
    pub obs: &'a [f64],
    pub actions: &'a [Action],
    pub old_log_probs: &'a [f64],
    pub advantages: &'a [f64],
    pub returns: &'a [f64],
}

impl Minibatch<'_> {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

struct SampleTerms {
    policy: f64,
    value: f64,
    entropy: f64,
    dlogits: [f64; 2],
    dvalue: f64,
}

fn sample_terms(logits: [f64; 2], value: f64, i: usize, mb: &Minibatch<'_>, cfg: &TrainConfig) -> SampleTerms {
    let lp = log_probs(logits);
    let p = [lp[0].exp(), lp[1].exp()];
    let a = mb.actions[i].index();
    let adv = mb.advantages[i];
    let ratio = (lp[a] - mb.old_log_probs[i]).exp();
    let clipped = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip);
    let (u, c) = (ratio * adv, clipped * adv);
    let surr = u.min(c);
    debug_assert!(surr <= u.max(c));
    // d(−surr)/d log π(a); zero when the clipped branch is strictly smaller
    let g_lp = if u <= c { -adv * ratio } else { 0.0 };
    let entropy = -(p[0] * lp[0] + p[1] * lp[1]);
    let mut dlogits = [0.0; 2];
    for k in 0..2 {
        let dlp = if k == a { 1.0 } else { 0.0 } - p[k];
        let dent = -p[k] * (lp[k] + entropy);
        dlogits[k] = g_lp * dlp - cfg.entropy_coeff * dent;
    }
    let diff = value - mb.returns[i];
    SampleTerms {
        policy: -surr,
        value: diff * diff,
        entropy,
        dlogits,
        dvalue: 2.0 * cfg.vf_coeff * diff,
    }
}

fn report(policy: f64, value: f64, entropy: f64, n: usize, cfg: &TrainConfig) -> LossReport {
    let n = n as f64;
    let (p, v, e) = (policy / n, value / n, entropy / n);
    LossReport {
        policy_loss: p,
        value_loss: v,
        entropy: e,
        total: p + cfg.vf_coeff * v - cfg.entropy_coeff * e,
    }
}

/// Clipped-surrogate PPO loss over a minibatch.
pub fn ppo_loss(weights: &PolicyWeights, mb: &Minibatch<'_>, cfg: &TrainConfig) -> Result<LossReport> {
    let n = mb.len();
    let (logits, values) = weights.forward(mb.obs, n)?;
    let (mut p, mut v, mut e) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let t = sample_terms(logits[i], values[i], i, mb, cfg);
        p += t.policy;
        v += t.value;
        e += t.entropy;
    }
    Ok(report(p, v, e, n, cfg))
}

/// Loss and its gradients with respect to the policy and value parameters.
pub fn ppo_loss_and_grad(weights: &PolicyWeights, mb: &Minibatch<'_>, cfg: &TrainConfig) -> Result<(LossReport, Vec<f64>, Vec<f64>)> {
    let n = mb.len();
    let (lo, pcache) = weights.policy.forward_batch(mb.obs, n)?;
    let (vo, vcache) = weights.value.forward_batch(mb.obs, n)?;
    let (mut p, mut v, mut e) = (0.0, 0.0, 0.0);
    let mut dl = vec![0.0; 2 * n];
    let mut dv = vec![0.0; n];
    let inv = 1.0 / n as f64;
    for i in 0..n {
        let t = sample_terms([lo[2 * i], lo[2 * i + 1]], vo[i], i, mb, cfg);
        p += t.policy;
        v += t.value;
        e += t.entropy;
        dl[2 * i] = t.dlogits[0] * inv;
        dl[2 * i + 1] = t.dlogits[1] * inv;
        dv[i] = t.dvalue * inv;
    }
    let mut gp = vec![0.0; weights.policy.param_count()];
    let mut gv = vec![0.0; weights.value.param_count()];
    weights.policy.backward_batch(&pcache, &dl, &mut gp);
    weights.value.backward_batch(&vcache, &dv, &mut gv);
    Ok((report(p, v, e, n, cfg), gp, gv))
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Gradient-descent state for both networks.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: u64,
    policy: Moments,
    value: Moments,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            t: 0,
            policy: Moments::default(),
            value: Moments::default(),
        }
    }

    pub fn step(&mut self, weights: &mut PolicyWeights, gp: &[f64], gv: &[f64]) {
        self.t += 1;
        let (kind, lr, t) = (self.kind, self.lr, self.t);
        apply(kind, lr, t, &mut self.policy, &mut weights.policy.params, gp);
        apply(kind, lr, t, &mut self.value, &mut weights.value.params, gv);
    }
}

fn apply(kind: OptimizerKind, lr: f64, t: u64, st: &mut Moments, params: &mut [f64], g: &[f64]) {
    match kind {
        OptimizerKind::Sgd => {
            for (p, d) in params.iter_mut().zip(g) {
                *p -= lr * d;
            }
        }
        OptimizerKind::Adam => {
            if st.m.len() != params.len() {
                st.m = vec![0.0; params.len()];
                st.v = vec![0.0; params.len()];
            }
            let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
            let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
            for i in 0..params.len() {
                st.m[i] = ADAM_BETA1 * st.m[i] + (1.0 - ADAM_BETA1) * g[i];
                st.v[i] = ADAM_BETA2 * st.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let mh = st.m[i] / c1;
                let vh = st.v[i] / c2;
                params[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Shifts and scales to zero mean and unit standard deviation; a constant
/// input maps to all zeros.
pub fn normalize_advantages(a: &[f64]) -> Vec<f64> {
    let n = a.len().max(1) as f64;
    let mean = a.iter().sum::<f64>() / n;
    let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= 1e-12 * mean.abs().max(1.0) {
        return vec![0.0; a.len()];
    }
    a.iter().map(|x| (x - mean) / std).collect()
}

/// One PPO update over a filled buffer (advantages already computed).
pub fn ppo_update(
    weights: &mut PolicyWeights,
    buffer: &TrajectoryBuffer,
    cfg: &TrainConfig,
    opt: &mut Optimizer,
    rng: &mut ChaCha8Rng,
) -> Result<LossReport> {
    let n = buffer.len();
    if n < cfg.minibatch_size {
        return Err(Error::Config(format!(
            "buffer holds {n} transitions, fewer than one minibatch of {}",
            cfg.minibatch_size
        )));
    }
    let dim = buffer.dim;
    let adv = normalize_advantages(&buffer.advantages);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut total = LossReport::default();
    let mut count = 0usize;
    let (mut obs, mut act, mut olp, mut ad, mut ret) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..cfg.epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(cfg.minibatch_size) {
            obs.clear();
            act.clear();
            olp.clear();
            ad.clear();
            ret.clear();
            for &i in chunk {
                obs.extend_from_slice(&buffer.obs[i * dim..(i + 1) * dim]);
                act.push(buffer.actions[i]);
                olp.push(buffer.log_probs[i]);
                ad.push(adv[i]);
                ret.push(buffer.returns[i]);
            }
            let mb = Minibatch {
                obs: &obs,
                actions: &act,
                old_log_probs: &olp,
                advantages: &ad,
                returns: &ret,
            };
            let (rep, gp, gv) = ppo_loss_and_grad(weights, &mb, cfg)?;
            if !rep.total.is_finite() || gp.iter().chain(&gv).any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss(format!(
                    "policy loss {}, value loss {}, entropy {}",
                    rep.policy_loss, rep.value_loss, rep.entropy
                )));
            }
            opt.step(weights, &gp, &gv);
            total.policy_loss += rep.policy_loss;
            total.value_loss += rep.value_loss;
            total.entropy += rep.entropy;
            total.total += rep.total;
            count += 1;
        }
    }
    let c = count as f64;
    Ok(LossReport {
        policy_loss: total.policy_loss / c,
        value_loss: total.value_loss / c,
        entropy: total.entropy / c,
        total: total.total / c,
    })
}

/// One row of the training metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub env_steps: usize,
    pub mean_reward: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
}

/// Collect/update loop over a set of environments.
pub struct Trainer<E> {
    workers: Vec<RolloutWorker<E>>,
    weights: PolicyWeights,
    optimizer: Optimizer,
    config: TrainConfig,
    rng: ChaCha8Rng,
    iteration: usize,
    env_steps: usize,
}

impl<E: MultiAgentEnv> Trainer<E> {
    /// Resets the environments and builds fresh weights unless `initial` is
    /// given.
    pub fn new(envs: Vec<E>, config: TrainConfig, initial: Option<PolicyWeights>) -> Result<Self> {
        config.validate()?;
        if envs.is_empty() {
            return Err(Error::Config("at least one environment is required".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut workers: Vec<_> = envs.into_iter().map(RolloutWorker::new).collect();
        for w in &mut workers {
            w.obs = Some(w.env.reset(&mut rng)?);
        }
        let (channels, window) = workers[0].env.observation_shape();
        let weights = match initial {
            Some(w) => {
                if w.meta.channels != channels || w.meta.window != window {
                    return Err(Error::Shape(format!(
                        "weights expect {} channels on a {:?} window, environment gives {channels} on {window:?}",
                        w.meta.channels, w.meta.window
                    )));
                }
                w
            }
            None => PolicyWeights::new(channels, window, &config.hidden, &mut rng),
        };
        Ok(Self {
            workers,
            weights,
            optimizer: Optimizer::new(config.optimizer, config.learning_rate),
            config,
            rng,
            iteration: 0,
            env_steps: 0,
        })
    }

    pub fn weights(&self) -> &PolicyWeights {
        &self.weights
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn env_steps(&self) -> usize {
        self.env_steps
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Continues counters from an earlier run.
    pub fn set_progress(&mut self, iteration: usize, env_steps: usize) {
        self.iteration = iteration;
        self.env_steps = env_steps;
    }

    /// Collects at least one batch and performs one PPO update.
    pub fn train_iteration(&mut self) -> Result<IterationStats> {
        let mut buffer = TrajectoryBuffer::new(self.weights.input_dim());
        while buffer.len() < self.config.train_batch_size {
            let b = collect_rollouts(&mut self.workers, &self.weights, self.config.fragment_length, &mut self.rng)?;
            self.env_steps += self.config.fragment_length * self.workers.len();
            buffer.extend(b);
        }
        buffer.compute_advantages(self.config.gamma, self.config.lambda);
        let loss = ppo_update(&mut self.weights, &buffer, &self.config, &mut self.optimizer, &mut self.rng)?;
        self.iteration += 1;
        Ok(IterationStats {
            iteration: self.iteration,
            env_steps: self.env_steps,
            mean_reward: buffer.mean_reward(),
            policy_loss: loss.policy_loss,
            value_loss: loss.value_loss,
        })
    }
}

/// Files produced by [`train`].
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub metrics: PathBuf,
    pub latest: PathBuf,
    pub best: PathBuf,
    pub history: Vec<IterationStats>,
    pub best_mean_reward: f64,
}

#[derive(Serialize, Deserialize)]
struct Progress {
    iteration: usize,
    env_steps: usize,
    mean_reward: Option<f64>,
    best_mean_reward: Option<f64>,
}

/// Trains on `config.num_envs` copies of the environment, logging
/// `metrics.csv` and keeping `latest.ckpt` and `best.ckpt` in `out_dir`.
/// With `resume`, weights and counters continue from `latest.ckpt` and the
/// metrics log is appended to.
pub fn train(env_config: &EnvConfig, config: &TrainConfig, out_dir: &Path, resume: bool) -> Result<TrainSummary> {
    env_config.validate()?;
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let metrics = out_dir.join("metrics.csv");
    let latest = out_dir.join("latest.ckpt");
    let best = out_dir.join("best.ckpt");
    let (initial, progress) = if resume {
        let (w, extra) = read_checkpoint(&latest)?;
        let p: Progress = serde_json::from_value(extra)?;
        (Some(w), Some(p))
    } else {
        (None, None)
    };
    let envs = (0..config.num_envs)
        .map(|_| AmrEnv::new(env_config.clone()))
        .collect::<Result<Vec<_>>>()?;
    let mut trainer = Trainer::new(envs, config.clone(), initial)?;
    let mut best_reward = f64::NEG_INFINITY;
    if let Some(p) = &progress {
        trainer.set_progress(p.iteration, p.env_steps);
        best_reward = p.best_mean_reward.unwrap_or(f64::NEG_INFINITY);
        // a resumed run draws a different stream than the original
        *trainer.rng_mut() = ChaCha8Rng::seed_from_u64(config.seed ^ (p.iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    }
    let progress_json = |t: &Trainer<AmrEnv>, last: Option<f64>, best: f64| {
        serde_json::to_value(Progress {
            iteration: t.iteration(),
            env_steps: t.env_steps(),
            mean_reward: last,
            best_mean_reward: best.is_finite().then_some(best),
        })
    };
    if progress.is_none() {
        write_checkpoint(&latest, trainer.weights(), progress_json(&trainer, None, best_reward)?)?;
    }
    let append = resume && metrics.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&metrics)?;
    let mut writer = csv::WriterBuilder::new().has_headers(!append).from_writer(file);
    let mut history = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let stats = trainer.train_iteration()?;
        writer.serialize(stats)?;
        writer.flush()?;
        info!(
            "iteration {} steps {} reward {:.4} policy {:.4e} value {:.4e}",
            stats.iteration, stats.env_steps, stats.mean_reward, stats.policy_loss, stats.value_loss
        );
        if stats.mean_reward > best_reward {
            best_reward = stats.mean_reward;
            write_checkpoint(&best, trainer.weights(), progress_json(&trainer, Some(stats.mean_reward), best_reward)?)?;
        }
        write_checkpoint(&latest, trainer.weights(), progress_json(&trainer, Some(stats.mean_reward), best_reward)?)?;
        history.push(stats);
    }
    Ok(TrainSummary {
        metrics,
        latest,
        best,
        history,
        best_mean_reward: best_reward,
    })
}

/// Greedy actions of a policy for a batch of agent observations.
pub fn greedy_actions(weights: &PolicyWeights, obs: &[f64], agents: usize) -> Result<Vec<Action>> {
    let (logits, _) = weights.forward(obs, agents)?;
    Ok(logits
        .into_iter()
        .map(|l| select_action::<ChaCha8Rng>(l, Selection::Argmax).0)
        .collect())
}

/// Toy environment used by tests: each agent sees a random vector and is
/// rewarded 0 for choosing `Fine` exactly when the first entry is
/// positive, −1 otherwise. Episodes last `horizon` steps.
#[derive(Clone, Debug)]
pub struct BandEnv {
    agents: usize,
    dim: usize,
    horizon: usize,
    t: usize,
    obs: Vec<f64>,
    rng: ChaCha8Rng,
}

impl BandEnv {
    pub fn new(agents: usize, dim: usize, horizon: usize, seed: u64) -> Self {
        Self {
            agents,
            dim,
            horizon,
            t: 0,
            obs: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn draw(&mut self) -> Vec<f64> {
        use rand::Rng;
        (0..self.agents * self.dim).map(|_| self.rng.random_range(-1.0..1.0)).collect()
    }

    pub fn optimal(obs: &[f64]) -> Action {
        if obs[0] > 0.0 {
            Level::Fine
        } else {
            Level::Coarse
        }
    }
}

impl MultiAgentEnv for BandEnv {
    fn agent_count(&self) -> usize {
        self.agents
    }

    fn observation_shape(&self) -> (usize, [usize; 2]) {
        (self.dim, [1, 1])
    }

    fn reset(&mut self, _rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        self.t = 0;
        self.obs = self.draw();
        Ok(self.obs.clone())
    }

    fn step(&mut self, actions: &[Action]) -> Result<EnvStep> {
        let rewards = actions
            .iter()
            .enumerate()
            .map(|(i, a)| {
                if *a == Self::optimal(&self.obs[i * self.dim..(i + 1) * self.dim]) {
                    0.0
                } else {
                    -1.0
                }
            })
            .collect();
        self.t += 1;
        self.obs = self.draw();
        Ok(EnvStep {
            observations: self.obs.clone(),
            rewards,
            done: self.t >= self.horizon,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            fragment_length: 20,
            train_batch_size: 200,
            minibatch_size: 50,
            hidden: vec![32, 32],
            ..Default::default()
        }
    }

    #[test]
    fn gae_examples() {
        let (a, r) = gae(&[1.0], &[0.0], &[true], 5.0, 0.99, 1.0);
        assert_eq!((a[0], r[0]), (1.0, 1.0));
        let (a, _) = gae(&[0.0; 3], &[0.0; 3], &[false; 3], 0.0, 0.99, 0.95);
        assert_eq!(a, vec![0.0; 3]);
        let (a, _) = gae(&[0.0, -1.0], &[0.0, 0.0], &[false, true], 0.0, 1.0, 1.0);
        assert_eq!(a, vec![-1.0, -1.0]);
        // truncated: bootstrap value enters the last delta
        let (a, r) = gae(&[0.0], &[1.0], &[false], 2.0, 0.5, 1.0);
        assert_eq!((a[0], r[0]), (0.0, 1.0));
    }

    #[test]
    fn gae_with_lambda_matches_discounted_td_sum() {
        let r = [0.3, -0.2, 0.5, 1.0];
        let v = [0.1, 0.4, -0.3, 0.2];
        let (g, l, boot) = (0.9, 0.7, 0.6);
        let (a, _) = gae(&r, &v, &[false; 4], boot, g, l);
        let next = [v[1], v[2], v[3], boot];
        for t in 0..4 {
            let mut s = 0.0;
            for k in t..4 {
                let delta = r[k] + g * next[k] - v[k];
                s += (g * l).powi((k - t) as i32) * delta;
            }
            assert!((a[t] - s).abs() < 1e-14);
        }
    }

    #[test]
    fn rollout_counts_and_episode_boundaries() {
        let w = PolicyWeights::new(3, [1, 1], &[8, 8], &mut ChaCha8Rng::seed_from_u64(0));
        let mut workers = vec![RolloutWorker::new(BandEnv::new(4, 3, 4, 1))];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = collect_rollouts(&mut workers, &w, 20, &mut rng).unwrap();
        assert_eq!(b.len(), 80);
        assert_eq!(b.segments.len(), 4);
        assert_eq!(b.dones[..20].iter().filter(|d| **d).count(), 5);

        let mut workers2 = vec![RolloutWorker::new(BandEnv::new(4, 3, 4, 1))];
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        let b2 = collect_rollouts(&mut workers2, &w, 20, &mut rng2).unwrap();
        assert_eq!(b, b2);
    }

    #[test]
    fn advantage_normalization() {
        let a: Vec<f64> = (0..97).map(|i| (i as f64 * 1.3).sin() * 7.0 + 3.0).collect();
        let n = normalize_advantages(&a);
        let mean = n.iter().sum::<f64>() / n.len() as f64;
        let std = (n.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n.len() as f64).sqrt();
        assert!(mean.abs() < 1e-10 && (std - 1.0).abs() < 1e-6);
        assert_eq!(normalize_advantages(&[2.0; 5]), vec![0.0; 5]);
    }

    fn filled_buffer(seed: u64) -> (PolicyWeights, TrajectoryBuffer) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = PolicyWeights::new(3, [1, 1], &[16, 16], &mut rng);
        let mut workers = vec![RolloutWorker::new(BandEnv::new(10, 3, 2, seed))];
        let mut b = collect_rollouts(&mut workers, &w, 20, &mut rng).unwrap();
        b.compute_advantages(0.99, 1.0);
        (w, b)
    }

    #[test]
    fn zero_learning_rate_leaves_weights_bit_identical() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let (w0, b) = filled_buffer(5);
            let mut w = w0.clone();
            let cfg = TrainConfig {
                learning_rate: 0.0,
                optimizer: kind,
                epochs: 2,
                ..small_config()
            };
            let mut opt = Optimizer::new(kind, 0.0);
            ppo_update(&mut w, &b, &cfg, &mut opt, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            for (a, c) in w.policy.params.iter().zip(&w0.policy.params) {
                assert_eq!(a.to_bits(), c.to_bits());
            }
            for (a, c) in w.value.params.iter().zip(&w0.value.params) {
                assert_eq!(a.to_bits(), c.to_bits());
            }
        }
    }

    #[test]
    fn zero_advantages_leave_the_policy_untouched() {
        let (w0, mut b) = filled_buffer(6);
        b.advantages.iter_mut().for_each(|a| *a = 0.0);
        let mut w = w0.clone();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            optimizer: OptimizerKind::Sgd,
            ..small_config()
        };
        let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
        ppo_update(&mut w, &b, &cfg, &mut opt, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(w.policy, w0.policy);
        assert_ne!(w.value, w0.value);
    }

    #[test]
    fn unchanged_weights_give_unit_ratios() {
        let (w, b) = filled_buffer(7);
        let adv = normalize_advantages(&b.advantages);
        let mb = Minibatch {
            obs: &b.obs,
            actions: &b.actions,
            old_log_probs: &b.log_probs,
            advantages: &adv,
            returns: &b.returns,
        };
        let rep = ppo_loss(&w, &mb, &small_config()).unwrap();
        // ratio 1 → surrogate is the mean normalized advantage, i.e. 0
        assert!(rep.policy_loss.abs() < 1e-12);
    }

    #[test]
    fn bandit_update_raises_matching_log_probability() {
        let (mut w, b) = filled_buffer(8);
        let matching = |w: &PolicyWeights| {
            let (logits, _) = w.forward(&b.obs, b.len()).unwrap();
            let mut s = 0.0;
            for (i, l) in logits.iter().enumerate() {
                let a = BandEnv::optimal(&b.obs[i * 3..i * 3 + 3]).index();
                s += log_probs(*l)[a];
            }
            s / b.len() as f64
        };
        let before = matching(&w);
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            optimizer: OptimizerKind::Sgd,
            train_batch_size: 200,
            minibatch_size: 200,
            ..small_config()
        };
        let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
        ppo_update(&mut w, &b, &cfg, &mut opt, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(matching(&w) > before);
    }

    #[test]
    fn pooled_agents_equal_separate_single_agent_envs() {
        // k single-agent trajectories and one k-agent env with the same data
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w0 = PolicyWeights::new(3, [1, 1], &[8, 8], &mut rng);
        let mut pooled = vec![RolloutWorker::new(BandEnv::new(3, 3, 2, 2))];
        let mut b = collect_rollouts(&mut pooled, &w0, 4, &mut rng).unwrap();
        b.compute_advantages(0.99, 1.0);
        let mut split = TrajectoryBuffer::new(3);
        for &(s, l, boot) in &b.segments {
            let mut part = TrajectoryBuffer::new(3);
            part.obs = b.obs[s * 3..(s + l) * 3].to_vec();
            part.actions = b.actions[s..s + l].to_vec();
            part.log_probs = b.log_probs[s..s + l].to_vec();
            part.rewards = b.rewards[s..s + l].to_vec();
            part.values = b.values[s..s + l].to_vec();
            part.dones = b.dones[s..s + l].to_vec();
            part.segments = vec![(0, l, boot)];
            split.extend(part);
        }
        split.compute_advantages(0.99, 1.0);
        assert_eq!(split.advantages, b.advantages);
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            train_batch_size: 12,
            minibatch_size: 12,
            optimizer: OptimizerKind::Sgd,
            hidden: vec![8, 8],
            ..Default::default()
        };
        let (mut wa, mut wb) = (w0.clone(), w0.clone());
        ppo_update(&mut wa, &b, &cfg, &mut Optimizer::new(cfg.optimizer, cfg.learning_rate), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        ppo_update(&mut wb, &split, &cfg, &mut Optimizer::new(cfg.optimizer, cfg.learning_rate), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(wa, wb);
    }

    #[test]
    fn band_environment_reward_improves() {
        let cfg = TrainConfig {
            iterations: 30,
            ..small_config()
        };
        let envs = vec![BandEnv::new(10, 3, 5, 4)];
        let mut t = Trainer::new(envs, cfg, None).unwrap();
        let first = t.train_iteration().unwrap().mean_reward;
        let mut last = first;
        for _ in 0..40 {
            last = t.train_iteration().unwrap().mean_reward;
        }
        assert!(last > first + 0.2, "{first} -> {last}");
    }
}
