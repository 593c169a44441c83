//! PPO with GAE, observation/reward normalization, clipped policy and value
//! losses, minibatch epochs, learning-rate annealing and global gradient
//! clipping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Env, EnvConfig, EnvError, InvalidClass, NUM_PLANES};
use crate::harness::{act, shape_reward, Strategy};
use crate::maskdist::{approx_kl, CompositeDistribution, MaskError, ValidityMask, DEFAULT_MASK_VALUE, NUM_HEADS};
use crate::model::{Forward, ModelError, Network};
use crate::numerics::{clip_global_norm, AdamState, NumericsError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite {what} at update {update}")]
    NonFinite { what: &'static str, update: u64 },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, PpoError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub total_timesteps: u64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_coef: f64,
    pub ent_coef: f64,
    pub vf_coef: f64,
    pub max_grad_norm: f64,
    pub update_epochs: usize,
    pub learning_rate: f64,
    pub anneal_lr: bool,
    pub num_envs: usize,
    pub horizon: usize,
    pub num_minibatches: usize,
    pub obs_clip: f64,
    pub reward_clip: f64,
    pub norm_epsilon: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            total_timesteps: 500_000,
            gamma: 0.99,
            gae_lambda: 0.97,
            clip_coef: 0.2,
            ent_coef: 0.01,
            vf_coef: 0.5,
            max_grad_norm: 0.5,
            update_epochs: 10,
            learning_rate: 3e-4,
            anneal_lr: true,
            num_envs: 4,
            horizon: 128,
            num_minibatches: 4,
            obs_clip: 10.0,
            reward_clip: 10.0,
            norm_epsilon: 1e-8,
        }
    }
}

impl PpoConfig {
    pub fn batch_size(&self) -> usize {
        self.num_envs * self.horizon
    }

    pub fn minibatch_size(&self) -> usize {
        self.batch_size() / self.num_minibatches
    }

    /// Whole rollouts that fit in `total_timesteps`.
    pub fn num_updates(&self) -> u64 {
        self.total_timesteps / self.batch_size() as u64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(PpoError::InvalidConfig(msg.into()));
        if self.num_envs == 0 || self.horizon == 0 || self.num_minibatches == 0 || self.update_epochs == 0 {
            return bad("num_envs, horizon, num_minibatches and update_epochs must be positive");
        }
        if self.batch_size() % self.num_minibatches != 0 || self.minibatch_size() < 2 {
            return bad("num_envs * horizon must split into minibatches of at least 2");
        }
        if self.num_updates() == 0 {
            return bad("total_timesteps is smaller than one rollout");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gamma and gae_lambda must lie in [0, 1]");
        }
        let positive = [
            self.clip_coef,
            self.max_grad_norm,
            self.learning_rate,
            self.obs_clip,
            self.reward_clip,
            self.norm_epsilon,
        ];
        if positive.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return bad("clip_coef, max_grad_norm, learning_rate, clip ranges and epsilon must be positive");
        }
        if !(self.ent_coef >= 0.0) || !(self.vf_coef >= 0.0) {
            return bad("ent_coef and vf_coef must be non-negative");
        }
        Ok(())
    }
}

/// `α · (1 − steps_done / total)`, floored at 0.
pub fn lr_schedule(config: &PpoConfig, steps_done: u64) -> f64 {
    if !config.anneal_lr {
        return config.learning_rate;
    }
    let frac = 1.0 - steps_done as f64 / config.total_timesteps as f64;
    config.learning_rate * frac.max(0.0)
}

/// Per-dimension running mean and variance (Welford).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub count: f64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl RunningStats {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn update(&mut self, x: &[f64]) {
        assert_eq!(x.len(), self.dim(), "RunningStats::update: dimension mismatch");
        self.count += 1.0;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let delta = v - *m;
            *m += delta / self.count;
            *s += delta * (v - *m);
        }
    }

    /// Population variance; zero before any update.
    pub fn variance(&self) -> Vec<f64> {
        if self.count == 0.0 {
            return vec![0.0; self.dim()];
        }
        self.m2.iter().map(|s| (s / self.count).max(0.0)).collect()
    }

    /// `(x − mean) / √(var + eps)` clipped to `±clip`, written into `out`.
    pub fn normalize_into(&self, x: &[f32], clip: f64, eps: f64, out: &mut [f32]) {
        assert_eq!(x.len(), self.dim());
        assert_eq!(out.len(), self.dim());
        let denom = |s: f64| {
            let var = if self.count == 0.0 { 0.0 } else { (s / self.count).max(0.0) };
            (var + eps).sqrt()
        };
        for (((o, &v), &m), &s) in out.iter_mut().zip(x).zip(&self.mean).zip(&self.m2) {
            *o = ((v as f64 - m) / denom(s)).clamp(-clip, clip) as f32;
        }
    }
}

/// Divides rewards by the running standard deviation of each stream's
/// discounted return.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardScaler {
    pub stats: RunningStats,
    pub returns: Vec<f64>,
    pub gamma: f64,
}

impl RewardScaler {
    pub fn new(streams: usize, gamma: f64) -> Self {
        Self {
            stats: RunningStats::new(1),
            returns: vec![0.0; streams],
            gamma,
        }
    }

    /// Scales one reward per stream; streams whose episode ended restart
    /// their discounted return.
    pub fn scale(&mut self, rewards: &[f32], dones: &[bool], clip: f64, eps: f64) -> Vec<f32> {
        assert_eq!(rewards.len(), self.returns.len());
        assert_eq!(dones.len(), self.returns.len());
        for (ret, &r) in self.returns.iter_mut().zip(rewards) {
            *ret = *ret * self.gamma + r as f64;
            self.stats.update(&[*ret]);
        }
        let std = (self.stats.variance()[0] + eps).sqrt();
        let out = rewards
            .iter()
            .map(|&r| (r as f64 / std).clamp(-clip, clip) as f32)
            .collect();
        for (ret, &d) in self.returns.iter_mut().zip(dones) {
            if d {
                *ret = 0.0;
            }
        }
        out
    }
}

/// One finished episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    /// Global timestep at which the episode ended.
    pub step: u64,
    #[serde(rename = "return")]
    pub episode_return: f64,
    pub length: u64,
    pub a_null: u64,
    pub a_busy: u64,
    pub a_owner: u64,
}

/// Running totals for the episode in progress in one environment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTracker {
    pub episode_return: f64,
    pub length: u64,
    pub a_null: u64,
    pub a_busy: u64,
    pub a_owner: u64,
}

impl EpisodeTracker {
    pub fn record(&mut self, env_reward: f32, class: InvalidClass) {
        self.episode_return += env_reward as f64;
        self.length += 1;
        match class {
            InvalidClass::NullSource => self.a_null += 1,
            InvalidClass::BusySource => self.a_busy += 1,
            InvalidClass::WrongOwner => self.a_owner += 1,
            InvalidClass::Valid | InvalidClass::BadParameter => {}
        }
    }

    fn finish(&mut self, step: u64) -> EpisodeRecord {
        let t = std::mem::take(self);
        EpisodeRecord {
            step,
            episode_return: t.episode_return,
            length: t.length,
            a_null: t.a_null,
            a_busy: t.a_busy,
            a_owner: t.a_owner,
        }
    }
}

/// Fixed-horizon transitions, stored step-major (`t * num_envs + env`).
#[derive(Clone, Debug)]
pub struct RolloutBuffer {
    pub horizon: usize,
    pub num_envs: usize,
    pub map_size: usize,
    /// Normalized observations.
    pub observations: Vec<f32>,
    pub masks: Vec<ValidityMask>,
    pub actions: Vec<[usize; NUM_HEADS]>,
    /// Behavior log-probabilities under the sampling distribution.
    pub log_probs: Vec<f32>,
    /// Shaped and scaled rewards.
    pub rewards: Vec<f32>,
    /// The episode ended after this transition.
    pub dones: Vec<bool>,
    pub values: Vec<f32>,
    pub invalid_classes: Vec<InvalidClass>,
    pub bootstrap_values: Vec<f32>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.horizon * self.num_envs
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn obs_len(&self) -> usize {
        self.map_size * self.map_size * NUM_PLANES
    }

    /// Observations for `indices` as a `[b, h, w, 27]` tensor.
    pub fn gather_obs(&self, indices: &[usize]) -> Tensor<f32> {
        let n = self.obs_len();
        let mut v = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            v.extend_from_slice(&self.observations[i * n..(i + 1) * n]);
        }
        Tensor::new(vec![indices.len(), self.map_size, self.map_size, NUM_PLANES], v).expect("sized by construction")
    }
}

/// Advantages and value targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Gae {
    pub advantages: Vec<f32>,
    pub returns: Vec<f32>,
}

/// GAE over the buffer, cutting the recursion after terminal transitions;
/// `returns = advantages + values`.
pub fn compute_gae(buffer: &RolloutBuffer, gamma: f64, lambda: f64) -> Gae {
    let (t_max, n) = (buffer.horizon, buffer.num_envs);
    let mut adv = vec![0.0f32; t_max * n];
    for e in 0..n {
        let mut last = 0.0f64;
        for t in (0..t_max).rev() {
            let i = t * n + e;
            let next_value = if t + 1 == t_max {
                buffer.bootstrap_values[e]
            } else {
                buffer.values[i + n]
            } as f64;
            let live = if buffer.dones[i] { 0.0 } else { 1.0 };
            let delta = buffer.rewards[i] as f64 + gamma * next_value * live - buffer.values[i] as f64;
            last = delta + gamma * lambda * live * last;
            adv[i] = last as f32;
        }
    }
    let returns = adv.iter().zip(&buffer.values).map(|(a, v)| a + v).collect();
    Gae {
        advantages: adv,
        returns,
    }
}

/// Zero mean, unit (population) standard deviation, with `1e-8` in the
/// denominator.
pub fn normalize_advantages(advantages: &[f32]) -> Vec<f32> {
    let n = advantages.len() as f64;
    let mean = advantages.iter().map(|&a| a as f64).sum::<f64>() / n;
    let var = advantages.iter().map(|&a| (a as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    advantages
        .iter()
        .map(|&a| ((a as f64 - mean) / (std + 1e-8)) as f32)
        .collect()
}

/// Environment instances plus the running statistics that travel with them.
#[derive(Clone, Debug, PartialEq)]
pub struct Collector {
    pub envs: Vec<Env>,
    pub obs_stats: RunningStats,
    pub reward_scaler: RewardScaler,
    pub trackers: Vec<EpisodeTracker>,
    pub global_step: u64,
    /// Global timestep of the first strictly positive environment reward.
    pub first_positive_step: Option<u64>,
}

impl Collector {
    /// Fresh environments; the initial observations seed the statistics.
    pub fn new(env_config: &EnvConfig, config: &PpoConfig) -> Result<Self> {
        let envs = (0..config.num_envs)
            .map(|_| Env::new(env_config.clone()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let dim = env_config.map_size * env_config.map_size * NUM_PLANES;
        let mut c = Self {
            envs,
            obs_stats: RunningStats::new(dim),
            reward_scaler: RewardScaler::new(config.num_envs, config.gamma),
            trackers: vec![EpisodeTracker::default(); config.num_envs],
            global_step: 0,
            first_positive_step: None,
        };
        for e in 0..c.envs.len() {
            let raw = c.envs[e].observation();
            c.observe(raw.values());
        }
        Ok(c)
    }

    fn observe(&mut self, raw: &[f32]) {
        let x: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
        self.obs_stats.update(&x);
    }

    /// Normalized current observations of all environments, `[n, h, w, 27]`.
    pub fn current_obs(&self, config: &PpoConfig) -> Tensor<f32> {
        let dim = self.obs_stats.dim();
        let size = self.envs[0].state().height;
        let mut out = vec![0.0f32; dim * self.envs.len()];
        for (env, chunk) in self.envs.iter().zip(out.chunks_exact_mut(dim)) {
            let raw = env.observation();
            self.obs_stats
                .normalize_into(raw.values(), config.obs_clip, config.norm_epsilon, chunk);
        }
        Tensor::new(vec![self.envs.len(), size, size, NUM_PLANES], out).expect("sized by construction")
    }
}

/// Steps every environment `horizon` times with `strategy`'s sampling rule.
/// Finished episodes are appended to `episodes`.
pub fn collect_rollout(
    collector: &mut Collector,
    network: &Network<f32>,
    strategy: Strategy,
    config: &PpoConfig,
    horizon: usize,
    rng: &mut ChaCha8Rng,
    episodes: &mut Vec<EpisodeRecord>,
) -> Result<RolloutBuffer> {
    let n = collector.envs.len();
    let map_size = collector.envs[0].state().height;
    let dim = collector.obs_stats.dim();
    let mut buf = RolloutBuffer {
        horizon,
        num_envs: n,
        map_size,
        observations: Vec::with_capacity(horizon * n * dim),
        masks: Vec::with_capacity(horizon * n),
        actions: Vec::with_capacity(horizon * n),
        log_probs: Vec::with_capacity(horizon * n),
        rewards: Vec::with_capacity(horizon * n),
        dones: Vec::with_capacity(horizon * n),
        values: Vec::with_capacity(horizon * n),
        invalid_classes: Vec::with_capacity(horizon * n),
        bootstrap_values: vec![0.0; n],
    };
    let mut obs = collector.current_obs(config);
    let mut masks: Vec<ValidityMask> = collector.envs.iter().map(Env::masks).collect();
    for _ in 0..horizon {
        let mut tape = Tape::new();
        let fwd = network.forward(&mut tape, &obs, false)?;
        let mask_refs: Vec<&ValidityMask> = masks.iter().collect();
        let out = act(strategy, &mut tape, &fwd.head_logits, &mask_refs, rng)?;
        let values = tape.value(fwd.value).to_vec();

        buf.observations.extend_from_slice(obs.values());
        buf.values.extend_from_slice(&values);
        buf.log_probs.extend(out.behavior_log_probs.iter().map(|&l| l as f32));
        buf.actions.extend_from_slice(&out.actions);
        buf.masks.append(&mut masks);

        collector.global_step += n as u64;
        let mut shaped = Vec::with_capacity(n);
        let mut dones = Vec::with_capacity(n);
        let mut next_masks = Vec::with_capacity(n);
        let mut raws = Vec::with_capacity(n);
        for (e, a) in out.actions.iter().enumerate() {
            let action = crate::env::CompositeAction::from_components(*a);
            let r = collector.envs[e].step(&action);
            if r.reward > 0.0 && collector.first_positive_step.is_none() {
                collector.first_positive_step = Some(collector.global_step);
            }
            collector.trackers[e].record(r.reward, r.invalid_class);
            shaped.push(shape_reward(strategy, r.reward, r.invalid_class));
            buf.invalid_classes.push(r.invalid_class);
            dones.push(r.done);
            if r.done {
                episodes.push(collector.trackers[e].finish(collector.global_step));
                let (o, m) = collector.envs[e].reset();
                raws.push(o);
                next_masks.push(m);
            } else {
                raws.push(r.observation);
                next_masks.push(r.masks);
            }
        }
        for raw in &raws {
            collector.observe(raw.values());
        }
        let scaled = collector
            .reward_scaler
            .scale(&shaped, &dones, config.reward_clip, config.norm_epsilon);
        buf.rewards.extend_from_slice(&scaled);
        buf.dones.extend_from_slice(&dones);

        let mut next = vec![0.0f32; n * dim];
        for (raw, chunk) in raws.iter().zip(next.chunks_exact_mut(dim)) {
            collector
                .obs_stats
                .normalize_into(raw.values(), config.obs_clip, config.norm_epsilon, chunk);
        }
        obs = Tensor::new(vec![n, map_size, map_size, NUM_PLANES], next).expect("sized by construction");
        masks = next_masks;
    }
    let mut tape = Tape::new();
    let fwd = network.forward(&mut tape, &obs, false)?;
    buf.bootstrap_values = tape.value(fwd.value).to_vec();
    Ok(buf)
}

/// A slice of the buffer with everything the loss needs.
#[derive(Clone, Debug)]
pub struct Minibatch<'a> {
    pub obs: Tensor<f32>,
    pub masks: Vec<&'a ValidityMask>,
    pub actions: Vec<[usize; NUM_HEADS]>,
    pub old_log_probs: Vec<f32>,
    /// Already normalized.
    pub advantages: Vec<f32>,
    pub returns: Vec<f32>,
    pub old_values: Vec<f32>,
}

impl<'a> Minibatch<'a> {
    pub fn from_indices(buffer: &'a RolloutBuffer, gae: &Gae, indices: &[usize], normalize: bool) -> Self {
        let pick = |v: &[f32]| indices.iter().map(|&i| v[i]).collect::<Vec<f32>>();
        let adv = pick(&gae.advantages);
        Self {
            obs: buffer.gather_obs(indices),
            masks: indices.iter().map(|&i| &buffer.masks[i]).collect(),
            actions: indices.iter().map(|&i| buffer.actions[i]).collect(),
            old_log_probs: pick(&buffer.log_probs),
            advantages: if normalize { normalize_advantages(&adv) } else { adv },
            returns: pick(&gae.returns),
            old_values: pick(&buffer.values),
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Loss nodes for one minibatch.
#[derive(Clone, Debug)]
pub struct LossNodes {
    pub total: Var,
    pub policy: Var,
    pub value: Var,
    pub entropy: Var,
    /// `[b]` log-probabilities under the gradient distribution.
    pub new_log_probs: Var,
    pub ratio: Var,
    pub forward: Forward,
}

/// Clipped surrogate + 0.5 · clipped value loss − η · entropy.
pub fn build_loss(
    tape: &mut Tape<f32>,
    network: &Network<f32>,
    mb: &Minibatch<'_>,
    config: &PpoConfig,
    grade_masked: bool,
) -> Result<LossNodes> {
    let b = mb.len();
    let eps = config.clip_coef as f32;
    let forward = network.forward(tape, &mb.obs, true)?;
    let masks = grade_masked.then_some(mb.masks.as_slice());
    let dist = CompositeDistribution::new(tape, &forward.head_logits, masks, DEFAULT_MASK_VALUE as f32)?;
    let new_log_probs = dist.log_prob(tape, &mb.actions)?;

    let old = tape.constant(vec![b], mb.old_log_probs.clone())?;
    let log_ratio = tape.sub(new_log_probs, old)?;
    let ratio = tape.exp(log_ratio)?;
    let neg_adv = tape.constant(vec![b], mb.advantages.iter().map(|a| -a).collect())?;
    let pg1 = tape.mul(ratio, neg_adv)?;
    let clipped = tape.clamp(ratio, 1.0 - eps, 1.0 + eps)?;
    let pg2 = tape.mul(clipped, neg_adv)?;
    let pg = tape.maximum(pg1, pg2)?;
    let policy = tape.mean(pg)?;

    let returns = tape.constant(vec![b], mb.returns.clone())?;
    let old_v = tape.constant(vec![b], mb.old_values.clone())?;
    let err = tape.sub(forward.value, returns)?;
    let unclipped = tape.square(err)?;
    let dv = tape.sub(forward.value, old_v)?;
    let dv = tape.clamp(dv, -eps, eps)?;
    let v_clipped = tape.add(old_v, dv)?;
    let err_c = tape.sub(v_clipped, returns)?;
    let clipped_loss = tape.square(err_c)?;
    let v = tape.maximum(unclipped, clipped_loss)?;
    let value = tape.mean(v)?;

    let ent = dist.entropy(tape)?;
    let entropy = tape.mean(ent)?;

    let v_term = tape.scale(value, config.vf_coef as f32)?;
    let e_term = tape.scale(entropy, -(config.ent_coef as f32))?;
    let total = tape.add(policy, v_term)?;
    let total = tape.add(total, e_term)?;
    Ok(LossNodes {
        total,
        policy,
        value,
        entropy,
        new_log_probs,
        ratio,
        forward,
    })
}

/// Means over every minibatch of every epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateDiagnostics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

impl UpdateDiagnostics {
    pub fn is_finite(&self) -> bool {
        [
            self.policy_loss,
            self.value_loss,
            self.entropy,
            self.approx_kl,
            self.clip_fraction,
            self.grad_norm,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Shuffles `indices` in place and splits them into minibatches.
pub fn epoch_minibatches<'a>(indices: &'a mut [usize], mb_size: usize, rng: &mut ChaCha8Rng) -> std::slice::Chunks<'a, usize> {
    indices.shuffle(rng);
    indices.chunks(mb_size)
}

/// `K` epochs of shuffled minibatch updates. Nothing is applied for a
/// minibatch whose loss or gradient is non-finite; the error names it.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update(
    network: &mut Network<f32>,
    adam: &mut AdamState<f32>,
    buffer: &RolloutBuffer,
    gae: &Gae,
    config: &PpoConfig,
    grade_masked: bool,
    lr: f64,
    rng: &mut ChaCha8Rng,
    update: u64,
) -> Result<UpdateDiagnostics> {
    let mut indices: Vec<usize> = (0..buffer.len()).collect();
    let mb_size = config.minibatch_size();
    let mut sums = UpdateDiagnostics::default();
    let mut count = 0.0;
    for _ in 0..config.update_epochs {
        for chunk in epoch_minibatches(&mut indices, mb_size, rng) {
            let mb = Minibatch::from_indices(buffer, gae, chunk, true);
            let mut tape = Tape::new();
            let loss = build_loss(&mut tape, network, &mb, config, grade_masked)?;
            let scalar = |v: Var| tape.value(v)[0] as f64;
            let total = scalar(loss.total);
            if !total.is_finite() {
                return Err(PpoError::NonFinite { what: "loss", update });
            }
            let new_lp = tape.value(loss.new_log_probs);
            let old_lp: Vec<f64> = mb.old_log_probs.iter().map(|&l| l as f64).collect();
            let new_lp: Vec<f64> = new_lp.iter().map(|&l| l as f64).collect();
            let kl = approx_kl(&old_lp, &new_lp);
            let clipped = tape
                .value(loss.ratio)
                .iter()
                .filter(|&&r| ((r - 1.0).abs() as f64) > config.clip_coef)
                .count();
            sums.policy_loss += scalar(loss.policy);
            sums.value_loss += scalar(loss.value);
            sums.entropy += scalar(loss.entropy);
            sums.approx_kl += kl;
            sums.clip_fraction += clipped as f64 / mb.len() as f64;

            let grads = tape.backward(loss.total)?;
            let mut g: Vec<Vec<f32>> = loss
                .forward
                .params
                .iter()
                .zip(network.params())
                .map(|(&v, p)| grads.get_or_zeros(v, p.numel()))
                .collect();
            let norm = clip_global_norm(&mut g, config.max_grad_norm as f32);
            if !norm.is_finite() {
                return Err(PpoError::NonFinite { what: "gradient", update });
            }
            sums.grad_norm += norm as f64;
            adam.step(network.params_mut(), &g, lr as f32)?;
            count += 1.0;
        }
    }
    let mean = UpdateDiagnostics {
        policy_loss: sums.policy_loss / count,
        value_loss: sums.value_loss / count,
        entropy: sums.entropy / count,
        approx_kl: sums.approx_kl / count,
        clip_fraction: sums.clip_fraction / count,
        grad_norm: sums.grad_norm / count,
    };
    if !mean.is_finite() {
        return Err(PpoError::NonFinite {
            what: "diagnostics",
            update,
        });
    }
    Ok(mean)
}

/// One update's worth of logging.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub step: u64,
    pub update: u64,
    pub approx_kl: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub lr: f64,
}

/// What happened during one call to [`Trainer::train_update`].
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateOutcome {
    pub episodes: Vec<EpisodeRecord>,
    pub update: UpdateRecord,
}

/// Everything logged so far in a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub episodes: Vec<EpisodeRecord>,
    pub updates: Vec<UpdateRecord>,
}

/// A training run: network, optimizer, environments, statistics and RNG.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub config: PpoConfig,
    pub strategy: Strategy,
    pub env_config: EnvConfig,
    pub network: Network<f32>,
    pub adam: AdamState<f32>,
    pub collector: Collector,
    pub rng: ChaCha8Rng,
    pub updates_done: u64,
    pub log: RunLog,
}

impl Trainer {
    pub fn new(config: PpoConfig, strategy: Strategy, env_config: EnvConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if !strategy.trainable() {
            return Err(PpoError::InvalidConfig(format!("{} is an evaluation mode", strategy.name())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let network = Network::new(env_config.map_size, &mut rng)?;
        let adam = AdamState::new(network.params());
        let collector = Collector::new(&env_config, &config)?;
        Ok(Self {
            config,
            strategy,
            env_config,
            network,
            adam,
            collector,
            rng,
            updates_done: 0,
            log: RunLog::default(),
        })
    }

    pub fn num_updates(&self) -> u64 {
        self.config.num_updates()
    }

    pub fn is_finished(&self) -> bool {
        self.updates_done >= self.num_updates()
    }

    pub fn global_step(&self) -> u64 {
        self.collector.global_step
    }

    /// Collects one rollout and runs the PPO update on it.
    pub fn train_update(&mut self) -> Result<UpdateOutcome> {
        let lr = lr_schedule(&self.config, self.collector.global_step);
        let mut episodes = Vec::new();
        let buffer = collect_rollout(
            &mut self.collector,
            &self.network,
            self.strategy,
            &self.config,
            self.config.horizon,
            &mut self.rng,
            &mut episodes,
        )?;
        let gae = compute_gae(&buffer, self.config.gamma, self.config.gae_lambda);
        self.updates_done += 1;
        let diag = ppo_update(
            &mut self.network,
            &mut self.adam,
            &buffer,
            &gae,
            &self.config,
            self.strategy.grade_masked(),
            lr,
            &mut self.rng,
            self.updates_done,
        )?;
        let update = UpdateRecord {
            step: self.collector.global_step,
            update: self.updates_done,
            approx_kl: diag.approx_kl,
            policy_loss: diag.policy_loss,
            value_loss: diag.value_loss,
            entropy: diag.entropy,
            clip_fraction: diag.clip_fraction,
            lr,
        };
        self.log.episodes.extend(episodes.iter().cloned());
        self.log.updates.push(update.clone());
        Ok(UpdateOutcome { episodes, update })
    }
}
