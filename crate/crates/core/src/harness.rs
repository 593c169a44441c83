//! Invalid-action strategies, evaluation metrics and experiment runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{CompositeAction, Env, EnvConfig, InvalidClass, NUM_PLANES};
use crate::maskdist::{CompositeDistribution, MaskError, ValidityMask, DEFAULT_MASK_VALUE, NUM_HEADS};
use crate::model::Network;
use crate::numerics::{Tape, Tensor, Var};
use crate::ppo::{EpisodeRecord, EpisodeTracker, PpoConfig, PpoError, RunLog, RunningStats, Trainer, UpdateOutcome};

/// Episodes averaged by the final metrics and by the solve criterion.
pub const METRIC_WINDOW: usize = 10;
/// Trailing mean return counted as solving the task.
pub const SOLVE_THRESHOLD: f64 = 40.0;
/// The standard penalty sweep.
pub const PENALTY_SWEEP: [f64; 4] = [0.0, -0.01, -0.1, -1.0];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    /// No masking; `r_invalid ≤ 0` is added to the reward of invalid steps.
    Penalty { r_invalid: f64 },
    /// Sample and grade from the masked distribution.
    Masking,
    /// Sample from the masked distribution, grade on the unmasked one.
    NaiveMasking,
    /// Evaluation only: a masking-trained policy sampled without masks.
    MaskingRemoved,
}

impl Strategy {
    pub fn penalty(r_invalid: f64) -> Result<Self> {
        if !(r_invalid <= 0.0) || !r_invalid.is_finite() {
            return Err(HarnessError::InvalidStrategy(format!(
                "penalty reward must be a finite non-positive number, got {r_invalid}"
            )));
        }
        Ok(Strategy::Penalty { r_invalid })
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Penalty { .. } => "penalty",
            Strategy::Masking => "masking",
            Strategy::NaiveMasking => "naive",
            Strategy::MaskingRemoved => "masking_removed",
        }
    }

    pub fn r_invalid(self) -> Option<f64> {
        match self {
            Strategy::Penalty { r_invalid } => Some(r_invalid),
            _ => None,
        }
    }

    pub fn sample_masked(self) -> bool {
        matches!(self, Strategy::Masking | Strategy::NaiveMasking)
    }

    pub fn grade_masked(self) -> bool {
        matches!(self, Strategy::Masking)
    }

    pub fn trainable(self) -> bool {
        self != Strategy::MaskingRemoved
    }
}

/// Sampled actions and their log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ActOutput {
    pub actions: Vec<[usize; NUM_HEADS]>,
    /// Under the distribution the actions were drawn from.
    pub behavior_log_probs: Vec<f64>,
    /// Under the distribution the policy gradient uses.
    pub gradient_log_probs: Vec<f64>,
    /// Whether the gradient distribution applies the masks.
    pub grade_masked: bool,
}

/// Samples one composite action per row of `head_logits`.
pub fn act<R: Rng + ?Sized>(
    strategy: Strategy,
    tape: &mut Tape<f32>,
    head_logits: &[Var],
    masks: &[&ValidityMask],
    rng: &mut R,
) -> std::result::Result<ActOutput, MaskError> {
    let fill = DEFAULT_MASK_VALUE as f32;
    let sample_masks = strategy.sample_masked().then_some(masks);
    let sampling = CompositeDistribution::new(tape, head_logits, sample_masks, fill)?;
    let actions = sampling.sample(tape, rng);
    let lp = sampling.log_prob(tape, &actions)?;
    let behavior: Vec<f64> = tape.value(lp).iter().map(|&v| v as f64).collect();
    let grade_masked = strategy.grade_masked();
    let gradient = if grade_masked == strategy.sample_masked() {
        behavior.clone()
    } else {
        let grade_masks = grade_masked.then_some(masks);
        let grading = CompositeDistribution::new(tape, head_logits, grade_masks, fill)?;
        let lp = grading.log_prob(tape, &actions)?;
        tape.value(lp).iter().map(|&v| v as f64).collect()
    };
    Ok(ActOutput {
        actions,
        behavior_log_probs: behavior,
        gradient_log_probs: gradient,
        grade_masked,
    })
}

/// Adds the penalty to invalid steps; other strategies pass rewards through.
pub fn shape_reward(strategy: Strategy, env_reward: f32, class: InvalidClass) -> f32 {
    match strategy {
        Strategy::Penalty { r_invalid } if !class.is_valid() => env_reward + r_invalid as f32,
        _ => env_reward,
    }
}

/// The six evaluation metrics of one run. Times are percentages of the
/// configured total timesteps.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub r_episode: f64,
    pub a_null: f64,
    pub a_busy: f64,
    pub a_owner: f64,
    pub t_solve: Option<f64>,
    pub t_first: Option<f64>,
    /// Fewer than [`METRIC_WINDOW`] episodes were available.
    pub partial_window: bool,
}

/// Means over the final episodes, the first step whose trailing mean return
/// reaches the threshold, and the first positive reward.
pub fn compute_metrics(episodes: &[EpisodeRecord], first_positive_step: Option<u64>, total_timesteps: u64) -> Metrics {
    let pct = |step: u64| 100.0 * step as f64 / total_timesteps as f64;
    let tail = &episodes[episodes.len().saturating_sub(METRIC_WINDOW)..];
    let mean = |f: &dyn Fn(&EpisodeRecord) -> f64| {
        if tail.is_empty() {
            0.0
        } else {
            tail.iter().map(f).sum::<f64>() / tail.len() as f64
        }
    };
    let t_solve = episodes.windows(METRIC_WINDOW).find_map(|w| {
        let m = w.iter().map(|e| e.episode_return).sum::<f64>() / METRIC_WINDOW as f64;
        (m >= SOLVE_THRESHOLD).then(|| pct(w[METRIC_WINDOW - 1].step))
    });
    Metrics {
        r_episode: mean(&|e| e.episode_return),
        a_null: mean(&|e| e.a_null as f64),
        a_busy: mean(&|e| e.a_busy as f64),
        a_owner: mean(&|e| e.a_owner as f64),
        t_solve,
        t_first: first_positive_step.map(pct),
        partial_window: episodes.len() < METRIC_WINDOW,
    }
}

/// How actions are drawn during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSampling {
    Masked,
    Unmasked,
}

impl EvalSampling {
    /// The sampling rule a policy trained with `strategy` acts with.
    pub fn for_strategy(strategy: Strategy) -> Self {
        if strategy.sample_masked() {
            EvalSampling::Masked
        } else {
            EvalSampling::Unmasked
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub sampling: EvalSampling,
    pub episodes: Vec<EpisodeRecord>,
    pub mean_return: f64,
    pub a_null: f64,
    pub a_busy: f64,
    pub a_owner: f64,
}

/// Runs `episodes` full episodes without learning. Observations are
/// normalized with the frozen `obs_stats`.
pub fn evaluate<R: Rng + ?Sized>(
    network: &Network<f32>,
    obs_stats: &RunningStats,
    env_config: &EnvConfig,
    config: &PpoConfig,
    sampling: EvalSampling,
    episodes: usize,
    rng: &mut R,
) -> Result<EvalResult> {
    let strategy = match sampling {
        EvalSampling::Masked => Strategy::Masking,
        EvalSampling::Unmasked => Strategy::MaskingRemoved,
    };
    let mut env = Env::new(env_config.clone()).map_err(PpoError::from)?;
    let size = env_config.map_size;
    let mut records = Vec::with_capacity(episodes);
    let mut step = 0u64;
    for _ in 0..episodes {
        let (mut raw, mut mask) = env.reset();
        let mut tracker = EpisodeTracker::default();
        loop {
            let mut norm = vec![0.0f32; obs_stats.dim()];
            obs_stats.normalize_into(raw.values(), config.obs_clip, config.norm_epsilon, &mut norm);
            let obs = Tensor::new(vec![1, size, size, NUM_PLANES], norm).expect("sized by construction");
            let mut tape = Tape::new();
            let fwd = network.forward(&mut tape, &obs, false).map_err(PpoError::from)?;
            let out = act(strategy, &mut tape, &fwd.head_logits, &[&mask], rng)?;
            let r = env.step(&CompositeAction::from_components(out.actions[0]));
            step += 1;
            tracker.record(r.reward, r.invalid_class);
            if r.done {
                break;
            }
            raw = r.observation;
            mask = r.masks;
        }
        records.push(EpisodeRecord {
            step,
            episode_return: tracker.episode_return,
            length: tracker.length,
            a_null: tracker.a_null,
            a_busy: tracker.a_busy,
            a_owner: tracker.a_owner,
        });
    }
    let n = records.len().max(1) as f64;
    let mean = |f: &dyn Fn(&EpisodeRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    Ok(EvalResult {
        sampling,
        mean_return: mean(&|e| e.episode_return),
        a_null: mean(&|e| e.a_null as f64),
        a_busy: mean(&|e| e.a_busy as f64),
        a_owner: mean(&|e| e.a_owner as f64),
        episodes: records,
    })
}

/// Outcome of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub strategy: Strategy,
    pub map_size: usize,
    pub seed: u64,
    pub total_timesteps: u64,
    pub metrics: Metrics,
    pub approx_kl: Vec<f64>,
    pub episode_returns: Vec<f64>,
    /// Evaluation of the trained policy with its own sampling rule.
    pub evaluation: Option<EvalResult>,
    /// Masking runs only: evaluation with the masks removed.
    pub masking_removed: Option<EvalResult>,
}

/// Seed of the evaluation RNG, kept apart from the training stream.
pub fn eval_seed(seed: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15
}

/// Builds the result of a finished trainer, including post-training
/// evaluations over `eval_episodes` episodes.
pub fn finish_experiment(trainer: &Trainer, seed: u64, eval_episodes: usize) -> Result<ExperimentResult> {
    let log: &RunLog = &trainer.log;
    let metrics = compute_metrics(
        &log.episodes,
        trainer.collector.first_positive_step,
        trainer.config.total_timesteps,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(eval_seed(seed));
    let mut run_eval = |sampling| {
        evaluate(
            &trainer.network,
            &trainer.collector.obs_stats,
            &trainer.env_config,
            &trainer.config,
            sampling,
            eval_episodes,
            &mut rng,
        )
    };
    let (evaluation, masking_removed) = if eval_episodes == 0 {
        (None, None)
    } else {
        let own = run_eval(EvalSampling::for_strategy(trainer.strategy))?;
        let removed = if trainer.strategy == Strategy::Masking {
            Some(run_eval(EvalSampling::Unmasked)?)
        } else {
            None
        };
        (Some(own), removed)
    };
    Ok(ExperimentResult {
        strategy: trainer.strategy,
        map_size: trainer.env_config.map_size,
        seed,
        total_timesteps: trainer.config.total_timesteps,
        metrics,
        approx_kl: log.updates.iter().map(|u| u.approx_kl).collect(),
        episode_returns: log.episodes.iter().map(|e| e.episode_return).collect(),
        evaluation,
        masking_removed,
    })
}

/// Trains `strategy` on `map_size` and evaluates the result over
/// [`METRIC_WINDOW`] episodes. `observer` sees every update as it happens.
pub fn run_experiment(
    strategy: Strategy,
    map_size: usize,
    seed: u64,
    config: &PpoConfig,
    observer: &mut dyn FnMut(&UpdateOutcome),
) -> Result<ExperimentResult> {
    let mut trainer = Trainer::new(config.clone(), strategy, EnvConfig::new(map_size), seed)?;
    while !trainer.is_finished() {
        let outcome = trainer.train_update()?;
        observer(&outcome);
    }
    finish_experiment(&trainer, seed, METRIC_WINDOW)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// A time metric that some runs never reach.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Censored {
    pub reached_fraction: f64,
    /// Over the runs that reached it.
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

impl Censored {
    pub fn of(values: &[Option<f64>]) -> Self {
        let reached: Vec<f64> = values.iter().flatten().copied().collect();
        if reached.is_empty() {
            return Self::default();
        }
        let ms = MeanStd::of(&reached);
        Self {
            reached_fraction: reached.len() as f64 / values.len() as f64,
            mean: Some(ms.mean),
            std: Some(ms.std),
        }
    }
}

/// One row per (strategy, map, r_invalid).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub strategy: String,
    pub map_size: usize,
    pub r_invalid: Option<f64>,
    pub seeds: usize,
    pub r_episode: MeanStd,
    pub a_null: MeanStd,
    pub a_busy: MeanStd,
    pub a_owner: MeanStd,
    pub t_solve: Censored,
    pub t_first: Censored,
}

/// Groups results by (strategy, map, r_invalid) in first-seen order.
pub fn aggregate_seeds(results: &[ExperimentResult]) -> Vec<Summary> {
    let mut groups: Vec<Vec<&ExperimentResult>> = Vec::new();
    for r in results {
        let key = |x: &ExperimentResult| (x.strategy, x.map_size);
        match groups.iter_mut().find(|g| key(g[0]) == key(r)) {
            Some(g) => g.push(r),
            None => groups.push(vec![r]),
        }
    }
    groups
        .into_iter()
        .map(|g| {
            let col = |f: &dyn Fn(&Metrics) -> f64| MeanStd::of(&g.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>());
            Summary {
                strategy: g[0].strategy.name().to_string(),
                map_size: g[0].map_size,
                r_invalid: g[0].strategy.r_invalid(),
                seeds: g.len(),
                r_episode: col(&|m| m.r_episode),
                a_null: col(&|m| m.a_null),
                a_busy: col(&|m| m.a_busy),
                a_owner: col(&|m| m.a_owner),
                t_solve: Censored::of(&g.iter().map(|r| r.metrics.t_solve).collect::<Vec<_>>()),
                t_first: Censored::of(&g.iter().map(|r| r.metrics.t_first).collect::<Vec<_>>()),
            }
        })
        .collect()
}
