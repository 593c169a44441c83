//! PPO pieces against brute-force and closed-form references.

use maskrl_core::env::{EnvConfig, InvalidClass};
use maskrl_core::harness::Strategy;
use maskrl_core::maskdist::{CompositeDistribution, DEFAULT_MASK_VALUE, NUM_HEADS};
use maskrl_core::model::Network;
use maskrl_core::numerics::{AdamState, Tape};
use maskrl_core::ppo::{
    build_loss, collect_rollout, compute_gae, epoch_minibatches, normalize_advantages, ppo_update, Collector, Gae,
    Minibatch, PpoConfig, RewardScaler, RolloutBuffer, Trainer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn synthetic(rewards: &[f32], values: &[f32], dones: &[bool], bootstrap: &[f32], envs: usize) -> RolloutBuffer {
    let len = rewards.len();
    RolloutBuffer {
        horizon: len / envs,
        num_envs: envs,
        map_size: 4,
        observations: vec![],
        masks: vec![],
        actions: vec![[0; NUM_HEADS]; len],
        log_probs: vec![0.0; len],
        rewards: rewards.to_vec(),
        dones: dones.to_vec(),
        values: values.to_vec(),
        invalid_classes: vec![InvalidClass::Valid; len],
        bootstrap_values: bootstrap.to_vec(),
    }
}

#[test]
fn gae_two_steps_matches_k_step_expansion() {
    let (g, l) = (0.99f64, 0.97f64);
    let buf = synthetic(&[0.0, 1.0], &[0.5, 0.5], &[false, false], &[0.0], 1);
    let gae = compute_gae(&buf, g, l);
    // k-step advantages from t=0; the last available estimate takes the remaining weight
    let a1 = 0.0 + g * 0.5 - 0.5;
    let a2 = 0.0 + g * 1.0 + g * g * 0.0 - 0.5;
    let want0 = (1.0 - l) * a1 + l * a2;
    let want1 = 1.0 + g * 0.0 - 0.5;
    assert!((gae.advantages[0] as f64 - want0).abs() < 1e-6);
    assert!((gae.advantages[1] as f64 - want1).abs() < 1e-6);
    assert!((gae.returns[0] as f64 - (want0 + 0.5)).abs() < 1e-6);
}

/// `A_t = Σ_k (γλ)^k δ_{t+k}` summed forward until the episode or the
/// buffer ends.
fn brute_force_gae(buf: &RolloutBuffer, g: f64, l: f64) -> Vec<f64> {
    let (h, n) = (buf.horizon, buf.num_envs);
    let delta = |t: usize, e: usize| {
        let i = t * n + e;
        let next = if buf.dones[i] {
            0.0
        } else if t + 1 == h {
            buf.bootstrap_values[e] as f64
        } else {
            buf.values[i + n] as f64
        };
        buf.rewards[i] as f64 + g * next - buf.values[i] as f64
    };
    let mut out = vec![0.0; h * n];
    for e in 0..n {
        for t in 0..h {
            let mut acc = 0.0;
            let mut w = 1.0;
            for k in t..h {
                acc += w * delta(k, e);
                if buf.dones[k * n + e] {
                    break;
                }
                w *= g * l;
            }
            out[t * n + e] = acc;
        }
    }
    out
}

#[test]
fn gae_matches_brute_force_with_dones() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let (h, n) = (rng.random_range(1..20), rng.random_range(1..4));
        let rewards: Vec<f32> = (0..h * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let values: Vec<f32> = (0..h * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dones: Vec<bool> = (0..h * n).map(|_| rng.random_bool(0.2)).collect();
        let boot: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let buf = synthetic(&rewards, &values, &dones, &boot, n);
        let gae = compute_gae(&buf, 0.99, 0.97);
        let want = brute_force_gae(&buf, 0.99, 0.97);
        for (a, b) in gae.advantages.iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
        }
    }
}

#[test]
fn normalized_advantages_have_zero_mean_unit_std() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let n = rng.random_range(2..300);
        let scale = rng.random_range(0.01..100.0);
        let x: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale + 3.0).collect();
        let y = normalize_advantages(&x);
        let mean = y.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let std = (y.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((std - 1.0).abs() < 1e-4, "std {std}");
    }
    assert!(normalize_advantages(&[2.0; 5]).iter().all(|v| v.abs() < 1e-6));
}

#[test]
fn constant_reward_scaling_matches_closed_form_variance() {
    let g: f64 = 0.99;
    let steps = 1000usize;
    let mut scaler = RewardScaler::new(1, g);
    let mut out = Vec::new();
    for _ in 0..steps {
        out.push(scaler.scale(&[1.0], &[false], 10.0, 1e-8)[0]);
    }
    // R_t = (1 − γ^t) / (1 − γ), t = 1..N; population variance in closed form
    let n = steps as f64;
    let gn = g.powi(steps as i32);
    let sum = (n - g * (1.0 - gn) / (1.0 - g)) / (1.0 - g);
    let sum_sq = (n - 2.0 * g * (1.0 - gn) / (1.0 - g) + g * g * (1.0 - gn * gn) / (1.0 - g * g)) / (1.0 - g).powi(2);
    let var = sum_sq / n - (sum / n).powi(2);
    let want = 1.0 / (var + 1e-8).sqrt();
    let last = out[steps - 1] as f64;
    assert!((last - want).abs() < 1e-4 * want, "{last} vs {want}");
    assert!(out.iter().all(|v| (-10.0..=10.0).contains(v)));
    assert_eq!(out[0], 10.0);
    let tail = &out[steps - 50..];
    let spread = tail.iter().cloned().fold(f32::MIN, f32::max) - tail.iter().cloned().fold(f32::MAX, f32::min);
    assert!(spread < 0.05 * last as f32, "still drifting: {spread} at {last}");
}

#[test]
fn minibatches_cover_every_index_once_per_epoch() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut indices: Vec<usize> = (0..512).collect();
    for _ in 0..10 {
        let mut seen: Vec<usize> = Vec::new();
        let mut batches = 0;
        for chunk in epoch_minibatches(&mut indices, 128, &mut rng) {
            assert_eq!(chunk.len(), 128);
            seen.extend_from_slice(chunk);
            batches += 1;
        }
        assert_eq!(batches, 4);
        seen.sort_unstable();
        assert_eq!(seen, (0..512).collect::<Vec<_>>());
    }
}

fn small_config() -> PpoConfig {
    PpoConfig {
        total_timesteps: 2048,
        horizon: 32,
        num_envs: 2,
        num_minibatches: 2,
        ..PpoConfig::default()
    }
}

fn rollout(strategy: Strategy, map: usize, seed: u64, horizon: usize) -> (Network, RolloutBuffer, PpoConfig) {
    let config = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let network: Network = Network::new(map, &mut rng).unwrap();
    let mut collector = Collector::new(&EnvConfig::new(map), &config).unwrap();
    let mut episodes = Vec::new();
    let buf = collect_rollout(&mut collector, &network, strategy, &config, horizon, &mut rng, &mut episodes).unwrap();
    (network, buf, config)
}

/// Current log-probabilities of the buffer's actions under `network`.
fn current_log_probs(network: &Network, mb: &Minibatch<'_>, grade_masked: bool) -> Vec<f32> {
    let mut tape = Tape::new();
    let f = network.forward(&mut tape, &mb.obs, false).unwrap();
    let masks = grade_masked.then_some(mb.masks.as_slice());
    let d = CompositeDistribution::new(&mut tape, &f.head_logits, masks, DEFAULT_MASK_VALUE as f32).unwrap();
    let lp = d.log_prob(&mut tape, &mb.actions).unwrap();
    tape.value(lp).to_vec()
}

fn grads(tape: &Tape<f32>, loss: maskrl_core::numerics::Var, network: &Network, params: &[maskrl_core::numerics::Var]) -> Vec<f32> {
    let g = tape.backward(loss).unwrap();
    params
        .iter()
        .zip(network.params())
        .flat_map(|(&v, p)| g.get_or_zeros(v, p.numel()))
        .collect()
}

#[test]
fn masking_rollout_never_selects_invalid_sources() {
    for map in [4, 10] {
        let (_, buf, _) = rollout(Strategy::Masking, map, 3, 200);
        assert_eq!(buf.len(), 400);
        for c in &buf.invalid_classes {
            assert!(matches!(c, InvalidClass::Valid | InvalidClass::BadParameter), "map {map}: {c:?}");
        }
    }
}

#[test]
fn rollouts_are_seed_deterministic() {
    let (_, a, _) = rollout(Strategy::Penalty { r_invalid: -0.1 }, 4, 5, 64);
    let (_, b, _) = rollout(Strategy::Penalty { r_invalid: -0.1 }, 4, 5, 64);
    assert_eq!(a.observations, b.observations);
    assert_eq!(a.actions, b.actions);
    assert_eq!(a.log_probs, b.log_probs);
    assert_eq!(a.rewards, b.rewards);
    assert_eq!(a.values, b.values);
}

#[test]
fn identity_ratio_gives_zero_kl_and_vanilla_policy_gradient() {
    for (strategy, grade_masked) in [(Strategy::Masking, true), (Strategy::Penalty { r_invalid: 0.0 }, false)] {
        let (network, buf, mut config) = rollout(strategy, 4, 7, 32);
        config.ent_coef = 0.0;
        config.vf_coef = 0.0;
        config.clip_coef = 1e6;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let adv: Vec<f32> = (0..buf.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let gae = Gae {
            returns: adv.clone(),
            advantages: adv.clone(),
        };
        let idx: Vec<usize> = (0..buf.len()).collect();
        let mut mb = Minibatch::from_indices(&buf, &gae, &idx, false);
        mb.old_log_probs = current_log_probs(&network, &mb, grade_masked);

        let mut tape = Tape::new();
        let loss = build_loss(&mut tape, &network, &mb, &config, grade_masked).unwrap();
        assert!(tape.value(loss.ratio).iter().all(|&r| r == 1.0));
        let new: Vec<f64> = tape.value(loss.new_log_probs).iter().map(|&v| v as f64).collect();
        let old: Vec<f64> = mb.old_log_probs.iter().map(|&v| v as f64).collect();
        assert_eq!(maskrl_core::maskdist::approx_kl(&old, &new), 0.0);
        let mean_adv = adv.iter().map(|&a| a as f64).sum::<f64>() / adv.len() as f64;
        assert!((tape.value(loss.policy)[0] as f64 + mean_adv).abs() < 1e-6);
        let ppo_grad = grads(&tape, loss.total, &network, &loss.forward.params);

        // −mean(A · log π(a|s)), built directly
        let mut t2 = Tape::new();
        let f = network.forward(&mut t2, &mb.obs, true).unwrap();
        let masks = grade_masked.then_some(mb.masks.as_slice());
        let d = CompositeDistribution::new(&mut t2, &f.head_logits, masks, DEFAULT_MASK_VALUE as f32).unwrap();
        let lp = d.log_prob(&mut t2, &mb.actions).unwrap();
        let a = t2.constant(vec![adv.len()], adv.iter().map(|a| -a).collect()).unwrap();
        let prod = t2.mul(lp, a).unwrap();
        let pg = t2.mean(prod).unwrap();
        let vanilla = grads(&t2, pg, &network, &f.params);

        let scale = vanilla.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1.0);
        for (x, y) in ppo_grad.iter().zip(&vanilla) {
            assert!((x - y).abs() <= 1e-6 * scale, "{x} vs {y}");
        }
    }
}

#[test]
fn clipped_ratio_blocks_the_policy_gradient() {
    let (network, buf, mut config) = rollout(Strategy::Masking, 4, 9, 32);
    config.ent_coef = 0.0;
    config.vf_coef = 0.0;
    let eps = config.clip_coef as f32;
    let gae = Gae {
        advantages: vec![1.0; buf.len()],
        returns: vec![0.0; buf.len()],
    };
    let idx: Vec<usize> = (0..buf.len()).collect();
    let mut mb = Minibatch::from_indices(&buf, &gae, &idx, false);
    mb.old_log_probs = current_log_probs(&network, &mb, true)
        .iter()
        .map(|lp| lp - (1.0 + 2.0 * eps).ln())
        .collect();
    let mut tape = Tape::new();
    let loss = build_loss(&mut tape, &network, &mb, &config, true).unwrap();
    for &r in tape.value(loss.ratio) {
        assert!((r - (1.0 + 2.0 * eps)).abs() < 1e-4);
    }
    let g = grads(&tape, loss.total, &network, &loss.forward.params);
    assert!(g.iter().all(|&x| x == 0.0));
}

#[test]
fn value_clip_is_inactive_near_old_values() {
    let (network, buf, config) = rollout(Strategy::Masking, 4, 4, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gae = Gae {
        advantages: vec![0.5; buf.len()],
        returns: (0..buf.len()).map(|_| rng.random_range(-3.0..3.0)).collect(),
    };
    let idx: Vec<usize> = (0..buf.len()).collect();
    let mut mb = Minibatch::from_indices(&buf, &gae, &idx, false);
    let mut tape = Tape::new();
    let f = network.forward(&mut tape, &mb.obs, false).unwrap();
    let v: Vec<f32> = tape.value(f.value).to_vec();
    mb.old_values = v.iter().map(|x| x + rng.random_range(-0.15..0.15)).collect();
    let mut tape = Tape::new();
    let loss = build_loss(&mut tape, &network, &mb, &config, true).unwrap();
    let unclipped = v.iter().zip(&mb.returns).map(|(a, r)| ((a - r) as f64).powi(2)).sum::<f64>() / v.len() as f64;
    assert!((tape.value(loss.value)[0] as f64 - unclipped).abs() < 1e-5 * unclipped.max(1.0));
}

fn full_batch_loss(network: &Network, buf: &RolloutBuffer, gae: &Gae, config: &PpoConfig) -> f64 {
    let idx: Vec<usize> = (0..buf.len()).collect();
    let mb = Minibatch::from_indices(buf, gae, &idx, true);
    let mut tape = Tape::new();
    let loss = build_loss(&mut tape, network, &mb, config, true).unwrap();
    tape.value(loss.total)[0] as f64
}

#[test]
fn one_update_decreases_the_surrogate() {
    let (mut network, buf, config) = rollout(Strategy::Masking, 4, 12, 64);
    let gae = compute_gae(&buf, config.gamma, config.gae_lambda);
    let before = full_batch_loss(&network, &buf, &gae, &config);
    let mut adam = AdamState::new(network.params());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let diag = ppo_update(&mut network, &mut adam, &buf, &gae, &config, true, 3e-4, &mut rng, 1).unwrap();
    assert!(diag.is_finite());
    let after = full_batch_loss(&network, &buf, &gae, &config);
    assert!(after < before, "loss {before} -> {after}");
}

#[test]
fn training_is_bitwise_reproducible() {
    let run = || {
        let mut t = Trainer::new(small_config(), Strategy::NaiveMasking, EnvConfig::new(4), 21).unwrap();
        for _ in 0..3 {
            t.train_update().unwrap();
        }
        t
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let kl = |t: &Trainer| t.log.updates.iter().map(|u| u.approx_kl.to_bits()).collect::<Vec<_>>();
    assert_eq!(kl(&a), kl(&b));
}
