//! Versioned checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 8 | magic `MASKRLCK` |
//! | 4 | format version (`u32`) |
//! | 8 | header length `n` (`u64`) |
//! | n | UTF-8 JSON header |
//! | rest | array payloads, concatenated in header order |
//!
//! The header holds scalar state (configs, RNG, environment states, logs)
//! and an `arrays` list of `{name, dtype, shape}`; each payload is the
//! row-major array as little-endian `f32` or `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use maskrl_core::env::{Env, EnvConfig, GameState};
use maskrl_core::harness::Strategy;
use maskrl_core::model::{Architecture, Network};
use maskrl_core::numerics::{AdamState, Tensor};
use maskrl_core::ppo::{Collector, EpisodeTracker, PpoConfig, RewardScaler, RunLog, RunningStats, Trainer};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"MASKRLCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint field {field}: expected {expected}, found {found}")]
    Mismatch {
        field: String,
        expected: String,
        found: String,
    },
    #[error("checkpoint field {0} is missing or truncated")]
    Missing(String),
}

fn mismatch(field: impl Into<String>, expected: impl ToString, found: impl ToString) -> CheckpointError {
    CheckpointError::Mismatch {
        field: field.into(),
        expected: expected.to_string(),
        found: found.to_string(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    map_size: usize,
    strategy: Strategy,
    seed: u64,
    steps_done: u64,
    updates_done: u64,
    ppo: PpoConfig,
    env: EnvConfig,
    rng: ChaCha8Rng,
    games: Vec<GameState>,
    trackers: Vec<EpisodeTracker>,
    first_positive_step: Option<u64>,
    obs_count: f64,
    reward_count: f64,
    reward_returns: Vec<f64>,
    reward_gamma: f64,
    adam_step_count: u64,
    adam_beta1: f32,
    adam_beta2: f32,
    adam_epsilon: f32,
    log: RunLog,
    arrays: Vec<ArraySpec>,
}

/// A resumable training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub trainer: Trainer,
}

impl Checkpoint {
    pub fn map_size(&self) -> usize {
        self.trainer.env_config.map_size
    }

    pub fn strategy(&self) -> Strategy {
        self.trainer.strategy
    }
}

enum Payload<'a> {
    F32(&'a [f32]),
    F64(&'a [f64]),
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let t = &ckpt.trainer;
    let mut arrays = Vec::new();
    let mut payloads = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, p: Payload<'_>| {
        let dtype = match p {
            Payload::F32(_) => DType::F32,
            Payload::F64(_) => DType::F64,
        };
        arrays.push(ArraySpec { name, dtype, shape });
        let bytes: Vec<u8> = match p {
            Payload::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Payload::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        };
        payloads.push(bytes);
    };
    for (name, p) in t.network.names().iter().zip(t.network.params()) {
        push(format!("params/{name}"), p.shape().to_vec(), Payload::F32(p.values()));
    }
    for (i, name) in t.network.names().iter().enumerate() {
        let shape = t.network.params()[i].shape().to_vec();
        push(format!("adam_m/{name}"), shape.clone(), Payload::F32(&t.adam.m[i]));
        push(format!("adam_v/{name}"), shape, Payload::F32(&t.adam.v[i]));
    }
    let obs = &t.collector.obs_stats;
    push("obs_stats/mean".into(), vec![obs.dim()], Payload::F64(&obs.mean));
    push("obs_stats/m2".into(), vec![obs.dim()], Payload::F64(&obs.m2));
    let rew = &t.collector.reward_scaler.stats;
    push("reward_stats/mean".into(), vec![rew.dim()], Payload::F64(&rew.mean));
    push("reward_stats/m2".into(), vec![rew.dim()], Payload::F64(&rew.m2));

    let header = Header {
        map_size: t.env_config.map_size,
        strategy: t.strategy,
        seed: ckpt.seed,
        steps_done: t.collector.global_step,
        updates_done: t.updates_done,
        ppo: t.config.clone(),
        env: t.env_config.clone(),
        rng: t.rng.clone(),
        games: t.collector.envs.iter().map(|e| e.state().clone()).collect(),
        trackers: t.collector.trackers.clone(),
        first_positive_step: t.collector.first_positive_step,
        obs_count: obs.count,
        reward_count: rew.count,
        reward_returns: t.collector.reward_scaler.returns.clone(),
        reward_gamma: t.collector.reward_scaler.gamma,
        adam_step_count: t.adam.step_count,
        adam_beta1: t.adam.beta1,
        adam_beta2: t.adam.beta2,
        adam_epsilon: t.adam.epsilon,
        log: t.log.clone(),
        arrays,
    };
    let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let mut bytes = Vec::with_capacity(20 + json.len() + payloads.iter().map(Vec::len).sum::<usize>());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for p in &payloads {
        bytes.extend_from_slice(p);
    }
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

struct Arrays {
    f32s: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    f64s: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl Arrays {
    fn f32(&mut self, name: &str) -> Result<(Vec<usize>, Vec<f32>), CheckpointError> {
        self.f32s.remove(name).ok_or_else(|| CheckpointError::Missing(name.into()))
    }

    fn f64(&mut self, name: &str, len: usize) -> Result<Vec<f64>, CheckpointError> {
        let (_, v) = self.f64s.remove(name).ok_or_else(|| CheckpointError::Missing(name.into()))?;
        if v.len() != len {
            return Err(mismatch(name, format!("{len} values"), format!("{} values", v.len())));
        }
        Ok(v)
    }
}

fn split_arrays(specs: &[ArraySpec], mut data: &[u8]) -> Result<Arrays, CheckpointError> {
    let mut arrays = Arrays {
        f32s: BTreeMap::new(),
        f64s: BTreeMap::new(),
    };
    for spec in specs {
        let n: usize = spec.shape.iter().product();
        let len = n * spec.dtype.width();
        if data.len() < len {
            return Err(CheckpointError::Missing(spec.name.clone()));
        }
        let (chunk, rest) = data.split_at(len);
        data = rest;
        match spec.dtype {
            DType::F32 => {
                let v = chunk
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                    .collect();
                arrays.f32s.insert(spec.name.clone(), (spec.shape.clone(), v));
            }
            DType::F64 => {
                let v = chunk
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect();
                arrays.f64s.insert(spec.name.clone(), (spec.shape.clone(), v));
            }
        }
    }
    if !data.is_empty() {
        return Err(CheckpointError::Header(format!("{} trailing bytes", data.len())));
    }
    Ok(arrays)
}

/// Reads a checkpoint; with `expected_map_size` set, any other map size is
/// refused.
pub fn load_checkpoint(path: &Path, expected_map_size: Option<usize>) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(CheckpointError::Missing("header".into()));
    }
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if let Some(want) = expected_map_size {
        if header.map_size != want {
            return Err(mismatch("map_size", want, header.map_size));
        }
    }
    if header.env.map_size != header.map_size {
        return Err(mismatch("env.map_size", header.map_size, header.env.map_size));
    }
    let mut arrays = split_arrays(&header.arrays, &body[hlen..])?;

    let arch = Architecture::for_map(header.map_size).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let mut params = Vec::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (name, want) in arch.param_shapes() {
        for (prefix, out) in [("params", &mut params), ("adam_m", &mut m), ("adam_v", &mut v)] {
            let field = format!("{prefix}/{name}");
            let (shape, values) = arrays.f32(&field)?;
            if shape != want {
                return Err(mismatch(field, format!("{want:?}"), format!("{shape:?}")));
            }
            out.push(Tensor::new(shape, values).expect("shape checked"));
        }
    }
    let network = Network::from_params(header.map_size, params).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let adam = AdamState {
        m: m.into_iter().map(Tensor::into_values).collect(),
        v: v.into_iter().map(Tensor::into_values).collect(),
        step_count: header.adam_step_count,
        beta1: header.adam_beta1,
        beta2: header.adam_beta2,
        epsilon: header.adam_epsilon,
    };

    let dim = header.map_size * header.map_size * maskrl_core::env::NUM_PLANES;
    let obs_stats = RunningStats {
        count: header.obs_count,
        mean: arrays.f64("obs_stats/mean", dim)?,
        m2: arrays.f64("obs_stats/m2", dim)?,
    };
    let reward_stats = RunningStats {
        count: header.reward_count,
        mean: arrays.f64("reward_stats/mean", 1)?,
        m2: arrays.f64("reward_stats/m2", 1)?,
    };
    let n = header.ppo.num_envs;
    for (field, len) in [
        ("games", header.games.len()),
        ("trackers", header.trackers.len()),
        ("reward_returns", header.reward_returns.len()),
    ] {
        if len != n {
            return Err(mismatch(field, format!("{n} entries"), format!("{len} entries")));
        }
    }
    let mut envs = Vec::with_capacity(n);
    for (i, g) in header.games.into_iter().enumerate() {
        if g.height != header.map_size || g.width != header.map_size || g.cells.len() != dim / maskrl_core::env::NUM_PLANES {
            return Err(mismatch(format!("games[{i}]"), header.map_size, format!("{}x{}", g.height, g.width)));
        }
        let mut env = Env::new(header.env.clone()).map_err(|e| CheckpointError::Header(e.to_string()))?;
        env.set_state(g);
        envs.push(env);
    }
    let collector = Collector {
        envs,
        obs_stats,
        reward_scaler: RewardScaler {
            stats: reward_stats,
            returns: header.reward_returns,
            gamma: header.reward_gamma,
        },
        trackers: header.trackers,
        global_step: header.steps_done,
        first_positive_step: header.first_positive_step,
    };
    Ok(Checkpoint {
        seed: header.seed,
        trainer: Trainer {
            config: header.ppo,
            strategy: header.strategy,
            env_config: header.env,
            network,
            adam,
            collector,
            rng: header.rng,
            updates_done: header.updates_done,
            log: header.log,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trainer(map: usize) -> Trainer {
        let config = PpoConfig {
            total_timesteps: 1024,
            horizon: 16,
            num_envs: 2,
            num_minibatches: 2,
            update_epochs: 1,
            ..PpoConfig::default()
        };
        Trainer::new(config, Strategy::Masking, EnvConfig::new(map), 7).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let mut t = trainer(4);
        for _ in 0..15 {
            t.train_update().unwrap();
        }
        assert!(!t.log.episodes.is_empty());
        let ckpt = Checkpoint { seed: 7, trainer: t };
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path, Some(4)).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn wrong_map_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        save_checkpoint(&path, &Checkpoint { seed: 1, trainer: trainer(4) }).unwrap();
        match load_checkpoint(&path, Some(10)) {
            Err(CheckpointError::Mismatch { field, .. }) => assert_eq!(field, "map_size"),
            other => panic!("expected a map_size mismatch, got {other:?}"),
        }
    }

    #[test]
    fn version_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        save_checkpoint(&path, &Checkpoint { seed: 1, trainer: trainer(4) }).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path, None),
            Err(CheckpointError::Version { found: 2, expected: 1 })
        ));
        fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(load_checkpoint(&path, None), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn truncated_payload_names_the_array() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        save_checkpoint(&path, &Checkpoint { seed: 1, trainer: trainer(4) }).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        match load_checkpoint(&path, None) {
            Err(CheckpointError::Missing(name)) => assert_eq!(name, "reward_stats/m2"),
            other => panic!("expected a missing array, got {other:?}"),
        }
    }
}
