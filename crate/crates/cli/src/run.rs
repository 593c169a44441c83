//! Output layout and the train / resume / evaluate drivers.
//!
//! ```text
//! <out>/config.snapshot
//! <out>/summary.csv
//! <out>/seed-<n>/metrics.jsonl
//! <out>/seed-<n>/checkpoint.bin
//! <out>/seed-<n>/result.json
//! <out>/seed-<n>/checkpoints/update-<k>.bin
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use maskrl_core::harness::{
    aggregate_seeds, eval_seed, evaluate, finish_experiment, EvalResult, EvalSampling, ExperimentResult, HarnessError,
};
use maskrl_core::ppo::{PpoError, Trainer};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
use crate::config::{Mode, RunConfig};
use crate::sink::{write_summary_csv, MetricsSink};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
}

impl RunError {
    /// Training produced a NaN or infinity.
    pub fn is_non_finite(&self) -> bool {
        matches!(
            self,
            RunError::Ppo(PpoError::NonFinite { .. }) | RunError::Harness(HarnessError::Ppo(PpoError::NonFinite { .. }))
        )
    }
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

pub fn numbered_checkpoint(seed_dir: &Path, update: u64) -> PathBuf {
    seed_dir.join("checkpoints").join(format!("update-{update:06}.bin"))
}

/// What a finished invocation produced.
#[derive(Debug)]
pub enum Report {
    Trained(Vec<ExperimentResult>),
    Evaluated(EvalResult),
}

pub fn execute(cfg: &RunConfig, progress: &mut dyn Write) -> Result<Report, RunError> {
    match &cfg.mode {
        Mode::Train => train_all(cfg, progress).map(Report::Trained),
        Mode::Resume { path, expect_map } => {
            let ckpt = load_checkpoint(path, *expect_map)?;
            let result = resume(cfg, ckpt, progress)?;
            write_summary(&cfg.out_dir, std::slice::from_ref(&result))?;
            Ok(Report::Trained(vec![result]))
        }
        Mode::EvalNoMask(path) => eval_no_mask(cfg, path).map(Report::Evaluated),
    }
}

fn train_all(cfg: &RunConfig, progress: &mut dyn Write) -> Result<Vec<ExperimentResult>, RunError> {
    fs::create_dir_all(&cfg.out_dir).map_err(io_at(&cfg.out_dir))?;
    let snap = cfg.out_dir.join("config.snapshot");
    fs::write(&snap, cfg.snapshot()).map_err(io_at(&snap))?;
    let mut results = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let trainer = Trainer::new(cfg.ppo.clone(), cfg.strategy, cfg.env.clone(), seed)?;
        let dir = seed_dir(&cfg.out_dir, seed);
        fs::create_dir_all(&dir).map_err(io_at(&dir))?;
        let metrics = dir.join("metrics.jsonl");
        let sink = MetricsSink::create(&metrics).map_err(io_at(&metrics))?;
        results.push(drive(cfg, Checkpoint { seed, trainer }, sink, &dir, progress)?);
    }
    write_summary(&cfg.out_dir, &results)?;
    Ok(results)
}

/// Continues a run from `ckpt`; the metrics file is rebuilt from the
/// checkpoint's log so it matches an uninterrupted run.
pub fn resume(cfg: &RunConfig, ckpt: Checkpoint, progress: &mut dyn Write) -> Result<ExperimentResult, RunError> {
    let dir = seed_dir(&cfg.out_dir, ckpt.seed);
    fs::create_dir_all(&dir).map_err(io_at(&dir))?;
    let metrics = dir.join("metrics.jsonl");
    let mut sink = MetricsSink::create(&metrics).map_err(io_at(&metrics))?;
    sink.write_log(&ckpt.trainer.log).map_err(io_at(&metrics))?;
    drive(cfg, ckpt, sink, &dir, progress)
}

fn drive(
    cfg: &RunConfig,
    mut ckpt: Checkpoint,
    mut sink: MetricsSink,
    dir: &Path,
    progress: &mut dyn Write,
) -> Result<ExperimentResult, RunError> {
    let metrics = dir.join("metrics.jsonl");
    let latest = dir.join("checkpoint.bin");
    let total = ckpt.trainer.num_updates();
    while !ckpt.trainer.is_finished() {
        let out = ckpt.trainer.train_update()?;
        sink.write_update(&out.episodes, &out.update).map_err(io_at(&metrics))?;
        let u = out.update.update;
        if let Some(every) = cfg.checkpoint_interval {
            if u % every == 0 {
                let numbered = numbered_checkpoint(dir, u);
                let parent = numbered.parent().expect("has parent");
                fs::create_dir_all(parent).map_err(io_at(parent))?;
                save_checkpoint(&numbered, &ckpt)?;
                save_checkpoint(&latest, &ckpt)?;
            }
        }
        if u % 10 == 0 || u == total {
            let _ = writeln!(
                progress,
                "seed {} update {u}/{total} step {} kl {:.5} entropy {:.3}",
                ckpt.seed, out.update.step, out.update.approx_kl, out.update.entropy
            );
        }
    }
    save_checkpoint(&latest, &ckpt)?;
    let result = finish_experiment(&ckpt.trainer, ckpt.seed, cfg.eval_episodes)?;
    let path = dir.join("result.json");
    let json = serde_json::to_string_pretty(&result).expect("result serializes");
    fs::write(&path, json).map_err(io_at(&path))?;
    Ok(result)
}

/// Mean of several masks-removed evaluations, episodes concatenated.
fn pool(evals: &[&EvalResult]) -> Option<EvalResult> {
    let first = evals.first()?;
    let n = evals.len() as f64;
    let mean = |f: fn(&EvalResult) -> f64| evals.iter().map(|e| f(e)).sum::<f64>() / n;
    Some(EvalResult {
        sampling: first.sampling,
        episodes: evals.iter().flat_map(|e| e.episodes.iter().cloned()).collect(),
        mean_return: mean(|e| e.mean_return),
        a_null: mean(|e| e.a_null),
        a_busy: mean(|e| e.a_busy),
        a_owner: mean(|e| e.a_owner),
    })
}

pub fn write_summary(out: &Path, results: &[ExperimentResult]) -> Result<(), RunError> {
    let rows: Vec<_> = aggregate_seeds(results)
        .into_iter()
        .map(|s| {
            let removed: Vec<&EvalResult> = results
                .iter()
                .filter(|r| r.strategy.name() == s.strategy && r.map_size == s.map_size)
                .filter_map(|r| r.masking_removed.as_ref())
                .collect();
            let pooled = pool(&removed);
            (s, pooled)
        })
        .collect();
    let path = out.join("summary.csv");
    write_summary_csv(&path, &rows).map_err(io_at(&path))
}

fn eval_no_mask(cfg: &RunConfig, path: &Path) -> Result<EvalResult, RunError> {
    let ckpt = load_checkpoint(path, None)?;
    let t = &ckpt.trainer;
    let mut rng = ChaCha8Rng::seed_from_u64(eval_seed(ckpt.seed));
    let result = evaluate(
        &t.network,
        &t.collector.obs_stats,
        &t.env_config,
        &t.config,
        EvalSampling::Unmasked,
        cfg.eval_episodes,
        &mut rng,
    )?;
    fs::create_dir_all(&cfg.out_dir).map_err(io_at(&cfg.out_dir))?;
    let out = cfg.out_dir.join("eval_no_mask.json");
    let json = serde_json::to_string_pretty(&result).expect("result serializes");
    fs::write(&out, json).map_err(io_at(&out))?;
    Ok(result)
}

/// All training statistics are finite.
pub fn all_finite(results: &[ExperimentResult]) -> bool {
    results.iter().all(|r| {
        r.approx_kl.iter().all(|x| x.is_finite())
            && r.episode_returns.iter().all(|x| x.is_finite())
            && r.metrics.r_episode.is_finite()
    })
}
