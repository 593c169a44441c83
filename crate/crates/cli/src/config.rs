//! Command-line flags, the TOML config file and their merge into a
//! [`RunConfig`].

use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use maskrl_core::env::{EnvConfig, UnitPlacement, SUPPORTED_MAP_SIZES};
use maskrl_core::harness::{Strategy, METRIC_WINDOW};
use maskrl_core::ppo::PpoConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_R_INVALID: f64 = -0.01;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Args(#[from] clap::Error),
    #[error("{0}")]
    Usage(String),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyName {
    Penalty,
    Masking,
    Naive,
}

#[derive(Parser, Debug, Default, Clone)]
#[command(name = "maskrl", version, about = "Train and evaluate invalid-action strategies on the harvest gridworld")]
pub struct Args {
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyName>,
    /// Reward added to invalid actions (penalty strategy only).
    #[arg(long, allow_hyphen_values = true)]
    pub r_invalid: Option<f64>,
    #[arg(long)]
    pub map_size: Option<usize>,
    /// One or more seeds, comma-separated or repeated.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    pub seed: Vec<u64>,
    #[arg(long)]
    pub total_timesteps: Option<u64>,
    /// Rollout length per environment.
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub minibatches: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Save a numbered checkpoint every N updates.
    #[arg(long, value_name = "N")]
    pub checkpoint_interval: Option<u64>,
    /// Evaluate a masking-trained checkpoint without masks, then exit.
    #[arg(long, value_name = "CKPT")]
    pub eval_no_mask: Option<PathBuf>,
    #[arg(long)]
    pub eval_episodes: Option<usize>,
    /// Continue training from a checkpoint.
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

/// Environment overrides in the config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    pub max_agent_steps: Option<u64>,
    pub frame_skip: Option<u32>,
    pub resources_per_mine: Option<u32>,
    pub layout: Option<Vec<UnitPlacement>>,
}

/// Schema of the `--config` file and of `config.snapshot`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub strategy: Option<StrategyName>,
    pub r_invalid: Option<f64>,
    pub map_size: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub total_timesteps: Option<u64>,
    pub horizon: Option<usize>,
    pub minibatches: Option<usize>,
    pub out: Option<PathBuf>,
    pub checkpoint_interval: Option<u64>,
    pub eval_episodes: Option<usize>,
    pub ppo: Option<PpoConfig>,
    pub env: Option<EnvSection>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Mode {
    Train,
    /// `expect_map` is the map size given on the command line or in the
    /// config file, if any; the checkpoint must match it.
    Resume { path: PathBuf, expect_map: Option<usize> },
    EvalNoMask(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub map_size: usize,
    pub seeds: Vec<u64>,
    pub ppo: PpoConfig,
    pub env: EnvConfig,
    pub out_dir: PathBuf,
    pub checkpoint_interval: Option<u64>,
    pub eval_episodes: usize,
    pub mode: Mode,
}

impl RunConfig {
    /// The resolved configuration in config-file form.
    pub fn snapshot(&self) -> String {
        let (strategy, r_invalid) = match self.strategy {
            Strategy::Penalty { r_invalid } => (StrategyName::Penalty, Some(r_invalid)),
            Strategy::NaiveMasking => (StrategyName::Naive, None),
            _ => (StrategyName::Masking, None),
        };
        let file = FileConfig {
            strategy: Some(strategy),
            r_invalid,
            map_size: Some(self.map_size),
            seeds: Some(self.seeds.clone()),
            out: Some(self.out_dir.clone()),
            checkpoint_interval: self.checkpoint_interval,
            eval_episodes: Some(self.eval_episodes),
            ppo: Some(self.ppo.clone()),
            env: Some(EnvSection {
                max_agent_steps: Some(self.env.max_agent_steps),
                frame_skip: Some(self.env.frame_skip),
                resources_per_mine: Some(self.env.resources_per_mine),
                layout: self.env.layout.clone(),
            }),
            ..FileConfig::default()
        };
        toml::to_string(&file).expect("config serializes")
    }
}

/// Flags override the config file, which overrides the defaults.
pub fn parse_config<I, S>(argv: I) -> Result<RunConfig, ConfigError>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let args = Args::try_parse_from(argv)?;
    let file = match &args.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    resolve(args, file)
}

fn usage(msg: impl Into<String>) -> ConfigError {
    ConfigError::Usage(msg.into())
}

pub fn resolve(args: Args, file: FileConfig) -> Result<RunConfig, ConfigError> {
    let name = args.strategy.or(file.strategy).unwrap_or(StrategyName::Masking);
    // a file pairing penalty with r_invalid stays usable under a --strategy override
    let file_r = file.r_invalid.filter(|_| name == StrategyName::Penalty || file.strategy != Some(StrategyName::Penalty));
    let r_invalid = args.r_invalid.or(file_r);
    let strategy = match name {
        StrategyName::Penalty => {
            let r = r_invalid.unwrap_or(DEFAULT_R_INVALID);
            Strategy::penalty(r).map_err(|e| usage(e.to_string()))?
        }
        other => {
            if r_invalid.is_some() {
                return Err(usage(format!(
                    "--r-invalid only applies to the penalty strategy, not {}",
                    if other == StrategyName::Naive { "naive" } else { "masking" }
                )));
            }
            if other == StrategyName::Naive {
                Strategy::NaiveMasking
            } else {
                Strategy::Masking
            }
        }
    };

    let given_map = args.map_size.or(file.map_size);
    let map_size = given_map.unwrap_or(4);
    if !SUPPORTED_MAP_SIZES.contains(&map_size) {
        return Err(usage(format!("--map-size must be one of 4, 10, 16, 24, got {map_size}")));
    }
    let seeds = if !args.seed.is_empty() {
        args.seed.clone()
    } else {
        file.seeds.clone().unwrap_or_else(|| vec![1])
    };
    if seeds.is_empty() {
        return Err(usage("at least one seed is required"));
    }

    let mut ppo = file.ppo.clone().unwrap_or_default();
    if let Some(v) = args.total_timesteps.or(file.total_timesteps) {
        ppo.total_timesteps = v;
    }
    if let Some(v) = args.horizon.or(file.horizon) {
        ppo.horizon = v;
    }
    if let Some(v) = args.minibatches.or(file.minibatches) {
        ppo.num_minibatches = v;
    }
    ppo.validate().map_err(|e| usage(e.to_string()))?;

    let mut env = EnvConfig::new(map_size);
    if let Some(e) = file.env.clone() {
        env.max_agent_steps = e.max_agent_steps.unwrap_or(env.max_agent_steps);
        env.frame_skip = e.frame_skip.unwrap_or(env.frame_skip);
        env.resources_per_mine = e.resources_per_mine.unwrap_or(env.resources_per_mine);
        env.layout = e.layout;
    }
    env.validate().map_err(|e| usage(e.to_string()))?;

    let checkpoint_interval = args.checkpoint_interval.or(file.checkpoint_interval);
    if checkpoint_interval == Some(0) {
        return Err(usage("--checkpoint-interval must be positive"));
    }
    let mode = match (args.resume.clone(), args.eval_no_mask.clone()) {
        (Some(_), Some(_)) => return Err(usage("--resume and --eval-no-mask are mutually exclusive")),
        (Some(path), None) => Mode::Resume {
            path,
            expect_map: given_map,
        },
        (None, Some(p)) => Mode::EvalNoMask(p),
        (None, None) => Mode::Train,
    };
    Ok(RunConfig {
        strategy,
        map_size,
        seeds,
        ppo,
        env,
        out_dir: args.out.clone().or(file.out.clone()).unwrap_or_else(|| PathBuf::from("runs")),
        checkpoint_interval,
        eval_episodes: args.eval_episodes.or(file.eval_episodes).unwrap_or(METRIC_WINDOW),
        mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(flags: &str) -> Result<RunConfig, ConfigError> {
        parse_config(std::iter::once("maskrl").chain(flags.split_whitespace()))
    }

    #[test]
    fn defaults_fill_everything_else() {
        let c = parse("--strategy masking --map-size 10 --seed 1").unwrap();
        assert_eq!(c.strategy, Strategy::Masking);
        assert_eq!(c.map_size, 10);
        assert_eq!(c.seeds, vec![1]);
        assert_eq!(c.ppo, PpoConfig::default());
        assert_eq!(c.ppo.learning_rate, 3e-4);
        assert_eq!(c.mode, Mode::Train);
    }

    #[test]
    fn penalty_default_reward() {
        let c = parse("--strategy penalty").unwrap();
        assert_eq!(c.strategy, Strategy::Penalty { r_invalid: -0.01 });
        let c = parse("--strategy penalty --r-invalid -1").unwrap();
        assert_eq!(c.strategy.r_invalid(), Some(-1.0));
    }

    #[test]
    fn r_invalid_with_masking_is_a_usage_error() {
        assert!(matches!(parse("--strategy masking --r-invalid -0.1"), Err(ConfigError::Usage(_))));
        assert!(matches!(parse("--strategy penalty --r-invalid 0.5"), Err(ConfigError::Usage(_))));
    }

    #[test]
    fn bad_values_rejected() {
        assert!(matches!(parse("--map-size 7"), Err(ConfigError::Usage(_))));
        assert!(matches!(parse("--strategy random"), Err(ConfigError::Args(_))));
        assert!(matches!(parse("--total-timesteps 10"), Err(ConfigError::Usage(_))));
    }

    #[test]
    fn several_seeds() {
        assert_eq!(parse("--seed 1,2,3").unwrap().seeds, vec![1, 2, 3]);
        assert_eq!(parse("--seed 4 5").unwrap().seeds, vec![4, 5]);
    }

    #[test]
    fn flag_beats_file() {
        let file: FileConfig = toml::from_str("map_size = 16\ntotal_timesteps = 4096\n[ppo]\nhorizon = 64\n").unwrap();
        let args = Args::try_parse_from(["maskrl", "--map-size", "4"]).unwrap();
        let c = resolve(args, file).unwrap();
        assert_eq!(c.map_size, 4);
        assert_eq!(c.ppo.total_timesteps, 4096);
        assert_eq!(c.ppo.horizon, 64);
        assert_eq!(c.ppo.gamma, 0.99);
    }

    #[test]
    fn file_penalty_overridden_by_flag_strategy() {
        let file: FileConfig = toml::from_str("strategy = \"penalty\"\nr_invalid = -0.1\n").unwrap();
        let args = Args::try_parse_from(["maskrl", "--strategy", "masking"]).unwrap();
        assert_eq!(resolve(args, file.clone()).unwrap().strategy, Strategy::Masking);
        let args = Args::try_parse_from(["maskrl"]).unwrap();
        assert_eq!(resolve(args, file).unwrap().strategy, Strategy::Penalty { r_invalid: -0.1 });
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<FileConfig>("map_sise = 4\n").is_err());
        assert!(toml::from_str::<FileConfig>("[ppo]\nlearning_rat = 1.0\n").is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let c = parse("--strategy penalty --r-invalid -0.1 --map-size 10 --seed 3,4 --horizon 64").unwrap();
        let file: FileConfig = toml::from_str(&c.snapshot()).unwrap();
        let again = resolve(Args::try_parse_from(["maskrl"]).unwrap(), file).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn resume_checks_the_map_only_when_given() {
        let c = parse("--resume ck.bin").unwrap();
        assert!(matches!(c.mode, Mode::Resume { expect_map: None, .. }));
        let c = parse("--resume ck.bin --map-size 10").unwrap();
        assert!(matches!(c.mode, Mode::Resume { expect_map: Some(10), .. }));
    }
}
