//! Flat key-value config files with dotted section keys
//! (`agent.gamma = 0.99`). CLI flags override file values.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::agent::{AgentConfig, AgentMode, EpsilonSchedule};
use crate::approximator::{Backend, HeadSpec, Optimizer};
use crate::envs::{ChainEnv, Environment, GridMaze, ObservationMode, RewardMode};
use crate::returns::LambdaSpec;

use super::HarnessError;

/// Parsed key-value pairs, last assignment wins.
#[derive(Debug, Clone, Default)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                HarnessError::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            entries.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, HarnessError> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| HarnessError::Config(format!("bad value for {key}: {v:?}"))),
        }
    }

    fn required<T: std::str::FromStr>(&self, key: &str) -> Result<T, HarnessError> {
        self.parse_as(key)?
            .ok_or_else(|| HarnessError::Config(format!("missing required key {key}")))
    }

    fn or_default<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, HarnessError> {
        Ok(self.parse_as(key)?.unwrap_or(default))
    }

    fn list_u64(&self, key: &str) -> Result<Option<Vec<u64>>, HarnessError> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| HarnessError::Config(format!("bad list for {key}: {v:?}")))
                })
                .collect::<Result<Vec<u64>, _>>()
                .map(Some),
        }
    }
}

/// Which environment a run builds, with everything needed to rebuild it
/// identically per seed.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvSpec {
    Maze {
        width: usize,
        height: usize,
        layout: Option<String>, // text layout; None = open maze
        reward_mode: RewardMode,
        observation: ObservationMode,
        max_episode_steps: usize,
        step_penalty: f64,
        reward_max: f64,
    },
    Chain {
        states: usize,
        terminal_reward: f64,
        step_reward: f64,
        max_episode_steps: usize,
    },
}

impl EnvSpec {
    pub fn dense_maze(width: usize, height: usize) -> Self {
        EnvSpec::Maze {
            width,
            height,
            layout: None,
            reward_mode: RewardMode::Dense,
            observation: ObservationMode::OneHot,
            max_episode_steps: 200,
            step_penalty: 0.01,
            reward_max: 1.0,
        }
    }

    pub fn chain(states: usize) -> Self {
        EnvSpec::Chain {
            states,
            terminal_reward: 1.0,
            step_reward: 0.0,
            max_episode_steps: 50,
        }
    }

    pub fn build(&self) -> Result<Box<dyn Environment>, HarnessError> {
        match self {
            EnvSpec::Maze {
                width,
                height,
                layout,
                reward_mode,
                observation,
                max_episode_steps,
                step_penalty,
                reward_max,
            } => {
                let maze = match layout {
                    Some(text) => GridMaze::from_text(
                        text,
                        *reward_mode,
                        *observation,
                        *max_episode_steps,
                        *step_penalty,
                        *reward_max,
                    )?,
                    None => GridMaze::open(
                        *width,
                        *height,
                        *reward_mode,
                        *observation,
                        *max_episode_steps,
                        *step_penalty,
                        *reward_max,
                    )?,
                };
                Ok(Box::new(maze))
            }
            EnvSpec::Chain {
                states,
                terminal_reward,
                step_reward,
                max_episode_steps,
            } => Ok(Box::new(ChainEnv::new(
                *states,
                *terminal_reward,
                *step_reward,
                *max_episode_steps,
            ))),
        }
    }
}

/// Full description of one experiment run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub experiment: String,
    pub env: EnvSpec,
    pub agent: AgentConfig,
    pub total_env_steps: u64,
    pub eval_period: u64,
    pub eval_episodes: usize,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn from_map(map: &ConfigMap) -> Result<Self, HarnessError> {
        let experiment = map
            .get("experiment")
            .unwrap_or("experiment")
            .to_string();
        let total_env_steps: u64 = map.or_default("run.total_env_steps", 100_000)?;
        let env = parse_env(map)?;
        let agent = parse_agent(map, "agent", total_env_steps)?;
        let eval_period: u64 = map.or_default("run.eval_period", 5_000)?;
        if eval_period == 0 {
            return Err(HarnessError::Config("run.eval_period must be > 0".into()));
        }
        let seeds = map
            .list_u64("run.seeds")?
            .unwrap_or_else(|| vec![1, 2, 3]);
        if seeds.is_empty() {
            return Err(HarnessError::Config("run.seeds must be non-empty".into()));
        }
        Ok(Self {
            experiment,
            env,
            agent,
            total_env_steps,
            eval_period,
            eval_episodes: map.or_default("run.eval_episodes", 10)?,
            seeds,
            out_dir: PathBuf::from(map.get("run.out_dir").unwrap_or("out")),
        })
    }

    /// The learning-only agent for paired runs: the `agent.*` section with
    /// any `learner.*` keys layered on top.
    pub fn learner_agent(map: &ConfigMap, total_env_steps: u64) -> Result<AgentConfig, HarnessError> {
        let mut merged = map.clone();
        for (key, value) in map.entries.clone() {
            if let Some(rest) = key.strip_prefix("learner.") {
                merged.set(&format!("agent.{rest}"), &value);
            }
        }
        parse_agent(&merged, "agent", total_env_steps)
    }
}

fn parse_env(map: &ConfigMap) -> Result<EnvSpec, HarnessError> {
    let kind = map.get("env.kind").unwrap_or("dense_maze");
    match kind {
        "dense_maze" | "sparse_maze" | "maze_file" => {
            let reward_mode = match kind {
                "sparse_maze" => RewardMode::Sparse,
                "maze_file" => match map.get("env.reward_mode").unwrap_or("dense") {
                    "dense" => RewardMode::Dense,
                    "sparse" => RewardMode::Sparse,
                    other => {
                        return Err(HarnessError::Config(format!(
                            "bad env.reward_mode {other:?}"
                        )))
                    }
                },
                _ => RewardMode::Dense,
            };
            let layout = if kind == "maze_file" {
                let path: String = map.required("env.path")?;
                Some(std::fs::read_to_string(&path).map_err(|e| {
                    HarnessError::Config(format!("cannot read maze file {path}: {e}"))
                })?)
            } else {
                None
            };
            let observation = match map.get("env.observation").unwrap_or("one_hot") {
                "one_hot" => ObservationMode::OneHot,
                "coords" => ObservationMode::Coords,
                other => {
                    return Err(HarnessError::Config(format!(
                        "bad env.observation {other:?}"
                    )))
                }
            };
            Ok(EnvSpec::Maze {
                width: map.or_default("env.width", 10)?,
                height: map.or_default("env.height", 10)?,
                layout,
                reward_mode,
                observation,
                max_episode_steps: map.or_default("env.max_episode_steps", 200)?,
                step_penalty: map.or_default("env.step_penalty", 0.01)?,
                reward_max: map.or_default("env.reward_max", 1.0)?,
            })
        }
        "chain" => Ok(EnvSpec::Chain {
            states: map.or_default("env.states", 5)?,
            terminal_reward: map.or_default("env.terminal_reward", 1.0)?,
            step_reward: map.or_default("env.step_reward", 0.0)?,
            max_episode_steps: map.or_default("env.max_episode_steps", 50)?,
        }),
        other => Err(HarnessError::Config(format!("unknown env.kind {other:?}"))),
    }
}

fn parse_heads(value: &str) -> Result<Vec<HeadSpec>, HarnessError> {
    let lengths: Vec<usize> = value
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| HarnessError::Config(format!("bad agent.heads entry {s:?}")))
        })
        .collect::<Result<_, _>>()?;
    if lengths.is_empty() || lengths.iter().any(|&n| n == 0) {
        return Err(HarnessError::Config("agent.heads must be positive".into()));
    }
    Ok(lengths.into_iter().map(HeadSpec::new).collect())
}

fn parse_agent(
    map: &ConfigMap,
    section: &str,
    total_env_steps: u64,
) -> Result<AgentConfig, HarnessError> {
    let key = |name: &str| format!("{section}.{name}");
    let heads = parse_heads(map.get(&key("heads")).unwrap_or("1"))?;
    let mode = match map.get(&key("mode")).unwrap_or("ensemble") {
        "ensemble" => AgentMode::Ensemble,
        "lambda" => AgentMode::LambdaSingleTarget,
        other => return Err(HarnessError::Config(format!("bad agent.mode {other:?}"))),
    };
    let lambda_spec = if mode == AgentMode::LambdaSingleTarget || map.get(&key("lambda")).is_some()
    {
        let lambda: f64 = map.or_default(&key("lambda"), 0.9)?;
        let horizon: usize = map.or_default(&key("lambda_max_horizon"), 100)?;
        Some(
            LambdaSpec::new(lambda, horizon)
                .map_err(|e| HarnessError::Config(e.to_string()))?,
        )
    } else {
        None
    };
    let backend = match map.get(&key("backend")).unwrap_or("tabular") {
        "tabular" => Backend::Tabular {
            init_value: map.or_default(&key("tabular_init"), 0.0)?,
        },
        "mlp" => Backend::Mlp {
            hidden: map.or_default(&key("hidden_size"), 64)?,
        },
        other => return Err(HarnessError::Config(format!("bad agent.backend {other:?}"))),
    };
    let optimizer = match map.get(&key("optimizer")).unwrap_or("sgd") {
        "sgd" => Optimizer::Sgd,
        "adam" => Optimizer::adam_default(),
        other => {
            return Err(HarnessError::Config(format!(
                "bad agent.optimizer {other:?}"
            )))
        }
    };
    // ε anneals over the first 10% of training unless overridden.
    let default_decay = total_env_steps / 10;
    let cfg = AgentConfig {
        gamma: map.or_default(&key("gamma"), 0.99)?,
        head_specs: heads,
        epsilon: EpsilonSchedule {
            start: map.or_default(&key("epsilon_start"), 1.0)?,
            end: map.or_default(&key("epsilon_end"), 0.01)?,
            decay_steps: map.or_default(&key("epsilon_decay_steps"), default_decay)?,
        },
        learning_rate: map.or_default(&key("learning_rate"), 0.1)?,
        target_sync_period: map.or_default(&key("target_sync_period"), 500)?,
        batch_size: map.or_default(&key("batch_size"), 32)?,
        updates_per_env_step: map.or_default(&key("updates_per_env_step"), 0.25)?,
        buffer_capacity: map.or_default(&key("buffer_capacity"), 100_000)?,
        mode,
        lambda_spec,
        backend,
        optimizer,
        trunk_grad_scale_by_heads: map.or_default(&key("trunk_grad_scale"), true)?,
    };
    cfg.validate()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_config() {
        let map = ConfigMap::parse(
            "experiment = demo\nagent.heads = 1,1,3,3\nrun.seeds = 7\nrun.total_env_steps = 1000\n",
        )
        .unwrap();
        let cfg = RunConfig::from_map(&map).unwrap();
        assert_eq!(cfg.experiment, "demo");
        assert_eq!(cfg.agent.head_count(), 4);
        assert_eq!(cfg.seeds, vec![7]);
        assert_eq!(cfg.agent.epsilon.decay_steps, 100); // 10% of training
    }

    #[test]
    fn comments_and_overrides() {
        let mut map = ConfigMap::parse("agent.gamma = 0.5 # inline comment\n# full line\n").unwrap();
        assert_eq!(map.get("agent.gamma"), Some("0.5"));
        map.set("agent.gamma", "0.9");
        assert_eq!(map.get("agent.gamma"), Some("0.9"));
    }

    #[test]
    fn lambda_mode_config() {
        let map = ConfigMap::parse(
            "agent.mode = lambda\nagent.heads = 1\nagent.lambda = 0.9\nagent.lambda_max_horizon = 100\n",
        )
        .unwrap();
        let cfg = RunConfig::from_map(&map).unwrap();
        assert_eq!(cfg.agent.mode, AgentMode::LambdaSingleTarget);
        assert_eq!(cfg.agent.lambda_spec.unwrap().max_horizon(), 100);
    }

    #[test]
    fn learner_section_overrides_agent() {
        let map = ConfigMap::parse(
            "agent.heads = 1,3\nagent.gamma = 0.9\nlearner.heads = 1,1\n",
        )
        .unwrap();
        let learner = RunConfig::learner_agent(&map, 1000).unwrap();
        assert_eq!(learner.head_count(), 2);
        assert!(learner.head_specs.iter().all(|h| h.backup_length == 1));
        assert_eq!(learner.gamma, 0.9);
    }

    #[test]
    fn bad_keys_rejected() {
        assert!(ConfigMap::parse("no equals sign\n").is_err());
        let map = ConfigMap::parse("agent.gamma = not_a_number\n").unwrap();
        assert!(RunConfig::from_map(&map).is_err());
        let map = ConfigMap::parse("env.kind = marshland\n").unwrap();
        assert!(RunConfig::from_map(&map).is_err());
    }

    #[test]
    fn chain_env_spec_builds() {
        let map = ConfigMap::parse("env.kind = chain\nenv.states = 5\n").unwrap();
        let cfg = RunConfig::from_map(&map).unwrap();
        let env = cfg.env.build().unwrap();
        assert_eq!(env.state_count(), 5);
        assert_eq!(env.action_count(), 2);
    }
}
