use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{EnvKind, DEFAULT_DISCOUNT, KEY_MAZE_MAX_STEPS, N_ACTIONS};
use crate::losses::{LossConfig, LossWeights, BATCH_SIZE, DEFAULT_C_D1, DEFAULT_OMEGA};
use crate::nets::TARGET_SYNC_INTERVAL;
use crate::novelty::{DEFAULT_CAPACITY, DEFAULT_K};
use crate::planner::PlanConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config key `{key}`: {constraint}")]
    Invalid { key: &'static str, constraint: String },
    #[error("unknown policy {0:?} (expected novelty, random, count, hash or pred_error)")]
    UnknownPolicy(String),
}

/// Exploration strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Novelty search in the learned abstract space.
    Novelty,
    Random,
    /// Tabular visit counts, greedy over true successors.
    Count,
    /// SimHash visit counts with a model-free Q-network.
    Hash,
    /// Transition-model prediction error as intrinsic reward.
    PredError,
}

impl Policy {
    pub const ALL: [Policy; 5] = [
        Policy::Novelty,
        Policy::Random,
        Policy::Count,
        Policy::Hash,
        Policy::PredError,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Novelty => "novelty",
            Policy::Random => "random",
            Policy::Count => "count",
            Policy::Hash => "hash",
            Policy::PredError => "pred_error",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Policy::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| ConfigError::UnknownPolicy(s.to_string()))
    }
}

/// Every knob of a run. Build one with [`RunConfig::defaults`] or by
/// resolving a [`RawConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvKind,
    pub policy: Policy,
    pub seed: u64,
    /// Random transitions collected before learning starts.
    pub n_init: usize,
    /// Total environment steps.
    pub n_max: usize,
    /// Train and refresh every `n_freq` steps.
    pub n_freq: usize,
    /// Iteration cap of one training phase.
    pub n_iters: usize,
    pub lr: f64,
    pub gamma: f64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub omega: f64,
    pub delta: f64,
    pub k: usize,
    pub c_d1: f64,
    pub abstract_dim: usize,
    pub depth: usize,
    pub b: usize,
    pub epsilon: f64,
    pub loss_weights: LossWeights,
    /// Iterations averaged for the accuracy gate.
    pub gate_window: usize,
    pub target_sync: usize,
    pub hash_bits: usize,
    /// Gradient steps per environment step for the hash baseline.
    pub model_free_iters: usize,
    /// Episode length limit; `None` for endless episodes.
    pub max_episode_steps: Option<u64>,
}

impl RunConfig {
    pub fn defaults(env: EnvKind) -> Self {
        let (n_max, n_freq, epsilon, abstract_dim, max_episode_steps) = match env {
            EnvKind::OpenLabyrinth => (1000, 1, 0.0, 2, None),
            EnvKind::FourRoom => (2000, 3, 0.2, 2, None),
            EnvKind::KeyMaze => (4000, 1, 0.1, 3, Some(KEY_MAZE_MAX_STEPS)),
        };
        Self {
            env,
            policy: Policy::Novelty,
            seed: 0,
            n_init: 64,
            n_max,
            n_freq,
            n_iters: 30_000,
            lr: 0.00025,
            gamma: DEFAULT_DISCOUNT,
            buffer_capacity: DEFAULT_CAPACITY,
            batch_size: BATCH_SIZE,
            omega: DEFAULT_OMEGA,
            delta: 6.0,
            k: DEFAULT_K,
            c_d1: DEFAULT_C_D1,
            abstract_dim,
            depth: 5,
            b: N_ACTIONS,
            epsilon,
            loss_weights: LossWeights::default(),
            gate_window: 100,
            target_sync: TARGET_SYNC_INTERVAL as usize,
            hash_bits: 16,
            model_free_iters: 1,
            max_episode_steps,
        }
    }

    /// Transition-loss level the model must reach before acting:
    /// `(omega / delta)^2`.
    pub fn accuracy_gate(&self) -> f64 {
        (self.omega / self.delta).powi(2)
    }

    pub fn plan(&self) -> PlanConfig {
        PlanConfig {
            depth: self.depth,
            b: self.b,
            epsilon: self.epsilon,
        }
    }

    pub fn losses(&self) -> LossConfig {
        LossConfig {
            c_d1: self.c_d1,
            omega: self.omega,
            weights: self.loss_weights,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn positive(key: &'static str, v: usize) -> Result<(), ConfigError> {
            if v == 0 {
                return Err(ConfigError::Invalid {
                    key,
                    constraint: "must be at least 1".into(),
                });
            }
            Ok(())
        }
        fn in_range(key: &'static str, v: f64, lo: f64, hi: f64) -> Result<(), ConfigError> {
            if !(lo..=hi).contains(&v) {
                return Err(ConfigError::Invalid {
                    key,
                    constraint: format!("must be in [{lo}, {hi}], got {v}"),
                });
            }
            Ok(())
        }
        fn finite_positive(key: &'static str, v: f64) -> Result<(), ConfigError> {
            if !(v.is_finite() && v > 0.0) {
                return Err(ConfigError::Invalid {
                    key,
                    constraint: format!("must be a positive number, got {v}"),
                });
            }
            Ok(())
        }
        positive("n_init", self.n_init)?;
        positive("n_max", self.n_max)?;
        if self.n_max < self.n_init {
            return Err(ConfigError::Invalid {
                key: "n_max",
                constraint: format!("must be at least n_init ({})", self.n_init),
            });
        }
        positive("n_freq", self.n_freq)?;
        positive("n_iters", self.n_iters)?;
        finite_positive("lr", self.lr)?;
        in_range("gamma", self.gamma, 0.0, 1.0)?;
        positive("buffer_capacity", self.buffer_capacity)?;
        positive("batch_size", self.batch_size)?;
        finite_positive("omega", self.omega)?;
        finite_positive("delta", self.delta)?;
        positive("k", self.k)?;
        finite_positive("c_d1", self.c_d1)?;
        positive("abstract_dim", self.abstract_dim)?;
        if self.b == 0 || self.b > N_ACTIONS {
            return Err(ConfigError::Invalid {
                key: "b",
                constraint: format!("must be in [1, {N_ACTIONS}], got {}", self.b),
            });
        }
        in_range("epsilon", self.epsilon, 0.0, 1.0)?;
        let w = self.loss_weights;
        for (key, v) in [
            ("loss_weights.q", w.q),
            ("loss_weights.reward", w.reward),
            ("loss_weights.discount", w.discount),
            ("loss_weights.transition", w.transition),
            ("loss_weights.uniformity", w.uniformity),
            ("loss_weights.csc", w.csc),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ConfigError::Invalid {
                    key,
                    constraint: format!("must be a non-negative number, got {v}"),
                });
            }
        }
        positive("gate_window", self.gate_window)?;
        positive("target_sync", self.target_sync)?;
        if !(1..=64).contains(&self.hash_bits) {
            return Err(ConfigError::Invalid {
                key: "hash_bits",
                constraint: format!("must be in [1, 64], got {}", self.hash_bits),
            });
        }
        if self.max_episode_steps == Some(0) {
            return Err(ConfigError::Invalid {
                key: "max_episode_steps",
                constraint: "must be at least 1".into(),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Config file contents: every field optional, unknown keys rejected.
/// Absent fields take the defaults of the chosen environment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub env: Option<EnvKind>,
    pub policy: Option<Policy>,
    pub seed: Option<u64>,
    pub n_init: Option<usize>,
    pub n_max: Option<usize>,
    pub n_freq: Option<usize>,
    pub n_iters: Option<usize>,
    pub lr: Option<f64>,
    pub gamma: Option<f64>,
    pub buffer_capacity: Option<usize>,
    pub batch_size: Option<usize>,
    pub omega: Option<f64>,
    pub delta: Option<f64>,
    pub k: Option<usize>,
    pub c_d1: Option<f64>,
    pub abstract_dim: Option<usize>,
    pub depth: Option<usize>,
    pub b: Option<usize>,
    pub epsilon: Option<f64>,
    pub loss_weights: Option<LossWeights>,
    pub gate_window: Option<usize>,
    pub target_sync: Option<usize>,
    pub hash_bits: Option<usize>,
    pub model_free_iters: Option<usize>,
    pub max_episode_steps: Option<Option<u64>>,
}

impl RawConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Fills absent fields from the environment defaults (open labyrinth
    /// when no environment is named) and validates the result.
    pub fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let d = RunConfig::defaults(self.env.unwrap_or(EnvKind::OpenLabyrinth));
        let c = RunConfig {
            env: d.env,
            policy: self.policy.unwrap_or(d.policy),
            seed: self.seed.unwrap_or(d.seed),
            n_init: self.n_init.unwrap_or(d.n_init),
            n_max: self.n_max.unwrap_or(d.n_max),
            n_freq: self.n_freq.unwrap_or(d.n_freq),
            n_iters: self.n_iters.unwrap_or(d.n_iters),
            lr: self.lr.unwrap_or(d.lr),
            gamma: self.gamma.unwrap_or(d.gamma),
            buffer_capacity: self.buffer_capacity.unwrap_or(d.buffer_capacity),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            omega: self.omega.unwrap_or(d.omega),
            delta: self.delta.unwrap_or(d.delta),
            k: self.k.unwrap_or(d.k),
            c_d1: self.c_d1.unwrap_or(d.c_d1),
            abstract_dim: self.abstract_dim.unwrap_or(d.abstract_dim),
            depth: self.depth.unwrap_or(d.depth),
            b: self.b.unwrap_or(d.b),
            epsilon: self.epsilon.unwrap_or(d.epsilon),
            loss_weights: self.loss_weights.unwrap_or(d.loss_weights),
            gate_window: self.gate_window.unwrap_or(d.gate_window),
            target_sync: self.target_sync.unwrap_or(d.target_sync),
            hash_bits: self.hash_bits.unwrap_or(d.hash_bits),
            model_free_iters: self.model_free_iters.unwrap_or(d.model_free_iters),
            max_episode_steps: self.max_episode_steps.unwrap_or(d.max_episode_steps),
        };
        c.validate()?;
        Ok(c)
    }
}

pub fn parse_config_str(text: &str) -> Result<RunConfig, ConfigError> {
    RawConfig::from_json(text)?.resolve()
}

pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let c = parse_config_str("{}").unwrap();
        assert_eq!(c, RunConfig::defaults(EnvKind::OpenLabyrinth));
        assert_eq!((c.n_init, c.n_iters, c.batch_size, c.k), (64, 30_000, 64, 5));
        assert_eq!((c.lr, c.gamma, c.omega, c.delta), (0.00025, 0.8, 0.5, 6.0));
        assert_eq!((c.n_freq, c.epsilon, c.abstract_dim), (1, 0.0, 2));
        assert_eq!(c.buffer_capacity, 1000);
    }

    #[test]
    fn per_environment_defaults() {
        let c = parse_config_str(r#"{"env": "four_room"}"#).unwrap();
        assert_eq!((c.n_freq, c.epsilon, c.n_max), (3, 0.2, 2000));
        let c = parse_config_str(r#"{"env": "key_maze"}"#).unwrap();
        assert_eq!((c.epsilon, c.abstract_dim, c.n_max), (0.1, 3, 4000));
        assert_eq!(c.max_episode_steps, Some(4000));
    }

    #[test]
    fn gate_threshold() {
        let gate = RunConfig::defaults(EnvKind::OpenLabyrinth).accuracy_gate();
        assert!((gate - 6.944e-3).abs() < 1e-6);
        assert_eq!(gate, 0.25 / 36.0);
    }

    #[test]
    fn range_and_unknown_key_errors() {
        let e = parse_config_str(r#"{"epsilon": 1.5}"#).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("epsilon") && msg.contains("[0, 1]"), "{msg}");
        let e = parse_config_str(r#"{"epsilonn": 0.1}"#).unwrap_err();
        assert!(e.to_string().contains("epsilonn"));
        let e = parse_config_str(r#"{"b": 7}"#).unwrap_err();
        assert!(e.to_string().contains("`b`"));
        let e = parse_config_str(r#"{"n_max": 10}"#).unwrap_err();
        assert!(e.to_string().contains("n_max"));
        assert!(parse_config_str(r#"{"policy": "greedy"}"#).is_err());
    }

    #[test]
    fn serialized_config_parses_back_identically() {
        let mut c = RunConfig::defaults(EnvKind::KeyMaze);
        c.seed = 42;
        c.policy = Policy::PredError;
        c.loss_weights.uniformity = 0.5;
        let back = parse_config_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        let open = RunConfig::defaults(EnvKind::OpenLabyrinth);
        assert_eq!(parse_config_str(&open.to_json()).unwrap(), open);
    }

    #[test]
    fn policy_names() {
        for p in Policy::ALL {
            assert_eq!(p.as_str().parse::<Policy>().unwrap(), p);
        }
    }
}
