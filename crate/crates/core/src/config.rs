//! TOML run configuration for the `train` command.
//!
//! Unknown keys are rejected; every omitted key falls back to the default
//! hyperparameters (see [`TrainConfig::default`]).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::boxjump::BoxJumpConfig;
use crate::error::{Error, Result};
use crate::matrix::MatrixGameSpec;
use crate::models::ModelKind;
use crate::training::{EnvSpec, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub gamma: f64,
    pub ema_c: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    pub explore_per_epoch: usize,
    pub hidden: Vec<usize>,
    pub buffer_size: usize,
    pub eval_episodes: usize,
    pub seed: u64,
    /// `boxjump`, `unison` or `table:<path>`.
    pub env: String,
    pub model: String,
    pub n_agents: usize,
    /// Action count for `unison`; ignored elsewhere.
    pub num_actions: usize,
    pub t_max: usize,
    pub output_dir: PathBuf,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            lr: t.lr,
            batch_size: t.batch_size,
            gamma: t.gamma,
            ema_c: t.ema_c,
            eps_start: t.eps_start,
            eps_end: t.eps_end,
            explore_per_epoch: t.explore_per_epoch,
            hidden: t.hidden,
            buffer_size: t.buffer_size,
            eval_episodes: t.eval_episodes,
            seed: t.seed,
            env: "boxjump".into(),
            model: "pairvdn".into(),
            n_agents: 16,
            num_actions: 2,
            t_max: 400,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Fully resolved run: hyperparameters, environment and model kind.
#[derive(Debug, Clone)]
pub struct RunPlan {
    pub file: RunConfigFile,
    pub train: TrainConfig,
    pub env: EnvSpec,
    pub kind: ModelKind,
}

impl RunConfigFile {
    /// Parses TOML text. Errors carry the offending line number.
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            let msg = e.message().trim().to_string();
            match line {
                Some(l) => Error::invalid(format!("line {l}: {msg}")),
                None => Error::invalid(msg),
            }
        })
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)?;
        Ok((Self::parse(&text)?, text))
    }

    /// Canonical TOML (all keys, fixed order) used for hashing and the
    /// manifest.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn sha256(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Validates semantic constraints; `source` is used to point at the line
    /// of the offending key.
    pub fn resolve(&self, source: &str) -> Result<RunPlan> {
        let at = |key: &str, msg: String| -> Error {
            match key_line(source, key) {
                Some(l) => Error::invalid(format!("line {l}: {key}: {msg}")),
                None => Error::invalid(format!("{key}: {msg}")),
            }
        };
        let kind: ModelKind = self.model.parse().map_err(|e: Error| at("model", e.to_string()))?;
        let env = if self.env == "boxjump" {
            EnvSpec::BoxJump(BoxJumpConfig::new(self.n_agents, self.t_max))
        } else if self.env == "unison" {
            EnvSpec::Matrix(
                MatrixGameSpec::unison(self.n_agents, self.num_actions)
                    .map_err(|e| at("n_agents", e.to_string()))?,
            )
        } else if let Some(path) = self.env.strip_prefix("table:") {
            EnvSpec::Matrix(
                MatrixGameSpec::from_table_file(Path::new(path))
                    .map_err(|e| at("env", e.to_string()))?,
            )
        } else {
            return Err(at(
                "env",
                format!("unknown environment `{}` (expected boxjump, unison or table:<path>)", self.env),
            ));
        };
        if let EnvSpec::BoxJump(cfg) = &env {
            crate::boxjump::BoxJumpEnv::new(cfg.clone()).map_err(|e| at("n_agents", e.to_string()))?;
        }
        let train = TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            gamma: self.gamma,
            ema_c: self.ema_c,
            eps_start: self.eps_start,
            eps_end: self.eps_end,
            explore_per_epoch: self.explore_per_epoch,
            hidden: self.hidden.clone(),
            buffer_size: self.buffer_size,
            eval_episodes: self.eval_episodes,
            seed: self.seed,
        };
        train.validate().map_err(|e| {
            let key = [
                "lr",
                "batch_size",
                "explore_per_epoch",
                "buffer_size",
                "eval_episodes",
                "gamma",
                "ema_c",
                "hidden",
                "eps_start",
            ]
            .into_iter()
            .find(|k| e.to_string().contains(k))
            .unwrap_or("config");
            at(key, e.to_string())
        })?;
        Ok(RunPlan {
            file: self.clone(),
            train,
            env,
            kind,
        })
    }
}

/// 1-based line on which `key = ...` is assigned.
fn key_line(source: &str, key: &str) -> Option<usize> {
    source.lines().position(|l| {
        let l = l.trim_start();
        l.strip_prefix(key)
            .map(|rest| rest.trim_start().starts_with('='))
            .unwrap_or(false)
    })
    .map(|i| i + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfigFile::parse("").unwrap();
        assert_eq!(c, RunConfigFile::default());
        let plan = c.resolve("").unwrap();
        assert_eq!(plan.train, TrainConfig::default());
        assert_eq!(plan.kind, ModelKind::PairVdn);
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let err = RunConfigFile::parse("epochs = 3\nbogus = 1\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn semantic_errors_point_at_the_key() {
        let src = "epochs = 3\nmodel = \"qmix\"\n";
        let err = RunConfigFile::parse(src).unwrap().resolve(src).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        let src = "\n\nlr = -1.0\n";
        let err = RunConfigFile::parse(src).unwrap().resolve(src).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        let src = "env = \"cooking\"\n";
        assert!(RunConfigFile::parse(src).unwrap().resolve(src).is_err());
    }

    #[test]
    fn unison_config_resolves() {
        let src = "env = \"unison\"\nn_agents = 4\nnum_actions = 2\nmodel = \"vdn\"\n";
        let plan = RunConfigFile::parse(src).unwrap().resolve(src).unwrap();
        assert!(matches!(plan.env, EnvSpec::Matrix(_)));
        assert_eq!(plan.kind, ModelKind::Vdn);
    }

    #[test]
    fn hash_is_stable_and_canonical() {
        let a = RunConfigFile::parse("seed = 3\n").unwrap();
        let b = RunConfigFile::parse("# comment\nseed = 3\n").unwrap();
        assert_eq!(a.sha256(), b.sha256());
        let c = RunConfigFile::parse("seed = 4\n").unwrap();
        assert_ne!(a.sha256(), c.sha256());
        assert_eq!(RunConfigFile::parse(&a.canonical()).unwrap(), a);
    }
}
