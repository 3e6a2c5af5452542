use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lfd_core::demos::ImperfectionConfig;
use lfd_core::nn::Architecture;
use lfd_core::runtime::ExecutionConfig;
use lfd_core::sim::{TaskKind, TaskSpec};
use lfd_core::training::TrainConfig;
use lfd_core::wire::to_line;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// The single document shared by every subcommand and the service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub task: TaskKind,
    /// Full scene description; the task's standard scene when absent.
    pub scene: Option<TaskSpec>,
    pub demos: DemoSettings,
    pub imperfections: ImperfectionConfig,
    pub training: TrainConfig,
    pub execution: ExecutionConfig,
    pub eval: EvalSettings,
    pub serve: ServeSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoSettings {
    pub count: usize,
}

impl Default for DemoSettings {
    fn default() -> Self {
        Self { count: 600 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub trials: usize,
    pub architecture: Architecture,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            trials: 20,
            architecture: Architecture::LstmMdn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeSettings {
    pub port: u16,
    /// Dataset file that recorded demonstrations are appended to.
    pub out: PathBuf,
}

impl Default for ServeSettings {
    fn default() -> Self {
        Self {
            port: 8765,
            out: PathBuf::from("human-demos.jsonl"),
        }
    }
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 1,
            task: TaskKind::PickPlace,
            scene: None,
            demos: DemoSettings::default(),
            imperfections: ImperfectionConfig::default(),
            training: TrainConfig::default(),
            execution: ExecutionConfig::default(),
            eval: EvalSettings::default(),
            serve: ServeSettings::default(),
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).context("parsing configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    /// The file when given, defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let scene = self.scene();
        scene.validate()?;
        if scene.kind != self.task {
            bail!("scene is for {}, configuration task is {}", scene.kind, self.task);
        }
        self.imperfections.validate()?;
        self.training.validate()?;
        self.execution.validate()?;
        if self.eval.trials == 0 {
            bail!("eval.trials must be at least 1");
        }
        Ok(())
    }

    pub fn scene(&self) -> TaskSpec {
        self.scene.clone().unwrap_or_else(|| TaskSpec::for_kind(self.task))
    }

    /// SHA-256 of the canonical serialization.
    pub fn digest(&self) -> Result<String> {
        let line = to_line(self)?;
        Ok(hex::encode(Sha256::digest(line.as_bytes())))
    }
}

/// One flag that replaced a configuration value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Override {
    pub key: String,
    pub value: String,
}

/// A configuration together with the command-line overrides applied to it.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: Config,
    pub overrides: Vec<Override>,
}

impl Resolved {
    pub fn new(config: Config) -> Self {
        Self {
            config,
            overrides: Vec::new(),
        }
    }

    pub fn set<T: ToString>(&mut self, key: &str, value: Option<T>, apply: impl FnOnce(&mut Config, T)) {
        if let Some(v) = value {
            self.overrides.push(Override {
                key: key.to_string(),
                value: v.to_string(),
            });
            apply(&mut self.config, v);
        }
    }

    /// Provenance block embedded in every report.
    pub fn provenance(&self) -> Result<Provenance> {
        self.config.validate()?;
        Ok(Provenance {
            config_digest: self.config.digest()?,
            seed: self.config.seed,
            overrides: self.overrides.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_digest: String,
    pub seed: u64,
    pub overrides: Vec<Override>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = Config::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(Config::parse(&text).unwrap(), cfg);
        assert_eq!(cfg.execution.wait_quantum, 0.2);
        assert_eq!(cfg.training.minibatch, 10);
        assert_eq!(cfg.training.patience, 20);
        assert_eq!(cfg.eval.trials, 20);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::parse("sed = 3").is_err());
        assert!(Config::parse("[training]\nlearning_rat = 0.1").is_err());
        let cfg = Config::parse("seed = 3\ntask = \"push-to-pose\"\n[training]\nmax_epochs = 7").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.task, TaskKind::PushToPose);
        assert_eq!(cfg.training.max_epochs, 7);
    }

    #[test]
    fn mismatched_scene_is_rejected() {
        let mut cfg = Config::default();
        cfg.scene = Some(TaskSpec::push_to_pose());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn digest_tracks_content_and_overrides_are_recorded() {
        let mut r = Resolved::new(Config::default());
        let before = r.config.digest().unwrap();
        r.set("seed", Some(9u64), |c, v| c.seed = v);
        r.set("eval.trials", None::<usize>, |c, v| c.eval.trials = v);
        let p = r.provenance().unwrap();
        assert_ne!(p.config_digest, before);
        assert_eq!(p.overrides, vec![Override { key: "seed".into(), value: "9".into() }]);
    }
}
