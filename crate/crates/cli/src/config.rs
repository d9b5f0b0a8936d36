//! Flat `section.key = value` experiment configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use eruption_core::diagnostics::ENUMERATION_BOUND;
use eruption_core::env::ToolQASpec;
use eruption_core::policy::PolicyArchitecture;
use eruption_core::trainer::{TrainConfig, DEFAULT_MID_TRAIN_EPOCHS, DEFAULT_MID_TRAIN_LR};

/// Prefix of environment variables overriding config keys.
pub const ENV_PREFIX: &str = "ERUPTION_";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("{key}: {message}")]
    Field { key: String, message: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    pub num_keys: usize,
    pub num_values: usize,
    pub num_fillers: usize,
    pub max_response_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub ffn_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MidTrainConfig {
    pub enabled: bool,
    pub epochs: usize,
    pub learning_rate: f64,
    pub demonstrations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticsConfig {
    /// Metrics are logged every this many steps, plus the final step.
    pub every: u64,
    /// Exact trajectory entropy and format mass, averaged over prompts.
    pub exact: bool,
    /// Predicted versus observed one-step drift of the rollout group.
    pub drift: bool,
    /// Size of the fixed trajectory set for separation scores; 0 disables.
    pub heldout: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub checkpoint_every: u64,
    /// Adds elapsed milliseconds to metric records, which breaks byte-identical logs.
    pub wall_clock: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LemmaConfig {
    pub seeds: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareConfig {
    pub alphas: Vec<f64>,
    pub seeds: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub env: EnvConfig,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub mid_train: MidTrainConfig,
    pub diagnostics: DiagnosticsConfig,
    pub output: OutputConfig,
    pub lemmas: LemmaConfig,
    pub compare: CompareConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            env: EnvConfig {
                num_keys: 2,
                num_values: 2,
                num_fillers: 0,
                max_response_len: 6,
            },
            policy: PolicyConfig {
                model_dim: 32,
                num_heads: 2,
                num_blocks: 1,
                ffn_dim: 64,
            },
            train: TrainConfig::default(),
            mid_train: MidTrainConfig {
                enabled: false,
                epochs: DEFAULT_MID_TRAIN_EPOCHS,
                learning_rate: DEFAULT_MID_TRAIN_LR,
                demonstrations: 32,
            },
            diagnostics: DiagnosticsConfig {
                every: 10,
                exact: true,
                drift: true,
                heldout: 0,
            },
            output: OutputConfig {
                dir: PathBuf::from("runs/default"),
                checkpoint_every: 50,
                wall_clock: false,
            },
            lemmas: LemmaConfig { seeds: 5 },
            compare: CompareConfig {
                alphas: vec![0.0, 0.5],
                seeds: 5,
            },
        }
    }
}

/// Every accepted key, in the order they are written back out.
pub const KEYS: &[&str] = &[
    "run.seed",
    "env.num_keys",
    "env.num_values",
    "env.num_fillers",
    "env.max_response_len",
    "policy.model_dim",
    "policy.num_heads",
    "policy.num_blocks",
    "policy.ffn_dim",
    "train.learning_rate",
    "train.group_size",
    "train.seal_weight",
    "train.kl_coef",
    "train.temperature",
    "train.advantage_mode",
    "train.steps",
    "train.seal_start_step",
    "mid_train.enabled",
    "mid_train.epochs",
    "mid_train.learning_rate",
    "mid_train.demonstrations",
    "diagnostics.every",
    "diagnostics.exact",
    "diagnostics.drift",
    "diagnostics.heldout",
    "output.dir",
    "output.checkpoint_every",
    "output.wall_clock",
    "lemmas.seeds",
    "compare.alphas",
    "compare.seeds",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Field {
        key: key.to_string(),
        message: format!("cannot parse `{value}`: {e}"),
    })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>, ConfigError> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                message: format!("expected `key = value`, found `{line}`"),
            })?;
            config.set(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Environment variable name overriding `key`, e.g. `ERUPTION_TRAIN_STEPS`.
    pub fn env_var(key: &str) -> String {
        format!("{ENV_PREFIX}{}", key.replace('.', "_").to_uppercase())
    }

    /// Applies overrides from `lookup` (normally `std::env::var`).
    pub fn apply_overrides(
        &mut self,
        lookup: impl Fn(&str) -> Option<String>,
    ) -> Result<(), ConfigError> {
        for key in KEYS {
            if let Some(v) = lookup(&Self::env_var(key)) {
                self.set(key, v.trim())?;
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "run.seed" => self.seed = parse(key, value)?,
            "env.num_keys" => self.env.num_keys = parse(key, value)?,
            "env.num_values" => self.env.num_values = parse(key, value)?,
            "env.num_fillers" => self.env.num_fillers = parse(key, value)?,
            "env.max_response_len" => self.env.max_response_len = parse(key, value)?,
            "policy.model_dim" => self.policy.model_dim = parse(key, value)?,
            "policy.num_heads" => self.policy.num_heads = parse(key, value)?,
            "policy.num_blocks" => self.policy.num_blocks = parse(key, value)?,
            "policy.ffn_dim" => self.policy.ffn_dim = parse(key, value)?,
            "train.learning_rate" => self.train.learning_rate = parse(key, value)?,
            "train.group_size" => self.train.group_size = parse(key, value)?,
            "train.seal_weight" => self.train.seal_weight = parse(key, value)?,
            "train.kl_coef" => self.train.kl_coef = parse(key, value)?,
            "train.temperature" => self.train.temperature = parse(key, value)?,
            "train.advantage_mode" => self.train.advantage_mode = parse(key, value)?,
            "train.steps" => self.train.steps = parse(key, value)?,
            "train.seal_start_step" => self.train.seal_start_step = parse(key, value)?,
            "mid_train.enabled" => self.mid_train.enabled = parse(key, value)?,
            "mid_train.epochs" => self.mid_train.epochs = parse(key, value)?,
            "mid_train.learning_rate" => self.mid_train.learning_rate = parse(key, value)?,
            "mid_train.demonstrations" => self.mid_train.demonstrations = parse(key, value)?,
            "diagnostics.every" => self.diagnostics.every = parse(key, value)?,
            "diagnostics.exact" => self.diagnostics.exact = parse(key, value)?,
            "diagnostics.drift" => self.diagnostics.drift = parse(key, value)?,
            "diagnostics.heldout" => self.diagnostics.heldout = parse(key, value)?,
            "output.dir" => self.output.dir = PathBuf::from(value),
            "output.checkpoint_every" => self.output.checkpoint_every = parse(key, value)?,
            "output.wall_clock" => self.output.wall_clock = parse(key, value)?,
            "lemmas.seeds" => self.lemmas.seeds = parse(key, value)?,
            "compare.alphas" => self.compare.alphas = parse_list(key, value)?,
            "compare.seeds" => self.compare.seeds = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Current value of `key` in config syntax.
    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        Some(match key {
            "run.seed" => self.seed.to_string(),
            "env.num_keys" => self.env.num_keys.to_string(),
            "env.num_values" => self.env.num_values.to_string(),
            "env.num_fillers" => self.env.num_fillers.to_string(),
            "env.max_response_len" => self.env.max_response_len.to_string(),
            "policy.model_dim" => self.policy.model_dim.to_string(),
            "policy.num_heads" => self.policy.num_heads.to_string(),
            "policy.num_blocks" => self.policy.num_blocks.to_string(),
            "policy.ffn_dim" => self.policy.ffn_dim.to_string(),
            "train.learning_rate" => t.learning_rate.to_string(),
            "train.group_size" => t.group_size.to_string(),
            "train.seal_weight" => t.seal_weight.to_string(),
            "train.kl_coef" => t.kl_coef.to_string(),
            "train.temperature" => t.temperature.to_string(),
            "train.advantage_mode" => t.advantage_mode.to_string(),
            "train.steps" => t.steps.to_string(),
            "train.seal_start_step" => t.seal_start_step.to_string(),
            "mid_train.enabled" => self.mid_train.enabled.to_string(),
            "mid_train.epochs" => self.mid_train.epochs.to_string(),
            "mid_train.learning_rate" => self.mid_train.learning_rate.to_string(),
            "mid_train.demonstrations" => self.mid_train.demonstrations.to_string(),
            "diagnostics.every" => self.diagnostics.every.to_string(),
            "diagnostics.exact" => self.diagnostics.exact.to_string(),
            "diagnostics.drift" => self.diagnostics.drift.to_string(),
            "diagnostics.heldout" => self.diagnostics.heldout.to_string(),
            "output.dir" => self.output.dir.display().to_string(),
            "output.checkpoint_every" => self.output.checkpoint_every.to_string(),
            "output.wall_clock" => self.output.wall_clock.to_string(),
            "lemmas.seeds" => self.lemmas.seeds.to_string(),
            "compare.alphas" => self
                .compare
                .alphas
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(", "),
            "compare.seeds" => self.compare.seeds.to_string(),
            _ => return None,
        })
    }

    /// The effective configuration in the same syntax `parse` reads.
    pub fn render(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn spec(&self) -> Result<ToolQASpec, ConfigError> {
        let e = &self.env;
        ToolQASpec::build(e.num_keys, e.num_values, e.num_fillers, e.max_response_len)
            .map_err(|err| field("env", err))
    }

    pub fn arch(&self) -> Result<PolicyArchitecture, ConfigError> {
        let spec = self.spec()?;
        let p = &self.policy;
        let arch = PolicyArchitecture {
            vocab_size: spec.vocab_size(),
            model_dim: p.model_dim,
            context_window: spec.context_window(),
            num_heads: p.num_heads,
            num_blocks: p.num_blocks,
            ffn_dim: p.ffn_dim,
        };
        arch.validate().map_err(|err| field("policy", err))?;
        Ok(arch)
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            rng_seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.arch()?;
        self.train_config()
            .validate()
            .map_err(|err| field("train", err))?;
        if self.diagnostics.every == 0 {
            return Err(field("diagnostics.every", "must be at least 1"));
        }
        if self.output.checkpoint_every == 0 {
            return Err(field("output.checkpoint_every", "must be at least 1"));
        }
        if self.mid_train.enabled {
            if self.mid_train.demonstrations == 0 {
                return Err(field("mid_train.demonstrations", "must be at least 1"));
            }
            if !(self.mid_train.learning_rate > 0.0 && self.mid_train.learning_rate.is_finite()) {
                return Err(field("mid_train.learning_rate", "must be positive"));
            }
        }
        if self.diagnostics.heldout == 1 {
            return Err(field(
                "diagnostics.heldout",
                "needs 0 or at least 2 trajectories",
            ));
        }
        if self.diagnostics.exact {
            let spec = self.spec()?;
            let required = (spec.vocab_size() as f64).powi(spec.max_response_len as i32);
            if required > ENUMERATION_BOUND {
                return Err(field(
                    "diagnostics.exact",
                    format!("needs {required:.3e} trajectories per prompt, above the {ENUMERATION_BOUND:e} bound"),
                ));
            }
        }
        Ok(())
    }
}

fn field(key: &str, message: impl Display) -> ConfigError {
    ConfigError::Field {
        key: key.to_string(),
        message: message.to_string(),
    }
}
