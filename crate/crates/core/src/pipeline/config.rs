//! Pipeline configuration.
//!
//! The config file is flat TOML, one `key = value` per line, using the keys
//! in [`KEYS`]. Command-line flags arrive as a second table with the same keys
//! and take precedence over the file. Every key left unset receives its
//! default, and the names of those keys are recorded in
//! [`PipelineConfig::defaults_applied`].

use std::path::{Path, PathBuf};

use thiserror::Error;
use toml::{Table, Value};

use crate::dit::ModelDims;
use crate::grid::TokenGrid;
use crate::mask::WindowSpec;
use crate::pipeline::upsample::UpsampleMethod;
use crate::scheduler::{DualPathConfig, ScaleMode, ScheduleSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Io { path: String, message: String },

    #[error("config syntax: {0}")]
    Syntax(String),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("config key `{key}` expects {expected}")]
    Type { key: String, expected: &'static str },

    #[error("missing required config key `{0}`")]
    Missing(&'static str),

    #[error("invalid `{key}`: {message}")]
    Invalid { key: &'static str, message: String },
}

/// Every accepted key.
pub const KEYS: &[&str] = &[
    "native_grid",
    "target_grid",
    "window",
    "steps",
    "strength",
    "guidance_scale",
    "flow_shift",
    "lambda",
    "cache_period",
    "dual_path_on_uncond",
    "scale_mode",
    "native_tokens",
    "model_dim",
    "heads",
    "head_dim",
    "blocks",
    "ff_dim",
    "text_len",
    "text_dim",
    "channels",
    "weight_seed",
    "noise_seed",
    "upsample",
    "report",
    "bench_only",
];

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub native_grid: TokenGrid,
    pub target_grid: TokenGrid,
    pub schedule: ScheduleSpec,
    /// Window, lambda, cache period and scale mode.
    pub dual_path: DualPathConfig,
    pub dims: ModelDims,
    pub weight_seed: u64,
    pub noise_seed: u64,
    pub upsample: UpsampleMethod,
    pub report: Option<PathBuf>,
    pub bench_only: bool,
    pub defaults_applied: Vec<String>,
}

impl PipelineConfig {
    pub fn window(&self) -> WindowSpec {
        self.dual_path.window
    }

    /// Builds a config from a merged key table.
    pub fn from_table(table: &Table) -> Result<Self, ConfigError> {
        if let Some(key) = table.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(ConfigError::UnknownKey(key.clone()));
        }
        let mut r = Reader {
            table,
            defaults: Vec::new(),
        };

        let native_grid = r.grid("native_grid")?;
        let target_grid = r.grid("target_grid")?;
        if target_grid.frames() != native_grid.frames() {
            return Err(ConfigError::Invalid {
                key: "target_grid",
                message: format!(
                    "frame count must equal the native grid's ({} vs {})",
                    target_grid.frames(),
                    native_grid.frames()
                ),
            });
        }
        if target_grid.height() < native_grid.height() || target_grid.width() < native_grid.width()
        {
            return Err(ConfigError::Invalid {
                key: "target_grid",
                message: format!("{target_grid} is smaller than native grid {native_grid}"),
            });
        }

        let window = match r.string("window")? {
            Some(s) => s.parse::<WindowSpec>().map_err(|e| ConfigError::Invalid {
                key: "window",
                message: e.to_string(),
            })?,
            None => {
                r.defaults.push("window".into());
                WindowSpec::native(&native_grid)
            }
        };

        let d = ScheduleSpec::default();
        let schedule = ScheduleSpec {
            num_steps: r.uint("steps", d.num_steps as u64)? as usize,
            strength: r.float("strength", d.strength)?,
            guidance_scale: r.float("guidance_scale", d.guidance_scale)?,
            flow_shift: r.float("flow_shift", d.flow_shift)?,
        };
        schedule.validate().map_err(|e| ConfigError::Invalid {
            key: "schedule",
            message: e.to_string(),
        })?;

        let scale_name = r.string("scale_mode")?;
        let native_tokens = r.uint("native_tokens", native_grid.spatial_count() as u64)? as usize;
        let scale_mode = match scale_name.as_deref() {
            None => {
                r.defaults.push("scale_mode".into());
                ScaleMode::Entropy { native_tokens }
            }
            Some("entropy") => ScaleMode::Entropy { native_tokens },
            Some("inverse-sqrt-d") => ScaleMode::InverseSqrtD,
            Some(other) => {
                return Err(ConfigError::Invalid {
                    key: "scale_mode",
                    message: format!("{other:?} is not one of inverse-sqrt-d, entropy"),
                })
            }
        };
        if matches!(scale_mode, ScaleMode::Entropy { native_tokens } if native_tokens < 2) {
            return Err(ConfigError::Invalid {
                key: "native_tokens",
                message: "entropy scaling needs at least 2 native tokens".into(),
            });
        }

        let dual_path = DualPathConfig {
            lambda: r.float("lambda", 1.0)?,
            cache_period: r.uint("cache_period", 2)? as usize,
            dual_path_on_uncond: r.bool("dual_path_on_uncond", false)?,
            window,
            scale_mode,
        };
        dual_path.validate().map_err(|e| ConfigError::Invalid {
            key: "dual_path",
            message: e.to_string(),
        })?;

        let md = ModelDims::default();
        let dims = ModelDims {
            model_dim: r.uint("model_dim", md.model_dim as u64)? as usize,
            heads: r.uint("heads", md.heads as u64)? as usize,
            head_dim: r.uint("head_dim", md.head_dim as u64)? as usize,
            blocks: r.uint("blocks", md.blocks as u64)? as usize,
            ff_dim: r.uint("ff_dim", md.ff_dim as u64)? as usize,
            text_len: r.uint("text_len", md.text_len as u64)? as usize,
            text_dim: r.uint("text_dim", md.text_dim as u64)? as usize,
            channels: r.uint("channels", md.channels as u64)? as usize,
        };
        dims.validate().map_err(|e| ConfigError::Invalid {
            key: "model",
            message: e.to_string(),
        })?;

        let weight_seed = r.uint("weight_seed", 0)?;
        let noise_seed = r.uint("noise_seed", 0)?;
        let upsample = match r.string("upsample")? {
            Some(s) => s.parse().map_err(|e: crate::Error| ConfigError::Invalid {
                key: "upsample",
                message: e.to_string(),
            })?,
            None => {
                r.defaults.push("upsample".into());
                UpsampleMethod::Nearest
            }
        };
        let report = r.string("report")?.map(PathBuf::from);
        let bench_only = r.bool("bench_only", false)?;

        Ok(Self {
            native_grid,
            target_grid,
            schedule,
            dual_path,
            dims,
            weight_seed,
            noise_seed,
            upsample,
            report,
            bench_only,
            defaults_applied: r.defaults,
        })
    }
}

struct Reader<'a> {
    table: &'a Table,
    defaults: Vec<String>,
}

impl Reader<'_> {
    fn type_error(key: &str, expected: &'static str) -> ConfigError {
        ConfigError::Type {
            key: key.to_string(),
            expected,
        }
    }

    fn string(&mut self, key: &'static str) -> Result<Option<String>, ConfigError> {
        match self.table.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(_) => Err(Self::type_error(key, "a string")),
        }
    }

    fn grid(&mut self, key: &'static str) -> Result<TokenGrid, ConfigError> {
        let s = self.string(key)?.ok_or(ConfigError::Missing(key))?;
        s.parse().map_err(|e: crate::Error| ConfigError::Invalid {
            key,
            message: e.to_string(),
        })
    }

    fn uint(&mut self, key: &'static str, default: u64) -> Result<u64, ConfigError> {
        match self.table.get(key) {
            None => {
                self.defaults.push(key.into());
                Ok(default)
            }
            Some(Value::Integer(i)) if *i >= 0 => Ok(*i as u64),
            Some(_) => Err(Self::type_error(key, "a non-negative integer")),
        }
    }

    fn float(&mut self, key: &'static str, default: f64) -> Result<f64, ConfigError> {
        match self.table.get(key) {
            None => {
                self.defaults.push(key.into());
                Ok(default)
            }
            Some(Value::Float(f)) => Ok(*f),
            Some(Value::Integer(i)) => Ok(*i as f64),
            Some(_) => Err(Self::type_error(key, "a number")),
        }
    }

    fn bool(&mut self, key: &'static str, default: bool) -> Result<bool, ConfigError> {
        match self.table.get(key) {
            None => {
                self.defaults.push(key.into());
                Ok(default)
            }
            Some(Value::Boolean(b)) => Ok(*b),
            Some(_) => Err(Self::type_error(key, "a boolean")),
        }
    }
}

/// Parses config file text into a key table.
pub fn parse_table(text: &str) -> Result<Table, ConfigError> {
    text.parse::<Table>()
        .map_err(|e| ConfigError::Syntax(e.message().to_string()))
}

/// Reads an optional config file, lays `overrides` over it and validates.
pub fn parse_config(file: Option<&Path>, overrides: &Table) -> Result<PipelineConfig, ConfigError> {
    let mut table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            parse_table(&text)?
        }
        None => Table::new(),
    };
    for (k, v) in overrides {
        table.insert(k.clone(), v.clone());
    }
    PipelineConfig::from_table(&table)
}
