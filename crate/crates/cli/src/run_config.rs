//! TOML run configuration: loading with line-anchored errors, dotted-key
//! overrides for sweeps, and output-directory resolution.

use std::fmt;
use std::path::{Path, PathBuf};

use proxyrl::config::GradingConfig;
use proxyrl::{EnvConfig, ExperimentConfig, ProtocolConfig, TrainerConfig};
use serde::{Deserialize, Serialize};

/// Environment variable naming the root that relative output directories
/// are resolved against.
pub const OUTPUT_ROOT_VAR: &str = "PROXYRL_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub scale_factor: f64,
    pub output_dir: PathBuf,
    /// Expert objective used as the PGR maximum. When absent, an expert
    /// baseline of `reference_steps` steps is run first.
    pub pgr_maximum: Option<f64>,
    pub reference_steps: u64,
    /// Directory of grader snapshots for `retrain_scratch`. When absent, a
    /// distillation run with the same settings produces them.
    pub snapshot_dir: Option<PathBuf>,
    pub env: EnvConfig,
    pub trainer: TrainerConfig,
    pub grading: GradingConfig,
    pub protocol: ProtocolConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            seed: e.seed,
            scale_factor: e.scale_factor,
            output_dir: PathBuf::from("out"),
            pgr_maximum: None,
            reference_steps: 2000,
            snapshot_dir: None,
            env: e.env,
            trainer: e.trainer,
            grading: e.grading,
            protocol: e.protocol,
        }
    }
}

impl RunConfig {
    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            seed: self.seed,
            scale_factor: self.scale_factor,
            env: self.env.clone(),
            trainer: self.trainer.clone(),
            grading: self.grading.clone(),
            protocol: self.protocol.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable as TOML")
    }

    /// `output_dir`, resolved against `$PROXYRL_OUTPUT_ROOT` when relative.
    pub fn resolved_output(&self) -> PathBuf {
        resolve_output(&self.output_dir)
    }
}

pub fn resolve_output(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

/// A configuration problem, anchored to a line of the source file when possible.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: PathBuf,
    pub line: Option<usize>,
    pub column: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.path.display())?;
        if let Some(l) = self.line {
            write!(f, ":{l}")?;
            if let Some(c) = self.column {
                write!(f, ":{c}")?;
            }
        }
        write!(f, ": {}", self.message)
    }
}

/// Reads, overrides and validates a run configuration.
pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
        path: path.to_path_buf(),
        line: None,
        column: None,
        message: format!("cannot read config: {e}"),
    })?;
    parse(path, &text, overrides)
}

pub fn parse(path: &Path, text: &str, overrides: &[(String, String)]) -> Result<RunConfig, ConfigError> {
    let err = |span: Option<std::ops::Range<usize>>, message: String| {
        let (line, column) = match span {
            Some(s) => {
                let (l, c) = line_col(text, s.start);
                (Some(l), Some(c))
            }
            None => (None, None),
        };
        ConfigError { path: path.to_path_buf(), line, column, message }
    };
    let mut table: toml::Table = toml::from_str(text).map_err(|e: toml::de::Error| err(e.span(), e.message().to_string()))?;
    for (key, value) in overrides {
        set_dotted(&mut table, key, value).map_err(|m| err(None, format!("override {key}={value}: {m}")))?;
    }
    let config: RunConfig = if overrides.is_empty() {
        toml::from_str(text).map_err(|e: toml::de::Error| err(e.span(), e.message().to_string()))?
    } else {
        RunConfig::deserialize(toml::Value::Table(table)).map_err(|e| err(None, e.message().to_string()))?
    };
    config.experiment().validate().map_err(|e| {
        let message = e.to_string();
        let line = locate_key(text, &message);
        ConfigError { path: path.to_path_buf(), line, column: line.map(|_| 1), message }
    })?;
    Ok(config)
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map(|s| s.chars().count()).unwrap_or(0) + 1;
    (line, column)
}

/// Line of the first `section.key` mentioned in a validation message.
fn locate_key(text: &str, message: &str) -> Option<usize> {
    let dotted = message
        .split(|c: char| !(c.is_ascii_alphanumeric() || c == '_' || c == '.'))
        .find(|w| w.contains('.') && w.chars().next().is_some_and(|c| c.is_ascii_alphabetic()))?;
    let mut parts: Vec<&str> = dotted.split('.').collect();
    let key = parts.pop()?;
    let section = parts.join(".");
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = h.trim().to_string();
            continue;
        }
        let Some((k, _)) = line.split_once('=') else { continue };
        let k = k.trim();
        let full = if current.is_empty() { k.to_string() } else { format!("{current}.{k}") };
        if full == dotted || (current == section && k == key) {
            return Some(i + 1);
        }
    }
    None
}

/// Sets `a.b.c = value`, parsing `value` as a TOML literal (bare strings allowed).
pub fn set_dotted(table: &mut toml::Table, key: &str, value: &str) -> Result<(), String> {
    let parsed = parse_value(value);
    let mut parts = key.split('.').peekable();
    let mut current = table;
    while let Some(part) = parts.next() {
        if part.is_empty() {
            return Err("empty key segment".into());
        }
        if parts.peek().is_none() {
            current.insert(part.to_string(), parsed);
            return Ok(());
        }
        let entry = current.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        current = entry.as_table_mut().ok_or_else(|| format!("{part} is not a table"))?;
    }
    Err("empty key".into())
}

fn parse_value(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(value.to_string())),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

/// Parses `key=v1,v2,...`.
pub fn parse_sweep_arg(arg: &str) -> Result<(String, Vec<String>), String> {
    let (key, values) = arg.split_once('=').ok_or_else(|| format!("expected key=v1,v2,... in {arg:?}"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(format!("empty key in {arg:?}"));
    }
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
    if values.iter().any(String::is_empty) {
        return Err(format!("empty value in {arg:?}"));
    }
    Ok((key.to_string(), values))
}
