//! Engine configuration: JSON file, then command-line flags, then
//! environment variables, each layer overriding the one before.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xmrag_core::generation::MllmConfig;
use xmrag_core::joint::DEFAULT_GRID_RESOLUTION;
use xmrag_core::query::LlmConfig;
use xmrag_core::MatchOptions;

use crate::error::CliError;

pub const ENV_BETA: &str = "XMRAG_BETA";
pub const ENV_GRID_RESOLUTION: &str = "XMRAG_GRID_RESOLUTION";
pub const ENV_OFFLINE: &str = "XMRAG_OFFLINE";
pub const ENV_SEED: &str = "XMRAG_SEED";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Decomposer {
    #[default]
    Rules,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub manifest: Option<PathBuf>,
    pub adapter: Option<PathBuf>,
    pub beta: Option<f64>,
    pub grid_resolution: usize,
    pub matching: MatchOptions,
    pub decomposer: Decomposer,
    pub llm: LlmConfig,
    pub mllm: MllmConfig,
    pub offline: bool,
    pub seed: u64,
    pub jobs: Option<usize>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            adapter: None,
            beta: None,
            grid_resolution: DEFAULT_GRID_RESOLUTION,
            matching: MatchOptions::default(),
            decomposer: Decomposer::default(),
            llm: LlmConfig::default(),
            mllm: MllmConfig::default(),
            offline: false,
            seed: 0,
            jobs: None,
        }
    }
}

/// Values given on the command line; `None` leaves the lower layer alone.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub manifest: Option<PathBuf>,
    pub adapter: Option<PathBuf>,
    pub beta: Option<f64>,
    pub grid_resolution: Option<usize>,
    pub strip_plurals: bool,
    pub decomposer: Option<Decomposer>,
    pub offline: bool,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
}

impl EngineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
        // paths in the file are relative to the file
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut config.manifest, &mut config.adapter].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn apply(&mut self, o: Overrides) {
        if o.manifest.is_some() {
            self.manifest = o.manifest;
        }
        if o.adapter.is_some() {
            self.adapter = o.adapter;
        }
        if o.beta.is_some() {
            self.beta = o.beta;
        }
        if let Some(m) = o.grid_resolution {
            self.grid_resolution = m;
        }
        if o.strip_plurals {
            self.matching.strip_plurals = true;
        }
        if let Some(d) = o.decomposer {
            self.decomposer = d;
        }
        if o.offline {
            self.offline = true;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if o.jobs.is_some() {
            self.jobs = o.jobs;
        }
    }

    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<(), CliError> {
        let parse = |name: &str, v: String| -> Result<f64, CliError> {
            v.trim()
                .parse()
                .map_err(|_| CliError::usage(format!("{name}={v:?} is not a number")))
        };
        if let Some(v) = var(ENV_BETA) {
            self.beta = Some(parse(ENV_BETA, v)?);
        }
        if let Some(v) = var(ENV_GRID_RESOLUTION) {
            self.grid_resolution = v
                .trim()
                .parse()
                .map_err(|_| CliError::usage(format!("{ENV_GRID_RESOLUTION}={v:?} is not an integer")))?;
        }
        if let Some(v) = var(ENV_SEED) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::usage(format!("{ENV_SEED}={v:?} is not an integer")))?;
        }
        if let Some(v) = var(ENV_OFFLINE) {
            self.offline = match v.trim().to_ascii_lowercase().as_str() {
                "1" | "true" | "yes" | "on" => true,
                "0" | "false" | "no" | "off" | "" => false,
                _ => return Err(CliError::usage(format!("{ENV_OFFLINE}={v:?} is not a boolean"))),
            };
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.grid_resolution < 1 {
            return Err(CliError::usage("grid resolution must be >= 1"));
        }
        if let Some(b) = self.beta {
            if !(b > 0.0 && b.is_finite()) {
                return Err(CliError::usage(format!("beta must be > 0, got {b}")));
            }
        }
        if self.jobs == Some(0) {
            return Err(CliError::usage("--jobs must be >= 1"));
        }
        Ok(())
    }

    pub fn manifest(&self) -> Result<&Path, CliError> {
        self.manifest
            .as_deref()
            .ok_or_else(|| CliError::usage("no corpus manifest given (--manifest or config file)"))
    }

    pub fn adapter(&self) -> Result<&Path, CliError> {
        self.adapter
            .as_deref()
            .ok_or_else(|| CliError::usage("no adapter parameters given (--adapter or config file)"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env<'a>(pairs: &'a [(&'a str, &'a str)]) -> impl Fn(&str) -> Option<String> + 'a {
        move |k| pairs.iter().find(|(n, _)| *n == k).map(|(_, v)| v.to_string())
    }

    #[test]
    fn flags_override_file_and_env_overrides_flags() {
        let mut c = EngineConfig {
            beta: Some(0.01),
            grid_resolution: 6,
            ..EngineConfig::default()
        };
        c.apply(Overrides {
            beta: Some(0.02),
            ..Overrides::default()
        });
        assert_eq!(c.beta, Some(0.02));
        assert_eq!(c.grid_resolution, 6);
        c.apply_env(env(&[(ENV_BETA, "0.015"), (ENV_OFFLINE, "1")]))
            .unwrap();
        assert_eq!(c.beta, Some(0.015));
        assert!(c.offline);
    }

    #[test]
    fn bad_values_are_usage_errors() {
        let mut c = EngineConfig::default();
        assert_eq!(c.apply_env(env(&[(ENV_BETA, "abc")])).unwrap_err().code, 1);
        c.beta = Some(-1.0);
        assert_eq!(c.validate().unwrap_err().code, 1);
    }

    #[test]
    fn partial_json_keeps_defaults() {
        let c: EngineConfig = serde_json::from_str(r#"{"beta": 0.015}"#).unwrap();
        assert_eq!(c.grid_resolution, 10);
        assert_eq!(c.beta, Some(0.015));
        assert!(serde_json::from_str::<EngineConfig>(r#"{"betta": 1}"#).is_err());
    }
}
