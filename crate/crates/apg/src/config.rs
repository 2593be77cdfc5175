//! TOML configuration: run parameters and one endpoint per capability.
//!
//! ```toml
//! [run]
//! max_iterations = 10
//! radius_text = 0.9
//!
//! [chat]
//! url = "http://localhost:8000/v1"
//! model = "llama-3-70b-instruct"
//! api_key_env = "OPENAI_API_KEY"
//! timeout_secs = 120
//! ```
//!
//! `APG_<CAPABILITY>_<FIELD>` environment variables (for example
//! `APG_CHAT_URL`, `APG_EMBED_TEXT_MODEL`) override file values.

use std::path::Path;

use apg_core::RunConfig;
use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, Error, Result};

pub const DEFAULT_TIMEOUT_SECS: u64 = 120;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoint {
    pub url: Option<String>,
    pub model: Option<String>,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    pub timeout_secs: Option<u64>,
}

impl Endpoint {
    fn apply_env(&mut self, prefix: &str, env: &dyn Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(v) = env(&format!("{prefix}_URL")) {
            self.url = Some(v);
        }
        if let Some(v) = env(&format!("{prefix}_MODEL")) {
            self.model = Some(v);
        }
        if let Some(v) = env(&format!("{prefix}_API_KEY_ENV")) {
            self.api_key_env = Some(v);
        }
        if let Some(v) = env(&format!("{prefix}_TIMEOUT_SECS")) {
            let secs = v
                .parse()
                .map_err(|_| Error::Config(format!("{prefix}_TIMEOUT_SECS must be an integer, got `{v}`")))?;
            self.timeout_secs = Some(secs);
        }
        Ok(())
    }

    pub fn timeout_secs(&self) -> u64 {
        self.timeout_secs.unwrap_or(DEFAULT_TIMEOUT_SECS)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub chat: Endpoint,
    #[serde(default)]
    pub vision: Endpoint,
    #[serde(default)]
    pub embed_text: Endpoint,
    #[serde(default)]
    pub embed_image: Endpoint,
}

impl Config {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|source| Error::Toml { path: path.to_path_buf(), source })
    }

    /// Reads `path` (when given) and applies process environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut config = match path {
            Some(p) => Config::parse(&read_to_string(p)?, p)?,
            None => Config::default(),
        };
        config.apply_env(&|k| std::env::var(k).ok())?;
        Ok(config)
    }

    pub fn apply_env(&mut self, env: &dyn Fn(&str) -> Option<String>) -> Result<()> {
        self.chat.apply_env("APG_CHAT", env)?;
        self.vision.apply_env("APG_VISION", env)?;
        self.embed_text.apply_env("APG_EMBED_TEXT", env)?;
        self.embed_image.apply_env("APG_EMBED_IMAGE", env)
    }
}
