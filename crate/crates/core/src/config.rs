//! Service configuration file.
//!
//! ```toml
//! data_dir = "data"
//! bind = "127.0.0.1:8080"
//! session_ttl_secs = 3600
//! top_k = 5
//! dialog_tail = 6
//! agent_iteration_cap = 4
//! fact_threshold = 0.5
//! # fixed_time = "2026-01-01T00:00:00Z"
//! # registry = "registry.toml"
//! # policy = "policy.toml"
//!
//! [embedding]
//! kind = "hashed"          # or "http" (endpoint required)
//! dimension = 256
//!
//! [chunking]
//! window = 512
//! overlap = 64
//!
//! [generation]
//! kind = "scripted"        # or "http"; endpoint/model/key come from the environment
//! # script = "script.toml"
//!
//! [voice]
//! transcriber = "stub"     # stub | http | none
//! synthesizer = "stub"
//!
//! [[adapter]]
//! name = "maintenance"
//! routing_keywords = ["torque", "lubricate"]
//! ```
//!
//! Relative paths are resolved against the directory holding the file.
//! Secrets are never read from this file.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::DateTime;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterProfile, AdapterSet};
use crate::backend::{GenerationBackend, HttpBackend, ScriptedBackend};
use crate::chunking::ChunkingConfig;
use crate::clock::{Clock, FixedClock, SystemClock, Timestamp};
use crate::dialog::{HttpSynthesizer, HttpTranscriber, StubSynthesizer, StubTranscriber, Synthesizer, Transcriber};
use crate::embed::{Embedder, HashedBagEmbedder, HttpEmbedder, DEFAULT_DIMENSION};
use crate::error::Error;
use crate::feedback::checks::DEFAULT_FACT_THRESHOLD;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default = "default_bind")]
    pub bind: String,
    #[serde(default = "default_ttl")]
    pub session_ttl_secs: u64,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_tail")]
    pub dialog_tail: usize,
    #[serde(default = "default_cap")]
    pub agent_iteration_cap: usize,
    #[serde(default = "default_threshold")]
    pub fact_threshold: f64,
    /// Pins every domain timestamp to one instant.
    #[serde(default)]
    pub fixed_time: Option<String>,
    /// Seed for the user registry; copied into the data directory on first
    /// start. The built-in three-group seed is used when absent.
    #[serde(default)]
    pub registry: Option<PathBuf>,
    #[serde(default)]
    pub policy: Option<PathBuf>,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    #[serde(default)]
    pub chunking: ChunkingConfig,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub voice: VoiceConfig,
    #[serde(default)]
    pub adapter: Vec<AdapterProfile>,
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("data")
}
fn default_bind() -> String {
    "127.0.0.1:8080".into()
}
fn default_ttl() -> u64 {
    3600
}
fn default_top_k() -> usize {
    5
}
fn default_tail() -> usize {
    6
}
fn default_cap() -> usize {
    crate::agent::DEFAULT_ITERATION_CAP
}
fn default_threshold() -> f64 {
    DEFAULT_FACT_THRESHOLD
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    #[default]
    Hashed,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    #[serde(default)]
    pub kind: EmbeddingKind,
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    #[serde(default)]
    pub endpoint: Option<String>,
}

fn default_dimension() -> usize {
    DEFAULT_DIMENSION
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            kind: EmbeddingKind::Hashed,
            dimension: DEFAULT_DIMENSION,
            endpoint: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationKind {
    #[default]
    Scripted,
    Http,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    #[serde(default)]
    pub kind: GenerationKind,
    /// Script for the scripted backend; the echo script when absent.
    #[serde(default)]
    pub script: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoiceKind {
    #[default]
    Stub,
    Http,
    None,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoiceConfig {
    #[serde(default)]
    pub transcriber: VoiceKind,
    #[serde(default)]
    pub transcriber_endpoint: Option<String>,
    #[serde(default)]
    pub synthesizer: VoiceKind,
    #[serde(default)]
    pub synthesizer_endpoint: Option<String>,
}

impl Default for Config {
    fn default() -> Self {
        toml::from_str("").expect("empty config uses defaults")
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, Error> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and resolves its relative paths.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, Error> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.data_dir);
        for p in [&mut cfg.registry, &mut cfg.policy, &mut cfg.generation.script]
            .into_iter()
            .flatten()
        {
            resolve(p);
        }
        Ok(cfg)
    }

    /// Defaults with the given data directory.
    pub fn with_data_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: dir.into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.chunking.validate().map_err(Error::Config)?;
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be positive".into()));
        }
        if self.agent_iteration_cap == 0 {
            return Err(Error::Config("agent_iteration_cap must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.fact_threshold) {
            return Err(Error::Config("fact_threshold must lie in [0, 1]".into()));
        }
        if self.embedding.dimension == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        self.fixed_time()?;
        AdapterSet::new(self.adapter_profiles()).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn fixed_time(&self) -> Result<Option<Timestamp>, Error> {
        self.fixed_time
            .as_deref()
            .map(|s| {
                DateTime::parse_from_rfc3339(s)
                    .map(|t| t.to_utc())
                    .map_err(|e| Error::Config(format!("fixed_time: {e}")))
            })
            .transpose()
    }

    pub fn clock(&self) -> Result<Arc<dyn Clock>, Error> {
        Ok(match self.fixed_time()? {
            Some(t) => Arc::new(FixedClock(t)),
            None => Arc::new(SystemClock),
        })
    }

    /// The configured profiles plus `general` if it was not listed.
    pub fn adapter_profiles(&self) -> Vec<AdapterProfile> {
        let mut profiles = self.adapter.clone();
        if !profiles.iter().any(|p| p.name == AdapterProfile::general().name) {
            profiles.insert(0, AdapterProfile::general());
        }
        profiles
    }

    pub fn adapters(&self) -> Result<AdapterSet, Error> {
        AdapterSet::new(self.adapter_profiles()).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn embedder(&self) -> Result<Arc<dyn Embedder>, Error> {
        Ok(match self.embedding.kind {
            EmbeddingKind::Hashed => Arc::new(HashedBagEmbedder::new(self.embedding.dimension)),
            EmbeddingKind::Http => {
                let endpoint = self
                    .embedding
                    .endpoint
                    .clone()
                    .ok_or_else(|| Error::Config("embedding.endpoint is required for kind = \"http\"".into()))?;
                Arc::new(HttpEmbedder::new(endpoint, self.embedding.dimension)?)
            }
        })
    }

    pub fn backend(&self) -> Result<Arc<dyn GenerationBackend>, Error> {
        let cfg_err = |e: crate::backend::BackendError| Error::Config(e.to_string());
        Ok(match self.generation.kind {
            GenerationKind::Scripted => match &self.generation.script {
                Some(path) => {
                    let text =
                        fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                    Arc::new(ScriptedBackend::from_toml(&text).map_err(cfg_err)?)
                }
                None => Arc::new(ScriptedBackend::echo()),
            },
            GenerationKind::Http => Arc::new(HttpBackend::from_env().map_err(cfg_err)?),
        })
    }

    pub fn transcriber(&self) -> Result<Option<Arc<dyn Transcriber>>, Error> {
        Ok(match self.voice.transcriber {
            VoiceKind::Stub => Some(Arc::new(StubTranscriber)),
            VoiceKind::None => None,
            VoiceKind::Http => {
                let endpoint = self
                    .voice
                    .transcriber_endpoint
                    .clone()
                    .ok_or_else(|| Error::Config("voice.transcriber_endpoint is required".into()))?;
                Some(Arc::new(HttpTranscriber::new(endpoint)?))
            }
        })
    }

    pub fn synthesizer(&self) -> Result<Option<Arc<dyn Synthesizer>>, Error> {
        Ok(match self.voice.synthesizer {
            VoiceKind::Stub => Some(Arc::new(StubSynthesizer)),
            VoiceKind::None => None,
            VoiceKind::Http => {
                let endpoint = self
                    .voice
                    .synthesizer_endpoint
                    .clone()
                    .ok_or_else(|| Error::Config("voice.synthesizer_endpoint is required".into()))?;
                Some(Arc::new(HttpSynthesizer::new(endpoint)?))
            }
        })
    }
}
