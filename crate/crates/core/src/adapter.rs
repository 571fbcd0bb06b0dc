//! Domain adapter profiles and keyword routing.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::embed::embedding_tokens;

pub const GENERAL: &str = "general";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterProfile {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub routing_keywords: Vec<String>,
    #[serde(default)]
    pub backend_hint: String,
}

impl AdapterProfile {
    pub fn general() -> Self {
        Self {
            name: GENERAL.into(),
            description: "General shop-floor assistant".into(),
            routing_keywords: Vec::new(),
            backend_hint: String::new(),
        }
    }

    /// Number of distinct routing keywords present in the message. A
    /// multi-word keyword must appear as a contiguous token sequence.
    pub fn keyword_hits(&self, message_tokens: &[String]) -> usize {
        self.routing_keywords
            .iter()
            .map(|k| embedding_tokens(k).collect::<Vec<_>>())
            .filter(|k| !k.is_empty())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .filter(|k| message_tokens.windows(k.len()).any(|w| w == k.as_slice()))
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AdapterError {
    #[error("duplicate adapter profile '{0}'")]
    Duplicate(String),
    #[error("adapter profiles must include '{GENERAL}'")]
    MissingGeneral,
}

/// A validated set of profiles: names unique, `general` present.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdapterSet {
    profiles: Vec<AdapterProfile>,
}

impl Default for AdapterSet {
    fn default() -> Self {
        Self {
            profiles: vec![AdapterProfile::general()],
        }
    }
}

impl AdapterSet {
    pub fn new(profiles: Vec<AdapterProfile>) -> Result<Self, AdapterError> {
        let mut seen = BTreeSet::new();
        for p in &profiles {
            if !seen.insert(p.name.as_str()) {
                return Err(AdapterError::Duplicate(p.name.clone()));
            }
        }
        if !seen.contains(GENERAL) {
            return Err(AdapterError::MissingGeneral);
        }
        Ok(Self { profiles })
    }

    pub fn profiles(&self) -> &[AdapterProfile] {
        &self.profiles
    }

    pub fn general(&self) -> &AdapterProfile {
        self.profiles.iter().find(|p| p.name == GENERAL).expect("validated")
    }

    /// The profile with strictly the most keyword hits; ties and zero hits
    /// fall back to `general`.
    pub fn select(&self, message: &str) -> &AdapterProfile {
        let tokens: Vec<String> = embedding_tokens(message).collect();
        let mut best: Option<(&AdapterProfile, usize)> = None;
        let mut tied = false;
        for p in &self.profiles {
            let hits = p.keyword_hits(&tokens);
            match best {
                Some((_, b)) if hits < b => {}
                Some((_, b)) if hits == b => tied = true,
                _ => {
                    best = Some((p, hits));
                    tied = false;
                }
            }
        }
        match best {
            Some((p, hits)) if hits > 0 && !tied => p,
            _ => self.general(),
        }
    }
}
