//! Rule-based guardrails for prompts, responses and ticket content.
//!
//! A [`Policy`] is loaded once from TOML and compiled; evaluation never
//! fails. Rules are tried in file order and the first match decides.

use std::collections::BTreeSet;
use std::sync::{Arc, RwLock};

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};

use crate::error::ErrorKind;

pub const DEFAULT_POLICY: &str = include_str!("../policy/default_policy.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuardDecision {
    Pass,
    Block,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuardCategory {
    PromptInjection,
    PolicyViolation,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Input,
    Output,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuardrailVerdict {
    pub decision: GuardDecision,
    pub category: GuardCategory,
    pub matched_rule: Option<String>,
    pub stage: Stage,
}

impl GuardrailVerdict {
    pub fn pass(stage: Stage) -> Self {
        Self {
            decision: GuardDecision::Pass,
            category: GuardCategory::None,
            matched_rule: None,
            stage,
        }
    }

    pub fn block(stage: Stage, category: GuardCategory, rule: impl Into<String>) -> Self {
        Self {
            decision: GuardDecision::Block,
            category,
            matched_rule: Some(rule.into()),
            stage,
        }
    }

    pub fn is_blocked(&self) -> bool {
        self.decision == GuardDecision::Block
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("policy file is not valid TOML: {0}")]
    Parse(String),
    #[error("rule '{id}' has an invalid pattern: {reason}")]
    BadPattern { id: String, reason: String },
    #[error("duplicate rule id '{0}'")]
    DuplicateRule(String),
    #[error("rule '{0}' cannot use category none")]
    NoneCategory(String),
    #[error("invalid policy: {0}")]
    Invalid(String),
}

impl PolicyError {
    pub fn kind(&self) -> ErrorKind {
        ErrorKind::Validation
    }
}

fn both_stages() -> Vec<Stage> {
    vec![Stage::Input, Stage::Output]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyFile {
    pub version: String,
    pub input_refusal: String,
    pub output_refusal: String,
    #[serde(default)]
    pub deny: Vec<PatternDef>,
    #[serde(default)]
    pub phrases: Vec<PhraseListDef>,
    pub jailbreak: JailbreakDef,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternDef {
    pub id: String,
    pub category: GuardCategory,
    pub pattern: String,
    #[serde(default = "both_stages")]
    pub stages: Vec<Stage>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhraseListDef {
    pub id: String,
    pub category: GuardCategory,
    #[serde(default = "both_stages")]
    pub stages: Vec<Stage>,
    pub terms: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JailbreakDef {
    pub override_words: Vec<String>,
    pub behaviour_verbs: Vec<String>,
    pub directive_ratio: f64,
    #[serde(default)]
    pub rule: Vec<PatternDef>,
}

#[derive(Debug, Clone)]
pub struct Rule {
    pub id: String,
    pub category: GuardCategory,
    pub stages: BTreeSet<Stage>,
    regex: Regex,
}

impl Rule {
    pub fn is_match(&self, text: &str) -> bool {
        self.regex.is_match(text)
    }
}

fn compile(id: &str, pattern: &str) -> Result<Regex, PolicyError> {
    RegexBuilder::new(pattern)
        .case_insensitive(true)
        .build()
        .map_err(|e| PolicyError::BadPattern {
            id: id.to_string(),
            reason: e.to_string(),
        })
}

/// Outcome of the directive-density heuristic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectiveDensity {
    pub directives: usize,
    pub sentences: usize,
}

impl DirectiveDensity {
    pub fn ratio(&self) -> f64 {
        if self.sentences == 0 {
            0.0
        } else {
            self.directives as f64 / self.sentences as f64
        }
    }
}

/// The stricter rule set applied to feedback-ticket content.
#[derive(Debug, Clone)]
pub struct JailbreakRules {
    pub rules: Vec<Rule>,
    pub override_words: BTreeSet<String>,
    pub behaviour_verbs: BTreeSet<String>,
    pub directive_ratio: f64,
}

impl JailbreakRules {
    pub fn density(&self, text: &str) -> DirectiveDensity {
        let mut d = DirectiveDensity {
            directives: 0,
            sentences: 0,
        };
        for sentence in text.split(['.', '!', '?', '\n', ';']) {
            let words: Vec<String> = sentence
                .split(|c: char| !c.is_alphanumeric() && c != '\'')
                .filter(|w| !w.is_empty())
                .map(str::to_lowercase)
                .collect();
            if words.is_empty() {
                continue;
            }
            d.sentences += 1;
            let has_override = words.iter().any(|w| self.override_words.contains(w));
            let has_verb = words.iter().any(|w| self.behaviour_verbs.contains(w));
            if has_override && has_verb {
                d.directives += 1;
            }
        }
        d
    }
}

/// A compiled, immutable policy snapshot.
#[derive(Debug, Clone)]
pub struct Policy {
    pub version: String,
    pub input_refusal: String,
    pub output_refusal: String,
    pub rules: Vec<Rule>,
    pub jailbreak: JailbreakRules,
}

impl Policy {
    pub fn from_toml(text: &str) -> Result<Self, PolicyError> {
        let file: PolicyFile = toml::from_str(text).map_err(|e| PolicyError::Parse(e.to_string()))?;
        Self::compile(file)
    }

    pub fn default_policy() -> Self {
        Self::from_toml(DEFAULT_POLICY).expect("shipped policy compiles")
    }

    pub fn compile(file: PolicyFile) -> Result<Self, PolicyError> {
        let mut ids = BTreeSet::new();
        let mut check_id = |id: &str, category: GuardCategory| {
            if category == GuardCategory::None {
                return Err(PolicyError::NoneCategory(id.to_string()));
            }
            if !ids.insert(id.to_string()) {
                return Err(PolicyError::DuplicateRule(id.to_string()));
            }
            Ok(())
        };
        let mut rules = Vec::new();
        for d in &file.deny {
            check_id(&d.id, d.category)?;
            rules.push(Rule {
                id: d.id.clone(),
                category: d.category,
                stages: d.stages.iter().copied().collect(),
                regex: compile(&d.id, &d.pattern)?,
            });
        }
        for p in &file.phrases {
            check_id(&p.id, p.category)?;
            if p.terms.iter().any(|t| t.trim().is_empty()) {
                return Err(PolicyError::Invalid(format!(
                    "phrase list '{}' has an empty term",
                    p.id
                )));
            }
            let alternation = p
                .terms
                .iter()
                .map(|t| t.split_whitespace().map(regex::escape).collect::<Vec<_>>().join(r"\s+"))
                .collect::<Vec<_>>()
                .join("|");
            rules.push(Rule {
                id: p.id.clone(),
                category: p.category,
                stages: p.stages.iter().copied().collect(),
                regex: compile(&p.id, &format!(r"\b({alternation})\b"))?,
            });
        }
        let mut jb_rules = Vec::new();
        for d in &file.jailbreak.rule {
            check_id(&d.id, d.category)?;
            jb_rules.push(Rule {
                id: d.id.clone(),
                category: d.category,
                stages: d.stages.iter().copied().collect(),
                regex: compile(&d.id, &d.pattern)?,
            });
        }
        let ratio = file.jailbreak.directive_ratio;
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(PolicyError::Invalid("directive_ratio must be in (0, 1]".into()));
        }
        let lower = |v: &[String]| v.iter().map(|s| s.to_lowercase()).collect::<BTreeSet<_>>();
        Ok(Self {
            version: file.version,
            input_refusal: file.input_refusal,
            output_refusal: file.output_refusal,
            rules,
            jailbreak: JailbreakRules {
                rules: jb_rules,
                override_words: lower(&file.jailbreak.override_words),
                behaviour_verbs: lower(&file.jailbreak.behaviour_verbs),
                directive_ratio: ratio,
            },
        })
    }

    fn evaluate(&self, text: &str, stage: Stage) -> GuardrailVerdict {
        self.rules
            .iter()
            .filter(|r| r.stages.contains(&stage))
            .find(|r| r.is_match(text))
            .map(|r| GuardrailVerdict::block(stage, r.category, r.id.clone()))
            .unwrap_or_else(|| GuardrailVerdict::pass(stage))
    }

    /// Screens a user message. Empty messages pass; emptiness is a dialog
    /// concern, not a safety one.
    pub fn guard_input(&self, message: &str) -> GuardrailVerdict {
        self.evaluate(message, Stage::Input)
    }

    /// Screens a model response. Deny patterns run on the output too, so a
    /// response that echoes an injection payload is blocked.
    pub fn guard_output(&self, response: &str) -> GuardrailVerdict {
        self.evaluate(response, Stage::Output)
    }

    pub fn rule(&self, id: &str) -> Option<&Rule> {
        self.rules.iter().chain(&self.jailbreak.rules).find(|r| r.id == id)
    }
}

/// Shared, hot-swappable policy. Readers take a cheap snapshot; a reload
/// replaces the snapshot atomically.
pub struct PolicyHandle {
    current: RwLock<Arc<Policy>>,
}

impl PolicyHandle {
    pub fn new(policy: Policy) -> Self {
        Self {
            current: RwLock::new(Arc::new(policy)),
        }
    }

    pub fn snapshot(&self) -> Arc<Policy> {
        self.current.read().unwrap().clone()
    }

    pub fn replace(&self, policy: Policy) -> Arc<Policy> {
        std::mem::replace(&mut *self.current.write().unwrap(), Arc::new(policy))
    }
}
