//! The guardrailed agent loop: prompt assembly, tool execution and output
//! screening.

use std::sync::OnceLock;

use regex::Regex;
use serde::Serialize;

use crate::adapter::AdapterProfile;
use crate::backend::{BackendError, BackendReply, BackendRequest, GenerationBackend};
use crate::error::ErrorKind;
use crate::guardrail::{GuardrailVerdict, Policy};
use crate::history::{DialogTurn, Provenance};
use crate::tools::{ToolCall, ToolRegistry};
use crate::vector_store::ScoredChunk;

pub const DEFAULT_ITERATION_CAP: usize = 4;

pub const GROUNDING_INSTRUCTION: &str = "You are a shop-floor assistant for a quality-managed production site. \
Answer only from the numbered context passages below. Cite every passage you use as [n]. \
If the context does not contain the answer, say so. Use the provided functions for calculations.";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContextChunk {
    /// 1-based position used for `[n]` citations.
    pub index: usize,
    pub text: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptEnvelope {
    pub system_preamble: String,
    pub context_chunks: Vec<ContextChunk>,
    pub dialog_tail: Vec<DialogTurn>,
    pub user_message: String,
    pub adapter_profile: String,
    pub backend_hint: String,
}

impl PromptEnvelope {
    pub fn build(
        policy: &Policy,
        hits: &[ScoredChunk],
        dialog_tail: Vec<DialogTurn>,
        user_message: impl Into<String>,
        profile: &AdapterProfile,
    ) -> Self {
        Self {
            system_preamble: format!("{GROUNDING_INSTRUCTION}\nPolicy version: {}", policy.version),
            context_chunks: hits
                .iter()
                .enumerate()
                .map(|(i, h)| ContextChunk {
                    index: i + 1,
                    text: h.chunk.text.clone(),
                    provenance: Provenance {
                        doc_id: h.chunk.doc_id.clone(),
                        version: h.chunk.version,
                        chunk_id: h.chunk.chunk_id.clone(),
                    },
                })
                .collect(),
            dialog_tail,
            user_message: user_message.into(),
            adapter_profile: profile.name.clone(),
            backend_hint: profile.backend_hint.clone(),
        }
    }

    pub fn provenance(&self) -> Vec<Provenance> {
        self.context_chunks.iter().map(|c| c.provenance.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Generation {
    pub answer: String,
    pub tool_calls: Vec<ToolCall>,
    /// Every chunk that was in the envelope; empty when the answer was
    /// replaced by a refusal.
    pub provenance: Vec<Provenance>,
    /// 1-based context indices cited in the answer.
    pub cited: Vec<usize>,
    pub grounded: bool,
    pub output_verdict: GuardrailVerdict,
    pub refused: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AgentError {
    #[error("agent loop exhausted after {cap} iterations")]
    LoopExhausted { cap: usize, tool_calls: Vec<ToolCall> },
    #[error("agent loop aborted: backend requested unknown tool '{0}' again")]
    UnknownTool(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

impl AgentError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            AgentError::LoopExhausted { .. } | AgentError::UnknownTool(_) => ErrorKind::Internal,
            AgentError::Backend(BackendError::Unavailable(_) | BackendError::BadResponse(_)) => {
                ErrorKind::BackendUnavailable
            }
            AgentError::Backend(BackendError::Config(_)) => ErrorKind::Internal,
        }
    }
}

fn citation_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[(\d{1,4})\]").unwrap())
}

/// Distinct, valid `[n]` citations in order of first appearance.
pub fn citations(answer: &str, context_len: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for cap in citation_re().captures_iter(answer) {
        if let Ok(n) = cap[1].parse::<usize>() {
            if (1..=context_len).contains(&n) && !out.contains(&n) {
                out.push(n);
            }
        }
    }
    out
}

pub struct Agent<'a> {
    pub tools: &'a ToolRegistry,
    pub policy: &'a Policy,
    pub iteration_cap: usize,
}

impl Agent<'_> {
    /// Runs the loop. Each iteration is one backend call; tool requests are
    /// executed and fed back. An unknown tool is reported back once; a
    /// second unknown-tool request aborts. Final text is screened before it
    /// is returned.
    pub fn generate(
        &self,
        envelope: &PromptEnvelope,
        backend: &dyn GenerationBackend,
    ) -> Result<Generation, AgentError> {
        let specs = self.tools.specs();
        let mut steps: Vec<ToolCall> = Vec::new();
        let mut unknown_seen = false;
        for iteration in 1..=self.iteration_cap {
            let reply = backend.complete(&BackendRequest {
                envelope,
                tools: &specs,
                steps: &steps,
            })?;
            match reply {
                BackendReply::ToolCall { name, arguments } => {
                    if !self.tools.contains(&name) {
                        if unknown_seen {
                            return Err(AgentError::UnknownTool(name));
                        }
                        unknown_seen = true;
                    }
                    steps.push(self.tools.execute(&name, arguments));
                }
                BackendReply::Final(text) => {
                    let verdict = self.policy.guard_output(&text);
                    if verdict.is_blocked() {
                        return Ok(Generation {
                            answer: self.policy.output_refusal.clone(),
                            tool_calls: steps,
                            provenance: Vec::new(),
                            cited: Vec::new(),
                            grounded: false,
                            output_verdict: verdict,
                            refused: true,
                            iterations: iteration,
                        });
                    }
                    let cited = citations(&text, envelope.context_chunks.len());
                    return Ok(Generation {
                        grounded: !cited.is_empty(),
                        cited,
                        answer: text,
                        tool_calls: steps,
                        provenance: envelope.provenance(),
                        output_verdict: verdict,
                        refused: false,
                        iterations: iteration,
                    });
                }
            }
        }
        Err(AgentError::LoopExhausted {
            cap: self.iteration_cap,
            tool_calls: steps,
        })
    }
}
