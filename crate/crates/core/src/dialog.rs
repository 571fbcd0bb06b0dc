//! Modality handling and the per-turn pipeline:
//! normalize, guard input, retrieve, generate, guard output, persist, render.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::acl::Caller;
use crate::adapter::AdapterSet;
use crate::agent::{Agent, PromptEnvelope};
use crate::audit::{tag_request, AuditLog, EventKind};
use crate::backend::GenerationBackend;
use crate::clock::Clock;
use crate::corpus::Corpus;
use crate::error::{Error, ErrorKind};
use crate::guardrail::PolicyHandle;
use crate::history::{ConversationHistory, DialogTurn};
use crate::ids::ConversationId;
use crate::tools::ToolRegistry;
use crate::vector_store::VersionScope;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Voice,
}

impl FromStr for Modality {
    type Err = DialogError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(Modality::Text),
            "voice" => Ok(Modality::Voice),
            other => Err(DialogError::UnsupportedModality(other.to_string())),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Text => "text",
            Modality::Voice => "voice",
        })
    }
}

/// Text payloads carry the message; voice payloads carry an audio
/// reference. `transcript_hint` lets stub transcribers answer
/// deterministically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityInput {
    pub modality: Modality,
    pub payload: String,
    #[serde(default)]
    pub transcript_hint: Option<String>,
}

impl ModalityInput {
    pub fn text(s: impl Into<String>) -> Self {
        Self {
            modality: Modality::Text,
            payload: s.into(),
            transcript_hint: None,
        }
    }

    pub fn voice(audio_ref: impl Into<String>, hint: Option<&str>) -> Self {
        Self {
            modality: Modality::Voice,
            payload: audio_ref.into(),
            transcript_hint: hint.map(str::to_string),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityOutput {
    pub modality: Modality,
    pub payload: String,
    /// Voice was requested but text was delivered.
    pub downgraded: bool,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DialogError {
    #[error("unsupported modality '{0}'")]
    UnsupportedModality(String),
    #[error("voice input received but no transcriber is configured")]
    NoTranscriber,
    #[error("voice input needs an audio reference")]
    MissingAudio,
    #[error("transcription failed: {0}")]
    Transcription(String),
    #[error("synthesis failed: {0}")]
    Synthesis(String),
    #[error("message is empty")]
    EmptyMessage,
}

impl DialogError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            DialogError::UnsupportedModality(_) | DialogError::MissingAudio | DialogError::EmptyMessage => {
                ErrorKind::Validation
            }
            DialogError::NoTranscriber => ErrorKind::Internal,
            DialogError::Transcription(_) | DialogError::Synthesis(_) => ErrorKind::BackendUnavailable,
        }
    }
}

pub trait Transcriber: Send + Sync {
    fn transcribe(&self, audio_ref: &str, hint: Option<&str>) -> Result<String, DialogError>;
}

pub trait Synthesizer: Send + Sync {
    fn synthesize(&self, text: &str) -> Result<String, DialogError>;
}

/// Returns the transcript hint.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubTranscriber;

impl Transcriber for StubTranscriber {
    fn transcribe(&self, _audio_ref: &str, hint: Option<&str>) -> Result<String, DialogError> {
        hint.map(str::to_string)
            .ok_or_else(|| DialogError::Transcription("stub transcriber needs a transcript hint".into()))
    }
}

/// Produces `audio:stub:<first 16 hex digits of sha256(text)>`.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubSynthesizer;

impl Synthesizer for StubSynthesizer {
    fn synthesize(&self, text: &str) -> Result<String, DialogError> {
        let digest = hex::encode(Sha256::digest(text.as_bytes()));
        Ok(format!("audio:stub:{}", &digest[..16]))
    }
}

fn http_client() -> Result<reqwest::blocking::Client, String> {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(60))
        .build()
        .map_err(|e| e.to_string())
}

/// `POST {endpoint}` with `{"audio_ref", "hint"}`, expecting `{"text"}`.
pub struct HttpTranscriber {
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl HttpTranscriber {
    pub fn new(endpoint: impl Into<String>) -> Result<Self, DialogError> {
        Ok(Self {
            endpoint: endpoint.into(),
            client: http_client().map_err(DialogError::Transcription)?,
        })
    }
}

impl Transcriber for HttpTranscriber {
    fn transcribe(&self, audio_ref: &str, hint: Option<&str>) -> Result<String, DialogError> {
        #[derive(Deserialize)]
        struct Resp {
            text: String,
        }
        let err = |e: String| DialogError::Transcription(e);
        let resp = self
            .client
            .post(&self.endpoint)
            .json(&json!({"audio_ref": audio_ref, "hint": hint}))
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| err(e.to_string()))?;
        Ok(resp.json::<Resp>().map_err(|e| err(e.to_string()))?.text)
    }
}

/// `POST {endpoint}` with `{"text"}`, expecting `{"audio_ref"}`.
pub struct HttpSynthesizer {
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl HttpSynthesizer {
    pub fn new(endpoint: impl Into<String>) -> Result<Self, DialogError> {
        Ok(Self {
            endpoint: endpoint.into(),
            client: http_client().map_err(DialogError::Synthesis)?,
        })
    }
}

impl Synthesizer for HttpSynthesizer {
    fn synthesize(&self, text: &str) -> Result<String, DialogError> {
        #[derive(Deserialize)]
        struct Resp {
            audio_ref: String,
        }
        let err = |e: String| DialogError::Synthesis(e);
        let resp = self
            .client
            .post(&self.endpoint)
            .json(&json!({"text": text}))
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| err(e.to_string()))?;
        Ok(resp.json::<Resp>().map_err(|e| err(e.to_string()))?.audio_ref)
    }
}

pub fn normalize_input(input: &ModalityInput, transcriber: Option<&dyn Transcriber>) -> Result<String, DialogError> {
    match input.modality {
        Modality::Text => Ok(input.payload.clone()),
        Modality::Voice => {
            if input.payload.trim().is_empty() {
                return Err(DialogError::MissingAudio);
            }
            transcriber
                .ok_or(DialogError::NoTranscriber)?
                .transcribe(&input.payload, input.transcript_hint.as_deref())
        }
    }
}

/// Voice output falls back to text, flagged, when no synthesizer is
/// configured or synthesis fails.
pub fn render_output(text: &str, requested: Modality, synthesizer: Option<&dyn Synthesizer>) -> ModalityOutput {
    let as_text = |downgraded| ModalityOutput {
        modality: Modality::Text,
        payload: text.to_string(),
        downgraded,
    };
    match requested {
        Modality::Text => as_text(false),
        Modality::Voice => match synthesizer.map(|s| s.synthesize(text)) {
            Some(Ok(audio)) => ModalityOutput {
                modality: Modality::Voice,
                payload: audio,
                downgraded: false,
            },
            _ => as_text(true),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineStage {
    Normalize,
    GuardInput,
    Retrieve,
    Generate,
    GuardOutput,
    Persist,
    Render,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TurnResult {
    pub conversation_id: ConversationId,
    pub turn: DialogTurn,
    pub output: ModalityOutput,
    pub trace: Vec<PipelineStage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DialogSettings {
    pub top_k: usize,
    pub dialog_tail: usize,
    pub iteration_cap: usize,
}

impl Default for DialogSettings {
    fn default() -> Self {
        Self {
            top_k: 5,
            dialog_tail: 6,
            iteration_cap: crate::agent::DEFAULT_ITERATION_CAP,
        }
    }
}

/// Orchestrates one dialog turn across retrieval, generation and history.
pub struct ConversationalAgent {
    pub corpus: Arc<Corpus>,
    pub history: Arc<ConversationHistory>,
    pub policy: Arc<PolicyHandle>,
    pub adapters: AdapterSet,
    pub tools: Arc<ToolRegistry>,
    pub backend: Arc<dyn GenerationBackend>,
    pub transcriber: Option<Arc<dyn Transcriber>>,
    pub synthesizer: Option<Arc<dyn Synthesizer>>,
    pub audit: Arc<AuditLog>,
    pub clock: Arc<dyn Clock>,
    pub settings: DialogSettings,
}

impl ConversationalAgent {
    /// Runs one turn. The caller must already hold `chat`; continuing a
    /// conversation additionally requires owning it. Nothing is returned
    /// unless the turn was persisted.
    pub fn run_turn(
        &self,
        conversation: Option<&ConversationId>,
        input: &ModalityInput,
        requested: Modality,
        caller: &Caller,
    ) -> Result<TurnResult, Error> {
        let mut trace = vec![PipelineStage::Normalize];
        let message = normalize_input(input, self.transcriber.as_deref())?;
        if message.trim().is_empty() {
            return Err(DialogError::EmptyMessage.into());
        }
        if let Some(id) = conversation {
            if self.history.owner(id)? != caller.user_id {
                return Err(crate::history::HistoryError::NotOwner(id.clone()).into());
            }
        }
        let policy = self.policy.snapshot();
        trace.push(PipelineStage::GuardInput);
        let input_verdict = policy.guard_input(&message);
        let mut guard_flags = vec![input_verdict.clone()];

        let (assistant_text, provenance, tool_calls, adapter, grounded, refused);
        if input_verdict.is_blocked() {
            assistant_text = policy.input_refusal.clone();
            provenance = Vec::new();
            tool_calls = Vec::new();
            adapter = None;
            grounded = false;
            refused = true;
        } else {
            trace.push(PipelineStage::Retrieve);
            let hits = self
                .corpus
                .retrieve(&message, self.settings.top_k, VersionScope::Active)?;
            let tail = match conversation {
                Some(id) => {
                    let turns = self.history.get(id)?.turns;
                    let skip = turns.len().saturating_sub(self.settings.dialog_tail);
                    turns.into_iter().skip(skip).collect()
                }
                None => Vec::new(),
            };
            let profile = self.adapters.select(&message);
            let envelope = PromptEnvelope::build(&policy, &hits, tail, message.clone(), profile);
            trace.push(PipelineStage::Generate);
            let generation = Agent {
                tools: &self.tools,
                policy: &policy,
                iteration_cap: self.settings.iteration_cap,
            }
            .generate(&envelope, &*self.backend)?;
            trace.push(PipelineStage::GuardOutput);
            guard_flags.push(generation.output_verdict.clone());
            assistant_text = generation.answer;
            provenance = generation.provenance;
            tool_calls = generation.tool_calls;
            adapter = Some(profile.name.clone());
            grounded = generation.grounded;
            refused = generation.refused;
        }

        trace.push(PipelineStage::Persist);
        let now = self.clock.now();
        let (id, created) = match conversation {
            Some(id) => (id.clone(), false),
            None => (self.history.create(&caller.user_id, now)?, true),
        };
        let lock = self.history.turn_lock(&id);
        let _guard = lock.lock().unwrap();
        let turn = DialogTurn {
            turn_index: self.history.next_turn_index(&id)?,
            user_text: message,
            assistant_text,
            provenance,
            tool_calls,
            guard_flags,
            created_at: now,
            input_modality: input.modality,
            adapter_profile: adapter,
            grounded,
            refused,
        };
        let detail = json!({
            "conversation_id": id,
            "turn_index": turn.turn_index,
            "new_conversation": created,
            "input_modality": turn.input_modality,
            "refused": turn.refused,
            "grounded": turn.grounded,
            "provenance": turn.provenance,
            "tool_calls": turn.tool_calls.len(),
        });
        self.audit.record(
            EventKind::TurnAppended,
            format!("conversation:{id}"),
            caller.user_id.as_str(),
            tag_request(detail, caller.request_id.as_deref()),
        )?;
        self.history.append_turn(&id, turn.clone())?;
        trace.push(PipelineStage::Render);
        let output = render_output(&turn.assistant_text, requested, self.synthesizer.as_deref());
        Ok(TurnResult {
            conversation_id: id,
            turn,
            output,
            trace,
        })
    }
}
