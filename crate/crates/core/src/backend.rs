//! Generation backends: the contract, a scripted in-process backend and a
//! remote chat-completion backend.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use regex::Regex;
use serde::Deserialize;
use serde_json::{json, Map, Value};

use crate::agent::PromptEnvelope;
use crate::tools::{ToolCall, ToolOutcome, ToolSpec};

/// What the backend sees on each loop iteration.
pub struct BackendRequest<'a> {
    pub envelope: &'a PromptEnvelope,
    pub tools: &'a [ToolSpec],
    /// Tool calls already executed in this generation, oldest first.
    pub steps: &'a [ToolCall],
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendReply {
    Final(String),
    ToolCall {
        name: String,
        arguments: Map<String, Value>,
    },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("generation backend unreachable: {0}")]
    Unavailable(String),
    #[error("generation backend sent an unusable reply: {0}")]
    BadResponse(String),
    #[error("generation backend misconfigured: {0}")]
    Config(String),
}

pub trait GenerationBackend: Send + Sync {
    fn complete(&self, request: &BackendRequest<'_>) -> Result<BackendReply, BackendError>;

    /// Whether the backend can currently serve requests.
    fn ready(&self) -> bool {
        true
    }
}

/// One scripted step. Steps are consumed in order, one per loop iteration;
/// once exhausted the last step repeats.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Step {
    Tool {
        tool: String,
        #[serde(default)]
        arguments: Map<String, Value>,
    },
    Final {
        #[serde(rename = "final")]
        text: String,
    },
    Echo {
        echo: bool,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleDef {
    #[serde(rename = "match")]
    pattern: String,
    steps: Vec<Step>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptFile {
    #[serde(default)]
    rule: Vec<RuleDef>,
}

#[derive(Debug, Clone)]
struct ScriptRule {
    matcher: Regex,
    steps: Vec<Step>,
}

/// Deterministic backend driven by rules `regex -> steps`, matched against
/// the user message. Messages matching no rule get an echo answer.
///
/// Final-text templates may use `{result}` (last tool result), `{message}`,
/// `{profile}`, `{context}` (first context chunk) and `{cite}` (`[1]`, or
/// empty without context). Every answer is prefixed with `[profile] ` so
/// adapter routing is observable.
#[derive(Debug)]
pub struct ScriptedBackend {
    rules: Vec<ScriptRule>,
    calls: AtomicU64,
}

impl Default for ScriptedBackend {
    fn default() -> Self {
        Self::echo()
    }
}

impl ScriptedBackend {
    pub fn echo() -> Self {
        Self::from_steps(vec![Step::Echo { echo: true }])
    }

    pub fn from_steps(steps: Vec<Step>) -> Self {
        Self {
            rules: vec![ScriptRule {
                matcher: Regex::new("").unwrap(),
                steps,
            }],
            calls: AtomicU64::new(0),
        }
    }

    /// Requests the same valid tool on every iteration.
    pub fn always_tool() -> Self {
        Self::from_steps(vec![Step::Tool {
            tool: "mean".into(),
            arguments: json!({"values": [1.0]}).as_object().unwrap().clone(),
        }])
    }

    /// Requests a tool that does not exist on every iteration.
    pub fn unknown_tool_forever() -> Self {
        Self::from_steps(vec![Step::Tool {
            tool: "no_such_tool".into(),
            arguments: Map::new(),
        }])
    }

    pub fn from_toml(text: &str) -> Result<Self, BackendError> {
        let file: ScriptFile = toml::from_str(text).map_err(|e| BackendError::Config(e.to_string()))?;
        let mut rules = Vec::new();
        for r in file.rule {
            if r.steps.is_empty() {
                return Err(BackendError::Config(format!("rule '{}' has no steps", r.pattern)));
            }
            let matcher = regex::RegexBuilder::new(&r.pattern)
                .case_insensitive(true)
                .build()
                .map_err(|e| BackendError::Config(e.to_string()))?;
            rules.push(ScriptRule {
                matcher,
                steps: r.steps,
            });
        }
        Ok(Self {
            rules,
            calls: AtomicU64::new(0),
        })
    }

    /// Backend invocations so far.
    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn render(template: &str, req: &BackendRequest<'_>) -> String {
        let env = req.envelope;
        let result = match req.steps.last().map(|s| &s.result) {
            Some(ToolOutcome::Ok(v)) => v.to_string(),
            Some(ToolOutcome::Error(e)) => format!("error: {e}"),
            None => String::new(),
        };
        let context = env.context_chunks.first().map(|c| c.text.as_str()).unwrap_or("");
        let cite = if env.context_chunks.is_empty() { "" } else { "[1]" };
        let body = template
            .replace("{result}", &result)
            .replace("{message}", &env.user_message)
            .replace("{profile}", &env.adapter_profile)
            .replace("{context}", context)
            .replace("{cite}", cite);
        format!("[{}] {body}", env.adapter_profile)
    }

    fn echo_text(req: &BackendRequest<'_>) -> String {
        if req.envelope.context_chunks.is_empty() {
            Self::render("No matching documents were found for: {message}", req)
        } else {
            Self::render("According to {cite}: {context}", req)
        }
    }
}

impl GenerationBackend for ScriptedBackend {
    fn complete(&self, req: &BackendRequest<'_>) -> Result<BackendReply, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let Some(rule) = self
            .rules
            .iter()
            .find(|r| r.matcher.is_match(&req.envelope.user_message))
        else {
            return Ok(BackendReply::Final(Self::echo_text(req)));
        };
        let step = rule
            .steps
            .get(req.steps.len())
            .unwrap_or_else(|| rule.steps.last().expect("rules have steps"));
        Ok(match step {
            Step::Tool { tool, arguments } => BackendReply::ToolCall {
                name: tool.clone(),
                arguments: arguments.clone(),
            },
            Step::Final { text } => BackendReply::Final(Self::render(text, req)),
            Step::Echo { .. } => BackendReply::Final(Self::echo_text(req)),
        })
    }
}

/// Remote backend speaking a chat-completion JSON protocol with function
/// calling. Endpoint, model and key come from the environment:
/// `COGASSIST_LLM_ENDPOINT`, `COGASSIST_LLM_MODEL`, `COGASSIST_LLM_API_KEY`.
pub struct HttpBackend {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(endpoint: String, model: String, api_key: Option<String>) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self {
            endpoint,
            model,
            api_key,
            client,
        })
    }

    pub fn from_env() -> Result<Self, BackendError> {
        let endpoint = std::env::var("COGASSIST_LLM_ENDPOINT")
            .map_err(|_| BackendError::Config("COGASSIST_LLM_ENDPOINT is not set".into()))?;
        let model = std::env::var("COGASSIST_LLM_MODEL").unwrap_or_else(|_| "default".into());
        Self::new(endpoint, model, std::env::var("COGASSIST_LLM_API_KEY").ok())
    }

    /// The request body sent for one iteration.
    pub fn request_body(&self, req: &BackendRequest<'_>) -> Value {
        let env = req.envelope;
        let mut system = env.system_preamble.clone();
        for c in &env.context_chunks {
            system.push_str(&format!(
                "\n[{}] ({} v{}) {}",
                c.index, c.provenance.doc_id, c.provenance.version, c.text
            ));
        }
        let mut messages = vec![json!({"role": "system", "content": system})];
        for t in &env.dialog_tail {
            messages.push(json!({"role": "user", "content": t.user_text}));
            messages.push(json!({"role": "assistant", "content": t.assistant_text}));
        }
        messages.push(json!({"role": "user", "content": env.user_message}));
        for (i, s) in req.steps.iter().enumerate() {
            let id = format!("call_{i}");
            messages.push(json!({
                "role": "assistant",
                "content": null,
                "tool_calls": [{
                    "id": id,
                    "type": "function",
                    "function": {"name": s.tool_name, "arguments": Value::Object(s.arguments.clone()).to_string()}
                }]
            }));
            let content = match &s.result {
                ToolOutcome::Ok(v) => v.to_string(),
                ToolOutcome::Error(e) => json!({"error": e}).to_string(),
            };
            messages.push(json!({"role": "tool", "tool_call_id": id, "content": content}));
        }
        let tools: Vec<Value> = req
            .tools
            .iter()
            .map(|t| {
                let props: Map<String, Value> = t
                    .params
                    .iter()
                    .map(|p| {
                        let schema = match p.param_type {
                            crate::tools::ParamType::Number => json!({"type": "number"}),
                            crate::tools::ParamType::Series => json!({"type": "array", "items": {"type": "number"}}),
                        };
                        (p.name.to_string(), schema)
                    })
                    .collect();
                let required: Vec<&str> = t.params.iter().map(|p| p.name).collect();
                json!({
                    "type": "function",
                    "function": {
                        "name": t.name,
                        "description": t.description,
                        "parameters": {"type": "object", "properties": props, "required": required}
                    }
                })
            })
            .collect();
        json!({
            "model": self.model,
            "messages": messages,
            "tools": tools,
            "metadata": {"adapter": env.adapter_profile, "backend_hint": env.backend_hint},
        })
    }
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    content: Option<String>,
    #[serde(default)]
    tool_calls: Vec<ResponseToolCall>,
}

#[derive(Deserialize)]
struct ResponseToolCall {
    function: ResponseFunction,
}

#[derive(Deserialize)]
struct ResponseFunction {
    name: String,
    arguments: String,
}

/// Interprets a chat-completion response body.
pub fn parse_completion(body: &str) -> Result<BackendReply, BackendError> {
    let resp: CompletionResponse = serde_json::from_str(body).map_err(|e| BackendError::BadResponse(e.to_string()))?;
    let msg = resp
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::BadResponse("no choices".into()))?
        .message;
    if let Some(call) = msg.tool_calls.into_iter().next() {
        let arguments = match serde_json::from_str::<Value>(&call.function.arguments) {
            Ok(Value::Object(m)) => m,
            _ => return Err(BackendError::BadResponse("tool arguments are not a JSON object".into())),
        };
        return Ok(BackendReply::ToolCall {
            name: call.function.name,
            arguments,
        });
    }
    msg.content
        .map(BackendReply::Final)
        .ok_or_else(|| BackendError::BadResponse("neither content nor tool call".into()))
}

impl GenerationBackend for HttpBackend {
    fn complete(&self, req: &BackendRequest<'_>) -> Result<BackendReply, BackendError> {
        let mut http = self.client.post(&self.endpoint).json(&self.request_body(req));
        if let Some(key) = &self.api_key {
            http = http.bearer_auth(key);
        }
        let resp = http.send().map_err(|e| BackendError::Unavailable(e.to_string()))?;
        let status = resp.status();
        let body = resp.text().map_err(|e| BackendError::Unavailable(e.to_string()))?;
        if status.is_server_error() {
            return Err(BackendError::Unavailable(format!("status {status}")));
        }
        if !status.is_success() {
            return Err(BackendError::BadResponse(format!("status {status}")));
        }
        parse_completion(&body)
    }
}
