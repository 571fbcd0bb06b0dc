//! Adversarial scripted backends against the iteration cap, both at the
//! agent and through the service and gateway.

use std::sync::Arc;

use cogassist_core::adapter::AdapterProfile;
use cogassist_core::agent::{Agent, AgentError, PromptEnvelope};
use cogassist_core::backend::ScriptedBackend;
use cogassist_core::dialog::{DialogSettings, Modality, ModalityInput};
use cogassist_core::gateway::{ApiRequest, Gateway};
use cogassist_core::guardrail::Policy;
use cogassist_core::system::{Assistant, Setup};
use cogassist_core::tools::ToolRegistry;
use cogassist_core::ErrorKind;
use serde_json::json;

use crate::common::*;
use crate::Outcome;

/// Two tool calls and then an answer.
const TWO_TOOLS_THEN_ANSWER: &str = r#"
[[rule]]
match = ""
steps = [
  { tool = "mean", arguments = { values = [1.0, 2.0] } },
  { tool = "std_dev", arguments = { values = [1.0, 2.0] } },
  { final = "Mean and spread are {result}." },
]
"#;

type Maker = fn() -> ScriptedBackend;

fn backends() -> Vec<(&'static str, Maker)> {
    vec![
        ("always tool-call", ScriptedBackend::always_tool),
        ("unknown tool forever", ScriptedBackend::unknown_tool_forever),
        ("two tools then answer", || {
            ScriptedBackend::from_toml(TWO_TOOLS_THEN_ANSWER).unwrap()
        }),
    ]
}

pub fn run() -> Outcome {
    let policy = Policy::default_policy();
    let tools = ToolRegistry::standard();
    let envelope = PromptEnvelope::build(&policy, &[], Vec::new(), "compute the mean", &AdapterProfile::general());
    let mut runs = 0;
    for cap in 1..=8usize {
        for (name, make) in backends() {
            // Agent level.
            let backend = make();
            let agent = Agent {
                tools: &tools,
                policy: &policy,
                iteration_cap: cap,
            };
            let result = agent.generate(&envelope, &backend);
            let calls = backend.call_count() as usize;
            ensure!(calls <= cap, "{name}, cap {cap}: {calls} backend calls");
            match (&result, name) {
                (Err(AgentError::LoopExhausted { cap: c, tool_calls }), "always tool-call") => {
                    ensure!(
                        *c == cap && tool_calls.len() <= cap,
                        "{name}, cap {cap}: {c} / {}",
                        tool_calls.len()
                    );
                }
                (Err(AgentError::UnknownTool(t)), "unknown tool forever") => {
                    ensure!(t == "no_such_tool" && cap >= 2, "{name}, cap {cap}: aborted on {t}");
                }
                (Err(AgentError::LoopExhausted { .. }), "unknown tool forever") => {
                    ensure!(cap < 2, "{name}, cap {cap}: exhausted instead of aborting");
                }
                (Ok(g), "two tools then answer") => {
                    ensure!(
                        cap >= 3 && g.iterations == 3 && g.tool_calls.len() == 2,
                        "{name}, cap {cap}: {g:?}"
                    );
                }
                (Err(AgentError::LoopExhausted { .. }), "two tools then answer") => {
                    ensure!(cap < 3, "{name}, cap {cap}: exhausted with room to answer");
                }
                (other, _) => return Err(format!("{name}, cap {cap}: unexpected {other:?}")),
            }

            // Service and gateway level: well-formed error or answer, and a
            // failed turn leaves no history behind.
            let backend = Arc::new(make());
            let mut setup = Setup::new(fixed_clock());
            setup.registry = staff_registry();
            setup.backend = backend.clone();
            setup.settings = DialogSettings {
                iteration_cap: cap,
                ..DialogSettings::default()
            };
            let (a, _sink) = Assistant::in_memory(setup);
            let a = Arc::new(a);
            match a.chat(
                &who(OPERATOR),
                None,
                &ModalityInput::text("compute the mean"),
                Modality::Text,
            ) {
                Ok(r) => ensure!(!r.turn.assistant_text.is_empty(), "{name}, cap {cap}: empty answer"),
                Err(e) => {
                    ensure!(
                        e.kind() == ErrorKind::Internal,
                        "{name}, cap {cap}: error kind {:?}",
                        e.kind()
                    );
                    ensure!(a.history().all().is_empty(), "{name}, cap {cap}: failed turn persisted");
                }
            }
            ensure!(
                backend.call_count() as usize <= cap,
                "{name}, cap {cap}: service made too many calls"
            );

            let gw = Gateway::new(a.clone(), 3600, fixed_clock());
            let session = gw
                .login(&cogassist_core::acl::UserId::new(OPERATOR), &secret(OPERATOR))
                .ok_or("login")?;
            let resp = gw.handle_request(
                ApiRequest::new("POST", "/chat")
                    .bearer(&session.session_token)
                    .json(&json!({ "modality": "text", "payload": "compute the mean" })),
            );
            let body = resp.json();
            let well_formed = match resp.status {
                200 => body["turn"]["assistant_text"].is_string(),
                500 => {
                    body["error"]["code"] == "internal"
                        && body["error"]["message"].is_string()
                        && body["request_id"].is_string()
                }
                _ => false,
            };
            ensure!(
                well_formed,
                "{name}, cap {cap}: gateway answered {} {body}",
                resp.status
            );
            runs += 1;
        }
    }
    Ok(format!(
        "{runs} capped runs (caps 1..=8, three scripted backends): never above the cap, always a typed error or an answer"
    ))
}
