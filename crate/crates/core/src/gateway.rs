//! Transport-neutral request handling: sessions, the route table,
//! authorization and error mapping. The CLI's `serve` command adapts HTTP
//! requests to [`ApiRequest`] and back.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use chrono::{Duration, NaiveDate};
use rand::RngCore;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::acl::{Caller, GroupId, Permission, UserId};
use crate::clock::{Clock, Timestamp};
use crate::dialog::{Modality, ModalityInput};
use crate::document::{DocKind, SourceFormat};
use crate::error::{Error, ErrorKind};
use crate::feedback::{AnalyticsQuery, Flag, RevisionInput, TicketState};
use crate::ids::{ConversationId, DocId, TicketId};
use crate::system::{Assistant, IngestRequest, NewUser};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Public,
    Requires(Permission),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Route {
    pub method: &'static str,
    /// Literal segments and `{param}` placeholders.
    pub pattern: &'static str,
    pub access: Access,
}

const fn route(method: &'static str, pattern: &'static str, access: Access) -> Route {
    Route {
        method,
        pattern,
        access,
    }
}

use Access::{Public, Requires};
use Permission as P;

/// Every endpoint. Earlier entries win when patterns overlap.
pub const ROUTES: &[Route] = &[
    route("GET", "/health", Public),
    route("POST", "/login", Public),
    route("POST", "/logout", Requires(P::Chat)),
    route("POST", "/chat", Requires(P::Chat)),
    route("GET", "/conversations", Requires(P::Chat)),
    route("GET", "/conversations/{id}", Requires(P::Chat)),
    route("GET", "/conversations/{id}/export", Requires(P::Chat)),
    route("POST", "/tickets", Requires(P::FlagAnswer)),
    route("GET", "/tickets", Requires(P::RewriteTicket)),
    route("GET", "/tickets/export", Requires(P::ReadAudit)),
    route("GET", "/tickets/{id}", Requires(P::RewriteTicket)),
    route("GET", "/tickets/{id}/events", Requires(P::ReadAudit)),
    route("POST", "/tickets/{id}/revision", Requires(P::RewriteTicket)),
    route("POST", "/tickets/{id}/checks", Requires(P::RewriteTicket)),
    route("POST", "/tickets/{id}/approve", Requires(P::ApproveTicket)),
    route("POST", "/tickets/{id}/reject", Requires(P::ApproveTicket)),
    route("GET", "/analytics", Requires(P::ReadTicketAnalytics)),
    route("GET", "/corpus", Requires(P::Chat)),
    route("POST", "/corpus", Requires(P::ManageCorpus)),
    route("GET", "/corpus/search", Requires(P::Chat)),
    route("GET", "/corpus/{id}", Requires(P::Chat)),
    route("GET", "/admin/users", Requires(P::ManageUsers)),
    route("POST", "/admin/users", Requires(P::ManageUsers)),
    route("POST", "/admin/users/{id}/groups", Requires(P::ManageUsers)),
    route("POST", "/admin/users/{id}/active", Requires(P::ManageUsers)),
    route("POST", "/admin/policy", Requires(P::ManageCorpus)),
    route("GET", "/admin/state", Requires(P::ReadAudit)),
    route("GET", "/audit", Requires(P::ReadAudit)),
    route("GET", "/audit/verify", Requires(P::ReadAudit)),
];

fn match_pattern<'a>(pattern: &str, path: &'a str) -> Option<Vec<&'a str>> {
    let pat: Vec<&str> = pattern.trim_matches('/').split('/').collect();
    let segs: Vec<&str> = path.trim_matches('/').split('/').collect();
    if pat.len() != segs.len() {
        return None;
    }
    let mut params = Vec::new();
    for (p, s) in pat.iter().zip(&segs) {
        if p.starts_with('{') {
            if s.is_empty() {
                return None;
            }
            params.push(*s);
        } else if p != s {
            return None;
        }
    }
    Some(params)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ApiRequest {
    pub method: String,
    pub path: String,
    pub query: BTreeMap<String, String>,
    pub bearer: Option<String>,
    pub body: Vec<u8>,
    /// Taken from an `X-Request-Id` header when present.
    pub request_id: Option<String>,
}

impl ApiRequest {
    pub fn new(method: &str, path: &str) -> Self {
        let (path, query) = match path.split_once('?') {
            Some((p, q)) => (p, parse_query(q)),
            None => (path, BTreeMap::new()),
        };
        Self {
            method: method.to_string(),
            path: path.to_string(),
            query,
            ..Self::default()
        }
    }

    pub fn bearer(mut self, token: &str) -> Self {
        self.bearer = Some(token.to_string());
        self
    }

    pub fn json(mut self, body: &Value) -> Self {
        self.body = serde_json::to_vec(body).expect("json value serializes");
        self
    }
}

/// Splits `a=1&b=2`. Values are taken verbatim apart from `+` and `%20`.
pub fn parse_query(q: &str) -> BTreeMap<String, String> {
    q.split('&')
        .filter(|kv| !kv.is_empty())
        .map(|kv| {
            let (k, v) = kv.split_once('=').unwrap_or((kv, ""));
            (
                k.to_string(),
                v.replace('+', " ").replace("%20", " ").replace("%3A", ":"),
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum ApiBody {
    Json(Value),
    /// Newline-delimited JSON.
    JsonLines(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiResponse {
    pub status: u16,
    pub body: ApiBody,
    pub request_id: String,
}

impl ApiResponse {
    pub fn json(&self) -> &Value {
        match &self.body {
            ApiBody::Json(v) => v,
            ApiBody::JsonLines(_) => &Value::Null,
        }
    }

    pub fn error_code(&self) -> Option<&str> {
        self.json().pointer("/error/code").and_then(Value::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Session {
    pub session_token: String,
    pub user_id: UserId,
    pub issued_at: Timestamp,
    pub expires_at: Timestamp,
}

/// Failures detected by the gateway itself, before a module is reached.
#[derive(Debug)]
enum Failure {
    Domain(Error),
    Unauthenticated(&'static str),
    NotFound(String),
    MethodNotAllowed,
    BadRequest(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Domain(e)
    }
}

impl Failure {
    fn status_and_code(&self) -> (u16, &'static str) {
        match self {
            Failure::Domain(e) => (e.kind().http_status(), e.kind().code()),
            Failure::Unauthenticated(_) => (401, ErrorKind::Unauthenticated.code()),
            Failure::NotFound(_) => (404, ErrorKind::NotFound.code()),
            Failure::MethodNotAllowed => (405, "method_not_allowed"),
            Failure::BadRequest(_) => (422, ErrorKind::Validation.code()),
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Domain(e) => e.to_string(),
            Failure::Unauthenticated(m) => m.to_string(),
            Failure::NotFound(m) => m.clone(),
            Failure::MethodNotAllowed => "method not allowed".into(),
            Failure::BadRequest(m) => m.clone(),
        }
    }
}

type Handled = Result<ApiBody, Failure>;

pub struct Gateway {
    assistant: Arc<Assistant>,
    sessions: Mutex<HashMap<String, Session>>,
    ttl: Duration,
    /// Session expiry runs on its own clock so that a pinned domain clock
    /// does not make sessions immortal.
    clock: Arc<dyn Clock>,
    requests: AtomicU64,
}

impl Gateway {
    pub fn new(assistant: Arc<Assistant>, ttl_secs: u64, clock: Arc<dyn Clock>) -> Self {
        Self {
            assistant,
            sessions: Mutex::new(HashMap::new()),
            ttl: Duration::seconds(ttl_secs as i64),
            clock,
            requests: AtomicU64::new(0),
        }
    }

    pub fn assistant(&self) -> &Arc<Assistant> {
        &self.assistant
    }

    /// Issues a session. Unknown users, inactive users and wrong
    /// credentials all produce the same error.
    pub fn login(&self, user_id: &UserId, credential: &str) -> Option<Session> {
        if !self.assistant.verify_credential(user_id, credential) {
            return None;
        }
        let mut bytes = [0u8; 32];
        rand::rngs::OsRng.fill_bytes(&mut bytes);
        let now = self.clock.now();
        let session = Session {
            session_token: hex::encode(bytes),
            user_id: user_id.clone(),
            issued_at: now,
            expires_at: now + self.ttl,
        };
        self.sessions
            .lock()
            .unwrap()
            .insert(session.session_token.clone(), session.clone());
        Some(session)
    }

    fn session_user(&self, token: Option<&str>) -> Result<UserId, Failure> {
        let token = token.ok_or(Failure::Unauthenticated("missing session token"))?;
        let mut sessions = self.sessions.lock().unwrap();
        let session = sessions
            .get(token)
            .ok_or(Failure::Unauthenticated("invalid or expired session"))?;
        if self.clock.now() >= session.expires_at {
            sessions.remove(token);
            return Err(Failure::Unauthenticated("invalid or expired session"));
        }
        // Deactivation is enforced by authorization, so a live session of a
        // deactivated user is refused (and audited) like any other denial.
        Ok(session.user_id.clone())
    }

    pub fn handle_request(&self, req: ApiRequest) -> ApiResponse {
        let request_id = req
            .request_id
            .clone()
            .unwrap_or_else(|| format!("req-{:08}", self.requests.fetch_add(1, Ordering::SeqCst) + 1));
        let result = self.route(&req, &request_id);
        match result {
            Ok(body) => ApiResponse {
                status: 200,
                body,
                request_id,
            },
            Err(f) => {
                let (status, code) = f.status_and_code();
                ApiResponse {
                    status,
                    body: ApiBody::Json(json!({
                        "error": { "code": code, "message": f.message() },
                        "request_id": request_id,
                    })),
                    request_id,
                }
            }
        }
    }

    fn route(&self, req: &ApiRequest, request_id: &str) -> Handled {
        let mut path_matched = false;
        for r in ROUTES {
            let Some(params) = match_pattern(r.pattern, &req.path) else {
                continue;
            };
            path_matched = true;
            if r.method != req.method {
                continue;
            }
            let caller = match r.access {
                Access::Public => None,
                Access::Requires(p) => {
                    let user = self.session_user(req.bearer.as_deref())?;
                    let caller = Caller {
                        user_id: user,
                        request_id: Some(request_id.to_string()),
                    };
                    self.assistant.authorize(&caller, p)?;
                    Some(caller)
                }
            };
            return self.dispatch(r, &params, req, caller);
        }
        if path_matched {
            Err(Failure::MethodNotAllowed)
        } else {
            Err(Failure::NotFound(format!("no route for {}", req.path)))
        }
    }

    fn dispatch(&self, r: &Route, params: &[&str], req: &ApiRequest, caller: Option<Caller>) -> Handled {
        let a = &*self.assistant;
        let param = |i: usize| params[i].to_string();
        if r.access == Access::Public {
            return match r.pattern {
                "/health" => Ok(ApiBody::Json(self.health())),
                "/login" => {
                    let body: LoginBody = parse_body(req)?;
                    let session = self
                        .login(&UserId::new(body.user_id), &body.credential)
                        .ok_or(Failure::Unauthenticated("invalid credentials"))?;
                    let capabilities = a.permissions_of(&session.user_id)?;
                    Ok(json_body(&json!({ "session": session, "capabilities": capabilities })))
                }
                _ => unreachable!("public route without handler"),
            };
        }
        let caller = caller.expect("authenticated route");
        let c = &caller;
        let body = match (r.method, r.pattern) {
            ("POST", "/logout") => {
                if let Some(t) = &req.bearer {
                    self.sessions.lock().unwrap().remove(t);
                }
                json!({ "logged_out": true })
            }
            ("POST", "/chat") => {
                let b: ChatBody = parse_body(req)?;
                let respond_as = b.respond_as.unwrap_or(b.input.modality);
                let conv = b.conversation_id.map(ConversationId::new);
                to_json(&a.chat(c, conv.as_ref(), &b.input, respond_as)?)
            }
            ("GET", "/conversations") => to_json(&a.list_conversations(c)?),
            ("GET", "/conversations/{id}") => to_json(&a.resume(c, &ConversationId::new(param(0)))?),
            ("GET", "/conversations/{id}/export") => {
                return Ok(ApiBody::JsonLines(
                    a.export_conversation(c, &ConversationId::new(param(0)))?,
                ));
            }
            ("POST", "/tickets") => {
                let b: CreateTicketBody = parse_body(req)?;
                let flag: Flag = b.flag.parse().map_err(Error::from)?;
                let (ticket, created) =
                    a.create_ticket(c, &ConversationId::new(b.conversation_id), b.turn_index, flag)?;
                json!({ "ticket": ticket, "created": created })
            }
            ("GET", "/tickets") => {
                let state = req
                    .query
                    .get("state")
                    .map(|s| s.parse::<TicketState>())
                    .transpose()
                    .map_err(Error::from)?;
                to_json(&a.list_tickets(c, state)?)
            }
            ("GET", "/tickets/export") => to_json(&a.export_tickets(c)?),
            ("GET", "/tickets/{id}") => to_json(&a.get_ticket(c, &TicketId::new(param(0)))?),
            ("GET", "/tickets/{id}/events") => to_json(&a.ticket_events(c, &TicketId::new(param(0)))?),
            ("POST", "/tickets/{id}/revision") => {
                let b: RevisionInput = parse_body(req)?;
                to_json(&a.revise_ticket(c, &TicketId::new(param(0)), b)?)
            }
            ("POST", "/tickets/{id}/checks") => {
                let b: ChecksBody = parse_body_or_default(req)?;
                let (ticket, jailbreak, fact) = a.run_checks(c, &TicketId::new(param(0)), b.accept_fact)?;
                json!({ "ticket": ticket, "jailbreak": jailbreak, "fact": fact })
            }
            ("POST", "/tickets/{id}/approve") => {
                let (ticket, version) = a.integrate_ticket(c, &TicketId::new(param(0)))?;
                json!({ "ticket": ticket, "document": { "doc_id": version.doc_id, "version": version.version } })
            }
            ("POST", "/tickets/{id}/reject") => {
                let b: RejectBody = parse_body_or_default(req)?;
                to_json(&a.reject_ticket(c, &TicketId::new(param(0)), &b.reason)?)
            }
            ("GET", "/analytics") => {
                let q = analytics_query(&req.query).map_err(Failure::BadRequest)?;
                to_json(&a.analytics(c, &q)?)
            }
            ("GET", "/corpus") => to_json(&a.documents(c)?),
            ("POST", "/corpus") => {
                let b: IngestBody = parse_body(req)?;
                let format = SourceFormat::from_tag(&b.format).map_err(Error::from)?;
                let doc_kind = b
                    .doc_kind
                    .as_deref()
                    .unwrap_or("other")
                    .parse::<DocKind>()
                    .map_err(Error::from)?;
                let v = a.ingest(
                    c,
                    IngestRequest {
                        bytes: b.text.into_bytes(),
                        format,
                        doc_id: b.doc_id.map(DocId::new),
                        title: b.title,
                        source_uri: b.source_uri.unwrap_or_else(|| "api".into()),
                        doc_kind,
                    },
                )?;
                json!({ "doc_id": v.doc_id, "version": v.version, "checksum": v.checksum })
            }
            ("GET", "/corpus/search") => {
                let q = req.query.get("q").cloned().unwrap_or_default();
                let k = match req.query.get("top_k") {
                    Some(k) => k
                        .parse()
                        .map_err(|_| Failure::BadRequest("top_k must be a number".into()))?,
                    None => 5,
                };
                let hits = a.search(c, &q, k)?;
                let hits: Vec<Value> = hits
                    .iter()
                    .map(|h| {
                        json!({
                            "chunk_id": h.chunk.chunk_id,
                            "doc_id": h.chunk.doc_id,
                            "version": h.chunk.version,
                            "score": h.score,
                            "text": h.chunk.text,
                        })
                    })
                    .collect();
                Value::Array(hits)
            }
            ("GET", "/corpus/{id}") => to_json(&a.document_versions(c, &DocId::new(param(0)))?),
            ("GET", "/admin/users") => to_json(&a.list_users(c)?),
            ("POST", "/admin/users") => {
                let b: NewUserBody = parse_body(req)?;
                to_json(&a.add_user(
                    c,
                    NewUser {
                        user_id: UserId::new(b.user_id),
                        display_name: b.display_name,
                        group_ids: b.groups.into_iter().map(GroupId::new).collect(),
                        credential: b.credential,
                    },
                )?)
            }
            ("POST", "/admin/users/{id}/groups") => {
                let b: GroupBody = parse_body(req)?;
                to_json(&a.assign_group(c, &UserId::new(param(0)), &GroupId::new(b.group_id))?)
            }
            ("POST", "/admin/users/{id}/active") => {
                let b: ActiveBody = parse_body(req)?;
                to_json(&a.set_active(c, &UserId::new(param(0)), b.active)?)
            }
            ("POST", "/admin/policy") => {
                let text = String::from_utf8(req.body.clone())
                    .map_err(|_| Failure::BadRequest("policy must be UTF-8 TOML".into()))?;
                json!({ "version": a.reload_policy(c, &text)? })
            }
            ("GET", "/admin/state") => to_json(&a.export_state(c)?),
            ("GET", "/audit") => {
                let range = seq_range(&req.query).map_err(Failure::BadRequest)?;
                to_json(&a.export_audit(c, range)?)
            }
            ("GET", "/audit/verify") => {
                let range = seq_range(&req.query).map_err(Failure::BadRequest)?;
                to_json(&a.verify_audit(c, range)?)
            }
            _ => unreachable!("route {} {} has no handler", r.method, r.pattern),
        };
        Ok(ApiBody::Json(body))
    }

    /// Component readiness.
    pub fn health(&self) -> Value {
        let a = &self.assistant;
        let backend = a.backend_ready();
        json!({
            "status": if backend { "ok" } else { "degraded" },
            "vector_store_loaded": true,
            "documents": a.corpus().documents().len(),
            "chunks": a.corpus().chunks().len(),
            "backend_reachable": backend,
            "audit_records": a.audit().len(),
        })
    }
}

fn to_json<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("response serializes")
}

fn json_body<T: Serialize>(v: &T) -> ApiBody {
    ApiBody::Json(to_json(v))
}

fn parse_body<T: DeserializeOwned>(req: &ApiRequest) -> Result<T, Failure> {
    serde_json::from_slice(&req.body).map_err(|e| Failure::BadRequest(format!("invalid request body: {e}")))
}

fn parse_body_or_default<T: DeserializeOwned + Default>(req: &ApiRequest) -> Result<T, Failure> {
    if req.body.iter().all(u8::is_ascii_whitespace) {
        Ok(T::default())
    } else {
        parse_body(req)
    }
}

/// Accepts RFC 3339 instants or `YYYY-MM-DD`. A bare `to` date includes
/// that whole day.
pub fn parse_bound(s: &str, is_end: bool) -> Result<Timestamp, String> {
    if let Ok(t) = chrono::DateTime::parse_from_rfc3339(s) {
        return Ok(t.to_utc());
    }
    let day = NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|_| format!("invalid date '{s}'"))?;
    let day = if is_end {
        day.succ_opt().ok_or("date out of range")?
    } else {
        day
    };
    Ok(day.and_hms_opt(0, 0, 0).expect("midnight exists").and_utc())
}

pub fn analytics_query(q: &BTreeMap<String, String>) -> Result<AnalyticsQuery, String> {
    Ok(AnalyticsQuery {
        from: q.get("from").map(|s| parse_bound(s, false)).transpose()?,
        to: q.get("to").map(|s| parse_bound(s, true)).transpose()?,
        group_by_day: q.get("group_by_day").is_some_and(|v| v == "true" || v == "1"),
    })
}

fn seq_range(q: &BTreeMap<String, String>) -> Result<Option<std::ops::RangeInclusive<u64>>, String> {
    let parse = |k: &str| {
        q.get(k)
            .map(|v| v.parse::<u64>().map_err(|_| format!("{k} must be a positive integer")))
            .transpose()
    };
    Ok(match (parse("from_seq")?, parse("to_seq")?) {
        (None, None) => None,
        (from, to) => Some(from.unwrap_or(1)..=to.unwrap_or(u64::MAX)),
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LoginBody {
    user_id: String,
    credential: String,
}

#[derive(Deserialize)]
struct ChatBody {
    #[serde(default)]
    conversation_id: Option<String>,
    #[serde(flatten)]
    input: ModalityInput,
    #[serde(default)]
    respond_as: Option<Modality>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateTicketBody {
    conversation_id: String,
    turn_index: u32,
    flag: String,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ChecksBody {
    #[serde(default)]
    accept_fact: bool,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RejectBody {
    #[serde(default)]
    reason: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct IngestBody {
    format: String,
    text: String,
    #[serde(default)]
    doc_id: Option<String>,
    #[serde(default)]
    title: Option<String>,
    #[serde(default)]
    source_uri: Option<String>,
    #[serde(default)]
    doc_kind: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NewUserBody {
    user_id: String,
    display_name: String,
    groups: Vec<String>,
    #[serde(default)]
    credential: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupBody {
    group_id: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ActiveBody {
    active: bool,
}
