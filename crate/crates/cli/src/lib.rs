//! The `cogassist` command line: offline administration against the same
//! data directory the server uses, plus `serve`.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error.

use std::fs::{self, File};
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::State;
use axum::http::{HeaderMap, HeaderValue, Method, StatusCode, Uri};
use axum::response::Response;
use axum::Router;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use cogassist_core::acl::{Caller, GroupId, UserId};
use cogassist_core::audit::VerificationReport;
use cogassist_core::clock::{format_timestamp, SystemClock};
use cogassist_core::config::Config;
use cogassist_core::dialog::{Modality, ModalityInput};
use cogassist_core::document::{DocKind, SourceFormat};
use cogassist_core::feedback::{Attachment, Flag, RevisionInput, TicketState};
use cogassist_core::gateway::{analytics_query, ApiBody, ApiRequest, Gateway};
use cogassist_core::ids::{ConversationId, DocId, TicketId};
use cogassist_core::system::{Assistant, IngestRequest, NewUser};
use cogassist_core::Error;

#[derive(Parser, Debug)]
#[command(
    name = "cogassist",
    version,
    about = "Cognitive assistant service and administration tool"
)]
struct Cli {
    /// Configuration file.
    #[arg(long, global = true, env = "COGASSIST_CONFIG")]
    config: Option<PathBuf>,
    /// Emit JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    /// User the command acts as.
    #[arg(long, global = true, default_value = "admin")]
    actor: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the HTTP gateway.
    Serve {
        #[arg(long)]
        bind: Option<String>,
    },
    /// Add a document (or a new version of one) to the corpus.
    Ingest {
        path: PathBuf,
        #[arg(long)]
        doc_id: Option<String>,
        #[arg(long)]
        title: Option<String>,
        /// Format tag; defaults to the file extension.
        #[arg(long)]
        format: Option<String>,
        #[arg(long, default_value = "other")]
        kind: String,
    },
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Run one dialog turn.
    Chat {
        message: String,
        #[arg(long)]
        conversation: Option<String>,
        /// Treat the message as the transcript of this audio reference.
        #[arg(long)]
        voice: Option<String>,
    },
    #[command(subcommand)]
    Ticket(TicketCmd),
    #[command(subcommand)]
    User(UserCmd),
    #[command(subcommand)]
    Audit(AuditCmd),
    #[command(subcommand)]
    Analytics(AnalyticsCmd),
    #[command(subcommand)]
    State(StateCmd),
}

#[derive(Subcommand, Debug)]
enum CorpusCmd {
    List,
    Show { doc_id: String },
}

#[derive(Subcommand, Debug)]
enum TicketCmd {
    List {
        #[arg(long)]
        state: Option<String>,
    },
    Show {
        id: String,
    },
    /// Flag an answer: insufficient or extend.
    Flag {
        conversation: String,
        turn: u32,
        flag: String,
    },
    Revise(ReviseArgs),
    /// Run the jailbreak and fact checks.
    Check {
        id: String,
        /// Accept the revision's grounding regardless of the fact score.
        #[arg(long)]
        accept_fact: bool,
    },
    /// Integrate an approved ticket into the corpus.
    Approve {
        id: String,
    },
    Reject {
        id: String,
        #[arg(long, default_value = "")]
        reason: String,
    },
    Export,
}

#[derive(Args, Debug)]
struct ReviseArgs {
    id: String,
    #[arg(long)]
    text: String,
    /// Reference an existing document, optionally pinned: DOC or DOC@VERSION.
    #[arg(long = "attach-doc")]
    attach_doc: Vec<String>,
    /// Attach a file as a new document.
    #[arg(long = "attach-file")]
    attach_file: Vec<PathBuf>,
    /// Integrate as a new version of this document.
    #[arg(long)]
    target: Option<String>,
}

#[derive(Subcommand, Debug)]
enum UserCmd {
    Add {
        id: String,
        #[arg(long)]
        name: String,
        #[arg(long = "group", required = true)]
        groups: Vec<String>,
        #[arg(long, env = "COGASSIST_NEW_USER_CREDENTIAL", hide_env_values = true)]
        credential: Option<String>,
    },
    Grant {
        id: String,
        group: String,
    },
    Deactivate {
        id: String,
    },
    Activate {
        id: String,
    },
    List,
}

#[derive(Subcommand, Debug)]
enum AuditCmd {
    Verify {
        #[arg(long)]
        from: Option<u64>,
        #[arg(long)]
        to: Option<u64>,
    },
    Export {
        #[arg(long)]
        from: Option<u64>,
        #[arg(long)]
        to: Option<u64>,
    },
}

#[derive(Subcommand, Debug)]
enum AnalyticsCmd {
    Report {
        #[arg(long)]
        from: Option<String>,
        #[arg(long)]
        to: Option<String>,
        #[arg(long)]
        by_day: bool,
    },
}

#[derive(Subcommand, Debug)]
enum StateCmd {
    /// Print every piece of domain state as JSON.
    Export,
}

impl Command {
    fn mutates(&self) -> bool {
        match self {
            Command::Serve { .. } | Command::Ingest { .. } | Command::Chat { .. } => true,
            Command::Ticket(t) => !matches!(t, TicketCmd::List { .. } | TicketCmd::Show { .. } | TicketCmd::Export),
            Command::User(u) => !matches!(u, UserCmd::List),
            _ => false,
        }
    }
}

enum CliError {
    Domain(Error),
    Usage(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Domain(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Domain(e.into())
    }
}

/// Output: a JSON value plus its line-oriented rendering.
struct Out {
    json: Value,
    text: Vec<String>,
}

fn out(json: Value, text: impl IntoIterator<Item = String>) -> Out {
    Out {
        json,
        text: text.into_iter().collect(),
    }
}

pub fn run<I, S>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let rendered = e.render().to_string();
            if code == 0 {
                let _ = write!(stdout, "{rendered}");
            } else {
                let _ = write!(stderr, "{rendered}");
            }
            return code;
        }
    };
    let json_mode = cli.json;
    match execute(cli) {
        Ok(o) => {
            if json_mode {
                let _ = writeln!(stdout, "{}", serde_json::to_string_pretty(&o.json).expect("json"));
            } else {
                for line in o.text {
                    let _ = writeln!(stdout, "{line}");
                }
            }
            0
        }
        Err(CliError::Usage(msg)) => {
            let _ = writeln!(stderr, "error: {msg}\n\nFor more information, try '--help'.");
            2
        }
        Err(CliError::Domain(e)) => {
            if json_mode {
                let v = json!({ "error": { "code": e.kind().code(), "message": e.to_string() } });
                let _ = writeln!(stdout, "{}", serde_json::to_string_pretty(&v).expect("json"));
            }
            let _ = writeln!(stderr, "error: {e}");
            1
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<Config, CliError> {
    Ok(match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    })
}

/// Exclusive lock on `data_dir/.write.lock`, held until dropped.
fn write_lock(cfg: &Config) -> Result<File, CliError> {
    fs::create_dir_all(&cfg.data_dir)?;
    let f = File::options()
        .create(true)
        .truncate(false)
        .write(true)
        .open(cfg.data_dir.join(".write.lock"))?;
    match f.try_lock() {
        Ok(()) => Ok(f),
        Err(fs::TryLockError::WouldBlock) => Err(CliError::Domain(Error::Conflict(format!(
            "data directory {} is locked by another writer",
            cfg.data_dir.display()
        )))),
        Err(fs::TryLockError::Error(e)) => Err(e.into()),
    }
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializes")
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T, CliError>
where
    T::Err: Into<Error>,
{
    s.parse::<T>().map_err(|e| CliError::Usage(e.into().to_string()))
}

fn execute(cli: Cli) -> Result<Out, CliError> {
    let cfg = load_config(cli.config.as_deref())?;
    let _lock = if cli.command.mutates() {
        Some(write_lock(&cfg)?)
    } else {
        None
    };
    if let Command::Serve { bind } = &cli.command {
        let bind = bind.clone().unwrap_or_else(|| cfg.bind.clone());
        let addr: SocketAddr = bind
            .parse()
            .map_err(|_| CliError::Usage(format!("invalid bind address '{bind}'")))?;
        let assistant = Arc::new(Assistant::open(&cfg)?);
        let gateway = Arc::new(Gateway::new(assistant, cfg.session_ttl_secs, Arc::new(SystemClock)));
        serve(gateway, addr)?;
        return Ok(out(json!({ "stopped": true }), ["server stopped".to_string()]));
    }
    let a = Assistant::open(&cfg)?;
    let c = Caller::user(cli.actor.clone());
    let c = &c;
    Ok(match cli.command {
        Command::Serve { .. } => unreachable!(),
        Command::Ingest {
            path,
            doc_id,
            title,
            format,
            kind,
        } => {
            let tag = match format {
                Some(f) => f,
                None => path
                    .extension()
                    .and_then(|e| e.to_str())
                    .map(str::to_string)
                    .ok_or_else(|| CliError::Usage("cannot infer format; pass --format".into()))?,
            };
            let format = SourceFormat::from_tag(&tag).map_err(|e| CliError::Usage(e.to_string()))?;
            let bytes = fs::read(&path)?;
            let v = a.ingest(
                c,
                IngestRequest {
                    bytes,
                    format,
                    doc_id: doc_id.map(DocId::new),
                    title,
                    source_uri: path.display().to_string(),
                    doc_kind: parse::<DocKind>(&kind)?,
                },
            )?;
            out(
                json!({ "doc_id": v.doc_id, "version": v.version, "checksum": v.checksum }),
                [format!("{} v{}", v.doc_id, v.version)],
            )
        }
        Command::Corpus(CorpusCmd::List) => {
            let docs = a.documents(c)?;
            let lines = docs.iter().map(|d| {
                format!(
                    "{}\tv{}\t{} version(s)\t{:?}\t{}",
                    d.doc_id, d.active_version, d.versions, d.doc_kind, d.title
                )
            });
            out(to_value(&docs), lines.collect::<Vec<_>>())
        }
        Command::Corpus(CorpusCmd::Show { doc_id }) => {
            let versions = a.document_versions(c, &DocId::new(doc_id))?;
            let lines = versions.iter().map(|v| {
                format!(
                    "v{}\t{:?}\t{}\t{}",
                    v.version,
                    v.status,
                    format_timestamp(&v.created_at),
                    &v.checksum[..12]
                )
            });
            out(to_value(&versions), lines.collect::<Vec<_>>())
        }
        Command::Chat {
            message,
            conversation,
            voice,
        } => {
            let (input, respond_as) = match voice {
                Some(audio) => (ModalityInput::voice(audio, Some(&message)), Modality::Voice),
                None => (ModalityInput::text(message), Modality::Text),
            };
            let conv = conversation.map(ConversationId::new);
            let r = a.chat(c, conv.as_ref(), &input, respond_as)?;
            let mut lines = vec![
                format!("{} turn {}", r.conversation_id, r.turn.turn_index),
                r.turn.assistant_text.clone(),
            ];
            lines.extend(
                r.turn
                    .provenance
                    .iter()
                    .map(|p| format!("  source: {} v{} {}", p.doc_id, p.version, p.chunk_id)),
            );
            out(to_value(&r), lines)
        }
        Command::Ticket(cmd) => ticket(&a, c, cmd)?,
        Command::User(cmd) => user(&a, c, cmd)?,
        Command::Audit(AuditCmd::Verify { from, to }) => {
            let report = a.verify_audit(c, range(from, to))?;
            let line = match &report {
                VerificationReport::Ok { records } => format!("ok ({records} records)"),
                VerificationReport::Broken { seq, reason } => format!("broken at seq {seq}: {reason}"),
            };
            let o = out(to_value(&report), [line]);
            if !report.is_ok() {
                return Err(CliError::Domain(Error::Conflict(o.text[0].clone())));
            }
            o
        }
        Command::Audit(AuditCmd::Export { from, to }) => {
            let records = a.export_audit(c, range(from, to))?;
            let lines = records
                .iter()
                .map(|r| serde_json::to_string(r).expect("record serializes"));
            out(to_value(&records), lines.collect::<Vec<_>>())
        }
        Command::Analytics(AnalyticsCmd::Report { from, to, by_day }) => {
            let mut q = std::collections::BTreeMap::new();
            if let Some(f) = from {
                q.insert("from".to_string(), f);
            }
            if let Some(t) = to {
                q.insert("to".to_string(), t);
            }
            if by_day {
                q.insert("group_by_day".to_string(), "true".to_string());
            }
            let query = analytics_query(&q).map_err(CliError::Usage)?;
            let r = a.analytics(c, &query)?;
            let mut lines = vec![
                format!("tickets: {}", r.tickets),
                format!("assistant turns: {}", r.assistant_turns),
                format!("rate of incomplete answers: {}", r.rate_of_incomplete_answers),
            ];
            lines.extend(r.by_flag.iter().map(|(f, n)| format!("flag {}: {n}", f.as_str())));
            lines.extend(r.by_state.iter().map(|(s, n)| format!("state {}: {n}", s.as_str())));
            out(to_value(&r), lines)
        }
        Command::State(StateCmd::Export) => {
            let s = a.export_state(c)?;
            let text = serde_json::to_string_pretty(&s).expect("state serializes");
            out(to_value(&s), [text])
        }
    })
}

fn range(from: Option<u64>, to: Option<u64>) -> Option<std::ops::RangeInclusive<u64>> {
    match (from, to) {
        (None, None) => None,
        (f, t) => Some(f.unwrap_or(1)..=t.unwrap_or(u64::MAX)),
    }
}

fn ticket_line(t: &cogassist_core::feedback::FeedbackTicket) -> String {
    format!(
        "{}\t{}\t{}\t{} turn {}",
        t.ticket_id,
        t.state.as_str(),
        t.flag.as_str(),
        t.conversation_id,
        t.turn_index
    )
}

fn ticket(a: &Assistant, c: &Caller, cmd: TicketCmd) -> Result<Out, CliError> {
    Ok(match cmd {
        TicketCmd::List { state } => {
            let state = state.as_deref().map(parse::<TicketState>).transpose()?;
            let list = a.list_tickets(c, state)?;
            out(to_value(&list), list.iter().map(ticket_line).collect::<Vec<_>>())
        }
        TicketCmd::Show { id } => {
            let t = a.get_ticket(c, &TicketId::new(id))?;
            let mut lines = vec![
                ticket_line(&t),
                format!("question: {}", t.original_question),
                format!("answer: {}", t.original_answer),
            ];
            if let Some(r) = &t.revision {
                lines.push(format!("revision: {r}"));
            }
            for r in &t.check_results {
                lines.push(format!(
                    "check {:?}: {:?} score {} ({})",
                    r.check_kind, r.outcome, r.score, r.evidence
                ));
            }
            if let Some(d) = &t.integrated_as {
                lines.push(format!("integrated as {} v{}", d.doc_id, d.version));
            }
            out(to_value(&t), lines)
        }
        TicketCmd::Flag {
            conversation,
            turn,
            flag,
        } => {
            let flag = parse::<Flag>(&flag)?;
            let (t, created) = a.create_ticket(c, &ConversationId::new(conversation), turn, flag)?;
            let line = if created {
                format!("created {}", t.ticket_id)
            } else {
                format!("existing {}", t.ticket_id)
            };
            out(json!({ "ticket": t, "created": created }), [line])
        }
        TicketCmd::Revise(args) => {
            let mut attachments = Vec::new();
            for d in &args.attach_doc {
                let (doc, version) = match d.split_once('@') {
                    Some((doc, v)) => (
                        doc,
                        Some(
                            v.parse::<u32>()
                                .map_err(|_| CliError::Usage(format!("bad version in '{d}'")))?,
                        ),
                    ),
                    None => (d.as_str(), None),
                };
                attachments.push(Attachment::DocumentRef {
                    doc_id: DocId::new(doc),
                    version,
                });
            }
            for p in &args.attach_file {
                attachments.push(Attachment::NewDocument {
                    title: p
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| "attachment".into()),
                    text: fs::read_to_string(p)?,
                });
            }
            let t = a.revise_ticket(
                c,
                &TicketId::new(args.id),
                RevisionInput {
                    revision: args.text,
                    attachments,
                    target_doc_id: args.target.map(DocId::new),
                },
            )?;
            let line = ticket_line(&t);
            out(to_value(&t), [line])
        }
        TicketCmd::Check { id, accept_fact } => {
            let (t, jb, fact) = a.run_checks(c, &TicketId::new(id), accept_fact)?;
            let lines = vec![
                ticket_line(&t),
                format!("jailbreak: {:?} score {} ({})", jb.outcome, jb.score, jb.evidence),
                format!("fact: {:?} score {} ({})", fact.outcome, fact.score, fact.evidence),
            ];
            out(json!({ "ticket": t, "jailbreak": jb, "fact": fact }), lines)
        }
        TicketCmd::Approve { id } => {
            let (t, v) = a.integrate_ticket(c, &TicketId::new(id))?;
            let line = format!("{} integrated as {} v{}", t.ticket_id, v.doc_id, v.version);
            out(
                json!({ "ticket": t, "document": { "doc_id": v.doc_id, "version": v.version } }),
                [line],
            )
        }
        TicketCmd::Reject { id, reason } => {
            let t = a.reject_ticket(c, &TicketId::new(id), &reason)?;
            let line = ticket_line(&t);
            out(to_value(&t), [line])
        }
        TicketCmd::Export => {
            let list = a.export_tickets(c)?;
            let lines = list
                .iter()
                .map(|t| serde_json::to_string(t).expect("ticket serializes"));
            out(to_value(&list), lines.collect::<Vec<_>>())
        }
    })
}

fn user(a: &Assistant, c: &Caller, cmd: UserCmd) -> Result<Out, CliError> {
    let user_line = |u: &cogassist_core::acl::User| {
        let groups: Vec<&str> = u.group_ids.iter().map(|g| g.as_str()).collect();
        format!(
            "{}\t{}\t{}\t{}",
            u.user_id,
            groups.join(","),
            if u.active { "active" } else { "inactive" },
            u.display_name
        )
    };
    Ok(match cmd {
        UserCmd::Add {
            id,
            name,
            groups,
            credential,
        } => {
            let u = a.add_user(
                c,
                NewUser {
                    user_id: UserId::new(id),
                    display_name: name,
                    group_ids: groups.into_iter().map(GroupId::new).collect(),
                    credential,
                },
            )?;
            out(to_value(&u), [user_line(&u)])
        }
        UserCmd::Grant { id, group } => {
            let u = a.assign_group(c, &UserId::new(id), &GroupId::new(group))?;
            out(to_value(&u), [user_line(&u)])
        }
        UserCmd::Deactivate { id } => {
            let u = a.set_active(c, &UserId::new(id), false)?;
            out(to_value(&u), [user_line(&u)])
        }
        UserCmd::Activate { id } => {
            let u = a.set_active(c, &UserId::new(id), true)?;
            out(to_value(&u), [user_line(&u)])
        }
        UserCmd::List => {
            let users = a.list_users(c)?;
            out(to_value(&users), users.iter().map(user_line).collect::<Vec<_>>())
        }
    })
}

/// An axum router forwarding every request to the gateway.
pub fn router(gateway: Arc<Gateway>) -> Router {
    Router::new().fallback(forward).with_state(gateway)
}

async fn forward(
    State(gateway): State<Arc<Gateway>>,
    method: Method,
    uri: Uri,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let header = |name: &str| headers.get(name).and_then(|v| v.to_str().ok()).map(str::to_string);
    let req = ApiRequest {
        method: method.as_str().to_string(),
        path: uri.path().to_string(),
        query: uri
            .query()
            .map(cogassist_core::gateway::parse_query)
            .unwrap_or_default(),
        bearer: header("authorization").and_then(|h| h.strip_prefix("Bearer ").map(str::to_string)),
        body: body.to_vec(),
        request_id: header("x-request-id"),
    };
    let resp = match tokio::task::spawn_blocking(move || gateway.handle_request(req)).await {
        Ok(r) => r,
        Err(_) => {
            return Response::builder()
                .status(StatusCode::INTERNAL_SERVER_ERROR)
                .body(Body::from(
                    r#"{"error":{"code":"internal","message":"handler panicked"}}"#,
                ))
                .expect("static response");
        }
    };
    let (content_type, bytes) = match resp.body {
        ApiBody::Json(v) => ("application/json", serde_json::to_vec(&v).expect("json")),
        ApiBody::JsonLines(s) => ("application/x-ndjson", s.into_bytes()),
    };
    let mut r = Response::new(Body::from(bytes));
    *r.status_mut() = StatusCode::from_u16(resp.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    r.headers_mut()
        .insert("content-type", HeaderValue::from_static(content_type));
    if let Ok(v) = HeaderValue::from_str(&resp.request_id) {
        r.headers_mut().insert("x-request-id", v);
    }
    r
}

fn serve(gateway: Arc<Gateway>, addr: SocketAddr) -> std::io::Result<()> {
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("listening on {}", listener.local_addr()?);
        axum::serve(listener, router(gateway))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })
}
