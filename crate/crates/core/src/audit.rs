//! Append-only, SHA-256 hash-chained audit trail.
//!
//! Records are stored one per line as compact JSON (JSONL). Each record's
//! `this_hash` is SHA-256 over a canonical byte encoding of
//! `(seq, event_kind, subject, actor, detail, timestamp, prev_hash)` where
//! every field is preceded by its length as a big-endian `u64`:
//!
//! | field        | bytes                                             |
//! |--------------|---------------------------------------------------|
//! | `seq`        | 8-byte big-endian integer                         |
//! | `event_kind` | UTF-8, e.g. `ticket.created`                      |
//! | `subject`    | UTF-8, e.g. `ticket:TKT-000001`                   |
//! | `actor`      | UTF-8 user id or `system`                         |
//! | `detail`     | compact JSON with object keys in sorted order     |
//! | `timestamp`  | RFC 3339, UTC, microsecond precision, `Z` suffix  |
//! | `prev_hash`  | 32 raw digest bytes (genesis: all zero)           |
//!
//! Hashes are written as lowercase hex. A line is only valid if re-encoding
//! the parsed record reproduces it byte for byte.

use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::clock::{format_timestamp, Clock};
use crate::error::ErrorKind;

pub const ZERO_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    #[serde(rename = "document.version_created")]
    DocumentVersionCreated,
    #[serde(rename = "document.version_from_ticket")]
    DocumentVersionFromTicket,
    #[serde(rename = "conversation.turn_appended")]
    TurnAppended,
    #[serde(rename = "ticket.created")]
    TicketCreated,
    #[serde(rename = "ticket.revised")]
    TicketRevised,
    #[serde(rename = "ticket.checks_started")]
    TicketChecksStarted,
    #[serde(rename = "ticket.checks_completed")]
    TicketChecksCompleted,
    #[serde(rename = "ticket.rejected")]
    TicketRejected,
    #[serde(rename = "ticket.integrated")]
    TicketIntegrated,
    #[serde(rename = "user.created")]
    UserCreated,
    #[serde(rename = "user.group_assigned")]
    UserGroupAssigned,
    #[serde(rename = "user.activation_changed")]
    UserActivationChanged,
    #[serde(rename = "authorization.denied")]
    AuthorizationDenied,
    #[serde(rename = "policy.reloaded")]
    PolicyReloaded,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::DocumentVersionCreated => "document.version_created",
            EventKind::DocumentVersionFromTicket => "document.version_from_ticket",
            EventKind::TurnAppended => "conversation.turn_appended",
            EventKind::TicketCreated => "ticket.created",
            EventKind::TicketRevised => "ticket.revised",
            EventKind::TicketChecksStarted => "ticket.checks_started",
            EventKind::TicketChecksCompleted => "ticket.checks_completed",
            EventKind::TicketRejected => "ticket.rejected",
            EventKind::TicketIntegrated => "ticket.integrated",
            EventKind::UserCreated => "user.created",
            EventKind::UserGroupAssigned => "user.group_assigned",
            EventKind::UserActivationChanged => "user.activation_changed",
            EventKind::AuthorizationDenied => "authorization.denied",
            EventKind::PolicyReloaded => "policy.reloaded",
        }
    }
}

/// Adds the originating request id (if any) to an event detail object.
pub fn tag_request(mut detail: Value, request_id: Option<&str>) -> Value {
    if let (Some(id), Value::Object(map)) = (request_id, &mut detail) {
        map.insert("request_id".into(), Value::String(id.to_string()));
    }
    detail
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditRecord {
    pub seq: u64,
    pub event_kind: EventKind,
    pub subject: String,
    pub actor: String,
    pub detail: Value,
    pub timestamp: String,
    pub prev_hash: String,
    pub this_hash: String,
}

impl AuditRecord {
    pub fn compute_hash(&self) -> Option<String> {
        let prev = decode_hash(&self.prev_hash)?;
        let mut h = Sha256::new();
        let mut field = |bytes: &[u8]| {
            h.update((bytes.len() as u64).to_be_bytes());
            h.update(bytes);
        };
        field(&self.seq.to_be_bytes());
        field(self.event_kind.as_str().as_bytes());
        field(self.subject.as_bytes());
        field(self.actor.as_bytes());
        field(serde_json::to_string(&self.detail).ok()?.as_bytes());
        field(self.timestamp.as_bytes());
        field(&prev);
        Some(hex::encode(h.finalize()))
    }
}

fn decode_hash(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 || s.bytes().any(|b| b.is_ascii_uppercase()) {
        return None;
    }
    let mut out = [0u8; 32];
    hex::decode_to_slice(s, &mut out).ok()?;
    Some(out)
}

#[derive(Debug, thiserror::Error)]
pub enum AuditError {
    #[error("audit storage failure: {0}")]
    Storage(#[from] io::Error),
    #[error("audit log is corrupt at seq {0}; refusing to append")]
    Corrupt(u64),
}

impl AuditError {
    pub fn kind(&self) -> ErrorKind {
        ErrorKind::Internal
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum VerificationReport {
    Ok { records: u64 },
    Broken { seq: u64, reason: String },
}

impl VerificationReport {
    pub fn is_ok(&self) -> bool {
        matches!(self, VerificationReport::Ok { .. })
    }
}

/// Where audit lines go. Appends must be durable when they return.
pub trait AuditSink: Send {
    fn append(&mut self, line: &[u8]) -> io::Result<()>;
    fn contents(&self) -> io::Result<Vec<u8>>;
}

pub struct FileSink {
    path: PathBuf,
    file: File,
}

impl FileSink {
    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self { path, file })
    }
}

impl AuditSink for FileSink {
    fn append(&mut self, line: &[u8]) -> io::Result<()> {
        self.file.write_all(line)?;
        self.file.sync_data()
    }

    fn contents(&self) -> io::Result<Vec<u8>> {
        std::fs::read(&self.path)
    }
}

#[derive(Default, Clone)]
pub struct MemorySink {
    bytes: Arc<Mutex<Vec<u8>>>,
    read_only: Arc<std::sync::atomic::AtomicBool>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    /// Makes subsequent appends fail, as a read-only volume would.
    pub fn set_read_only(&self, read_only: bool) {
        self.read_only.store(read_only, std::sync::atomic::Ordering::SeqCst);
    }

    pub fn bytes(&self) -> Vec<u8> {
        self.bytes.lock().unwrap().clone()
    }

    pub fn replace_bytes(&self, bytes: Vec<u8>) {
        *self.bytes.lock().unwrap() = bytes;
    }
}

impl AuditSink for MemorySink {
    fn append(&mut self, line: &[u8]) -> io::Result<()> {
        if self.read_only.load(std::sync::atomic::Ordering::SeqCst) {
            return Err(io::Error::new(
                io::ErrorKind::PermissionDenied,
                "audit storage is read-only",
            ));
        }
        self.bytes.lock().unwrap().extend_from_slice(line);
        Ok(())
    }

    fn contents(&self) -> io::Result<Vec<u8>> {
        Ok(self.bytes())
    }
}

struct Tail {
    next_seq: u64,
    last_hash: String,
    corrupt_at: Option<u64>,
}

pub struct AuditLog {
    sink: Mutex<(Box<dyn AuditSink>, Tail)>,
    clock: Arc<dyn Clock>,
}

impl AuditLog {
    pub fn new(sink: Box<dyn AuditSink>, clock: Arc<dyn Clock>) -> io::Result<Self> {
        let bytes = sink.contents()?;
        let tail = match parse_lines(&bytes, u64::MAX) {
            Ok(records) => Tail {
                next_seq: records.len() as u64 + 1,
                last_hash: records
                    .last()
                    .map(|r| r.this_hash.clone())
                    .unwrap_or_else(|| ZERO_HASH.to_string()),
                corrupt_at: None,
            },
            Err((seq, _)) => Tail {
                next_seq: seq,
                last_hash: ZERO_HASH.to_string(),
                corrupt_at: Some(seq),
            },
        };
        Ok(Self {
            sink: Mutex::new((sink, tail)),
            clock,
        })
    }

    pub fn open_file(path: impl AsRef<Path>, clock: Arc<dyn Clock>) -> io::Result<Self> {
        Self::new(Box::new(FileSink::open(path)?), clock)
    }

    pub fn in_memory(clock: Arc<dyn Clock>) -> (Self, MemorySink) {
        let sink = MemorySink::new();
        let log = Self::new(Box::new(sink.clone()), clock).expect("memory sink");
        (log, sink)
    }

    /// Appends a record. Returns only after the sink reports durability.
    pub fn record(
        &self,
        event_kind: EventKind,
        subject: impl Into<String>,
        actor: impl Into<String>,
        detail: Value,
    ) -> Result<AuditRecord, AuditError> {
        let mut guard = self.sink.lock().unwrap();
        let (sink, tail) = &mut *guard;
        if let Some(seq) = tail.corrupt_at {
            return Err(AuditError::Corrupt(seq));
        }
        let mut rec = AuditRecord {
            seq: tail.next_seq,
            event_kind,
            subject: subject.into(),
            actor: actor.into(),
            detail,
            timestamp: format_timestamp(&self.clock.now()),
            prev_hash: tail.last_hash.clone(),
            this_hash: String::new(),
        };
        rec.this_hash = rec.compute_hash().expect("own prev_hash is well formed");
        let mut line = serde_json::to_vec(&rec).expect("audit record serializes");
        line.push(b'\n');
        sink.append(&line)?;
        tail.next_seq += 1;
        tail.last_hash = rec.this_hash.clone();
        Ok(rec)
    }

    pub fn len(&self) -> u64 {
        self.sink.lock().unwrap().1.next_seq - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn raw_bytes(&self) -> io::Result<Vec<u8>> {
        self.sink.lock().unwrap().0.contents()
    }

    pub fn verify_chain(&self, range: Option<RangeInclusive<u64>>) -> io::Result<VerificationReport> {
        Ok(verify_bytes(&self.raw_bytes()?, range))
    }

    /// Records whose seq falls in `range`. Unparseable lines end the export.
    pub fn export(&self, range: Option<RangeInclusive<u64>>) -> io::Result<Vec<AuditRecord>> {
        let bytes = self.raw_bytes()?;
        let range = range.unwrap_or(1..=u64::MAX);
        let records = match parse_lines(&bytes, *range.end()) {
            Ok(r) => r,
            Err((_, partial)) => partial,
        };
        Ok(records.into_iter().filter(|r| range.contains(&r.seq)).collect())
    }
}

type ParseFailure = (u64, Vec<AuditRecord>);

/// Parses and fully validates lines `1..=upto`. On failure returns the
/// first broken seq together with the valid prefix.
fn parse_lines(bytes: &[u8], upto: u64) -> Result<Vec<AuditRecord>, ParseFailure> {
    match walk(bytes, upto) {
        Walk::Ok(records) => Ok(records),
        Walk::Broken { seq, records, .. } => Err((seq, records)),
    }
}

enum Walk {
    Ok(Vec<AuditRecord>),
    Broken {
        seq: u64,
        reason: String,
        records: Vec<AuditRecord>,
    },
}

fn walk(bytes: &[u8], upto: u64) -> Walk {
    let mut records: Vec<AuditRecord> = Vec::new();
    if bytes.is_empty() {
        return Walk::Ok(records);
    }
    let body = match bytes.strip_suffix(b"\n") {
        Some(b) => b,
        None => {
            let seq = bytes.split(|&b| b == b'\n').count() as u64;
            return Walk::Broken {
                seq,
                reason: "unterminated record".into(),
                records,
            };
        }
    };
    let mut prev_hash = ZERO_HASH.to_string();
    for (i, line) in body.split(|&b| b == b'\n').enumerate() {
        let seq = i as u64 + 1;
        if seq > upto {
            break;
        }
        let broken = |reason: String, records: Vec<AuditRecord>| Walk::Broken { seq, reason, records };
        let rec: AuditRecord = match serde_json::from_slice(line) {
            Ok(r) => r,
            Err(e) => return broken(format!("unparseable record: {e}"), records),
        };
        match serde_json::to_vec(&rec) {
            Ok(canon) if canon == line => {}
            _ => return broken("record is not in canonical form".into(), records),
        }
        if rec.seq != seq {
            return broken(format!("sequence gap: found seq {}", rec.seq), records);
        }
        if rec.prev_hash != prev_hash {
            return broken("prev_hash does not link to previous record".into(), records);
        }
        if rec.compute_hash().as_deref() != Some(rec.this_hash.as_str()) {
            return broken("this_hash mismatch".into(), records);
        }
        prev_hash = rec.this_hash.clone();
        records.push(rec);
    }
    Walk::Ok(records)
}

/// Recomputes every hash in `range` (default: whole log) and reports the
/// first inconsistency.
pub fn verify_bytes(bytes: &[u8], range: Option<RangeInclusive<u64>>) -> VerificationReport {
    let range = range.unwrap_or(1..=u64::MAX);
    match walk(bytes, *range.end()) {
        Walk::Ok(records) => VerificationReport::Ok {
            records: records.iter().filter(|r| range.contains(&r.seq)).count() as u64,
        },
        Walk::Broken { seq, reason, .. } if seq >= *range.start() => VerificationReport::Broken { seq, reason },
        // A break before the requested window also invalidates the window's
        // first link.
        Walk::Broken { reason, .. } => VerificationReport::Broken {
            seq: *range.start(),
            reason: format!("chain broken before range: {reason}"),
        },
    }
}
