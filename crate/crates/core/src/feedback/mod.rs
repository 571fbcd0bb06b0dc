//! Feedback tickets: flagged answers carried through revision and security
//! checks into the knowledge base.
//!
//! A ticket is the fold of its event records. [`apply`] is the only place
//! that decides whether an event is legal; the store persists nothing that
//! `apply` rejects.

pub mod analytics;
pub mod checks;
mod store;

use std::fmt;
use std::io;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::acl::{AuthSnapshot, UserId};
use crate::audit::{AuditError, EventKind};
use crate::clock::Timestamp;
use crate::corpus::{CorpusError, NewDocument};
use crate::error::ErrorKind;
use crate::history::{HistoryError, Provenance};
use crate::ids::{ConversationId, DocId, TicketId};

pub use analytics::{AnalyticsQuery, AnalyticsReport, DayBucket};
pub use checks::{content_words, fact_check, jailbreak_check, CheckerConfig, STOP_WORDS};
pub use store::{RevisionInput, TicketService};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    /// The answer was incorrect.
    Insufficient,
    /// The answer was partially complete.
    Extend,
}

impl Flag {
    pub const ALL: [Flag; 2] = [Flag::Insufficient, Flag::Extend];

    pub fn as_str(self) -> &'static str {
        match self {
            Flag::Insufficient => "insufficient",
            Flag::Extend => "extend",
        }
    }
}

impl FromStr for Flag {
    type Err = TicketError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Flag::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| TicketError::InvalidInput(format!("unknown flag '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TicketState {
    Open,
    InRevision,
    PendingChecks,
    Approved,
    Integrated,
    Rejected,
}

impl TicketState {
    pub const ALL: [TicketState; 6] = [
        TicketState::Open,
        TicketState::InRevision,
        TicketState::PendingChecks,
        TicketState::Approved,
        TicketState::Integrated,
        TicketState::Rejected,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TicketState::Open => "OPEN",
            TicketState::InRevision => "IN_REVISION",
            TicketState::PendingChecks => "PENDING_CHECKS",
            TicketState::Approved => "APPROVED",
            TicketState::Integrated => "INTEGRATED",
            TicketState::Rejected => "REJECTED",
        }
    }

    /// The legal transition relation. Revising an IN_REVISION ticket again
    /// is the one self-loop.
    pub fn can_transition_to(self, next: TicketState) -> bool {
        use TicketState::*;
        matches!(
            (self, next),
            (Open, InRevision)
                | (InRevision, InRevision)
                | (InRevision, PendingChecks)
                | (PendingChecks, Approved)
                | (Approved, Integrated)
                | (Open | InRevision | PendingChecks | Approved, Rejected)
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, TicketState::Integrated | TicketState::Rejected)
    }
}

impl fmt::Display for TicketState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TicketState {
    type Err = TicketError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let upper = s.to_ascii_uppercase();
        TicketState::ALL
            .into_iter()
            .find(|t| t.as_str() == upper)
            .ok_or_else(|| TicketError::InvalidInput(format!("unknown ticket state '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Jailbreak,
    Fact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckOutcome {
    Pass,
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckedBy {
    Rules,
    Llm,
    Human,
    Combined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckResult {
    pub check_kind: CheckKind,
    pub outcome: CheckOutcome,
    pub score: f64,
    pub evidence: String,
    pub checked_by: CheckedBy,
    pub timestamp: Timestamp,
    pub overridden_by: Option<UserId>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.outcome == CheckOutcome::Pass
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Attachment {
    /// An existing corpus document; `version` defaults to the active one.
    DocumentRef {
        doc_id: DocId,
        version: Option<u32>,
    },
    NewDocument {
        title: String,
        text: String,
    },
}

impl Attachment {
    pub fn new_document(&self) -> Option<NewDocument> {
        match self {
            Attachment::NewDocument { title, text } => Some(NewDocument {
                title: title.clone(),
                text: text.clone(),
            }),
            Attachment::DocumentRef { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSnapshot {
    pub provenance: Provenance,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrailEntry {
    pub actor: UserId,
    pub action: String,
    pub timestamp: Timestamp,
    pub authorization: Vec<AuthSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentRef {
    pub doc_id: DocId,
    pub version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackTicket {
    pub ticket_id: TicketId,
    pub conversation_id: ConversationId,
    pub turn_index: u32,
    pub flag: Flag,
    pub original_question: String,
    pub original_answer: String,
    pub original_context: Vec<ContextSnapshot>,
    pub revision: Option<String>,
    pub attachments: Vec<Attachment>,
    pub target_doc_id: Option<DocId>,
    pub state: TicketState,
    pub check_results: Vec<CheckResult>,
    pub actor_trail: Vec<TrailEntry>,
    pub created_at: Timestamp,
    pub integrated_as: Option<DocumentRef>,
    pub rejection_reason: Option<String>,
}

impl FeedbackTicket {
    pub fn flagged_by(&self) -> &UserId {
        &self.actor_trail[0].actor
    }

    /// Latest result of each kind, if both exist and both passed.
    pub fn checks_passed(&self) -> bool {
        [CheckKind::Jailbreak, CheckKind::Fact].iter().all(|k| {
            self.check_results
                .iter()
                .rev()
                .find(|r| r.check_kind == *k)
                .is_some_and(CheckResult::passed)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TicketEvent {
    Created {
        conversation_id: ConversationId,
        turn_index: u32,
        flag: Flag,
        question: String,
        answer: String,
        context: Vec<ContextSnapshot>,
    },
    Revised {
        revision: String,
        attachments: Vec<Attachment>,
        target_doc_id: Option<DocId>,
    },
    ChecksStarted,
    ChecksCompleted {
        results: Vec<CheckResult>,
    },
    Rejected {
        reason: String,
    },
    Integrated {
        doc_id: DocId,
        version: u32,
    },
}

impl TicketEvent {
    pub fn audit_kind(&self) -> EventKind {
        match self {
            TicketEvent::Created { .. } => EventKind::TicketCreated,
            TicketEvent::Revised { .. } => EventKind::TicketRevised,
            TicketEvent::ChecksStarted => EventKind::TicketChecksStarted,
            TicketEvent::ChecksCompleted { .. } => EventKind::TicketChecksCompleted,
            TicketEvent::Rejected { .. } => EventKind::TicketRejected,
            TicketEvent::Integrated { .. } => EventKind::TicketIntegrated,
        }
    }

    pub fn action(&self) -> &'static str {
        match self {
            TicketEvent::Created { .. } => "create",
            TicketEvent::Revised { .. } => "revise",
            TicketEvent::ChecksStarted => "start_checks",
            TicketEvent::ChecksCompleted { .. } => "complete_checks",
            TicketEvent::Rejected { .. } => "reject",
            TicketEvent::Integrated { .. } => "integrate",
        }
    }
}

/// One persisted line of a ticket's event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventRecord {
    pub ticket_id: TicketId,
    pub seq: u64,
    pub actor: UserId,
    pub at: Timestamp,
    pub authorization: Vec<AuthSnapshot>,
    pub event: TicketEvent,
}

#[derive(Debug, thiserror::Error)]
pub enum TicketError {
    #[error("unknown ticket '{0}'")]
    UnknownTicket(TicketId),
    #[error("ticket {ticket} is {state}; cannot {action}")]
    IllegalTransition {
        ticket: TicketId,
        state: TicketState,
        action: &'static str,
    },
    #[error("ticket {0} has no revision")]
    MissingRevision(TicketId),
    #[error("invalid ticket input: {0}")]
    InvalidInput(String),
    #[error("check run must report exactly one result per check kind")]
    MalformedChecks,
    #[error("event sequence {got} out of order; expected {expected}")]
    OutOfOrder { expected: u64, got: u64 },
    #[error(transparent)]
    History(#[from] HistoryError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error("ticket storage failure: {0}")]
    Storage(#[from] io::Error),
    #[error("corrupt ticket store: {0}")]
    Corrupt(String),
}

impl TicketError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            TicketError::UnknownTicket(_) => ErrorKind::NotFound,
            TicketError::IllegalTransition { .. } | TicketError::MissingRevision(_) => ErrorKind::IllegalState,
            TicketError::InvalidInput(_) => ErrorKind::Validation,
            TicketError::History(e) => e.kind(),
            TicketError::Corpus(e) => e.kind(),
            TicketError::Audit(e) => e.kind(),
            TicketError::MalformedChecks
            | TicketError::OutOfOrder { .. }
            | TicketError::Storage(_)
            | TicketError::Corrupt(_) => ErrorKind::Internal,
        }
    }
}

fn illegal(t: &FeedbackTicket, action: &'static str) -> TicketError {
    TicketError::IllegalTransition {
        ticket: t.ticket_id.clone(),
        state: t.state,
        action,
    }
}

/// Folds one event into the ticket's state, rejecting anything the state
/// machine does not allow.
pub fn apply(current: Option<&FeedbackTicket>, rec: &EventRecord) -> Result<FeedbackTicket, TicketError> {
    let trail = TrailEntry {
        actor: rec.actor.clone(),
        action: rec.event.action().to_string(),
        timestamp: rec.at,
        authorization: rec.authorization.clone(),
    };
    let expected = current.map_or(1, |t| t.actor_trail.len() as u64 + 1);
    if rec.seq != expected {
        return Err(TicketError::OutOfOrder { expected, got: rec.seq });
    }
    let Some(cur) = current else {
        let TicketEvent::Created {
            conversation_id,
            turn_index,
            flag,
            question,
            answer,
            context,
        } = &rec.event
        else {
            return Err(TicketError::UnknownTicket(rec.ticket_id.clone()));
        };
        return Ok(FeedbackTicket {
            ticket_id: rec.ticket_id.clone(),
            conversation_id: conversation_id.clone(),
            turn_index: *turn_index,
            flag: *flag,
            original_question: question.clone(),
            original_answer: answer.clone(),
            original_context: context.clone(),
            revision: None,
            attachments: Vec::new(),
            target_doc_id: None,
            state: TicketState::Open,
            check_results: Vec::new(),
            actor_trail: vec![trail],
            created_at: rec.at,
            integrated_as: None,
            rejection_reason: None,
        });
    };
    let mut t = cur.clone();
    let action = rec.event.action();
    let next = match &rec.event {
        TicketEvent::Created { .. } => return Err(illegal(cur, action)),
        TicketEvent::Revised {
            revision,
            attachments,
            target_doc_id,
        } => {
            if revision.trim().is_empty() {
                return Err(TicketError::InvalidInput("revision text is empty".into()));
            }
            t.revision = Some(revision.clone());
            t.attachments = attachments.clone();
            t.target_doc_id = target_doc_id.clone();
            TicketState::InRevision
        }
        TicketEvent::ChecksStarted => {
            if cur.state == TicketState::InRevision && cur.revision.is_none() {
                return Err(TicketError::MissingRevision(cur.ticket_id.clone()));
            }
            TicketState::PendingChecks
        }
        TicketEvent::ChecksCompleted { results } => {
            if cur.state != TicketState::PendingChecks {
                return Err(illegal(cur, action));
            }
            let one_each = [CheckKind::Jailbreak, CheckKind::Fact]
                .iter()
                .all(|k| results.iter().filter(|r| r.check_kind == *k).count() == 1);
            if !one_each || results.len() != 2 {
                return Err(TicketError::MalformedChecks);
            }
            t.check_results.extend(results.iter().cloned());
            if results.iter().all(CheckResult::passed) {
                TicketState::Approved
            } else {
                t.rejection_reason = Some("security checks failed".into());
                TicketState::Rejected
            }
        }
        TicketEvent::Rejected { reason } => {
            t.rejection_reason = Some(reason.clone());
            TicketState::Rejected
        }
        TicketEvent::Integrated { doc_id, version } => {
            if !cur.checks_passed() {
                return Err(illegal(cur, action));
            }
            t.integrated_as = Some(DocumentRef {
                doc_id: doc_id.clone(),
                version: *version,
            });
            TicketState::Integrated
        }
    };
    if !cur.state.can_transition_to(next) {
        return Err(illegal(cur, action));
    }
    t.state = next;
    t.actor_trail.push(trail);
    Ok(t)
}
