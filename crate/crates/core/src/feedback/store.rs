//! Event-sourced ticket store and the ticket workflow operations.
//!
//! Each ticket has its own append-only log `<ticket_id>.jsonl` holding one
//! [`EventRecord`] per line. Opening the store replays every log through
//! [`apply`].

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::acl::{AuthSnapshot, Caller};
use crate::audit::{tag_request, AuditLog};
use crate::clock::Clock;
use crate::corpus::{Corpus, CorpusError, DocumentVersion, TicketUpdate};
use crate::guardrail::PolicyHandle;
use crate::history::ConversationHistory;
use crate::ids::{ConversationId, DocId, TicketId};

use super::analytics::{ticket_analytics, AnalyticsQuery, AnalyticsReport};
use super::checks::{fact_check, jailbreak_check, override_fact, CheckerConfig};
use super::{
    apply, Attachment, CheckResult, ContextSnapshot, EventRecord, FeedbackTicket, Flag, TicketError, TicketEvent,
    TicketState,
};

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RevisionInput {
    pub revision: String,
    #[serde(default)]
    pub attachments: Vec<Attachment>,
    /// Integrate as a new version of this document instead of a new
    /// feedback document.
    #[serde(default)]
    pub target_doc_id: Option<DocId>,
}

struct Entry {
    ticket: FeedbackTicket,
    events: Vec<EventRecord>,
}

pub struct TicketService {
    root: Option<PathBuf>,
    tickets: RwLock<BTreeMap<TicketId, Entry>>,
    create_lock: Mutex<()>,
    ticket_locks: Mutex<BTreeMap<TicketId, Arc<Mutex<()>>>>,
    history: Arc<ConversationHistory>,
    corpus: Arc<Corpus>,
    policy: Arc<PolicyHandle>,
    audit: Arc<AuditLog>,
    clock: Arc<dyn Clock>,
}

impl TicketService {
    pub fn in_memory(
        history: Arc<ConversationHistory>,
        corpus: Arc<Corpus>,
        policy: Arc<PolicyHandle>,
        audit: Arc<AuditLog>,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Self {
            root: None,
            tickets: RwLock::new(BTreeMap::new()),
            create_lock: Mutex::new(()),
            ticket_locks: Mutex::new(BTreeMap::new()),
            history,
            corpus,
            policy,
            audit,
            clock,
        }
    }

    pub fn open(
        root: impl AsRef<Path>,
        history: Arc<ConversationHistory>,
        corpus: Arc<Corpus>,
        policy: Arc<PolicyHandle>,
        audit: Arc<AuditLog>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, TicketError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        let mut svc = Self::in_memory(history, corpus, policy, audit, clock);
        let map = svc.tickets.get_mut().unwrap();
        for entry in fs::read_dir(&root)? {
            let path = entry?.path();
            if path.extension().is_none_or(|x| x != "jsonl") {
                continue;
            }
            let text = fs::read_to_string(&path)?;
            let mut cur: Option<FeedbackTicket> = None;
            let mut events = Vec::new();
            for line in text.lines() {
                let rec: EventRecord =
                    serde_json::from_str(line).map_err(|e| TicketError::Corrupt(format!("{}: {e}", path.display())))?;
                cur = Some(apply(cur.as_ref(), &rec)?);
                events.push(rec);
            }
            if let Some(ticket) = cur {
                map.insert(ticket.ticket_id.clone(), Entry { ticket, events });
            }
        }
        svc.root = Some(root);
        Ok(svc)
    }

    fn lock_for(&self, id: &TicketId) -> Arc<Mutex<()>> {
        self.ticket_locks.lock().unwrap().entry(id.clone()).or_default().clone()
    }

    /// Validates the event, writes its audit record, appends it to the
    /// ticket's log and only then makes the new state visible.
    fn commit(
        &self,
        id: &TicketId,
        caller: &Caller,
        auth: Vec<AuthSnapshot>,
        event: TicketEvent,
    ) -> Result<FeedbackTicket, TicketError> {
        let current = self.tickets.read().unwrap().get(id).map(|e| e.ticket.clone());
        let rec = EventRecord {
            ticket_id: id.clone(),
            seq: current.as_ref().map_or(1, |t| t.actor_trail.len() as u64 + 1),
            actor: caller.user_id.clone(),
            at: self.clock.now(),
            authorization: auth,
            event,
        };
        let next = apply(current.as_ref(), &rec)?;
        let detail = json!({
            "ticket_id": id,
            "event_seq": rec.seq,
            "from_state": current.as_ref().map(|t| t.state),
            "to_state": next.state,
            "event": &rec.event,
        });
        self.audit.record(
            rec.event.audit_kind(),
            format!("ticket:{id}"),
            caller.user_id.as_str(),
            tag_request(detail, caller.request_id.as_deref()),
        )?;
        if let Some(root) = &self.root {
            let mut line = serde_json::to_vec(&rec).expect("event serializes");
            line.push(b'\n');
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(root.join(format!("{id}.jsonl")))?;
            f.write_all(&line)?;
            f.sync_data()?;
        }
        let mut map = self.tickets.write().unwrap();
        let entry = map.entry(id.clone()).or_insert_with(|| Entry {
            ticket: next.clone(),
            events: Vec::new(),
        });
        entry.ticket = next.clone();
        entry.events.push(rec);
        Ok(next)
    }

    /// Opens a ticket on a dialog turn. Flagging the same turn again with
    /// the same flag by the same actor returns the existing ticket and
    /// records nothing. Returns the ticket and whether it was created.
    pub fn create_ticket(
        &self,
        conversation_id: &ConversationId,
        turn_index: u32,
        flag: Flag,
        caller: &Caller,
        auth: AuthSnapshot,
    ) -> Result<(FeedbackTicket, bool), TicketError> {
        let _g = self.create_lock.lock().unwrap();
        let turn = self.history.turn(conversation_id, turn_index)?;
        if let Some(existing) = self.tickets.read().unwrap().values().find(|e| {
            e.ticket.conversation_id == *conversation_id
                && e.ticket.turn_index == turn_index
                && e.ticket.flag == flag
                && e.ticket.flagged_by() == &caller.user_id
        }) {
            return Ok((existing.ticket.clone(), false));
        }
        let context = turn
            .provenance
            .iter()
            .filter_map(|p| {
                self.corpus.chunk(&p.chunk_id).map(|c| ContextSnapshot {
                    provenance: p.clone(),
                    text: c.text,
                })
            })
            .collect();
        let id = TicketId::new(format!("TKT-{:06}", self.tickets.read().unwrap().len() + 1));
        let t = self.commit(
            &id,
            caller,
            vec![auth],
            TicketEvent::Created {
                conversation_id: conversation_id.clone(),
                turn_index,
                flag,
                question: turn.user_text,
                answer: turn.assistant_text,
                context,
            },
        )?;
        Ok((t, true))
    }

    pub fn revise_ticket(
        &self,
        id: &TicketId,
        input: RevisionInput,
        caller: &Caller,
        auth: Vec<AuthSnapshot>,
    ) -> Result<FeedbackTicket, TicketError> {
        let lock = self.lock_for(id);
        let _g = lock.lock().unwrap();
        self.get(id)?;
        if input.revision.trim().is_empty() {
            return Err(TicketError::InvalidInput("revision text is empty".into()));
        }
        for a in &input.attachments {
            match a {
                Attachment::DocumentRef { doc_id, version } => {
                    match version {
                        Some(v) => self.corpus.version(doc_id, *v).map(|_| ()),
                        None => self.corpus.versions(doc_id).map(|_| ()),
                    }
                    .map_err(|e| TicketError::InvalidInput(e.to_string()))?;
                }
                Attachment::NewDocument { text, .. } => {
                    if text.trim().is_empty() {
                        return Err(TicketError::InvalidInput("attached document is empty".into()));
                    }
                }
            }
        }
        if let Some(target) = &input.target_doc_id {
            self.corpus
                .versions(target)
                .map_err(|e| TicketError::InvalidInput(e.to_string()))?;
        }
        self.commit(
            id,
            caller,
            auth,
            TicketEvent::Revised {
                revision: input.revision,
                attachments: input.attachments,
                target_doc_id: input.target_doc_id,
            },
        )
    }

    /// Text of every attachment, labelled for check evidence.
    fn attachment_texts(&self, t: &FeedbackTicket) -> Result<Vec<(String, String)>, TicketError> {
        let mut out = Vec::new();
        for (i, a) in t.attachments.iter().enumerate() {
            let label = format!("attachment {}", i + 1);
            let text = match a {
                Attachment::NewDocument { title, text } => format!("{title}\n{text}"),
                Attachment::DocumentRef { doc_id, version } => {
                    let v = match version {
                        Some(v) => self.corpus.version(doc_id, *v)?,
                        None => self
                            .corpus
                            .versions(doc_id)?
                            .pop()
                            .ok_or_else(|| CorpusError::UnknownDocument(doc_id.clone()))?,
                    };
                    v.content.rendered().text
                }
            };
            out.push((label, text));
        }
        Ok(out)
    }

    /// Moves an IN_REVISION ticket to PENDING_CHECKS, runs the jailbreak and
    /// fact checks, and lands it in APPROVED or REJECTED.
    pub fn run_checks(
        &self,
        id: &TicketId,
        config: &CheckerConfig,
        caller: &Caller,
        auth: Vec<AuthSnapshot>,
    ) -> Result<(FeedbackTicket, CheckResult, CheckResult), TicketError> {
        let lock = self.lock_for(id);
        let _g = lock.lock().unwrap();
        let t = self.get(id)?;
        let Some(revision) = t.revision.clone() else {
            if t.state == TicketState::Open {
                return Err(TicketError::MissingRevision(id.clone()));
            }
            return Err(TicketError::IllegalTransition {
                ticket: id.clone(),
                state: t.state,
                action: "start_checks",
            });
        };
        // Fail fast before anything is recorded.
        if t.state != TicketState::InRevision {
            return Err(TicketError::IllegalTransition {
                ticket: id.clone(),
                state: t.state,
                action: "start_checks",
            });
        }
        let attachments = self.attachment_texts(&t)?;
        self.commit(id, caller, auth.clone(), TicketEvent::ChecksStarted)?;
        let now = self.clock.now();
        let policy = self.policy.snapshot();
        let mut texts = vec![("revision".to_string(), revision.clone())];
        texts.extend(attachments.iter().cloned());
        let jb = jailbreak_check(&texts, &policy, now);
        let mut context: Vec<String> = t.original_context.iter().map(|c| c.text.clone()).collect();
        context.extend(attachments.into_iter().map(|(_, text)| text));
        let mut fact = fact_check(&revision, &context, config.fact_threshold, now);
        if let Some(reviewer) = &config.fact_override {
            fact = override_fact(fact, reviewer);
        }
        let t = self.commit(
            id,
            caller,
            auth,
            TicketEvent::ChecksCompleted {
                results: vec![jb.clone(), fact.clone()],
            },
        )?;
        Ok((t, jb, fact))
    }

    pub fn reject_ticket(
        &self,
        id: &TicketId,
        reason: &str,
        caller: &Caller,
        auth: Vec<AuthSnapshot>,
    ) -> Result<FeedbackTicket, TicketError> {
        let lock = self.lock_for(id);
        let _g = lock.lock().unwrap();
        self.get(id)?;
        self.commit(
            id,
            caller,
            auth,
            TicketEvent::Rejected {
                reason: if reason.trim().is_empty() {
                    "rejected by reviewer".into()
                } else {
                    reason.to_string()
                },
            },
        )
    }

    /// Writes an APPROVED ticket into the corpus and marks it INTEGRATED.
    pub fn integrate_ticket(
        &self,
        id: &TicketId,
        caller: &Caller,
        auth: Vec<AuthSnapshot>,
    ) -> Result<(FeedbackTicket, DocumentVersion), TicketError> {
        let lock = self.lock_for(id);
        let _g = lock.lock().unwrap();
        let t = self.get(id)?;
        if t.state != TicketState::Approved {
            return Err(TicketError::IllegalTransition {
                ticket: id.clone(),
                state: t.state,
                action: "integrate",
            });
        }
        let update = TicketUpdate {
            ticket_id: id.clone(),
            state: t.state,
            check_results: t.check_results.clone(),
            question: t.original_question.clone(),
            revision: t.revision.clone().unwrap_or_default(),
            target_doc_id: t.target_doc_id.clone(),
            new_documents: t.attachments.iter().filter_map(Attachment::new_document).collect(),
        };
        let version = self.corpus.apply_ticket_update(&update, caller)?;
        let t = self.commit(
            id,
            caller,
            auth,
            TicketEvent::Integrated {
                doc_id: version.doc_id.clone(),
                version: version.version,
            },
        )?;
        Ok((t, version))
    }

    pub fn get(&self, id: &TicketId) -> Result<FeedbackTicket, TicketError> {
        self.tickets
            .read()
            .unwrap()
            .get(id)
            .map(|e| e.ticket.clone())
            .ok_or_else(|| TicketError::UnknownTicket(id.clone()))
    }

    pub fn events(&self, id: &TicketId) -> Result<Vec<EventRecord>, TicketError> {
        self.tickets
            .read()
            .unwrap()
            .get(id)
            .map(|e| e.events.clone())
            .ok_or_else(|| TicketError::UnknownTicket(id.clone()))
    }

    pub fn list(&self, state: Option<TicketState>) -> Vec<FeedbackTicket> {
        self.tickets
            .read()
            .unwrap()
            .values()
            .filter(|e| state.is_none_or(|s| e.ticket.state == s))
            .map(|e| e.ticket.clone())
            .collect()
    }

    pub fn analytics(&self, query: &AnalyticsQuery) -> AnalyticsReport {
        let tickets = self.list(None);
        ticket_analytics(&tickets, &self.history.turn_times(), query)
    }
}
