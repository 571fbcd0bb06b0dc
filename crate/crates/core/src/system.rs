//! The assembled service. Both the HTTP gateway and the admin CLI drive
//! the domain exclusively through [`Assistant`], which performs every
//! authorization check and records denials in the audit log.

use std::collections::BTreeSet;
use std::fs;
use std::ops::RangeInclusive;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use serde::Serialize;
use serde_json::json;

use crate::acl::{AclError, AuthSnapshot, Caller, GroupId, Permission, Registry, RegistryFile, User, UserId};
use crate::adapter::AdapterSet;
use crate::audit::{tag_request, AuditLog, AuditRecord, EventKind, MemorySink, VerificationReport};
use crate::backend::{GenerationBackend, ScriptedBackend};
use crate::chunking::ChunkingConfig;
use crate::clock::Clock;
use crate::config::Config;
use crate::corpus::{Corpus, DocumentSummary, DocumentVersion};
use crate::dialog::{
    ConversationalAgent, DialogSettings, Modality, ModalityInput, StubSynthesizer, StubTranscriber, Synthesizer,
    Transcriber, TurnResult,
};
use crate::document::{DocKind, SourceFormat, SourceMeta};
use crate::embed::{Embedder, HashedBagEmbedder, DEFAULT_DIMENSION};
use crate::error::{Error, Result};
use crate::feedback::checks::DEFAULT_FACT_THRESHOLD;
use crate::feedback::{
    AnalyticsQuery, AnalyticsReport, CheckResult, CheckerConfig, EventRecord, FeedbackTicket, Flag, RevisionInput,
    TicketService, TicketState,
};
use crate::guardrail::{Policy, PolicyHandle};
use crate::history::{export_jsonl, Conversation, ConversationHistory, ConversationSummary};
use crate::ids::{ConversationId, DocId, TicketId};
use crate::tools::ToolRegistry;
use crate::vector_store::{ScoredChunk, VersionScope};

/// Everything needed to assemble an in-memory service.
pub struct Setup {
    pub registry: Registry,
    pub policy: Policy,
    pub backend: Arc<dyn GenerationBackend>,
    pub embedder: Arc<dyn Embedder>,
    pub chunking: ChunkingConfig,
    pub adapters: AdapterSet,
    pub transcriber: Option<Arc<dyn Transcriber>>,
    pub synthesizer: Option<Arc<dyn Synthesizer>>,
    pub clock: Arc<dyn Clock>,
    pub settings: DialogSettings,
    pub fact_threshold: f64,
}

impl Setup {
    /// Seed registry, shipped policy, echo backend, hashed embedder and
    /// stub voice.
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Self {
            registry: Registry::default_seed(),
            policy: Policy::default_policy(),
            backend: Arc::new(ScriptedBackend::echo()),
            embedder: Arc::new(HashedBagEmbedder::new(DEFAULT_DIMENSION)),
            chunking: ChunkingConfig::default(),
            adapters: AdapterSet::default(),
            transcriber: Some(Arc::new(StubTranscriber)),
            synthesizer: Some(Arc::new(StubSynthesizer)),
            clock,
            settings: DialogSettings::default(),
            fact_threshold: DEFAULT_FACT_THRESHOLD,
        }
    }
}

/// Ingest request as accepted by the gateway and the CLI.
#[derive(Debug, Clone)]
pub struct IngestRequest {
    pub bytes: Vec<u8>,
    pub format: SourceFormat,
    pub doc_id: Option<DocId>,
    pub title: Option<String>,
    pub source_uri: String,
    pub doc_kind: DocKind,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NewUser {
    pub user_id: UserId,
    pub display_name: String,
    pub group_ids: BTreeSet<GroupId>,
    #[serde(skip)]
    pub credential: Option<String>,
}

/// Every piece of durable domain state, in a deterministic order. The
/// audit log is excluded: its records carry transport-specific request ids.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateExport {
    pub registry: RegistryFile,
    pub documents: Vec<DocumentVersion>,
    pub conversations: Vec<Conversation>,
    pub tickets: Vec<FeedbackTicket>,
}

pub struct Assistant {
    registry: RwLock<Registry>,
    registry_path: Option<PathBuf>,
    audit: Arc<AuditLog>,
    corpus: Arc<Corpus>,
    history: Arc<ConversationHistory>,
    tickets: TicketService,
    policy: Arc<PolicyHandle>,
    agent: ConversationalAgent,
    backend: Arc<dyn GenerationBackend>,
    clock: Arc<dyn Clock>,
    fact_threshold: f64,
}

impl Assistant {
    pub fn in_memory(setup: Setup) -> (Self, MemorySink) {
        let (audit, sink) = AuditLog::in_memory(setup.clock.clone());
        let audit = Arc::new(audit);
        let corpus = Arc::new(Corpus::in_memory(
            setup.embedder,
            setup.chunking,
            audit.clone(),
            setup.clock.clone(),
        ));
        let history = Arc::new(ConversationHistory::in_memory());
        let policy = Arc::new(PolicyHandle::new(setup.policy));
        let tickets = TicketService::in_memory(
            history.clone(),
            corpus.clone(),
            policy.clone(),
            audit.clone(),
            setup.clock.clone(),
        );
        let agent = ConversationalAgent {
            corpus: corpus.clone(),
            history: history.clone(),
            policy: policy.clone(),
            adapters: setup.adapters,
            tools: Arc::new(ToolRegistry::standard()),
            backend: setup.backend.clone(),
            transcriber: setup.transcriber,
            synthesizer: setup.synthesizer,
            audit: audit.clone(),
            clock: setup.clock.clone(),
            settings: setup.settings,
        };
        let a = Self {
            registry: RwLock::new(setup.registry),
            registry_path: None,
            audit,
            corpus,
            history,
            tickets,
            policy,
            agent,
            backend: setup.backend,
            clock: setup.clock,
            fact_threshold: setup.fact_threshold,
        };
        (a, sink)
    }

    /// Opens (or initializes) the data directory named by `config`.
    ///
    /// Layout: `audit.jsonl`, `registry.toml`, `corpus/`, `conversations/`,
    /// `tickets/`.
    pub fn open(config: &Config) -> Result<Self> {
        config.validate()?;
        let dir = &config.data_dir;
        fs::create_dir_all(dir)?;
        let clock = config.clock()?;
        let audit = Arc::new(AuditLog::open_file(dir.join("audit.jsonl"), clock.clone())?);
        match audit.verify_chain(None)? {
            VerificationReport::Ok { .. } => {}
            VerificationReport::Broken { seq, reason } => {
                return Err(Error::Config(format!(
                    "audit log is broken at seq {seq} ({reason}); refusing to start"
                )))
            }
        }
        let registry_path = dir.join("registry.toml");
        let registry = if registry_path.exists() {
            Registry::from_toml(&fs::read_to_string(&registry_path)?)?
        } else {
            let reg = match &config.registry {
                Some(p) => Registry::from_toml(&fs::read_to_string(p)?)?,
                None => Registry::default_seed(),
            };
            write_atomic(&registry_path, reg.to_toml().as_bytes())?;
            reg
        };
        let policy = match &config.policy {
            Some(p) => Policy::from_toml(&fs::read_to_string(p)?)?,
            None => Policy::default_policy(),
        };
        let corpus = Arc::new(Corpus::open(
            dir.join("corpus"),
            config.embedder()?,
            config.chunking,
            audit.clone(),
            clock.clone(),
        )?);
        let history = Arc::new(ConversationHistory::open(dir.join("conversations"))?);
        let policy = Arc::new(PolicyHandle::new(policy));
        let tickets = TicketService::open(
            dir.join("tickets"),
            history.clone(),
            corpus.clone(),
            policy.clone(),
            audit.clone(),
            clock.clone(),
        )?;
        let backend = config.backend()?;
        let agent = ConversationalAgent {
            corpus: corpus.clone(),
            history: history.clone(),
            policy: policy.clone(),
            adapters: config.adapters()?,
            tools: Arc::new(ToolRegistry::standard()),
            backend: backend.clone(),
            transcriber: config.transcriber()?,
            synthesizer: config.synthesizer()?,
            audit: audit.clone(),
            clock: clock.clone(),
            settings: DialogSettings {
                top_k: config.top_k,
                dialog_tail: config.dialog_tail,
                iteration_cap: config.agent_iteration_cap,
            },
        };
        Ok(Self {
            registry: RwLock::new(registry),
            registry_path: Some(registry_path),
            audit,
            corpus,
            history,
            tickets,
            policy,
            agent,
            backend,
            clock,
            fact_threshold: config.fact_threshold,
        })
    }

    pub fn audit(&self) -> &Arc<AuditLog> {
        &self.audit
    }

    pub fn corpus(&self) -> &Arc<Corpus> {
        &self.corpus
    }

    pub fn history(&self) -> &Arc<ConversationHistory> {
        &self.history
    }

    pub fn tickets(&self) -> &TicketService {
        &self.tickets
    }

    pub fn policy(&self) -> &Arc<PolicyHandle> {
        &self.policy
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn registry(&self) -> Registry {
        self.registry.read().unwrap().clone()
    }

    pub fn backend_ready(&self) -> bool {
        self.backend.ready()
    }

    /// Checks `permission` for the caller. A deny is written to the audit
    /// log before the error is returned.
    pub fn authorize(&self, caller: &Caller, permission: Permission) -> Result<AuthSnapshot> {
        let reg = self.registry.read().unwrap();
        let snap = reg.snapshot(&caller.user_id, permission)?;
        if snap.decision.is_allowed() {
            return Ok(snap);
        }
        self.audit.record(
            EventKind::AuthorizationDenied,
            format!("user:{}", caller.user_id),
            caller.user_id.as_str(),
            tag_request(
                json!({ "permission": permission, "decision": snap.decision }),
                caller.request_id.as_deref(),
            ),
        )?;
        Err(AclError::Unauthorized {
            user: caller.user_id.clone(),
            permission,
        }
        .into())
    }

    pub fn permissions_of(&self, user: &UserId) -> Result<Vec<Permission>> {
        Ok(self.registry.read().unwrap().permissions_of(user)?)
    }

    pub fn verify_credential(&self, user: &UserId, credential: &str) -> bool {
        self.registry.read().unwrap().verify_credential(user, credential)
    }

    // Chat and history.

    pub fn chat(
        &self,
        caller: &Caller,
        conversation: Option<&ConversationId>,
        input: &ModalityInput,
        respond_as: Modality,
    ) -> Result<TurnResult> {
        self.authorize(caller, Permission::Chat)?;
        if let Some(id) = conversation {
            // Nobody continues another user's conversation, auditors included.
            if self.history.owner(id)? != caller.user_id {
                self.audit.record(
                    EventKind::AuthorizationDenied,
                    format!("user:{}", caller.user_id),
                    caller.user_id.as_str(),
                    tag_request(
                        json!({ "conversation_id": id, "decision": "not_owner" }),
                        caller.request_id.as_deref(),
                    ),
                )?;
                return Err(crate::history::HistoryError::NotOwner(id.clone()).into());
            }
        }
        self.agent.run_turn(conversation, input, respond_as, caller)
    }

    pub fn list_conversations(&self, caller: &Caller) -> Result<Vec<ConversationSummary>> {
        self.authorize(caller, Permission::Chat)?;
        Ok(self.history.list(&caller.user_id))
    }

    /// Owners may always resume; anyone else needs `read_audit`.
    pub fn resume(&self, caller: &Caller, id: &ConversationId) -> Result<Conversation> {
        self.authorize(caller, Permission::Chat)?;
        if self.history.owner(id)? != caller.user_id {
            self.authorize(caller, Permission::ReadAudit)?;
        }
        Ok(self.history.resume(id, &caller.user_id, true)?)
    }

    pub fn export_conversation(&self, caller: &Caller, id: &ConversationId) -> Result<String> {
        Ok(export_jsonl(&self.resume(caller, id)?))
    }

    // Corpus.

    pub fn ingest(&self, caller: &Caller, req: IngestRequest) -> Result<DocumentVersion> {
        self.authorize(caller, Permission::ManageCorpus)?;
        Ok(self.corpus.ingest_document(
            &req.bytes,
            req.format,
            SourceMeta {
                doc_id: req.doc_id,
                title: req.title,
                source_uri: req.source_uri,
                doc_kind: req.doc_kind,
            },
            caller,
        )?)
    }

    pub fn documents(&self, caller: &Caller) -> Result<Vec<DocumentSummary>> {
        self.authorize(caller, Permission::Chat)?;
        Ok(self.corpus.documents())
    }

    pub fn document_versions(&self, caller: &Caller, doc_id: &DocId) -> Result<Vec<DocumentVersion>> {
        self.authorize(caller, Permission::Chat)?;
        Ok(self.corpus.versions(doc_id)?)
    }

    pub fn search(&self, caller: &Caller, query: &str, top_k: usize) -> Result<Vec<ScoredChunk>> {
        self.authorize(caller, Permission::Chat)?;
        Ok(self.corpus.retrieve(query, top_k, VersionScope::Active)?)
    }

    // Feedback tickets.

    /// Flags one of the caller's own answers. Flagging a turn of someone
    /// else's conversation additionally requires `read_audit`.
    pub fn create_ticket(
        &self,
        caller: &Caller,
        conversation: &ConversationId,
        turn_index: u32,
        flag: Flag,
    ) -> Result<(FeedbackTicket, bool)> {
        let auth = self.authorize(caller, Permission::FlagAnswer)?;
        if self.history.owner(conversation)? != caller.user_id {
            self.authorize(caller, Permission::ReadAudit)?;
        }
        Ok(self
            .tickets
            .create_ticket(conversation, turn_index, flag, caller, auth)?)
    }

    pub fn revise_ticket(&self, caller: &Caller, id: &TicketId, input: RevisionInput) -> Result<FeedbackTicket> {
        let mut auth = vec![self.authorize(caller, Permission::RewriteTicket)?];
        if !input.attachments.is_empty() {
            auth.push(self.authorize(caller, Permission::AttachDocument)?);
        }
        Ok(self.tickets.revise_ticket(id, input, caller, auth)?)
    }

    /// Runs both checks. With `accept_fact` the caller, who must hold
    /// `approve_ticket`, overrides the lexical fact-check outcome.
    pub fn run_checks(
        &self,
        caller: &Caller,
        id: &TicketId,
        accept_fact: bool,
    ) -> Result<(FeedbackTicket, CheckResult, CheckResult)> {
        let mut auth = vec![self.authorize(caller, Permission::RewriteTicket)?];
        let mut cfg = CheckerConfig {
            fact_threshold: self.fact_threshold,
            fact_override: None,
        };
        if accept_fact {
            auth.push(self.authorize(caller, Permission::ApproveTicket)?);
            cfg.fact_override = Some(caller.user_id.clone());
        }
        Ok(self.tickets.run_checks(id, &cfg, caller, auth)?)
    }

    pub fn reject_ticket(&self, caller: &Caller, id: &TicketId, reason: &str) -> Result<FeedbackTicket> {
        let auth = self.authorize(caller, Permission::ApproveTicket)?;
        Ok(self.tickets.reject_ticket(id, reason, caller, vec![auth])?)
    }

    pub fn integrate_ticket(&self, caller: &Caller, id: &TicketId) -> Result<(FeedbackTicket, DocumentVersion)> {
        let auth = self.authorize(caller, Permission::ApproveTicket)?;
        Ok(self.tickets.integrate_ticket(id, caller, vec![auth])?)
    }

    pub fn get_ticket(&self, caller: &Caller, id: &TicketId) -> Result<FeedbackTicket> {
        self.authorize(caller, Permission::RewriteTicket)?;
        Ok(self.tickets.get(id)?)
    }

    pub fn list_tickets(&self, caller: &Caller, state: Option<TicketState>) -> Result<Vec<FeedbackTicket>> {
        self.authorize(caller, Permission::RewriteTicket)?;
        Ok(self.tickets.list(state))
    }

    pub fn ticket_events(&self, caller: &Caller, id: &TicketId) -> Result<Vec<EventRecord>> {
        self.authorize(caller, Permission::ReadAudit)?;
        Ok(self.tickets.events(id)?)
    }

    pub fn export_tickets(&self, caller: &Caller) -> Result<Vec<FeedbackTicket>> {
        self.authorize(caller, Permission::ReadAudit)?;
        Ok(self.tickets.list(None))
    }

    pub fn analytics(&self, caller: &Caller, query: &AnalyticsQuery) -> Result<AnalyticsReport> {
        self.authorize(caller, Permission::ReadTicketAnalytics)?;
        Ok(self.tickets.analytics(query))
    }

    // Users.

    fn persist_registry(&self, reg: &Registry) -> Result<()> {
        if let Some(path) = &self.registry_path {
            write_atomic(path, reg.to_toml().as_bytes())?;
        }
        Ok(())
    }

    /// Runs a registry mutation on a copy, audits it, persists it, and only
    /// then publishes the new registry.
    fn mutate_registry<T>(
        &self,
        caller: &Caller,
        kind: EventKind,
        subject: &UserId,
        f: impl FnOnce(&mut Registry) -> std::result::Result<(T, Option<serde_json::Value>), AclError>,
    ) -> Result<T> {
        self.authorize(caller, Permission::ManageUsers)?;
        let mut reg = self.registry.write().unwrap();
        let mut next = reg.clone();
        let (out, detail) = f(&mut next)?;
        if let Some(detail) = detail {
            self.audit.record(
                kind,
                format!("user:{subject}"),
                caller.user_id.as_str(),
                tag_request(detail, caller.request_id.as_deref()),
            )?;
            self.persist_registry(&next)?;
            *reg = next;
        }
        Ok(out)
    }

    pub fn add_user(&self, caller: &Caller, new: NewUser) -> Result<User> {
        let user = User {
            user_id: new.user_id.clone(),
            display_name: new.display_name,
            group_ids: new.group_ids,
            active: true,
            credential_sha256: new.credential.as_deref().map(crate::acl::credential_digest),
        };
        self.mutate_registry(caller, EventKind::UserCreated, &new.user_id, |reg| {
            let u = reg.add_user(&caller.user_id, user)?;
            let detail = json!({ "user_id": u.user_id, "group_ids": u.group_ids });
            Ok((u, Some(detail)))
        })
    }

    /// Idempotent: assigning a group the user already has records nothing.
    pub fn assign_group(&self, caller: &Caller, user: &UserId, group: &GroupId) -> Result<User> {
        self.mutate_registry(caller, EventKind::UserGroupAssigned, user, |reg| {
            let (u, changed) = reg.assign_group(&caller.user_id, user, group)?;
            Ok((u, changed.then(|| json!({ "user_id": user, "group_id": group }))))
        })
    }

    pub fn set_active(&self, caller: &Caller, user: &UserId, active: bool) -> Result<User> {
        self.mutate_registry(caller, EventKind::UserActivationChanged, user, |reg| {
            let before = reg.user(user).map(|u| u.active);
            let u = reg.set_active(&caller.user_id, user, active)?;
            let changed = before != Some(active);
            Ok((u, changed.then(|| json!({ "user_id": user, "active": active }))))
        })
    }

    pub fn list_users(&self, caller: &Caller) -> Result<Vec<User>> {
        self.authorize(caller, Permission::ManageUsers)?;
        Ok(self.registry.read().unwrap().users().cloned().collect())
    }

    // Policy.

    /// Swaps in a new guardrail policy. Requests already running keep the
    /// snapshot they started with.
    pub fn reload_policy(&self, caller: &Caller, text: &str) -> Result<String> {
        self.authorize(caller, Permission::ManageCorpus)?;
        let policy = Policy::from_toml(text)?;
        let version = policy.version.clone();
        let previous = self.policy.snapshot().version.clone();
        self.audit.record(
            EventKind::PolicyReloaded,
            "policy",
            caller.user_id.as_str(),
            tag_request(
                json!({ "previous_version": previous, "version": version }),
                caller.request_id.as_deref(),
            ),
        )?;
        self.policy.replace(policy);
        Ok(version)
    }

    // Audit.

    pub fn verify_audit(&self, caller: &Caller, range: Option<RangeInclusive<u64>>) -> Result<VerificationReport> {
        self.authorize(caller, Permission::ReadAudit)?;
        Ok(self.audit.verify_chain(range)?)
    }

    pub fn export_audit(&self, caller: &Caller, range: Option<RangeInclusive<u64>>) -> Result<Vec<AuditRecord>> {
        self.authorize(caller, Permission::ReadAudit)?;
        Ok(self.audit.export(range)?)
    }

    pub fn export_state(&self, caller: &Caller) -> Result<StateExport> {
        self.authorize(caller, Permission::ReadAudit)?;
        Ok(self.state())
    }

    /// Unchecked state snapshot for tests and tooling.
    pub fn state(&self) -> StateExport {
        StateExport {
            registry: self.registry.read().unwrap().to_file_model(),
            documents: self.corpus.all_versions(),
            conversations: self.history.all(),
            tickets: self.tickets.list(None),
        }
    }
}

fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::File::open(&tmp)?.sync_all()?;
    fs::rename(&tmp, path)
}
