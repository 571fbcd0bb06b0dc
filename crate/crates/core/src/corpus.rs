//! The versioned document corpus and its retrieval pipeline.
//!
//! Every ingest or ticket integration appends a new immutable
//! [`DocumentVersion`]; the previous version is superseded and its chunks
//! leave the default retrieval scope but stay on disk.
//!
//! On-disk layout under the corpus directory:
//!
//! ```text
//! versions/<doc_id>/<version:06>.json   one canonical JSON file per version
//! index.json                             chunk_id -> (doc_id, version, span, vector)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::acl::{Caller, UserId};
use crate::audit::{tag_request, AuditError, AuditLog, EventKind};
use crate::chunking::{chunk_document, ChunkSpan, ChunkingConfig};
use crate::clock::{Clock, Timestamp};
use crate::document::{unify, Block, CanonicalDocument, DocKind, SourceFormat, SourceMeta};
use crate::embed::{EmbedError, Embedder, EmbeddingVector};
use crate::error::ErrorKind;
use crate::feedback::{CheckKind, CheckResult, TicketState};
use crate::ids::{ChunkId, DocId, TicketId};
use crate::vector_store::{Chunk, ScoredChunk, VectorStore, VersionScope};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("unsupported format '{0}'")]
    UnsupportedFormat(String),
    #[error("document has no content blocks")]
    EmptyDocument,
    #[error("invalid document: {0}")]
    InvalidDocument(String),
    #[error("unknown document '{0}'")]
    UnknownDocument(DocId),
    #[error("unknown version {1} of document '{0}'")]
    UnknownVersion(DocId, u32),
    #[error("ticket {0} is not approved")]
    TicketNotApproved(TicketId),
    #[error("ticket {0} lacks passing jailbreak and fact checks")]
    ChecksNotPassed(TicketId),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error("corpus storage failure: {0}")]
    Storage(#[from] io::Error),
    #[error("corrupt corpus store: {0}")]
    Corrupt(String),
}

impl CorpusError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            CorpusError::UnsupportedFormat(_) | CorpusError::EmptyDocument | CorpusError::InvalidDocument(_) => {
                ErrorKind::Validation
            }
            CorpusError::UnknownDocument(_) | CorpusError::UnknownVersion(..) => ErrorKind::NotFound,
            CorpusError::TicketNotApproved(_) | CorpusError::ChecksNotPassed(_) => ErrorKind::IllegalState,
            CorpusError::Embed(e) => e.kind(),
            CorpusError::Audit(e) => e.kind(),
            CorpusError::Storage(_) | CorpusError::Corrupt(_) => ErrorKind::Internal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "snake_case")]
pub enum CreatedBy {
    User(UserId),
    Ticket(TicketId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VersionStatus {
    Active,
    Superseded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentVersion {
    pub doc_id: DocId,
    pub version: u32,
    pub content: CanonicalDocument,
    pub checksum: String,
    pub created_at: Timestamp,
    pub created_by: CreatedBy,
    pub status: VersionStatus,
}

impl DocumentVersion {
    pub fn checksum_matches(&self) -> bool {
        self.content.checksum() == self.checksum
    }
}

/// What is written to `versions/<doc>/<n>.json`. Status is not stored: it
/// is derived from whether a later version exists, so files never change.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VersionFile {
    doc_id: DocId,
    version: u32,
    content: CanonicalDocument,
    checksum: String,
    created_at: Timestamp,
    created_by: CreatedBy,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    dimension: usize,
    chunks: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    chunk_id: ChunkId,
    doc_id: DocId,
    version: u32,
    span: ChunkSpan,
    oversized: bool,
    vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DocumentSummary {
    pub doc_id: DocId,
    pub title: String,
    pub doc_kind: DocKind,
    pub active_version: u32,
    pub versions: u32,
    pub checksum: String,
}

/// A document attached to a ticket as new content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewDocument {
    pub title: String,
    pub text: String,
}

/// Everything the corpus needs from an approved ticket.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TicketUpdate {
    pub ticket_id: TicketId,
    pub state: TicketState,
    pub check_results: Vec<CheckResult>,
    pub question: String,
    pub revision: String,
    pub target_doc_id: Option<DocId>,
    pub new_documents: Vec<NewDocument>,
}

impl TicketUpdate {
    /// Both check kinds present and every reported result a pass.
    pub fn checks_passed(&self) -> bool {
        [CheckKind::Jailbreak, CheckKind::Fact].iter().all(|kind| {
            let of_kind: Vec<_> = self.check_results.iter().filter(|r| r.check_kind == *kind).collect();
            !of_kind.is_empty() && of_kind.iter().all(|r| r.passed())
        })
    }
}

struct State {
    versions: BTreeMap<DocId, Vec<DocumentVersion>>,
    store: VectorStore,
}

pub struct Corpus {
    root: Option<PathBuf>,
    embedder: Arc<dyn Embedder>,
    chunking: ChunkingConfig,
    audit: Arc<AuditLog>,
    clock: Arc<dyn Clock>,
    state: RwLock<State>,
    retrievals: AtomicU64,
}

struct PreparedChunk {
    index: usize,
    span: ChunkSpan,
    text: String,
    oversized: bool,
    embedding: EmbeddingVector<f64>,
}

impl Corpus {
    pub fn in_memory(
        embedder: Arc<dyn Embedder>,
        chunking: ChunkingConfig,
        audit: Arc<AuditLog>,
        clock: Arc<dyn Clock>,
    ) -> Self {
        let dimension = embedder.dimension();
        Self {
            root: None,
            embedder,
            chunking,
            audit,
            clock,
            state: RwLock::new(State {
                versions: BTreeMap::new(),
                store: VectorStore::new(dimension),
            }),
            retrievals: AtomicU64::new(0),
        }
    }

    /// Loads (or creates) a corpus directory. Every version file is checked
    /// against its checksum; chunks missing from the index, or indexed with
    /// a different dimension, are rebuilt from the version content.
    pub fn open(
        root: impl AsRef<Path>,
        embedder: Arc<dyn Embedder>,
        chunking: ChunkingConfig,
        audit: Arc<AuditLog>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, CorpusError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join("versions"))?;
        let mut corpus = Self::in_memory(embedder, chunking, audit, clock);
        let versions = load_versions(&root)?;
        let index = load_index(&root)?;
        let dimension = corpus.embedder.dimension();
        let mut indexed: BTreeMap<(DocId, u32), Vec<IndexEntry>> = BTreeMap::new();
        if let Some(index) = index.filter(|i| i.dimension == dimension) {
            for e in index.chunks {
                indexed.entry((e.doc_id.clone(), e.version)).or_default().push(e);
            }
        }
        let mut rebuilt = false;
        {
            let state = corpus.state.get_mut().unwrap();
            for (doc_id, list) in &versions {
                for v in list {
                    let rendered = v.content.rendered();
                    let from_index = indexed.remove(&(doc_id.clone(), v.version)).and_then(|entries| {
                        entries
                            .into_iter()
                            .map(|e| {
                                let text = rendered.text.get(e.span.start..e.span.end)?.to_string();
                                Some(Chunk {
                                    chunk_id: e.chunk_id,
                                    doc_id: e.doc_id,
                                    version: e.version,
                                    span: e.span,
                                    text,
                                    oversized: e.oversized,
                                    embedding: EmbeddingVector::from_normalized(e.vector)?,
                                })
                            })
                            .collect::<Option<Vec<_>>>()
                            .filter(|c| !c.is_empty())
                    });
                    let chunks = match from_index {
                        Some(c) => c,
                        None => {
                            rebuilt = true;
                            let prepared = prepare_chunks(&*corpus.embedder, &v.content, corpus.chunking)?;
                            materialize(doc_id, v.version, prepared)
                        }
                    };
                    state
                        .store
                        .add_version(doc_id, v.version, chunks)
                        .map_err(CorpusError::Corrupt)?;
                }
            }
            state.versions = versions;
        }
        corpus.root = Some(root);
        if rebuilt {
            corpus.write_index(&corpus.state.read().unwrap().store)?;
        }
        Ok(corpus)
    }

    pub fn dimension(&self) -> usize {
        self.embedder.dimension()
    }

    pub fn chunking(&self) -> ChunkingConfig {
        self.chunking
    }

    /// Number of `retrieve` calls served so far.
    pub fn retrieval_count(&self) -> u64 {
        self.retrievals.load(Ordering::SeqCst)
    }

    /// Unifies, versions, chunks, embeds and stores a source document.
    /// The caller is responsible for the `manage_corpus` check.
    pub fn ingest_document(
        &self,
        bytes: &[u8],
        format: SourceFormat,
        meta: SourceMeta,
        caller: &Caller,
    ) -> Result<DocumentVersion, CorpusError> {
        let doc = unify(bytes, format, meta)?;
        let prepared = prepare_chunks(&*self.embedder, &doc, self.chunking)?;
        self.commit(
            doc,
            prepared,
            CreatedBy::User(caller.user_id.clone()),
            EventKind::DocumentVersionCreated,
            caller,
        )
    }

    /// Writes the corrective content of an approved ticket into the corpus,
    /// either as a new version of its target document or as a new
    /// feedback-derived document. Approval and both passing checks are
    /// re-verified here regardless of what the caller already checked.
    pub fn apply_ticket_update(&self, update: &TicketUpdate, caller: &Caller) -> Result<DocumentVersion, CorpusError> {
        if update.state != TicketState::Approved {
            return Err(CorpusError::TicketNotApproved(update.ticket_id.clone()));
        }
        if !update.checks_passed() {
            return Err(CorpusError::ChecksNotPassed(update.ticket_id.clone()));
        }
        let correction_heading = format!("Correction from feedback ticket {}", update.ticket_id);
        let doc = match &update.target_doc_id {
            Some(target) => {
                let state = self.state.read().unwrap();
                let current = state
                    .versions
                    .get(target)
                    .and_then(|v| v.last())
                    .ok_or_else(|| CorpusError::UnknownDocument(target.clone()))?;
                let mut content = current.content.clone();
                content.blocks.push(Block::heading(correction_heading));
                content.blocks.extend(feedback_blocks(update));
                content.doc_kind = DocKind::FeedbackDerived;
                content.source_uri = format!("ticket:{}", update.ticket_id);
                content
            }
            None => {
                let mut blocks = vec![Block::heading(update.question.clone())];
                blocks.extend(feedback_blocks(update));
                CanonicalDocument {
                    doc_id: DocId::new(format!("feedback-{}", update.ticket_id).to_lowercase()),
                    title: format!("Feedback {}: {}", update.ticket_id, update.question),
                    blocks,
                    source_uri: format!("ticket:{}", update.ticket_id),
                    doc_kind: DocKind::FeedbackDerived,
                }
            }
        };
        doc.validate()?;
        let prepared = prepare_chunks(&*self.embedder, &doc, self.chunking)?;
        self.commit(
            doc,
            prepared,
            CreatedBy::Ticket(update.ticket_id.clone()),
            EventKind::DocumentVersionFromTicket,
            caller,
        )
    }

    fn commit(
        &self,
        content: CanonicalDocument,
        prepared: Vec<PreparedChunk>,
        created_by: CreatedBy,
        event: EventKind,
        caller: &Caller,
    ) -> Result<DocumentVersion, CorpusError> {
        let mut state = self.state.write().unwrap();
        let doc_id = content.doc_id.clone();
        let previous = state.versions.get(&doc_id).map_or(0, |v| v.len() as u32);
        let version = previous + 1;
        let checksum = content.checksum();
        let dv = DocumentVersion {
            doc_id: doc_id.clone(),
            version,
            content,
            checksum,
            created_at: self.clock.now(),
            created_by,
            status: VersionStatus::Active,
        };
        let staged = self.stage_version(&dv)?;
        let detail = json!({
            "doc_id": doc_id,
            "version": version,
            "checksum": dv.checksum,
            "superseded": (previous > 0).then_some(previous),
            "chunks": prepared.len(),
            "created_by": dv.created_by,
        });
        self.audit.record(
            event,
            format!("doc:{doc_id}"),
            caller.user_id.as_str(),
            tag_request(detail, caller.request_id.as_deref()),
        )?;
        if let Some((tmp, dest)) = staged {
            fs::rename(tmp, dest)?;
        }
        let chunks = materialize(&doc_id, version, prepared);
        state
            .store
            .add_version(&doc_id, version, chunks)
            .map_err(CorpusError::Corrupt)?;
        let list = state.versions.entry(doc_id).or_default();
        if let Some(prev) = list.last_mut() {
            prev.status = VersionStatus::Superseded;
        }
        list.push(dv.clone());
        self.write_index(&state.store)?;
        Ok(dv)
    }

    fn stage_version(&self, dv: &DocumentVersion) -> Result<Option<(PathBuf, PathBuf)>, CorpusError> {
        let Some(root) = &self.root else {
            return Ok(None);
        };
        let dir = root.join("versions").join(dv.doc_id.as_str());
        fs::create_dir_all(&dir)?;
        let dest = dir.join(format!("{:06}.json", dv.version));
        if dest.exists() {
            return Err(CorpusError::Corrupt(format!(
                "version file {} already exists",
                dest.display()
            )));
        }
        let tmp = dir.join(format!(".{:06}.json.tmp", dv.version));
        let file = VersionFile {
            doc_id: dv.doc_id.clone(),
            version: dv.version,
            content: dv.content.clone(),
            checksum: dv.checksum.clone(),
            created_at: dv.created_at,
            created_by: dv.created_by.clone(),
        };
        fs::write(&tmp, serde_json::to_vec_pretty(&file).expect("version serializes"))?;
        Ok(Some((tmp, dest)))
    }

    fn write_index(&self, store: &VectorStore) -> Result<(), CorpusError> {
        let Some(root) = &self.root else {
            return Ok(());
        };
        let index = IndexFile {
            dimension: store.dimension(),
            chunks: store
                .chunks()
                .map(|c| IndexEntry {
                    chunk_id: c.chunk_id.clone(),
                    doc_id: c.doc_id.clone(),
                    version: c.version,
                    span: c.span,
                    oversized: c.oversized,
                    vector: c.embedding.values().to_vec(),
                })
                .collect(),
        };
        let tmp = root.join(".index.json.tmp");
        fs::write(&tmp, serde_json::to_vec(&index).expect("index serializes"))?;
        fs::rename(tmp, root.join("index.json"))?;
        Ok(())
    }

    /// Top-`top_k` chunks by cosine similarity to the query. Queries with no
    /// tokens, and empty stores, yield no results.
    pub fn retrieve(&self, query: &str, top_k: usize, scope: VersionScope) -> Result<Vec<ScoredChunk>, CorpusError> {
        self.retrievals.fetch_add(1, Ordering::SeqCst);
        let state = self.state.read().unwrap();
        if state.store.is_empty() || query.split_whitespace().next().is_none() {
            return Ok(Vec::new());
        }
        let q = self.embedder.embed(query)?;
        Ok(state.store.retrieve(&q, top_k, scope))
    }

    pub fn documents(&self) -> Vec<DocumentSummary> {
        let state = self.state.read().unwrap();
        state
            .versions
            .values()
            .filter_map(|list| list.last().map(|last| (list.len(), last)))
            .map(|(n, last)| DocumentSummary {
                doc_id: last.doc_id.clone(),
                title: last.content.title.clone(),
                doc_kind: last.content.doc_kind,
                active_version: last.version,
                versions: n as u32,
                checksum: last.checksum.clone(),
            })
            .collect()
    }

    pub fn versions(&self, doc_id: &DocId) -> Result<Vec<DocumentVersion>, CorpusError> {
        self.state
            .read()
            .unwrap()
            .versions
            .get(doc_id)
            .cloned()
            .ok_or_else(|| CorpusError::UnknownDocument(doc_id.clone()))
    }

    pub fn version(&self, doc_id: &DocId, version: u32) -> Result<DocumentVersion, CorpusError> {
        self.versions(doc_id)?
            .into_iter()
            .find(|v| v.version == version)
            .ok_or_else(|| CorpusError::UnknownVersion(doc_id.clone(), version))
    }

    pub fn all_versions(&self) -> Vec<DocumentVersion> {
        self.state
            .read()
            .unwrap()
            .versions
            .values()
            .flatten()
            .cloned()
            .collect()
    }

    /// Any stored chunk, superseded or not.
    pub fn chunk(&self, chunk_id: &ChunkId) -> Option<Chunk> {
        self.state.read().unwrap().store.get(chunk_id).cloned()
    }

    /// Snapshot of every stored chunk, in chunk-id order.
    pub fn chunks(&self) -> Vec<Chunk> {
        self.state.read().unwrap().store.chunks().cloned().collect()
    }

    pub fn active_chunks(&self) -> Vec<Chunk> {
        let state = self.state.read().unwrap();
        state
            .store
            .chunks()
            .filter(|c| state.store.active_version(&c.doc_id) == Some(c.version))
            .cloned()
            .collect()
    }
}

fn feedback_blocks(update: &TicketUpdate) -> Vec<Block> {
    let mut blocks = vec![Block::paragraph(update.revision.clone())];
    for d in &update.new_documents {
        if !d.title.trim().is_empty() {
            blocks.push(Block::heading(d.title.clone()));
        }
        blocks.extend(crate::document::parse_plain_text(&d.text));
    }
    blocks
}

fn prepare_chunks(
    embedder: &dyn Embedder,
    doc: &CanonicalDocument,
    cfg: ChunkingConfig,
) -> Result<Vec<PreparedChunk>, CorpusError> {
    chunk_document(doc, cfg)
        .into_iter()
        .map(|d| {
            Ok(PreparedChunk {
                embedding: embedder.embed(&d.text)?,
                index: d.index,
                span: d.span,
                text: d.text,
                oversized: d.oversized,
            })
        })
        .collect()
}

fn materialize(doc_id: &DocId, version: u32, prepared: Vec<PreparedChunk>) -> Vec<Chunk> {
    prepared
        .into_iter()
        .map(|p| Chunk {
            chunk_id: ChunkId::for_chunk(doc_id, version, p.index),
            doc_id: doc_id.clone(),
            version,
            span: p.span,
            text: p.text,
            oversized: p.oversized,
            embedding: p.embedding,
        })
        .collect()
}

fn load_versions(root: &Path) -> Result<BTreeMap<DocId, Vec<DocumentVersion>>, CorpusError> {
    let mut out: BTreeMap<DocId, Vec<DocumentVersion>> = BTreeMap::new();
    for dir in fs::read_dir(root.join("versions"))? {
        let dir = dir?;
        if !dir.file_type()?.is_dir() {
            continue;
        }
        let mut files: Vec<PathBuf> = fs::read_dir(dir.path())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .filter(|p| !p.file_name().unwrap().to_string_lossy().starts_with('.'))
            .collect();
        files.sort();
        let mut list = Vec::new();
        for path in files {
            let file: VersionFile = serde_json::from_slice(&fs::read(&path)?)
                .map_err(|e| CorpusError::Corrupt(format!("{}: {e}", path.display())))?;
            let dv = DocumentVersion {
                doc_id: file.doc_id,
                version: file.version,
                content: file.content,
                checksum: file.checksum,
                created_at: file.created_at,
                created_by: file.created_by,
                status: VersionStatus::Superseded,
            };
            if !dv.checksum_matches() {
                return Err(CorpusError::Corrupt(format!("checksum mismatch in {}", path.display())));
            }
            list.push(dv);
        }
        for (i, v) in list.iter().enumerate() {
            if v.version != i as u32 + 1 {
                return Err(CorpusError::Corrupt(format!(
                    "version gap in document '{}' at {}",
                    v.doc_id,
                    i + 1
                )));
            }
        }
        if let Some(last) = list.last_mut() {
            last.status = VersionStatus::Active;
            out.insert(last.doc_id.clone(), list);
        }
    }
    Ok(out)
}

fn load_index(root: &Path) -> Result<Option<IndexFile>, CorpusError> {
    match fs::read(root.join("index.json")) {
        Ok(bytes) => Ok(serde_json::from_slice(&bytes).ok()),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}
