//! Durable, append-only conversation storage.
//!
//! On-disk layout under the history directory:
//!
//! ```text
//! <conversation_id>.jsonl   line 1: header {conversation_id, owner, created_at}
//!                           lines 2..: one DialogTurn per line, in turn order
//! index.json                summary cache, rebuilt from the logs on open
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::acl::UserId;
use crate::clock::Timestamp;
use crate::dialog::Modality;
use crate::error::ErrorKind;
use crate::guardrail::GuardrailVerdict;
use crate::ids::{ChunkId, ConversationId, DocId};
use crate::tools::ToolCall;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Provenance {
    pub doc_id: DocId,
    pub version: u32,
    pub chunk_id: ChunkId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogTurn {
    pub turn_index: u32,
    pub user_text: String,
    pub assistant_text: String,
    pub provenance: Vec<Provenance>,
    pub tool_calls: Vec<ToolCall>,
    pub guard_flags: Vec<GuardrailVerdict>,
    pub created_at: Timestamp,
    pub input_modality: Modality,
    pub adapter_profile: Option<String>,
    /// The answer cites at least one context chunk.
    pub grounded: bool,
    /// A guardrail replaced the answer with a refusal.
    pub refused: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub conversation_id: ConversationId,
    pub owner: UserId,
    pub turns: Vec<DialogTurn>,
    pub created_at: Timestamp,
    pub last_active_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationSummary {
    pub conversation_id: ConversationId,
    pub owner: UserId,
    pub title: String,
    pub turns: usize,
    pub created_at: Timestamp,
    pub last_active_at: Timestamp,
}

#[derive(Debug, thiserror::Error)]
pub enum HistoryError {
    #[error("unknown conversation '{0}'")]
    UnknownConversation(ConversationId),
    #[error("unknown turn {1} in conversation '{0}'")]
    UnknownTurn(ConversationId, u32),
    #[error("turn index {got} out of order; expected {expected}")]
    OrderingViolation { expected: u32, got: u32 },
    #[error("conversation '{0}' belongs to another user")]
    NotOwner(ConversationId),
    #[error("history storage failure: {0}")]
    Storage(#[from] io::Error),
    #[error("corrupt history log {0}")]
    Corrupt(String),
}

impl HistoryError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            HistoryError::UnknownConversation(_) | HistoryError::UnknownTurn(..) => ErrorKind::NotFound,
            HistoryError::OrderingViolation { .. } => ErrorKind::IllegalState,
            HistoryError::NotOwner(_) => ErrorKind::Forbidden,
            HistoryError::Storage(_) | HistoryError::Corrupt(_) => ErrorKind::Internal,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    conversation_id: ConversationId,
    owner: UserId,
    created_at: Timestamp,
}

const TITLE_CHARS: usize = 60;

impl Conversation {
    pub fn summary(&self) -> ConversationSummary {
        let title = self
            .turns
            .first()
            .map(|t| t.user_text.chars().take(TITLE_CHARS).collect())
            .unwrap_or_default();
        ConversationSummary {
            conversation_id: self.conversation_id.clone(),
            owner: self.owner.clone(),
            title,
            turns: self.turns.len(),
            created_at: self.created_at,
            last_active_at: self.last_active_at,
        }
    }
}

pub struct ConversationHistory {
    root: Option<PathBuf>,
    conversations: RwLock<BTreeMap<ConversationId, Conversation>>,
    turn_locks: Mutex<BTreeMap<ConversationId, Arc<Mutex<()>>>>,
}

impl ConversationHistory {
    pub fn in_memory() -> Self {
        Self {
            root: None,
            conversations: RwLock::new(BTreeMap::new()),
            turn_locks: Mutex::new(BTreeMap::new()),
        }
    }

    /// Replays every conversation log in `root`.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, HistoryError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        let mut conversations = BTreeMap::new();
        for entry in fs::read_dir(&root)? {
            let path = entry?.path();
            if path.extension().is_some_and(|x| x == "jsonl") {
                let c = replay(&path)?;
                conversations.insert(c.conversation_id.clone(), c);
            }
        }
        let h = Self {
            root: Some(root),
            conversations: RwLock::new(conversations),
            turn_locks: Mutex::new(BTreeMap::new()),
        };
        h.write_index(&h.conversations.read().unwrap())?;
        Ok(h)
    }

    fn log_path(&self, id: &ConversationId) -> Option<PathBuf> {
        self.root.as_ref().map(|r| r.join(format!("{id}.jsonl")))
    }

    fn write_index(&self, convs: &BTreeMap<ConversationId, Conversation>) -> Result<(), HistoryError> {
        let Some(root) = &self.root else {
            return Ok(());
        };
        let summaries: Vec<ConversationSummary> = convs.values().map(Conversation::summary).collect();
        let tmp = root.join(".index.json.tmp");
        fs::write(
            &tmp,
            serde_json::to_vec_pretty(&summaries).expect("summaries serialize"),
        )?;
        fs::rename(tmp, root.join("index.json"))?;
        Ok(())
    }

    /// Starts a new conversation owned by `owner`.
    pub fn create(&self, owner: &UserId, now: Timestamp) -> Result<ConversationId, HistoryError> {
        let mut convs = self.conversations.write().unwrap();
        let id = ConversationId::new(format!("conv-{:06}", convs.len() + 1));
        if let Some(path) = self.log_path(&id) {
            let header = Header {
                conversation_id: id.clone(),
                owner: owner.clone(),
                created_at: now,
            };
            let mut f = OpenOptions::new().write(true).create_new(true).open(path)?;
            append_line(&mut f, &serde_json::to_vec(&header).expect("header serializes"))?;
        }
        convs.insert(
            id.clone(),
            Conversation {
                conversation_id: id.clone(),
                owner: owner.clone(),
                turns: Vec::new(),
                created_at: now,
                last_active_at: now,
            },
        );
        self.write_index(&convs)?;
        Ok(id)
    }

    /// Serializes turns within one conversation; hold the guard for the
    /// whole pipeline of a turn.
    pub fn turn_lock(&self, id: &ConversationId) -> Arc<Mutex<()>> {
        self.turn_locks.lock().unwrap().entry(id.clone()).or_default().clone()
    }

    /// Appends a turn. The turn is on disk before this returns.
    pub fn append_turn(&self, id: &ConversationId, turn: DialogTurn) -> Result<u32, HistoryError> {
        let mut convs = self.conversations.write().unwrap();
        let conv = convs
            .get_mut(id)
            .ok_or_else(|| HistoryError::UnknownConversation(id.clone()))?;
        let expected = conv.turns.len() as u32;
        if turn.turn_index != expected {
            return Err(HistoryError::OrderingViolation {
                expected,
                got: turn.turn_index,
            });
        }
        if let Some(path) = self.log_path(id) {
            let mut f = OpenOptions::new().append(true).open(path)?;
            append_line(&mut f, &serde_json::to_vec(&turn).expect("turn serializes"))?;
        }
        conv.last_active_at = conv.last_active_at.max(turn.created_at);
        conv.turns.push(turn);
        self.write_index(&convs)?;
        Ok(expected)
    }

    pub fn owner(&self, id: &ConversationId) -> Result<UserId, HistoryError> {
        self.conversations
            .read()
            .unwrap()
            .get(id)
            .map(|c| c.owner.clone())
            .ok_or_else(|| HistoryError::UnknownConversation(id.clone()))
    }

    pub fn next_turn_index(&self, id: &ConversationId) -> Result<u32, HistoryError> {
        self.conversations
            .read()
            .unwrap()
            .get(id)
            .map(|c| c.turns.len() as u32)
            .ok_or_else(|| HistoryError::UnknownConversation(id.clone()))
    }

    /// Full conversation for its owner, or for an auditor.
    pub fn resume(&self, id: &ConversationId, actor: &UserId, may_audit: bool) -> Result<Conversation, HistoryError> {
        let conv = self.get(id)?;
        if &conv.owner != actor && !may_audit {
            return Err(HistoryError::NotOwner(id.clone()));
        }
        Ok(conv)
    }

    /// Unchecked read; callers enforce ownership.
    pub fn get(&self, id: &ConversationId) -> Result<Conversation, HistoryError> {
        self.conversations
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| HistoryError::UnknownConversation(id.clone()))
    }

    pub fn turn(&self, id: &ConversationId, index: u32) -> Result<DialogTurn, HistoryError> {
        self.get(id)?
            .turns
            .get(index as usize)
            .cloned()
            .ok_or_else(|| HistoryError::UnknownTurn(id.clone(), index))
    }

    /// The actor's own conversations, most recently active first.
    pub fn list(&self, actor: &UserId) -> Vec<ConversationSummary> {
        let mut out: Vec<_> = self
            .conversations
            .read()
            .unwrap()
            .values()
            .filter(|c| &c.owner == actor)
            .map(Conversation::summary)
            .collect();
        out.sort_by(|a, b| {
            b.last_active_at
                .cmp(&a.last_active_at)
                .then_with(|| b.conversation_id.cmp(&a.conversation_id))
        });
        out
    }

    /// Creation times of every assistant turn across all conversations.
    pub fn turn_times(&self) -> Vec<Timestamp> {
        self.conversations
            .read()
            .unwrap()
            .values()
            .flat_map(|c| c.turns.iter().map(|t| t.created_at))
            .collect()
    }

    pub fn all(&self) -> Vec<Conversation> {
        self.conversations.read().unwrap().values().cloned().collect()
    }
}

/// One JSON object per turn, newline-terminated.
pub fn export_jsonl(conv: &Conversation) -> String {
    let mut out = String::new();
    for t in &conv.turns {
        out.push_str(&serde_json::to_string(t).expect("turn serializes"));
        out.push('\n');
    }
    out
}

fn append_line(f: &mut File, bytes: &[u8]) -> io::Result<()> {
    let mut line = Vec::with_capacity(bytes.len() + 1);
    line.extend_from_slice(bytes);
    line.push(b'\n');
    f.write_all(&line)?;
    f.sync_data()
}

fn replay(path: &Path) -> Result<Conversation, HistoryError> {
    let text = fs::read_to_string(path)?;
    let corrupt = |what: String| HistoryError::Corrupt(format!("{}: {what}", path.display()));
    let mut lines = text.lines();
    let header: Header = lines
        .next()
        .ok_or_else(|| corrupt("missing header".into()))
        .and_then(|l| serde_json::from_str(l).map_err(|e| corrupt(e.to_string())))?;
    let mut conv = Conversation {
        conversation_id: header.conversation_id,
        owner: header.owner,
        turns: Vec::new(),
        created_at: header.created_at,
        last_active_at: header.created_at,
    };
    for line in lines {
        let turn: DialogTurn = serde_json::from_str(line).map_err(|e| corrupt(e.to_string()))?;
        if turn.turn_index as usize != conv.turns.len() {
            return Err(corrupt(format!("turn {} out of order", turn.turn_index)));
        }
        conv.last_active_at = conv.last_active_at.max(turn.created_at);
        conv.turns.push(turn);
    }
    Ok(conv)
}
