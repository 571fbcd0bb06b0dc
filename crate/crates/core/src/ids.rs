use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }
    };
}

string_id!(
    /// Stable across versions of one document.
    DocId
);
string_id!(ChunkId);
string_id!(TicketId);
string_id!(ConversationId);

impl DocId {
    /// Document ids double as directory names, so they are restricted to
    /// `[A-Za-z0-9._-]`, must not start with a dot and are at most 128 bytes.
    pub fn is_valid(&self) -> bool {
        !self.0.is_empty()
            && self.0.len() <= 128
            && !self.0.starts_with('.')
            && self
                .0
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'))
    }

    /// Lowercase slug of arbitrary text, suitable as a document id.
    pub fn slugify(text: &str) -> Self {
        let mut out = String::new();
        for c in text.chars().flat_map(char::to_lowercase) {
            if c.is_ascii_alphanumeric() {
                out.push(c);
            } else if !out.ends_with('-') && !out.is_empty() {
                out.push('-');
            }
        }
        let trimmed = out.trim_end_matches('-');
        let mut id: String = trimmed.chars().take(96).collect();
        if id.is_empty() {
            id.push_str("document");
        }
        DocId(id)
    }
}

impl ChunkId {
    pub fn for_chunk(doc_id: &DocId, version: u32, index: usize) -> Self {
        ChunkId(format!("{doc_id}@v{version:06}#{index:05}"))
    }
}
