//! Fixed-size sliding-window chunking over whitespace tokens.
//!
//! Windows hold at most `window` tokens and consecutive windows share up to
//! `overlap` tokens. A table is one indivisible unit: it is never split and
//! never used as overlap. A table larger than the window becomes a chunk of
//! its own, flagged `oversized`.

use serde::{Deserialize, Serialize};

use crate::document::CanonicalDocument;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkingConfig {
    pub window: usize,
    pub overlap: usize,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self {
            window: 512,
            overlap: 64,
        }
    }
}

impl ChunkingConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.window == 0 {
            return Err("chunk window must be positive".into());
        }
        if self.overlap >= self.window {
            return Err("chunk overlap must be smaller than the window".into());
        }
        Ok(())
    }
}

/// Location of a chunk inside its document version. Offsets are byte
/// offsets into the document's rendered text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkSpan {
    pub first_block: usize,
    pub last_block: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkDraft {
    pub index: usize,
    pub span: ChunkSpan,
    pub text: String,
    pub tokens: usize,
    pub oversized: bool,
}

pub fn chunk_document(doc: &CanonicalDocument, cfg: ChunkingConfig) -> Vec<ChunkDraft> {
    let rendered = doc.rendered();
    let units = &rendered.units;
    let n = units.len();
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = start;
        let mut total = 0;
        while end < n && total + units[end].weight <= cfg.window {
            total += units[end].weight;
            end += 1;
        }
        let oversized = end == start;
        if oversized {
            total = units[start].weight;
            end = start + 1;
        }
        let (first, last) = (&units[start], &units[end - 1]);
        out.push(ChunkDraft {
            index: out.len(),
            span: ChunkSpan {
                first_block: first.block,
                last_block: last.block,
                start: first.start,
                end: last.end,
            },
            text: rendered.text[first.start..last.end].to_string(),
            tokens: total,
            oversized,
        });
        if end == n {
            break;
        }
        let mut next = end;
        let mut shared = 0;
        while next > start + 1 && !units[next - 1].atomic && shared + units[next - 1].weight <= cfg.overlap {
            shared += units[next - 1].weight;
            next -= 1;
        }
        start = next;
    }
    out
}

/// Joins chunk texts, dropping the part of each chunk already covered by
/// its predecessor and restoring the separator text between adjacent
/// chunks from the rendered source.
pub fn reassemble(rendered_text: &str, chunks: &[ChunkDraft]) -> String {
    let mut out = String::new();
    let mut covered = 0usize;
    for c in chunks {
        if c.span.start > covered {
            out.push_str(&rendered_text[covered..c.span.start]);
            covered = c.span.start;
        }
        if c.span.end > covered {
            out.push_str(&c.text[covered - c.span.start..]);
            covered = c.span.end;
        }
    }
    out
}
