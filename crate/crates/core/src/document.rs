//! Canonical block-structured document format and the loaders that unify
//! plain text, markdown and pre-canonicalized JSON into it.

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::CorpusError;
use crate::ids::DocId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocKind {
    WorkInstruction,
    BestPractice,
    MachineManual,
    FeedbackDerived,
    Other,
}

impl FromStr for DocKind {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "work_instruction" => DocKind::WorkInstruction,
            "best_practice" => DocKind::BestPractice,
            "machine_manual" => DocKind::MachineManual,
            "feedback_derived" => DocKind::FeedbackDerived,
            "other" => DocKind::Other,
            _ => return Err(CorpusError::InvalidDocument(format!("unknown doc kind '{s}'"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Heading,
    Paragraph,
    Table,
    ListItem,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Block {
    pub block_kind: BlockKind,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table_cells: Option<Vec<Vec<String>>>,
}

impl Block {
    pub fn heading(text: impl Into<String>) -> Self {
        Self::text_block(BlockKind::Heading, text)
    }

    pub fn paragraph(text: impl Into<String>) -> Self {
        Self::text_block(BlockKind::Paragraph, text)
    }

    pub fn list_item(text: impl Into<String>) -> Self {
        Self::text_block(BlockKind::ListItem, text)
    }

    fn text_block(kind: BlockKind, text: impl Into<String>) -> Self {
        Self {
            block_kind: kind,
            text: text.into(),
            table_cells: None,
        }
    }

    /// Table block; short rows are padded with empty cells to the widest row.
    pub fn table(mut rows: Vec<Vec<String>>) -> Self {
        let width = rows.iter().map(Vec::len).max().unwrap_or(0);
        for row in &mut rows {
            row.resize(width, String::new());
        }
        let text = render_table(&rows);
        Self {
            block_kind: BlockKind::Table,
            text,
            table_cells: Some(rows),
        }
    }

    fn validate(&self, index: usize) -> Result<(), CorpusError> {
        let bad = |msg: &str| Err(CorpusError::InvalidDocument(format!("block {index}: {msg}")));
        match (&self.block_kind, &self.table_cells) {
            (BlockKind::Table, None) => return bad("table block without cells"),
            (BlockKind::Table, Some(rows)) => {
                if rows.is_empty() || rows[0].is_empty() {
                    return bad("empty table");
                }
                if rows.iter().any(|r| r.len() != rows[0].len()) {
                    return bad("table rows differ in width");
                }
            }
            (_, Some(_)) => return bad("cells on a non-table block"),
            (_, None) => {
                if self.text.split_whitespace().next().is_none() {
                    return bad("empty text");
                }
            }
        }
        Ok(())
    }
}

/// Rows one per line, cells separated by ` | `.
pub fn render_table(rows: &[Vec<String>]) -> String {
    rows.iter()
        .map(|row| {
            row.iter()
                .map(|c| c.split_whitespace().collect::<Vec<_>>().join(" "))
                .collect::<Vec<_>>()
                .join(" | ")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CanonicalDocument {
    pub doc_id: DocId,
    pub title: String,
    pub blocks: Vec<Block>,
    pub source_uri: String,
    pub doc_kind: DocKind,
}

impl CanonicalDocument {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if !self.doc_id.is_valid() {
            return Err(CorpusError::InvalidDocument(format!(
                "invalid doc id '{}'",
                self.doc_id
            )));
        }
        if self.blocks.is_empty() {
            return Err(CorpusError::EmptyDocument);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.validate(i)?;
        }
        Ok(())
    }

    /// Canonical serialization: compact JSON with struct fields in
    /// declaration order.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("document serializes")
    }

    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_bytes()))
    }

    /// The flat text view chunks are cut from: text blocks as single-spaced
    /// tokens, tables row-per-line, blocks separated by newlines.
    pub fn rendered(&self) -> Rendered {
        let mut text = String::new();
        let mut units = Vec::new();
        for (bi, block) in self.blocks.iter().enumerate() {
            if bi > 0 {
                text.push('\n');
            }
            match &block.table_cells {
                Some(rows) => {
                    let start = text.len();
                    text.push_str(&render_table(rows));
                    let weight = rows
                        .iter()
                        .flatten()
                        .map(|c| c.split_whitespace().count())
                        .sum::<usize>()
                        .max(1);
                    units.push(Unit {
                        block: bi,
                        start,
                        end: text.len(),
                        weight,
                        atomic: true,
                    });
                }
                None => {
                    for (ti, tok) in block.text.split_whitespace().enumerate() {
                        if ti > 0 {
                            text.push(' ');
                        }
                        let start = text.len();
                        text.push_str(tok);
                        units.push(Unit {
                            block: bi,
                            start,
                            end: text.len(),
                            weight: 1,
                            atomic: false,
                        });
                    }
                }
            }
        }
        Rendered { text, units }
    }
}

/// A windowing unit: one whitespace token, or one whole table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Unit {
    pub block: usize,
    pub start: usize,
    pub end: usize,
    pub weight: usize,
    pub atomic: bool,
}

#[derive(Debug, Clone)]
pub struct Rendered {
    pub text: String,
    pub units: Vec<Unit>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceFormat {
    PlainText,
    Markdown,
    CanonicalJson,
}

impl SourceFormat {
    /// Accepts a format tag or a file extension.
    pub fn from_tag(tag: &str) -> Result<Self, CorpusError> {
        match tag.trim_start_matches('.').to_ascii_lowercase().as_str() {
            "txt" | "text" | "plain_text" => Ok(SourceFormat::PlainText),
            "md" | "markdown" => Ok(SourceFormat::Markdown),
            "json" | "canonical_json" => Ok(SourceFormat::CanonicalJson),
            other => Err(CorpusError::UnsupportedFormat(other.to_string())),
        }
    }
}

/// Metadata supplied alongside raw bytes at ingest time.
#[derive(Debug, Clone)]
pub struct SourceMeta {
    pub doc_id: Option<DocId>,
    pub title: Option<String>,
    pub source_uri: String,
    pub doc_kind: DocKind,
}

pub fn unify(bytes: &[u8], format: SourceFormat, meta: SourceMeta) -> Result<CanonicalDocument, CorpusError> {
    if format == SourceFormat::CanonicalJson {
        let mut doc: CanonicalDocument =
            serde_json::from_slice(bytes).map_err(|e| CorpusError::InvalidDocument(e.to_string()))?;
        if let Some(id) = meta.doc_id {
            doc.doc_id = id;
        }
        if doc.doc_kind == DocKind::FeedbackDerived {
            return Err(CorpusError::InvalidDocument(
                "feedback_derived documents only come from integrated tickets".into(),
            ));
        }
        doc.validate()?;
        return Ok(doc);
    }
    let text =
        std::str::from_utf8(bytes).map_err(|_| CorpusError::InvalidDocument("source is not valid UTF-8".into()))?;
    let blocks = match format {
        SourceFormat::PlainText => parse_plain_text(text),
        SourceFormat::Markdown => parse_markdown(text),
        SourceFormat::CanonicalJson => unreachable!(),
    };
    if blocks.is_empty() {
        return Err(CorpusError::EmptyDocument);
    }
    if meta.doc_kind == DocKind::FeedbackDerived {
        return Err(CorpusError::InvalidDocument(
            "feedback_derived documents only come from integrated tickets".into(),
        ));
    }
    let title = meta
        .title
        .or_else(|| {
            blocks
                .iter()
                .find(|b| b.block_kind == BlockKind::Heading)
                .map(|b| b.text.clone())
        })
        .or_else(|| meta.doc_id.as_ref().map(|d| d.0.clone()))
        .unwrap_or_else(|| "untitled".into());
    let doc = CanonicalDocument {
        doc_id: meta.doc_id.unwrap_or_else(|| DocId::slugify(&title)),
        title,
        blocks,
        source_uri: meta.source_uri,
        doc_kind: meta.doc_kind,
    };
    doc.validate()?;
    Ok(doc)
}

/// Paragraphs are runs of non-blank lines; lines within one are joined by
/// single spaces.
pub fn parse_plain_text(text: &str) -> Vec<Block> {
    let mut blocks = Vec::new();
    let mut para: Vec<&str> = Vec::new();
    let flush = |para: &mut Vec<&str>, blocks: &mut Vec<Block>| {
        if !para.is_empty() {
            blocks.push(Block::paragraph(para.join(" ")));
            para.clear();
        }
    };
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            flush(&mut para, &mut blocks);
        } else {
            para.push(line);
        }
    }
    flush(&mut para, &mut blocks);
    blocks
}

/// Headings (`#`..`######`), list items (`-`, `*`, `+`, `1.`), pipe tables
/// and paragraphs. Table delimiter rows (`|---|:--:|`) are dropped; the
/// header row is kept as the first row.
pub fn parse_markdown(text: &str) -> Vec<Block> {
    let mut blocks = Vec::new();
    let mut para: Vec<&str> = Vec::new();
    let mut table: Vec<Vec<String>> = Vec::new();

    fn flush_para(para: &mut Vec<&str>, blocks: &mut Vec<Block>) {
        if !para.is_empty() {
            blocks.push(Block::paragraph(para.join(" ")));
            para.clear();
        }
    }
    fn flush_table(table: &mut Vec<Vec<String>>, blocks: &mut Vec<Block>) {
        if !table.is_empty() {
            blocks.push(Block::table(std::mem::take(table)));
        }
    }

    for raw in text.lines() {
        let line = raw.trim();
        if line.starts_with('|') {
            flush_para(&mut para, &mut blocks);
            if !is_delimiter_row(line) {
                table.push(split_row(line));
            }
            continue;
        }
        flush_table(&mut table, &mut blocks);
        if line.is_empty() {
            flush_para(&mut para, &mut blocks);
        } else if let Some(h) = heading_text(line) {
            flush_para(&mut para, &mut blocks);
            if !h.is_empty() {
                blocks.push(Block::heading(h));
            }
        } else if let Some(item) = list_item_text(line) {
            flush_para(&mut para, &mut blocks);
            if !item.is_empty() {
                blocks.push(Block::list_item(item));
            }
        } else {
            para.push(line);
        }
    }
    flush_table(&mut table, &mut blocks);
    flush_para(&mut para, &mut blocks);
    blocks.retain(|b| b.block_kind == BlockKind::Table || b.text.split_whitespace().next().is_some());
    blocks
}

fn heading_text(line: &str) -> Option<&str> {
    let hashes = line.bytes().take_while(|&b| b == b'#').count();
    if (1..=6).contains(&hashes) {
        let rest = &line[hashes..];
        if rest.is_empty() || rest.starts_with(' ') {
            return Some(rest.trim().trim_end_matches('#').trim());
        }
    }
    None
}

fn list_item_text(line: &str) -> Option<&str> {
    for marker in ["- ", "* ", "+ "] {
        if let Some(rest) = line.strip_prefix(marker) {
            return Some(rest.trim());
        }
    }
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 {
        if let Some(rest) = line[digits..].strip_prefix(". ") {
            return Some(rest.trim());
        }
    }
    None
}

fn split_row(line: &str) -> Vec<String> {
    let inner = line.trim().trim_start_matches('|');
    let inner = inner.strip_suffix('|').unwrap_or(inner);
    inner.split('|').map(|c| c.trim().to_string()).collect()
}

fn is_delimiter_row(line: &str) -> bool {
    let cells = split_row(line);
    !cells.is_empty()
        && cells.iter().all(|c| {
            let c = c.trim();
            !c.is_empty() && c.contains('-') && c.chars().all(|ch| matches!(ch, '-' | ':'))
        })
}
