//! In-memory vector store with exhaustive cosine ranking.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::chunking::ChunkSpan;
use crate::embed::EmbeddingVector;
use crate::ids::{ChunkId, DocId};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Chunk {
    pub chunk_id: ChunkId,
    pub doc_id: DocId,
    pub version: u32,
    pub span: ChunkSpan,
    pub text: String,
    pub oversized: bool,
    pub embedding: EmbeddingVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VersionScope {
    /// Only each document's active version.
    #[default]
    Active,
    AllVersions,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredChunk {
    pub chunk: Chunk,
    pub score: f64,
}

#[derive(Debug, Clone, Default)]
pub struct VectorStore {
    dimension: usize,
    chunks: BTreeMap<ChunkId, Chunk>,
    active: BTreeMap<DocId, u32>,
}

/// Descending score, then ascending (doc_id, version, chunk_id).
pub fn rank_order(a: (&Chunk, f64), b: (&Chunk, f64)) -> Ordering {
    b.1.total_cmp(&a.1)
        .then_with(|| a.0.doc_id.cmp(&b.0.doc_id))
        .then_with(|| a.0.version.cmp(&b.0.version))
        .then_with(|| a.0.chunk_id.cmp(&b.0.chunk_id))
}

impl VectorStore {
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension,
            ..Self::default()
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn chunks(&self) -> impl Iterator<Item = &Chunk> {
        self.chunks.values()
    }

    pub fn get(&self, chunk_id: &ChunkId) -> Option<&Chunk> {
        self.chunks.get(chunk_id)
    }

    pub fn active_version(&self, doc_id: &DocId) -> Option<u32> {
        self.active.get(doc_id).copied()
    }

    pub fn active_versions(&self) -> &BTreeMap<DocId, u32> {
        &self.active
    }

    /// Adds the chunks of a new version and makes that version active.
    /// Chunks of earlier versions stay stored but drop out of the default
    /// scope.
    pub fn add_version(&mut self, doc_id: &DocId, version: u32, chunks: Vec<Chunk>) -> Result<(), String> {
        for c in &chunks {
            if c.embedding.dimension() != self.dimension {
                return Err(format!(
                    "chunk {} has dimension {}, store expects {}",
                    c.chunk_id,
                    c.embedding.dimension(),
                    self.dimension
                ));
            }
            if &c.doc_id != doc_id || c.version != version {
                return Err(format!("chunk {} belongs to another version", c.chunk_id));
            }
        }
        for c in chunks {
            self.chunks.insert(c.chunk_id.clone(), c);
        }
        let slot = self.active.entry(doc_id.clone()).or_insert(version);
        *slot = (*slot).max(version);
        Ok(())
    }

    fn in_scope(&self, c: &Chunk, scope: VersionScope) -> bool {
        match scope {
            VersionScope::AllVersions => true,
            VersionScope::Active => self.active.get(&c.doc_id) == Some(&c.version),
        }
    }

    pub fn retrieve(&self, query: &EmbeddingVector<f64>, top_k: usize, scope: VersionScope) -> Vec<ScoredChunk> {
        if top_k == 0 {
            return Vec::new();
        }
        let mut scored: Vec<(&Chunk, f64)> = self
            .chunks
            .values()
            .filter(|c| self.in_scope(c, scope))
            .map(|c| (c, query.cosine(&c.embedding)))
            .collect();
        if scored.len() > top_k {
            scored.select_nth_unstable_by(top_k - 1, |a, b| rank_order(*a, *b));
            scored.truncate(top_k);
        }
        scored.sort_by(|a, b| rank_order(*a, *b));
        scored
            .into_iter()
            .map(|(c, score)| ScoredChunk {
                chunk: c.clone(),
                score,
            })
            .collect()
    }
}
