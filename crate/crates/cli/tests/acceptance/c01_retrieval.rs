//! Retrieval against a brute-force oracle that shares no code with the
//! service: its own tokenizer, FNV-1a hash, normalization, cosine and sort.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::time::Instant;

use cogassist_core::acl::Registry;
use cogassist_core::chunking::ChunkingConfig;
use cogassist_core::system::{Assistant, Setup};
use cogassist_core::vector_store::VersionScope;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::common::{fixed_clock, ingest, ADMIN};
use crate::Outcome;

const CORPORA: usize = 50;
const QUERIES: usize = 100;
const TOP_KS: [usize; 3] = [1, 3, 10];
const DIM: usize = 256;

fn oracle_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 14_695_981_039_346_656_037;
    for b in bytes {
        h = (h ^ *b as u64).wrapping_mul(1_099_511_628_211);
    }
    h
}

fn oracle_embed(text: &str) -> Option<Vec<f64>> {
    let mut v = vec![0.0f64; DIM];
    let mut seen = false;
    for raw in text.split_whitespace() {
        let lower = raw.to_lowercase();
        let core = lower.trim_matches(|c: char| !c.is_alphanumeric());
        let token = if core.is_empty() { lower.as_str() } else { core };
        v[(oracle_hash(token.as_bytes()) % DIM as u64) as usize] += 1.0;
        seen = true;
    }
    if !seen {
        return None;
    }
    let norm = v.iter().fold(0.0, |acc, x| acc + x * x).sqrt();
    Some(v.into_iter().map(|x| x / norm).collect())
}

fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot = a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y);
    let na = a.iter().fold(0.0, |acc, x| acc + x * x).sqrt();
    let nb = b.iter().fold(0.0, |acc, x| acc + x * x).sqrt();
    if na * nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

struct OracleChunk {
    chunk_id: String,
    doc_id: String,
    version: u32,
    vector: Vec<f64>,
}

fn vocabulary() -> Vec<String> {
    let heads = [
        "press", "valve", "gear", "belt", "pump", "bolt", "seal", "drive", "motor", "filter", "sensor", "robot",
        "weld", "paint", "torque", "shaft", "clamp", "spindle", "nozzle", "relay",
    ];
    let tails = [
        "", "s", "er", "ing", "ed", "line", "cap", "plate", "head", "box", "set", "unit",
    ];
    heads
        .iter()
        .flat_map(|h| tails.iter().map(move |t| format!("{h}{t}")))
        .collect()
}

fn decorate(rng: &mut StdRng, word: &str) -> String {
    match rng.gen_range(0..20) {
        0 => format!("{word},"),
        1 => format!("({word})"),
        2 => word.to_uppercase(),
        3 => format!("{word}."),
        4 => "--".into(),
        _ => word.to_string(),
    }
}

fn random_text(rng: &mut StdRng, vocab: &[String], max_words: usize) -> String {
    let n = rng.gen_range(1..=max_words);
    let mut out = String::new();
    for i in 0..n {
        if i > 0 {
            out.push_str(if rng.gen_ratio(1, 25) { "\n\n" } else { " " });
        }
        let w = &vocab[rng.gen_range(0..vocab.len())];
        out.push_str(&decorate(rng, w));
    }
    out
}

fn random_query(rng: &mut StdRng, vocab: &[String]) -> String {
    match rng.gen_range(0..100) {
        0 => "   ".into(),
        1 | 2 => "?! --".into(),
        3..=7 => "zzyzx quorble".into(),
        _ => random_text(rng, vocab, 8).replace("\n\n", " "),
    }
}

fn oracle_rank(
    chunks: &[OracleChunk],
    active: &BTreeMap<String, u32>,
    q: &[f64],
    scope: VersionScope,
) -> Vec<(String, f64)> {
    let mut scored: Vec<(&OracleChunk, f64)> = chunks
        .iter()
        .filter(|c| scope == VersionScope::AllVersions || active.get(&c.doc_id) == Some(&c.version))
        .map(|c| (c, oracle_cosine(q, &c.vector)))
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.0.doc_id.cmp(&b.0.doc_id))
            .then_with(|| a.0.version.cmp(&b.0.version))
            .then_with(|| a.0.chunk_id.cmp(&b.0.chunk_id))
    });
    scored.into_iter().map(|(c, s)| (c.chunk_id.clone(), s)).collect()
}

pub fn run() -> Outcome {
    let start = Instant::now();
    let vocab = vocabulary();
    let mut rng = StdRng::seed_from_u64(0x5eed_0001);
    let (mut comparisons, mut max_chunks, mut max_docs, mut tie_queries) = (0usize, 0usize, 0usize, 0usize);
    for corpus_no in 0..CORPORA {
        let mut setup = Setup::new(fixed_clock());
        setup.registry = Registry::default_seed();
        setup.chunking = ChunkingConfig { window: 64, overlap: 8 };
        let (a, _sink) = Assistant::in_memory(setup);

        // Corpus 0 stays empty.
        let n_docs = if corpus_no == 0 { 0 } else { rng.gen_range(1..=200) };
        let mut active: BTreeMap<String, u32> = BTreeMap::new();
        let mut texts: Vec<String> = Vec::new();
        for i in 0..n_docs {
            let doc_id = format!("doc-{i:03}");
            let text = if i > 0 && rng.gen_ratio(1, 10) {
                texts[rng.gen_range(0..texts.len())].clone()
            } else {
                random_text(&mut rng, &vocab, 120)
            };
            let v = ingest(&a, ADMIN, &doc_id, &text);
            ensure!(
                v.version == 1,
                "corpus {corpus_no}: first ingest of {doc_id} got v{}",
                v.version
            );
            active.insert(doc_id, 1);
            texts.push(text);
        }
        for i in 0..n_docs {
            if rng.gen_ratio(1, 10) {
                let doc_id = format!("doc-{i:03}");
                let v = ingest(&a, ADMIN, &doc_id, &random_text(&mut rng, &vocab, 120));
                let expected = active[&doc_id] + 1;
                ensure!(
                    v.version == expected,
                    "corpus {corpus_no}: {doc_id} got v{} not v{expected}",
                    v.version
                );
                active.insert(doc_id, expected);
            }
        }

        let chunks: Vec<OracleChunk> = a
            .corpus()
            .chunks()
            .into_iter()
            .map(|c| OracleChunk {
                vector: oracle_embed(&c.text).expect("chunks hold text"),
                chunk_id: c.chunk_id.as_str().to_string(),
                doc_id: c.doc_id.as_str().to_string(),
                version: c.version,
            })
            .collect();
        ensure!(chunks.len() <= 1000, "corpus {corpus_no} has {} chunks", chunks.len());
        max_chunks = max_chunks.max(chunks.len());
        max_docs = max_docs.max(n_docs);

        for qn in 0..QUERIES {
            let query = random_query(&mut rng, &vocab);
            let scope = if qn % 10 == 9 {
                VersionScope::AllVersions
            } else {
                VersionScope::Active
            };
            let expected = match oracle_embed(&query) {
                Some(q) if !chunks.is_empty() => oracle_rank(&chunks, &active, &q, scope),
                _ => Vec::new(),
            };
            if expected.len() > 1 && expected[0].1 == expected[1].1 {
                tie_queries += 1;
            }
            for k in TOP_KS {
                let got = a.corpus().retrieve(&query, k, scope).map_err(|e| e.to_string())?;
                let got: Vec<(String, f64)> = got
                    .into_iter()
                    .map(|h| (h.chunk.chunk_id.as_str().to_string(), h.score))
                    .collect();
                let want: Vec<(String, f64)> = expected.iter().take(k).cloned().collect();
                let ids_equal = got.iter().map(|g| &g.0).eq(want.iter().map(|w| &w.0));
                let scores_equal = got.iter().zip(&want).all(|(g, w)| g.1 == w.1);
                ensure!(
                    ids_equal && scores_equal,
                    "corpus {corpus_no} query {qn} {query:?} k={k} {scope:?}: got {got:?}, oracle {want:?}"
                );
                comparisons += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s, limit 60s");
    Ok(format!(
        "{comparisons} rankings identical to the oracle (ids and bit-equal scores), \
         up to {max_docs} docs/{max_chunks} chunks, {tie_queries} queries with tied leaders, {secs:.1}s"
    ))
}
