//! The application's long-term memory: knowledge ingestion, a flat embedding
//! index, and exact top-k cosine retrieval.
//!
//! `retrieve` and `brute_force_retrieve` are deliberately independent code
//! paths; the latter exists as an oracle for the former and must stay that
//! way.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedder::{EmbedError, EmbeddingVector, TextEncoder};

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate entry id: {0}")]
    DuplicateId(String),
    #[error("knowledge base is empty")]
    EmptyBase,
    #[error("k must be >= 1")]
    InvalidK,
    #[error("unknown entry id: {0}")]
    UnknownId(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// Application domain of a knowledge corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Sql,
    Code,
    Medical,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Sql => "sql",
            Domain::Code => "code",
            Domain::Medical => "medical",
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sql" => Ok(Domain::Sql),
            "code" => Ok(Domain::Code),
            "medical" => Ok(Domain::Medical),
            other => Err(format!("unknown domain: {other}")),
        }
    }
}

/// One indexed piece of the application's long-term memory, with the
/// operation/object labels the toy corpora carry for ground-truth scoring.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub id: String,
    pub text: String,
    pub op_label: String,
    pub obj_labels: Vec<String>,
    pub domain: Domain,
}

/// One retrieval hit: entry id and cosine score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

/// Ordered top-k result. Scores are non-increasing and `hits.len()` is
/// `min(k, |base|)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub hits: Vec<Hit>,
    pub k: usize,
}

impl RetrievalResult {
    pub fn empty(k: usize) -> Self {
        Self { hits: Vec::new(), k }
    }

    pub fn contains(&self, id: &str) -> bool {
        self.hits.iter().any(|h| h.id == id)
    }

    pub fn rank_of(&self, id: &str) -> Option<usize> {
        self.hits.iter().position(|h| h.id == id).map(|p| p + 1)
    }
}

/// A retrieval query: raw text (encoded with the base's encoder) or an
/// already-computed embedding.
#[derive(Debug, Clone, Copy)]
pub enum Query<'a> {
    Text(&'a str),
    Vector(&'a EmbeddingVector),
}

/// Read-only after ingest: entries plus their embeddings under the encoder
/// the base was built with.
pub struct KnowledgeBase {
    entries: Vec<KnowledgeEntry>,
    embeddings: Vec<EmbeddingVector>,
    by_id: BTreeMap<String, usize>,
    encoder: Arc<dyn TextEncoder>,
}

impl KnowledgeBase {
    pub fn from_entries(
        entries: Vec<KnowledgeEntry>,
        encoder: Arc<dyn TextEncoder>,
    ) -> Result<Self, MemoryError> {
        let mut by_id = BTreeMap::new();
        let mut embeddings = Vec::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.text.is_empty() {
                return Err(MemoryError::Parse {
                    line: i + 1,
                    msg: format!("entry {} has empty text", e.id),
                });
            }
            if by_id.insert(e.id.clone(), i).is_some() {
                return Err(MemoryError::DuplicateId(e.id.clone()));
            }
            embeddings.push(encoder.encode_text(&e.text)?);
        }
        Ok(Self { entries, embeddings, by_id, encoder })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[KnowledgeEntry] {
        &self.entries
    }

    pub fn entry(&self, id: &str) -> Option<&KnowledgeEntry> {
        self.by_id.get(id).map(|&i| &self.entries[i])
    }

    pub fn embedding_of(&self, id: &str) -> Option<&EmbeddingVector> {
        self.by_id.get(id).map(|&i| &self.embeddings[i])
    }

    pub fn encoder(&self) -> &Arc<dyn TextEncoder> {
        &self.encoder
    }

    /// First entry whose text equals `text` exactly.
    pub fn find_by_text(&self, text: &str) -> Option<&KnowledgeEntry> {
        self.entries.iter().find(|e| e.text == text)
    }
}

/// Loads a JSONL corpus (one entry per line) and embeds every entry.
pub fn ingest(path: &Path, encoder: Arc<dyn TextEncoder>) -> Result<KnowledgeBase, MemoryError> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut entries = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: KnowledgeEntry = serde_json::from_str(&line).map_err(|e| MemoryError::Parse {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        if entry.text.is_empty() {
            return Err(MemoryError::Parse {
                line: lineno + 1,
                msg: "field `text` must be non-empty".to_string(),
            });
        }
        entries.push(entry);
    }
    KnowledgeBase::from_entries(entries, encoder)
}

/// Writes a corpus back out as JSONL, one entry per line.
pub fn write_jsonl(entries: &[KnowledgeEntry], path: &Path) -> Result<(), MemoryError> {
    let mut f = File::create(path)?;
    for e in entries {
        let line = serde_json::to_string(e).map_err(|er| MemoryError::Parse {
            line: 0,
            msg: er.to_string(),
        })?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

fn resolve_query(
    query: Query<'_>,
    base: &KnowledgeBase,
) -> Result<EmbeddingVector, MemoryError> {
    match query {
        Query::Text(t) => Ok(base.encoder.encode_text(t)?),
        Query::Vector(v) => Ok(v.clone()),
    }
}

/// Exact top-k by cosine over all entries. Ties break by lexicographic id.
pub fn retrieve(
    query: Query<'_>,
    k: usize,
    base: &KnowledgeBase,
) -> Result<RetrievalResult, MemoryError> {
    if base.is_empty() {
        return Err(MemoryError::EmptyBase);
    }
    if k == 0 {
        return Err(MemoryError::InvalidK);
    }
    let q = resolve_query(query, base)?;
    let mut scored: Vec<(usize, f64)> = base
        .embeddings
        .iter()
        .enumerate()
        .map(|(i, e)| (i, dot_seq(q.values(), e.values())))
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| base.entries[a.0].id.cmp(&base.entries[b.0].id))
    });
    let hits = scored
        .into_iter()
        .take(k.min(base.len()))
        .map(|(i, score)| Hit { id: base.entries[i].id.clone(), score })
        .collect();
    Ok(RetrievalResult { hits, k })
}

// Sequential dot product; kept identical in iteration order to the oracle's
// loop so scores agree bitwise.
fn dot_seq(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len().min(b.len()) {
        acc += a[i] * b[i];
    }
    acc
}

/// Unoptimized full-scan oracle for `retrieve`: repeated max extraction with
/// the same tie rule, no shared selection code.
pub fn brute_force_retrieve(
    query: Query<'_>,
    k: usize,
    base: &KnowledgeBase,
) -> Result<RetrievalResult, MemoryError> {
    if base.is_empty() {
        return Err(MemoryError::EmptyBase);
    }
    if k == 0 {
        return Err(MemoryError::InvalidK);
    }
    let q = resolve_query(query, base)?;
    let mut scores = Vec::with_capacity(base.len());
    for e in &base.embeddings {
        let mut acc = 0.0;
        for i in 0..q.dim().min(e.dim()) {
            acc += q.values()[i] * e.values()[i];
        }
        scores.push(acc);
    }
    let mut taken = vec![false; base.len()];
    let mut hits = Vec::new();
    for _ in 0..k.min(base.len()) {
        let mut best: Option<usize> = None;
        for i in 0..base.len() {
            if taken[i] {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(j) => {
                    if scores[i] > scores[j]
                        || (scores[i] == scores[j] && base.entries[i].id < base.entries[j].id)
                    {
                        Some(i)
                    } else {
                        Some(j)
                    }
                }
            };
        }
        let j = best.expect("non-empty base");
        taken[j] = true;
        hits.push(Hit { id: base.entries[j].id.clone(), score: scores[j] });
    }
    Ok(RetrievalResult { hits, k })
}

/// One line of the exported retrieval log.
#[derive(Debug, Serialize, Deserialize)]
pub struct RetrievalLogRecord {
    pub query: String,
    pub k: usize,
    pub hits: Vec<Hit>,
}

pub fn append_retrieval_log(
    path: &Path,
    record: &RetrievalLogRecord,
) -> Result<(), MemoryError> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let line = serde_json::to_string(record)
        .map_err(|e| MemoryError::Parse { line: 0, msg: e.to_string() })?;
    writeln!(f, "{line}")?;
    Ok(())
}
