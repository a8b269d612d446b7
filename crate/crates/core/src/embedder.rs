//! Shadow retriever encoder: tokenization, deterministic sentence embeddings,
//! cosine similarity with analytic gradients, and the greedy slot decoder that
//! maps a perturbed embedding back to concrete tokens.
//!
//! The reference embedder is a seeded Gaussian token matrix with mean pooling
//! and L2 normalization. It is differentiable end to end, fully reproducible
//! from `(seed, vocab, dim)`, and carries no external model dependency, which
//! is what the optimizer and the transfer experiments need.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guards::BannedWordList;

/// Default embedding dimension.
pub const DEFAULT_DIM: usize = 64;
/// Default number of reserved hash buckets for out-of-vocabulary tokens.
pub const DEFAULT_OOV_BUCKETS: usize = 1024;
/// Default number of greedy passes in the slot decoder.
pub const DEFAULT_MAX_PASSES: usize = 3;

/// A tokenized text: lowercase word and punctuation tokens.
pub type TokenSequence = Vec<String>;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("duplicate token in vocabulary: {0}")]
    DuplicateToken(String),
    #[error("cannot encode an empty token sequence")]
    EmptyInput,
    #[error("token rows cancelled to a zero vector; cannot normalize")]
    DegenerateInput,
    #[error("target list is empty")]
    EmptyTargets,
    #[error("banned list excludes every vocabulary token eligible for slot {0}")]
    NoFeasibleToken(usize),
    #[error("slot position {0} is outside the token sequence (len {1})")]
    SlotOutOfBounds(usize, usize),
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("snapshot io: {0}")]
    SnapshotIo(String),
    #[error("snapshot parse: {0}")]
    SnapshotParse(String),
}

/// Deterministic 64-bit FNV-1a. Used for OOV bucketing so hashing is stable
/// across runs and toolchains.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Splits text into lowercase tokens. Alphanumeric runs become word tokens;
/// every other non-whitespace character becomes its own token.
pub fn tokenize(text: &str) -> TokenSequence {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            for lc in ch.to_lowercase() {
                word.push(lc);
            }
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                let mut t = String::new();
                for lc in ch.to_lowercase() {
                    t.push(lc);
                }
                tokens.push(t);
            }
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// The token space over which adversarial slots are optimized.
///
/// `lookup` is total: unknown tokens hash into one of `oov_buckets` reserved
/// rows, so every text maps to some sequence of matrix rows.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    oov_buckets: usize,
}

impl Vocabulary {
    pub fn new<I, S>(tokens: I, oov_buckets: usize) -> Result<Self, EmbedError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(EmbedError::DuplicateToken(t.clone()));
            }
        }
        Ok(Self { tokens, index, oov_buckets })
    }

    /// Number of known (non-OOV) tokens.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn oov_buckets(&self) -> usize {
        self.oov_buckets
    }

    /// Total row count of the embedding matrix (known tokens + OOV buckets).
    pub fn rows(&self) -> usize {
        self.tokens.len() + self.oov_buckets
    }

    /// Total lookup: known tokens map to their row, everything else hashes
    /// into an OOV bucket.
    pub fn lookup(&self, token: &str) -> usize {
        match self.index.get(token) {
            Some(&i) => i,
            None => {
                if self.oov_buckets == 0 {
                    // Degenerate configuration: fold OOV onto row 0.
                    0
                } else {
                    self.tokens.len() + (fnv1a(token.as_bytes()) as usize % self.oov_buckets)
                }
            }
        }
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, row: usize) -> Option<&str> {
        self.tokens.get(row).map(|s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Unit-norm dense vector in the retriever's index space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn from_values(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Text-in, vector-out encoder contract. This is the surface an external
/// embedding service would implement: encode only, no gradients, no decoder.
pub trait TextEncoder: Send + Sync {
    fn encode_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError>;
    fn dim(&self) -> usize;
}

/// Snapshot format: the matrix is regenerated from the seed, never stored.
#[derive(Debug, Serialize, Deserialize)]
struct EmbedderSnapshot {
    seed: u64,
    dim: usize,
    oov_buckets: usize,
    vocab: Vec<String>,
}

/// The shadow retriever's encoder: a `rows x dim` Gaussian token matrix
/// (`sigma = 1/sqrt(dim)`), mean pooling, L2 normalization.
///
/// Immutable after construction; all operations are pure.
#[derive(Debug, Clone)]
pub struct ReferenceEmbedder {
    vocab: Vocabulary,
    matrix: Vec<f64>, // row-major rows x dim
    dim: usize,
    seed: u64,
}

impl ReferenceEmbedder {
    pub fn new(vocab: Vocabulary, dim: usize, seed: u64) -> Self {
        let rows = vocab.rows();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma = 1.0 / (dim as f64).sqrt();
        let mut matrix = vec![0.0; rows * dim];
        // Box-Muller on ChaCha output: avoids depending on the float layout of
        // any particular distribution crate, so matrices are stable forever.
        let mut fill = |m: &mut [f64]| {
            use rand::Rng;
            let mut i = 0;
            while i < m.len() {
                let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.gen::<f64>();
                let r = (-2.0 * u1.ln()).sqrt();
                let theta = 2.0 * std::f64::consts::PI * u2;
                m[i] = sigma * r * theta.cos();
                if i + 1 < m.len() {
                    m[i + 1] = sigma * r * theta.sin();
                }
                i += 2;
            }
        };
        fill(&mut matrix);
        Self { vocab, matrix, dim, seed }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn row(&self, idx: usize) -> &[f64] {
        &self.matrix[idx * self.dim..(idx + 1) * self.dim]
    }

    fn row_of_token(&self, token: &str) -> &[f64] {
        self.row(self.vocab.lookup(token))
    }

    /// Sum of per-token rows (pre-pooling).
    fn token_sum(&self, tokens: &[String]) -> Vec<f64> {
        let mut sum = vec![0.0; self.dim];
        for t in tokens {
            let r = self.row_of_token(t);
            for (s, v) in sum.iter_mut().zip(r) {
                *s += v;
            }
        }
        sum
    }

    /// Mean of per-token rows, L2-normalized.
    pub fn encode(&self, tokens: &[String]) -> Result<EmbeddingVector, EmbedError> {
        if tokens.is_empty() {
            return Err(EmbedError::EmptyInput);
        }
        let mut sum = self.token_sum(tokens);
        let n = tokens.len() as f64;
        for v in sum.iter_mut() {
            *v /= n;
        }
        let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(EmbedError::DegenerateInput);
        }
        for v in sum.iter_mut() {
            *v /= norm;
        }
        Ok(EmbeddingVector::from_values(sum))
    }

    pub fn save_snapshot(&self, path: &Path) -> Result<(), EmbedError> {
        let snap = EmbedderSnapshot {
            seed: self.seed,
            dim: self.dim,
            oov_buckets: self.vocab.oov_buckets(),
            vocab: self.vocab.tokens().to_vec(),
        };
        let json = serde_json::to_string_pretty(&snap)
            .map_err(|e| EmbedError::SnapshotParse(e.to_string()))?;
        fs::write(path, json).map_err(|e| EmbedError::SnapshotIo(e.to_string()))
    }

    pub fn load_snapshot(path: &Path) -> Result<Self, EmbedError> {
        let data = fs::read_to_string(path).map_err(|e| EmbedError::SnapshotIo(e.to_string()))?;
        let snap: EmbedderSnapshot =
            serde_json::from_str(&data).map_err(|e| EmbedError::SnapshotParse(e.to_string()))?;
        let vocab = Vocabulary::new(snap.vocab, snap.oov_buckets)?;
        Ok(Self::new(vocab, snap.dim, snap.seed))
    }
}

impl TextEncoder for ReferenceEmbedder {
    fn encode_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        self.encode(&tokenize(text))
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

/// Cosine similarity of two unit-norm vectors (their dot product).
pub fn similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    dot(a.values(), b.values())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Gradient of `cos(x, t)` with respect to `x`, where `t` is unit-norm but
/// `x` may not be: `d/dx (x.t / |x|) = t/|x| - (x.t) x / |x|^3`.
pub(crate) fn cosine_grad(x: &[f64], t: &[f64]) -> Vec<f64> {
    let nx = l2(x);
    let xt = dot(x, t);
    let nx3 = nx * nx * nx;
    x.iter()
        .zip(t)
        .map(|(xi, ti)| ti / nx - xt * xi / nx3)
        .collect()
}

pub(crate) fn cosine_general(x: &[f64], t: &[f64]) -> f64 {
    let nx = l2(x);
    let nt = l2(t);
    if nx == 0.0 || nt == 0.0 {
        return 0.0;
    }
    dot(x, t) / (nx * nt)
}

/// Index of the minimizing target (ties broken by lowest index) and the loss
/// `1 - min_i cos(x, e_i)`.
pub(crate) fn min_cos_index(x: &[f64], targets: &[EmbeddingVector]) -> (usize, f64) {
    let mut best_i = 0;
    let mut best = f64::INFINITY;
    for (i, t) in targets.iter().enumerate() {
        let c = cosine_general(x, t.values());
        if c < best {
            best = c;
            best_i = i;
        }
    }
    (best_i, best)
}

/// Loss `1 - min_i cos(e_syn, e_i)` over the target set and its analytic
/// gradient with respect to `e_syn`. At ties the lowest target index governs.
pub fn loss_and_grad(
    e_syn: &EmbeddingVector,
    targets: &[EmbeddingVector],
) -> Result<(f64, Vec<f64>), EmbedError> {
    if targets.is_empty() {
        return Err(EmbedError::EmptyTargets);
    }
    for t in targets {
        if t.dim() != e_syn.dim() {
            return Err(EmbedError::DimensionMismatch(e_syn.dim(), t.dim()));
        }
    }
    let x = e_syn.values();
    let (j, min_cos) = min_cos_index(x, targets);
    let loss = 1.0 - min_cos;
    let g = cosine_grad(x, targets[j].values());
    // d loss / dx = -d cos / dx
    let grad = g.into_iter().map(|v| -v).collect();
    Ok((loss, grad))
}

/// What kind of token a slot accepts. `Free` slots take any vocabulary token;
/// code-mode slots are constrained so the obfuscated snippet still parses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotKind {
    Free,
    Identifier,
    Integer,
}

/// A group of positions that must always hold the same token. Text-mode
/// slots are singleton groups; code-mode identifier slots tie every
/// occurrence of one identifier together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotGroup {
    pub positions: Vec<usize>,
    pub kind: SlotKind,
}

impl SlotGroup {
    pub fn single(pos: usize) -> Self {
        Self { positions: vec![pos], kind: SlotKind::Free }
    }
}

fn is_identifier_token(t: &str) -> bool {
    let mut chars = t.chars();
    match chars.next() {
        Some(c) if c.is_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_alphanumeric() || c == '_')
}

fn is_integer_token(t: &str) -> bool {
    !t.is_empty() && t.chars().all(|c| c.is_ascii_digit())
}

fn slot_candidate_ok(kind: SlotKind, token: &str, banned: &BannedWordList) -> bool {
    if banned.matches_token(token) {
        return false;
    }
    match kind {
        SlotKind::Free => true,
        SlotKind::Identifier => {
            is_identifier_token(token) && !crate::toycode::is_keyword(token)
        }
        SlotKind::Integer => is_integer_token(token),
    }
}

/// Greedy coordinate ascent over tied slot groups: for each group in order,
/// pick the vocabulary token (banned tokens and OOV buckets excluded) that
/// maximizes `cos(encode(sequence), e_target)`. Passes repeat until a fixed
/// point or `max_passes`. Positions outside the groups are never altered.
pub fn decode_slot_groups(
    e_target: &EmbeddingVector,
    tokens: &[String],
    groups: &[SlotGroup],
    banned: &BannedWordList,
    emb: &ReferenceEmbedder,
    max_passes: usize,
) -> Result<TokenSequence, EmbedError> {
    for g in groups {
        for &p in &g.positions {
            if p >= tokens.len() {
                return Err(EmbedError::SlotOutOfBounds(p, tokens.len()));
            }
        }
    }
    let mut seq: Vec<String> = tokens.to_vec();
    if groups.is_empty() {
        return Ok(seq);
    }

    let dim = emb.dim();
    let t = e_target.values();
    // Precompute per-row alignment with the target and row self-dots.
    let nrows = emb.vocab().len();
    let mut row_dot_t = vec![0.0; nrows];
    let mut row_dot_row = vec![0.0; nrows];
    for r in 0..nrows {
        let row = emb.row(r);
        row_dot_t[r] = dot(row, t);
        row_dot_row[r] = dot(row, row);
    }

    // Score is monotone in (sum . t) / |sum|; the 1/n pooling factor cancels.
    let mut sum = emb.token_sum(&seq);

    for _ in 0..max_passes.max(1) {
        let mut changed = false;
        for (gi, g) in groups.iter().enumerate() {
            let occurrences = g.positions.len() as f64;
            let current = seq[g.positions[0]].clone();
            let cur_row = emb.vocab().lookup(&current);

            // Residual sum with this group's token removed everywhere.
            let mut base = sum.clone();
            {
                let row = emb.row(cur_row);
                for (b, v) in base.iter_mut().zip(row) {
                    *b -= occurrences * v;
                }
            }
            let base_dot_t = dot(&base, t);
            let base_dot_base = dot(&base, &base);

            let mut best: Option<(f64, usize)> = None;
            for r in 0..nrows {
                let tok = emb.vocab().token(r).expect("row < vocab len");
                if !slot_candidate_ok(g.kind, tok, banned) {
                    continue;
                }
                let row = emb.row(r);
                let num = base_dot_t + occurrences * row_dot_t[r];
                let cross = dot(&base, row);
                let den2 = base_dot_base
                    + 2.0 * occurrences * cross
                    + occurrences * occurrences * row_dot_row[r];
                if den2 <= 0.0 {
                    continue;
                }
                let score = num / den2.sqrt();
                match best {
                    Some((s, _)) if score <= s => {}
                    _ => best = Some((score, r)),
                }
            }
            let (_, best_row) = best.ok_or(EmbedError::NoFeasibleToken(gi))?;
            if best_row != cur_row || !emb.vocab().contains(&current) {
                let new_tok = emb.vocab().token(best_row).expect("row < vocab len").to_string();
                if new_tok != current {
                    changed = true;
                }
                let new_row = emb.row(best_row);
                for (i, s) in sum.iter_mut().enumerate() {
                    *s = base[i] + occurrences * new_row[i];
                }
                for &p in &g.positions {
                    seq[p] = new_tok.clone();
                }
            } else {
                // keep incumbent; restore sum from base
                let row = emb.row(cur_row);
                for (i, s) in sum.iter_mut().enumerate() {
                    *s = base[i] + occurrences * row[i];
                }
            }
        }
        if !changed {
            break;
        }
    }

    debug_assert!(seq
        .iter()
        .enumerate()
        .all(|(i, tok)| !groups.iter().any(|g| g.positions.contains(&i))
            || !banned.matches_token(tok)));
    Ok(seq)
}

/// Position-based decoder: each slot index is an independent group.
pub fn decode_slots(
    e_target: &EmbeddingVector,
    tokens: &[String],
    slots: &[usize],
    banned: &BannedWordList,
    emb: &ReferenceEmbedder,
    max_passes: usize,
) -> Result<TokenSequence, EmbedError> {
    let groups: Vec<SlotGroup> = slots.iter().map(|&p| SlotGroup::single(p)).collect();
    decode_slot_groups(e_target, tokens, &groups, banned, emb, max_passes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guards::{BannedWordList, MatchMode};

    fn toy_vocab(n: usize) -> Vocabulary {
        let tokens: Vec<String> = (0..n).map(|i| format!("tok{i}")).collect();
        Vocabulary::new(tokens, 16).unwrap()
    }

    fn toy_emb(n: usize, seed: u64) -> ReferenceEmbedder {
        ReferenceEmbedder::new(toy_vocab(n), DEFAULT_DIM, seed)
    }

    fn no_banned() -> BannedWordList {
        BannedWordList::from_words(Vec::<String>::new(), MatchMode::Word)
    }

    #[test]
    fn tokenize_splits_on_whitespace_and_punctuation() {
        assert_eq!(tokenize("DELETE FROM artists;"), vec!["delete", "from", "artists", ";"]);
    }

    #[test]
    fn tokenize_empty_is_empty() {
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn tokenize_adversarial_tokens() {
        assert_eq!(tokenize("cancel I want deamada"), vec!["cancel", "i", "want", "deamada"]);
    }

    #[test]
    fn lookup_is_total_and_deterministic() {
        let v = toy_vocab(10);
        let a = v.lookup("never-seen");
        let b = v.lookup("never-seen");
        assert_eq!(a, b);
        assert!(a >= v.len() && a < v.rows());
    }

    #[test]
    fn encode_single_token_is_normalized_row() {
        let emb = toy_emb(50, 7);
        let e = emb.encode(&vec!["tok3".to_string()]).unwrap();
        let row = emb.row(3);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, b) in e.values().iter().zip(row) {
            assert!((a - b / n).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_is_order_invariant() {
        let emb = toy_emb(50, 7);
        let a = emb.encode(&vec!["tok1".into(), "tok2".into(), "tok3".into()]).unwrap();
        let b = emb.encode(&vec!["tok3".into(), "tok1".into(), "tok2".into()]).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn encode_matches_hand_rolled_pooling_oracle() {
        // Independent recomputation: mean of rows then normalize, with
        // explicit loops rather than the library helpers.
        let emb = toy_emb(64, 21);
        let tokens: Vec<String> = (0..10).map(|i| format!("tok{}", i * 3 % 50)).collect();
        let e = emb.encode(&tokens).unwrap();

        let mut mean = vec![0.0f64; DEFAULT_DIM];
        for t in &tokens {
            let r = emb.row(emb.vocab().lookup(t));
            for i in 0..DEFAULT_DIM {
                mean[i] += r[i];
            }
        }
        for m in mean.iter_mut() {
            *m /= tokens.len() as f64;
        }
        let mut norm = 0.0;
        for m in &mean {
            norm += m * m;
        }
        let norm = norm.sqrt();
        for (got, want) in e.values().iter().zip(mean.iter().map(|m| m / norm)) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_empty_errors() {
        let emb = toy_emb(10, 1);
        assert!(matches!(emb.encode(&[]), Err(EmbedError::EmptyInput)));
    }

    #[test]
    fn encode_norm_is_one() {
        let emb = toy_emb(80, 3);
        for k in 1..20 {
            let tokens: Vec<String> = (0..k).map(|i| format!("tok{}", (i * 7) % 80)).collect();
            let e = emb.encode(&tokens).unwrap();
            assert!((e.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn similarity_self_and_antipode() {
        let emb = toy_emb(20, 5);
        let e = emb.encode(&vec!["tok1".into(), "tok2".into()]).unwrap();
        assert!((similarity(&e, &e) - 1.0).abs() < 1e-12);
        let neg = EmbeddingVector::from_values(e.values().iter().map(|v| -v).collect());
        assert!((similarity(&e, &neg) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn similarity_matches_dot_oracle() {
        let emb = toy_emb(40, 11);
        let a = emb.encode(&vec!["tok1".into(), "tok5".into()]).unwrap();
        let b = emb.encode(&vec!["tok9".into(), "tok30".into(), "tok3".into()]).unwrap();
        let mut acc = 0.0;
        for i in 0..a.dim() {
            acc += a.values()[i] * b.values()[i];
        }
        assert!((similarity(&a, &b) - acc).abs() < 1e-12);
    }

    #[test]
    fn loss_zero_at_sole_target() {
        let emb = toy_emb(20, 9);
        let e = emb.encode(&vec!["tok4".into()]).unwrap();
        let (loss, grad) = loss_and_grad(&e, std::slice::from_ref(&e)).unwrap();
        assert!(loss.abs() < 1e-12);
        // At the optimum the tangential gradient vanishes.
        let gnorm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(gnorm < 1e-9, "gradient norm at optimum: {gnorm}");
    }

    #[test]
    fn loss_governed_by_min_similarity() {
        // Two targets: one identical (cos 1), one orthogonal (cos 0).
        let e = EmbeddingVector::from_values(vec![1.0, 0.0, 0.0]);
        let orth = EmbeddingVector::from_values(vec![0.0, 1.0, 0.0]);
        let (loss, _) = loss_and_grad(&e, &[orth, e.clone()]).unwrap();
        assert!((loss - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_empty_targets_errors() {
        let e = EmbeddingVector::from_values(vec![1.0, 0.0]);
        assert!(matches!(loss_and_grad(&e, &[]), Err(EmbedError::EmptyTargets)));
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        let emb = toy_emb(64, 13);
        let h = 1e-5;
        for case in 0..20 {
            let tokens: Vec<String> =
                (0..5).map(|i| format!("tok{}", (case * 5 + i * 3) % 64)).collect();
            let e = emb.encode(&tokens).unwrap();
            let t1 = emb.encode(&vec![format!("tok{}", (case * 7 + 1) % 64)]).unwrap();
            let t2 = emb.encode(&vec![format!("tok{}", (case * 11 + 2) % 64)]).unwrap();
            let targets = vec![t1, t2];
            let (_, grad) = loss_and_grad(&e, &targets).unwrap();
            for i in (0..e.dim()).step_by(7) {
                let mut plus = e.values().to_vec();
                plus[i] += h;
                let mut minus = e.values().to_vec();
                minus[i] -= h;
                let lp = 1.0 - min_cos_index(&plus, &targets).1;
                let lm = 1.0 - min_cos_index(&minus, &targets).1;
                let fd = (lp - lm) / (2.0 * h);
                let denom = fd.abs().max(grad[i].abs()).max(1e-8);
                assert!(
                    ((grad[i] - fd) / denom).abs() < 1e-4,
                    "case {case} coord {i}: analytic {} vs fd {fd}",
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn decode_no_slots_is_identity() {
        let emb = toy_emb(30, 17);
        let tokens: Vec<String> = vec!["tok1".into(), "tok2".into()];
        let target = emb.encode(&vec!["tok9".into()]).unwrap();
        let out = decode_slots(&target, &tokens, &[], &no_banned(), &emb, 3).unwrap();
        assert_eq!(out, tokens);
    }

    #[test]
    fn decode_single_slot_matches_exhaustive_argmax() {
        let emb = toy_emb(50, 23);
        let tokens: Vec<String> = vec!["tok0".into(), "tok1".into(), "tok2".into()];
        let target = emb.encode(&vec!["tok40".into(), "tok41".into()]).unwrap();
        let out = decode_slots(&target, &tokens, &[1], &no_banned(), &emb, 1).unwrap();

        // Exhaustive oracle over all 50 vocabulary tokens.
        let mut best_tok = String::new();
        let mut best = f64::NEG_INFINITY;
        for cand in emb.vocab().tokens() {
            let mut seq = tokens.clone();
            seq[1] = cand.clone();
            let s = similarity(&emb.encode(&seq).unwrap(), &target);
            if s > best {
                best = s;
                best_tok = cand.clone();
            }
        }
        assert_eq!(out[1], best_tok);
        assert_eq!(out[0], "tok0");
        assert_eq!(out[2], "tok2");
    }

    #[test]
    fn decode_recovers_planted_token() {
        let emb = toy_emb(40, 29);
        let mut planted: Vec<String> = vec!["tok1".into(), "tok2".into(), "tok3".into()];
        planted[1] = "tok33".into();
        let target = emb.encode(&planted).unwrap();
        let start: Vec<String> = vec!["tok1".into(), "tok0".into(), "tok3".into()];
        let out = decode_slots(&target, &start, &[1], &no_banned(), &emb, 3).unwrap();
        assert_eq!(out[1], "tok33");
    }

    #[test]
    fn decode_excludes_banned_tokens() {
        let emb = toy_emb(40, 29);
        let mut planted: Vec<String> = vec!["tok1".into(), "tok2".into(), "tok3".into()];
        planted[1] = "tok33".into();
        let target = emb.encode(&planted).unwrap();
        let banned = BannedWordList::from_words(vec!["tok33".to_string()], MatchMode::Word);
        let start: Vec<String> = vec!["tok1".into(), "tok0".into(), "tok3".into()];
        let out = decode_slots(&target, &start, &[1], &banned, &emb, 3).unwrap();
        assert_ne!(out[1], "tok33");
    }

    #[test]
    fn decode_improves_objective_monotonically() {
        let emb = toy_emb(60, 31);
        let tokens: Vec<String> =
            vec!["tok0".into(), "tok1".into(), "tok2".into(), "tok3".into(), "tok4".into()];
        let target = emb.encode(&vec!["tok50".into(), "tok51".into(), "tok52".into()]).unwrap();
        let before = similarity(&emb.encode(&tokens).unwrap(), &target);
        let out = decode_slots(&target, &tokens, &[0, 2, 4], &no_banned(), &emb, 3).unwrap();
        let after = similarity(&emb.encode(&out).unwrap(), &target);
        assert!(after >= before - 1e-12, "before {before} after {after}");
    }

    #[test]
    fn decode_all_banned_errors() {
        let emb = toy_emb(5, 2);
        let words: Vec<String> = (0..5).map(|i| format!("tok{i}")).collect();
        let banned = BannedWordList::from_words(words, MatchMode::Word);
        let tokens: Vec<String> = vec!["tok0".into()];
        let target = emb.encode(&vec!["tok1".into()]).unwrap();
        let r = decode_slots(&target, &tokens, &[0], &banned, &emb, 1);
        assert!(matches!(r, Err(EmbedError::NoFeasibleToken(_))));
    }

    #[test]
    fn same_seed_gives_identical_matrix() {
        let a = toy_emb(30, 99);
        let b = toy_emb(30, 99);
        assert_eq!(a.matrix, b.matrix);
        let c = toy_emb(30, 100);
        assert_ne!(a.matrix, c.matrix);
    }

    #[test]
    fn snapshot_roundtrip_regenerates_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.json");
        let a = toy_emb(25, 77);
        a.save_snapshot(&path).unwrap();
        let b = ReferenceEmbedder::load_snapshot(&path).unwrap();
        assert_eq!(a.matrix, b.matrix);
        assert_eq!(a.seed(), b.seed());
        assert_eq!(a.vocab().tokens(), b.vocab().tokens());
    }
}
