//! Catalog grounding: dense-vector similarity between generated text and
//! item match-texts.
//!
//! Generated outputs can drift slightly from any real item, so each one is
//! associated with the most similar catalog entry by dot product over unit
//! vectors. The reference embedder hashes lowercase character 3-grams into
//! a fixed number of buckets and L2-normalizes the counts: deterministic,
//! dependency-free, and robust to the small edits generation introduces.
//! Search is an exact full scan — benchmark catalogs are small enough that
//! determinism is worth more than an approximate index.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::hash::fnv1a64;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("cannot build an index over an empty catalog")]
    EmptyCatalog,
    #[error("embedder `{query}` does not match index embedder `{index}`")]
    EmbedderMismatch { query: String, index: String },
    #[error("corrupt index file: {0}")]
    CorruptIndex(String),
    #[error("index io: {0}")]
    Io(#[from] std::io::Error),
}

/// Text to unit-norm vector. Implementations must be deterministic.
pub trait Embedder: Send + Sync {
    fn embedder_id(&self) -> String;
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f32>, MatchError>;
}

pub const DEFAULT_EMBEDDING_DIMENSION: usize = 1024;

/// Reference embedder: lowercased character 3-grams, FNV-hashed into
/// `dimension` buckets, counts L2-normalized.
#[derive(Clone, Debug)]
pub struct NgramHashEmbedder {
    dimension: usize,
}

impl Default for NgramHashEmbedder {
    fn default() -> Self {
        Self { dimension: DEFAULT_EMBEDDING_DIMENSION }
    }
}

impl NgramHashEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension }
    }
}

impl Embedder for NgramHashEmbedder {
    fn embedder_id(&self) -> String {
        format!("ngram3-fnv1a-{}", self.dimension)
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, MatchError> {
        let lowered = text.trim().to_lowercase();
        if lowered.is_empty() {
            return Err(MatchError::EmptyText);
        }
        let chars: Vec<char> = lowered.chars().collect();
        let mut counts = vec![0f32; self.dimension];
        let mut bump = |gram: &str| {
            let bucket = (fnv1a64(gram.as_bytes()) % self.dimension as u64) as usize;
            counts[bucket] += 1.0;
        };
        if chars.len() < 3 {
            // Too short for a 3-gram; the whole text is the single feature.
            bump(&lowered);
        } else {
            let mut gram = String::with_capacity(12);
            for window in chars.windows(3) {
                gram.clear();
                gram.extend(window);
                bump(&gram);
            }
        }
        let norm = counts.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        for v in &mut counts {
            *v = (*v as f64 / norm) as f32;
        }
        Ok(counts)
    }
}

/// Immutable exact-search index: one unit-norm row per catalog item.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemIndex {
    item_ids: Vec<String>,
    matrix: Vec<f32>,
    dimension: usize,
    embedder_id: String,
}

impl ItemIndex {
    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn embedder_id(&self) -> &str {
        &self.embedder_id
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dimension..(i + 1) * self.dimension]
    }
}

/// Embeds every (item_id, match_text) pair into an index. The match-text
/// should be the item's seqrec response rendering so queries and catalog
/// live in the same text space.
pub fn build_index<'a, I>(entries: I, embedder: &dyn Embedder) -> Result<ItemIndex, MatchError>
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let mut item_ids = Vec::new();
    let mut matrix = Vec::new();
    for (item_id, match_text) in entries {
        item_ids.push(item_id.to_string());
        matrix.extend(embedder.embed(match_text)?);
    }
    if item_ids.is_empty() {
        return Err(MatchError::EmptyCatalog);
    }
    Ok(ItemIndex {
        item_ids,
        matrix,
        dimension: embedder.dimension(),
        embedder_id: embedder.embedder_id(),
    })
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Exact top-m by dot product, descending; ties break by ascending item_id
/// so catalog input order never shows through.
pub fn match_top(
    index: &ItemIndex,
    embedder: &dyn Embedder,
    query: &str,
    m: usize,
) -> Result<Vec<(String, f32)>, MatchError> {
    if embedder.embedder_id() != index.embedder_id {
        return Err(MatchError::EmbedderMismatch {
            query: embedder.embedder_id(),
            index: index.embedder_id.clone(),
        });
    }
    let query_vec = embedder.embed(query)?;
    let mut scored: Vec<(usize, f32)> = (0..index.len())
        .map(|i| (i, dot(index.row(i), &query_vec)))
        .collect();
    scored.sort_by(|(i, a), (j, b)| {
        b.partial_cmp(a)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| index.item_ids[*i].cmp(&index.item_ids[*j]))
    });
    Ok(scored
        .into_iter()
        .take(m)
        .map(|(i, score)| (index.item_ids[i].clone(), score))
        .collect())
}

const INDEX_MAGIC: &[u8; 4] = b"RPIX";
const INDEX_VERSION: u32 = 1;

impl ItemIndex {
    /// Flat binary layout, little-endian: magic, version, dimension (u32),
    /// count (u64), embedder id, the item-id list, then the row-major f32
    /// matrix.
    pub fn save(&self, path: &Path) -> Result<(), MatchError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&INDEX_VERSION.to_le_bytes())?;
        w.write_all(&(self.dimension as u32).to_le_bytes())?;
        w.write_all(&(self.item_ids.len() as u64).to_le_bytes())?;
        write_string(&mut w, &self.embedder_id)?;
        for id in &self.item_ids {
            write_string(&mut w, id)?;
        }
        for value in &self.matrix {
            w.write_all(&value.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MatchError> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(MatchError::CorruptIndex("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != INDEX_VERSION {
            return Err(MatchError::CorruptIndex(format!("unsupported version {version}")));
        }
        let dimension = read_u32(&mut r)? as usize;
        let count = read_u64(&mut r)? as usize;
        let embedder_id = read_string(&mut r)?;
        let mut item_ids = Vec::with_capacity(count);
        for _ in 0..count {
            item_ids.push(read_string(&mut r)?);
        }
        let mut matrix = vec![0f32; count * dimension];
        let mut buf = [0u8; 4];
        for value in &mut matrix {
            r.read_exact(&mut buf)?;
            *value = f32::from_le_bytes(buf);
        }
        Ok(ItemIndex { item_ids, matrix, dimension, embedder_id })
    }
}

fn write_string<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, MatchError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, MatchError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_string<R: Read>(r: &mut R) -> Result<String, MatchError> {
    let len = read_u32(r)? as usize;
    if len > 1 << 24 {
        return Err(MatchError::CorruptIndex(format!("string length {len} implausible")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| MatchError::CorruptIndex(e.to_string()))
}
