//! Tokenization and token embeddings.
//!
//! Two providers are available: [`FileBacked`] reads a static vector table
//! from disk, [`HashSeeded`] derives a pseudo-random vector from a seeded
//! hash of the token. Unknown tokens in a file-backed table fall back to the
//! hash-seeded vector.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("failed to read embeddings: {0}")]
    Io(#[from] std::io::Error),
    #[error("embedding file line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("embedding dimension must be positive")]
    ZeroDim,
    #[error("max sequence length must be at least 1")]
    ZeroLength,
    #[error("standardize needs at least 2 vectors, got {0}")]
    TooFewVectors(usize),
    #[error("vector {index} has dimension {found}, expected {expected}")]
    DimMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub truncated: bool,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn is_token_char(c: char) -> bool {
    c.is_ascii_lowercase() || c.is_ascii_digit() || matches!(c, '_' | '#' | '.')
}

/// Lowercases and splits on every character outside `[a-z0-9_#.]`.
pub fn tokenize(text: &str) -> TokenSequence {
    let lower = text.to_lowercase();
    let tokens = lower
        .split(|c: char| !is_token_char(c))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect();
    TokenSequence {
        tokens,
        truncated: false,
    }
}

/// Number of distinct tokens in `text`.
pub fn distinct_word_count(text: &str) -> usize {
    tokenize(text).tokens.into_iter().collect::<BTreeSet<_>>().len()
}

pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    /// Always returns `dim()` finite components.
    fn lookup(&self, token: &str) -> Vec<f64>;
}

/// FNV-1a over the token bytes with the seed folded into the offset basis,
/// finished with a splitmix64 avalanche.
fn seeded_hash(seed: u64, token: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in token.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(PRIME);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Standard-normal components drawn from a generator keyed on the token.
#[derive(Debug, Clone)]
pub struct HashSeeded {
    seed: u64,
    dim: usize,
}

impl HashSeeded {
    pub fn new(seed: u64, dim: usize) -> Result<Self, EmbedError> {
        if dim == 0 {
            return Err(EmbedError::ZeroDim);
        }
        Ok(Self { seed, dim })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl EmbeddingProvider for HashSeeded {
    fn dim(&self) -> usize {
        self.dim
    }

    fn lookup(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seeded_hash(self.seed, token));
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

/// A static vector table.
///
/// File format: first line `dim <D>`, then one `token v1 ... vD` per line.
#[derive(Debug, Clone)]
pub struct FileBacked {
    vectors: HashMap<String, Vec<f64>>,
    fallback: HashSeeded,
}

impl FileBacked {
    pub fn load(path: &Path, fallback_seed: u64) -> Result<Self, EmbedError> {
        let file = fs::File::open(path)?;
        Self::read(BufReader::new(file), fallback_seed)
    }

    pub fn read<R: BufRead>(reader: R, fallback_seed: u64) -> Result<Self, EmbedError> {
        let fmt_err = |line: usize, message: String| EmbedError::Format { line, message };
        let mut lines = reader.lines().enumerate();
        let dim = loop {
            let Some((idx, line)) = lines.next() else {
                return Err(fmt_err(1, "missing `dim <D>` header".into()));
            };
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next().map(str::parse::<usize>), parts.next()) {
                (Some("dim"), Some(Ok(d)), None) if d > 0 => break d,
                (Some("dim"), Some(Ok(0)), None) => return Err(EmbedError::ZeroDim),
                _ => return Err(fmt_err(idx + 1, format!("bad header `{line}`"))),
            }
        };

        let mut vectors = HashMap::new();
        for (idx, line) in lines {
            let line = line?;
            let lineno = idx + 1;
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else {
                continue;
            };
            let values = parts
                .map(|v| {
                    v.parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| fmt_err(lineno, format!("bad value `{v}`")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            if values.len() != dim {
                return Err(fmt_err(
                    lineno,
                    format!("expected {dim} values, found {}", values.len()),
                ));
            }
            if vectors.insert(token.to_string(), values).is_some() {
                return Err(fmt_err(lineno, format!("duplicate token `{token}`")));
            }
        }
        Ok(Self {
            vectors,
            fallback: HashSeeded::new(fallback_seed, dim)?,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.vectors.contains_key(token)
    }
}

impl EmbeddingProvider for FileBacked {
    fn dim(&self) -> usize {
        self.fallback.dim
    }

    fn lookup(&self, token: &str) -> Vec<f64> {
        match self.vectors.get(token) {
            Some(v) => v.clone(),
            None => self.fallback.lookup(token),
        }
    }
}

/// `max_seq_len × dim` row-major matrix; the first `len` rows hold tokens,
/// the rest are zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceMatrix {
    pub rows: Vec<f64>,
    pub mask: Vec<bool>,
    pub dim: usize,
    pub truncated: bool,
}

impl SequenceMatrix {
    pub fn max_len(&self) -> usize {
        self.mask.len()
    }

    /// Count of real (unmasked) rows. Padding is always at the tail.
    pub fn len(&self) -> usize {
        self.mask.iter().take_while(|m| **m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.rows[t * self.dim..(t + 1) * self.dim]
    }

    /// Builds a matrix from explicit token rows, padding to `max_len`.
    pub fn from_rows(token_rows: &[Vec<f64>], dim: usize, max_len: usize) -> Self {
        let used = token_rows.len().min(max_len);
        let mut rows = vec![0.0; max_len * dim];
        for (t, r) in token_rows.iter().take(used).enumerate() {
            assert_eq!(r.len(), dim, "row {t} has wrong dimension");
            rows[t * dim..(t + 1) * dim].copy_from_slice(r);
        }
        let mut mask = vec![false; max_len];
        mask[..used].fill(true);
        Self {
            rows,
            mask,
            dim,
            truncated: token_rows.len() > max_len,
        }
    }
}

/// Embeds the first `max_seq_len` tokens and zero-pads the tail.
pub fn prepare(
    seq: &TokenSequence,
    provider: &dyn EmbeddingProvider,
    max_seq_len: usize,
) -> Result<SequenceMatrix, EmbedError> {
    if max_seq_len == 0 {
        return Err(EmbedError::ZeroLength);
    }
    let dim = provider.dim();
    if dim == 0 {
        return Err(EmbedError::ZeroDim);
    }
    let rows: Vec<Vec<f64>> = seq
        .tokens
        .iter()
        .take(max_seq_len)
        .map(|t| provider.lookup(t))
        .collect();
    let mut m = SequenceMatrix::from_rows(&rows, dim, max_seq_len);
    m.truncated = seq.truncated || seq.tokens.len() > max_seq_len;
    Ok(m)
}

/// Tokenizes and prepares in one step.
pub fn embed_text(
    text: &str,
    provider: &dyn EmbeddingProvider,
    max_seq_len: usize,
) -> Result<SequenceMatrix, EmbedError> {
    prepare(&tokenize(text), provider, max_seq_len)
}

/// Mean of the token vectors of `text`; the zero vector for empty text.
pub fn mean_embedding(text: &str, provider: &dyn EmbeddingProvider) -> Vec<f64> {
    let tokens = tokenize(text).tokens;
    let mut acc = vec![0.0; provider.dim()];
    if tokens.is_empty() {
        return acc;
    }
    for t in &tokens {
        for (a, v) in acc.iter_mut().zip(provider.lookup(t)) {
            *a += v;
        }
    }
    let n = tokens.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Column-wise z-scores with the population standard deviation.
/// Constant columns map to zero.
pub fn standardize(vectors: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, EmbedError> {
    if vectors.len() < 2 {
        return Err(EmbedError::TooFewVectors(vectors.len()));
    }
    let dim = vectors[0].len();
    if let Some((index, v)) = vectors.iter().enumerate().find(|(_, v)| v.len() != dim) {
        return Err(EmbedError::DimMismatch {
            index,
            expected: dim,
            found: v.len(),
        });
    }
    let n = vectors.len() as f64;
    let mut mean = vec![0.0; dim];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for v in vectors {
        for ((s, x), m) in var.iter_mut().zip(v).zip(&mean) {
            *s += (x - m) * (x - m);
        }
    }
    let std: Vec<f64> = var.iter().map(|s| (s / n).sqrt()).collect();

    Ok(vectors
        .iter()
        .map(|v| {
            v.iter()
                .zip(&mean)
                .zip(&std)
                .map(|((x, m), s)| {
                    // Relative cutoff: a column is constant if its spread is
                    // at rounding level compared to its magnitude.
                    if *s <= 1e-12 * m.abs().max(1.0) {
                        0.0
                    } else {
                        (x - m) / s
                    }
                })
                .collect()
        })
        .collect())
}
