//! Vocabulary and pre-trained word vectors.

use std::collections::HashMap;
use std::io::BufRead;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::Tensor;

pub const UNK: &str = "<unk>";
pub const UNK_INDEX: usize = 0;
/// Half-width of the uniform range for rows not found in the vector file.
pub const INIT_RANGE: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EmbedError {
    #[error("line {line}: expected {expected} components, found {found}")]
    DimensionMismatch { line: usize, expected: usize, found: usize },
    #[error("line {line}: non-numeric component {value:?}")]
    NonNumeric { line: usize, value: String },
    #[error("vocabulary must start with {UNK}")]
    MissingUnk,
    #[error("duplicate vocabulary entry {0:?}")]
    DuplicateToken(String),
    #[error("word vector size must be positive")]
    ZeroDimension,
    #[error("i/o error: {0}")]
    Io(String),
}

/// Dense token index with `<unk>` at 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        Vocabulary { tokens: vec![UNK.to_string()], index: HashMap::from([(UNK.to_string(), UNK_INDEX)]) }
    }

    /// Vocabulary in first-appearance order.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(tokens: I) -> Self {
        let mut v = Vocabulary::new();
        for t in tokens {
            v.add(t);
        }
        v
    }

    /// Rebuilds from a stored token list, which must start with `<unk>`.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, EmbedError> {
        if tokens.first().map(String::as_str) != Some(UNK) {
            return Err(EmbedError::MissingUnk);
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(EmbedError::DuplicateToken(t.clone()));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Index of `token`, or [`UNK_INDEX`].
    pub fn index_of(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK_INDEX)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// SHA-256 of the newline-joined token list.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

/// `V x d` word-vector matrix aligned with a [`Vocabulary`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    matrix: Tensor,
    pretrained_rows: usize,
}

impl EmbeddingTable {
    /// Every row uniform in `[-0.05, 0.05]`.
    pub fn random(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EmbeddingTable { matrix: Tensor::uniform(vocab_size, dim, INIT_RANGE, &mut rng), pretrained_rows: 0 }
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    /// Rows copied from a vector file.
    pub fn pretrained_rows(&self) -> usize {
        self.pretrained_rows
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn into_matrix(self) -> Tensor {
        self.matrix
    }

    pub fn row(&self, index: usize) -> &[f64] {
        self.matrix.row(index)
    }
}

/// Reads `token v1 .. vd` lines. An optional leading `count dim` header is
/// skipped. Vocabulary tokens missing from the file keep their seeded random
/// row; file tokens outside the vocabulary are ignored.
pub fn load_embeddings<R: BufRead>(
    reader: R,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingTable, EmbedError> {
    if dim == 0 {
        return Err(EmbedError::ZeroDimension);
    }
    let mut table = EmbeddingTable::random(vocab.len(), dim, seed);
    let mut seen_content = false;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| EmbedError::Io(e.to_string()))?;
        let line_no = i + 1;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: Vec<&str> = fields.collect();
        if !seen_content {
            seen_content = true;
            if values.len() == 1 && token.parse::<usize>().is_ok() {
                if let Ok(header_dim) = values[0].parse::<usize>() {
                    if header_dim != dim {
                        return Err(EmbedError::DimensionMismatch { line: line_no, expected: dim, found: header_dim });
                    }
                    continue;
                }
            }
        }
        if values.len() != dim {
            return Err(EmbedError::DimensionMismatch { line: line_no, expected: dim, found: values.len() });
        }
        let mut row = Vec::with_capacity(dim);
        for v in values {
            let x: f64 = v.parse().map_err(|_| EmbedError::NonNumeric { line: line_no, value: v.to_string() })?;
            if !x.is_finite() {
                return Err(EmbedError::NonNumeric { line: line_no, value: v.to_string() });
            }
            row.push(x);
        }
        if let Some(idx) = vocab.get(token) {
            table.matrix.row_mut(idx).copy_from_slice(&row);
            table.pretrained_rows += 1;
        }
    }
    Ok(table)
}

/// Row for `token`, falling back to `<unk>`.
pub fn lookup<'a>(vocab: &Vocabulary, table: &'a EmbeddingTable, token: &str) -> &'a [f64] {
    table.row(vocab.index_of(token))
}
