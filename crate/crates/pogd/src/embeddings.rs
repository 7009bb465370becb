//! Word-embedding tables and value-phrase embeddings.
//!
//! The word table is frozen: it either comes from a pretrained vector file
//! or is generated deterministically per token from a seed (so the whole
//! pipeline runs hermetically without external files). Value phrases embed
//! as the L2-normalized mean of their token vectors.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::tokenize;

#[derive(Debug)]
pub enum EmbeddingError {
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    DegenerateValue {
        value: String,
    },
}

impl fmt::Display for EmbeddingError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmbeddingError::Io { path, source } => {
                write!(f, "cannot read {}: {source}", path.display())
            }
            EmbeddingError::Parse {
                path,
                line,
                message,
            } => write!(f, "{}:{line}: {message}", path.display()),
            EmbeddingError::DegenerateValue { value } => {
                write!(f, "value '{value}' has no usable embedding")
            }
        }
    }
}

impl std::error::Error for EmbeddingError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            EmbeddingError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

/// Frozen token-to-vector table.
#[derive(Debug, Clone)]
pub enum WordTable {
    Pretrained {
        dim: usize,
        vocab: HashMap<String, usize>,
        /// Row-major `vocab.len() × dim` storage.
        vectors: Vec<f32>,
        oov: Vec<f32>,
    },
    /// Deterministic per-token random vectors derived from `seed`.
    Random { dim: usize, seed: u64 },
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl WordTable {
    pub fn dim(&self) -> usize {
        match self {
            WordTable::Pretrained { dim, .. } => *dim,
            WordTable::Random { dim, .. } => *dim,
        }
    }

    /// Parse a `token f1 … fD` text file. The out-of-vocabulary vector is
    /// drawn once from Uniform(−0.01, 0.01) using `seed`.
    pub fn load_pretrained(path: &Path, dim: usize, seed: u64) -> Result<Self, EmbeddingError> {
        let text = fs::read_to_string(path).map_err(|source| EmbeddingError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut vocab = HashMap::new();
        let mut vectors = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let token = parts
                .next()
                .expect("non-empty line has a first field")
                .to_string();
            let floats: Vec<f32> = parts
                .map(|p| {
                    p.parse::<f32>().map_err(|e| EmbeddingError::Parse {
                        path: path.to_path_buf(),
                        line: i + 1,
                        message: format!("bad float '{p}': {e}"),
                    })
                })
                .collect::<Result<_, _>>()?;
            if floats.len() != dim {
                return Err(EmbeddingError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("expected {dim} floats, found {}", floats.len()),
                });
            }
            vocab.insert(token, vocab.len());
            vectors.extend_from_slice(&floats);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Uniform::new_inclusive(-0.01f32, 0.01);
        let oov = (0..dim).map(|_| unit.sample(&mut rng)).collect();
        Ok(WordTable::Pretrained {
            dim,
            vocab,
            vectors,
            oov,
        })
    }

    pub fn random(dim: usize, seed: u64) -> Self {
        WordTable::Random { dim, seed }
    }

    /// The vector for one token. Pretrained tables fall back to the OOV
    /// vector; random tables derive the vector from the token's hash, so
    /// every distinct token gets its own reproducible direction.
    pub fn embed_token(&self, token: &str) -> Vec<f32> {
        match self {
            WordTable::Pretrained {
                dim,
                vocab,
                vectors,
                oov,
            } => match vocab.get(token) {
                Some(row) => vectors[row * dim..(row + 1) * dim].to_vec(),
                None => oov.clone(),
            },
            WordTable::Random { dim, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(token.as_bytes()));
                let bound = (3.0 / *dim as f32).sqrt();
                let unit = Uniform::new_inclusive(-bound, bound);
                (0..*dim).map(|_| unit.sample(&mut rng)).collect()
            }
        }
    }

    /// One row per token.
    pub fn embed_tokens(&self, tokens: &[String]) -> Vec<Vec<f32>> {
        tokens.iter().map(|t| self.embed_token(t)).collect()
    }

    /// L2-normalized mean of the value's token vectors.
    pub fn value_embedding(&self, value: &str) -> Result<Vec<f32>, EmbeddingError> {
        let tokens = tokenize(value);
        if tokens.is_empty() {
            return Err(EmbeddingError::DegenerateValue {
                value: value.to_string(),
            });
        }
        let mut mean = vec![0.0f32; self.dim()];
        for t in &tokens {
            for (m, v) in mean.iter_mut().zip(self.embed_token(t)) {
                *m += v;
            }
        }
        let n = tokens.len() as f32;
        for m in &mut mean {
            *m /= n;
        }
        let norm = mean.iter().map(|v| v * v).sum::<f32>().sqrt();
        if norm == 0.0 {
            return Err(EmbeddingError::DegenerateValue {
                value: value.to_string(),
            });
        }
        for m in &mut mean {
            *m /= norm;
        }
        Ok(mean)
    }
}
