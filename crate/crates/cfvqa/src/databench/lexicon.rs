//! Closed embedding lexicon: unit vectors per token plus a noun flag.
//!
//! Vectors are built from orthonormal axes so similarities are controlled
//! exactly: categories in the same group share a group axis (moderate
//! cosine), aliases sit close to their category (cosine >= 0.9), and
//! everything else is pairwise orthogonal.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed lexicon file: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LexEntry {
    vector: Vec<f64>,
    noun: bool,
}

/// Token-to-vector map with noun flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingLexicon {
    dim: usize,
    tokens: BTreeMap<String, LexEntry>,
}

impl EmbeddingLexicon {
    pub fn from_entries<I, S>(dim: usize, entries: I) -> Self
    where
        I: IntoIterator<Item = (S, Vec<f64>, bool)>,
        S: Into<String>,
    {
        let tokens = entries
            .into_iter()
            .map(|(t, vector, noun)| {
                debug_assert_eq!(vector.len(), dim);
                (t.into(), LexEntry { vector, noun })
            })
            .collect();
        Self { dim, tokens }
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.tokens.contains_key(token)
    }

    pub fn is_noun(&self, token: &str) -> bool {
        self.tokens.get(token).map(|e| e.noun).unwrap_or(false)
    }

    pub fn vector(&self, token: &str) -> Option<&[f64]> {
        self.tokens.get(token).map(|e| e.vector.as_slice())
    }

    pub fn tokens(&self) -> impl Iterator<Item = (&str, bool)> {
        self.tokens.iter().map(|(t, e)| (t.as_str(), e.noun))
    }

    /// Cosine similarity between two tokens, if both are present.
    pub fn cosine(&self, a: &str, b: &str) -> Option<f64> {
        let va = self.vector(a)?;
        let vb = self.vector(b)?;
        let dot: f64 = va.iter().zip(vb).map(|(x, y)| x * y).sum();
        let na: f64 = va.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = vb.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Some(0.0);
        }
        Some((dot / (na * nb)).clamp(-1.0, 1.0))
    }

    pub fn save(&self, path: &Path) -> Result<(), LexiconError> {
        let wrap = |source| LexiconError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(wrap)?);
        serde_json::to_writer(&mut out, self).map_err(|e| wrap(std::io::Error::other(e)))?;
        out.write_all(b"\n").map_err(wrap)?;
        out.flush().map_err(wrap)
    }

    pub fn load(path: &Path) -> Result<Self, LexiconError> {
        let file = File::open(path).map_err(|source| LexiconError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let lex: EmbeddingLexicon = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| LexiconError::Parse(e.to_string()))?;
        for (token, entry) in &lex.tokens {
            if entry.vector.len() != lex.dim {
                return Err(LexiconError::Parse(format!(
                    "token {token:?} has dimension {} instead of {}",
                    entry.vector.len(),
                    lex.dim
                )));
            }
        }
        Ok(lex)
    }
}
