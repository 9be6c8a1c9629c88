//! TF-IDF vectors over the few-shot pool and exhaustive cosine kNN.
//!
//! Weights are raw term counts times the smoothed idf `ln((1 + N) / (1 + df)) + 1`,
//! and every row is l2-normalized, so cosine similarity reduces to a sparse dot product.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::TaggedSentence;
use crate::error::{Error, Result};

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|piece| !piece.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Sparse vector with strictly increasing term indices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseVector {
    pub entries: Vec<(usize, f64)>,
}

impl SparseVector {
    /// Builds a vector from unsorted `(index, weight)` pairs, summing duplicates and
    /// dropping zeros.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, f64)>) -> Self {
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        for (i, w) in pairs {
            *acc.entry(i).or_insert(0.0) += w;
        }
        SparseVector {
            entries: acc.into_iter().filter(|(_, w)| *w != 0.0).collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, w)| w * w).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn normalized(mut self) -> Self {
        let norm = self.norm();
        if norm > 0.0 {
            for (_, w) in &mut self.entries {
                *w /= norm;
            }
        }
        self
    }

    pub fn dot(&self, other: &SparseVector) -> f64 {
        let (mut i, mut j) = (0, 0);
        let mut sum = 0.0;
        while i < self.entries.len() && j < other.entries.len() {
            let (a, wa) = self.entries[i];
            let (b, wb) = other.entries[j];
            match a.cmp(&b) {
                Ordering::Less => i += 1,
                Ordering::Greater => j += 1,
                Ordering::Equal => {
                    sum += wa * wb;
                    i += 1;
                    j += 1;
                }
            }
        }
        sum
    }
}

/// Cosine similarity of two l2-normalized vectors, clamped to `[0, 1]`.
/// A zero vector has similarity 0 with everything.
pub fn cosine(a: &SparseVector, b: &SparseVector) -> f64 {
    a.dot(b).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfIdfModel {
    /// Term to column index. Columns are assigned in lexicographic term order.
    pub vocabulary: BTreeMap<String, usize>,
    pub doc_freq: Vec<usize>,
    pub n_docs: usize,
    pub idf: Vec<f64>,
    pub doc_matrix: Vec<SparseVector>,
    pub doc_ids: Vec<usize>,
}

impl TfIdfModel {
    pub fn fit(sentences: &[TaggedSentence]) -> Result<Self> {
        let texts: Vec<String> = sentences.iter().map(TaggedSentence::text).collect();
        let ids = sentences.iter().map(|s| s.id).collect();
        Self::fit_texts(&texts, ids)
    }

    pub fn fit_texts(texts: &[String], doc_ids: Vec<usize>) -> Result<Self> {
        if texts.is_empty() {
            return Err(Error::EmptyVocabulary);
        }
        let docs: Vec<Vec<String>> = texts.iter().map(|t| tokenize(t)).collect();
        let mut vocabulary: BTreeMap<String, usize> = docs
            .iter()
            .flatten()
            .map(|term| (term.clone(), 0))
            .collect();
        if vocabulary.is_empty() {
            return Err(Error::EmptyVocabulary);
        }
        for (col, slot) in vocabulary.values_mut().enumerate() {
            *slot = col;
        }

        let n_docs = docs.len();
        let mut doc_freq = vec![0usize; vocabulary.len()];
        let mut counts: Vec<BTreeMap<usize, usize>> = Vec::with_capacity(n_docs);
        for doc in &docs {
            let mut tf: BTreeMap<usize, usize> = BTreeMap::new();
            for term in doc {
                *tf.entry(vocabulary[term]).or_insert(0) += 1;
            }
            for &col in tf.keys() {
                doc_freq[col] += 1;
            }
            counts.push(tf);
        }
        let idf: Vec<f64> = doc_freq
            .iter()
            .map(|&df| ((1.0 + n_docs as f64) / (1.0 + df as f64)).ln() + 1.0)
            .collect();
        let doc_matrix = counts
            .into_iter()
            .map(|tf| {
                SparseVector {
                    entries: tf.into_iter().map(|(col, c)| (col, c as f64 * idf[col])).collect(),
                }
                .normalized()
            })
            .collect();

        Ok(TfIdfModel {
            vocabulary,
            doc_freq,
            n_docs,
            idf,
            doc_matrix,
            doc_ids,
        })
    }

    pub fn n_terms(&self) -> usize {
        self.vocabulary.len()
    }

    /// Vectorizes `text` against the fitted vocabulary. Unknown terms are ignored.
    pub fn transform(&self, text: &str) -> SparseVector {
        SparseVector::from_pairs(
            tokenize(text)
                .iter()
                .filter_map(|t| self.vocabulary.get(t))
                .map(|&col| (col, self.idf[col])),
        )
        .normalized()
    }

    /// Every document scored against `query`, sorted by score descending then index.
    pub fn ranking(&self, query: &SparseVector) -> Vec<(usize, f64)> {
        let mut scored: Vec<(usize, f64)> = self
            .doc_matrix
            .iter()
            .enumerate()
            .map(|(i, row)| (i, cosine(query, row)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored
    }

    /// The `k` most similar documents (exhaustive scan), at most `N`.
    pub fn top_k(&self, query: &SparseVector, k: usize) -> Vec<(usize, f64)> {
        let mut ranked = self.ranking(query);
        ranked.truncate(k);
        ranked
    }

    /// Content hash of the pool texts, used to key the on-disk model cache.
    pub fn pool_hash(sentences: &[TaggedSentence]) -> String {
        let mut hasher = Sha256::new();
        for s in sentences {
            hasher.update(s.text().as_bytes());
            hasher.update([0u8]);
        }
        hex::encode(hasher.finalize())
    }

    pub fn cache_path(dir: &Path, sentences: &[TaggedSentence]) -> PathBuf {
        dir.join(format!("tfidf-{}.json", Self::pool_hash(sentences)))
    }

    /// Loads the cached model for this pool, or fits and stores it.
    pub fn load_or_fit(dir: &Path, sentences: &[TaggedSentence]) -> Result<Self> {
        let path = Self::cache_path(dir, sentences);
        if let Ok(bytes) = std::fs::read(&path) {
            if let Ok(model) = serde_json::from_slice::<TfIdfModel>(&bytes) {
                if model.n_docs == sentences.len() {
                    return Ok(model);
                }
            }
            tracing::warn!(path = %path.display(), "ignoring unreadable tf-idf cache");
        }
        let model = Self::fit(sentences)?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        crate::fsutil::write_atomic(&path, &serde_json::to_vec(&model)?)?;
        Ok(model)
    }
}
