//! Unit-sphere embeddings, cosine scoring and the vocabulary container.
//!
//! A region is classified by the cosine similarity between its (normalized)
//! feature and each text embedding, mapped to a probability by
//! `logistic(scale * cos + bias)`. Wildcards live outside the category list
//! so that appending categories never re-indexes them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::RegionFeature;

/// Unit-norm vector stored in single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    /// `v / |v|`, computed in double precision.
    pub fn normalize(v: &[f64]) -> Result<Self> {
        let unit = normalize_f64(v)?;
        Ok(Embedding(unit.into_iter().map(|x| x as f32).collect()))
    }

    pub fn normalize_f32(v: &[f32]) -> Result<Self> {
        let wide: Vec<f64> = v.iter().map(|&x| x as f64).collect();
        Embedding::normalize(&wide)
    }

    /// Wraps stored values that are already unit-norm (file payloads).
    pub fn from_unit_f32(values: Vec<f32>) -> Result<Self> {
        let norm = values.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-5 {
            return Err(Error::DegenerateEmbedding);
        }
        Ok(Embedding(values))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&x| x as f64).collect()
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

pub fn normalize_f64(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || norm <= 0.0 {
        return Err(Error::DegenerateEmbedding);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity of two unit embeddings (their dot product).
pub fn cosine(a: &Embedding, b: &Embedding) -> f64 {
    a.0.iter().zip(&b.0).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Affine map from cosine similarity to a logit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreParams {
    pub scale: f64,
    pub bias: f64,
}

impl Default for ScoreParams {
    fn default() -> Self {
        ScoreParams { scale: 10.0, bias: -5.0 }
    }
}

impl ScoreParams {
    pub fn validate(&self) -> Result<()> {
        if self.scale.is_nan() || self.scale <= 0.0 || !self.bias.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "score scale must be positive and bias finite, got scale={} bias={}",
                self.scale, self.bias
            )));
        }
        Ok(())
    }

    pub fn logit(&self, sim: f64) -> f64 {
        self.scale * sim + self.bias
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn score(sim: f64, p: &ScoreParams) -> f64 {
    logistic(p.logit(sim))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CategoryStatus {
    /// Learned in an earlier task; never updated again.
    PreviouslyKnown,
    /// Introduced in the current task; trainable.
    CurrentKnown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryEntry {
    pub id: usize,
    pub name: String,
    pub embedding: Embedding,
    pub status: CategoryStatus,
}

/// Ordered category embeddings plus the two wildcard slots.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Vocabulary {
    entries: Vec<CategoryEntry>,
    pub wildcard_obj: Option<Embedding>,
    pub wildcard_unk: Option<Embedding>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Vocabulary::default()
    }

    /// Appends a category; its id is its position.
    pub fn push(&mut self, name: &str, embedding: Embedding, status: CategoryStatus) -> Result<usize> {
        if name.trim().is_empty() {
            return Err(Error::EmptyName);
        }
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::DuplicateName(name.to_string()));
        }
        if let Some(d) = self.dim() {
            if embedding.dim() != d {
                return Err(Error::DimensionMismatch { expected: d, actual: embedding.dim() });
            }
        }
        let id = self.entries.len();
        self.entries.push(CategoryEntry { id, name: name.to_string(), embedding, status });
        Ok(id)
    }

    pub fn entries(&self) -> &[CategoryEntry] {
        &self.entries
    }

    pub fn entry(&self, id: usize) -> Option<&CategoryEntry> {
        self.entries.get(id)
    }

    pub(crate) fn entry_mut(&mut self, id: usize) -> Option<&mut CategoryEntry> {
        self.entries.get_mut(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries
            .first()
            .map(|e| e.embedding.dim())
            .or_else(|| self.wildcard_obj.as_ref().map(Embedding::dim))
            .or_else(|| self.wildcard_unk.as_ref().map(Embedding::dim))
    }

    pub fn ids_with_status(&self, status: CategoryStatus) -> Vec<usize> {
        self.entries.iter().filter(|e| e.status == status).map(|e| e.id).collect()
    }

    /// Copy holding only the given categories (ids renumbered densely) and no wildcards.
    pub fn restricted_to(&self, ids: &[usize]) -> Vocabulary {
        let mut out = Vocabulary::new();
        for &id in ids {
            if let Some(e) = self.entries.get(id) {
                out.entries.push(CategoryEntry { id: out.entries.len(), ..e.clone() });
            }
        }
        out
    }
}

/// Scores of one region against every category, then the object and unknown
/// wildcards when present (in that order).
pub fn classify(f: &RegionFeature, vocab: &Vocabulary, p: &ScoreParams) -> Result<Vec<f64>> {
    if vocab.is_empty() && vocab.wildcard_obj.is_none() && vocab.wildcard_unk.is_none() {
        return Err(Error::EmptyVocabulary);
    }
    let unit = unit_f64(f.as_slice())?;
    let expected = vocab.dim().unwrap_or(unit.len());
    if unit.len() != expected {
        return Err(Error::DimensionMismatch { expected, actual: unit.len() });
    }
    let sims = vocab
        .entries
        .iter()
        .map(|e| &e.embedding)
        .chain(vocab.wildcard_obj.as_ref())
        .chain(vocab.wildcard_unk.as_ref())
        .map(|e| score(dot(&unit, &e.to_f64()), p))
        .collect();
    Ok(sims)
}

/// Double-precision unit vector of a stored feature.
pub(crate) fn unit_f64(v: &[f32]) -> Result<Vec<f64>> {
    let wide: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    normalize_f64(&wide)
}
