use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::cosine_similarity;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KbEntry {
    pub inserted_at_frame: usize,
    pub vector: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InsertOutcome {
    pub inserted: bool,
    pub evicted: Option<KbEntry>,
}

/// Bounded FIFO store of text features, gated on cosine novelty.
#[derive(Clone, Debug)]
pub struct KnowledgeBase {
    capacity: usize,
    lambda: f64,
    entries: VecDeque<KbEntry>,
}

impl KnowledgeBase {
    pub fn new(capacity: usize, lambda: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("knowledge base capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            lambda,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &KbEntry> {
        self.entries.iter()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Inserts `feature` unless some stored entry has cosine similarity `≥ λ`
    /// with it; a full base evicts its oldest entry first.
    pub fn insert(&mut self, feature: &[f64], frame: usize) -> Result<InsertOutcome> {
        if feature.iter().all(|&v| v == 0.0) {
            return Err(Error::DegenerateVector("kb_insert"));
        }
        for e in &self.entries {
            if cosine_similarity(&e.vector, feature)? >= self.lambda {
                return Ok(InsertOutcome {
                    inserted: false,
                    evicted: None,
                });
            }
        }
        let evicted = if self.entries.len() == self.capacity {
            self.entries.pop_front()
        } else {
            None
        };
        self.entries.push_back(KbEntry {
            inserted_at_frame: frame,
            vector: feature.to_vec(),
        });
        Ok(InsertOutcome { inserted: true, evicted })
    }

    /// JSON array of `{inserted_at_frame, vector}`, oldest first.
    pub fn dump_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.entries)?)
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RetrievalResult {
    pub features: Vec<Vec<f64>>,
    /// Descending.
    pub similarities: Vec<f64>,
    /// Positions in the base, oldest = 0.
    pub positions: Vec<usize>,
}

impl RetrievalResult {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// The `min(k, |base|)` entries most cosine-similar to `query`; equal
/// similarities put the newer entry first.
pub fn kb_retrieve(kb: &KnowledgeBase, query: &[f64], k: usize) -> Result<RetrievalResult> {
    if k == 0 {
        return Err(Error::arg("retrieval count k must be at least 1"));
    }
    let mut scored = kb
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| Ok((i, cosine_similarity(query, &e.vector)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(b.0.cmp(&a.0)));
    scored.truncate(k);
    Ok(RetrievalResult {
        features: scored.iter().map(|&(i, _)| kb.entries[i].vector.clone()).collect(),
        similarities: scored.iter().map(|&(_, s)| s).collect(),
        positions: scored.iter().map(|&(i, _)| i).collect(),
    })
}
