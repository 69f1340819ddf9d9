//! Core data types shared by every stage of the pipeline.
//!
//! Nothing here performs I/O or inference. All types are plain data and are
//! immutable once built, so they can be shared freely across threads.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A catalog product. Images are carried as references, never as bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Product {
    pub product_id: String,
    pub title: String,
    #[serde(default)]
    pub brand: String,
    #[serde(default)]
    pub category: Vec<String>,
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

impl Product {
    pub fn validate(&self) -> Result<()> {
        if self.product_id.is_empty() {
            return Err(Error::InvalidInput("product_id must be non-empty".into()));
        }
        if matches!(&self.summary, Some(s) if s.trim().is_empty()) {
            return Err(Error::InvalidInput(format!(
                "product {} has an empty summary",
                self.product_id
            )));
        }
        Ok(())
    }

    /// Description to show downstream: the refined summary when requested and
    /// available, otherwise the original text.
    pub fn description_for(&self, use_summary: bool) -> &str {
        match (&self.summary, use_summary) {
            (Some(s), true) => s,
            _ => &self.description,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub text: String,
}

impl Query {
    pub fn new(query_id: impl Into<String>, text: impl Into<String>) -> Result<Self> {
        let q = Query {
            query_id: query_id.into(),
            text: text.into(),
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if self.text.is_empty() {
            return Err(Error::InvalidInput(format!(
                "query {} has empty text",
                self.query_id
            )));
        }
        if self.text != self.text.trim() || self.text.contains("  ") {
            return Err(Error::InvalidInput(format!(
                "query {} text is not normalized: {:?}",
                self.query_id, self.text
            )));
        }
        Ok(())
    }
}

/// Collapse whitespace and lowercase free-form query text.
pub fn normalize_query_text(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PurchaseEvent {
    pub product_id: String,
    pub timestamp: i64,
}

/// A user's purchases in chronological order. Repeat purchases are kept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PurchaseHistory {
    pub user_id: String,
    pub events: Vec<PurchaseEvent>,
}

impl PurchaseHistory {
    /// Build a history, stably sorting events by timestamp. Events sharing a
    /// timestamp keep their input order.
    pub fn new(user_id: impl Into<String>, mut events: Vec<PurchaseEvent>) -> Self {
        events.sort_by_key(|e| e.timestamp);
        PurchaseHistory {
            user_id: user_id.into(),
            events,
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Events strictly earlier than `timestamp`, in their original order.
    pub fn before(&self, timestamp: i64) -> &[PurchaseEvent] {
        let end = self.events.partition_point(|e| e.timestamp < timestamp);
        &self.events[..end]
    }

    pub fn is_chronological(&self) -> bool {
        self.events
            .windows(2)
            .all(|w| w[0].timestamp <= w[1].timestamp)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchLog {
    pub log_id: String,
    pub user_id: String,
    pub query_id: String,
    pub target_product_id: String,
    pub timestamp: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankSource {
    BaseRetriever,
    Reranker,
}

impl fmt::Display for RankSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RankSource::BaseRetriever => "base_retriever",
            RankSource::Reranker => "reranker",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub product_id: String,
    pub score: f64,
}

/// An ordered candidate list, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub entries: Vec<RankedEntry>,
    pub source: RankSource,
}

impl RankedList {
    /// Wrap entries that are already in rank order. Scores must be
    /// non-increasing and ids unique; position acts as the tie-break key.
    pub fn from_ordered(entries: Vec<RankedEntry>, source: RankSource) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if !e.score.is_finite() {
                return Err(Error::NonFinite("ranking score"));
            }
            if !seen.insert(e.product_id.as_str()) {
                return Err(Error::InvalidInput(format!(
                    "duplicate product {} in ranking",
                    e.product_id
                )));
            }
        }
        if let Some(w) = entries.windows(2).find(|w| w[0].score < w[1].score) {
            return Err(Error::InvalidInput(format!(
                "ranking not sorted by score: {} ({}) before {} ({})",
                w[0].product_id, w[0].score, w[1].product_id, w[1].score
            )));
        }
        Ok(RankedList { entries, source })
    }

    /// Sort `(product_id, score, tie_key)` triples by score descending, then
    /// tie key ascending.
    pub fn from_scores(mut scored: Vec<(String, f64, usize)>, source: RankSource) -> Result<Self> {
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.2.cmp(&b.2)));
        let entries = scored
            .into_iter()
            .map(|(product_id, score, _)| RankedEntry { product_id, score })
            .collect();
        Self::from_ordered(entries, source)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.product_id.as_str()).collect()
    }

    /// 1-based rank of `product_id`, if present.
    pub fn rank_of(&self, product_id: &str) -> Option<usize> {
        self.entries
            .iter()
            .position(|e| e.product_id == product_id)
            .map(|i| i + 1)
    }
}

/// Scores for the "yes" and "no" decision tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionLogits {
    pub yes: f64,
    pub no: f64,
}

impl DecisionLogits {
    pub fn new(yes: f64, no: f64) -> Result<Self> {
        if !yes.is_finite() || !no.is_finite() {
            return Err(Error::NonFinite("decision logits"));
        }
        Ok(DecisionLogits { yes, no })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub backend_id: String,
    pub stage_tag: String,
}

impl EmbeddingVector {
    pub fn new(
        values: Vec<f64>,
        backend_id: impl Into<String>,
        stage_tag: impl Into<String>,
    ) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("embedding must have dim > 0".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding"));
        }
        if values.iter().all(|&v| v == 0.0) {
            return Err(Error::ZeroNorm);
        }
        Ok(EmbeddingVector {
            values,
            backend_id: backend_id.into(),
            stage_tag: stage_tag.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}
