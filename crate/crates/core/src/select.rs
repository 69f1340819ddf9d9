//! Query-aware history selection.
//!
//! Products and queries are embedded once by the stage-1 model and kept in an
//! [`EmbeddingStore`]. At selection time a user's history is filtered in two
//! steps: the `2 * k` purchases most similar to the query, then the `k` of
//! those most similar to the candidate. The survivors are returned in
//! purchase order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::domain::{EmbeddingVector, Product, PurchaseEvent};
use crate::error::{Error, Result};
use crate::ingest::Dataset;
use crate::util;

pub const CHECKPOINT_EVERY: usize = 1000;

pub fn product_key(product_id: &str) -> String {
    format!("p:{product_id}")
}

pub fn query_key(query_id: &str) -> String {
    format!("q:{query_id}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreHeader {
    pub backend_id: String,
    pub stage_tag: String,
    pub dim: usize,
    pub count: usize,
}

#[derive(Serialize, Deserialize)]
struct StoreLine {
    id: String,
    vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    pub backend_id: String,
    pub stage_tag: String,
    pub dim: usize,
    entries: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingStore {
    pub fn new(backend_id: impl Into<String>, stage_tag: impl Into<String>, dim: usize) -> Self {
        EmbeddingStore {
            backend_id: backend_id.into(),
            stage_tag: stage_tag.into(),
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, v: EmbeddingVector) -> Result<()> {
        if v.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: v.dim(),
            });
        }
        if v.backend_id != self.backend_id || v.stage_tag != self.stage_tag {
            return Err(Error::InvalidInput(format!(
                "embedding from {}/{} does not belong in store {}/{}",
                v.backend_id, v.stage_tag, self.backend_id, self.stage_tag
            )));
        }
        self.entries.insert(id.into(), v.values);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get(&self, id: &str) -> Result<&[f64]> {
        self.entries
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingEmbedding(id.to_string()))
    }

    pub fn vector(&self, id: &str) -> Result<EmbeddingVector> {
        EmbeddingVector::new(
            self.get(id)?.to_vec(),
            self.backend_id.clone(),
            self.stage_tag.clone(),
        )
    }

    /// Mutable access for tests and tooling that rescale stored vectors.
    pub fn get_mut(&mut self, id: &str) -> Option<&mut Vec<f64>> {
        self.entries.get_mut(id)
    }

    pub fn header(&self) -> StoreHeader {
        StoreHeader {
            backend_id: self.backend_id.clone(),
            stage_tag: self.stage_tag.clone(),
            dim: self.dim,
            count: self.entries.len(),
        }
    }

    /// Header line, then one `{id, vector}` line per entry in id order.
    /// Floats carry 9 significant digits.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_string(&self.header()).expect("header serializes");
        out.push('\n');
        for (id, v) in &self.entries {
            out.push_str("{\"id\":");
            out.push_str(&serde_json::to_string(id).expect("string serializes"));
            out.push_str(",\"vector\":[");
            for (i, x) in v.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{x:.8e}");
            }
            out.push_str("]}\n");
        }
        out.into_bytes()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        util::write_atomic(path, |w| w.write_all(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::parse(path, 1, "missing header"))?
            .map_err(|e| Error::io(path, e))?;
        let header: StoreHeader =
            serde_json::from_str(&header_line).map_err(|e| Error::parse(path, 1, e))?;
        let mut store = EmbeddingStore::new(header.backend_id, header.stage_tag, header.dim);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: StoreLine =
                serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 2, e))?;
            let v = EmbeddingVector::new(
                rec.vector,
                store.backend_id.clone(),
                store.stage_tag.clone(),
            )
            .map_err(|e| Error::parse(path, i + 2, e))?;
            store
                .insert(rec.id, v)
                .map_err(|e| Error::parse(path, i + 2, e))?;
        }
        if store.len() != header.count {
            return Err(Error::parse(
                path,
                1,
                format!("header count {} but {} entries", header.count, store.len()),
            ));
        }
        Ok(store)
    }
}

/// Cosine similarity of two raw vectors.
pub fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    cosine_slices(&a.values, &b.values)
}

/// Text embedded for a product: title, brand, category and description.
pub fn product_embedding_text(p: &Product, use_summary: bool) -> String {
    let mut parts = vec![p.title.trim().to_string()];
    if !p.brand.trim().is_empty() {
        parts.push(p.brand.trim().to_string());
    }
    if !p.category.is_empty() {
        parts.push(p.category.join(" > "));
    }
    let desc = p.description_for(use_summary).trim();
    if !desc.is_empty() {
        parts.push(desc.to_string());
    }
    let text = parts
        .into_iter()
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("\n");
    if text.is_empty() {
        p.product_id.clone()
    } else {
        text
    }
}

/// Embed every product and query. With a checkpoint path, progress is saved
/// every [`CHECKPOINT_EVERY`] entries and a previous partial run is resumed.
pub fn build_embedding_store(
    ds: &Dataset,
    backend: &dyn Backend,
    use_summary: bool,
    checkpoint: Option<&Path>,
) -> Result<EmbeddingStore> {
    let desc = backend.descriptor();
    let mut store = EmbeddingStore::new(&desc.backend_id, &desc.stage_tag, desc.embedding_dim);
    if let Some(cp) = checkpoint.filter(|p| p.exists()) {
        let partial = EmbeddingStore::load(cp)?;
        if partial.backend_id == store.backend_id
            && partial.stage_tag == store.stage_tag
            && partial.dim == store.dim
        {
            tracing::info!(
                entries = partial.len(),
                "resuming embedding store from checkpoint"
            );
            store = partial;
        }
    }

    enum Item<'a> {
        Product(&'a Product),
        Query(&'a str),
    }
    let todo: Vec<(String, Item)> = ds
        .catalog
        .values()
        .map(|p| (product_key(&p.product_id), Item::Product(p)))
        .chain(
            ds.queries
                .values()
                .map(|q| (query_key(&q.query_id), Item::Query(&q.text))),
        )
        .filter(|(k, _)| !store.contains(k))
        .collect();

    for chunk in todo.chunks(CHECKPOINT_EVERY) {
        let results: Vec<Result<(String, EmbeddingVector)>> = chunk
            .par_iter()
            .map(|(key, item)| {
                let v = match item {
                    Item::Product(p) => backend.embed(
                        &product_embedding_text(p, use_summary),
                        p.image_ref.as_deref(),
                    )?,
                    Item::Query(text) => backend.embed(text, None)?,
                };
                Ok((key.clone(), v))
            })
            .collect();
        let mut failed = None;
        for r in results {
            match r {
                Ok((k, v)) => store.insert(k, v)?,
                Err(e) => {
                    failed.get_or_insert(e);
                }
            }
        }
        if let Some(cp) = checkpoint {
            store.save(cp)?;
        }
        if let Some(e) = failed {
            return Err(e);
        }
    }
    Ok(store)
}

/// The two-step cascade over precomputed similarities.
///
/// `sims[i]` holds `(similarity to query, similarity to candidate)` for the
/// i-th purchase in chronological order. Step one keeps the `min(2k, n)`
/// purchases closest to the query, step two keeps the `min(k, ..)` of those
/// closest to the candidate. Equal similarities go to the more recent
/// purchase. Returns positions in ascending order.
pub fn cascade(sims: &[(f64, f64)], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..sims.len()).collect();
    idx.sort_by(|&a, &b| sims[b].0.total_cmp(&sims[a].0).then(b.cmp(&a)));
    idx.truncate(2 * k);
    idx.sort_by(|&a, &b| sims[b].1.total_cmp(&sims[a].1).then(b.cmp(&a)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Select up to `k` purchases from `history` for one candidate. Output is
/// chronological and may repeat a product bought more than once.
pub fn select_history_vectors(
    history: &[PurchaseEvent],
    query_vec: &[f64],
    candidate_vec: &[f64],
    candidate_id: &str,
    store: &EmbeddingStore,
    k: usize,
    exclude_candidate: bool,
) -> Result<Vec<String>> {
    let pool: Vec<&PurchaseEvent> = history
        .iter()
        .filter(|e| !(exclude_candidate && e.product_id == candidate_id))
        .collect();
    let sims = pool
        .iter()
        .map(|e| {
            let v = store.get(&product_key(&e.product_id))?;
            Ok((
                cosine_slices(v, query_vec)?,
                cosine_slices(v, candidate_vec)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(cascade(&sims, k)
        .into_iter()
        .map(|i| pool[i].product_id.clone())
        .collect())
}

/// [`select_history_vectors`] with the query and candidate looked up in the
/// store.
pub fn select_history(
    history: &[PurchaseEvent],
    query_id: &str,
    candidate_id: &str,
    store: &EmbeddingStore,
    k: usize,
    exclude_candidate: bool,
) -> Result<Vec<String>> {
    let q = store.get(&query_key(query_id))?;
    let c = store.get(&product_key(candidate_id))?;
    select_history_vectors(history, q, c, candidate_id, store, k, exclude_candidate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockBackend;

    fn ev(id: &str, ts: i64) -> PurchaseEvent {
        PurchaseEvent {
            product_id: id.into(),
            timestamp: ts,
        }
    }

    fn vec(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec(), "t", "stage1").unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&vec(&[1.0, 0.0]), &vec(&[0.0, 1.0])).unwrap(), 0.0);
        assert!(
            (cosine(&vec(&[1.0, 2.0, 3.0]), &vec(&[1.0, 2.0, 3.0])).unwrap() - 1.0).abs() < 1e-15
        );
        assert!(
            (cosine(&vec(&[1.0, 0.0, 1.0]), &vec(&[0.0, 1.0, 1.0])).unwrap() - 0.5).abs() < 1e-15
        );
        assert!(matches!(
            cosine_slices(&[1.0], &[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            cosine_slices(&[0.0, 0.0], &[1.0, 2.0]),
            Err(Error::ZeroNorm)
        ));
    }

    /// Store in 2-d where a history item's angle sets both similarities.
    /// Query along x; candidate along y.
    fn planar_store(items: &[(&str, f64, f64)]) -> EmbeddingStore {
        let mut s = EmbeddingStore::new("t", "stage1", 3);
        s.insert("q:q", vec(&[1.0, 0.0, 0.0])).unwrap();
        s.insert("p:cand", vec(&[0.0, 1.0, 0.0])).unwrap();
        for (id, rq, rp) in items {
            // Vector with cos to x = rq, cos to y = rp, padded on z.
            let z = (1.0 - rq * rq - rp * rp).max(0.0).sqrt();
            s.insert(product_key(id), vec(&[*rq, *rp, z])).unwrap();
        }
        s
    }

    #[test]
    fn cascade_worked_example() {
        let r_pq = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4];
        // Only the top four by r_pq matter for the second step; p5 and p6
        // get high candidate similarity to show step one removed them.
        let r_pp = [0.1, 0.95, 0.2, 0.9, 0.99, 0.99];
        let sims: Vec<_> = r_pq.into_iter().zip(r_pp).collect();
        assert_eq!(cascade(&sims, 2), [1, 3]);
    }

    #[test]
    fn cascade_through_store() {
        let store = planar_store(&[
            ("p1", 0.9, 0.1),
            ("p2", 0.8, 0.5),
            ("p3", 0.7, 0.2),
            ("p4", 0.6, 0.75),
            ("p5", 0.5, 0.8),
            ("p6", 0.4, 0.9),
        ]);
        let h: Vec<_> = (1..=6).map(|i| ev(&format!("p{i}"), i)).collect();
        let out = select_history(&h, "q", "cand", &store, 2, false).unwrap();
        assert_eq!(out, ["p2", "p4"]);
    }

    #[test]
    fn clamps_to_history() {
        let store = planar_store(&[("p1", 0.3, 0.3)]);
        let out = select_history(&[ev("p1", 1)], "q", "cand", &store, 3, false).unwrap();
        assert_eq!(out, ["p1"]);
        assert!(select_history(&[], "q", "cand", &store, 3, false)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn equal_query_similarity_prefers_recent() {
        // All equal r_pq; stage one must keep the 4 most recent (p3..p6).
        // r_pp favours p1 and p2, which must therefore be gone.
        let store = planar_store(&[
            ("p1", 0.5, 0.8),
            ("p2", 0.5, 0.7),
            ("p3", 0.5, 0.1),
            ("p4", 0.5, 0.2),
            ("p5", 0.5, 0.3),
            ("p6", 0.5, 0.0),
        ]);
        let h: Vec<_> = (1..=6).map(|i| ev(&format!("p{i}"), i)).collect();
        let out = select_history(&h, "q", "cand", &store, 2, false).unwrap();
        assert_eq!(out, ["p4", "p5"]);
    }

    #[test]
    fn candidate_exclusion_flag() {
        let mut store = planar_store(&[("p1", 0.2, 0.2)]);
        store.insert("p:cand2", vec(&[0.0, 1.0, 0.0])).unwrap();
        let h = [ev("p1", 1), ev("cand", 2)];
        store.insert("p:cand", vec(&[0.0, 1.0, 0.0])).unwrap();
        let with = select_history(&h, "q", "cand", &store, 2, false).unwrap();
        assert_eq!(with, ["p1", "cand"]);
        let without = select_history(&h, "q", "cand", &store, 2, true).unwrap();
        assert_eq!(without, ["p1"]);
    }

    #[test]
    fn duplicates_compete_independently() {
        let store = planar_store(&[("p1", 0.9, 0.9), ("p2", 0.1, 0.1)]);
        let h = [ev("p1", 1), ev("p2", 2), ev("p1", 3)];
        let out = select_history(&h, "q", "cand", &store, 2, false).unwrap();
        assert_eq!(out, ["p1", "p1"]);
    }

    #[test]
    fn missing_embedding_is_explicit() {
        let store = planar_store(&[]);
        let err = select_history(&[ev("ghost", 1)], "q", "cand", &store, 2, false).unwrap_err();
        assert!(matches!(err, Error::MissingEmbedding(ref id) if id == "p:ghost"));
    }

    #[test]
    fn store_file_round_trip() {
        let m = MockBackend::new(3, 16);
        let mut s = EmbeddingStore::new("mock", "stage1", 16);
        for t in ["a", "b", "c"] {
            s.insert(product_key(t), m.embed(t, None).unwrap()).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.emb");
        s.save(&p).unwrap();
        let back = EmbeddingStore::load(&p).unwrap();
        assert_eq!(back.header(), s.header());
        for id in s.ids() {
            let (a, b) = (s.get(id).unwrap(), back.get(id).unwrap());
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        // Serialization is a fixed point after one round.
        assert_eq!(
            back.to_bytes(),
            EmbeddingStore::load(&p).unwrap().to_bytes()
        );
        let first = String::from_utf8(s.to_bytes()).unwrap();
        assert!(first.lines().next().unwrap().contains("\"count\":3"));
    }

    #[test]
    fn store_rejects_mixed_provenance() {
        let mut s = EmbeddingStore::new("mock", "stage1", 2);
        let other = EmbeddingVector::new(vec![1.0, 0.0], "mock", "stage2").unwrap();
        assert!(s.insert("p:x", other).is_err());
        let wrong_dim = EmbeddingVector::new(vec![1.0], "mock", "stage1").unwrap();
        assert!(matches!(
            s.insert("p:x", wrong_dim),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
