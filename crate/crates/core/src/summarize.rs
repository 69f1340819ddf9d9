//! Perspective-guided description summarization.
//!
//! 1. For sampled (query, purchased product) pairs, ask the LLM which
//!    perspectives of the description matter for the query.
//! 2. Count perspectives over the corpus and keep the top `K_d`.
//! 3. Summarize each description around those core perspectives.
//!
//! Summaries are cached by a hash of the source description, so re-running on
//! unchanged inputs makes no backend calls.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::config::PipelineConfig;
use crate::domain::{Product, Query};
use crate::error::{Error, Result};
use crate::ingest::{Dataset, SplitDataset};
use crate::prompt::{self, DemoKind, TemplateSet};
use crate::util;

pub const PERSPECTIVES_MARKER: &str = "PERSPECTIVES:";
pub const SUMMARY_MARKER: &str = "SUMMARY:";
const MARKERS: &[&str] = &[PERSPECTIVES_MARKER, SUMMARY_MARKER, "REASONING:"];
/// Generation attempts before a missing marker counts as a failure.
pub const GENERATION_ATTEMPTS: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerspectiveSet {
    pub dataset_name: String,
    pub core: Vec<String>,
    pub counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub product_id: String,
    pub summary: String,
    pub perspectives_used: Vec<String>,
    pub source_hash: String,
}

pub fn source_hash(description: &str) -> String {
    util::sha256_hex(description.as_bytes())
}

/// Lowercase, trim and collapse internal whitespace.
pub fn normalize_perspective(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Perspectives from the last `PERSPECTIVES:` line, or `None` without one.
pub fn parse_perspectives(generation: &str) -> Option<Vec<String>> {
    let line = generation
        .lines()
        .rev()
        .find(|l| l.contains(PERSPECTIVES_MARKER))?;
    let (_, tail) = line.rsplit_once(PERSPECTIVES_MARKER)?;
    Some(
        tail.split(',')
            .map(normalize_perspective)
            .filter(|s| !s.is_empty())
            .collect(),
    )
}

/// Text after the last `SUMMARY:` marker, up to the next marker or the end.
pub fn parse_summary(generation: &str) -> Result<String> {
    let (_, tail) = generation
        .rsplit_once(SUMMARY_MARKER)
        .ok_or(Error::MissingMarker(SUMMARY_MARKER))?;
    let end = MARKERS
        .iter()
        .filter_map(|m| tail.find(m))
        .min()
        .unwrap_or(tail.len());
    let summary = tail[..end].trim();
    if summary.is_empty() {
        return Err(Error::EmptySummary);
    }
    Ok(summary.to_string())
}

/// One extraction call. `Ok(None)` means the generation never contained the
/// marker; the caller logs and skips it.
pub fn extract_perspectives(
    query: &Query,
    product: &Product,
    backend: &dyn Backend,
    templates: &TemplateSet,
    demo: &str,
    cfg: &PipelineConfig,
) -> Result<Option<Vec<String>>> {
    if product.description.trim().is_empty() {
        return Err(Error::InvalidInput(format!(
            "product {} has an empty description",
            product.product_id
        )));
    }
    let prompt = prompt::render_perspective_prompt(
        query,
        product,
        demo,
        templates.get(prompt::PERSPECTIVE)?,
        cfg.prompt_char_budget,
    )?;
    for _ in 0..GENERATION_ATTEMPTS {
        let out = backend.generate(&prompt, cfg.max_generation_chars)?;
        if let Some(p) = parse_perspectives(&out) {
            return Ok(Some(p));
        }
    }
    tracing::warn!(product = %product.product_id, query = %query.query_id, "no perspectives marker, skipping");
    Ok(None)
}

/// Count every perspective occurrence and keep the `k_d` most frequent,
/// breaking ties lexicographically.
pub fn aggregate_perspectives(
    dataset_name: &str,
    extractions: &[Vec<String>],
    k_d: usize,
) -> Result<PerspectiveSet> {
    if extractions.iter().all(Vec::is_empty) {
        return Err(Error::InvalidInput("no perspectives were extracted".into()));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for p in extractions.iter().flatten() {
        *counts.entry(p.clone()).or_default() += 1;
    }
    let mut ranked: Vec<(&String, &usize)> = counts.iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
    let core = ranked
        .into_iter()
        .take(k_d)
        .map(|(p, _)| p.clone())
        .collect();
    Ok(PerspectiveSet {
        dataset_name: dataset_name.to_string(),
        core,
        counts,
    })
}

/// Summarize one product around the core perspectives. A cached record whose
/// source hash still matches is returned without calling the backend.
#[allow(clippy::too_many_arguments)]
pub fn summarize_product(
    product: &Product,
    perspectives: &PerspectiveSet,
    backend: &dyn Backend,
    templates: &TemplateSet,
    template_id: &str,
    demo: &str,
    cfg: &PipelineConfig,
    cached: Option<&SummaryRecord>,
) -> Result<SummaryRecord> {
    if product.description.trim().is_empty() {
        return Err(Error::InvalidInput(format!(
            "product {} has an empty description",
            product.product_id
        )));
    }
    let hash = source_hash(&product.description);
    if let Some(rec) = cached.filter(|r| r.source_hash == hash) {
        return Ok(rec.clone());
    }
    if perspectives.core.is_empty() {
        return Err(Error::InvalidInput("no core perspectives".into()));
    }
    let prompt = prompt::render_summary_prompt(
        product,
        &perspectives.core,
        demo,
        templates.get(template_id)?,
        cfg.prompt_char_budget,
    )?;
    let mut last = Error::MissingMarker(SUMMARY_MARKER);
    for _ in 0..GENERATION_ATTEMPTS {
        let out = backend.generate(&prompt, cfg.max_generation_chars)?;
        match parse_summary(&out) {
            Ok(summary) => {
                return Ok(SummaryRecord {
                    product_id: product.product_id.clone(),
                    summary,
                    perspectives_used: perspectives.core.clone(),
                    source_hash: hash,
                })
            }
            Err(e) => last = e,
        }
    }
    Err(last)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SummaryStore {
    pub records: BTreeMap<String, SummaryRecord>,
}

impl SummaryStore {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, product_id: &str) -> Option<&SummaryRecord> {
        self.records.get(product_id)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let recs: Vec<SummaryRecord> = util::read_jsonl(path)?;
        let mut records = BTreeMap::new();
        for r in recs {
            if r.summary.trim().is_empty() {
                return Err(Error::parse(
                    path,
                    0,
                    format!("empty summary for {}", r.product_id),
                ));
            }
            records.insert(r.product_id.clone(), r);
        }
        Ok(SummaryStore { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        util::write_jsonl(path, self.records.values())
    }

    /// Copy summaries onto catalog products. Records whose source hash no
    /// longer matches the product's description are ignored.
    pub fn apply(&self, ds: &mut Dataset) -> usize {
        let mut applied = 0;
        for p in ds.catalog.values_mut() {
            if let Some(r) = self.records.get(&p.product_id) {
                if r.source_hash == source_hash(&p.description) {
                    p.summary = Some(r.summary.clone());
                    applied += 1;
                }
            }
        }
        applied
    }
}

/// Word counts of original descriptions against their summaries.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub products: usize,
    pub summarized: usize,
    pub cached: usize,
    pub skipped: Vec<String>,
    pub extraction_calls: usize,
    pub extraction_skipped: usize,
    pub original_words_avg: f64,
    pub original_words_max: usize,
    pub summary_words_avg: f64,
    pub summary_words_max: usize,
    /// Summaries that are not shorter than their source.
    pub expansion_anomalies: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SummarizationOutcome {
    pub store: SummaryStore,
    pub perspectives: PerspectiveSet,
    pub stats: SummaryStats,
}

/// (query, product) pairs that drive extraction, deduplicated and sampled
/// down to the configured budget.
pub fn extraction_pairs(
    ds: &SplitDataset,
    cfg: &PipelineConfig,
    seed: u64,
) -> Vec<(String, String)> {
    let logs: Box<dyn Iterator<Item = _>> = if cfg.perspectives_from_all_logs {
        Box::new(ds.all_logs())
    } else {
        Box::new(ds.train.logs.iter())
    };
    let mut seen = BTreeSet::new();
    let pairs: Vec<(String, String)> = logs
        .filter(|l| {
            ds.train
                .catalog
                .get(&l.target_product_id)
                .is_some_and(|p| !p.description.trim().is_empty())
        })
        .map(|l| (l.query_id.clone(), l.target_product_id.clone()))
        .filter(|pair| seen.insert(pair.clone()))
        .collect();
    if pairs.len() <= cfg.perspective_budget {
        return pairs;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, pairs.len(), cfg.perspective_budget).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| pairs[i].clone()).collect()
}

/// Full summarization pass over the catalog.
///
/// `existing` supplies cached summaries; `existing_perspectives` skips the
/// extraction phase. Extraction only runs when some product still needs a
/// summary and no perspective set was given.
pub fn run_summarization(
    ds: &SplitDataset,
    backend: &dyn Backend,
    templates: &TemplateSet,
    template_id: &str,
    cfg: &PipelineConfig,
    existing: Option<&SummaryStore>,
    existing_perspectives: Option<&PerspectiveSet>,
) -> Result<SummarizationOutcome> {
    let catalog = &ds.train.catalog;
    let name = ds.train.name.as_str();
    let mut stats = SummaryStats {
        products: catalog.len(),
        ..Default::default()
    };

    let (with_desc, without_desc): (Vec<&Product>, Vec<&Product>) = catalog
        .values()
        .partition(|p| !p.description.trim().is_empty());
    for p in &without_desc {
        tracing::warn!(product = %p.product_id, "empty description, skipping summary");
        stats.skipped.push(p.product_id.clone());
    }

    let cached = |p: &Product| {
        existing
            .and_then(|s| s.get(&p.product_id))
            .filter(|r| r.source_hash == source_hash(&p.description))
    };
    let needs_work = with_desc.iter().any(|p| cached(p).is_none());

    let perspectives = match existing_perspectives {
        Some(ps) => ps.clone(),
        None if !needs_work => PerspectiveSet {
            dataset_name: name.to_string(),
            core: Vec::new(),
            counts: BTreeMap::new(),
        },
        None => {
            let pairs = extraction_pairs(ds, cfg, cfg.rng_seed);
            let demo = templates.demonstration(name, DemoKind::Perspective);
            let results: Vec<Result<Option<Vec<String>>>> = pairs
                .par_iter()
                .map(|(qid, pid)| {
                    extract_perspectives(
                        ds.train.query(qid)?,
                        ds.train.product(pid)?,
                        backend,
                        templates,
                        demo,
                        cfg,
                    )
                })
                .collect();
            stats.extraction_calls = pairs.len();
            let mut extractions = Vec::new();
            for r in results {
                match r? {
                    Some(p) => extractions.push(p),
                    None => stats.extraction_skipped += 1,
                }
            }
            aggregate_perspectives(name, &extractions, cfg.k_d)?
        }
    };

    let demo = templates.demonstration(name, DemoKind::Summary);
    let results: Vec<(String, Result<(SummaryRecord, bool)>)> = with_desc
        .par_iter()
        .map(|p| {
            let hit = cached(p);
            let r = summarize_product(
                p,
                &perspectives,
                backend,
                templates,
                template_id,
                demo,
                cfg,
                hit,
            )
            .map(|rec| (rec, hit.is_some()));
            (p.product_id.clone(), r)
        })
        .collect();

    let mut store = SummaryStore::default();
    for (pid, r) in results {
        match r {
            Ok((rec, was_cached)) => {
                if was_cached {
                    stats.cached += 1;
                } else {
                    stats.summarized += 1;
                }
                store.records.insert(pid, rec);
            }
            Err(e @ (Error::MissingMarker(_) | Error::EmptySummary)) => {
                tracing::warn!(product = %pid, error = %e, "summary skipped");
                stats.skipped.push(pid);
            }
            Err(e) => return Err(e),
        }
    }

    let mut orig_total = 0usize;
    let mut sum_total = 0usize;
    for rec in store.records.values() {
        let orig = util::word_count(&catalog[&rec.product_id].description);
        let summ = util::word_count(&rec.summary);
        orig_total += orig;
        sum_total += summ;
        stats.original_words_max = stats.original_words_max.max(orig);
        stats.summary_words_max = stats.summary_words_max.max(summ);
        if rec.summary.len() >= catalog[&rec.product_id].description.len() {
            stats.expansion_anomalies.push(rec.product_id.clone());
        }
    }
    if !store.is_empty() {
        stats.original_words_avg = orig_total as f64 / store.len() as f64;
        stats.summary_words_avg = sum_total as f64 / store.len() as f64;
    }
    stats.skipped.sort();

    Ok(SummarizationOutcome {
        store,
        perspectives,
        stats,
    })
}
