//! Candidate scoring and final reranking over a base retriever's output.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::config::PipelineConfig;
use crate::domain::{
    DecisionLogits, Product, PurchaseEvent, Query, RankSource, RankedEntry, RankedList, SearchLog,
};
use crate::error::{Error, Result};
use crate::ingest::Dataset;
use crate::prompt::{self, TemplateSet};
use crate::select::{self, EmbeddingStore};
use crate::util;

/// Softmax over the two decision logits, shifted by the max for stability.
pub fn purchase_probability(logits: DecisionLogits) -> Result<f64> {
    let DecisionLogits { yes, no } = logits;
    if !yes.is_finite() || !no.is_finite() {
        return Err(Error::NonFinite("decision logits"));
    }
    let m = yes.max(no);
    let ey = (yes - m).exp();
    let en = (no - m).exp();
    Ok(ey / (ey + en))
}

/// The first `min(k_p, len)` candidate ids in base order, and whether the
/// list was short.
pub fn take_candidates(base: &RankedList, k_p: usize) -> Result<(Vec<String>, bool)> {
    if base.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let ids = base
        .entries
        .iter()
        .take(k_p)
        .map(|e| e.product_id.clone())
        .collect();
    Ok((ids, base.len() < k_p))
}

/// Everything a rerank call reads. All of it is immutable and shared.
#[derive(Clone, Copy)]
pub struct RerankContext<'a> {
    pub dataset: &'a Dataset,
    pub store: &'a EmbeddingStore,
    pub backend: &'a dyn Backend,
    pub templates: &'a TemplateSet,
    pub cfg: &'a PipelineConfig,
    /// Render summaries in place of descriptions where available.
    pub use_summary: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateHistory {
    pub product_id: String,
    pub history: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankOutcome {
    pub ranking: RankedList,
    /// Selected history per candidate, in final ranking order.
    pub selected_history: Vec<CandidateHistory>,
    pub short: bool,
}

/// Score `candidates` (in base order) for one user and query. This is the
/// single scoring path shared by the batch command and the service.
pub fn rerank_candidates(
    ctx: &RerankContext,
    history: &[PurchaseEvent],
    query: &Query,
    query_vec: &[f64],
    candidates: &[String],
) -> Result<RerankOutcome> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let products: Vec<&Product> = candidates
        .iter()
        .map(|id| ctx.dataset.product(id))
        .collect::<Result<_>>()?;
    let tpl = ctx.templates.get(prompt::RERANK)?;
    let scored: Vec<(f64, Vec<String>)> = products
        .par_iter()
        .map(|cand| {
            let cand_vec = ctx.store.get(&select::product_key(&cand.product_id))?;
            let picked = select::select_history_vectors(
                history,
                query_vec,
                cand_vec,
                &cand.product_id,
                ctx.store,
                ctx.cfg.k_s2,
                ctx.cfg.exclude_candidate_from_history,
            )?;
            let hist: Vec<&Product> = picked
                .iter()
                .map(|id| ctx.dataset.product(id))
                .collect::<Result<_>>()?;
            let rendered = prompt::render_rerank_prompt(
                &hist,
                query,
                cand,
                tpl,
                ctx.use_summary,
                ctx.cfg.prompt_char_budget,
            )?;
            let p = purchase_probability(ctx.backend.score_decision(&rendered)?)?;
            Ok((p, picked))
        })
        .collect::<Result<_>>()?;

    let mut histories: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    let mut triples = Vec::with_capacity(candidates.len());
    for (i, (id, (score, picked))) in candidates.iter().zip(scored).enumerate() {
        histories.insert(id, picked);
        triples.push((id.clone(), score, i));
    }
    let ranking = RankedList::from_scores(triples, RankSource::Reranker)?;
    let selected_history = ranking
        .entries
        .iter()
        .map(|e| CandidateHistory {
            product_id: e.product_id.clone(),
            history: histories.remove(e.product_id.as_str()).unwrap_or_default(),
        })
        .collect();
    Ok(RerankOutcome {
        ranking,
        selected_history,
        short: false,
    })
}

/// Rerank the top `K_p` of `base` for one search log, using only history
/// strictly before the log.
pub fn rerank_log(
    ctx: &RerankContext,
    log: &SearchLog,
    base: &RankedList,
) -> Result<RerankOutcome> {
    let (candidates, short) = take_candidates(base, ctx.cfg.k_p)?;
    if short {
        tracing::warn!(log = %log.log_id, candidates = candidates.len(), "short candidate list");
    }
    let query = ctx.dataset.query(&log.query_id)?;
    let query_vec = ctx.store.get(&select::query_key(&log.query_id))?;
    let history = ctx.dataset.visible_history(log)?;
    let mut out = rerank_candidates(ctx, history, query, query_vec, &candidates)?;
    out.short = short;
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RerankStats {
    pub logs: usize,
    pub reranked: usize,
    pub short: Vec<String>,
    pub missing_base: Vec<String>,
}

/// Rerank every log that has a base ranking. Logs without one are listed in
/// the stats and left for evaluation to score as missing.
pub fn rerank_all(
    ctx: &RerankContext,
    logs: &[SearchLog],
    base: &BTreeMap<String, RankedList>,
) -> Result<(BTreeMap<String, RankedList>, RerankStats)> {
    let mut stats = RerankStats {
        logs: logs.len(),
        ..Default::default()
    };
    let (present, missing): (Vec<&SearchLog>, Vec<&SearchLog>) =
        logs.iter().partition(|l| base.contains_key(&l.log_id));
    stats.missing_base = missing.iter().map(|l| l.log_id.clone()).collect();
    for id in &stats.missing_base {
        tracing::warn!(log = %id, "no base ranking");
    }
    let results: Vec<(String, RerankOutcome)> = present
        .par_iter()
        .map(|log| {
            Ok((
                log.log_id.clone(),
                rerank_log(ctx, log, &base[&log.log_id])?,
            ))
        })
        .collect::<Result<_>>()?;
    let mut out = BTreeMap::new();
    for (id, r) in results {
        if r.short {
            stats.short.push(id.clone());
        }
        out.insert(id, r.ranking);
    }
    stats.reranked = out.len();
    Ok((out, stats))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RankingLine {
    log_id: String,
    ranking: Vec<RankedEntry>,
    #[serde(default = "base_source")]
    source: RankSource,
}

fn base_source() -> RankSource {
    RankSource::BaseRetriever
}

/// Read a ranking file. Lines without a `source` are base retriever output.
pub fn load_rankings(path: &Path) -> Result<BTreeMap<String, RankedList>> {
    let lines: Vec<RankingLine> = util::read_jsonl(path)?;
    let mut out = BTreeMap::new();
    for (i, line) in lines.into_iter().enumerate() {
        let list = RankedList::from_ordered(line.ranking, line.source)
            .map_err(|e| Error::parse(path, i + 1, e))?;
        if out.insert(line.log_id.clone(), list).is_some() {
            return Err(Error::parse(
                path,
                i + 1,
                format!("duplicate log id {}", line.log_id),
            ));
        }
    }
    Ok(out)
}

/// Write rankings sorted by log id.
pub fn save_rankings(path: &Path, rankings: &BTreeMap<String, RankedList>) -> Result<()> {
    let lines: Vec<RankingLine> = rankings
        .iter()
        .map(|(id, l)| RankingLine {
            log_id: id.clone(),
            ranking: l.entries.clone(),
            source: l.source,
        })
        .collect();
    util::write_jsonl(path, &lines)
}
