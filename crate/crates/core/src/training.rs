//! Instruction-tuning records for both training stages.
//!
//! Each train log yields one positive ("yes") record for its target and one
//! negative ("no") record per sampled simple or hard negative. Stage 1 uses a
//! random chronological slice of the history; stage 2 uses the embedding
//! cascade against a stage-1 store.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::domain::{Product, PurchaseEvent, RankedList, SearchLog};
use crate::error::{Error, Result};
use crate::ingest::Dataset;
use crate::prompt::{self, TemplateSet};
use crate::select::{self, EmbeddingStore};
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        })
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stage1" | "1" => Ok(Stage::Stage1),
            "stage2" | "2" => Ok(Stage::Stage2),
            _ => Err(Error::InvalidInput(format!("unknown stage {s}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeKind {
    Positive,
    Simple,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub log_id: String,
    pub stage: Stage,
    pub prompt_text: String,
    pub image_refs: Vec<String>,
    pub decision: String,
    pub negative_kind: NegativeKind,
    pub product_id: String,
}

/// Uniform sample of `min(k, n)` events without replacement, returned in
/// chronological order.
pub fn sample_stage1_history(history: &[PurchaseEvent], k: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, history.len(), k.min(history.len())).into_vec();
    picked.sort_unstable();
    picked
        .into_iter()
        .map(|i| history[i].product_id.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeSample {
    /// Simple negatives first, then hard negatives in base rank order.
    pub negatives: Vec<(String, NegativeKind)>,
    /// Fewer hard negatives than requested were available.
    pub short_hard: bool,
}

/// Draw negatives for one log.
///
/// Hard negatives are the highest-ranked non-target entries of the base
/// top-`K_p`. Simple negatives are uniform draws from the catalog excluding
/// the target and the hard negatives. `catalog_ids` must be sorted.
pub fn sample_negatives(
    log: &SearchLog,
    catalog_ids: &[String],
    base: Option<&RankedList>,
    history: &[PurchaseEvent],
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<NegativeSample> {
    let bought: BTreeSet<&str> = if cfg.hard_neg_exclude_history {
        history.iter().map(|e| e.product_id.as_str()).collect()
    } else {
        BTreeSet::new()
    };
    let hard: Vec<String> = base
        .map(|b| {
            b.entries
                .iter()
                .take(cfg.k_p)
                .map(|e| &e.product_id)
                .filter(|id| **id != log.target_product_id && !bought.contains(id.as_str()))
                .take(cfg.k_hard_neg)
                .cloned()
                .collect()
        })
        .unwrap_or_default();
    let short_hard = hard.len() < cfg.k_hard_neg;

    let pool: Vec<&String> = catalog_ids
        .iter()
        .filter(|id| **id != log.target_product_id && !hard.contains(id))
        .collect();
    if pool.len() < cfg.k_simple_neg {
        return Err(Error::Sampling(format!(
            "log {}: {} products available for {} simple negatives",
            log.log_id,
            pool.len(),
            cfg.k_simple_neg
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let simple = index::sample(&mut rng, pool.len(), cfg.k_simple_neg);

    let negatives = simple
        .into_iter()
        .map(|i| (pool[i].clone(), NegativeKind::Simple))
        .chain(hard.into_iter().map(|id| (id, NegativeKind::Hard)))
        .collect();
    Ok(NegativeSample {
        negatives,
        short_hard,
    })
}

/// Inputs for emission. `store` is required for stage 2.
pub struct EmitContext<'a> {
    pub dataset: &'a Dataset,
    pub base: &'a BTreeMap<String, RankedList>,
    pub store: Option<&'a EmbeddingStore>,
    pub templates: &'a TemplateSet,
    pub cfg: &'a PipelineConfig,
    pub use_summary: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmitStats {
    pub logs: usize,
    pub records: usize,
    pub short_hard: Vec<String>,
}

/// Train logs kept under `fraction`, sampled uniformly and kept in order.
pub fn sample_logs(logs: &[SearchLog], fraction: f64, seed: u64) -> Vec<&SearchLog> {
    if fraction >= 1.0 {
        return logs.iter().collect();
    }
    let n = ((logs.len() as f64 * fraction).round() as usize).clamp(1.min(logs.len()), logs.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, logs.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| &logs[i]).collect()
}

fn log_seed(seed: u64, log_id: &str) -> u64 {
    util::hash64(&[&seed.to_le_bytes(), log_id.as_bytes()])
}

fn emit_log(
    ctx: &EmitContext,
    stage: Stage,
    log: &SearchLog,
    catalog_ids: &[String],
    seed: u64,
) -> Result<(Vec<TrainingRecord>, bool)> {
    let ds = ctx.dataset;
    let history = ds.visible_history(log)?;
    let query = ds.query(&log.query_id)?;
    let seed = log_seed(seed, &log.log_id);
    let sample = sample_negatives(
        log,
        catalog_ids,
        ctx.base.get(&log.log_id),
        history,
        ctx.cfg,
        util::hash64(&[&seed.to_le_bytes(), b"negatives"]),
    )?;
    let stage1_history = match stage {
        Stage::Stage1 => Some(sample_stage1_history(
            history,
            ctx.cfg.k_s1,
            util::hash64(&[&seed.to_le_bytes(), b"history"]),
        )),
        Stage::Stage2 => None,
    };
    let query_vec = match (stage, ctx.store) {
        (Stage::Stage2, Some(s)) => Some(s.get(&select::query_key(&log.query_id))?),
        _ => None,
    };
    let tpl = ctx.templates.get(prompt::RERANK)?;

    let items = std::iter::once((log.target_product_id.clone(), NegativeKind::Positive))
        .chain(sample.negatives);
    let mut records = Vec::new();
    for (product_id, kind) in items {
        let candidate = ds.product(&product_id)?;
        let hist_ids = match (&stage1_history, ctx.store, query_vec) {
            (Some(h), _, _) => h.clone(),
            (None, Some(store), Some(qv)) => select::select_history_vectors(
                history,
                qv,
                store.get(&select::product_key(&product_id))?,
                &product_id,
                store,
                ctx.cfg.k_s2,
                ctx.cfg.exclude_candidate_from_history,
            )?,
            _ => return Err(Error::MissingStore),
        };
        let hist: Vec<&Product> = hist_ids
            .iter()
            .map(|id| ds.product(id))
            .collect::<Result<_>>()?;
        let rendered = prompt::render_rerank_prompt(
            &hist,
            query,
            candidate,
            tpl,
            ctx.use_summary,
            ctx.cfg.prompt_char_budget,
        )?;
        records.push(TrainingRecord {
            log_id: log.log_id.clone(),
            stage,
            prompt_text: rendered.text,
            image_refs: rendered.image_refs,
            decision: if kind == NegativeKind::Positive {
                "yes"
            } else {
                "no"
            }
            .to_string(),
            negative_kind: kind,
            product_id,
        });
    }
    Ok((records, sample.short_hard))
}

/// Records for every (sampled) train log, in log order.
pub fn emit_training_set(
    ctx: &EmitContext,
    stage: Stage,
    seed: u64,
) -> Result<(Vec<TrainingRecord>, EmitStats)> {
    if stage == Stage::Stage2 && ctx.store.is_none() {
        return Err(Error::MissingStore);
    }
    let logs = sample_logs(
        &ctx.dataset.logs,
        ctx.cfg.train_fraction,
        util::hash64(&[&seed.to_le_bytes(), b"fraction"]),
    );
    let catalog_ids: Vec<String> = ctx.dataset.catalog.keys().cloned().collect();
    let per_log: Vec<(String, Vec<TrainingRecord>, bool)> = logs
        .par_iter()
        .map(|log| {
            let (recs, short) = emit_log(ctx, stage, log, &catalog_ids, seed)?;
            Ok((log.log_id.clone(), recs, short))
        })
        .collect::<Result<_>>()?;
    let mut stats = EmitStats {
        logs: per_log.len(),
        ..Default::default()
    };
    let mut records = Vec::new();
    for (id, recs, short) in per_log {
        if short {
            tracing::warn!(log = %id, "fewer hard negatives than requested");
            stats.short_hard.push(id);
        }
        records.extend(recs);
    }
    stats.records = records.len();
    Ok((records, stats))
}

pub fn save_records(path: &Path, records: &[TrainingRecord]) -> Result<()> {
    util::write_jsonl(path, records)
}

pub fn load_records(path: &Path) -> Result<Vec<TrainingRecord>> {
    util::read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{RankSource, RankedEntry};
    use proptest::prelude::*;

    fn events(n: usize) -> Vec<PurchaseEvent> {
        (0..n)
            .map(|i| PurchaseEvent {
                product_id: format!("h{i:02}"),
                timestamp: i as i64,
            })
            .collect()
    }

    #[test]
    fn stage1_history_sampling() {
        let h = events(20);
        let s = sample_stage1_history(&h, 5, 9);
        assert_eq!(s.len(), 5);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s, sample_stage1_history(&h, 5, 9));
        assert_eq!(sample_stage1_history(&events(3), 5, 9).len(), 3);
        assert!(sample_stage1_history(&[], 5, 9).is_empty());
    }

    fn log(target: &str) -> SearchLog {
        SearchLog {
            log_id: "u#1".into(),
            user_id: "u".into(),
            query_id: "q".into(),
            target_product_id: target.into(),
            timestamp: 100,
        }
    }

    fn base(ids: &[&str]) -> RankedList {
        RankedList::from_ordered(
            ids.iter()
                .enumerate()
                .map(|(i, id)| RankedEntry {
                    product_id: id.to_string(),
                    score: -(i as f64),
                })
                .collect(),
            RankSource::BaseRetriever,
        )
        .unwrap()
    }

    fn catalog(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("P{i:02}")).collect()
    }

    fn hard(s: &NegativeSample) -> Vec<&str> {
        s.negatives
            .iter()
            .filter(|(_, k)| *k == NegativeKind::Hard)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    #[test]
    fn hard_negatives_skip_target() {
        let cfg = PipelineConfig::default();
        let ids = catalog(30);
        let top: Vec<&str> = ids.iter().take(10).map(String::as_str).collect();
        let b = base(&top);
        let s = sample_negatives(&log("P00"), &ids, Some(&b), &[], &cfg, 1).unwrap();
        assert_eq!(hard(&s), ["P01", "P02", "P03"]);
        let s = sample_negatives(&log("P29"), &ids, Some(&b), &[], &cfg, 1).unwrap();
        assert_eq!(hard(&s), ["P00", "P01", "P02"]);
        assert!(!s.short_hard);
        assert_eq!(s.negatives.len(), 5);
    }

    #[test]
    fn forced_simple_draw_and_short_base() {
        let cfg = PipelineConfig {
            k_hard_neg: 0,
            ..Default::default()
        };
        let ids = catalog(3);
        let s = sample_negatives(&log("P01"), &ids, None, &[], &cfg, 5).unwrap();
        let mut got: Vec<&str> = s.negatives.iter().map(|(id, _)| id.as_str()).collect();
        got.sort();
        assert_eq!(got, ["P00", "P02"]);

        let cfg = PipelineConfig::default();
        let s = sample_negatives(
            &log("P00"),
            &catalog(10),
            Some(&base(&["P00", "P05"])),
            &[],
            &cfg,
            5,
        )
        .unwrap();
        assert_eq!(hard(&s), ["P05"]);
        assert!(s.short_hard);
        assert!(sample_negatives(&log("P00"), &catalog(2), None, &[], &cfg, 5).is_err());
    }

    #[test]
    fn history_exclusion_flag() {
        let cfg = PipelineConfig {
            hard_neg_exclude_history: true,
            ..Default::default()
        };
        let bought = vec![PurchaseEvent {
            product_id: "P01".into(),
            timestamp: 1,
        }];
        let b = base(&["P00", "P01", "P02", "P03", "P04"]);
        let s = sample_negatives(&log("P00"), &catalog(10), Some(&b), &bought, &cfg, 1).unwrap();
        assert_eq!(hard(&s), ["P02", "P03", "P04"]);
    }

    proptest! {
        #[test]
        fn negatives_are_disjoint_and_exclude_target(n in 8usize..40, t in 0usize..8, seed in any::<u64>()) {
            let ids = catalog(n);
            let target = ids[t].clone();
            let top: Vec<&str> = ids.iter().take(10).map(String::as_str).collect();
            let b = base(&top);
            let s = sample_negatives(&log(&target), &ids, Some(&b), &[], &PipelineConfig::default(), seed).unwrap();
            prop_assert_eq!(s.negatives.len(), 5);
            let uniq: BTreeSet<&str> = s.negatives.iter().map(|(id, _)| id.as_str()).collect();
            prop_assert_eq!(uniq.len(), 5);
            prop_assert!(!uniq.contains(target.as_str()));
        }
    }

    #[test]
    fn fraction_sampling() {
        let logs: Vec<SearchLog> = (0..100)
            .map(|i| SearchLog {
                log_id: format!("u#{i}"),
                ..log("P00")
            })
            .collect();
        assert_eq!(sample_logs(&logs, 1.0, 3).len(), 100);
        let s = sample_logs(&logs, 0.1, 3);
        assert_eq!(s.len(), 10);
        assert_eq!(s, sample_logs(&logs, 0.1, 3));
        assert_eq!(sample_logs(&logs[..3], 0.1, 3).len(), 1);
    }

    #[test]
    fn stage_names() {
        assert_eq!(serde_json::to_string(&Stage::Stage2).unwrap(), "\"stage2\"");
        assert_eq!("stage1".parse::<Stage>().unwrap(), Stage::Stage1);
        assert_eq!(Stage::Stage1.to_string(), "stage1");
        assert_eq!(
            serde_json::to_string(&NegativeKind::Hard).unwrap(),
            "\"hard\""
        );
    }
}
