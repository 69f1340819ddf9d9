#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ppsr_core::backend::{Backend, BackendDescriptor, MockBackend};
use ppsr_core::domain::{
    DecisionLogits, EmbeddingVector, Product, PurchaseEvent, PurchaseHistory, Query, RankSource,
    RankedEntry, RankedList, SearchLog,
};
use ppsr_core::error::Result;
use ppsr_core::ingest::Dataset;
use ppsr_core::pipeline::PipelineSpec;
use ppsr_core::prompt::RenderedPrompt;

pub fn office_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/office")
}

pub fn office_spec(work: &Path) -> PipelineSpec {
    let dir = office_dir();
    PipelineSpec::new(
        "office",
        dir.join("metadata.jsonl"),
        dir.join("interactions.jsonl"),
        dir.join("base.jsonl"),
        work,
    )
}

pub fn ppsr() -> std::process::Command {
    std::process::Command::new(env!("CARGO_BIN_EXE_ppsr"))
}

fn product(id: String, query: &str, n: usize) -> Product {
    Product {
        title: format!("Item {n} for {query}"),
        brand: format!("Brand{}", n % 7),
        category: vec!["Synthetic".into(), format!("Group {}", n % 5)],
        description: format!("Synthetic product number {n}, suited to {query}."),
        summary: None,
        image_ref: n.is_multiple_of(3).then(|| format!("img/{id}.jpg")),
        product_id: id,
    }
}

/// In-memory dataset with `users * logs_per_user` logs. Every log has its own
/// query and its own target product; `distractors` extra products pad the
/// candidate pool. Base rankings are uniformly shuffled lists of `pool`
/// products that always contain the target.
pub fn synthetic(
    users: usize,
    logs_per_user: usize,
    distractors: usize,
    pool: usize,
    seed: u64,
) -> (Dataset, BTreeMap<String, RankedList>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Dataset {
        name: "synthetic".into(),
        ..Default::default()
    };
    let mut n = 0;
    for d in 0..distractors {
        let id = format!("D{d:04}");
        ds.catalog.insert(id.clone(), product(id, "general use", n));
        n += 1;
    }
    for u in 0..users {
        let user = format!("U{u:03}");
        let mut events = Vec::new();
        let mut t = rng.gen_range(0..1000i64);
        for l in 0..logs_per_user {
            let qtext = format!("query {u} {l} widget");
            let qid = format!("q{u:03}x{l}");
            let pid = format!("T{u:03}x{l}");
            ds.catalog
                .insert(pid.clone(), product(pid.clone(), &qtext, n));
            n += 1;
            ds.queries
                .insert(qid.clone(), Query::new(&qid, &qtext).unwrap());
            t += rng.gen_range(1..500);
            events.push(PurchaseEvent {
                product_id: pid.clone(),
                timestamp: t,
            });
            ds.logs.push(SearchLog {
                log_id: format!("{user}#{l}"),
                user_id: user.clone(),
                query_id: qid,
                target_product_id: pid,
                timestamp: t,
            });
        }
        ds.users
            .insert(user.clone(), PurchaseHistory::new(user, events));
    }
    let ids: Vec<String> = ds.catalog.keys().cloned().collect();
    let mut base = BTreeMap::new();
    for log in &ds.logs {
        let mut others: Vec<&String> = ids
            .iter()
            .filter(|id| **id != log.target_product_id)
            .collect();
        others.shuffle(&mut rng);
        others.truncate(pool - 1);
        others.push(&log.target_product_id);
        others.shuffle(&mut rng);
        let entries = others
            .into_iter()
            .enumerate()
            .map(|(i, id)| RankedEntry {
                product_id: id.clone(),
                score: (pool - i) as f64,
            })
            .collect();
        base.insert(
            log.log_id.clone(),
            RankedList::from_ordered(entries, RankSource::BaseRetriever).unwrap(),
        );
    }
    (ds, base)
}

/// Mock backend that adds `bias` to the "yes" logit when the prompt's
/// candidate is the true target for the prompt's query.
pub struct OracleBiased {
    pub inner: MockBackend,
    pub targets: HashMap<String, String>,
    pub bias: f64,
}

impl OracleBiased {
    pub fn new(ds: &Dataset, seed: u64, dim: usize, bias: f64) -> Self {
        let targets = ds
            .logs
            .iter()
            .map(|l| {
                (
                    ds.queries[&l.query_id].text.clone(),
                    l.target_product_id.clone(),
                )
            })
            .collect();
        OracleBiased {
            inner: MockBackend::new(seed, dim),
            targets,
            bias,
        }
    }
}

fn line_after<'a>(text: &'a str, marker: &str) -> Option<&'a str> {
    let (_, rest) = text.rsplit_once(marker)?;
    rest.lines().next().map(str::trim)
}

impl Backend for OracleBiased {
    fn descriptor(&self) -> &BackendDescriptor {
        self.inner.descriptor()
    }

    fn score_decision(&self, prompt: &RenderedPrompt) -> Result<DecisionLogits> {
        let mut logits = self.inner.score_decision(prompt)?;
        let query = line_after(&prompt.text, "Search query: ");
        let candidate = line_after(&prompt.text, "Candidate product:\nProduct ID: ");
        if let (Some(q), Some(c)) = (query, candidate) {
            if self.targets.get(q).is_some_and(|t| t == c) {
                logits.yes += self.bias;
            }
        }
        Ok(logits)
    }

    fn embed(&self, text: &str, image_ref: Option<&str>) -> Result<EmbeddingVector> {
        self.inner.embed(text, image_ref)
    }

    fn generate(&self, prompt: &RenderedPrompt, max_chars: usize) -> Result<String> {
        self.inner.generate(prompt, max_chars)
    }
}

/// Cosine written out independently of the library.
pub fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Two-step selection by brute-force enumeration: each step tries every
/// subset of the right size and keeps the one whose members all beat every
/// non-member. Ties go to the later position.
pub fn oracle_cascade(sims: &[(f64, f64)], k: usize) -> Vec<usize> {
    fn best(pool: &[usize], size: usize, score: impl Fn(usize) -> f64) -> Vec<usize> {
        let beats = |a: usize, b: usize| score(a) > score(b) || (score(a) == score(b) && a > b);
        (0u32..1 << pool.len())
            .filter(|m| m.count_ones() as usize == size)
            .map(|m| {
                let (inside, outside): (Vec<usize>, Vec<usize>) =
                    (0..pool.len()).partition(|&i| m & (1 << i) != 0);
                (
                    inside.iter().map(|&i| pool[i]).collect::<Vec<_>>(),
                    outside.iter().map(|&i| pool[i]).collect::<Vec<_>>(),
                )
            })
            .find(|(inside, outside)| inside.iter().all(|&a| outside.iter().all(|&b| beats(a, b))))
            .map(|(inside, _)| inside)
            .expect("a strict total order has a unique top subset")
    }
    let all: Vec<usize> = (0..sims.len()).collect();
    let stage1 = best(&all, (2 * k).min(sims.len()), |i| sims[i].0);
    best(&stage1, k.min(stage1.len()), |i| sims[i].1)
}

/// Linear-scan metrics over a plain id list.
pub fn scan_rank(ids: &[String], target: &str, k: usize) -> Option<usize> {
    for (i, id) in ids.iter().enumerate() {
        if i >= k {
            return None;
        }
        if id == target {
            return Some(i + 1);
        }
    }
    None
}
