//! Amazon 5-core loading, query derivation and the train/test split.
//!
//! Metadata lines carry `asin`, `title`, `brand`, `categories`,
//! `description` and `imUrl`; interaction lines carry `reviewerID`, `asin` and
//! `unixReviewTime`. Every interaction becomes a [`SearchLog`] whose query is
//! derived from the purchased product's category path.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{Product, PurchaseEvent, PurchaseHistory, Query, SearchLog};
use crate::error::{Error, Result};
use crate::util;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub catalog: BTreeMap<String, Product>,
    pub users: BTreeMap<String, PurchaseHistory>,
    pub queries: BTreeMap<String, Query>,
    pub logs: Vec<SearchLog>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub users: usize,
    pub products: usize,
    pub queries: usize,
    pub logs: usize,
}

impl Dataset {
    pub fn product(&self, id: &str) -> Result<&Product> {
        self.catalog.get(id).ok_or_else(|| Error::UnknownId {
            kind: "product",
            id: id.to_string(),
        })
    }

    pub fn query(&self, id: &str) -> Result<&Query> {
        self.queries.get(id).ok_or_else(|| Error::UnknownId {
            kind: "query",
            id: id.to_string(),
        })
    }

    pub fn history(&self, user_id: &str) -> Result<&PurchaseHistory> {
        self.users.get(user_id).ok_or_else(|| Error::UnknownId {
            kind: "user",
            id: user_id.to_string(),
        })
    }

    /// Purchases the user made strictly before the log's timestamp.
    pub fn visible_history(&self, log: &SearchLog) -> Result<&[PurchaseEvent]> {
        Ok(self.history(&log.user_id)?.before(log.timestamp))
    }

    pub fn counts(&self) -> DatasetCounts {
        DatasetCounts {
            users: self.users.len(),
            products: self.catalog.len(),
            queries: self.queries.len(),
            logs: self.logs.len(),
        }
    }

    /// Look up a query by its normalized text.
    pub fn query_by_text(&self, text: &str) -> Option<&Query> {
        self.queries.values().find(|q| q.text == text)
    }

    pub fn validate(&self) -> Result<()> {
        for (id, p) in &self.catalog {
            p.validate()?;
            if id != &p.product_id {
                return Err(Error::InvalidInput(format!(
                    "catalog key {id} != {}",
                    p.product_id
                )));
            }
        }
        for h in self.users.values() {
            if !h.is_chronological() {
                return Err(Error::InvalidInput(format!(
                    "history of {} not chronological",
                    h.user_id
                )));
            }
            for e in &h.events {
                self.product(&e.product_id)?;
            }
        }
        for q in self.queries.values() {
            q.validate()?;
        }
        let mut last: BTreeMap<&str, i64> = BTreeMap::new();
        for log in &self.logs {
            self.history(&log.user_id)?;
            self.query(&log.query_id)?;
            self.product(&log.target_product_id)?;
            let prev = last.entry(&log.user_id).or_insert(i64::MIN);
            if log.timestamp < *prev {
                return Err(Error::InvalidInput(format!(
                    "logs of user {} not chronological at {}",
                    log.user_id, log.log_id
                )));
            }
            *prev = log.timestamp;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub metadata_lines: usize,
    pub metadata_malformed: usize,
    pub interaction_lines: usize,
    pub interaction_malformed: usize,
    /// Interactions whose product has no category, so no query exists. They
    /// stay in the purchase history but produce no search log.
    pub unqueryable: usize,
}

#[derive(Deserialize)]
struct RawMetadata {
    asin: String,
    #[serde(default)]
    title: Option<String>,
    #[serde(default)]
    brand: Option<String>,
    #[serde(default)]
    categories: Vec<Vec<String>>,
    #[serde(default)]
    description: Option<String>,
    #[serde(default, rename = "imUrl")]
    im_url: Option<String>,
}

#[derive(Deserialize)]
struct RawInteraction {
    #[serde(rename = "reviewerID")]
    reviewer_id: String,
    asin: String,
    #[serde(rename = "unixReviewTime")]
    unix_review_time: i64,
}

type Scanned<T> = (Vec<(usize, T)>, usize, usize);

/// Parse each non-blank line, returning parsed records plus (total, malformed).
fn scan_lines<T: for<'de> Deserialize<'de>>(path: &Path, threshold: f64) -> Result<Scanned<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut ok = Vec::new();
    let (mut total, mut bad) = (0usize, 0usize);
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        match serde_json::from_str::<T>(&line) {
            Ok(v) => ok.push((i + 1, v)),
            Err(e) => {
                bad += 1;
                tracing::warn!(path = %path.display(), line = i + 1, error = %e, "malformed line");
            }
        }
    }
    if bad > 0 && bad as f64 > threshold * total as f64 {
        return Err(Error::TooManyMalformed {
            path: path.to_path_buf(),
            malformed: bad,
            total,
        });
    }
    Ok((ok, total, bad))
}

/// Derive the search query for a product from its category path: lowercase
/// terms, strip surrounding punctuation, drop one-character tokens and keep
/// only the first occurrence of each term.
pub fn extract_query(product: &Product) -> Result<Query> {
    let mut seen = HashSet::new();
    let mut terms = Vec::new();
    for cat in &product.category {
        for raw in cat.split_whitespace() {
            let term = raw
                .trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase();
            if term.chars().count() <= 1 {
                continue;
            }
            if seen.insert(term.clone()) {
                terms.push(term);
            }
        }
    }
    if terms.is_empty() {
        return Err(Error::NoQuery(product.product_id.clone()));
    }
    let text = terms.join(" ");
    Query::new(query_id_for(&text), text)
}

/// Stable id for a normalized query text.
pub fn query_id_for(text: &str) -> String {
    format!("q{}", &util::sha256_hex(text.as_bytes())[..12])
}

pub fn load_dataset(
    name: &str,
    metadata_path: &Path,
    interactions_path: &Path,
    malformed_threshold: f64,
) -> Result<(Dataset, LoadReport)> {
    let mut report = LoadReport::default();

    let (meta, total, bad) = scan_lines::<RawMetadata>(metadata_path, malformed_threshold)?;
    report.metadata_lines = total;
    report.metadata_malformed = bad;
    let mut catalog = BTreeMap::new();
    for (line, m) in meta {
        if m.asin.is_empty() {
            return Err(Error::parse(metadata_path, line, "empty asin"));
        }
        let product = Product {
            product_id: m.asin.clone(),
            title: m.title.unwrap_or_default(),
            brand: m.brand.unwrap_or_default(),
            category: m.categories.into_iter().next().unwrap_or_default(),
            description: m.description.unwrap_or_default(),
            summary: None,
            image_ref: m.im_url.filter(|s| !s.is_empty()),
        };
        if catalog.insert(m.asin.clone(), product).is_some() {
            return Err(Error::parse(
                metadata_path,
                line,
                format!("duplicate asin {}", m.asin),
            ));
        }
    }

    let (raw, total, bad) = scan_lines::<RawInteraction>(interactions_path, malformed_threshold)?;
    report.interaction_lines = total;
    report.interaction_malformed = bad;
    if raw.is_empty() {
        return Err(Error::NoInteractions);
    }

    let mut per_user: BTreeMap<String, Vec<PurchaseEvent>> = BTreeMap::new();
    for (_, r) in raw {
        if !catalog.contains_key(&r.asin) {
            return Err(Error::UnknownId {
                kind: "product",
                id: r.asin,
            });
        }
        per_user
            .entry(r.reviewer_id)
            .or_default()
            .push(PurchaseEvent {
                product_id: r.asin,
                timestamp: r.unix_review_time,
            });
    }

    let mut users = BTreeMap::new();
    let mut queries = BTreeMap::new();
    let mut logs = Vec::new();
    for (user_id, events) in per_user {
        let history = PurchaseHistory::new(user_id.clone(), events);
        for (idx, event) in history.events.iter().enumerate() {
            let query = match extract_query(&catalog[&event.product_id]) {
                Ok(q) => q,
                Err(Error::NoQuery(_)) => {
                    report.unqueryable += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            logs.push(SearchLog {
                log_id: format!("{user_id}#{idx}"),
                user_id: user_id.clone(),
                query_id: query.query_id.clone(),
                target_product_id: event.product_id.clone(),
                timestamp: event.timestamp,
            });
            queries.entry(query.query_id.clone()).or_insert(query);
        }
        users.insert(user_id, history);
    }

    let ds = Dataset {
        name: name.to_string(),
        catalog,
        users,
        queries,
        logs,
    };
    ds.validate()?;
    Ok((ds, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    PerUserChronological,
    LeaveOneOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub strategy: SplitStrategy,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.7,
            strategy: SplitStrategy::PerUserChronological,
        }
    }
}

/// Number of a user's `n` logs that go to train: `ceil(fraction * n)`, capped
/// at `n - 1` so the test side is never empty.
pub fn train_count(n: usize, fraction: f64) -> usize {
    // Small epsilon so that e.g. 0.7 * 10 does not round up to 8.
    let raw = (fraction * n as f64 - 1e-9).ceil().max(0.0) as usize;
    raw.min(n.saturating_sub(1))
}

/// Partition logs per user into train and test. Both halves share the full
/// catalog, histories and queries; models only ever see a log's visible
/// history, which ends strictly before the log's timestamp.
///
/// The split is deterministic; `_seed` is accepted for interface stability.
pub fn split_dataset(ds: &Dataset, spec: &SplitSpec, _seed: u64) -> Result<(Dataset, Dataset)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::InvalidInput(format!(
            "train_fraction {} not in (0, 1)",
            spec.train_fraction
        )));
    }
    let mut by_user: BTreeMap<&str, Vec<&SearchLog>> = BTreeMap::new();
    for log in &ds.logs {
        by_user.entry(&log.user_id).or_default().push(log);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (user, logs) in by_user {
        let n = logs.len();
        if n < 2 {
            return Err(Error::TooFewLogs {
                user_id: user.to_string(),
                count: n,
            });
        }
        let k = match spec.strategy {
            SplitStrategy::PerUserChronological => train_count(n, spec.train_fraction),
            SplitStrategy::LeaveOneOut => n - 1,
        };
        train.extend(logs[..k].iter().map(|l| (*l).clone()));
        test.extend(logs[k..].iter().map(|l| (*l).clone()));
    }
    let with_logs = |logs| Dataset {
        name: ds.name.clone(),
        catalog: ds.catalog.clone(),
        users: ds.users.clone(),
        queries: ds.queries.clone(),
        logs,
    };
    Ok((with_logs(train), with_logs(test)))
}

/// Exhaustively list every visible-history event at or after its log's
/// timestamp. Always empty for datasets built by this module.
pub fn temporal_violations(ds: &Dataset) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for log in &ds.logs {
        for e in ds.visible_history(log)? {
            if e.timestamp >= log.timestamp {
                out.push(format!(
                    "log {} (t={}) sees {} at t={}",
                    log.log_id, log.timestamp, e.product_id, e.timestamp
                ));
            }
        }
    }
    Ok(out)
}

/// An ingested dataset on disk: shared tables plus the two log splits.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetMeta {
    name: String,
    counts: DatasetCounts,
    train_logs: usize,
    test_logs: usize,
    split: SplitSpec,
}

const PRODUCTS: &str = "products.jsonl";
const HISTORIES: &str = "histories.jsonl";
const QUERIES: &str = "queries.jsonl";
const TRAIN: &str = "train_logs.jsonl";
const TEST: &str = "test_logs.jsonl";
const META: &str = "meta.json";

impl SplitDataset {
    pub fn files(dir: &Path) -> Vec<PathBuf> {
        [PRODUCTS, HISTORIES, QUERIES, TRAIN, TEST, META]
            .iter()
            .map(|f| dir.join(f))
            .collect()
    }

    pub fn save(&self, dir: &Path, split: &SplitSpec) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ds = &self.train;
        util::write_jsonl(&dir.join(PRODUCTS), ds.catalog.values())?;
        util::write_jsonl(&dir.join(HISTORIES), ds.users.values())?;
        util::write_jsonl(&dir.join(QUERIES), ds.queries.values())?;
        util::write_jsonl(&dir.join(TRAIN), &self.train.logs)?;
        util::write_jsonl(&dir.join(TEST), &self.test.logs)?;
        let mut counts = ds.counts();
        counts.logs = self.train.logs.len() + self.test.logs.len();
        util::write_json(
            &dir.join(META),
            &DatasetMeta {
                name: ds.name.clone(),
                counts,
                train_logs: self.train.logs.len(),
                test_logs: self.test.logs.len(),
                split: *split,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: DatasetMeta = util::read_json(&dir.join(META))?;
        let products: Vec<Product> = util::read_jsonl(&dir.join(PRODUCTS))?;
        let histories: Vec<PurchaseHistory> = util::read_jsonl(&dir.join(HISTORIES))?;
        let queries: Vec<Query> = util::read_jsonl(&dir.join(QUERIES))?;
        let base = Dataset {
            name: meta.name,
            catalog: products
                .into_iter()
                .map(|p| (p.product_id.clone(), p))
                .collect(),
            users: histories
                .into_iter()
                .map(|h| (h.user_id.clone(), h))
                .collect(),
            queries: queries
                .into_iter()
                .map(|q| (q.query_id.clone(), q))
                .collect(),
            logs: Vec::new(),
        };
        let train = Dataset {
            logs: util::read_jsonl(&dir.join(TRAIN))?,
            ..base.clone()
        };
        let test = Dataset {
            logs: util::read_jsonl(&dir.join(TEST))?,
            ..base
        };
        train.validate()?;
        test.validate()?;
        Ok(SplitDataset { train, test })
    }

    /// All logs, train first.
    pub fn all_logs(&self) -> impl Iterator<Item = &crate::domain::SearchLog> {
        self.train.logs.iter().chain(&self.test.logs)
    }
}
