//! Single-target ranking metrics and reports.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::domain::{RankedList, SearchLog};
use crate::error::{Error, Result};
use crate::util;

fn rank_within(ranking: &RankedList, target: &str, k: usize) -> Option<usize> {
    ranking.rank_of(target).filter(|&r| r <= k)
}

pub fn mrr_at_k(ranking: &RankedList, target: &str, k: usize) -> f64 {
    rank_within(ranking, target, k).map_or(0.0, |r| 1.0 / r as f64)
}

/// Binary gain with one relevant item, so the ideal DCG is 1.
pub fn ndcg_at_k(ranking: &RankedList, target: &str, k: usize) -> f64 {
    rank_within(ranking, target, k).map_or(0.0, |r| 1.0 / (1.0 + r as f64).log2())
}

pub fn recall_at_k(ranking: &RankedList, target: &str, k: usize) -> f64 {
    rank_within(ranking, target, k).map_or(0.0, |_| 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MetricKind {
    Mrr,
    Ndcg,
    Recall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Metric {
    pub kind: MetricKind,
    pub k: usize,
}

impl Metric {
    pub fn score(&self, ranking: &RankedList, target: &str) -> f64 {
        match self.kind {
            MetricKind::Mrr => mrr_at_k(ranking, target, self.k),
            MetricKind::Ndcg => ndcg_at_k(ranking, target, self.k),
            MetricKind::Recall => recall_at_k(ranking, target, self.k),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self.kind {
            MetricKind::Mrr => 'M',
            MetricKind::Ndcg => 'N',
            MetricKind::Recall => 'R',
        };
        write!(f, "{c}@{}", self.k)
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("bad metric {s:?}, expected e.g. M@8"));
        let (name, k) = s.trim().split_once('@').ok_or_else(bad)?;
        let kind = match name.to_ascii_uppercase().as_str() {
            "M" | "MRR" => MetricKind::Mrr,
            "N" | "NDCG" => MetricKind::Ndcg,
            "R" | "RECALL" => MetricKind::Recall,
            _ => return Err(bad()),
        };
        let k: usize = k.parse().map_err(|_| bad())?;
        if k == 0 {
            return Err(bad());
        }
        Ok(Metric { kind, k })
    }
}

/// An ordered list of metrics, e.g. `M@8,N@4,R@4,R@1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricSpec(pub Vec<Metric>);

pub const DEFAULT_METRICS: &str = "M@8,N@4,R@4,R@1";

impl Default for MetricSpec {
    fn default() -> Self {
        DEFAULT_METRICS.parse().expect("default metric spec")
    }
}

impl FromStr for MetricSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let metrics: Vec<Metric> = s.split(',').map(str::parse).collect::<Result<_>>()?;
        let mut seen = std::collections::BTreeSet::new();
        if metrics.iter().any(|m| !seen.insert(*m)) {
            return Err(Error::InvalidInput(format!("duplicate metric in {s:?}")));
        }
        Ok(MetricSpec(metrics))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Metric names in spec order.
    pub metric_order: Vec<String>,
    pub metrics: BTreeMap<String, f64>,
    pub log_count: usize,
    pub missing_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rel_impr: Option<BTreeMap<String, f64>>,
}

/// Mean of each metric over `logs`. Logs absent from `run` score zero and are
/// counted as missing.
pub fn evaluate(
    run: &BTreeMap<String, RankedList>,
    logs: &[SearchLog],
    spec: &MetricSpec,
) -> Result<MetricReport> {
    if logs.is_empty() {
        return Err(Error::EmptyTestSplit);
    }
    let mut sums = vec![0.0; spec.0.len()];
    let mut missing = 0;
    for log in logs {
        match run.get(&log.log_id) {
            Some(ranking) => {
                for (s, m) in sums.iter_mut().zip(&spec.0) {
                    *s += m.score(ranking, &log.target_product_id);
                }
            }
            None => missing += 1,
        }
    }
    let n = logs.len() as f64;
    Ok(MetricReport {
        metric_order: spec.0.iter().map(Metric::to_string).collect(),
        metrics: spec
            .0
            .iter()
            .zip(sums)
            .map(|(m, s)| (m.to_string(), s / n))
            .collect(),
        log_count: logs.len(),
        missing_count: missing,
        rel_impr: None,
    })
}

/// Round half away from zero to two decimals. Values are first snapped to 1e-9
/// so that binary noise such as 8.149999999 does not flip the rounding.
pub fn round2(x: f64) -> f64 {
    let snapped = (x * 1e9).round() / 1e9;
    (snapped * 100.0).round() / 100.0
}

/// Percentage change of each metric over the baseline, to two decimals.
pub fn relative_improvement(
    new: &MetricReport,
    base: &MetricReport,
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for name in &new.metric_order {
        let b = *base
            .metrics
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("baseline lacks metric {name}")))?;
        if b == 0.0 {
            return Err(Error::ZeroBaseline(name.clone()));
        }
        out.insert(name.clone(), round2(100.0 * (new.metrics[name] - b) / b));
    }
    Ok(out)
}

/// [`relative_improvement`] over the metrics whose baseline is positive.
pub fn relative_improvement_defined(
    new: &MetricReport,
    base: &MetricReport,
) -> BTreeMap<String, f64> {
    new.metric_order
        .iter()
        .filter_map(|name| {
            let b = *base.metrics.get(name)?;
            (b > 0.0).then(|| (name.clone(), round2(100.0 * (new.metrics[name] - b) / b)))
        })
        .collect()
}

impl MetricReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        util::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        util::read_json(path)
    }

    /// Aligned text table: one header row, a value row, and a Rel.Impr row
    /// when present.
    pub fn to_table(&self, label: &str) -> String {
        let width = self
            .metric_order
            .iter()
            .map(String::len)
            .max()
            .unwrap_or(0)
            .max(8);
        let lw = label.len().max("Rel.Impr".len());
        let mut out = format!("{:<lw$}", "");
        for m in &self.metric_order {
            out.push_str(&format!("  {m:>width$}"));
        }
        out.push('\n');
        out.push_str(&format!("{label:<lw$}"));
        for m in &self.metric_order {
            out.push_str(&format!("  {:>width$.4}", self.metrics[m]));
        }
        out.push('\n');
        if let Some(ri) = &self.rel_impr {
            out.push_str(&format!("{:<lw$}", "Rel.Impr"));
            for m in &self.metric_order {
                let cell = ri.get(m).map_or("-".to_string(), |v| format!("{v:.2}%"));
                out.push_str(&format!("  {cell:>width$}"));
            }
            out.push('\n');
        }
        out.push_str(&format!(
            "logs: {}  missing: {}\n",
            self.log_count, self.missing_count
        ));
        out
    }
}
