//! Pipeline configuration and its flat `key=value` file format.
//!
//! One key per line, `#` starts a comment, blank lines are ignored and
//! unknown keys are rejected. [`PipelineConfig::to_config_string`] writes
//! every key in a fixed order so a config round-trips byte-identically.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Candidates taken from the base retriever per log.
    pub k_p: usize,
    /// Core perspectives kept after aggregation.
    pub k_d: usize,
    /// History size for stage-1 random sampling.
    pub k_s1: usize,
    /// History size after stage-2 selection.
    pub k_s2: usize,
    pub k_simple_neg: usize,
    pub k_hard_neg: usize,
    pub embedding_dim: usize,
    pub rng_seed: u64,
    /// Fraction of each user's logs that go to the train split.
    pub split_fraction: f64,
    /// Maximum perspective-extraction calls per dataset.
    pub perspective_budget: usize,
    /// Character budget for any rendered prompt.
    pub prompt_char_budget: usize,
    /// Max characters requested from `generate`.
    pub max_generation_chars: usize,
    /// Fraction of train logs kept when emitting training data.
    pub train_fraction: f64,
    /// Drop the candidate itself from the history cascade.
    pub exclude_candidate_from_history: bool,
    /// Skip hard negatives that the user already purchased.
    pub hard_neg_exclude_history: bool,
    /// Aggregate perspectives over every log instead of train logs only.
    pub perspectives_from_all_logs: bool,
    /// Tolerated malformed input lines, as a fraction of all lines.
    pub malformed_threshold: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            k_p: 10,
            k_d: 20,
            k_s1: 5,
            k_s2: 2,
            k_simple_neg: 2,
            k_hard_neg: 3,
            embedding_dim: 64,
            rng_seed: 42,
            split_fraction: 0.7,
            perspective_budget: 1000,
            prompt_char_budget: 8192,
            max_generation_chars: 2048,
            train_fraction: 1.0,
            exclude_candidate_from_history: false,
            hard_neg_exclude_history: false,
            perspectives_from_all_logs: false,
            malformed_threshold: 0.001,
        }
    }
}

const KEYS: &[&str] = &[
    "k_p",
    "k_d",
    "k_s1",
    "k_s2",
    "k_simple_neg",
    "k_hard_neg",
    "embedding_dim",
    "rng_seed",
    "split_fraction",
    "perspective_budget",
    "prompt_char_budget",
    "max_generation_chars",
    "train_fraction",
    "exclude_candidate_from_history",
    "hard_neg_exclude_history",
    "perspectives_from_all_logs",
    "malformed_threshold",
];

/// Check every config invariant; an empty result means the config is valid.
pub fn validate_config(cfg: &PipelineConfig) -> Vec<String> {
    let mut out = Vec::new();
    for (name, v) in [
        ("K_p", cfg.k_p),
        ("K_d", cfg.k_d),
        ("K_s1", cfg.k_s1),
        ("K_s2", cfg.k_s2),
        ("embedding_dim", cfg.embedding_dim),
        ("prompt_char_budget", cfg.prompt_char_budget),
        ("max_generation_chars", cfg.max_generation_chars),
    ] {
        if v == 0 {
            out.push(format!("{name} must be positive"));
        }
    }
    if cfg.k_s2 > cfg.k_s1 {
        out.push("K_s2 exceeds K_s1".to_string());
    }
    if cfg.k_hard_neg >= cfg.k_p {
        out.push("K_hard_neg must be < K_p".to_string());
    }
    if !(cfg.split_fraction > 0.0 && cfg.split_fraction < 1.0) {
        out.push("split_fraction must be in (0, 1)".to_string());
    }
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction <= 1.0) {
        out.push("train_fraction must be in (0, 1]".to_string());
    }
    if !(0.0..=1.0).contains(&cfg.malformed_threshold) {
        out.push("malformed_threshold must be in [0, 1]".to_string());
    }
    out
}

/// Extra invariants that only apply when emitting training data.
pub fn validate_for_training(cfg: &PipelineConfig) -> Vec<String> {
    let mut out = validate_config(cfg);
    if cfg.k_simple_neg + cfg.k_hard_neg == 0 {
        out.push("K_simple_neg + K_hard_neg must be at least 1".to_string());
    }
    out
}

fn parse_value<T: FromStr>(key: &str, raw: &str, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>()
        .map_err(|e| Error::Config(format!("line {line}: bad value for {key}: {e}")))
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected key=value")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {line}: duplicate key {key}")));
            }
            match key {
                "k_p" => cfg.k_p = parse_value(key, value, line)?,
                "k_d" => cfg.k_d = parse_value(key, value, line)?,
                "k_s1" => cfg.k_s1 = parse_value(key, value, line)?,
                "k_s2" => cfg.k_s2 = parse_value(key, value, line)?,
                "k_simple_neg" => cfg.k_simple_neg = parse_value(key, value, line)?,
                "k_hard_neg" => cfg.k_hard_neg = parse_value(key, value, line)?,
                "embedding_dim" => cfg.embedding_dim = parse_value(key, value, line)?,
                "rng_seed" => cfg.rng_seed = parse_value(key, value, line)?,
                "split_fraction" => cfg.split_fraction = parse_value(key, value, line)?,
                "perspective_budget" => cfg.perspective_budget = parse_value(key, value, line)?,
                "prompt_char_budget" => cfg.prompt_char_budget = parse_value(key, value, line)?,
                "max_generation_chars" => cfg.max_generation_chars = parse_value(key, value, line)?,
                "train_fraction" => cfg.train_fraction = parse_value(key, value, line)?,
                "exclude_candidate_from_history" => {
                    cfg.exclude_candidate_from_history = parse_value(key, value, line)?
                }
                "hard_neg_exclude_history" => {
                    cfg.hard_neg_exclude_history = parse_value(key, value, line)?
                }
                "perspectives_from_all_logs" => {
                    cfg.perspectives_from_all_logs = parse_value(key, value, line)?
                }
                "malformed_threshold" => cfg.malformed_threshold = parse_value(key, value, line)?,
                other => {
                    return Err(Error::Config(format!(
                        "line {line}: unknown key {other} (known: {})",
                        KEYS.join(", ")
                    )))
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("k_p", &self.k_p);
        put("k_d", &self.k_d);
        put("k_s1", &self.k_s1);
        put("k_s2", &self.k_s2);
        put("k_simple_neg", &self.k_simple_neg);
        put("k_hard_neg", &self.k_hard_neg);
        put("embedding_dim", &self.embedding_dim);
        put("rng_seed", &self.rng_seed);
        put("split_fraction", &self.split_fraction);
        put("perspective_budget", &self.perspective_budget);
        put("prompt_char_budget", &self.prompt_char_budget);
        put("max_generation_chars", &self.max_generation_chars);
        put("train_fraction", &self.train_fraction);
        put(
            "exclude_candidate_from_history",
            &self.exclude_candidate_from_history,
        );
        put("hard_neg_exclude_history", &self.hard_neg_exclude_history);
        put(
            "perspectives_from_all_logs",
            &self.perspectives_from_all_logs,
        );
        put("malformed_threshold", &self.malformed_threshold);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = PipelineConfig {
            k_p: 10,
            k_d: 20,
            k_s1: 5,
            k_s2: 2,
            k_simple_neg: 2,
            k_hard_neg: 3,
            ..Default::default()
        };
        assert!(validate_config(&cfg).is_empty());
        assert!(validate_for_training(&cfg).is_empty());
    }

    #[test]
    fn k_s2_above_k_s1() {
        let cfg = PipelineConfig {
            k_s1: 5,
            k_s2: 7,
            ..Default::default()
        };
        assert_eq!(validate_config(&cfg), vec!["K_s2 exceeds K_s1".to_string()]);
    }

    #[test]
    fn hard_neg_not_below_k_p() {
        let cfg = PipelineConfig {
            k_p: 10,
            k_hard_neg: 10,
            ..Default::default()
        };
        assert_eq!(
            validate_config(&cfg),
            vec!["K_hard_neg must be < K_p".to_string()]
        );
    }

    #[test]
    fn training_needs_some_negatives() {
        let cfg = PipelineConfig {
            k_simple_neg: 0,
            k_hard_neg: 0,
            ..Default::default()
        };
        assert!(validate_config(&cfg).is_empty());
        assert_eq!(validate_for_training(&cfg).len(), 1);
    }

    #[test]
    fn parse_comments_and_reject_unknown() {
        let cfg = PipelineConfig::parse("# header\nk_p = 12 # inline\n\nk_s2=1\n").unwrap();
        assert_eq!(cfg.k_p, 12);
        assert_eq!(cfg.k_s2, 1);
        assert!(matches!(
            PipelineConfig::parse("nope=1"),
            Err(Error::Config(_))
        ));
        assert!(PipelineConfig::parse("k_p=ten").is_err());
        assert!(PipelineConfig::parse("k_p").is_err());
        assert!(PipelineConfig::parse("k_p=1\nk_p=2").is_err());
    }

    proptest! {
        #[test]
        fn round_trips(
            k_p in 1usize..100, k_d in 1usize..100, k_s1 in 1usize..20, k_s2 in 1usize..20,
            sn in 0usize..10, hn in 0usize..10, dim in 1usize..1024, seed in any::<u64>(),
            split in 0.01f64..0.99, flag in any::<bool>(),
        ) {
            let cfg = PipelineConfig {
                k_p, k_d, k_s1, k_s2, k_simple_neg: sn, k_hard_neg: hn,
                embedding_dim: dim, rng_seed: seed, split_fraction: split,
                exclude_candidate_from_history: flag,
                ..Default::default()
            };
            let text = cfg.to_config_string();
            let back = PipelineConfig::parse(&text).unwrap();
            prop_assert_eq!(&back, &cfg);
            prop_assert_eq!(back.to_config_string(), text);
        }
    }
}
