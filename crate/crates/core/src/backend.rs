//! Inference backends.
//!
//! Every scoring, embedding and generation call in the pipeline goes through
//! [`Backend`]. Two implementations ship: [`MockBackend`], a pure function of
//! its inputs and seed, and [`HttpBackend`], a blocking JSON client for a
//! remote inference endpoint.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{DecisionLogits, EmbeddingVector};
use crate::error::{Error, Result};
use crate::prompt::RenderedPrompt;
use crate::util::hash64;

pub const ENDPOINT_ENV: &str = "PPSR_BACKEND_ENDPOINT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub backend_id: String,
    pub kind: BackendKind,
    pub embedding_dim: usize,
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    /// Tag copied onto every embedding, naming the model stage that made it.
    pub stage_tag: String,
}

impl BackendDescriptor {
    pub fn mock(embedding_dim: usize) -> Self {
        BackendDescriptor {
            backend_id: "mock".into(),
            kind: BackendKind::Mock,
            embedding_dim,
            endpoint: None,
            timeout_ms: 30_000,
            max_retries: 0,
            max_in_flight: 8,
            stage_tag: "stage1".into(),
        }
    }

    pub fn http(endpoint: impl Into<String>, embedding_dim: usize) -> Self {
        BackendDescriptor {
            backend_id: "http".into(),
            kind: BackendKind::Http,
            embedding_dim,
            endpoint: Some(endpoint.into()),
            timeout_ms: 30_000,
            max_retries: 3,
            max_in_flight: 8,
            stage_tag: "stage1".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        if self.timeout_ms == 0 {
            return Err(Error::Config("timeout_ms must be positive".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be positive".into()));
        }
        if self.kind == BackendKind::Http && self.endpoint.as_deref().unwrap_or("").is_empty() {
            return Err(Error::Config("http backend requires an endpoint".into()));
        }
        Ok(())
    }
}

pub trait Backend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    /// Scores of the "yes" and "no" decision tokens for the next word.
    fn score_decision(&self, prompt: &RenderedPrompt) -> Result<DecisionLogits>;

    fn embed(&self, text: &str, image_ref: Option<&str>) -> Result<EmbeddingVector>;

    fn generate(&self, prompt: &RenderedPrompt, max_chars: usize) -> Result<String>;
}

/// Truncate to at most `max_chars` characters on a char boundary.
fn truncate_chars(s: &str, max_chars: usize) -> &str {
    match s.char_indices().nth(max_chars) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn check_embedding(desc: &BackendDescriptor, values: Vec<f64>) -> Result<EmbeddingVector> {
    if values.len() != desc.embedding_dim {
        return Err(Error::DimensionMismatch {
            expected: desc.embedding_dim,
            actual: values.len(),
        });
    }
    EmbeddingVector::new(values, desc.backend_id.clone(), desc.stage_tag.clone())
}

/// Deterministic stand-in for a real model.
///
/// Logits come from a keyed hash of the prompt text, image refs and seed,
/// mapped into [-5, 5]. Embeddings are unit vectors expanded from a keyed
/// hash. Generations follow the marker format the summarization parsers
/// expect.
#[derive(Debug, Clone)]
pub struct MockBackend {
    desc: BackendDescriptor,
    seed: u64,
}

const MOCK_PERSPECTIVES: &[&str] = &[
    "size",
    "color",
    "material",
    "quantity",
    "compatibility",
    "brand",
    "price",
    "durability",
    "use case",
    "weight",
    "design",
    "capacity",
    "ease of use",
    "packaging",
    "warranty",
    "finish",
];

impl MockBackend {
    pub fn new(seed: u64, embedding_dim: usize) -> Self {
        MockBackend {
            desc: BackendDescriptor::mock(embedding_dim),
            seed,
        }
    }

    pub fn with_descriptor(desc: BackendDescriptor, seed: u64) -> Self {
        MockBackend { desc, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn key(&self, tag: &str, prompt: &RenderedPrompt) -> u64 {
        let mut parts: Vec<&[u8]> = vec![tag.as_bytes(), prompt.text.as_bytes()];
        parts.extend(prompt.image_refs.iter().map(|s| s.as_bytes()));
        let seed = self.seed.to_le_bytes();
        parts.push(&seed);
        hash64(&parts)
    }

    fn mock_perspectives(&self, prompt: &RenderedPrompt) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(self.key("perspectives", prompt));
        let n = rng.gen_range(3..=6);
        let picks: Vec<&str> = (0..n)
            .map(|_| {
                // Skewed toward the front so corpus frequencies differ.
                let u: f64 = rng.gen();
                MOCK_PERSPECTIVES[(u * u * MOCK_PERSPECTIVES.len() as f64) as usize]
            })
            .collect();
        format!("PERSPECTIVES: {}", picks.join(", "))
    }

    fn mock_summary(&self, prompt: &RenderedPrompt) -> String {
        let description = prompt
            .text
            .rsplit_once("Product description:\n")
            .map(|(_, d)| d.trim())
            .unwrap_or("");
        let words: Vec<&str> = description.split_whitespace().collect();
        let keep = words.len().div_ceil(2).clamp(1, 40);
        let summary = if words.is_empty() {
            "mock summary".to_string()
        } else {
            words[..keep.min(words.len())].join(" ")
        };
        format!(
            "REASONING: the description mentions {} words; keeping the leading ones.\nSUMMARY: {}",
            words.len(),
            summary
        )
    }
}

fn unit_interval(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

impl Backend for MockBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.desc
    }

    fn score_decision(&self, prompt: &RenderedPrompt) -> Result<DecisionLogits> {
        let yes = unit_interval(self.key("score-yes", prompt)) * 10.0 - 5.0;
        let no = unit_interval(self.key("score-no", prompt)) * 10.0 - 5.0;
        DecisionLogits::new(yes, no)
    }

    fn embed(&self, text: &str, image_ref: Option<&str>) -> Result<EmbeddingVector> {
        if text.is_empty() {
            return Err(Error::InvalidInput("embed text must be non-empty".into()));
        }
        let key = hash64(&[
            b"embed",
            text.as_bytes(),
            image_ref.unwrap_or("").as_bytes(),
            &self.seed.to_le_bytes(),
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let mut values: Vec<f64> = (0..self.desc.embedding_dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            values[0] = 1.0;
        } else {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        check_embedding(&self.desc, values)
    }

    fn generate(&self, prompt: &RenderedPrompt, max_chars: usize) -> Result<String> {
        if max_chars == 0 {
            return Err(Error::InvalidInput("max_chars must be positive".into()));
        }
        let text = if prompt.text.contains("SUMMARY:") {
            self.mock_summary(prompt)
        } else if prompt.text.contains("PERSPECTIVES:") {
            self.mock_perspectives(prompt)
        } else {
            format!("mock output {:016x}", self.key("generate", prompt))
        };
        Ok(truncate_chars(&text, max_chars).to_string())
    }
}

/// Wraps a backend and counts calls per operation.
pub struct CountingBackend<'a> {
    inner: &'a dyn Backend,
    pub scores: AtomicUsize,
    pub embeds: AtomicUsize,
    pub generations: AtomicUsize,
}

impl<'a> CountingBackend<'a> {
    pub fn new(inner: &'a dyn Backend) -> Self {
        CountingBackend {
            inner,
            scores: AtomicUsize::new(0),
            embeds: AtomicUsize::new(0),
            generations: AtomicUsize::new(0),
        }
    }

    pub fn total(&self) -> usize {
        self.scores.load(Ordering::Relaxed)
            + self.embeds.load(Ordering::Relaxed)
            + self.generations.load(Ordering::Relaxed)
    }
}

impl Backend for CountingBackend<'_> {
    fn descriptor(&self) -> &BackendDescriptor {
        self.inner.descriptor()
    }

    fn score_decision(&self, prompt: &RenderedPrompt) -> Result<DecisionLogits> {
        self.scores.fetch_add(1, Ordering::Relaxed);
        self.inner.score_decision(prompt)
    }

    fn embed(&self, text: &str, image_ref: Option<&str>) -> Result<EmbeddingVector> {
        self.embeds.fetch_add(1, Ordering::Relaxed);
        self.inner.embed(text, image_ref)
    }

    fn generate(&self, prompt: &RenderedPrompt, max_chars: usize) -> Result<String> {
        self.generations.fetch_add(1, Ordering::Relaxed);
        self.inner.generate(prompt, max_chars)
    }
}

/// Counting semaphore bounding concurrent in-flight requests.
#[derive(Debug)]
pub struct Permits {
    available: Mutex<usize>,
    cv: Condvar,
}

pub struct Permit<'a>(&'a Permits);

impl Permits {
    pub fn new(n: usize) -> Self {
        Permits {
            available: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().expect("permit lock");
        while *n == 0 {
            n = self.cv.wait(n).expect("permit lock");
        }
        *n -= 1;
        Permit(self)
    }

    pub fn available(&self) -> usize {
        *self.available.lock().expect("permit lock")
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("permit lock") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireMode {
    Score,
    Embed,
    Generate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub request_id: String,
    pub mode: WireMode,
    pub text: String,
    pub image_refs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_chars: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WireLogits {
    #[serde(default)]
    pub yes: Option<f64>,
    #[serde(default)]
    pub no: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub request_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<WireLogits>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

/// Blocking JSON client. Retries reuse the request id so the server can
/// deduplicate; responses must echo it back.
pub struct HttpBackend {
    desc: BackendDescriptor,
    endpoint: String,
    client: reqwest::blocking::Client,
    permits: Permits,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("desc", &self.desc)
            .finish_non_exhaustive()
    }
}

enum Attempt {
    Retry(String),
    Fatal(Error),
}

impl HttpBackend {
    pub fn new(desc: BackendDescriptor) -> Result<Self> {
        desc.validate()?;
        let endpoint = desc.endpoint.clone().unwrap_or_default();
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(desc.timeout_ms))
            .build()
            .map_err(|e| Error::Backend(format!("failed to build http client: {e}")))?;
        let permits = Permits::new(desc.max_in_flight);
        Ok(HttpBackend {
            desc,
            endpoint,
            client,
            permits,
        })
    }

    fn attempt(&self, req: &WireRequest) -> std::result::Result<WireResponse, Attempt> {
        let resp = self
            .client
            .post(&self.endpoint)
            .json(req)
            .send()
            .map_err(|e| Attempt::Retry(format!("request failed: {e}")))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Attempt::Retry(format!("endpoint returned {status}")));
        }
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            return Err(Attempt::Fatal(Error::Backend(format!(
                "endpoint returned {status}: {body}"
            ))));
        }
        let body: WireResponse = resp
            .json()
            .map_err(|e| Attempt::Fatal(Error::Backend(format!("bad response body: {e}"))))?;
        if body.request_id != req.request_id {
            return Err(Attempt::Retry(format!(
                "response for request {} while waiting for {}",
                body.request_id, req.request_id
            )));
        }
        Ok(body)
    }

    pub fn call(&self, mut req: WireRequest) -> Result<WireResponse> {
        req.request_id = uuid::Uuid::new_v4().to_string();
        let _permit = self.permits.acquire();
        let mut last = String::new();
        for attempt in 0..=self.desc.max_retries {
            if attempt > 0 {
                let backoff = 50u64.saturating_mul(1 << attempt.min(6)).min(2_000);
                std::thread::sleep(Duration::from_millis(backoff));
            }
            match self.attempt(&req) {
                Ok(r) => return Ok(r),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => {
                    tracing::warn!(request_id = %req.request_id, attempt, %msg, "backend call failed");
                    last = msg;
                }
            }
        }
        Err(Error::Backend(format!(
            "retries exhausted after {} attempts: {last}",
            self.desc.max_retries + 1
        )))
    }

    fn request(&self, mode: WireMode, prompt: &RenderedPrompt) -> WireRequest {
        WireRequest {
            request_id: String::new(),
            mode,
            text: prompt.text.clone(),
            image_refs: prompt.image_refs.clone(),
            candidates: None,
            max_chars: None,
        }
    }
}

impl Backend for HttpBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.desc
    }

    fn score_decision(&self, prompt: &RenderedPrompt) -> Result<DecisionLogits> {
        let mut req = self.request(WireMode::Score, prompt);
        req.candidates = Some(vec!["yes".into(), "no".into()]);
        let logits = self.call(req)?.logits.unwrap_or_default();
        let yes = logits.yes.ok_or(Error::MissingDecisionToken("yes"))?;
        let no = logits.no.ok_or(Error::MissingDecisionToken("no"))?;
        DecisionLogits::new(yes, no)
    }

    fn embed(&self, text: &str, image_ref: Option<&str>) -> Result<EmbeddingVector> {
        if text.is_empty() {
            return Err(Error::InvalidInput("embed text must be non-empty".into()));
        }
        let prompt = RenderedPrompt {
            text: text.to_string(),
            image_refs: image_ref.map(str::to_string).into_iter().collect(),
        };
        let resp = self.call(self.request(WireMode::Embed, &prompt))?;
        let values = resp
            .vector
            .ok_or_else(|| Error::Backend("response missing vector".into()))?;
        check_embedding(&self.desc, values)
    }

    fn generate(&self, prompt: &RenderedPrompt, max_chars: usize) -> Result<String> {
        if max_chars == 0 {
            return Err(Error::InvalidInput("max_chars must be positive".into()));
        }
        let mut req = self.request(WireMode::Generate, prompt);
        req.max_chars = Some(max_chars);
        let text = self.call(req)?.text.unwrap_or_default();
        if text.trim().is_empty() {
            return Err(Error::Backend("empty generation".into()));
        }
        Ok(truncate_chars(&text, max_chars).to_string())
    }
}

/// Build a backend from its id: `mock`, `http` (endpoint from
/// `PPSR_BACKEND_ENDPOINT`) or the endpoint URL itself. The env var wins.
pub fn from_id(
    id: &str,
    seed: u64,
    embedding_dim: usize,
    stage_tag: &str,
) -> Result<Box<dyn Backend>> {
    let env_endpoint = std::env::var(ENDPOINT_ENV).ok().filter(|s| !s.is_empty());
    match id {
        "mock" => {
            let mut desc = BackendDescriptor::mock(embedding_dim);
            desc.stage_tag = stage_tag.to_string();
            Ok(Box::new(MockBackend::with_descriptor(desc, seed)))
        }
        _ if id == "http" || id.starts_with("http://") || id.starts_with("https://") => {
            let endpoint = env_endpoint
                .or_else(|| (id != "http").then(|| id.to_string()))
                .ok_or_else(|| {
                    Error::Config(format!("http backend needs {ENDPOINT_ENV} or a URL id"))
                })?;
            let mut desc = BackendDescriptor::http(endpoint, embedding_dim);
            desc.stage_tag = stage_tag.to_string();
            Ok(Box::new(HttpBackend::new(desc)?))
        }
        other => Err(Error::UnknownId {
            kind: "backend",
            id: other.to_string(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prompt(text: &str) -> RenderedPrompt {
        RenderedPrompt {
            text: text.into(),
            image_refs: vec![],
        }
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn mock_scores_are_deterministic_and_bounded() {
        let m = MockBackend::new(1, 16);
        let a = m.score_decision(&prompt("hello")).unwrap();
        assert_eq!(a, m.score_decision(&prompt("hello")).unwrap());
        for i in 0..500 {
            let l = m.score_decision(&prompt(&format!("p{i}"))).unwrap();
            assert!((-5.0..=5.0).contains(&l.yes) && (-5.0..=5.0).contains(&l.no));
        }
    }

    #[test]
    fn mock_seed_changes_scores() {
        let a = MockBackend::new(1, 16)
            .score_decision(&prompt("same"))
            .unwrap();
        let b = MockBackend::new(2, 16)
            .score_decision(&prompt("same"))
            .unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn mock_images_change_scores() {
        let m = MockBackend::new(1, 16);
        let mut p = prompt("same");
        let a = m.score_decision(&p).unwrap();
        p.image_refs.push("x.jpg".into());
        assert_ne!(a, m.score_decision(&p).unwrap());
    }

    #[test]
    fn mock_embeddings() {
        let m = MockBackend::new(7, 64);
        let a = m.embed("a", None).unwrap();
        assert_eq!(a, m.embed("a", None).unwrap());
        assert_eq!(a.dim(), 64);
        assert_eq!(a.stage_tag, "stage1");
        let b = m.embed("b", None).unwrap();
        assert!(cosine(&a.values, &b.values) < 1.0);
        for t in ["a", "b", "long text here", "x"] {
            let v = m.embed(t, Some("img.jpg")).unwrap();
            assert!((v.norm() - 1.0).abs() < 1e-6);
        }
        assert!(m.embed("", None).is_err());
    }

    #[test]
    fn mock_generate_markers() {
        let m = MockBackend::new(1, 8);
        let out = m
            .generate(&prompt("... starts with \"PERSPECTIVES:\" ..."), 500)
            .unwrap();
        assert!(out.starts_with("PERSPECTIVES: "));
        let out = m
            .generate(
                &prompt("write \"SUMMARY:\"\n\nProduct description:\none two three four five"),
                500,
            )
            .unwrap();
        assert!(out.contains("\nSUMMARY: one two three"));
        assert!(m.generate(&prompt("x"), 0).is_err());
        assert_eq!(
            m.generate(&prompt("anything"), 5).unwrap().chars().count(),
            5
        );
    }

    #[test]
    fn permits_bound() {
        let p = Permits::new(2);
        let a = p.acquire();
        let _b = p.acquire();
        assert_eq!(p.available(), 0);
        drop(a);
        assert_eq!(p.available(), 1);
    }

    #[test]
    fn descriptor_validation() {
        let mut d = BackendDescriptor::http("", 8);
        assert!(d.validate().is_err());
        d.endpoint = Some("http://localhost:1".into());
        assert!(d.validate().is_ok());
        d.embedding_dim = 0;
        assert!(d.validate().is_err());
    }

    #[test]
    fn unknown_backend_id() {
        assert!(matches!(
            from_id("gpt", 0, 8, "stage1"),
            Err(Error::UnknownId { .. })
        ));
        assert_eq!(
            from_id("mock", 0, 8, "stage2")
                .unwrap()
                .descriptor()
                .stage_tag,
            "stage2"
        );
    }
}
