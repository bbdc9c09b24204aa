//! External model clients behind small traits, deterministic mocks, and a
//! remote client speaking one JSON object per request over a transport.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::cosine;
use crate::text::TextEncoder;

/// Alignment between one frame embedding and a text.
pub trait Scorer: Send + Sync {
    fn score(&self, frame: &[f64], text: &str) -> Result<f64>;
}

/// One caption per key-frame embedding.
pub trait Captioner: Send + Sync {
    fn caption(&self, frame: &[f64]) -> Result<String>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Long,
    Short,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Long => "long",
            Variant::Short => "short",
        }
    }
}

/// Everything a rewriter may use. Remote models only see `prompt`; mocks
/// work from the structured fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewriteRequest {
    pub variant: Variant,
    pub prompt: String,
    pub raw_text: String,
    pub captions: Vec<String>,
}

pub trait Rewriter: Send + Sync {
    fn rewrite(&self, req: &RewriteRequest) -> Result<String>;
}

#[derive(Clone)]
pub struct ClientSuite {
    pub scorer: Arc<dyn Scorer>,
    pub captioner: Arc<dyn Captioner>,
    pub rewriter: Arc<dyn Rewriter>,
}

impl ClientSuite {
    /// Cosine scorer, nearest-word captioner and the template mock rewriter,
    /// all over the toy text encoder of width `dim`.
    pub fn mock(dim: usize, text_seed: u64) -> Self {
        let encoder = TextEncoder::new(dim, 1, text_seed);
        Self {
            scorer: Arc::new(CosineScorer::new(encoder.clone())),
            captioner: Arc::new(NearestWordCaptioner::new(encoder, default_vocabulary(), 3)),
            rewriter: Arc::new(MockRewriter),
        }
    }

    /// Every call goes through `transport`.
    pub fn remote<T: Transport + 'static>(transport: T, policy: RetryPolicy) -> Self {
        let client = Arc::new(RemoteClient::new(transport, policy));
        Self {
            scorer: client.clone(),
            captioner: client.clone(),
            rewriter: client,
        }
    }
}

/// Words the mock captioner may emit.
pub fn default_vocabulary() -> Vec<String> {
    use crate::synth::{BACKGROUND, OBJECTS, SCENES};
    OBJECTS.iter().chain(BACKGROUND).chain(SCENES).map(|s| s.to_string()).collect()
}

/// Cosine between the frame and the text's CLS embedding.
pub struct CosineScorer {
    encoder: TextEncoder,
}

impl CosineScorer {
    pub fn new(encoder: TextEncoder) -> Self {
        Self { encoder }
    }
}

impl Scorer for CosineScorer {
    fn score(&self, frame: &[f64], text: &str) -> Result<f64> {
        if frame.len() != self.encoder.dim() {
            return Err(Error::Client(format!(
                "frame width {} does not match scorer width {}",
                frame.len(),
                self.encoder.dim()
            )));
        }
        Ok(cosine(frame, &self.encoder.cls(text)))
    }
}

pub struct ConstantScorer(pub f64);

impl Scorer for ConstantScorer {
    fn score(&self, _: &[f64], _: &str) -> Result<f64> {
        Ok(self.0)
    }
}

/// Captions a frame with a tag derived from a digest of its exact bits.
pub struct HashCaptioner;

impl Captioner for HashCaptioner {
    fn caption(&self, frame: &[f64]) -> Result<String> {
        let mut h = Sha256::new();
        for x in frame {
            h.update(x.to_le_bytes());
        }
        let d = h.finalize();
        Ok(format!("frame {:02x}{:02x}{:02x}{:02x}", d[0], d[1], d[2], d[3]))
    }
}

/// Names the `words` vocabulary entries most similar to the frame, best
/// first (earlier entries win ties).
pub struct NearestWordCaptioner {
    vocab: Vec<String>,
    embeddings: Vec<Vec<f64>>,
    words: usize,
}

impl NearestWordCaptioner {
    pub fn new(encoder: TextEncoder, vocab: Vec<String>, words: usize) -> Self {
        let embeddings = vocab.iter().map(|w| encoder.cls(w)).collect();
        Self { vocab, embeddings, words }
    }
}

impl Captioner for NearestWordCaptioner {
    fn caption(&self, frame: &[f64]) -> Result<String> {
        if frame.iter().any(|x| !x.is_finite()) {
            return Err(Error::Client("frame embedding is not finite".into()));
        }
        let mut ranked: Vec<(usize, f64)> = self.embeddings.iter().map(|e| cosine(frame, e)).enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(ranked
            .iter()
            .take(self.words)
            .map(|&(i, _)| self.vocab[i].as_str())
            .collect::<Vec<_>>()
            .join(" "))
    }
}

/// Upper bound on the mock's short rewrite.
pub const MOCK_SHORT_WORDS: usize = 15;

/// Deterministic stand-in for a language model. The short form joins the
/// first three words of each caption, cut to [`MOCK_SHORT_WORDS`]; the long
/// form restates the raw text and walks through every caption.
pub struct MockRewriter;

impl Rewriter for MockRewriter {
    fn rewrite(&self, req: &RewriteRequest) -> Result<String> {
        match req.variant {
            Variant::Short => {
                let words: Vec<&str> = req
                    .captions
                    .iter()
                    .flat_map(|c| c.split_whitespace().take(3))
                    .take(MOCK_SHORT_WORDS)
                    .collect();
                Ok(words.join(" "))
            }
            Variant::Long => {
                let mut out = format!("The video is about {}.", req.raw_text.trim());
                for (i, c) in req.captions.iter().enumerate() {
                    out.push_str(&format!(" In moment {} the camera shows {} clearly in view.", i + 1, c));
                }
                out.push_str(" Overall it presents one continuous event.");
                Ok(out)
            }
        }
    }
}

/// Transport failure, split by whether retrying can help.
#[derive(Debug, Clone, PartialEq)]
pub enum TransportError {
    Transient(String),
    Fatal(String),
}

/// Carries one request body to a model server and returns its reply.
pub trait Transport: Send + Sync {
    fn call(&self, body: &str, timeout: Duration) -> std::result::Result<String, TransportError>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub retries: usize,
    pub timeout_ms: u64,
    /// Wait before retry `k` (1-based) is `backoff_ms · 2^(k−1)`.
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 3,
            timeout_ms: 30_000,
            backoff_ms: 200,
        }
    }
}

/// POSTs JSON bodies to one endpoint. Connection failures and 5xx/429
/// replies are transient.
pub struct HttpTransport {
    url: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            agent: ureq::AgentBuilder::new().build(),
        }
    }
}

impl Transport for HttpTransport {
    fn call(&self, body: &str, timeout: Duration) -> std::result::Result<String, TransportError> {
        let resp = self
            .agent
            .post(&self.url)
            .timeout(timeout)
            .set("Content-Type", "application/json")
            .send_string(body);
        match resp {
            Ok(r) => r.into_string().map_err(|e| TransportError::Transient(e.to_string())),
            Err(ureq::Error::Status(code, r)) => {
                let msg = format!("HTTP {code}: {}", r.into_string().unwrap_or_default());
                if code == 429 || code >= 500 {
                    Err(TransportError::Transient(msg))
                } else {
                    Err(TransportError::Fatal(msg))
                }
            }
            Err(e) => Err(TransportError::Transient(e.to_string())),
        }
    }
}

/// Scorer, captioner and rewriter over a [`Transport`]. Requests are JSON
/// objects with an `op` field; replies carry `score`, `caption` or `text`.
pub struct RemoteClient<T> {
    transport: T,
    policy: RetryPolicy,
}

impl<T: Transport> RemoteClient<T> {
    pub fn new(transport: T, policy: RetryPolicy) -> Self {
        Self { transport, policy }
    }

    fn request(&self, body: &Value, field: &str) -> Result<Value> {
        let text = body.to_string();
        let timeout = Duration::from_millis(self.policy.timeout_ms);
        let mut last = String::new();
        for attempt in 0..=self.policy.retries {
            if attempt > 0 && self.policy.backoff_ms > 0 {
                std::thread::sleep(Duration::from_millis(self.policy.backoff_ms << (attempt - 1).min(16)));
            }
            match self.transport.call(&text, timeout) {
                Ok(reply) => {
                    let v: Value = serde_json::from_str(&reply)
                        .map_err(|e| Error::Client(format!("unparseable reply: {e}")))?;
                    return v
                        .get(field)
                        .cloned()
                        .ok_or_else(|| Error::Client(format!("reply lacks {field:?}: {reply}")));
                }
                Err(TransportError::Fatal(m)) => return Err(Error::Client(m)),
                Err(TransportError::Transient(m)) => {
                    log::warn!("transient client failure (attempt {}): {m}", attempt + 1);
                    last = m;
                }
            }
        }
        Err(Error::Client(format!(
            "gave up after {} attempts: {last}",
            self.policy.retries + 1
        )))
    }
}

impl<T: Transport> Scorer for RemoteClient<T> {
    fn score(&self, frame: &[f64], text: &str) -> Result<f64> {
        let v = self.request(&json!({"op": "score", "frame": frame, "text": text}), "score")?;
        v.as_f64().ok_or_else(|| Error::Client(format!("score is not a number: {v}")))
    }
}

impl<T: Transport> Captioner for RemoteClient<T> {
    fn caption(&self, frame: &[f64]) -> Result<String> {
        let v = self.request(&json!({"op": "caption", "frame": frame}), "caption")?;
        v.as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Client(format!("caption is not a string: {v}")))
    }
}

impl<T: Transport> Rewriter for RemoteClient<T> {
    fn rewrite(&self, req: &RewriteRequest) -> Result<String> {
        let mut body = serde_json::to_value(req).map_err(|e| Error::Client(e.to_string()))?;
        body["op"] = json!("rewrite");
        let v = self.request(&body, "text")?;
        v.as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Client(format!("text is not a string: {v}")))
    }
}

/// In-process server answering the remote protocol with local clients.
pub struct LocalTransport {
    pub suite: ClientSuite,
}

impl LocalTransport {
    fn serve(&self, body: &str) -> Result<Value> {
        let req: Value = serde_json::from_str(body).map_err(|e| Error::Client(e.to_string()))?;
        let frame = || -> Result<Vec<f64>> {
            serde_json::from_value(req["frame"].clone()).map_err(|e| Error::Client(e.to_string()))
        };
        match req["op"].as_str() {
            Some("score") => {
                let text = req["text"].as_str().unwrap_or_default();
                Ok(json!({"score": self.suite.scorer.score(&frame()?, text)?}))
            }
            Some("caption") => Ok(json!({"caption": self.suite.captioner.caption(&frame()?)?})),
            Some("rewrite") => {
                let r: RewriteRequest = serde_json::from_value(req).map_err(|e| Error::Client(e.to_string()))?;
                Ok(json!({"text": self.suite.rewriter.rewrite(&r)?}))
            }
            other => Err(Error::Client(format!("unknown op {other:?}"))),
        }
    }
}

impl Transport for LocalTransport {
    fn call(&self, body: &str, _: Duration) -> std::result::Result<String, TransportError> {
        self.serve(body)
            .map(|v| v.to_string())
            .map_err(|e| TransportError::Fatal(e.to_string()))
    }
}

/// Fails the first `failures` calls with a transient error, then delegates.
pub struct FaultyTransport<T> {
    inner: T,
    failures: usize,
    calls: AtomicUsize,
}

impl<T> FaultyTransport<T> {
    pub fn new(inner: T, failures: usize) -> Self {
        Self {
            inner,
            failures,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<T: Transport> Transport for FaultyTransport<T> {
    fn call(&self, body: &str, timeout: Duration) -> std::result::Result<String, TransportError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if n < self.failures {
            return Err(TransportError::Transient(format!("injected failure {}", n + 1)));
        }
        self.inner.call(body, timeout)
    }
}

impl<T: Transport> Transport for Arc<T> {
    fn call(&self, body: &str, timeout: Duration) -> std::result::Result<String, TransportError> {
        (**self).call(body, timeout)
    }
}
