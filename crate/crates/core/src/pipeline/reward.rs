//! Rollout rewards: an offline proxy, a remote embedding service, and the
//! track-density shaping term.

use super::PipelineError;
use crate::dissonance::{d_total, DissonanceMatrix, DissonanceParams};
use crate::harmony::{analyze_skeleton, precision_recall, HarmonySkeleton};
use crate::metrics::track_density;
use crate::score::{write_midi, Score};
use base64::Engine;
use serde::{Deserialize, Serialize};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    Proxy,
    RemoteEmbedding,
    /// `base` plus the shaping term.
    Composite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Shaping {
    pub weight: f64,
    pub scale: f64,
}

impl Default for Shaping {
    fn default() -> Self {
        Self { weight: 0.2, scale: 4.0 }
    }
}

impl Shaping {
    /// `weight · tanh(trk / scale)`.
    pub fn term(&self, trk: f64) -> f64 {
        self.weight * (trk / self.scale).tanh()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardSpec {
    pub kind: RewardKind,
    /// Reward the composite kind adds shaping to.
    pub base: RewardKind,
    pub shaping: Shaping,
    pub remote: Option<RemoteConfig>,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            kind: RewardKind::Proxy,
            base: RewardKind::Proxy,
            shaping: Shaping::default(),
            remote: None,
        }
    }
}

/// `rec - D/(1+D)`: harmonic coverage of the skeleton minus squashed
/// dissonance, in `[-1, 1]`.
pub fn proxy_reward(score: &Score, sk: &HarmonySkeleton) -> Result<f64, PipelineError> {
    let d = d_total(score, sk, DissonanceParams::default(), &DissonanceMatrix::default())
        .map_err(|e| PipelineError::Reward(e.to_string()))?
        .total;
    let rec = precision_recall(sk, &analyze_skeleton(score)).map_or(0.0, |(_, r)| r);
    Ok((rec - d / (1.0 + d)).clamp(-1.0, 1.0))
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, PipelineError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(PipelineError::Reward(format!("embedding sizes {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(PipelineError::Reward("zero-length embedding".into()));
    }
    Ok(dot / (na * nb))
}

/// Length-normalized mean of a reference embedding set.
pub fn centroid(embeddings: &[Vec<f64>]) -> Result<Vec<f64>, PipelineError> {
    let first = embeddings
        .first()
        .ok_or_else(|| PipelineError::Reward("centroid of an empty set".into()))?;
    let dim = first.len();
    if dim == 0 || embeddings.iter().any(|e| e.len() != dim) {
        return Err(PipelineError::Reward("embeddings differ in dimension".into()));
    }
    let mut c = vec![0.0; dim];
    for e in embeddings {
        for (c, x) in c.iter_mut().zip(e) {
            *c += x / embeddings.len() as f64;
        }
    }
    let n = c.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < 1e-12 {
        return Err(PipelineError::Reward("centroid has zero length".into()));
    }
    Ok(c.into_iter().map(|x| x / n).collect())
}

/// Anything that maps a rendered score to an embedding vector.
pub trait Embedder: Sync {
    fn embed(&self, midi: &[u8]) -> Result<Vec<f64>, PipelineError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub url: String,
    /// Environment variable holding the bearer token.
    #[serde(default = "default_token_env")]
    pub token_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// Reference centroid the cosine is taken against.
    #[serde(default)]
    pub centroid: Vec<f64>,
}

fn default_token_env() -> String {
    "HARMORCH_REWARD_TOKEN".into()
}

fn default_timeout() -> u64 {
    30_000
}

fn default_in_flight() -> usize {
    4
}

#[derive(Serialize)]
struct EmbedRequest {
    midi_b64: String,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embedding: Vec<f64>,
}

/// HTTP client for the embedding service: `POST {"midi_b64": ...}` with a
/// bearer token, answered by `{"embedding": [...]}`.
pub struct HttpEmbedder {
    agent: ureq::Agent,
    url: String,
    token: Option<String>,
    slots: Mutex<usize>,
    freed: Condvar,
}

impl HttpEmbedder {
    pub fn new(cfg: &RemoteConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .build()
            .into();
        Self {
            agent,
            url: cfg.url.clone(),
            token: std::env::var(&cfg.token_env).ok(),
            slots: Mutex::new(cfg.max_in_flight.max(1)),
            freed: Condvar::new(),
        }
    }
}

impl Embedder for HttpEmbedder {
    fn embed(&self, midi: &[u8]) -> Result<Vec<f64>, PipelineError> {
        {
            let mut free = self.slots.lock().expect("slot lock");
            while *free == 0 {
                free = self.freed.wait(free).expect("slot lock");
            }
            *free -= 1;
        }
        let result = (|| {
            let body = EmbedRequest {
                midi_b64: base64::engine::general_purpose::STANDARD.encode(midi),
            };
            let mut req = self.agent.post(&self.url);
            if let Some(t) = &self.token {
                req = req.header("Authorization", &format!("Bearer {t}"));
            }
            let resp = req.send_json(&body).map_err(|e| PipelineError::Remote(e.to_string()))?;
            let parsed: EmbedResponse = resp
                .into_body()
                .read_json()
                .map_err(|e| PipelineError::Remote(format!("response: {e}")))?;
            Ok(parsed.embedding)
        })();
        *self.slots.lock().expect("slot lock") += 1;
        self.freed.notify_one();
        result
    }
}

fn base_reward(
    kind: RewardKind,
    score: &Score,
    sk: &HarmonySkeleton,
    spec: &RewardSpec,
    embedder: Option<&dyn Embedder>,
) -> Result<f64, PipelineError> {
    match kind {
        RewardKind::Proxy => proxy_reward(score, sk),
        RewardKind::RemoteEmbedding => {
            let e = embedder.ok_or_else(|| PipelineError::Remote("no embedding service configured".into()))?;
            let centroid = spec.remote.as_ref().map(|r| r.centroid.as_slice()).unwrap_or(&[]);
            cosine(&e.embed(&write_midi(score))?, centroid)
        }
        RewardKind::Composite => Err(PipelineError::Config("composite reward cannot be its own base".into())),
    }
}

/// Scalar reward of one rollout.
pub fn reward(
    score: &Score,
    sk: &HarmonySkeleton,
    spec: &RewardSpec,
    embedder: Option<&dyn Embedder>,
) -> Result<f64, PipelineError> {
    match spec.kind {
        RewardKind::Composite => {
            let base = base_reward(spec.base, score, sk, spec, embedder)?;
            let trk = track_density(score).unwrap_or(0.0);
            Ok(base + spec.shaping.term(trk))
        }
        k => base_reward(k, score, sk, spec, embedder),
    }
}
