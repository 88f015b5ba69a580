//! Model access: request keys, media attachments, backends and the caching
//! client the pipeline talks to.
//!
//! Three backends share the [`Backend`] trait: [`LiveBackend`] speaks the
//! OpenAI-compatible chat-completions protocol, [`ReplayBackend`] answers
//! from a recorded store, and [`RecordingBackend`] wraps another backend and
//! appends everything it returns to a store file. [`FnBackend`] turns a
//! closure into a backend for tests and fixture generation.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::ImageDims;
use crate::schemas::StageTag;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("backend unavailable after {attempts} attempt(s): {message}")]
    BackendUnavailable { attempts: u32, message: String },
    #[error("replay store has no response for {stage} of `{sample_id}` (trial {trial}, attempt {attempt})")]
    ReplayMiss {
        sample_id: String,
        stage: StageTag,
        trial: u32,
        attempt: u32,
    },
    #[error("cannot read media {path}: {message}")]
    MediaUnreadable { path: String, message: String },
    #[error("unsupported media format for {path}: {detail}")]
    UnsupportedFormat { path: String, detail: String },
    #[error("unexpected backend response: {0}")]
    Protocol(String),
    #[error("replay store {path}: {message}")]
    Store { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, ClientError>;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Identity of one model call, independent of the retry attempt.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RequestKey {
    pub sample_id: String,
    pub stage: StageTag,
    pub trial: u32,
    pub prompt_digest: String,
}

impl RequestKey {
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("request key serializes");
        sha256_hex(canonical.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalRequest {
    pub system: String,
    pub user: String,
    pub image: Option<PathBuf>,
    pub audio: Option<PathBuf>,
    pub decoding: DecodingParams,
    pub model: String,
    pub key: RequestKey,
}

impl MultimodalRequest {
    /// Builds a request whose key digests the prompt text, model and
    /// decoding parameters.
    pub fn new(
        sample_id: &str,
        stage: StageTag,
        trial: u32,
        system: String,
        user: String,
        model: &str,
        decoding: DecodingParams,
    ) -> Self {
        let prompt_digest = sha256_hex(
            json!({
                "model": model,
                "temperature": decoding.temperature,
                "max_tokens": decoding.max_tokens,
                "system": system,
                "user": user,
            })
            .to_string()
            .as_bytes(),
        );
        Self {
            system,
            user,
            image: None,
            audio: None,
            decoding,
            model: model.to_string(),
            key: RequestKey {
                sample_id: sample_id.to_string(),
                stage,
                trial,
                prompt_digest,
            },
        }
    }

    pub fn with_media(mut self, image: Option<PathBuf>, audio: Option<PathBuf>) -> Self {
        self.image = image;
        self.audio = audio;
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendReply {
    pub text: String,
    pub usage: Option<TokenUsage>,
}

impl From<String> for BackendReply {
    fn from(text: String) -> Self {
        Self { text, usage: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawResponse {
    pub text: String,
    pub latency_ms: u64,
    pub backend: String,
    pub usage: Option<TokenUsage>,
    pub attempt: u32,
    pub cached: bool,
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    /// `attempt` starts at 1 and increments on each parse retry.
    fn send(&self, req: &MultimodalRequest, attempt: u32) -> Result<BackendReply>;
}

// ---------------------------------------------------------------------------
// media

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MediaKind {
    Image,
    Audio,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attachment {
    pub kind: MediaKind,
    pub media_type: &'static str,
    /// Short format name (`png`, `jpeg`, `wav`, `flac`).
    pub format: &'static str,
    pub data_base64: String,
    pub dims: Option<ImageDims>,
}

impl Attachment {
    pub fn data_url(&self) -> String {
        format!("data:{};base64,{}", self.media_type, self.data_base64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MediaWarning {
    DimensionMismatch {
        path: String,
        expected: ImageDims,
        actual: ImageDims,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MediaInfo {
    pub kind: MediaKind,
    pub media_type: &'static str,
    pub format: &'static str,
    pub dims: Option<ImageDims>,
}

fn sniff(path: &Path, bytes: &[u8], kind: MediaKind) -> Result<MediaInfo> {
    let unsupported = |detail: &str| ClientError::UnsupportedFormat {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };
    match kind {
        MediaKind::Image => {
            let (media_type, format) = match imagesize::image_type(bytes) {
                Ok(imagesize::ImageType::Png) => ("image/png", "png"),
                Ok(imagesize::ImageType::Jpeg) => ("image/jpeg", "jpeg"),
                Ok(other) => return Err(unsupported(&format!("{other:?} image"))),
                Err(_) => return Err(unsupported("not an image")),
            };
            let size = imagesize::blob_size(bytes).map_err(|e| unsupported(&e.to_string()))?;
            let dims = ImageDims::new(size.width as u32, size.height as u32)
                .map_err(|e| unsupported(&e.to_string()))?;
            Ok(MediaInfo {
                kind,
                media_type,
                format,
                dims: Some(dims),
            })
        }
        MediaKind::Audio => {
            let (media_type, format) = if bytes.len() >= 12 && &bytes[..4] == b"RIFF" && &bytes[8..12] == b"WAVE" {
                ("audio/wav", "wav")
            } else if bytes.starts_with(b"fLaC") {
                ("audio/flac", "flac")
            } else {
                return Err(unsupported("expected WAV or FLAC audio"));
            };
            Ok(MediaInfo {
                kind,
                media_type,
                format,
                dims: None,
            })
        }
    }
}

fn read_media(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| ClientError::MediaUnreadable {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn dims_warning(path: &Path, info: &MediaInfo, expected: Option<ImageDims>) -> Option<MediaWarning> {
    match (expected, info.dims) {
        (Some(expected), Some(actual)) if expected != actual => {
            log::warn!("{}: image is {actual}, manifest says {expected}", path.display());
            Some(MediaWarning::DimensionMismatch {
                path: path.display().to_string(),
                expected,
                actual,
            })
        }
        _ => None,
    }
}

/// Checks format and dimensions without encoding.
pub fn inspect_media(
    path: &Path,
    kind: MediaKind,
    expected: Option<ImageDims>,
) -> Result<(MediaInfo, Option<MediaWarning>)> {
    let bytes = read_media(path)?;
    let info = sniff(path, &bytes, kind)?;
    let warning = dims_warning(path, &info, expected);
    Ok((info, warning))
}

/// Reads a prepared media file into an inline base64 attachment.
///
/// No resizing or resampling happens here; a mismatch against the
/// manifest's dimensions is reported as a warning.
pub fn encode_media(
    path: &Path,
    kind: MediaKind,
    expected: Option<ImageDims>,
) -> Result<(Attachment, Option<MediaWarning>)> {
    let bytes = read_media(path)?;
    let info = sniff(path, &bytes, kind)?;
    let warning = dims_warning(path, &info, expected);
    let attachment = Attachment {
        kind,
        media_type: info.media_type,
        format: info.format,
        data_base64: base64::engine::general_purpose::STANDARD.encode(&bytes),
        dims: info.dims,
    };
    Ok((attachment, warning))
}

// ---------------------------------------------------------------------------
// replay store

/// One line of a replay store file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub key: RequestKey,
    pub attempt: u32,
    pub text: String,
}

/// Canned responses per request key, one per retry attempt.
#[derive(Debug, Clone, Default)]
pub struct ReplayStore {
    entries: HashMap<RequestKey, BTreeMap<u32, String>>,
}

impl ReplayStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let err = |message: String| ClientError::Store {
            path: path.display().to_string(),
            message,
        };
        let file = File::open(path).map_err(|e| err(e.to_string()))?;
        let mut store = Self::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ReplayRecord =
                serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", i + 1)))?;
            store.insert(rec);
        }
        Ok(store)
    }

    /// Later records for the same key and attempt replace earlier ones.
    pub fn insert(&mut self, rec: ReplayRecord) {
        self.entries.entry(rec.key).or_default().insert(rec.attempt, rec.text);
    }

    pub fn get(&self, key: &RequestKey, attempt: u32) -> Option<&str> {
        self.entries.get(key)?.get(&attempt).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// All records in a stable order.
    pub fn records(&self) -> Vec<ReplayRecord> {
        let mut out: Vec<ReplayRecord> = self
            .entries
            .iter()
            .flat_map(|(key, by_attempt)| {
                by_attempt.iter().map(|(&attempt, text)| ReplayRecord {
                    key: key.clone(),
                    attempt,
                    text: text.clone(),
                })
            })
            .collect();
        out.sort_by(|a, b| a.key.cmp(&b.key).then(a.attempt.cmp(&b.attempt)));
        out
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut f = File::create(path)?;
        for rec in self.records() {
            serde_json::to_writer(&mut f, &rec)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub struct ReplayBackend {
    store: ReplayStore,
}

impl ReplayBackend {
    pub fn new(store: ReplayStore) -> Self {
        Self { store }
    }

    pub fn open(path: &Path) -> Result<Self> {
        Ok(Self::new(ReplayStore::load(path)?))
    }
}

impl Backend for ReplayBackend {
    fn id(&self) -> &str {
        "replay"
    }

    fn send(&self, req: &MultimodalRequest, attempt: u32) -> Result<BackendReply> {
        self.store
            .get(&req.key, attempt)
            .map(|t| BackendReply::from(t.to_string()))
            .ok_or_else(|| ClientError::ReplayMiss {
                sample_id: req.key.sample_id.clone(),
                stage: req.key.stage,
                trial: req.key.trial,
                attempt,
            })
    }
}

/// Appends every successful reply of `inner` to a replay store file.
pub struct RecordingBackend {
    inner: Arc<dyn Backend>,
    out: Mutex<File>,
    id: String,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn Backend>, path: &Path) -> Result<Self> {
        let out = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| ClientError::Store {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        let id = format!("record:{}", inner.id());
        Ok(Self {
            inner,
            out: Mutex::new(out),
            id,
        })
    }
}

impl Backend for RecordingBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn send(&self, req: &MultimodalRequest, attempt: u32) -> Result<BackendReply> {
        let reply = self.inner.send(req, attempt)?;
        let rec = ReplayRecord {
            key: req.key.clone(),
            attempt,
            text: reply.text.clone(),
        };
        let line = serde_json::to_string(&rec).map_err(|e| ClientError::Protocol(e.to_string()))?;
        let mut out = self.out.lock().expect("recording lock");
        writeln!(out, "{line}").map_err(|e| ClientError::Store {
            path: "<record>".into(),
            message: e.to_string(),
        })?;
        Ok(reply)
    }
}

/// Backend driven by a closure.
pub struct FnBackend<F> {
    id: String,
    f: F,
}

impl<F> FnBackend<F>
where
    F: Fn(&MultimodalRequest, u32) -> Result<String> + Send + Sync,
{
    pub fn new(id: impl Into<String>, f: F) -> Self {
        Self { id: id.into(), f }
    }
}

impl<F> Backend for FnBackend<F>
where
    F: Fn(&MultimodalRequest, u32) -> Result<String> + Send + Sync,
{
    fn id(&self) -> &str {
        &self.id
    }

    fn send(&self, req: &MultimodalRequest, attempt: u32) -> Result<BackendReply> {
        (self.f)(req, attempt).map(BackendReply::from)
    }
}

// ---------------------------------------------------------------------------
// live backend

/// Counting semaphore capping in-flight requests.
pub struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

pub struct Permit<'a>(&'a Limiter);

impl Limiter {
    pub fn new(max: usize) -> Self {
        Self {
            free: Mutex::new(max.max(1)),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("limiter lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("limiter lock");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("limiter lock") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone)]
pub struct LiveConfig {
    /// Base URL such as `http://localhost:8000/v1`; `/chat/completions` is
    /// appended unless already present.
    pub endpoint: String,
    pub api_key: Option<String>,
    pub max_attempts: u32,
    pub backoff_base: Duration,
    pub timeout: Duration,
    pub max_in_flight: usize,
}

impl LiveConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: None,
            max_attempts: 3,
            backoff_base: Duration::from_millis(500),
            timeout: Duration::from_secs(120),
            max_in_flight: 4,
        }
    }
}

pub struct LiveBackend {
    cfg: LiveConfig,
    url: String,
    agent: ureq::Agent,
    limiter: Limiter,
}

impl LiveBackend {
    pub fn new(cfg: LiveConfig) -> Self {
        let base = cfg.endpoint.trim_end_matches('/');
        let url = if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        };
        let agent = ureq::AgentBuilder::new().timeout(cfg.timeout).build();
        let limiter = Limiter::new(cfg.max_in_flight);
        Self {
            cfg,
            url,
            agent,
            limiter,
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// Chat-completions request body with inline media parts.
    pub fn request_body(req: &MultimodalRequest) -> Result<Value> {
        let mut parts = Vec::new();
        if let Some(path) = &req.image {
            let (att, _) = encode_media(path, MediaKind::Image, None)?;
            parts.push(json!({"type": "image_url", "image_url": {"url": att.data_url()}}));
        }
        if let Some(path) = &req.audio {
            let (att, _) = encode_media(path, MediaKind::Audio, None)?;
            parts.push(json!({
                "type": "input_audio",
                "input_audio": {"data": att.data_base64, "format": att.format}
            }));
        }
        parts.push(json!({"type": "text", "text": req.user}));
        let mut messages = Vec::new();
        if !req.system.is_empty() {
            messages.push(json!({"role": "system", "content": req.system}));
        }
        messages.push(json!({"role": "user", "content": parts}));
        Ok(json!({
            "model": req.model,
            "messages": messages,
            "temperature": req.decoding.temperature,
            "max_tokens": req.decoding.max_tokens,
        }))
    }

    /// Pulls the assistant text out of a chat-completions response.
    pub fn parse_response(body: &Value) -> Result<BackendReply> {
        let content = body
            .pointer("/choices/0/message/content")
            .ok_or_else(|| ClientError::Protocol("missing choices[0].message.content".into()))?;
        let text = match content {
            Value::String(s) => s.clone(),
            Value::Array(parts) => parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .join(""),
            _ => return Err(ClientError::Protocol("content is neither text nor parts".into())),
        };
        if text.trim().is_empty() {
            return Err(ClientError::Protocol("empty completion".into()));
        }
        let usage = body.get("usage").map(|u| TokenUsage {
            prompt_tokens: u.get("prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
            completion_tokens: u.get("completion_tokens").and_then(Value::as_u64).unwrap_or(0),
        });
        Ok(BackendReply { text, usage })
    }
}

impl Backend for LiveBackend {
    fn id(&self) -> &str {
        "live"
    }

    fn send(&self, req: &MultimodalRequest, _attempt: u32) -> Result<BackendReply> {
        let body = Self::request_body(req)?;
        let _permit = self.limiter.acquire();
        let attempts = self.cfg.max_attempts.max(1);
        let mut last = String::new();
        for i in 0..attempts {
            if i > 0 {
                std::thread::sleep(self.cfg.backoff_base * 2u32.saturating_pow(i - 1));
            }
            let mut call = self.agent.post(&self.url).set("Content-Type", "application/json");
            if let Some(key) = &self.cfg.api_key {
                call = call.set("Authorization", &format!("Bearer {key}"));
            }
            match call.send_json(&body) {
                Ok(resp) => {
                    let v: Value = resp
                        .into_json()
                        .map_err(|e| ClientError::Protocol(e.to_string()))?;
                    return Self::parse_response(&v);
                }
                Err(ureq::Error::Status(code, resp)) => {
                    last = format!("HTTP {code}: {}", resp.into_string().unwrap_or_default());
                    let retryable = code == 408 || code == 429 || code >= 500;
                    if !retryable {
                        return Err(ClientError::BackendUnavailable {
                            attempts: i + 1,
                            message: last,
                        });
                    }
                }
                Err(e) => last = e.to_string(),
            }
            log::debug!("{} attempt {} failed: {last}", self.url, i + 1);
        }
        Err(ClientError::BackendUnavailable {
            attempts,
            message: last,
        })
    }
}

// ---------------------------------------------------------------------------
// caching client

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CallStats {
    /// Requests that reached the backend, per stage.
    pub backend_calls: BTreeMap<StageTag, u64>,
    pub cache_hits: u64,
}

impl CallStats {
    pub fn backend_total(&self) -> u64 {
        self.backend_calls.values().sum()
    }

    pub fn stage(&self, stage: StageTag) -> u64 {
        self.backend_calls.get(&stage).copied().unwrap_or(0)
    }
}

type CacheKey = (RequestKey, u32);

/// Front door to a backend: in-memory and optional on-disk caching keyed by
/// request key and attempt, plus call accounting.
pub struct Client {
    backend: Arc<dyn Backend>,
    memo: Mutex<HashMap<CacheKey, String>>,
    cache_dir: Option<PathBuf>,
    stats: Mutex<CallStats>,
}

impl Client {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self {
            backend,
            memo: Mutex::new(HashMap::new()),
            cache_dir: None,
            stats: Mutex::new(CallStats::default()),
        }
    }

    pub fn with_cache_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = Some(dir.into());
        self
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn stats(&self) -> CallStats {
        self.stats.lock().expect("stats lock").clone()
    }

    fn cache_path(&self, key: &RequestKey, attempt: u32) -> Option<PathBuf> {
        let digest = key.digest();
        self.cache_dir
            .as_ref()
            .map(|d| d.join(&digest[..2]).join(format!("{digest}.{attempt}.txt")))
    }

    fn disk_get(&self, key: &RequestKey, attempt: u32) -> Option<String> {
        fs::read_to_string(self.cache_path(key, attempt)?).ok()
    }

    fn disk_put(&self, key: &RequestKey, attempt: u32, text: &str) {
        let Some(path) = self.cache_path(key, attempt) else { return };
        let write = || -> std::io::Result<()> {
            let dir = path.parent().expect("cache path has parent");
            fs::create_dir_all(dir)?;
            let tmp = dir.join(format!(
                ".{}.{}.tmp",
                path.file_name().and_then(|n| n.to_str()).unwrap_or("entry"),
                std::process::id()
            ));
            fs::write(&tmp, text)?;
            fs::rename(&tmp, &path)
        };
        if let Err(e) = write() {
            log::warn!("cache write {} failed: {e}", path.display());
        }
    }

    /// Sends `req` unless an identical (key, attempt) has been answered.
    pub fn complete(&self, req: &MultimodalRequest, attempt: u32) -> Result<RawResponse> {
        let cache_key = (req.key.clone(), attempt);
        let hit = self
            .memo
            .lock()
            .expect("memo lock")
            .get(&cache_key)
            .cloned()
            .or_else(|| self.disk_get(&req.key, attempt));
        if let Some(text) = hit {
            self.stats.lock().expect("stats lock").cache_hits += 1;
            self.memo.lock().expect("memo lock").insert(cache_key, text.clone());
            return Ok(RawResponse {
                text,
                latency_ms: 0,
                backend: self.backend.id().to_string(),
                usage: None,
                attempt,
                cached: true,
            });
        }
        let started = Instant::now();
        *self
            .stats
            .lock()
            .expect("stats lock")
            .backend_calls
            .entry(req.key.stage)
            .or_insert(0) += 1;
        let reply = self.backend.send(req, attempt)?;
        let latency_ms = started.elapsed().as_millis() as u64;
        self.disk_put(&req.key, attempt, &reply.text);
        self.memo
            .lock()
            .expect("memo lock")
            .insert(cache_key, reply.text.clone());
        Ok(RawResponse {
            text: reply.text,
            latency_ms,
            backend: self.backend.id().to_string(),
            usage: reply.usage,
            attempt,
            cached: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Read;
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn req(trial: u32) -> MultimodalRequest {
        MultimodalRequest::new(
            "violin-001",
            StageTag::Analysis,
            trial,
            String::new(),
            "analyze".into(),
            "m",
            DecodingParams {
                temperature: 0.7,
                max_tokens: 256,
            },
        )
    }

    #[test]
    fn replay_hit_and_miss() {
        let mut store = ReplayStore::new();
        store.insert(ReplayRecord {
            key: req(0).key,
            attempt: 1,
            text: "{\"x\":1}".into(),
        });
        let client = Client::new(Arc::new(ReplayBackend::new(store)));
        let r = client.complete(&req(0), 1).unwrap();
        assert_eq!(r.text, "{\"x\":1}");
        assert_eq!(r.attempt, 1);
        assert!(matches!(client.complete(&req(1), 1), Err(ClientError::ReplayMiss { .. })));
        assert!(matches!(client.complete(&req(0), 2), Err(ClientError::ReplayMiss { .. })));
    }

    #[test]
    fn keys_differ_by_trial_and_prompt() {
        assert_ne!(req(0).key, req(1).key);
        let mut other = req(0);
        other = MultimodalRequest::new(
            "violin-001",
            StageTag::Analysis,
            0,
            String::new(),
            "analyze more".into(),
            "m",
            other.decoding.clone(),
        );
        assert_ne!(other.key.prompt_digest, req(0).key.prompt_digest);
    }

    #[test]
    fn identical_request_hits_backend_once() {
        let calls = Arc::new(AtomicUsize::new(0));
        let c = calls.clone();
        let backend = FnBackend::new("count", move |_, _| {
            c.fetch_add(1, Ordering::SeqCst);
            Ok("ok".to_string())
        });
        let client = Client::new(Arc::new(backend));
        client.complete(&req(0), 1).unwrap();
        let again = client.complete(&req(0), 1).unwrap();
        assert!(again.cached);
        assert_eq!(calls.load(Ordering::SeqCst), 1);
        assert_eq!(client.stats().stage(StageTag::Analysis), 1);
        assert_eq!(client.stats().cache_hits, 1);
    }

    #[test]
    fn disk_cache_survives_client() {
        let dir = tempfile::tempdir().unwrap();
        let calls = Arc::new(AtomicUsize::new(0));
        let mk = || {
            let c = calls.clone();
            Client::new(Arc::new(FnBackend::new("count", move |_, _| {
                c.fetch_add(1, Ordering::SeqCst);
                Ok("ok".to_string())
            })))
            .with_cache_dir(dir.path())
        };
        mk().complete(&req(0), 1).unwrap();
        let r = mk().complete(&req(0), 1).unwrap();
        assert!(r.cached);
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn recording_round_trips_through_store() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let inner = Arc::new(FnBackend::new("echo", |r: &MultimodalRequest, a| {
            Ok(format!("{}#{}", r.key.trial, a))
        }));
        let rec = RecordingBackend::new(inner, &path).unwrap();
        rec.send(&req(0), 1).unwrap();
        rec.send(&req(1), 2).unwrap();
        let store = ReplayStore::load(&path).unwrap();
        assert_eq!(store.len(), 2);
        assert_eq!(store.get(&req(1).key, 2), Some("1#2"));
    }

    fn write_png(path: &Path, w: u32, h: u32) {
        // minimal header-only PNG: signature + IHDR is enough for size sniffing
        let mut bytes = vec![0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A, 0, 0, 0, 13];
        bytes.extend_from_slice(b"IHDR");
        bytes.extend_from_slice(&w.to_be_bytes());
        bytes.extend_from_slice(&h.to_be_bytes());
        bytes.extend_from_slice(&[8, 2, 0, 0, 0, 0, 0, 0, 0]);
        fs::write(path, bytes).unwrap();
    }

    #[test]
    fn media_encoding_and_warnings() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("a.png");
        write_png(&img, 224, 224);
        let d224 = ImageDims::new(224, 224).unwrap();
        let (att, warn) = encode_media(&img, MediaKind::Image, Some(d224)).unwrap();
        assert_eq!(att.media_type, "image/png");
        assert!(att.data_url().starts_with("data:image/png;base64,"));
        assert!(warn.is_none());

        let duet = dir.path().join("duet.png");
        write_png(&duet, 448, 224);
        let (_, warn) = encode_media(&duet, MediaKind::Image, Some(ImageDims::new(448, 224).unwrap())).unwrap();
        assert!(warn.is_none());

        let big = dir.path().join("big.png");
        write_png(&big, 640, 480);
        let (_, warn) = encode_media(&big, MediaKind::Image, Some(d224)).unwrap();
        assert!(matches!(warn, Some(MediaWarning::DimensionMismatch { .. })));

        let wav = dir.path().join("a.wav");
        fs::write(&wav, b"RIFF\0\0\0\0WAVEfmt ").unwrap();
        let (att, _) = encode_media(&wav, MediaKind::Audio, None).unwrap();
        assert_eq!(att.format, "wav");

        let mp3 = dir.path().join("a.mp3");
        fs::write(&mp3, b"ID3\x03\0\0\0").unwrap();
        assert!(matches!(
            encode_media(&mp3, MediaKind::Audio, None),
            Err(ClientError::UnsupportedFormat { .. })
        ));
        assert!(matches!(
            encode_media(&dir.path().join("missing.png"), MediaKind::Image, None),
            Err(ClientError::MediaUnreadable { .. })
        ));
    }

    #[test]
    fn live_backend_down_exhausts_attempts() {
        // bind then drop to get a port nobody listens on
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let mut cfg = LiveConfig::new(format!("http://127.0.0.1:{port}/v1"));
        cfg.max_attempts = 3;
        cfg.backoff_base = Duration::from_millis(1);
        cfg.timeout = Duration::from_secs(2);
        let backend = LiveBackend::new(cfg);
        assert!(backend.url().ends_with("/v1/chat/completions"));
        match backend.send(&req(0), 1) {
            Err(ClientError::BackendUnavailable { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn live_backend_speaks_chat_completions() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let port = listener.local_addr().unwrap().port();
        let server = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = Vec::new();
            let mut chunk = [0u8; 4096];
            // read headers + body by content-length
            loop {
                let n = stream.read(&mut chunk).unwrap();
                buf.extend_from_slice(&chunk[..n]);
                let text = String::from_utf8_lossy(&buf);
                if let Some(hdr_end) = text.find("\r\n\r\n") {
                    let len = text[..hdr_end]
                        .lines()
                        .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap()))
                        .unwrap_or(0);
                    if buf.len() >= hdr_end + 4 + len {
                        break;
                    }
                }
            }
            let body = r#"{"choices":[{"message":{"role":"assistant","content":"{\"ok\":true}"}}],"usage":{"prompt_tokens":5,"completion_tokens":3}}"#;
            let resp = format!(
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(resp.as_bytes()).unwrap();
            String::from_utf8(buf).unwrap()
        });
        let mut cfg = LiveConfig::new(format!("http://127.0.0.1:{port}/v1"));
        cfg.api_key = Some("secret".into());
        let reply = LiveBackend::new(cfg).send(&req(0), 1).unwrap();
        assert_eq!(reply.text, "{\"ok\":true}");
        assert_eq!(reply.usage.unwrap().completion_tokens, 3);
        let seen = server.join().unwrap();
        assert!(seen.starts_with("POST /v1/chat/completions"));
        assert!(seen.contains("Bearer secret"));
        assert!(seen.contains("\"temperature\":0.7"));
    }

    #[test]
    fn limiter_caps_in_flight() {
        let limiter = Arc::new(Limiter::new(2));
        let active = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let (l, a, p) = (limiter.clone(), active.clone(), peak.clone());
                std::thread::spawn(move || {
                    let _g = l.acquire();
                    let now = a.fetch_add(1, Ordering::SeqCst) + 1;
                    p.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                    a.fetch_sub(1, Ordering::SeqCst);
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
