//! Chat-completion and embedding access.
//!
//! A [`Gateway`] talks to an OpenAI-compatible HTTP endpoint or answers from a
//! [`MockScenario`] rule table. Every call appends exactly one entry to the
//! caller's [`Transcript`], failures included.

use std::path::PathBuf;
use std::thread;
use std::time::Duration;

use base64::Engine;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

/// Dimension of the fallback embedder.
pub const EMBEDDING_DIM: usize = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("request timed out")]
    Timeout,
    #[error("HTTP status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("image attachment missing or unresolvable: {0}")]
    MissingImage(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend configuration: {0}")]
    Config(String),
}

impl GatewayError {
    fn is_transient(&self) -> bool {
        match self {
            GatewayError::Timeout | GatewayError::Transport(_) => true,
            GatewayError::Http { status, .. } => *status >= 500 || *status == 429,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

/// Where an attached image comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageRef {
    /// A simulated scene, identified by id. Only mocks can resolve it.
    Scene(String),
    Path(PathBuf),
    Url(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageRef>,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into(), image: None }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into(), image: None }
    }

    pub fn with_image(mut self, image: ImageRef) -> Self {
        self.image = Some(image);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl ChatRequest {
    /// Greedy decoding with a fixed seed.
    pub fn new(model: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        Self { model: model.into(), messages, temperature: 0.0, max_tokens: 1024, seed: Some(0) }
    }

    fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("request has no messages".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(format!("temperature {} is negative", self.temperature)));
        }
        Ok(())
    }

    pub fn last_user_message(&self) -> &str {
        self.messages.iter().rev().find(|m| m.role == Role::User).map_or("", |m| m.content.as_str())
    }

    pub fn image(&self) -> Option<&ImageRef> {
        self.messages.iter().rev().find_map(|m| m.image.as_ref())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub finish_reason: String,
    pub usage: Usage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Extra attempts after the first.
    pub retries: u32,
    /// Delay before the first retry; doubles on each further retry.
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { retries: 2, backoff_ms: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// e.g. `http://localhost:8000/v1`
    pub base_url: String,
    /// Environment variable holding the bearer token, if any.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Embeddings use the fallback embedder when unset.
    #[serde(default)]
    pub embedding_model: Option<String>,
}

fn default_timeout() -> f64 {
    60.0
}

/// One canned reply. Every condition that is set must hold.
#[derive(Debug, Clone)]
pub struct MockRule {
    pub contains: Vec<String>,
    pub pattern: Option<Regex>,
    pub scene: Option<String>,
    pub response: String,
}

impl MockRule {
    pub fn contains(needle: impl Into<String>, response: impl Into<String>) -> Self {
        Self { contains: vec![needle.into()], pattern: None, scene: None, response: response.into() }
    }

    pub fn scene(id: impl Into<String>, response: impl Into<String>) -> Self {
        Self { contains: Vec::new(), pattern: None, scene: Some(id.into()), response: response.into() }
    }

    fn matches(&self, message: &str, image: Option<&ImageRef>) -> bool {
        let scene_ok = match (&self.scene, image) {
            (None, _) => true,
            (Some(want), Some(ImageRef::Scene(id))) => want == id,
            (Some(_), _) => false,
        };
        scene_ok
            && self.contains.iter().all(|c| message.contains(c.as_str()))
            && self.pattern.as_ref().is_none_or(|p| p.is_match(message))
    }
}

/// Ordered rule table; the first matching rule answers.
#[derive(Debug, Clone)]
pub struct MockScenario {
    pub rules: Vec<MockRule>,
    pub default_response: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRule {
    #[serde(default)]
    contains: Vec<String>,
    #[serde(default)]
    pattern: Option<String>,
    #[serde(default)]
    scene: Option<String>,
    response: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    #[serde(default)]
    default_response: String,
    #[serde(default)]
    rules: Vec<RawRule>,
}

impl MockScenario {
    pub fn new(rules: Vec<MockRule>, default_response: impl Into<String>) -> Self {
        Self { rules, default_response: default_response.into() }
    }

    /// Parses a TOML scenario file (`default_response` plus `[[rules]]`).
    pub fn from_toml(text: &str) -> Result<Self, GatewayError> {
        let raw: RawScenario = toml::from_str(text).map_err(|e| GatewayError::Config(e.message().to_string()))?;
        let mut rules = Vec::with_capacity(raw.rules.len());
        for r in raw.rules {
            let pattern = r
                .pattern
                .map(|p| Regex::new(&p).map_err(|e| GatewayError::Config(format!("bad pattern `{p}`: {e}"))))
                .transpose()?;
            rules.push(MockRule { contains: r.contains, pattern, scene: r.scene, response: r.response });
        }
        Ok(Self { rules, default_response: raw.default_response })
    }

    pub fn respond(&self, request: &ChatRequest) -> &str {
        let message = request.last_user_message();
        let image = request.image();
        self.rules
            .iter()
            .find(|r| r.matches(message, image))
            .map_or(self.default_response.as_str(), |r| r.response.as_str())
    }
}

#[derive(Debug, Clone)]
pub enum BackendConfig {
    Remote(RemoteConfig),
    Mock(MockScenario),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operation {
    Chat,
    ChatWithImage,
    Embed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub seq: usize,
    pub operation: Operation,
    pub backend: String,
    pub model: String,
    pub request: String,
    pub response: Option<String>,
    pub error: Option<String>,
    pub attempts: u32,
}

/// Append-only log of model calls for one session.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn record(
        &mut self,
        operation: Operation,
        backend: &str,
        model: &str,
        request: String,
        result: Result<&str, &GatewayError>,
        attempts: u32,
    ) {
        let (response, error) = match result {
            Ok(r) => (Some(r.to_string()), None),
            Err(e) => (None, Some(e.to_string())),
        };
        self.entries.push(TranscriptEntry {
            seq: self.entries.len(),
            operation,
            backend: backend.to_string(),
            model: model.to_string(),
            request,
            response,
            error,
            attempts,
        });
    }
}

#[derive(Debug, Clone)]
pub struct Gateway {
    config: BackendConfig,
    http: Option<reqwest::blocking::Client>,
}

impl Gateway {
    pub fn new(config: BackendConfig) -> Result<Self, GatewayError> {
        let http = match &config {
            BackendConfig::Remote(r) => {
                if r.base_url.trim().is_empty() {
                    return Err(GatewayError::Config("remote backend requires a base URL".into()));
                }
                if r.timeout_secs.is_nan() || r.timeout_secs <= 0.0 {
                    return Err(GatewayError::Config("timeout must be positive".into()));
                }
                let client = reqwest::blocking::Client::builder()
                    .timeout(Duration::from_secs_f64(r.timeout_secs))
                    .build()
                    .map_err(|e| GatewayError::Config(e.to_string()))?;
                Some(client)
            }
            BackendConfig::Mock(_) => None,
        };
        Ok(Self { config, http })
    }

    pub fn mock(scenario: MockScenario) -> Self {
        Self { config: BackendConfig::Mock(scenario), http: None }
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn kind(&self) -> &'static str {
        match self.config {
            BackendConfig::Remote(_) => "remote",
            BackendConfig::Mock(_) => "mock",
        }
    }

    pub fn chat(&self, request: &ChatRequest, transcript: &mut Transcript) -> Result<ChatResponse, GatewayError> {
        self.chat_inner(request, Operation::Chat, transcript)
    }

    /// Like [`Gateway::chat`], but the request must carry a resolvable image.
    pub fn chat_with_image(
        &self,
        request: &ChatRequest,
        transcript: &mut Transcript,
    ) -> Result<ChatResponse, GatewayError> {
        self.chat_inner(request, Operation::ChatWithImage, transcript)
    }

    fn chat_inner(
        &self,
        request: &ChatRequest,
        operation: Operation,
        transcript: &mut Transcript,
    ) -> Result<ChatResponse, GatewayError> {
        let (result, attempts) = match request.validate().and_then(|()| self.check_image(request, operation)) {
            Err(e) => (Err(e), 0),
            Ok(()) => match &self.config {
                BackendConfig::Mock(scenario) => (Ok(mock_response(scenario.respond(request), request)), 1),
                BackendConfig::Remote(remote) => match chat_body(request, operation) {
                    Err(e) => (Err(e), 0),
                    Ok(body) => self.with_retries(remote, "chat/completions", &body, parse_chat_response),
                },
            },
        };
        transcript.record(
            operation,
            self.kind(),
            &request.model,
            request.last_user_message().to_string(),
            result.as_ref().map(|r| r.content.as_str()),
            attempts,
        );
        result
    }

    fn check_image(&self, request: &ChatRequest, operation: Operation) -> Result<(), GatewayError> {
        if operation != Operation::ChatWithImage {
            return Ok(());
        }
        match request.image() {
            None => Err(GatewayError::MissingImage("request has no image attachment".into())),
            Some(ImageRef::Path(p)) if !p.is_file() => Err(GatewayError::MissingImage(p.display().to_string())),
            Some(ImageRef::Scene(id)) if matches!(self.config, BackendConfig::Remote(_)) => {
                Err(GatewayError::MissingImage(format!("scene `{id}` has no rendered image for a remote model")))
            }
            Some(_) => Ok(()),
        }
    }

    /// Unit-norm embeddings, one per input text.
    pub fn embed(&self, texts: &[String], transcript: &mut Transcript) -> Result<Vec<Vec<f64>>, GatewayError> {
        let summary = texts.join("\n");
        let (model, result, attempts) = match &self.config {
            BackendConfig::Remote(RemoteConfig { embedding_model: Some(model), .. }) if !texts.is_empty() => {
                let BackendConfig::Remote(remote) = &self.config else { unreachable!() };
                let body = json!({ "model": model, "input": texts });
                let (r, a) = self.with_retries(remote, "embeddings", &body, |v| parse_embeddings(v, texts.len()));
                (model.as_str(), r, a)
            }
            _ if texts.is_empty() => ("fallback", Err(GatewayError::InvalidRequest("no texts to embed".into())), 0),
            _ => ("fallback", Ok(texts.iter().map(|t| hashed_embedding(t)).collect()), 1),
        };
        let shown = result.as_ref().map(|v: &Vec<Vec<f64>>| format!("{} vectors", v.len()));
        transcript.record(Operation::Embed, self.kind(), model, summary, shown.as_deref().map_err(|e| *e), attempts);
        result
    }

    fn with_retries<T>(
        &self,
        remote: &RemoteConfig,
        endpoint: &str,
        body: &Value,
        parse: impl Fn(&Value) -> Result<T, GatewayError>,
    ) -> (Result<T, GatewayError>, u32) {
        let client = self.http.as_ref().expect("remote gateway has a client");
        let url = format!("{}/{endpoint}", remote.base_url.trim_end_matches('/'));
        let token = remote.api_key_env.as_deref().and_then(|var| std::env::var(var).ok());
        let mut attempts = 0;
        loop {
            attempts += 1;
            let result = post_json(client, &url, token.as_deref(), body).and_then(|v| parse(&v));
            match result {
                Err(e) if e.is_transient() && attempts <= remote.retry.retries => {
                    let delay = remote.retry.backoff_ms.saturating_mul(1 << (attempts - 1).min(16));
                    if delay > 0 {
                        thread::sleep(Duration::from_millis(delay));
                    }
                }
                other => return (other, attempts),
            }
        }
    }
}

fn post_json(
    client: &reqwest::blocking::Client,
    url: &str,
    token: Option<&str>,
    body: &Value,
) -> Result<Value, GatewayError> {
    let mut req = client.post(url).json(body);
    if let Some(t) = token {
        req = req.bearer_auth(t);
    }
    let resp = req.send().map_err(classify)?;
    let status = resp.status();
    let text = resp.text().map_err(classify)?;
    if !status.is_success() {
        return Err(GatewayError::Http { status: status.as_u16(), body: text });
    }
    serde_json::from_str(&text).map_err(|e| GatewayError::MalformedResponse(e.to_string()))
}

fn classify(e: reqwest::Error) -> GatewayError {
    if e.is_timeout() {
        GatewayError::Timeout
    } else {
        GatewayError::Transport(e.to_string())
    }
}

fn chat_body(request: &ChatRequest, operation: Operation) -> Result<Value, GatewayError> {
    let mut messages = Vec::with_capacity(request.messages.len());
    for m in &request.messages {
        let content = match (&m.image, operation) {
            (Some(image), Operation::ChatWithImage) => json!([
                { "type": "text", "text": m.content },
                { "type": "image_url", "image_url": { "url": image_url(image)? } },
            ]),
            _ => json!(m.content),
        };
        messages.push(json!({ "role": m.role, "content": content }));
    }
    let mut body = json!({
        "model": request.model,
        "messages": messages,
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    });
    if let Some(seed) = request.seed {
        body["seed"] = json!(seed);
    }
    Ok(body)
}

fn image_url(image: &ImageRef) -> Result<String, GatewayError> {
    match image {
        ImageRef::Url(u) => Ok(u.clone()),
        ImageRef::Path(p) => {
            let bytes = std::fs::read(p).map_err(|e| GatewayError::MissingImage(format!("{}: {e}", p.display())))?;
            let mime = match p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
                Some("png") => "image/png",
                Some("jpg" | "jpeg") => "image/jpeg",
                Some("webp") => "image/webp",
                _ => "application/octet-stream",
            };
            Ok(format!("data:{mime};base64,{}", base64::engine::general_purpose::STANDARD.encode(bytes)))
        }
        ImageRef::Scene(id) => Err(GatewayError::MissingImage(format!("scene `{id}`"))),
    }
}

fn parse_chat_response(v: &Value) -> Result<ChatResponse, GatewayError> {
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| GatewayError::MalformedResponse("missing choices[0]".into()))?;
    let content = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| GatewayError::MalformedResponse("missing choices[0].message.content".into()))?;
    let finish_reason = choice.get("finish_reason").and_then(Value::as_str).unwrap_or("stop").to_string();
    let usage = v.get("usage").and_then(|u| serde_json::from_value(u.clone()).ok()).unwrap_or_default();
    Ok(ChatResponse { content: content.to_string(), finish_reason, usage })
}

fn parse_embeddings(v: &Value, expected: usize) -> Result<Vec<Vec<f64>>, GatewayError> {
    let data = v
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| GatewayError::MalformedResponse("missing data array".into()))?;
    if data.len() != expected {
        return Err(GatewayError::MalformedResponse(format!("expected {expected} embeddings, got {}", data.len())));
    }
    data.iter()
        .map(|d| {
            let raw: Vec<f64> = d
                .get("embedding")
                .and_then(|e| serde_json::from_value(e.clone()).ok())
                .ok_or_else(|| GatewayError::MalformedResponse("embedding is not a number array".into()))?;
            normalize(raw).ok_or_else(|| GatewayError::MalformedResponse("zero-length embedding".into()))
        })
        .collect()
}

fn mock_response(content: &str, request: &ChatRequest) -> ChatResponse {
    let prompt_tokens: u64 = request.messages.iter().map(|m| m.content.split_whitespace().count() as u64).sum();
    let completion_tokens = content.split_whitespace().count() as u64;
    ChatResponse {
        content: content.to_string(),
        finish_reason: "stop".into(),
        usage: Usage { prompt_tokens, completion_tokens, total_tokens: prompt_tokens + completion_tokens },
    }
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase).collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Bag-of-tokens embedding: each token adds 1 to bucket `fnv1a(token) mod 256`,
/// then the vector is L2-normalized. Text without tokens hashes as a whole.
pub fn hashed_embedding(text: &str) -> Vec<f64> {
    let mut v = vec![0.0; EMBEDDING_DIM];
    let tokens = tokenize(text);
    if tokens.is_empty() {
        v[(fnv1a(text.as_bytes()) % EMBEDDING_DIM as u64) as usize] = 1.0;
        return v;
    }
    for t in &tokens {
        v[(fnv1a(t.as_bytes()) % EMBEDDING_DIM as u64) as usize] += 1.0;
    }
    normalize(v).expect("at least one bucket is set")
}

fn normalize(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= 0.0 || !norm.is_finite() {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Some(v)
}

/// Cosine similarity clamped to `[-1, 1]`; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}
