//! Subquery-aware generation prompts and the image-generation client.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::joint::{ParetoEntry, ParetoResult};
use crate::query::Query;

pub const MLLM_API_KEY_ENV: &str = "XMRAG_MLLM_API_KEY";
/// Manifest `meta` key holding the path of the original image.
pub const IMAGE_PATH_META: &str = "image_path";

/// Subqueries the entry's caption satisfies, in query order.
pub fn satisfied_subqueries<'q>(entry: &ParetoEntry, query: &'q Query) -> Result<Vec<&'q str>> {
    if entry.satisfaction.len() != query.len() {
        return Err(Error::LengthMismatch(entry.satisfaction.len(), query.len()));
    }
    Ok(entry
        .satisfaction
        .ones()
        .map(|i| query.subqueries()[i].text.as_str())
        .collect())
}

/// English ordinal: 1st, 2nd, 3rd, 4th, 11th, 21st, ...
pub fn ordinal(n: usize) -> String {
    let suffix = match (n % 10, n % 100) {
        (_, 11..=13) => "th",
        (1, _) => "st",
        (2, _) => "nd",
        (3, _) => "rd",
        _ => "th",
    };
    format!("{n}{suffix}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptClause {
    /// Image path if known, otherwise the record id.
    pub image_ref: String,
    pub record_id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub image_path: Option<PathBuf>,
    pub ordinal: usize,
    pub satisfied: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationPrompt {
    pub query_text: String,
    pub clauses: Vec<PromptClause>,
    pub rendered: String,
}

impl GenerationPrompt {
    pub fn image_ids(&self) -> Vec<String> {
        self.clauses.iter().map(|c| c.record_id.clone()).collect()
    }
}

/// Prompt with record ids as image references.
pub fn build_prompt(query: &Query, result: &ParetoResult) -> Result<GenerationPrompt> {
    build(query, result, |_| None)
}

/// Prompt whose image references come from each record's `image_path`
/// metadata, resolved against the manifest directory.
pub fn build_prompt_for(corpus: &Corpus, query: &Query, result: &ParetoResult) -> Result<GenerationPrompt> {
    build(query, result, |e| {
        let rel = corpus.record(e.record).meta.get(IMAGE_PATH_META)?;
        Some(
            corpus
                .base_dir()
                .map_or_else(|| PathBuf::from(rel), |b| b.join(rel)),
        )
    })
}

fn build(
    query: &Query,
    result: &ParetoResult,
    image_path: impl Fn(&ParetoEntry) -> Option<PathBuf>,
) -> Result<GenerationPrompt> {
    let mut clauses = Vec::new();
    for entry in &result.entries {
        let satisfied = satisfied_subqueries(entry, query)?;
        if satisfied.is_empty() {
            continue;
        }
        let path = image_path(entry);
        clauses.push(PromptClause {
            image_ref: path
                .as_ref()
                .map_or_else(|| entry.id.clone(), |p| p.display().to_string()),
            record_id: entry.id.clone(),
            image_path: path,
            ordinal: clauses.len() + 1,
            satisfied: satisfied.into_iter().map(str::to_owned).collect(),
        });
    }
    if clauses.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    let mut rendered = query.raw.clone();
    for c in &clauses {
        rendered.push_str(&format!(
            "\n<image_{}> Use only [{}] in [the {} retrieved image].",
            c.ordinal,
            c.satisfied.join(", "),
            ordinal(c.ordinal)
        ));
    }
    Ok(GenerationPrompt {
        query_text: query.raw.clone(),
        clauses,
        rendered,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceImage {
    pub id: String,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub model: String,
    pub prompt: String,
    pub images: Vec<ReferenceImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub response_id: String,
    pub image: Vec<u8>,
}

pub trait MllmClient {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles after each failure.
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay_ms: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MllmConfig {
    pub endpoint: String,
    pub model: String,
    pub max_reference_images: usize,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
}

impl Default for MllmConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/images/generations".into(),
            model: "gpt-image-1".into(),
            max_reference_images: 16,
            timeout_secs: 120,
            retry: RetryPolicy::default(),
        }
    }
}

/// JSON-over-HTTP client. Sends `{model, prompt, images: [{id, b64}]}` and
/// expects `{id, data: [{b64_json}]}` back.
pub struct HttpMllmClient {
    config: MllmConfig,
    api_key: String,
    http: reqwest::blocking::Client,
}

impl HttpMllmClient {
    pub fn new(config: MllmConfig, api_key: impl Into<String>) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok(Self {
            config,
            api_key: api_key.into(),
            http,
        })
    }

    pub fn from_env(config: MllmConfig) -> Result<Self> {
        let key = std::env::var(MLLM_API_KEY_ENV)
            .map_err(|_| Error::InvalidArgument(format!("{MLLM_API_KEY_ENV} is not set")))?;
        Self::new(config, key)
    }
}

impl MllmClient for HttpMllmClient {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse> {
        let images: Vec<serde_json::Value> = request
            .images
            .iter()
            .map(|i| serde_json::json!({"id": i.id, "b64": BASE64.encode(&i.bytes)}))
            .collect();
        let body = serde_json::json!({
            "model": request.model,
            "prompt": request.prompt,
            "images": images,
        });
        log::debug!(
            "POST {} (authorization: Bearer <redacted>) with {} reference images",
            self.config.endpoint,
            request.images.len()
        );
        let resp = self
            .http
            .post(&self.config.endpoint)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| Error::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Error::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(Error::Rejected(format!("{status}: {text}")));
        }
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let b64 = value["data"][0]["b64_json"]
            .as_str()
            .ok_or_else(|| Error::Rejected(format!("response has no data[0].b64_json: {text}")))?;
        let image = BASE64
            .decode(b64)
            .map_err(|e| Error::Rejected(format!("bad base64 image: {e}")))?;
        Ok(GenerationResponse {
            response_id: value["id"].as_str().unwrap_or_default().to_string(),
            image,
        })
    }
}

/// Canned responses keyed by prompt. Records every call it receives.
#[derive(Debug, Default)]
pub struct ReplayMllmClient {
    responses: HashMap<String, Vec<Result<GenerationResponse, String>>>,
    calls: AtomicUsize,
    seen: Mutex<Vec<GenerationRequest>>,
}

impl ReplayMllmClient {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_response(mut self, prompt: impl Into<String>, response: GenerationResponse) -> Self {
        self.responses
            .entry(prompt.into())
            .or_default()
            .push(Ok(response));
        self
    }

    /// Queue a transport failure for `prompt`, consumed before later responses.
    pub fn with_transport_error(mut self, prompt: impl Into<String>, message: impl Into<String>) -> Self {
        self.responses
            .entry(prompt.into())
            .or_default()
            .push(Err(message.into()));
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<GenerationRequest> {
        self.seen.lock().expect("replay lock").clone()
    }
}

impl MllmClient for ReplayMllmClient {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let mut seen = self.seen.lock().expect("replay lock");
        let earlier = seen.iter().filter(|r| r.prompt == request.prompt).count();
        seen.push(request.clone());
        let queue = self
            .responses
            .get(&request.prompt)
            .ok_or_else(|| Error::Transport("replay client has no response for prompt".into()))?;
        // calls past the end of the queue repeat its last element
        match &queue[earlier.min(queue.len() - 1)] {
            Ok(r) => Ok(r.clone()),
            Err(m) => Err(Error::Transport(m.clone())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub prompt: String,
    pub image_ids: Vec<String>,
    pub model: String,
    pub response_id: Option<String>,
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationOutput {
    /// `None` in offline mode.
    pub image: Option<Vec<u8>>,
    pub provenance: Provenance,
}

/// Send the prompt and its reference images to the service.
///
/// With `client = None` (offline) nothing is read or sent and only the
/// provenance is returned. Transport failures are retried with exponential
/// backoff; service rejections are returned at once.
pub fn generate_image(
    prompt: &GenerationPrompt,
    client: Option<&dyn MllmClient>,
    config: &MllmConfig,
) -> Result<GenerationOutput> {
    let mut provenance = Provenance {
        prompt: prompt.rendered.clone(),
        image_ids: prompt.image_ids(),
        model: config.model.clone(),
        response_id: None,
        timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
    };
    let Some(client) = client else {
        return Ok(GenerationOutput {
            image: None,
            provenance,
        });
    };
    if prompt.clauses.len() > config.max_reference_images {
        return Err(Error::InvalidArgument(format!(
            "{} reference images exceed the service limit of {}",
            prompt.clauses.len(),
            config.max_reference_images
        )));
    }
    let images = prompt
        .clauses
        .iter()
        .map(|c| {
            let path = c.image_path.as_ref().ok_or_else(|| {
                Error::InvalidArgument(format!("record {:?} has no {IMAGE_PATH_META}", c.record_id))
            })?;
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            Ok(ReferenceImage {
                id: c.record_id.clone(),
                bytes,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let request = GenerationRequest {
        model: config.model.clone(),
        prompt: prompt.rendered.clone(),
        images,
    };

    let attempts = config.retry.max_attempts.max(1);
    let mut attempt = 1;
    let response = loop {
        match client.generate(&request) {
            Ok(r) => break r,
            Err(Error::Transport(msg)) if attempt < attempts => {
                let delay = config.retry.base_delay_ms.saturating_mul(1 << (attempt - 1));
                log::warn!("generation attempt {attempt} failed ({msg}); retrying in {delay} ms");
                std::thread::sleep(Duration::from_millis(delay));
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    };
    provenance.response_id = Some(response.response_id);
    Ok(GenerationOutput {
        image: Some(response.image),
        provenance,
    })
}
