//! Chat-completion client for the external generator and inverse evaluator.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::params::{Dimension, ScoreVector, Topic, NUM_DIMS};

use super::prompt::{build_inverse_prompt, recovered_scores_schema, ForwardOptions, PromptPair};
use super::{word_count, RecoveredScores, Source, StimulusSet};

/// Where and how to reach a chat-completion model. The API key is never
/// stored; it is read from `api_key_env` when the transport is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatEndpoint {
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    /// Passed through verbatim when set; no default is implied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_key_env() -> String {
    "BRAINSBI_API_KEY".into()
}

fn default_timeout() -> u64 {
    120
}

impl ChatEndpoint {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        ChatEndpoint {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: default_key_env(),
            temperature: None,
            max_tokens: None,
            timeout_secs: default_timeout(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ResponseFormat {
    Text,
    /// Structured output constrained by a JSON schema object of the form
    /// `{"type": "json_schema", "name": ..., "schema": ..., "strict": ...}`.
    JsonSchema(Value),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub prompt: PromptPair,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    pub response_format: ResponseFormat,
}

impl ChatRequest {
    pub fn new(endpoint: &ChatEndpoint, prompt: PromptPair, response_format: ResponseFormat) -> Self {
        ChatRequest {
            model: endpoint.model.clone(),
            prompt,
            temperature: endpoint.temperature,
            max_tokens: endpoint.max_tokens,
            response_format,
        }
    }

    /// Standard chat-completion request body.
    pub fn to_json(&self) -> Value {
        let mut body = json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": self.prompt.system_text},
                {"role": "user", "content": self.prompt.user_text},
            ],
        });
        if let Some(t) = self.temperature {
            body["temperature"] = json!(t);
        }
        if let Some(m) = self.max_tokens {
            body["max_tokens"] = json!(m);
        }
        if let ResponseFormat::JsonSchema(schema) = &self.response_format {
            // Chat completions nest name/schema/strict under `json_schema`.
            let mut inner = schema.clone();
            if let Some(obj) = inner.as_object_mut() {
                obj.remove("type");
            }
            body["response_format"] = json!({"type": "json_schema", "json_schema": inner});
        }
        body
    }
}

/// Sends one request and returns the assistant message content.
pub trait ChatTransport: Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String>;
}

pub struct HttpTransport {
    agent: ureq::Agent,
    url: String,
    api_key: String,
}

impl HttpTransport {
    pub fn from_env(endpoint: &ChatEndpoint) -> Result<Self> {
        let api_key = std::env::var(&endpoint.api_key_env).map_err(|_| {
            Error::Config(format!(
                "environment variable {} with the API key is not set",
                endpoint.api_key_env
            ))
        })?;
        Ok(Self::with_key(endpoint, api_key))
    }

    pub fn with_key(endpoint: &ChatEndpoint, api_key: impl Into<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(endpoint.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpTransport {
            agent,
            url: format!("{}/chat/completions", endpoint.base_url.trim_end_matches('/')),
            api_key: api_key.into(),
        }
    }
}

impl ChatTransport for HttpTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let mut resp = self
            .agent
            .post(&self.url)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(request.to_json())
            .map_err(|e| Error::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Transport(e.to_string()))?;
        match status {
            200..=299 => {}
            401 | 403 => return Err(Error::Auth { status }),
            _ => return Err(Error::Transport(format!("HTTP {status}: {text}"))),
        }
        let body: Value = serde_json::from_str(&text).map_err(|e| Error::Format {
            reason: format!("response body is not JSON: {e}"),
            raw: text.clone(),
        })?;
        body["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Format {
                reason: "missing choices[0].message.content".into(),
                raw: text,
            })
    }
}

/// One call plus at most one retry, taken only on format violations.
fn with_retry<T>(mut attempt: impl FnMut() -> Result<T>) -> Result<T> {
    match attempt() {
        Err(Error::Format { .. }) => attempt(),
        other => other,
    }
}

/// Forward generation through an external model.
pub fn generate_external(
    prompt: &PromptPair,
    topic: Topic,
    opts: ForwardOptions,
    endpoint: &ChatEndpoint,
    transport: &dyn ChatTransport,
) -> Result<StimulusSet> {
    let request = ChatRequest::new(endpoint, prompt.clone(), ResponseFormat::Text);
    let headlines = with_retry(|| {
        let raw = transport.complete(&request)?;
        parse_headlines(&raw, opts)
    })?;
    Ok(StimulusSet {
        topic,
        headlines,
        source: Source::External,
        generator_id: endpoint.model.clone(),
    })
}

fn parse_headlines(raw: &str, opts: ForwardOptions) -> Result<Vec<String>> {
    let fail = |reason: String| Error::Format {
        reason,
        raw: raw.to_string(),
    };
    let lines: Vec<String> = raw
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    if lines.len() != opts.num_headlines {
        return Err(fail(format!(
            "expected {} headlines, got {}",
            opts.num_headlines,
            lines.len()
        )));
    }
    for line in &lines {
        if is_enumerated(line) {
            return Err(fail(format!("numbered or bulleted line: {line}")));
        }
        let n = word_count(line);
        if n < opts.min_words || n > opts.max_words {
            return Err(fail(format!(
                "headline has {n} words, expected {}-{}: {line}",
                opts.min_words, opts.max_words
            )));
        }
    }
    Ok(lines)
}

fn is_enumerated(line: &str) -> bool {
    if line.starts_with(['-', '*', '•', '–']) {
        return true;
    }
    let digits = line.chars().take_while(char::is_ascii_digit).count();
    digits > 0 && matches!(line[digits..].chars().next(), Some('.' | ')' | ':'))
}

/// Inverse evaluation through an external model with the structured
/// `recovered_scores` response format.
pub fn invert_external(
    stimuli: &StimulusSet,
    endpoint: &ChatEndpoint,
    transport: &dyn ChatTransport,
) -> Result<RecoveredScores> {
    let request = ChatRequest::new(
        endpoint,
        build_inverse_prompt(&stimuli.headlines),
        ResponseFormat::JsonSchema(recovered_scores_schema()),
    );
    let values = with_retry(|| {
        let raw = transport.complete(&request)?;
        parse_scores(&raw)
    })?;
    Ok(RecoveredScores {
        values,
        evaluator_id: endpoint.model.clone(),
    })
}

fn parse_scores(raw: &str) -> Result<ScoreVector> {
    let fail = |reason: String| Error::Format {
        reason,
        raw: raw.to_string(),
    };
    let value: Value =
        serde_json::from_str(raw.trim()).map_err(|e| fail(format!("not valid JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| fail("expected a JSON object".into()))?;
    if let Some(extra) = obj
        .keys()
        .find(|k| !Dimension::ALL.iter().any(|d| d.key() == k.as_str()))
    {
        return Err(fail(format!("unexpected field `{extra}`")));
    }
    let mut scores = [0.0; NUM_DIMS];
    for dim in Dimension::ALL {
        let v = obj
            .get(dim.key())
            .ok_or_else(|| fail(format!("missing field `{}`", dim.key())))?
            .as_f64()
            .ok_or_else(|| fail(format!("field `{}` is not a number", dim.key())))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(fail(format!("field `{}` = {v} outside [0, 1]", dim.key())));
        }
        scores[dim.index()] = v;
    }
    Ok(ScoreVector::new(scores).expect("checked above"))
}
