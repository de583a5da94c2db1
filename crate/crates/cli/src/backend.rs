//! Generation backend speaking the OpenAI-compatible chat completions API.

use std::time::Duration;

use inlinethink_core::coldstart::{BackendError, GenParams, GenerationBackend};
use serde::Deserialize;
use serde_json::json;

/// Environment variable holding the bearer token for the backend.
pub const TOKEN_ENV: &str = "TA_BACKEND_TOKEN";

pub struct ChatBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    token: Option<String>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: Option<String>,
}

impl ChatBackend {
    /// `endpoint` is the full chat completions URL. The token, if any, comes
    /// from [`TOKEN_ENV`].
    pub fn new(endpoint: String, model: String, timeout: Duration) -> reqwest::Result<Self> {
        let client = reqwest::blocking::Client::builder().timeout(timeout).build()?;
        Ok(Self { client, endpoint, model, token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()) })
    }
}

impl GenerationBackend for ChatBackend {
    fn generate(&self, prompt: &str, params: &GenParams) -> Result<String, BackendError> {
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "max_tokens": params.max_tokens,
            "temperature": params.temperature,
            "seed": params.seed,
        });
        let mut req = self.client.post(&self.endpoint).json(&body);
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().map_err(|e| BackendError(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(BackendError(format!("backend returned HTTP {status}")));
        }
        let parsed: ChatResponse = resp.json().map_err(|e| BackendError(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError("response carries no completion".into()))
    }
}
