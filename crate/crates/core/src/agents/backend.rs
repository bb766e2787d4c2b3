//! Chat backends: the trait the agents call and the HTTP implementation.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::prompt::Template;
use super::AgentError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    ScriptedMock,
    Http,
}

/// One agent call. `input` is the rendered `<input>` envelope; `feedback` carries the
/// parse error of the previous attempt when retrying.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub template: Template,
    pub system: String,
    pub input: String,
    pub feedback: Option<String>,
    pub seed: u64,
    pub attempt: u32,
}

impl ChatRequest {
    /// Text of the user message: the envelope plus any retry feedback.
    pub fn user_text(&self) -> String {
        match &self.feedback {
            Some(f) => format!(
                "{}\n\nYour previous answer could not be parsed: {f}\nAnswer again in the required format.",
                self.input
            ),
            None => self.input.clone(),
        }
    }
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, AgentError>;
    fn kind(&self) -> BackendKind;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpBackendConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub temperature: f64,
    pub timeout_secs: u64,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/chat".into(),
            model: "gpt-4o".into(),
            api_key: None,
            temperature: 0.0,
            timeout_secs: 120,
        }
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    system: &'a str,
    user: &'a str,
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct WireResponse {
    text: String,
}

/// Posts `{model, system, user, temperature, seed}` and reads `{text}`.
pub struct HttpChatBackend {
    config: HttpBackendConfig,
    agent: ureq::Agent,
}

impl HttpChatBackend {
    pub fn new(config: HttpBackendConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        Self { config, agent }
    }
}

impl ChatBackend for HttpChatBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, AgentError> {
        let user = request.user_text();
        let body = WireRequest {
            model: &self.config.model,
            system: &request.system,
            user: &user,
            temperature: self.config.temperature,
            seed: Some(request.seed),
        };
        let mut call = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.config.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response =
            call.send_json(&body).map_err(|e| AgentError::BackendUnavailable(format!("{}: {e}", self.config.endpoint)))?;
        let parsed: WireResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| AgentError::BackendUnavailable(format!("bad response from {}: {e}", self.config.endpoint)))?;
        Ok(parsed.text)
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Http
    }
}
