//! Client for an external drawer speaking the `/draw` protocol.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::protocol::{Capabilities, DrawRequest, DrawResponse};
use super::{DrawError, Drawer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpDrawerConfig {
    /// Base URL; `/draw` and `/capabilities` are appended.
    pub endpoint: String,
    pub timeout_secs: u64,
}

impl Default for HttpDrawerConfig {
    fn default() -> Self {
        Self { endpoint: "http://127.0.0.1:8765".into(), timeout_secs: 600 }
    }
}

pub struct HttpDrawer {
    config: HttpDrawerConfig,
    agent: ureq::Agent,
}

impl HttpDrawer {
    pub fn new(config: HttpDrawerConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.config.endpoint.trim_end_matches('/'))
    }
}

fn failure(url: &str, e: impl std::fmt::Display) -> DrawError {
    DrawError::BridgeFailure(format!("{url}: {e}"))
}

impl Drawer for HttpDrawer {
    fn draw(&self, request: &DrawRequest) -> Result<DrawResponse, DrawError> {
        request.validate()?;
        let url = self.url("/draw");
        let mut resp = self.agent.post(&url).send_json(request).map_err(|e| failure(&url, e))?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(failure(&url, format!("status {status}: {body}")));
        }
        let parsed: DrawResponse = resp.body_mut().read_json().map_err(|e| failure(&url, e))?;
        parsed.check_against(request)?;
        Ok(parsed)
    }

    fn capabilities(&self) -> Result<Capabilities, DrawError> {
        let url = self.url("/capabilities");
        let mut resp = self.agent.get(&url).call().map_err(|e| failure(&url, e))?;
        if !resp.status().is_success() {
            return Err(failure(&url, format!("status {}", resp.status())));
        }
        resp.body_mut().read_json().map_err(|e| failure(&url, e))
    }
}
