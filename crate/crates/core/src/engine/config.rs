//! Engine configuration: TOML file, environment overrides, defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::agents::{HttpBackendConfig, DEFAULT_MAX_ATTEMPTS, MAX_REFINE_ROUNDS};
use crate::drawer::{DrawParams, HttpDrawerConfig, MAX_STEPS};
use crate::layout::FrameSize;

pub const DEFAULT_MAX_TURNS: usize = 20;

pub const ENV_BACKEND_ENDPOINT: &str = "AUTOSTUDIO_BACKEND_ENDPOINT";
pub const ENV_BACKEND_KEY: &str = "AUTOSTUDIO_BACKEND_KEY";
pub const ENV_BACKEND_MODEL: &str = "AUTOSTUDIO_BACKEND_MODEL";
pub const ENV_DRAWER_ENDPOINT: &str = "AUTOSTUDIO_DRAWER_ENDPOINT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendChoice {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DrawerChoice {
    #[default]
    Toy,
    Http,
}

/// Pipeline variants used for ablations. Each flag changes one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    /// Skip the supervisor and the rule-based refiner; the agent layout is drawn as is.
    pub no_supervisor: bool,
    /// Draw with `alpha = 1`: global caption features only.
    pub alpha_one: bool,
    /// Draw without subject-initialized guidance.
    pub guidance_off: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub r: f64,
    pub alpha: f64,
    pub beta: f64,
    pub steps: usize,
    pub frame: FrameSize,
    pub seed: u64,
    pub refine_rounds: u32,
    pub max_attempts: u32,
    /// Maximum number of turns per session.
    pub max_turns: usize,
    /// Earlier turns shown to the manager; `None` passes the whole history.
    pub history_window: Option<usize>,
    /// Fail a turn on agent errors or unfixable layouts instead of falling back.
    pub strict: bool,
    pub backend: BackendChoice,
    /// Scripted responses for the mock backend; unmatched inputs are synthesized.
    pub transcript: Option<PathBuf>,
    pub http_backend: HttpBackendConfig,
    pub drawer: DrawerChoice,
    pub http_drawer: HttpDrawerConfig,
    /// Weight seed of the toy denoiser.
    pub model_seed: u64,
    pub ablations: Ablations,
}

impl Default for EngineConfig {
    fn default() -> Self {
        let p = DrawParams::default();
        Self {
            r: p.r,
            alpha: p.alpha,
            beta: p.beta,
            steps: p.steps,
            frame: FrameSize::new(1024, 1024),
            seed: 0,
            refine_rounds: 1,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            max_turns: DEFAULT_MAX_TURNS,
            history_window: None,
            strict: true,
            backend: BackendChoice::Mock,
            transcript: None,
            http_backend: HttpBackendConfig::default(),
            drawer: DrawerChoice::Toy,
            http_drawer: HttpDrawerConfig::default(),
            model_seed: 0,
            ablations: Ablations::default(),
        }
    }
}

impl EngineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, EngineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| EngineError::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    /// Reads a TOML file and applies environment overrides.
    pub fn load(path: &Path) -> Result<Self, EngineError> {
        let text = std::fs::read_to_string(path).map_err(|source| EngineError::Io { path: path.to_path_buf(), source })?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.apply_env(|k| std::env::var(k).ok());
        Ok(cfg)
    }

    /// Backend and drawer endpoints, the model name and the API key may come from the environment.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) {
        if let Some(v) = get(ENV_BACKEND_ENDPOINT) {
            self.http_backend.endpoint = v;
        }
        if let Some(v) = get(ENV_BACKEND_KEY) {
            self.http_backend.api_key = Some(v);
        }
        if let Some(v) = get(ENV_BACKEND_MODEL) {
            self.http_backend.model = v;
        }
        if let Some(v) = get(ENV_DRAWER_ENDPOINT) {
            self.http_drawer.endpoint = v;
        }
    }

    pub fn check(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::Config(m));
        if !(0.0..=1.0).contains(&self.r) {
            return bad(format!("r = {} is outside [0, 1]", self.r));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha = {} is outside [0, 1]", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta = {} must be non-negative", self.beta));
        }
        if !(2..=MAX_STEPS).contains(&self.steps) {
            return bad(format!("steps = {} is outside 2..={MAX_STEPS}", self.steps));
        }
        if self.frame.width == 0 || self.frame.height == 0 {
            return bad("frame sides must be positive".into());
        }
        if !(1..=MAX_REFINE_ROUNDS).contains(&self.refine_rounds) {
            return bad(format!("refine_rounds = {} is outside 1..={MAX_REFINE_ROUNDS}", self.refine_rounds));
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be at least 1".into());
        }
        if self.max_turns == 0 {
            return bad("max_turns must be at least 1".into());
        }
        Ok(())
    }

    /// Drawer parameters after applying the ablation flags.
    pub fn draw_params(&self) -> DrawParams {
        DrawParams {
            r: self.r,
            alpha: if self.ablations.alpha_one { 1.0 } else { self.alpha },
            beta: self.beta,
            steps: self.steps,
            guidance: !self.ablations.guidance_off,
        }
    }
}
