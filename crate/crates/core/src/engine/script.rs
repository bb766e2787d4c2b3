//! Dialogue scripts and their replay.
//!
//! ```json
//! {"turns": [
//!   {"prompt": "a girl walks her dog in a park"},
//!   {"prompt": "the dog turns black", "mode": "edit", "edit_target": "2"}
//! ]}
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Engine, EngineConfig, EngineError, Session, TurnRequest};
use crate::drawer::DrawMode;
use crate::layout::BoundingBox;
use crate::registry::SubjectId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptTurn {
    pub prompt: String,
    #[serde(default, alias = "expected_mode")]
    pub mode: DrawMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edit_target: Option<SubjectId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edit_region: Option<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    pub turns: Vec<ScriptTurn>,
}

impl Script {
    pub fn parse(text: &str) -> Result<Self, EngineError> {
        let script: Script = serde_json::from_str(text).map_err(|e| EngineError::ScriptParse(e.to_string()))?;
        for (i, t) in script.turns.iter().enumerate() {
            if t.mode == DrawMode::Generate && (t.edit_target.is_some() || t.edit_region.is_some()) {
                return Err(EngineError::ScriptParse(format!("turn {} names an edit target but is not an edit", i + 1)));
            }
        }
        Ok(script)
    }

    pub fn load(path: &Path) -> Result<Self, EngineError> {
        let text = std::fs::read_to_string(path).map_err(|source| EngineError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    pub fn requests(&self) -> impl Iterator<Item = TurnRequest> + '_ {
        self.turns.iter().map(|t| TurnRequest {
            prompt: t.prompt.clone(),
            mode: t.mode,
            edit_target: t.edit_target.clone(),
            edit_region: t.edit_region,
        })
    }
}

/// Runs every turn of `script` in a new session stored in `dir`. Stops at the
/// first failed turn.
pub fn replay(engine: &Engine, script: &Script, config: EngineConfig, dir: &Path) -> Result<Session, EngineError> {
    let id = format!("replay-{}", config.seed);
    let mut session = Session::create(id, config, dir)?;
    for request in script.requests() {
        engine.run_turn(&mut session, &request)?;
    }
    Ok(session)
}
