//! Session state and its on-disk layout.
//!
//! ```text
//! <dir>/session.json          id, config, turn records (commit point)
//! <dir>/db.json               latest subject database
//! <dir>/failures.json         failed turns, newest last
//! <dir>/turn_<k>/image.png    image of turn k; revisions as image.r<n>.png
//! <dir>/turn_<k>/layout.json  final layout; revisions as layout.r<n>.json
//! <dir>/turn_<k>/request.json draw request; revisions as request.r<n>.json
//! <dir>/turn_<k>/db.json      database after turn k
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EngineConfig, EngineError};
use crate::agents::{AgentCall, ManagerOutput, SupervisorAdvice};
use crate::drawer::{DrawMode, DrawRequest};
use crate::fsutil::write_atomic;
use crate::layout::{BoundingBox, LayoutDocument, RawLayout, Violation};
use crate::registry::{SubjectDatabase, SubjectId};

pub const SESSION_SCHEMA_VERSION: u32 = 1;
pub const SESSION_FILE: &str = "session.json";
pub const FAILURES_FILE: &str = "failures.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdviceSource {
    Supervisor,
    /// A layout resubmitted by the user through the override endpoint.
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdviceRecord {
    pub source: AdviceSource,
    pub advice: SupervisorAdvice,
}

/// How the final layout of a turn was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayoutOrigin {
    /// Agent layout, supervised and checked; carries no hard violations.
    Checked,
    /// Agent layout drawn without supervision (ablation).
    Unsupervised,
    /// Edit turn: boxes of existing subjects kept from the previous turn.
    Kept,
    /// Fallback placement after the agents failed (best-effort mode).
    Fallback,
    /// Replaced by a user override.
    Override,
}

/// An earlier image and layout of a turn, kept when the turn is redrawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Revision {
    pub revision: u32,
    pub image: String,
    pub layout: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub k: u32,
    pub prompt: String,
    pub mode: DrawMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edit_target: Option<SubjectId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edit_region: Option<BoundingBox>,
    pub seed: u64,
    pub manager_output: ManagerOutput,
    pub raw_layout: LayoutDocument,
    pub advice: Vec<AdviceRecord>,
    pub final_layout: LayoutDocument,
    pub layout_origin: LayoutOrigin,
    /// Hard violations left in the final layout.
    pub violations: Vec<Violation>,
    pub advisories: Vec<Violation>,
    /// Pipeline stages in the order they ran.
    pub stages: Vec<String>,
    /// Fallbacks taken in best-effort mode.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fallbacks: Vec<String>,
    /// Image path relative to the session directory.
    pub image: String,
    /// Draw request path relative to the session directory.
    pub request: String,
    pub revision: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub revisions: Vec<Revision>,
    pub diagnostics: BTreeMap<String, serde_json::Value>,
    pub agent_calls: Vec<AgentCall>,
}

impl TurnRecord {
    pub fn final_raw_layout(&self) -> RawLayout {
        RawLayout::from_document(self.final_layout.clone()).with_manager(self.manager_output.clone())
    }

    pub fn dir_name(k: u32) -> String {
        format!("turn_{k}")
    }

    pub fn image_name(revision: u32) -> String {
        match revision {
            0 => "image.png".into(),
            n => format!("image.r{n}.png"),
        }
    }

    pub fn request_name(revision: u32) -> String {
        match revision {
            0 => "request.json".into(),
            n => format!("request.r{n}.json"),
        }
    }

    pub fn layout_name(revision: u32) -> String {
        match revision {
            0 => "layout.json".into(),
            n => format!("layout.r{n}.json"),
        }
    }
}

/// A turn that failed; the session is unchanged by it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedTurn {
    pub k: u32,
    pub prompt: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub config: EngineConfig,
    pub turns: Vec<TurnRecord>,
    #[serde(skip)]
    pub db: SubjectDatabase,
    #[serde(skip)]
    pub dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct SessionFile {
    schema_version: u32,
    #[serde(flatten)]
    session: Session,
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EngineError + '_ {
    move |source| EngineError::Io { path: path.to_path_buf(), source }
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<(), EngineError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("artifact serializes");
    bytes.push(b'\n');
    write_atomic(path, &bytes).map_err(io_err(path))
}

impl Session {
    /// A fresh session stored in `dir`. Writes an empty `session.json` and `db.json`.
    pub fn create(id: impl Into<String>, config: EngineConfig, dir: &Path) -> Result<Self, EngineError> {
        config.check()?;
        let session = Session { id: id.into(), config, turns: vec![], db: SubjectDatabase::new(), dir: dir.to_path_buf() };
        session.db.snapshot(dir)?;
        session.save()?;
        Ok(session)
    }

    pub fn open(dir: &Path) -> Result<Self, EngineError> {
        let path = dir.join(SESSION_FILE);
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        let file: SessionFile =
            serde_json::from_slice(&bytes).map_err(|e| EngineError::Corrupt(format!("{}: {e}", path.display())))?;
        if file.schema_version != SESSION_SCHEMA_VERSION {
            return Err(EngineError::Corrupt(format!("session schema_version {}", file.schema_version)));
        }
        let mut session = file.session;
        // The per-turn snapshot matches the committed turn list even if the
        // top-level db.json was written by a turn that never committed.
        session.db = match session.turns.last() {
            Some(t) => SubjectDatabase::load(&dir.join(TurnRecord::dir_name(t.k)))?,
            None => SubjectDatabase::new(),
        };
        session.dir = dir.to_path_buf();
        Ok(session)
    }

    pub(crate) fn save(&self) -> Result<(), EngineError> {
        let file = SessionFile { schema_version: SESSION_SCHEMA_VERSION, session: self.clone() };
        write_json(&self.dir.join(SESSION_FILE), &file)
    }

    pub fn turn(&self, k: u32) -> Option<&TurnRecord> {
        self.turns.iter().find(|t| t.k == k)
    }

    pub fn next_k(&self) -> u32 {
        self.turns.len() as u32 + 1
    }

    pub fn turn_dir(&self, k: u32) -> PathBuf {
        self.dir.join(TurnRecord::dir_name(k))
    }

    /// Absolute path of the current image of turn `k`.
    pub fn image_path(&self, k: u32) -> Option<PathBuf> {
        self.turn(k).map(|t| self.dir.join(&t.image))
    }

    pub fn failures(&self) -> Result<Vec<FailedTurn>, EngineError> {
        let path = self.dir.join(FAILURES_FILE);
        match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| EngineError::Corrupt(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(vec![]),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    pub(crate) fn log_failure(&self, failure: FailedTurn) -> Result<(), EngineError> {
        let mut all = self.failures()?;
        all.push(failure);
        write_json(&self.dir.join(FAILURES_FILE), &all)
    }

    /// The draw request behind the current image of turn `k`.
    pub fn draw_request(&self, k: u32) -> Result<DrawRequest, EngineError> {
        let t = self.turn(k).ok_or(EngineError::UnknownTurn(k))?;
        let path = self.dir.join(&t.request);
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        serde_json::from_slice(&bytes).map_err(|e| EngineError::Corrupt(format!("{}: {e}", path.display())))
    }
}
