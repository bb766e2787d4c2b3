//! Session orchestration: manager → layout → supervisor → refined layout →
//! drawer, with persistence, scripted replay and layout overrides.

mod config;
mod script;
mod session;

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use config::{
    Ablations, BackendChoice, DrawerChoice, EngineConfig, DEFAULT_MAX_TURNS, ENV_BACKEND_ENDPOINT, ENV_BACKEND_KEY,
    ENV_BACKEND_MODEL, ENV_DRAWER_ENDPOINT,
};
pub use script::{replay, Script, ScriptTurn};
pub use session::{
    AdviceRecord, AdviceSource, FailedTurn, LayoutOrigin, Revision, Session, TurnRecord, FAILURES_FILE,
    SESSION_FILE, SESSION_SCHEMA_VERSION,
};

use crate::agents::{AgentError, AgentOptions, Agents, ChatBackend, HttpChatBackend, ManagerOutput, ScriptedMock, SupervisorAdvice};
use crate::drawer::{
    DrawComponent, DrawError, DrawMode, DrawRequest, DrawResponse, DrawSubject, Drawer, HttpDrawer, ToyDrawer,
};
use crate::layout::{
    advisories, default_layout, refine_rule_based, validate, BoundingBox, LayoutDocument, LayoutError, RawLayout,
    Rulebook, Severity, Violation,
};
use crate::registry::{RegistryError, SubjectDatabase, SubjectId};
use crate::seed::turn_seed;
use session::write_json;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("session already has the maximum of {0} turns")]
    SessionFull(usize),
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("agent failure: {0}")]
    Agent(#[from] AgentError),
    #[error("layout still violates the rulebook: {0}")]
    Layout(String),
    #[error("draw failure: {0}")]
    Draw(#[from] DrawError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("an edit turn needs a previous turn")]
    MissingPriorTurn,
    #[error("edit target: {0}")]
    EditTarget(String),
    #[error("no turn {0}")]
    UnknownTurn(u32),
    #[error("invalid layout override: {0}")]
    InvalidOverride(String),
    #[error("script: {0}")]
    ScriptParse(String),
    #[error("config: {0}")]
    Config(String),
    #[error("corrupt session data: {0}")]
    Corrupt(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

/// What the user asks for in one turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRequest {
    pub prompt: String,
    #[serde(default)]
    pub mode: DrawMode,
    /// Subject whose box is regenerated in an edit turn.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edit_target: Option<SubjectId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edit_region: Option<BoundingBox>,
}

impl TurnRequest {
    pub fn generate(prompt: impl Into<String>) -> Self {
        Self { prompt: prompt.into(), mode: DrawMode::Generate, edit_target: None, edit_region: None }
    }

    pub fn edit(prompt: impl Into<String>, target: SubjectId) -> Self {
        Self { prompt: prompt.into(), mode: DrawMode::Edit, edit_target: Some(target), edit_region: None }
    }
}

/// The chat backend, drawer and rulebook a session runs against.
#[derive(Clone)]
pub struct Engine {
    backend: Arc<dyn ChatBackend>,
    drawer: Arc<dyn Drawer>,
    pub rules: Rulebook,
}

/// Everything produced by a turn before it is committed.
struct Staged {
    record: TurnRecord,
    request: DrawRequest,
    response: DrawResponse,
    db: SubjectDatabase,
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.message.clone()).collect::<Vec<_>>().join("; ")
}

fn hard(v: Vec<Violation>) -> Vec<Violation> {
    v.into_iter().filter(|v| v.severity == Severity::Hard).collect()
}

/// Smallest box covering both.
fn union_box(a: &BoundingBox, b: &BoundingBox) -> BoundingBox {
    let x = a.x.min(b.x);
    let y = a.y.min(b.y);
    let r = a.right().max(b.right());
    let btm = a.bottom().max(b.bottom());
    BoundingBox::new(x, y, (r - x as u64) as u32, (btm - y as u64) as u32)
}

/// `b` clipped to the frame, or `None` when nothing is left.
fn clip_box(b: &BoundingBox, frame: crate::layout::FrameSize) -> Option<BoundingBox> {
    let r = b.right().min(frame.width as u64);
    let btm = b.bottom().min(frame.height as u64);
    (r > b.x as u64 && btm > b.y as u64).then(|| BoundingBox::new(b.x, b.y, (r - b.x as u64) as u32, (btm - b.y as u64) as u32))
}

impl Engine {
    pub fn new(backend: Arc<dyn ChatBackend>, drawer: Arc<dyn Drawer>) -> Self {
        Self { backend, drawer, rules: Rulebook::default() }
    }

    /// Builds the backend and drawer named in `config`.
    pub fn from_config(config: &EngineConfig) -> Result<Self, EngineError> {
        let backend: Arc<dyn ChatBackend> = match config.backend {
            BackendChoice::Mock => match &config.transcript {
                Some(path) => Arc::new(ScriptedMock::from_file(path)?),
                None => Arc::new(ScriptedMock::synthesizing()),
            },
            BackendChoice::Http => Arc::new(HttpChatBackend::new(config.http_backend.clone())),
        };
        let drawer: Arc<dyn Drawer> = match config.drawer {
            DrawerChoice::Toy => Arc::new(ToyDrawer::new(config.model_seed)),
            DrawerChoice::Http => Arc::new(HttpDrawer::new(config.http_drawer.clone())),
        };
        Ok(Self::new(backend, drawer))
    }

    pub fn drawer(&self) -> &dyn Drawer {
        self.drawer.as_ref()
    }

    /// Runs one turn and commits it. On failure the session is left as it was
    /// and the failure is appended to the session's failure log.
    pub fn run_turn(&self, session: &mut Session, request: &TurnRequest) -> Result<TurnRecord, EngineError> {
        let k = session.next_k();
        match self.stage_turn(session, request).and_then(|staged| commit(session, staged)) {
            Ok(record) => Ok(record),
            Err(e) => {
                let failure = FailedTurn { k, prompt: request.prompt.clone(), error: e.to_string() };
                if let Err(log) = session.log_failure(failure) {
                    tracing::warn!(error = %log, "could not record failed turn");
                }
                Err(e)
            }
        }
    }

    fn stage_turn(&self, session: &Session, request: &TurnRequest) -> Result<Staged, EngineError> {
        let config = &session.config;
        if session.turns.len() >= config.max_turns {
            return Err(EngineError::SessionFull(config.max_turns));
        }
        if request.prompt.trim().is_empty() {
            return Err(EngineError::EmptyPrompt);
        }
        let previous = session.turns.last();
        if request.mode == DrawMode::Edit && previous.is_none() {
            return Err(EngineError::MissingPriorTurn);
        }
        let k = session.next_k();
        let seed = turn_seed(config.seed, k);
        let frame = config.frame;
        let strict = config.strict;
        let ablations = config.ablations;

        let window = config.history_window.unwrap_or(usize::MAX);
        let start = session.turns.len().saturating_sub(window);
        let history: Vec<(ManagerOutput, String)> =
            session.turns[start..].iter().map(|t| (t.manager_output.clone(), t.prompt.clone())).collect();
        let prior_layouts: Vec<RawLayout> = session.turns.iter().map(TurnRecord::final_raw_layout).collect();

        let options = AgentOptions { max_attempts: config.max_attempts, refine_rounds: config.refine_rounds, seed };
        let mut agents = Agents::new(self.backend.as_ref(), options);
        let mut stages: Vec<String> = Vec::new();
        let mut fallbacks: Vec<String> = Vec::new();
        stages.push("manager".into());
        let manager = match agents.run_manager(&request.prompt, &history) {
            Ok(m) => m,
            Err(e) if strict => return Err(e.into()),
            Err(e) => {
                fallbacks.push(format!("manager: {e}"));
                ManagerOutput {
                    global_caption: request.prompt.trim().to_string(),
                    background_caption: String::new(),
                    subjects: previous.map(|t| t.manager_output.subjects.clone()).unwrap_or_default(),
                }
            }
        };

        let mut origin = LayoutOrigin::Checked;
        stages.push("layout".into());
        let raw = match agents.run_layout(frame, &manager, None, &prior_layouts) {
            Ok(l) => l,
            Err(e) if strict => return Err(e.into()),
            Err(e) => {
                fallbacks.push(format!("layout: {e}"));
                origin = LayoutOrigin::Fallback;
                default_layout(frame, &manager, &self.rules)
            }
        };

        let mut advice = Vec::new();
        let mut layout = raw.clone();
        if ablations.no_supervisor {
            origin = LayoutOrigin::Unsupervised;
        } else {
            if origin == LayoutOrigin::Checked {
                let before = agents.log().len();
                match agents.refine(frame, &manager, raw.clone(), &prior_layouts) {
                    Ok(r) => {
                        layout = r.layout;
                        advice = r.advice;
                    }
                    Err(e) if strict => return Err(e.into()),
                    Err(e) => fallbacks.push(format!("supervisor: {e}")),
                }
                for call in &agents.log()[before..] {
                    if call.attempt == 1 {
                        stages.push(call.template.id().to_string());
                    }
                }
            }
            stages.push("validate".into());
            let found = hard(validate(&layout, &self.rules));
            if !found.is_empty() {
                stages.push("refine".into());
                match refine_rule_based(layout.clone(), &found, &self.rules) {
                    Ok(l) => layout = l,
                    Err(e) if strict => return Err(e.into()),
                    Err(e) => fallbacks.push(format!("refiner: {e}")),
                }
                let left = hard(validate(&layout, &self.rules));
                if !left.is_empty() {
                    if strict {
                        return Err(EngineError::Layout(join_violations(&left)));
                    }
                    let placed = default_layout(frame, &manager, &self.rules);
                    if hard(validate(&placed, &self.rules)).is_empty() {
                        fallbacks.push(format!("refiner left: {}", join_violations(&left)));
                        layout = placed;
                        origin = LayoutOrigin::Fallback;
                    }
                }
            }
        }
        let layout = layout.with_manager(manager.clone());

        let (layout, edit_region, prior_request) = match request.mode {
            DrawMode::Generate => (layout, None, None),
            DrawMode::Edit => {
                let prev = previous.expect("checked above");
                let prev_layout = prev.final_raw_layout();
                let mut kept = layout.clone();
                for e in kept.entries.iter_mut() {
                    if let Some(p) = prev_layout.entry(&e.id) {
                        e.bbox = p.bbox;
                    }
                }
                origin = LayoutOrigin::Kept;
                let region = edit_region(request, &kept, &prev_layout, &prev.manager_output, &manager)?;
                let prior = session.draw_request(prev.k)?;
                (kept, Some(region), Some(Box::new(prior)))
            }
        };

        let violations = hard(validate(&layout, &self.rules));
        let advisories = advisories(&layout, &self.rules);

        let mut db = session.db.clone();
        for s in &manager.subjects {
            db.register(s, k)?;
        }
        let mut draw = self.draw_request(config, &layout, &manager, &db, seed, &mut fallbacks)?;
        if let Some(region) = edit_region {
            draw.mode = DrawMode::Edit;
            draw.edit_region = Some(region);
            draw.prior = prior_request;
        }
        stages.push("draw".into());
        let response = self.drawer.draw(&draw)?;
        for r in &response.per_subject {
            let locked = db.get(&r.id).and_then(|rec| rec.embedding.as_ref()).is_some();
            if !locked {
                db.lock_embedding(&r.id, r.embedding.clone())?;
            } else if request.mode == DrawMode::Edit && request.edit_target.as_ref() == Some(&r.id) {
                db.replace_embedding(&r.id, r.embedding.clone())?;
            }
        }

        let record = TurnRecord {
            k,
            prompt: request.prompt.clone(),
            mode: request.mode,
            edit_target: request.edit_target.clone(),
            edit_region,
            seed,
            manager_output: manager,
            raw_layout: raw.to_document(),
            advice: advice.into_iter().map(|advice| AdviceRecord { source: AdviceSource::Supervisor, advice }).collect(),
            final_layout: layout.to_document(),
            layout_origin: origin,
            violations,
            advisories,
            stages,
            fallbacks,
            image: format!("{}/{}", TurnRecord::dir_name(k), TurnRecord::image_name(0)),
            request: format!("{}/{}", TurnRecord::dir_name(k), TurnRecord::request_name(0)),
            revision: 0,
            revisions: vec![],
            diagnostics: response.diagnostics.clone(),
            agent_calls: agents.take_log(),
        };
        Ok(Staged { record, request: draw, response, db })
    }

    fn draw_request(
        &self,
        config: &EngineConfig,
        layout: &RawLayout,
        manager: &ManagerOutput,
        db: &SubjectDatabase,
        seed: u64,
        notes: &mut Vec<String>,
    ) -> Result<DrawRequest, EngineError> {
        let frame = config.frame;
        let mut req = DrawRequest::new(frame, seed);
        req.global_caption = manager.global_caption.clone();
        req.background_caption = manager.background_caption.clone();
        req.params = config.draw_params();
        let mut clip = |e: &crate::layout::LayoutEntry| {
            let b = clip_box(&e.bbox, frame);
            if b != Some(e.bbox) {
                notes.push(format!("box of {} clipped to the frame", e.id));
            }
            b
        };
        for e in layout.subjects() {
            let Some(bbox) = clip(e) else { continue };
            let caption = manager.subject(&e.id).map_or_else(|| e.description.clone(), |s| s.caption.clone());
            let mut components = Vec::new();
            for c in layout.components_of(&e.id) {
                if let Some(b) = clip(c) {
                    components.push(DrawComponent { caption: c.description.clone(), bbox: b, id: c.id.clone() });
                }
            }
            let embedding = db.get(&e.id).and_then(|r| r.embedding.clone());
            req.subjects.push(DrawSubject { id: e.id.clone(), caption, bbox, components, embedding });
        }
        req.validate()?;
        Ok(req)
    }

    /// Replaces the layout of turn `k` and redraws it. The previous image and
    /// layout stay on disk as a revision; the override is logged as user advice.
    pub fn override_layout(&self, session: &mut Session, k: u32, doc: LayoutDocument) -> Result<TurnRecord, EngineError> {
        let record = session.turn(k).ok_or(EngineError::UnknownTurn(k))?.clone();
        if doc.frame != session.config.frame {
            return Err(EngineError::InvalidOverride(format!("frame {} differs from the session frame", doc.frame)));
        }
        let want: BTreeSet<&SubjectId> = record.final_layout.entries.iter().map(|e| &e.id).collect();
        let got: BTreeSet<&SubjectId> = doc.entries.iter().map(|e| &e.id).collect();
        if want != got || got.len() != doc.entries.len() {
            return Err(EngineError::InvalidOverride("entries must be the turn's ids, each once".into()));
        }
        if let Some(e) = doc.entries.iter().find(|e| !e.bbox.within_frame(doc.frame)) {
            return Err(EngineError::InvalidOverride(format!("box of {} lies outside the frame", e.id)));
        }

        let mut draw = session.draw_request(k)?;
        for s in draw.subjects.iter_mut() {
            let entry = |id: &SubjectId| doc.entries.iter().find(|e| &e.id == id).map(|e| e.bbox);
            s.bbox = entry(&s.id).unwrap_or(s.bbox);
            for c in s.components.iter_mut() {
                c.bbox = entry(&c.id).unwrap_or(c.bbox);
            }
        }
        draw.validate()?;
        let response = self.drawer.draw(&draw)?;

        let layout = RawLayout::from_document(doc.clone()).with_manager(record.manager_output.clone());
        let violations = hard(validate(&layout, &self.rules));
        let n = record.revision + 1;
        let dir = TurnRecord::dir_name(k);
        let mut updated = record.clone();
        updated.revisions.push(Revision {
            revision: record.revision,
            image: record.image.clone(),
            layout: format!("{dir}/{}", TurnRecord::layout_name(record.revision)),
        });
        updated.revision = n;
        updated.image = format!("{dir}/{}", TurnRecord::image_name(n));
        updated.request = format!("{dir}/{}", TurnRecord::request_name(n));
        updated.advice.push(AdviceRecord {
            source: AdviceSource::User,
            advice: SupervisorAdvice {
                suggestions: vec!["layout replaced by the user".into()],
                compliant: violations.is_empty(),
                revised_layout: Some(RawLayout::from_document(doc.clone())),
            },
        });
        updated.final_layout = doc;
        updated.layout_origin = LayoutOrigin::Override;
        updated.advisories = advisories(&layout, &self.rules);
        updated.violations = violations;
        updated.diagnostics = response.diagnostics.clone();

        let turn_dir = session.turn_dir(k);
        write_file(&turn_dir.join(TurnRecord::image_name(n)), &response.image)?;
        write_json(&turn_dir.join(TurnRecord::layout_name(n)), &updated.final_layout)?;
        write_json(&turn_dir.join(TurnRecord::request_name(n)), &draw)?;
        let slot = session.turns.iter().position(|t| t.k == k).expect("turn exists");
        let old = std::mem::replace(&mut session.turns[slot], updated.clone());
        if let Err(e) = session.save() {
            session.turns[slot] = old;
            return Err(e);
        }
        Ok(updated)
    }
}

fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<(), EngineError> {
    crate::fsutil::write_atomic(path, bytes).map_err(session::io_err(path))
}

/// Region regenerated by an edit turn: the explicit region, else the target's
/// old and new boxes, else every subject whose caption changed.
fn edit_region(
    request: &TurnRequest,
    layout: &RawLayout,
    prev_layout: &RawLayout,
    prev_manager: &ManagerOutput,
    manager: &ManagerOutput,
) -> Result<BoundingBox, EngineError> {
    if let Some(r) = request.edit_region {
        if !r.within_frame(layout.frame) {
            return Err(EngineError::EditTarget("edit region lies outside the frame".into()));
        }
        return Ok(r);
    }
    let boxes_of = |id: &SubjectId| -> Vec<BoundingBox> {
        [layout.entry(id), prev_layout.entry(id)].into_iter().flatten().map(|e| e.bbox).collect()
    };
    let boxes: Vec<BoundingBox> = match &request.edit_target {
        Some(id) => {
            let b = boxes_of(id);
            if b.is_empty() {
                return Err(EngineError::EditTarget(format!("subject {id} has no box")));
            }
            b
        }
        None => manager
            .subjects
            .iter()
            .filter(|s| prev_manager.subject(&s.id) != Some(s))
            .flat_map(|s| boxes_of(&s.id))
            .collect(),
    };
    boxes
        .iter()
        .copied()
        .reduce(|a, b| union_box(&a, &b))
        .ok_or_else(|| EngineError::EditTarget("nothing changed and no target or region was given".into()))
}

fn commit(session: &mut Session, staged: Staged) -> Result<TurnRecord, EngineError> {
    let Staged { record, request, response, db } = staged;
    let dir = session.turn_dir(record.k);
    write_file(&dir.join(TurnRecord::image_name(0)), &response.image)?;
    write_json(&dir.join(TurnRecord::layout_name(0)), &record.final_layout)?;
    write_json(&dir.join(TurnRecord::request_name(0)), &request)?;
    db.snapshot(&dir)?;
    session.turns.push(record.clone());
    if let Err(e) = session.save() {
        session.turns.pop();
        return Err(e);
    }
    // Committed; the per-turn snapshot is authoritative if this write fails.
    if let Err(e) = db.snapshot(&session.dir) {
        tracing::warn!(error = %e, "could not refresh the session database snapshot");
    }
    session.db = db;
    Ok(record)
}

impl From<LayoutError> for EngineError {
    fn from(e: LayoutError) -> Self {
        EngineError::Layout(e.to_string())
    }
}
