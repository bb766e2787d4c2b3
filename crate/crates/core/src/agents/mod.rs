//! Manager, layout and supervisor agents over a pluggable chat backend.

pub mod backend;
pub mod mock;
mod output;
pub mod prompt;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::layout::{parse_layout, serialize_layout, FrameSize, RawLayout};
use crate::registry::SubjectId;

pub use backend::{BackendKind, ChatBackend, ChatRequest, HttpBackendConfig, HttpChatBackend};
pub use mock::{ScriptedMock, Transcript, TranscriptEntry, TRANSCRIPT_SCHEMA_VERSION};
pub use output::{ManagerComponentEntry, ManagerOutput, ManagerSubjectEntry, SupervisorAdvice, COMPLIANT_MARKER};
pub use prompt::{input_hash, render_input, render_prompt, size_slot, slots, Slots, Template};

pub const DEFAULT_MAX_ATTEMPTS: u32 = 3;
pub const MAX_REFINE_ROUNDS: u32 = 3;
/// Prior layouts shown to the layout agent.
pub const LAYOUT_CONTEXT_TURNS: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("{template} output could not be parsed after {attempts} attempts: {message}")]
    ParseFailure { template: &'static str, attempts: u32, message: String },
    #[error("chat backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("{template} template needs the <{slot}> slot")]
    MissingSlot { template: &'static str, slot: String },
    #[error("layout has no box for {}", join_ids(.0))]
    MissingEntry(Vec<SubjectId>),
    #[error("bad transcript: {0}")]
    Transcript(String),
}

fn join_ids(ids: &[SubjectId]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(", ")
}

/// One backend round trip, kept for replay comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentCall {
    pub template: Template,
    pub attempt: u32,
    pub seed: u64,
    pub input: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<String>,
    pub response: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentOptions {
    pub max_attempts: u32,
    pub refine_rounds: u32,
    pub seed: u64,
}

impl Default for AgentOptions {
    fn default() -> Self {
        Self { max_attempts: DEFAULT_MAX_ATTEMPTS, refine_rounds: 1, seed: 0 }
    }
}

struct ParseIssue {
    message: String,
    missing: Vec<SubjectId>,
}

impl From<String> for ParseIssue {
    fn from(message: String) -> Self {
        Self { message, missing: vec![] }
    }
}

/// Result of the supervisor/layout loop.
#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub layout: RawLayout,
    pub advice: Vec<SupervisorAdvice>,
}

/// Runs agent calls against one backend and records every exchange.
pub struct Agents<'a> {
    backend: &'a dyn ChatBackend,
    pub options: AgentOptions,
    log: Vec<AgentCall>,
}

pub fn manager_context(history: &[(ManagerOutput, String)]) -> String {
    history
        .iter()
        .enumerate()
        .map(|(i, (m, p))| format!("<turn index=\"{}\">\n<prompt>{p}</prompt>\n{}\n</turn>", i + 1, m.to_text()))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn layout_context(prior: &[RawLayout], draft: Option<(&RawLayout, &SupervisorAdvice)>) -> String {
    let start = prior.len().saturating_sub(LAYOUT_CONTEXT_TURNS);
    let mut parts: Vec<String> =
        prior[start..].iter().map(|l| format!("<previous>\n{}\n</previous>", serialize_layout(l))).collect();
    if let Some((layout, advice)) = draft {
        parts.push(format!("<draft>\n{}\n</draft>", serialize_layout(layout)));
        parts.push(format!("<advice>\n{}\n</advice>", advice.advice_text()));
    }
    parts.join("\n")
}

impl<'a> Agents<'a> {
    pub fn new(backend: &'a dyn ChatBackend, options: AgentOptions) -> Self {
        Self { backend, options, log: Vec::new() }
    }

    pub fn log(&self) -> &[AgentCall] {
        &self.log
    }

    pub fn take_log(&mut self) -> Vec<AgentCall> {
        std::mem::take(&mut self.log)
    }

    fn call<T>(
        &mut self,
        template: Template,
        slots: &Slots,
        parse: impl Fn(&str) -> Result<T, ParseIssue>,
    ) -> Result<T, AgentError> {
        let input = render_input(template, slots)?;
        let system = template.instructions();
        let attempts = self.options.max_attempts.max(1);
        let mut feedback: Option<String> = None;
        let mut last = ParseIssue::from(String::new());
        for attempt in 1..=attempts {
            let request = ChatRequest {
                template,
                system: system.clone(),
                input: input.clone(),
                feedback: feedback.clone(),
                seed: self.options.seed,
                attempt,
            };
            let response = self.backend.complete(&request)?;
            self.log.push(AgentCall {
                template,
                attempt,
                seed: request.seed,
                input: input.clone(),
                feedback: feedback.clone(),
                response: response.clone(),
            });
            match parse(&response) {
                Ok(v) => return Ok(v),
                Err(issue) => {
                    tracing::debug!(template = template.id(), attempt, error = %issue.message, "agent output rejected");
                    feedback = Some(issue.message.clone());
                    last = issue;
                }
            }
        }
        if !last.missing.is_empty() {
            return Err(AgentError::MissingEntry(last.missing));
        }
        Err(AgentError::ParseFailure { template: template.id(), attempts, message: last.message })
    }

    /// Manager call for `prompt` given earlier (output, prompt) pairs in turn order.
    pub fn run_manager(&mut self, prompt: &str, history: &[(ManagerOutput, String)]) -> Result<ManagerOutput, AgentError> {
        let known: BTreeSet<u32> =
            history.iter().flat_map(|(m, _)| m.subjects.iter().map(|s| s.id.top_level())).collect();
        let next_free = known.iter().max().map_or(1, |m| m + 1);
        let s = slots([("context", manager_context(history)), ("content", prompt.to_string())]);
        self.call(Template::Manager, &s, |text| {
            let m = ManagerOutput::parse(text)?;
            let fresh: Vec<u32> =
                m.subjects.iter().map(|s| s.id.top_level()).filter(|id| !known.contains(id)).collect();
            let mut sorted = fresh.clone();
            sorted.sort_unstable();
            let expected: Vec<u32> = (next_free..next_free + fresh.len() as u32).collect();
            if sorted != expected {
                return Err(format!(
                    "new subjects must take the next free ids starting at \"{next_free}\", found {:?}",
                    fresh
                )
                .into());
            }
            Ok(m)
        })
    }

    /// Layout call. With `refinement`, the draft and the supervisor's advice are passed as context.
    pub fn run_layout(
        &mut self,
        frame: FrameSize,
        manager: &ManagerOutput,
        refinement: Option<(&RawLayout, &SupervisorAdvice)>,
        prior_layouts: &[RawLayout],
    ) -> Result<RawLayout, AgentError> {
        let expected: BTreeSet<SubjectId> = manager.ids().cloned().collect();
        let s = slots([
            ("size", size_slot(frame)),
            ("context", layout_context(prior_layouts, refinement)),
            ("content", manager.to_text()),
        ]);
        self.call(Template::Layout, &s, |text| {
            let layout = parse_layout(text, frame).map_err(|e| e.to_string())?;
            let got: BTreeSet<SubjectId> = layout.entries.iter().map(|e| e.id.clone()).collect();
            let extra: Vec<SubjectId> = got.difference(&expected).cloned().collect();
            if !extra.is_empty() {
                return Err(format!("ids {} are not in the manager output", join_ids(&extra)).into());
            }
            let missing: Vec<SubjectId> = expected.difference(&got).cloned().collect();
            if !missing.is_empty() {
                return Err(ParseIssue { message: format!("no box for {}", join_ids(&missing)), missing });
            }
            Ok(layout.with_manager(manager.clone()))
        })
    }

    pub fn run_supervisor(&mut self, layout: &RawLayout) -> Result<SupervisorAdvice, AgentError> {
        let s = slots([("size", size_slot(layout.frame)), ("content", serialize_layout(layout))]);
        let frame = layout.frame;
        self.call(Template::Supervisor, &s, |text| SupervisorAdvice::parse(text, frame).map_err(ParseIssue::from))
    }

    /// Supervisor critique followed by a layout revision, repeated up to the configured
    /// number of rounds or until the supervisor reports the layout compliant.
    pub fn refine(
        &mut self,
        frame: FrameSize,
        manager: &ManagerOutput,
        draft: RawLayout,
        prior_layouts: &[RawLayout],
    ) -> Result<Refinement, AgentError> {
        let rounds = self.options.refine_rounds.clamp(1, MAX_REFINE_ROUNDS);
        let mut layout = draft;
        let mut advice = Vec::new();
        for _ in 0..rounds {
            let a = self.run_supervisor(&layout)?;
            let compliant = a.compliant;
            advice.push(a);
            if compliant {
                break;
            }
            layout = self.run_layout(frame, manager, Some((&layout, advice.last().expect("pushed"))), prior_layouts)?;
        }
        Ok(Refinement { layout, advice })
    }
}
