//! Hermetic chat backend.
//!
//! Responses come from a versioned transcript keyed by template and the hash of
//! the whitespace-normalized `<input>` envelope. Inputs the transcript does not
//! cover are answered by a deterministic synthesizer that produces well-formed,
//! rulebook-compliant output.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::backend::{BackendKind, ChatBackend, ChatRequest};
use super::output::{tag_body, ManagerComponentEntry, ManagerOutput, ManagerSubjectEntry, SupervisorAdvice};
use super::prompt::{input_hash, Template};
use super::AgentError;
use crate::layout::{default_layout, parse_layout, refine_rule_based, serialize_layout, validate, FrameSize, Rulebook};
use crate::lexicon::{lookup, LexiconEntry, SubjectKind};
use crate::registry::SubjectId;

pub const TRANSCRIPT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub template: Template,
    /// Either the literal input envelope or its hash must be given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempt: Option<u32>,
    pub response: String,
}

impl TranscriptEntry {
    pub fn new(template: Template, input: impl Into<String>, response: impl Into<String>) -> Self {
        Self { template, input: Some(input.into()), input_hash: None, seed: None, attempt: None, response: response.into() }
    }

    pub fn on_attempt(mut self, attempt: u32) -> Self {
        self.attempt = Some(attempt);
        self
    }

    fn key_hash(&self) -> Option<String> {
        self.input_hash.clone().or_else(|| self.input.as_deref().map(input_hash))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub schema_version: u32,
    pub entries: Vec<TranscriptEntry>,
}

impl Default for Transcript {
    fn default() -> Self {
        Self { schema_version: TRANSCRIPT_SCHEMA_VERSION, entries: vec![] }
    }
}

pub struct ScriptedMock {
    entries: BTreeMap<(Template, String), Vec<TranscriptEntry>>,
    synthesize: bool,
    rules: Rulebook,
}

impl ScriptedMock {
    /// Synthesizer only.
    pub fn synthesizing() -> Self {
        Self { entries: BTreeMap::new(), synthesize: true, rules: Rulebook::default() }
    }

    pub fn from_transcript(t: Transcript) -> Result<Self, AgentError> {
        if t.schema_version != TRANSCRIPT_SCHEMA_VERSION {
            return Err(AgentError::Transcript(format!(
                "schema_version {} is not supported (expected {TRANSCRIPT_SCHEMA_VERSION})",
                t.schema_version
            )));
        }
        let mut entries: BTreeMap<(Template, String), Vec<TranscriptEntry>> = BTreeMap::new();
        for (i, e) in t.entries.into_iter().enumerate() {
            let hash = e
                .key_hash()
                .ok_or_else(|| AgentError::Transcript(format!("entry {i} has neither input nor input_hash")))?;
            entries.entry((e.template, hash)).or_default().push(e);
        }
        Ok(Self { entries, synthesize: true, rules: Rulebook::default() })
    }

    pub fn from_file(path: &Path) -> Result<Self, AgentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AgentError::Transcript(format!("{}: {e}", path.display())))?;
        let t: Transcript =
            serde_json::from_str(&text).map_err(|e| AgentError::Transcript(format!("{}: {e}", path.display())))?;
        Self::from_transcript(t)
    }

    /// Unmatched inputs fail with `BackendUnavailable` instead of being synthesized.
    pub fn strict(mut self) -> Self {
        self.synthesize = false;
        self
    }

    fn lookup(&self, req: &ChatRequest) -> Option<&str> {
        let list = self.entries.get(&(req.template, input_hash(&req.input)))?;
        list.iter()
            .filter(|e| e.seed.map_or(true, |s| s == req.seed) && e.attempt.map_or(true, |a| a == req.attempt))
            .max_by_key(|e| (e.attempt.is_some() as u8) * 2 + e.seed.is_some() as u8)
            .map(|e| e.response.as_str())
    }
}

impl ChatBackend for ScriptedMock {
    fn complete(&self, req: &ChatRequest) -> Result<String, AgentError> {
        if let Some(r) = self.lookup(req) {
            return Ok(r.to_string());
        }
        if !self.synthesize {
            return Err(AgentError::BackendUnavailable(format!(
                "no scripted {} response for input hash {}",
                req.template.id(),
                input_hash(&req.input)
            )));
        }
        Ok(match req.template {
            Template::Manager => synth_manager(&req.input),
            Template::Layout => synth_layout(&req.input, &self.rules),
            Template::Supervisor => synth_supervisor(&req.input, &self.rules),
        })
    }

    fn kind(&self) -> BackendKind {
        BackendKind::ScriptedMock
    }
}

pub(crate) fn parse_size(text: &str) -> Option<FrameSize> {
    let inner = text.trim().strip_prefix('[')?.strip_suffix(']')?;
    let (w, h) = inner.split_once(',')?;
    let (w, h): (u32, u32) = (w.trim().parse().ok()?, h.trim().parse().ok()?);
    (w > 0 && h > 0).then(|| FrameSize::new(w, h))
}

const COLORS: &[&str] = &[
    "brown", "black", "white", "golden", "red", "blue", "green", "yellow", "gray", "grey", "orange", "pink",
    "purple", "silver", "spotted", "striped",
];
const MODIFIERS: &[&str] = &[
    "old", "young", "little", "small", "big", "large", "tall", "happy", "sleepy", "fluffy", "tiny", "giant", "cute",
    "wooden", "shiny",
];
const PALETTE: &[&str] = &["red", "blue", "green", "golden", "brown", "white", "black", "purple", "silver", "yellow"];
const SCENES: &[&str] = &[
    "park", "forest", "street", "beach", "kitchen", "room", "garden", "field", "city", "lake", "river", "mountain",
    "mountains", "snow", "desert", "library", "classroom", "meadow", "farm", "sea", "sky", "village", "cafe",
    "space", "playground", "bedroom", "yard", "jungle", "road", "shop", "market", "stage", "office",
];

fn number_word(w: &str) -> Option<usize> {
    match w {
        "a" | "an" | "one" | "the" | "his" | "her" | "their" => Some(1),
        "two" | "both" | "pair" => Some(2),
        "three" => Some(3),
        "four" => Some(4),
        _ => w.parse().ok().filter(|n| (1..=6).contains(n)),
    }
}

fn palette_pick(key: &str) -> &'static str {
    let h = Sha256::digest(key.as_bytes());
    PALETTE[h[0] as usize % PALETTE.len()]
}

struct Mention {
    entry: &'static LexiconEntry,
    count: usize,
    adjective: Option<String>,
}

fn mentions(prompt: &str) -> Vec<Mention> {
    let words: Vec<String> =
        prompt.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase).collect();
    let mut out: Vec<Mention> = Vec::new();
    for (i, w) in words.iter().enumerate() {
        let Some(entry) = lookup(w) else { continue };
        let plural = w == entry.plural && entry.plural != entry.noun;
        let mut adjective = None;
        let mut count = if plural { 2 } else { 1 };
        for back in 1..=2 {
            let Some(prev) = i.checked_sub(back).map(|j| words[j].as_str()) else { break };
            if adjective.is_none() && (COLORS.contains(&prev) || MODIFIERS.contains(&prev)) {
                adjective = Some(prev.to_string());
                continue;
            }
            if let Some(n) = number_word(prev) {
                if plural || n == 1 {
                    count = n.max(if plural { 2 } else { 1 });
                }
            }
            break;
        }
        match out.iter_mut().find(|m| m.entry.noun == entry.noun) {
            Some(m) => {
                m.count = m.count.max(count);
                if m.adjective.is_none() {
                    m.adjective = adjective;
                }
            }
            None => out.push(Mention { entry, count, adjective }),
        }
    }
    out
}

fn background(prompt: &str) -> String {
    let lower = prompt.to_lowercase();
    let words: Vec<&str> = lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).collect();
    for (i, w) in words.iter().enumerate() {
        if SCENES.contains(w) {
            let article = if i > 0 && matches!(words[i - 1], "the" | "a" | "an") { words[i - 1] } else { "the" };
            let adjective = if i > 1 && (COLORS.contains(&words[i - 1]) || MODIFIERS.contains(&words[i - 1])) {
                format!("{} ", words[i - 1])
            } else {
                String::new()
            };
            return format!("{article} {adjective}{w}");
        }
    }
    "a plain studio backdrop".into()
}

/// Prior subjects from `<turn>` blocks in the manager context, latest caption wins.
fn history_subjects(context: &str) -> (Vec<ManagerSubjectEntry>, u32) {
    let mut known: BTreeMap<SubjectId, ManagerSubjectEntry> = BTreeMap::new();
    let mut rest = context;
    while let Some(start) = rest.find("<output>") {
        let tail = &rest[start..];
        let end = tail.find("</output>").map(|e| e + "</output>".len()).unwrap_or(tail.len());
        if let Ok(m) = ManagerOutput::parse(&tail[..end]) {
            for s in m.subjects {
                known.insert(s.id.clone(), s);
            }
        }
        rest = &tail[end..];
    }
    let next = known.keys().map(|id| id.top_level()).max().unwrap_or(0) + 1;
    (known.into_values().collect(), next)
}

fn subject_noun(s: &ManagerSubjectEntry) -> Option<&'static str> {
    crate::lexicon::classify(&s.caption).map(|e| e.noun)
}

fn component_caption(subject_caption: &str, naming: &str, part: &str, scene: &str) -> String {
    format!("{naming}, the {subject_caption}'s {part}, the {part} of the {subject_caption} in {scene}")
}

fn part_naming(entry: &LexiconEntry, id: &SubjectId, part: &str, adjective: Option<&str>) -> String {
    if part == "face" {
        let moods = ["smiling", "gentle", "calm", "cheerful"];
        let h = Sha256::digest(format!("{id}:{part}").as_bytes());
        return format!("{} face", moods[h[0] as usize % moods.len()]);
    }
    let color = match (entry.kind, adjective) {
        (SubjectKind::Animal, Some(a)) if COLORS.contains(&a) => a,
        _ => palette_pick(&format!("{id}:{part}")),
    };
    format!("{color} {part}")
}

fn synth_manager(input: &str) -> String {
    let prompt = tag_body(input, "content").unwrap_or_default().trim();
    if prompt.is_empty() {
        return String::new();
    }
    let context = tag_body(input, "context").unwrap_or_default();
    let (known, mut next_id) = history_subjects(context);
    let scene = background(prompt);
    let mut subjects = Vec::new();
    let mut reused: Vec<SubjectId> = Vec::new();
    for m in mentions(prompt) {
        let candidates: Vec<&ManagerSubjectEntry> =
            known.iter().filter(|s| subject_noun(s) == Some(m.entry.noun) && !reused.contains(&s.id)).collect();
        let mut prior = candidates.into_iter();
        for _ in 0..m.count {
            if subjects.len() >= 6 {
                break;
            }
            let (id, caption, namings) = match prior.next() {
                Some(p) => {
                    reused.push(p.id.clone());
                    let caption = match &m.adjective {
                        Some(a) => format!("{a} {}", m.entry.noun),
                        None => p.caption.clone(),
                    };
                    // Keep each part's naming so colours stay consistent across turns.
                    let namings: BTreeMap<SubjectId, String> = p
                        .components
                        .iter()
                        .map(|c| (c.id.clone(), c.caption.split(',').next().unwrap_or_default().trim().to_string()))
                        .collect();
                    (p.id.clone(), caption, namings)
                }
                None => {
                    let id = SubjectId::subject(next_id);
                    next_id += 1;
                    let caption = match &m.adjective {
                        Some(a) => format!("{a} {}", m.entry.noun),
                        None => m.entry.noun.to_string(),
                    };
                    (id, caption, BTreeMap::new())
                }
            };
            let components = m
                .entry
                .parts
                .iter()
                .enumerate()
                .map(|(j, part)| {
                    let cid = id.child(j as u32 + 1).expect("depth 2");
                    let naming = namings
                        .get(&cid)
                        .cloned()
                        .unwrap_or_else(|| part_naming(m.entry, &id, part, m.adjective.as_deref()));
                    ManagerComponentEntry { caption: component_caption(&caption, &naming, part, &scene), id: cid }
                })
                .collect();
            subjects.push(ManagerSubjectEntry { id, caption, components });
        }
    }
    ManagerOutput { global_caption: prompt.to_string(), background_caption: scene, subjects }.to_text()
}

fn synth_layout(input: &str, rules: &Rulebook) -> String {
    let Some(frame) = tag_body(input, "size").and_then(parse_size) else {
        return String::new();
    };
    let Ok(manager) = ManagerOutput::parse(tag_body(input, "content").unwrap_or_default()) else {
        return String::new();
    };
    let context = tag_body(input, "context").unwrap_or_default();
    // Refinement call: repair the draft the advice refers to.
    if let (Some(draft), Some(_advice)) = (tag_body(context, "draft"), tag_body(context, "advice")) {
        if let Ok(draft) = parse_layout(draft, frame) {
            let same_ids = {
                let mut a: Vec<_> = draft.entries.iter().map(|e| e.id.clone()).collect();
                let mut b: Vec<_> = manager.ids().cloned().collect();
                a.sort();
                b.sort();
                a == b
            };
            if same_ids {
                let v = validate(&draft, rules);
                if let Ok(fixed) = refine_rule_based(draft.clone(), &v, rules) {
                    if validate(&fixed, rules).is_empty() {
                        return format!("<output>\n{}\n</output>", serialize_layout(&fixed));
                    }
                }
            }
        }
    }
    let layout = default_layout(frame, &manager, rules);
    format!("<output>\n{}\n</output>", serialize_layout(&layout))
}

fn synth_supervisor(input: &str, rules: &Rulebook) -> String {
    let frame = tag_body(input, "size").and_then(parse_size).unwrap_or(FrameSize::new(1024, 1024));
    let content = tag_body(input, "content").unwrap_or_default();
    let advice = match parse_layout(content, frame) {
        Err(e) => SupervisorAdvice {
            suggestions: vec![format!("Correct the format of the layout: {e}")],
            compliant: false,
            revised_layout: None,
        },
        Ok(layout) => {
            let findings = validate(&layout, rules);
            if findings.is_empty() {
                SupervisorAdvice::compliant()
            } else {
                SupervisorAdvice {
                    suggestions: findings.iter().map(|v| capitalize(&v.message)).collect(),
                    compliant: false,
                    revised_layout: None,
                }
            }
        }
    };
    advice.to_text()
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect::<String>() + ".",
        None => String::new(),
    }
}
