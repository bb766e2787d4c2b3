//! Prompt templates and the `<input>` envelope.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::AgentError;
use crate::layout::FrameSize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Template {
    Manager,
    Layout,
    Supervisor,
}

const INPUT_MARKER: &str = "{{input}}";

impl Template {
    pub const ALL: [Template; 3] = [Template::Manager, Template::Layout, Template::Supervisor];

    pub fn id(self) -> &'static str {
        match self {
            Template::Manager => "manager",
            Template::Layout => "layout",
            Template::Supervisor => "supervisor",
        }
    }

    /// Raw template text with an `{{input}}` marker where the envelope goes.
    pub fn text(self) -> &'static str {
        match self {
            Template::Manager => include_str!("../../templates/manager.txt"),
            Template::Layout => include_str!("../../templates/layout.txt"),
            Template::Supervisor => include_str!("../../templates/supervisor.txt"),
        }
    }

    /// Envelope slots in the order they appear.
    pub fn slots(self) -> &'static [&'static str] {
        match self {
            Template::Manager => &["context", "content"],
            Template::Layout => &["size", "context", "content"],
            Template::Supervisor => &["size", "content"],
        }
    }

    /// Instructions without the envelope, used as the system message.
    pub fn instructions(self) -> String {
        self.text().replace(&format!("\n{INPUT_MARKER}\n"), "\n")
    }
}

impl std::str::FromStr for Template {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Template::ALL.into_iter().find(|t| t.id() == s).ok_or_else(|| format!("unknown template {s:?}"))
    }
}

/// `[W, H]`, the form used in the size slot.
pub fn size_slot(frame: FrameSize) -> String {
    format!("[{}, {}]", frame.width, frame.height)
}

pub type Slots = BTreeMap<String, String>;

pub fn slots<const N: usize>(pairs: [(&str, String); N]) -> Slots {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// The `<input>` envelope for `template`. Every slot the template declares must be present;
/// keys it does not declare are ignored.
pub fn render_input(template: Template, slots: &Slots) -> Result<String, AgentError> {
    let mut out = String::from("<input>\n");
    for &name in template.slots() {
        let value = slots.get(name).ok_or_else(|| AgentError::MissingSlot {
            template: template.id(),
            slot: name.to_string(),
        })?;
        out.push_str(&format!("    <{name}>{value}</{name}>\n"));
    }
    out.push_str("</input>");
    Ok(out)
}

/// Full prompt text: instructions with the envelope in place.
pub fn render_prompt(template: Template, slots: &Slots) -> Result<String, AgentError> {
    let input = render_input(template, slots)?;
    Ok(template.text().replace(INPUT_MARKER, &input))
}

/// Whitespace runs collapsed to single spaces, ends trimmed.
pub fn normalize_input(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Hex SHA-256 of the normalized input; the key for scripted transcripts.
pub fn input_hash(text: &str) -> String {
    hex::encode(Sha256::digest(normalize_input(text).as_bytes()))
}
