//! Structured agent outputs and their text forms.
//!
//! Manager output:
//!
//! ```text
//! <output>
//! <global_caption>a girl walks her dog in a park</global_caption>
//! <background_caption>a sunny park</background_caption>
//! ["girl", "1"]
//! ["golden hair, the girl's golden hair, waving in the wind", "1-1"]
//! </output>
//! ```

use serde::{Deserialize, Serialize};

use crate::layout::{parse_layout, parse_list_literal, serialize_layout, FrameSize, ListItem, Quote, RawLayout};
use crate::layout::quote_str;
use crate::registry::SubjectId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManagerComponentEntry {
    pub id: SubjectId,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManagerSubjectEntry {
    pub id: SubjectId,
    pub caption: String,
    #[serde(default)]
    pub components: Vec<ManagerComponentEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ManagerOutput {
    pub global_caption: String,
    pub background_caption: String,
    pub subjects: Vec<ManagerSubjectEntry>,
}

/// Text between the first `<tag>` and the following `</tag>`.
pub(crate) fn tag_body<'a>(text: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = text.find(&open)? + open.len();
    let end = text[start..].find(&close)? + start;
    Some(&text[start..end])
}

/// `text` with the first `<tag>…</tag>` element removed.
fn without_tag(text: &str, tag: &str) -> String {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let Some(start) = text.find(&open) else { return text.to_string() };
    match text[start..].find(&close) {
        Some(end) => format!("{}{}", &text[..start], &text[start + end + close.len()..]),
        None => text.to_string(),
    }
}

/// Content of the `<output>` envelope when present, else the whole text.
pub(crate) fn output_body(text: &str) -> &str {
    match text.find("<output>") {
        Some(start) => {
            let body = &text[start + "<output>".len()..];
            match body.rfind("</output>") {
                Some(end) => &body[..end],
                None => body,
            }
        }
        None => text,
    }
}

fn is_triple(caption: &str) -> bool {
    let parts: Vec<&str> = caption.split(',').collect();
    parts.len() == 3 && parts.iter().all(|p| !p.trim().is_empty())
}

impl ManagerOutput {
    pub fn ids(&self) -> impl Iterator<Item = &SubjectId> {
        self.subjects.iter().flat_map(|s| std::iter::once(&s.id).chain(s.components.iter().map(|c| &c.id)))
    }

    pub fn subject(&self, id: &SubjectId) -> Option<&ManagerSubjectEntry> {
        self.subjects.iter().find(|s| &s.id == id)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("<output>\n");
        out.push_str(&format!("<global_caption>{}</global_caption>\n", self.global_caption));
        out.push_str(&format!("<background_caption>{}</background_caption>\n", self.background_caption));
        for s in &self.subjects {
            out.push_str(&format!("[{}, {}]\n", quote_str(&s.caption, Quote::Double), quote_str(&s.id.to_string(), Quote::Double)));
            for c in &s.components {
                out.push_str(&format!(
                    "[{}, {}]\n",
                    quote_str(&c.caption, Quote::Double),
                    quote_str(&c.id.to_string(), Quote::Double)
                ));
            }
        }
        out.push_str("</output>");
        out
    }

    /// Parses manager text. Component lines may precede their subject's line, but every
    /// component needs its subject listed.
    pub fn parse(text: &str) -> Result<Self, String> {
        let body = output_body(text);
        let global = tag_body(body, "global_caption").ok_or("missing <global_caption>")?.trim().to_string();
        let background =
            tag_body(body, "background_caption").ok_or("missing <background_caption>")?.trim().to_string();
        let mut subjects: Vec<ManagerSubjectEntry> = Vec::new();
        let mut pending: Vec<ManagerComponentEntry> = Vec::new();
        let mut seen: Vec<SubjectId> = Vec::new();
        let rest = without_tag(&without_tag(body, "global_caption"), "background_caption");
        for (i, raw) in rest.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let items = parse_list_literal(line).map_err(|e| format!("line {}: {e}", i + 1))?;
            let [ListItem::Str(caption), ListItem::Str(id)] = items.as_slice() else {
                return Err(format!("line {}: expected [\"description\", \"id\"]", i + 1));
            };
            let id: SubjectId = id.trim().parse().map_err(|e| format!("line {}: {e}", i + 1))?;
            if seen.contains(&id) {
                return Err(format!("line {}: duplicate id {id}", i + 1));
            }
            seen.push(id.clone());
            let caption = caption.trim().to_string();
            if caption.is_empty() {
                return Err(format!("line {}: empty description for {id}", i + 1));
            }
            if id.is_component() {
                if !is_triple(&caption) {
                    return Err(format!(
                        "line {}: description of {id} must be \"naming, attribute, detail\"",
                        i + 1
                    ));
                }
                pending.push(ManagerComponentEntry { id, caption });
            } else {
                subjects.push(ManagerSubjectEntry { id, caption, components: vec![] });
            }
        }
        for c in pending {
            let parent = c.id.parent().expect("component id");
            let Some(s) = subjects.iter_mut().find(|s| s.id == parent) else {
                return Err(format!("component {} has no subject {parent}", c.id));
            };
            s.components.push(c);
        }
        for s in subjects.iter_mut() {
            s.components.sort_by(|a, b| a.id.cmp(&b.id));
        }
        Ok(ManagerOutput { global_caption: global, background_caption: background, subjects })
    }
}

/// Supervisor critique of one layout.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SupervisorAdvice {
    pub suggestions: Vec<String>,
    pub compliant: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revised_layout: Option<RawLayout>,
}

pub const COMPLIANT_MARKER: &str = "COMPLIANT";

impl SupervisorAdvice {
    pub fn compliant() -> Self {
        Self { suggestions: vec![], compliant: true, revised_layout: None }
    }

    /// Body of the `<advice>` element.
    pub fn advice_text(&self) -> String {
        let mut lines: Vec<String> = Vec::new();
        if self.compliant {
            lines.push(COMPLIANT_MARKER.to_string());
        }
        lines.extend(self.suggestions.iter().cloned());
        if let Some(l) = &self.revised_layout {
            lines.push(serialize_layout(l));
        }
        lines.join("\n")
    }

    pub fn to_text(&self) -> String {
        format!("<output>\n<advice>\n{}\n</advice>\n</output>", self.advice_text())
    }

    /// Parses the `<output><advice>…</advice></output>` envelope. Lines that parse as
    /// layout entries form the revised layout; other lines are suggestions.
    pub fn parse(text: &str, frame: FrameSize) -> Result<Self, String> {
        let body = output_body(text);
        let advice = tag_body(body, "advice").ok_or("missing <advice> element")?;
        let mut out = SupervisorAdvice::default();
        let mut layout_lines = Vec::new();
        for raw in advice.lines() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let bare = line.trim_end_matches('.').trim();
            if bare.eq_ignore_ascii_case(COMPLIANT_MARKER) || bare.eq_ignore_ascii_case("the layout is compliant") {
                out.compliant = true;
                continue;
            }
            if line.starts_with('[') {
                layout_lines.push(line);
                continue;
            }
            let suggestion = line.trim_start_matches(['-', '*', '•']).trim();
            let suggestion = match suggestion.split_once(". ") {
                Some((n, rest)) if n.chars().all(|c| c.is_ascii_digit()) => rest.trim(),
                _ => suggestion,
            };
            if !suggestion.is_empty() {
                out.suggestions.push(suggestion.to_string());
            }
        }
        if !layout_lines.is_empty() {
            let layout = parse_layout(&layout_lines.join("\n"), frame).map_err(|e| e.to_string())?;
            out.revised_layout = Some(layout);
        }
        if !out.compliant && out.suggestions.is_empty() && out.revised_layout.is_none() {
            return Err("advice has neither suggestions nor a compliant marker".into());
        }
        Ok(out)
    }
}
