//! Command-line driver and HTTP service for the autostudio engine.

pub mod args;
pub mod server;

use autostudio_core::layout::{advisories, parse_layout, validate, FrameSize, LayoutDocument, RawLayout, Rulebook, Violation};

/// Rulebook findings for one layout file.
#[derive(Debug, serde::Serialize)]
pub struct LayoutReport {
    pub frame: FrameSize,
    pub entries: usize,
    pub violations: Vec<Violation>,
    pub advisories: Vec<Violation>,
}

/// Parses `text` as JSON `{frame, entries}` when it starts with `{`, otherwise
/// as list-literal lines on `frame`, and checks it against the default rulebook.
pub fn check_layout(text: &str, frame: FrameSize) -> Result<LayoutReport, String> {
    let layout = if text.trim_start().starts_with('{') {
        let doc: LayoutDocument = serde_json::from_str(text).map_err(|e| format!("invalid layout JSON: {e}"))?;
        RawLayout::from_document(doc)
    } else {
        parse_layout(text, frame).map_err(|e| e.to_string())?
    };
    let rules = Rulebook::default();
    Ok(LayoutReport {
        frame: layout.frame,
        entries: layout.entries.len(),
        violations: validate(&layout, &rules),
        advisories: advisories(&layout, &rules),
    })
}
