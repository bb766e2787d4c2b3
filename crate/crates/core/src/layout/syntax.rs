//! The line format: one `["description", [x, y, w, h], "id"]` list per line.
//!
//! Input may use single or double quotes and may be wrapped in `<output>` tags.
//! Canonical output uses double quotes and a single space after each comma.

use std::fmt;

use super::{BoundingBox, FrameSize, LayoutEntry, LayoutError, RawLayout};
use crate::registry::SubjectId;

#[derive(Debug, Clone, PartialEq)]
pub enum ListItem {
    Str(String),
    Num(f64),
    List(Vec<ListItem>),
}

/// A format problem on one line (1-based line numbers).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Quote {
    #[default]
    Double,
    Single,
}

impl Quote {
    pub(crate) fn char(self) -> char {
        match self {
            Quote::Double => '"',
            Quote::Single => '\'',
        }
    }
}

struct Cursor<'a> {
    chars: std::iter::Peekable<std::str::CharIndices<'a>>,
    src: &'a str,
}

impl<'a> Cursor<'a> {
    fn new(src: &'a str) -> Self {
        Self { chars: src.char_indices().peekable(), src }
    }

    fn skip_ws(&mut self) {
        while matches!(self.chars.peek(), Some((_, c)) if c.is_whitespace()) {
            self.chars.next();
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.chars.peek().map(|(_, c)| *c)
    }

    fn expect(&mut self, want: char) -> Result<(), String> {
        self.skip_ws();
        match self.chars.next() {
            Some((_, c)) if c == want => Ok(()),
            Some((i, c)) => Err(format!("expected '{want}' at column {}, found '{c}'", i + 1)),
            None => Err(format!("expected '{want}', found end of line")),
        }
    }

    fn list(&mut self, depth: usize) -> Result<Vec<ListItem>, String> {
        if depth > 8 {
            return Err("lists nested too deeply".into());
        }
        self.expect('[')?;
        let mut items = Vec::new();
        self.skip_ws();
        if self.peek() == Some(']') {
            self.chars.next();
            return Ok(items);
        }
        loop {
            items.push(self.item(depth)?);
            self.skip_ws();
            match self.chars.next() {
                Some((_, ',')) => {
                    self.skip_ws();
                    if self.peek() == Some(']') {
                        self.chars.next();
                        return Ok(items);
                    }
                }
                Some((_, ']')) => return Ok(items),
                Some((i, c)) => return Err(format!("expected ',' or ']' at column {}, found '{c}'", i + 1)),
                None => return Err("unterminated list".into()),
            }
        }
    }

    fn item(&mut self, depth: usize) -> Result<ListItem, String> {
        self.skip_ws();
        match self.peek() {
            Some('[') => Ok(ListItem::List(self.list(depth + 1)?)),
            Some(q @ ('"' | '\'')) => {
                self.chars.next();
                self.string(q).map(ListItem::Str)
            }
            Some(c) if c == '-' || c == '+' || c == '.' || c.is_ascii_digit() => self.number().map(ListItem::Num),
            Some(c) => Err(format!("unexpected character '{c}'")),
            None => Err("unexpected end of line".into()),
        }
    }

    fn string(&mut self, quote: char) -> Result<String, String> {
        let mut out = String::new();
        while let Some((_, c)) = self.chars.next() {
            match c {
                '\\' => match self.chars.next() {
                    Some((_, 'n')) => out.push('\n'),
                    Some((_, 't')) => out.push('\t'),
                    Some((_, e)) => out.push(e),
                    None => break,
                },
                c if c == quote => return Ok(out),
                c => out.push(c),
            }
        }
        Err("unterminated string".into())
    }

    fn number(&mut self) -> Result<f64, String> {
        let start = self.chars.peek().map(|(i, _)| *i).unwrap_or(self.src.len());
        let mut end = start;
        while let Some(&(i, c)) = self.chars.peek() {
            if c.is_ascii_digit() || matches!(c, '-' | '+' | '.' | 'e' | 'E') {
                end = i + c.len_utf8();
                self.chars.next();
            } else {
                break;
            }
        }
        let text = &self.src[start..end];
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(format!("invalid number {text:?}")),
        }
    }

    fn rest(&mut self) -> &'a str {
        match self.chars.peek() {
            Some(&(i, _)) => &self.src[i..],
            None => "",
        }
    }
}

/// Parses one bracketed list literal; trailing text other than a comma is rejected.
pub fn parse_list_literal(line: &str) -> Result<Vec<ListItem>, String> {
    let mut cur = Cursor::new(line);
    let items = cur.list(0)?;
    let rest = cur.rest().trim();
    if !(rest.is_empty() || rest == ",") {
        return Err(format!("unexpected trailing text {rest:?}"));
    }
    Ok(items)
}

/// Strips `<output>` wrappers from a line, returning the payload.
pub(crate) fn strip_output_tags(line: &str) -> &str {
    let mut s = line.trim();
    for tag in ["<output>", "</output>"] {
        if let Some(rest) = s.strip_prefix(tag) {
            s = rest.trim();
        }
        if let Some(rest) = s.strip_suffix(tag) {
            s = rest.trim();
        }
    }
    s
}

fn coordinate(item: &ListItem) -> Result<i64, String> {
    match item {
        ListItem::Num(v) => Ok(v.round() as i64),
        other => Err(format!("box coordinate must be a number, found {other:?}")),
    }
}

fn entry_from_items(items: &[ListItem]) -> Result<LayoutEntry, String> {
    let [desc, bbox, id] = items else {
        return Err(format!("expected [description, [x, y, w, h], id], found {} elements", items.len()));
    };
    let ListItem::Str(description) = desc else {
        return Err("description must be a quoted string".into());
    };
    let ListItem::List(coords) = bbox else {
        return Err("bounding box must be a list [x, y, w, h]".into());
    };
    if coords.len() != 4 {
        return Err(format!("bounding box has {} elements, expected 4", coords.len()));
    }
    let [x, y, w, h] = [0, 1, 2, 3].map(|i| coordinate(&coords[i]));
    let (x, y, w, h) = (x?, y?, w?, h?);
    let bbox = BoundingBox::try_new(x, y, w, h)
        .ok_or_else(|| format!("invalid bounding box [{x}, {y}, {w}, {h}]"))?;
    let id = match id {
        ListItem::Str(s) => s.trim().parse::<SubjectId>().map_err(|e| e.to_string())?,
        ListItem::Num(v) if v.fract() == 0.0 && *v >= 1.0 => {
            (*v as u64).to_string().parse::<SubjectId>().map_err(|e| e.to_string())?
        }
        _ => return Err("id must be a quoted string".into()),
    };
    Ok(LayoutEntry { description: description.clone(), bbox, id })
}

/// Parses layout text for `frame`. Every bad line is reported.
pub fn parse_layout(text: &str, frame: FrameSize) -> Result<RawLayout, LayoutError> {
    let mut entries: Vec<LayoutEntry> = Vec::new();
    let mut errors = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = strip_output_tags(raw);
        if line.is_empty() {
            continue;
        }
        let parsed = parse_list_literal(line).and_then(|items| entry_from_items(&items));
        match parsed {
            Ok(e) if entries.iter().any(|x| x.id == e.id) => {
                errors.push(LineError { line: i + 1, message: format!("duplicate id {}", e.id) })
            }
            Ok(e) => entries.push(e),
            Err(message) => errors.push(LineError { line: i + 1, message }),
        }
    }
    if errors.is_empty() {
        Ok(RawLayout::new(frame, entries))
    } else {
        Err(LayoutError::Format(errors))
    }
}

pub(crate) fn quote_str(s: &str, quote: Quote) -> String {
    let q = quote.char();
    let mut out = String::with_capacity(s.len() + 2);
    out.push(q);
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c if c == q => {
                out.push('\\');
                out.push(c);
            }
            c => out.push(c),
        }
    }
    out.push(q);
    out
}

pub fn serialize_layout(layout: &RawLayout) -> String {
    serialize_layout_with(layout, Quote::Double)
}

pub fn serialize_layout_with(layout: &RawLayout, quote: Quote) -> String {
    layout
        .entries
        .iter()
        .map(|e| {
            let b = e.bbox;
            format!(
                "[{}, [{}, {}, {}, {}], {}]",
                quote_str(&e.description, quote),
                b.x,
                b.y,
                b.w,
                b.h,
                quote_str(&e.id.to_string(), quote)
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}
