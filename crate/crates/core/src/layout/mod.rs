//! Bounding-box layouts: the line format, the rulebook validator, the
//! rule-based refiner and rasterization of boxes to latent masks.

mod place;
mod raster;
mod refine;
mod rules;
mod syntax;

use serde::{Deserialize, Serialize};

use crate::agents::ManagerOutput;
use crate::registry::SubjectId;

pub use place::default_layout;
pub use raster::{rasterize_mask, rasterize_mask_contained};
pub use refine::{refine_rule_based, resize_centered, MAX_REFINE_PASSES};
pub use rules::{advisories, overlap_fraction, validate, Rulebook, Severity, Violation, ViolationKind};
pub(crate) use syntax::quote_str;
pub use syntax::{
    parse_layout, parse_list_literal, serialize_layout, serialize_layout_with, LineError, ListItem, Quote,
};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LayoutError {
    #[error("layout format violation: {}", format_line_errors(.0))]
    Format(Vec<LineError>),
    #[error("layout is unsatisfiable: {0}")]
    Unsatisfiable(String),
}

fn format_line_errors(errs: &[LineError]) -> String {
    errs.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; ")
}

/// Axis-aligned box in frame pixels: top-left corner, width, height.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BoundingBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BoundingBox {
    /// Panics on zero width or height.
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        assert!(w > 0 && h > 0, "bounding boxes have positive extent");
        Self { x, y, w, h }
    }

    pub fn try_new(x: i64, y: i64, w: i64, h: i64) -> Option<Self> {
        let ok = |v: i64| (0..=u32::MAX as i64).contains(&v);
        (ok(x) && ok(y) && w > 0 && h > 0 && ok(w) && ok(h)).then_some(Self { x: x as u32, y: y as u32, w: w as u32, h: h as u32 })
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn right(&self) -> u64 {
        self.x as u64 + self.w as u64
    }

    pub fn bottom(&self) -> u64 {
        self.y as u64 + self.h as u64
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x as f64 + self.w as f64 / 2.0, self.y as f64 + self.h as f64 / 2.0)
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> u64 {
        let iw = self.right().min(other.right()).saturating_sub(self.x.max(other.x) as u64);
        let ih = self.bottom().min(other.bottom()).saturating_sub(self.y.max(other.y) as u64);
        iw * ih
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        other.x >= self.x && other.y >= self.y && other.right() <= self.right() && other.bottom() <= self.bottom()
    }

    pub fn within_frame(&self, frame: FrameSize) -> bool {
        self.right() <= frame.width as u64 && self.bottom() <= frame.height as u64
    }

    pub fn to_array(self) -> [u32; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

impl Serialize for BoundingBox {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for BoundingBox {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [x, y, w, h] = <[i64; 4]>::deserialize(d)?;
        BoundingBox::try_new(x, y, w, h)
            .ok_or_else(|| serde::de::Error::custom(format!("invalid box [{x}, {y}, {w}, {h}]")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameSize {
    pub width: u32,
    pub height: u32,
}

impl FrameSize {
    pub fn new(width: u32, height: u32) -> Self {
        assert!(width > 0 && height > 0, "frame dimensions are positive");
        Self { width, height }
    }

    pub fn area(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    pub fn full_box(&self) -> BoundingBox {
        BoundingBox::new(0, 0, self.width, self.height)
    }
}

impl std::str::FromStr for FrameSize {
    type Err = String;

    /// Parses `WxH`, e.g. `1024x768`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("frame {s:?} is not of the form WxH"))?;
        let w: u32 = w.trim().parse().map_err(|_| format!("bad frame width in {s:?}"))?;
        let h: u32 = h.trim().parse().map_err(|_| format!("bad frame height in {s:?}"))?;
        if w == 0 || h == 0 {
            return Err(format!("frame {s:?} must be positive"));
        }
        Ok(FrameSize { width: w, height: h })
    }
}

impl std::fmt::Display for FrameSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub description: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub id: SubjectId,
}

impl LayoutEntry {
    pub fn new(description: impl Into<String>, bbox: BoundingBox, id: SubjectId) -> Self {
        Self { description: description.into(), bbox, id }
    }
}

/// A layout for one frame: one entry per subject and component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawLayout {
    pub frame: FrameSize,
    pub entries: Vec<LayoutEntry>,
    #[serde(skip)]
    pub manager: ManagerOutput,
}

/// JSON form used by the HTTP API: `{frame, entries:[{description, box, id}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutDocument {
    pub frame: FrameSize,
    pub entries: Vec<LayoutEntry>,
}

impl RawLayout {
    pub fn new(frame: FrameSize, entries: Vec<LayoutEntry>) -> Self {
        Self { frame, entries, manager: ManagerOutput::default() }
    }

    pub fn with_manager(mut self, manager: ManagerOutput) -> Self {
        self.manager = manager;
        self
    }

    pub fn entry(&self, id: &SubjectId) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| &e.id == id)
    }

    pub fn subjects(&self) -> impl Iterator<Item = &LayoutEntry> {
        self.entries.iter().filter(|e| !e.id.is_component())
    }

    pub fn components_of<'a>(&'a self, parent: &'a SubjectId) -> impl Iterator<Item = &'a LayoutEntry> + 'a {
        self.entries.iter().filter(move |e| e.id.parent().as_ref() == Some(parent))
    }

    pub fn to_document(&self) -> LayoutDocument {
        LayoutDocument { frame: self.frame, entries: self.entries.clone() }
    }

    pub fn from_document(doc: LayoutDocument) -> Self {
        Self::new(doc.frame, doc.entries)
    }

    /// Layout entries with the same ids as `other`, ignoring order.
    pub fn same_entries(&self, other: &RawLayout) -> bool {
        let mut a = self.entries.clone();
        let mut b = other.entries.clone();
        a.sort_by(|x, y| x.id.cmp(&y.id));
        b.sort_by(|x, y| x.id.cmp(&y.id));
        a == b
    }
}
