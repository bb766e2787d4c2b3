//! Deterministic rulebook validator.
//!
//! All area thresholds are fractions of the frame area, so non-square frames
//! reuse the same ratios. Reference sizes quoted for a 1024×1024 frame are
//! scaled by the square root of the frame-area ratio.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{BoundingBox, FrameSize, LayoutEntry, RawLayout};
use crate::registry::SubjectId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ViolationKind {
    Overlap,
    TooLarge,
    TooSmall,
    SizeSpread,
    AspectRatio,
    OutOfFrame,
    ComponentOutsideParent,
    ComponentLayout,
    HeadBodyRatio,
    Format,
    /// Advisory only: subject mass centre far from the frame centre.
    Composition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Hard,
    Advisory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub ids: Vec<SubjectId>,
    /// The violated quantity, e.g. the overlap fraction or area fraction.
    pub measure: f64,
    pub message: String,
    pub severity: Severity,
}

impl Violation {
    fn hard(kind: ViolationKind, ids: Vec<SubjectId>, measure: f64, message: String) -> Self {
        Self { kind, ids, measure, message, severity: Severity::Hard }
    }

    fn advisory(kind: ViolationKind, ids: Vec<SubjectId>, measure: f64, message: String) -> Self {
        Self { kind, ids, measure, message, severity: Severity::Advisory }
    }
}

/// Thresholds and keyword sets used by [`validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Rulebook {
    pub max_area_fraction: f64,
    pub min_area_fraction: f64,
    pub min_to_max_area_ratio: f64,
    pub max_aspect_ratio: f64,
    pub max_overlap: f64,
    pub head_fraction: f64,
    pub head_fraction_tolerance: f64,
    pub min_component_coverage: f64,
    pub max_components: usize,
    /// Minimum subject side for a 1024-pixel reference frame (advisory).
    pub reference_min_side: f64,
    /// Centroid distance from the frame centre, as a fraction of the frame diagonal (advisory).
    pub centroid_tolerance: f64,
    pub human_keywords: Vec<String>,
    pub head_keywords: Vec<String>,
    pub body_keywords: Vec<String>,
    pub accessory_keywords: Vec<String>,
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl Default for Rulebook {
    fn default() -> Self {
        Self {
            max_area_fraction: 0.5,
            min_area_fraction: 1.0 / 25.0,
            min_to_max_area_ratio: 1.0 / 6.0,
            max_aspect_ratio: 2.0,
            max_overlap: 0.25,
            head_fraction: 0.3,
            head_fraction_tolerance: 0.1,
            min_component_coverage: 0.5,
            max_components: 7,
            reference_min_side: 250.0,
            centroid_tolerance: 0.25,
            human_keywords: words(&[
                "person", "people", "man", "woman", "boy", "girl", "child", "kid", "adult", "lady", "gentleman",
                "princess", "prince", "king", "queen", "knight", "wizard", "witch", "farmer", "soldier", "student",
                "teacher", "doctor", "chef", "grandmother", "grandfather", "grandma", "grandpa", "mother", "father",
                "baby", "pirate", "detective", "nurse", "astronaut", "sailor", "human",
            ]),
            head_keywords: words(&["head", "face", "hair", "eyes", "eye", "nose", "mouth", "ears", "beard"]),
            body_keywords: words(&[
                "body", "torso", "clothing", "clothes", "dress", "gown", "shirt", "coat", "robe", "jacket", "suit",
                "skirt", "trousers", "pants", "armor", "armour", "uniform", "sweater", "overalls", "cloak",
            ]),
            accessory_keywords: words(&["hat", "crown", "cap", "helmet", "halo", "tiara", "hood"]),
        }
    }
}

impl Rulebook {
    fn naming_words(description: &str) -> Vec<String> {
        description
            .split(',')
            .next()
            .unwrap_or_default()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| w.to_lowercase())
            .collect()
    }

    fn matches(keywords: &[String], description: &str) -> bool {
        Self::naming_words(description).iter().any(|w| {
            keywords.iter().any(|k| w == k || (w.len() == k.len() + 1 && w.starts_with(k.as_str()) && w.ends_with('s')))
        })
    }

    pub fn is_human(&self, description: &str) -> bool {
        Self::matches(&self.human_keywords, description)
    }

    pub fn is_head_part(&self, description: &str) -> bool {
        Self::matches(&self.head_keywords, description)
    }

    pub fn is_body_part(&self, description: &str) -> bool {
        !self.is_head_part(description) && Self::matches(&self.body_keywords, description)
    }

    pub fn is_accessory(&self, description: &str) -> bool {
        Self::matches(&self.accessory_keywords, description)
    }

    /// Linear scale from the 1024×1024 reference frame to `frame`.
    pub fn reference_scale(frame: FrameSize) -> f64 {
        (frame.area() as f64 / (1024.0 * 1024.0)).sqrt()
    }

    pub fn max_subject_area(&self, frame: FrameSize) -> f64 {
        self.max_area_fraction * frame.area() as f64
    }

    pub fn min_subject_area(&self, frame: FrameSize) -> f64 {
        self.min_area_fraction * frame.area() as f64
    }
}

/// Intersection area over the smaller box's area; 0 when disjoint.
pub fn overlap_fraction(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0 {
        return 0.0;
    }
    inter as f64 / a.area().min(b.area()) as f64
}

fn out_of_frame_fraction(b: &BoundingBox, frame: FrameSize) -> f64 {
    let inside = b.intersection_area(&frame.full_box());
    1.0 - inside as f64 / b.area() as f64
}

/// Area of the union of `boxes` clipped to `clip`, by coordinate compression.
pub(crate) fn union_area_within(boxes: &[BoundingBox], clip: &BoundingBox) -> u64 {
    let clipped: Vec<(u64, u64, u64, u64)> = boxes
        .iter()
        .filter_map(|b| {
            let x0 = (b.x as u64).max(clip.x as u64);
            let y0 = (b.y as u64).max(clip.y as u64);
            let x1 = b.right().min(clip.right());
            let y1 = b.bottom().min(clip.bottom());
            (x0 < x1 && y0 < y1).then_some((x0, y0, x1, y1))
        })
        .collect();
    let mut xs: Vec<u64> = clipped.iter().flat_map(|r| [r.0, r.2]).collect();
    let mut ys: Vec<u64> = clipped.iter().flat_map(|r| [r.1, r.3]).collect();
    xs.sort_unstable();
    xs.dedup();
    ys.sort_unstable();
    ys.dedup();
    let mut area = 0;
    for xw in xs.windows(2) {
        for yw in ys.windows(2) {
            let covered = clipped.iter().any(|r| r.0 <= xw[0] && xw[1] <= r.2 && r.1 <= yw[0] && yw[1] <= r.3);
            if covered {
                area += (xw[1] - xw[0]) * (yw[1] - yw[0]);
            }
        }
    }
    area
}

fn pct(v: f64) -> String {
    format!("{:.1}%", v * 100.0)
}

fn is_triple(description: &str) -> bool {
    let parts: Vec<&str> = description.split(',').collect();
    parts.len() == 3 && parts.iter().all(|p| !p.trim().is_empty())
}

/// Every hard rule violation in `layout`, in a canonical order. Empty iff compliant.
pub fn validate(layout: &RawLayout, rules: &Rulebook) -> Vec<Violation> {
    let frame = layout.frame;
    let frame_area = frame.area() as f64;
    let mut out = Vec::new();

    let mut subjects: Vec<&LayoutEntry> = layout.subjects().collect();
    subjects.sort_by(|a, b| a.id.cmp(&b.id));
    let mut components: BTreeMap<SubjectId, Vec<&LayoutEntry>> = BTreeMap::new();
    for e in layout.entries.iter().filter(|e| e.id.is_component()) {
        components.entry(e.id.parent().expect("component")).or_default().push(e);
    }
    for list in components.values_mut() {
        list.sort_by(|a, b| a.id.cmp(&b.id));
    }

    // Frame containment, every entry.
    let mut all: Vec<&LayoutEntry> = layout.entries.iter().collect();
    all.sort_by(|a, b| a.id.cmp(&b.id));
    for e in &all {
        if !e.bbox.within_frame(frame) {
            let f = out_of_frame_fraction(&e.bbox, frame);
            out.push(Violation::hard(
                ViolationKind::OutOfFrame,
                vec![e.id.clone()],
                f,
                format!("\"{}\" extends outside the {} frame ({} of its area)", e.id, frame, pct(f)),
            ));
        }
    }

    // Absolute size and proportion of main bodies.
    for s in &subjects {
        let frac = s.bbox.area() as f64 / frame_area;
        if frac > rules.max_area_fraction {
            out.push(Violation::hard(
                ViolationKind::TooLarge,
                vec![s.id.clone()],
                frac,
                format!("\"{}\" covers {} of the frame; the maximum is {}", s.id, pct(frac), pct(rules.max_area_fraction)),
            ));
        }
        if frac < rules.min_area_fraction {
            out.push(Violation::hard(
                ViolationKind::TooSmall,
                vec![s.id.clone()],
                frac,
                format!("\"{}\" covers {} of the frame; the minimum is {}", s.id, pct(frac), pct(rules.min_area_fraction)),
            ));
        }
        let (long, short) = (s.bbox.w.max(s.bbox.h) as f64, s.bbox.w.min(s.bbox.h) as f64);
        let aspect = long / short;
        if aspect > rules.max_aspect_ratio {
            out.push(Violation::hard(
                ViolationKind::AspectRatio,
                vec![s.id.clone()],
                aspect,
                format!("\"{}\" has a {:.2}:1 aspect ratio; sides may differ by at most {}x", s.id, aspect, rules.max_aspect_ratio),
            ));
        }
    }

    // Relative size of the smallest and largest main body.
    if subjects.len() >= 2 {
        let smallest = subjects.iter().min_by(|a, b| a.bbox.area().cmp(&b.bbox.area()).then(a.id.cmp(&b.id))).unwrap();
        let largest = subjects.iter().max_by(|a, b| a.bbox.area().cmp(&b.bbox.area()).then(b.id.cmp(&a.id))).unwrap();
        let ratio = smallest.bbox.area() as f64 / largest.bbox.area() as f64;
        if ratio < rules.min_to_max_area_ratio {
            out.push(Violation::hard(
                ViolationKind::SizeSpread,
                vec![smallest.id.clone(), largest.id.clone()],
                ratio,
                format!(
                    "\"{}\" is {:.3} of the area of \"{}\"; it should be at least {:.3}",
                    smallest.id, ratio, largest.id, rules.min_to_max_area_ratio
                ),
            ));
        }
    }

    // Pairwise overlap between main bodies.
    for (i, a) in subjects.iter().enumerate() {
        for b in &subjects[i + 1..] {
            let f = overlap_fraction(&a.bbox, &b.bbox);
            if f > rules.max_overlap {
                out.push(Violation::hard(
                    ViolationKind::Overlap,
                    vec![a.id.clone(), b.id.clone()],
                    f,
                    format!(
                        "increase the spacing between \"{}\" and \"{}\": they overlap by {}, above the {} limit",
                        a.id,
                        b.id,
                        pct(f),
                        pct(rules.max_overlap)
                    ),
                ));
            }
        }
    }

    // Components relative to their parent.
    for (parent_id, comps) in &components {
        let Some(parent) = layout.entry(parent_id) else {
            for c in comps {
                out.push(Violation::hard(
                    ViolationKind::Format,
                    vec![c.id.clone()],
                    1.0,
                    format!("component \"{}\" has no parent entry \"{}\"", c.id, parent_id),
                ));
            }
            continue;
        };
        if comps.len() > rules.max_components {
            out.push(Violation::hard(
                ViolationKind::Format,
                vec![parent_id.clone()],
                comps.len() as f64,
                format!("\"{}\" has {} components; at most {} are allowed", parent_id, comps.len(), rules.max_components),
            ));
        }
        for c in comps {
            if !is_triple(&c.description) {
                out.push(Violation::hard(
                    ViolationKind::Format,
                    vec![c.id.clone()],
                    c.description.split(',').count() as f64,
                    format!(
                        "description of \"{}\" must have three comma-separated parts: naming, attribute, detail",
                        c.id
                    ),
                ));
            }
            if !component_placement_ok(rules, &parent.bbox, c) {
                let inside = c.bbox.intersection_area(&parent.bbox) as f64 / c.bbox.area() as f64;
                out.push(Violation::hard(
                    ViolationKind::ComponentOutsideParent,
                    vec![c.id.clone(), parent_id.clone()],
                    1.0 - inside,
                    format!("\"{}\" should lie inside its main body \"{}\" ({} outside)", c.id, parent_id, pct(1.0 - inside)),
                ));
            }
        }
        let non_accessory: Vec<BoundingBox> =
            comps.iter().filter(|c| !rules.is_accessory(&c.description)).map(|c| c.bbox).collect();
        if !non_accessory.is_empty() {
            let coverage = union_area_within(&non_accessory, &parent.bbox) as f64 / parent.bbox.area() as f64;
            if coverage < rules.min_component_coverage {
                out.push(Violation::hard(
                    ViolationKind::ComponentLayout,
                    vec![parent_id.clone()],
                    coverage,
                    format!(
                        "components of \"{}\" fill only {} of it; they should fill the main body",
                        parent_id,
                        pct(coverage)
                    ),
                ));
            }
        }
        if rules.is_human(&parent.description) {
            check_head_body(rules, parent_id, comps, &mut out);
        }
    }

    out.sort_by(|a, b| (a.kind, &a.ids).cmp(&(b.kind, &b.ids)));
    out
}

fn component_placement_ok(rules: &Rulebook, parent: &BoundingBox, c: &LayoutEntry) -> bool {
    if parent.contains(&c.bbox) {
        return true;
    }
    // Hats and crowns sit on top of the main body, touching it.
    rules.is_accessory(&c.description)
        && c.bbox.x >= parent.x
        && c.bbox.right() <= parent.right()
        && c.bbox.y < parent.y
        && c.bbox.bottom() >= parent.y as u64
        && c.bbox.bottom() <= parent.bottom()
}

/// Vertical extent (top, bottom) spanned by a group of boxes.
fn vertical_span(boxes: &[&LayoutEntry]) -> Option<(u64, u64)> {
    let top = boxes.iter().map(|e| e.bbox.y as u64).min()?;
    let bottom = boxes.iter().map(|e| e.bbox.bottom()).max()?;
    Some((top, bottom))
}

fn check_head_body(rules: &Rulebook, parent_id: &SubjectId, comps: &[&LayoutEntry], out: &mut Vec<Violation>) {
    let head: Vec<&LayoutEntry> = comps.iter().copied().filter(|c| rules.is_head_part(&c.description)).collect();
    let body: Vec<&LayoutEntry> = comps.iter().copied().filter(|c| rules.is_body_part(&c.description)).collect();
    let (Some((head_top, head_bottom)), Some((body_top, body_bottom))) = (vertical_span(&head), vertical_span(&body))
    else {
        return;
    };
    let head_center = (head_top + head_bottom) as f64 / 2.0;
    let body_center = (body_top + body_bottom) as f64 / 2.0;
    if head_center >= body_center {
        out.push(Violation::hard(
            ViolationKind::ComponentLayout,
            vec![parent_id.clone()],
            head_center - body_center,
            format!("the head of \"{parent_id}\" should be above its body"),
        ));
        return;
    }
    let head_h = (head_bottom - head_top) as f64;
    let body_h = (body_bottom - body_top) as f64;
    let frac = head_h / (head_h + body_h);
    if (frac - rules.head_fraction).abs() > rules.head_fraction_tolerance {
        out.push(Violation::hard(
            ViolationKind::HeadBodyRatio,
            vec![parent_id.clone()],
            frac,
            format!(
                "the head of \"{}\" takes {} of the head+body height; it should be about {}",
                parent_id,
                pct(frac),
                pct(rules.head_fraction)
            ),
        ));
    }
}

/// Soft guidance that is reported but never blocks a layout: subject minimum side
/// and overall composition.
pub fn advisories(layout: &RawLayout, rules: &Rulebook) -> Vec<Violation> {
    let frame = layout.frame;
    let mut out = Vec::new();
    let mut subjects: Vec<&LayoutEntry> = layout.subjects().collect();
    subjects.sort_by(|a, b| a.id.cmp(&b.id));
    let min_side = rules.reference_min_side * Rulebook::reference_scale(frame);
    for s in &subjects {
        let short = s.bbox.w.min(s.bbox.h) as f64;
        if short < min_side {
            out.push(Violation::advisory(
                ViolationKind::TooSmall,
                vec![s.id.clone()],
                short,
                format!("\"{}\" is only {short} pixels on its short side; prefer at least {min_side:.0}", s.id),
            ));
        }
    }
    let total: f64 = subjects.iter().map(|s| s.bbox.area() as f64).sum();
    if total > 0.0 {
        let (cx, cy) = subjects.iter().fold((0.0, 0.0), |(x, y), s| {
            let (sx, sy) = s.bbox.center();
            let a = s.bbox.area() as f64;
            (x + sx * a / total, y + sy * a / total)
        });
        let (fx, fy) = (frame.width as f64 / 2.0, frame.height as f64 / 2.0);
        // "Slightly below the centre" counts as centred.
        let dy = if cy > fy { (cy - fy - 0.1 * frame.height as f64).max(0.0) } else { fy - cy };
        let dist = ((cx - fx).powi(2) + dy.powi(2)).sqrt();
        let diag = ((frame.width as f64).powi(2) + (frame.height as f64).powi(2)).sqrt();
        if dist / diag > rules.centroid_tolerance {
            out.push(Violation::advisory(
                ViolationKind::Composition,
                subjects.iter().map(|s| s.id.clone()).collect(),
                dist / diag,
                "the subjects' mass centre is far from the frame centre".into(),
            ));
        }
    }
    out
}
