//! Deterministic placement of subjects and their parts from reference sizes.
//!
//! Used by the scripted chat backend and as the fallback when no layout agent
//! answer can be used.

use super::refine::refine_rule_based;
use super::rules::{validate, Rulebook};
use super::{BoundingBox, FrameSize, LayoutEntry, RawLayout};
use crate::agents::{ManagerComponentEntry, ManagerOutput};
use crate::lexicon::{classify, SubjectKind};

/// Box at fractional offsets of `p`, kept inside `p`.
fn sub_box(p: &BoundingBox, fx: f64, fy: f64, fw: f64, fh: f64) -> BoundingBox {
    let x = p.x + (fx * p.w as f64).floor() as u32;
    let y = p.y + (fy * p.h as f64).floor() as u32;
    let w = ((fw * p.w as f64).floor() as u32).clamp(1, (p.right() - x as u64) as u32);
    let h = ((fh * p.h as f64).floor() as u32).clamp(1, (p.bottom() - y as u64) as u32);
    BoundingBox::new(x, y, w, h)
}

fn kind_of(caption: &str, rules: &Rulebook) -> SubjectKind {
    if let Some(e) = classify(caption) {
        return e.kind;
    }
    if rules.is_human(caption) {
        SubjectKind::Human
    } else {
        SubjectKind::Object
    }
}

fn reference_size(caption: &str, rules: &Rulebook) -> (f64, f64) {
    let (w, h) = match classify(caption) {
        Some(e) => e.reference_size,
        None if rules.is_human(caption) => (350, 600),
        None => (320, 320),
    };
    (w as f64, h as f64)
}

/// Lays out every subject and component of `manager` in `frame` so the default
/// rulebook is satisfied whenever that is possible.
pub fn default_layout(frame: FrameSize, manager: &ManagerOutput, rules: &Rulebook) -> RawLayout {
    let n = manager.subjects.len();
    if n == 0 {
        return RawLayout::new(frame, vec![]).with_manager(manager.clone());
    }
    let (fw, fh) = (frame.width as f64, frame.height as f64);
    let frame_area = fw * fh;
    let scale = Rulebook::reference_scale(frame);
    let rows = if n <= 3 { 1 } else { 2 };
    let cols = n.div_ceil(rows);
    let (cell_w, cell_h) = (fw / cols as f64, fh / rows as f64);

    let mut sizes: Vec<(f64, f64)> = manager
        .subjects
        .iter()
        .map(|s| {
            let (w0, h0) = reference_size(&s.caption, rules);
            let (w0, h0) = (w0 * scale, h0 * scale);
            let fit = (0.9 * cell_w / w0).min(0.9 * cell_h / h0).min(1.0);
            (w0 * fit, h0 * fit)
        })
        .collect();
    let max_area = 0.45 * rules.max_area_fraction / 0.5 * frame_area;
    let min_area = 1.15 * rules.min_area_fraction * frame_area;
    let rescale = |(w, h): (f64, f64), target: f64| {
        let f = (target / (w * h)).sqrt();
        (w * f, h * f)
    };
    for s in sizes.iter_mut() {
        let a = s.0 * s.1;
        if a > max_area {
            *s = rescale(*s, max_area);
        } else if a < min_area {
            *s = rescale(*s, min_area);
        }
    }
    let largest = sizes.iter().map(|(w, h)| w * h).fold(0.0, f64::max);
    let floor = largest * rules.min_to_max_area_ratio * 1.1;
    for s in sizes.iter_mut() {
        if s.0 * s.1 < floor {
            *s = rescale(*s, floor);
        }
    }

    let mut entries = Vec::new();
    for (i, (subject, &(w, h))) in manager.subjects.iter().zip(&sizes).enumerate() {
        let row = i / cols;
        let col = i % cols;
        let in_row = if row + 1 == rows { n - row * cols } else { cols };
        let offset = (cols - in_row) as f64 * cell_w / 2.0;
        let cx = offset + (col as f64 + 0.5) * cell_w;
        let cy = if rows == 1 { 0.55 * fh } else { (row as f64 + 0.5) * cell_h };
        let w = (w.round() as u32).clamp(1, frame.width);
        let h = (h.round() as u32).clamp(1, frame.height);
        let x = (cx - w as f64 / 2.0).round().clamp(0.0, (frame.width - w) as f64) as u32;
        let y = (cy - h as f64 / 2.0).round().clamp(0.0, (frame.height - h) as f64) as u32;
        let bbox = BoundingBox::new(x, y, w, h);
        entries.push(LayoutEntry::new(subject.caption.clone(), bbox, subject.id.clone()));
        let kind = kind_of(&subject.caption, rules);
        entries.extend(place_components(&bbox, kind, &subject.components, rules));
    }

    let layout = RawLayout::new(frame, entries).with_manager(manager.clone());
    let violations = validate(&layout, rules);
    if violations.is_empty() {
        return layout;
    }
    refine_rule_based(layout.clone(), &violations, rules).unwrap_or(layout)
}

fn place_components(
    parent: &BoundingBox,
    kind: SubjectKind,
    comps: &[ManagerComponentEntry],
    rules: &Rulebook,
) -> Vec<LayoutEntry> {
    if comps.is_empty() {
        return vec![];
    }
    let entry = |c: &ManagerComponentEntry, b: BoundingBox| LayoutEntry::new(c.caption.clone(), b, c.id.clone());
    let has_body = comps.iter().any(|c| !rules.is_head_part(&c.caption) && !rules.is_accessory(&c.caption));
    match kind {
        SubjectKind::Human if has_body => {
            let head_box = sub_box(parent, 0.2, 0.0, 0.6, rules.head_fraction);
            let lower: Vec<&ManagerComponentEntry> = comps
                .iter()
                .filter(|c| !rules.is_head_part(&c.caption) && !rules.is_accessory(&c.caption))
                .collect();
            let band = 1.0 - rules.head_fraction;
            let slice = band / lower.len() as f64;
            let mut out = Vec::new();
            for c in comps {
                let b = if rules.is_head_part(&c.caption) {
                    head_box
                } else if rules.is_accessory(&c.caption) {
                    let hat_h = ((0.15 * parent.h as f64).round() as u32).max(1);
                    let hat_w = ((0.7 * head_box.w as f64).round() as u32).max(1);
                    let x = head_box.x + (head_box.w - hat_w) / 2;
                    if parent.y >= hat_h {
                        BoundingBox::new(x, parent.y - hat_h, hat_w, hat_h)
                    } else {
                        BoundingBox::new(x, parent.y, hat_w, hat_h.min(head_box.h))
                    }
                } else {
                    let k = lower.iter().position(|l| l.id == c.id).unwrap_or(0);
                    sub_box(parent, 0.0, rules.head_fraction + k as f64 * slice, 1.0, slice)
                };
                out.push(entry(c, b));
            }
            out
        }
        SubjectKind::Animal => {
            // Side view: parts side by side, nearly full height.
            let m = comps.len() as f64;
            comps
                .iter()
                .enumerate()
                .map(|(k, c)| entry(c, sub_box(parent, k as f64 / m, 0.05, 1.0 / m, 0.9)))
                .collect()
        }
        _ => {
            // Nested: first part across the top, the rest side by side below it.
            if comps.len() == 1 {
                return vec![entry(&comps[0], sub_box(parent, 0.05, 0.05, 0.9, 0.9))];
            }
            let rest = (comps.len() - 1) as f64;
            let mut out = vec![entry(&comps[0], sub_box(parent, 0.05, 0.05, 0.9, 0.4))];
            for (k, c) in comps[1..].iter().enumerate() {
                let fx = 0.05 + 0.9 * k as f64 / rest;
                out.push(entry(c, sub_box(parent, fx, 0.5, 0.9 / rest, 0.45)));
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::ManagerSubjectEntry;
    use crate::registry::SubjectId;

    fn subject(id: u32, caption: &str, parts: &[&str]) -> ManagerSubjectEntry {
        ManagerSubjectEntry {
            id: SubjectId::subject(id),
            caption: caption.into(),
            components: parts
                .iter()
                .enumerate()
                .map(|(j, p)| ManagerComponentEntry {
                    id: SubjectId::component(id, j as u32 + 1),
                    caption: format!("{p}, the {caption}'s {p}, in the park"),
                })
                .collect(),
        }
    }

    fn manager(subjects: Vec<ManagerSubjectEntry>) -> ManagerOutput {
        ManagerOutput { global_caption: "scene".into(), background_caption: "park".into(), subjects }
    }

    #[test]
    fn compliant_for_common_casts() {
        let rules = Rulebook::default();
        let casts = vec![
            vec![subject(1, "brown dog", &["head", "torso", "tail"])],
            vec![subject(1, "young girl", &["golden hair", "face", "blue dress"]), subject(2, "dog", &["head", "torso", "tail"])],
            vec![
                subject(1, "man", &["hair", "face", "shirt", "trousers"]),
                subject(2, "woman", &["hair", "face", "dress", "straw hat"]),
                subject(3, "house", &["roof", "windows", "door"]),
            ],
            (1..=5).map(|i| subject(i, "cat", &["head", "torso", "tail"])).collect(),
            (1..=6).map(|i| subject(i, "tree", &["foliage", "branches", "trunk"])).collect(),
        ];
        for frame in [FrameSize::new(1024, 1024), FrameSize::new(768, 1536), FrameSize::new(1536, 640)] {
            for cast in &casts {
                let layout = default_layout(frame, &manager(cast.clone()), &rules);
                let v = validate(&layout, &rules);
                assert!(v.is_empty(), "{frame} {:?}: {v:?}", cast.iter().map(|s| &s.caption).collect::<Vec<_>>());
                let expected: usize = cast.iter().map(|s| 1 + s.components.len()).sum();
                assert_eq!(layout.entries.len(), expected);
            }
        }
    }

    #[test]
    fn human_head_band_is_thirty_percent() {
        let rules = Rulebook::default();
        let layout = default_layout(
            FrameSize::new(1024, 1024),
            &manager(vec![subject(1, "girl", &["hair", "face", "red dress"])]),
            &rules,
        );
        let parent = layout.entries[0].bbox;
        let head = layout.entries[1].bbox;
        assert_eq!(head.y, parent.y);
        assert!((head.h as f64 / parent.h as f64 - 0.3).abs() < 0.01);
    }

    #[test]
    fn empty_manager_gives_empty_layout() {
        let layout = default_layout(FrameSize::new(512, 512), &ManagerOutput::default(), &Rulebook::default());
        assert!(layout.entries.is_empty());
    }
}
