//! Greedy rule-based layout repair.
//!
//! Each pass walks the current violations and tries a short list of candidate
//! edits per violation. An edit is kept only when the hard-violation count goes
//! down, so the count is monotone and the loop stops at a fixpoint.

use super::rules::{validate, Rulebook, Violation, ViolationKind};
use super::{BoundingBox, FrameSize, LayoutError, RawLayout};
use crate::registry::SubjectId;

pub const MAX_REFINE_PASSES: usize = 10;

/// Scales `bbox` so its long side equals `target` and centres it on a `target`×`target` canvas.
pub fn resize_centered(bbox: &BoundingBox, target: u32) -> BoundingBox {
    assert!(target > 0, "target side is positive");
    let long = bbox.w.max(bbox.h) as f64;
    let scale = target as f64 / long;
    let w = ((bbox.w as f64 * scale).round() as u32).clamp(1, target);
    let h = ((bbox.h as f64 * scale).round() as u32).clamp(1, target);
    BoundingBox::new((target - w) / 2, (target - h) / 2, w, h)
}

/// Repairs mechanically fixable violations. Returns the input unchanged when nothing helps.
pub fn refine_rule_based(
    layout: RawLayout,
    violations: &[Violation],
    rules: &Rulebook,
) -> Result<RawLayout, LayoutError> {
    let n = layout.subjects().count() as f64;
    let min_area = rules.min_subject_area(layout.frame);
    if n * min_area > layout.frame.area() as f64 {
        return Err(LayoutError::Unsatisfiable(format!(
            "{} subjects of at least {:.0} px² cannot fit in a {} frame",
            n, min_area, layout.frame
        )));
    }

    let mut current = layout;
    let mut count = validate(&current, rules).len();
    // The caller's findings seed the first pass; later passes re-validate.
    let mut pending: Vec<Violation> = if violations.is_empty() { validate(&current, rules) } else { violations.to_vec() };
    for _ in 0..MAX_REFINE_PASSES {
        if pending.is_empty() {
            break;
        }
        let mut improved = false;
        for v in &pending {
            for candidate in candidates(&current, v, rules) {
                let n = validate(&candidate, rules).len();
                if n < count {
                    current = candidate;
                    count = n;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            break;
        }
        pending = validate(&current, rules);
    }
    Ok(current)
}

/// Maps `b` through the affine transform taking `from` onto `to`.
fn remap(b: &BoundingBox, from: &BoundingBox, to: &BoundingBox) -> BoundingBox {
    let sx = to.w as f64 / from.w as f64;
    let sy = to.h as f64 / from.h as f64;
    let x = to.x as f64 + (b.x as f64 - from.x as f64) * sx;
    let y = to.y as f64 + (b.y as f64 - from.y as f64) * sy;
    let w = (b.w as f64 * sx).round().max(1.0);
    let h = (b.h as f64 * sy).round().max(1.0);
    BoundingBox::new(x.round().max(0.0) as u32, y.round().max(0.0) as u32, w as u32, h as u32)
}

/// Replaces subject `id`'s box with `new_box`, carrying its components along.
fn with_subject_box(layout: &RawLayout, id: &SubjectId, new_box: BoundingBox) -> Option<RawLayout> {
    let old = layout.entry(id)?.bbox;
    if old == new_box {
        return None;
    }
    let mut out = layout.clone();
    for e in out.entries.iter_mut() {
        if &e.id == id {
            e.bbox = new_box;
        } else if e.id.parent().as_ref() == Some(id) {
            e.bbox = remap(&e.bbox, &old, &new_box);
        }
    }
    Some(out)
}

fn with_entry_box(layout: &RawLayout, id: &SubjectId, new_box: BoundingBox) -> Option<RawLayout> {
    if id.is_component() {
        let mut out = layout.clone();
        let e = out.entries.iter_mut().find(|e| &e.id == id)?;
        if e.bbox == new_box {
            return None;
        }
        e.bbox = new_box;
        Some(out)
    } else {
        with_subject_box(layout, id, new_box)
    }
}

/// Box of size `w`×`h` centred where `b` was, shifted to lie inside `frame`.
/// Boxes bigger than the frame are first shrunk uniformly.
fn centred_in_frame(b: &BoundingBox, w: f64, h: f64, frame: FrameSize) -> BoundingBox {
    let shrink = (frame.width as f64 / w).min(frame.height as f64 / h).min(1.0);
    let w = ((w * shrink).round() as u32).clamp(1, frame.width);
    let h = ((h * shrink).round() as u32).clamp(1, frame.height);
    let (cx, cy) = b.center();
    let x = (cx - w as f64 / 2.0).round().clamp(0.0, (frame.width - w) as f64) as u32;
    let y = (cy - h as f64 / 2.0).round().clamp(0.0, (frame.height - h) as f64) as u32;
    BoundingBox::new(x, y, w, h)
}

fn scaled(b: &BoundingBox, factor: f64, frame: FrameSize) -> BoundingBox {
    centred_in_frame(b, b.w as f64 * factor, b.h as f64 * factor, frame)
}

fn translated(b: &BoundingBox, dx: i64, dy: i64, frame: FrameSize) -> BoundingBox {
    let x = (b.x as i64 + dx).clamp(0, frame.width.saturating_sub(b.w) as i64) as u32;
    let y = (b.y as i64 + dy).clamp(0, frame.height.saturating_sub(b.h) as i64) as u32;
    BoundingBox::new(x, y, b.w, b.h)
}

fn candidates(layout: &RawLayout, v: &Violation, rules: &Rulebook) -> Vec<RawLayout> {
    let frame = layout.frame;
    let mut out = Vec::new();
    let Some(first) = v.ids.first() else { return out };
    let Some(entry) = layout.entry(first) else { return out };
    let b = entry.bbox;
    let area = b.area() as f64;
    let frame_area = frame.area() as f64;
    match v.kind {
        ViolationKind::OutOfFrame => {
            if first.is_component() {
                out.extend(with_entry_box(layout, first, centred_in_frame(&b, b.w as f64, b.h as f64, frame)));
            } else {
                out.extend(with_subject_box(layout, first, centred_in_frame(&b, b.w as f64, b.h as f64, frame)));
            }
        }
        ViolationKind::TooLarge => {
            let target = 0.95 * rules.max_area_fraction * frame_area;
            out.extend(with_subject_box(layout, first, scaled(&b, (target / area).sqrt(), frame)));
        }
        ViolationKind::TooSmall => {
            let target = 1.05 * rules.min_area_fraction * frame_area;
            out.extend(with_subject_box(layout, first, scaled(&b, (target / area).sqrt(), frame)));
        }
        ViolationKind::AspectRatio => {
            let (w, h) = (b.w as f64, b.h as f64);
            let limit = rules.max_aspect_ratio * 0.98;
            let (shrunk, widened) = if w > h {
                ((h * limit, h), (w, w / limit))
            } else {
                ((w, w * limit), (h / limit, h))
            };
            out.extend(with_subject_box(layout, first, centred_in_frame(&b, shrunk.0, shrunk.1, frame)));
            out.extend(with_subject_box(layout, first, centred_in_frame(&b, widened.0, widened.1, frame)));
        }
        ViolationKind::SizeSpread => {
            let Some(large_id) = v.ids.get(1) else { return out };
            let Some(large) = layout.entry(large_id) else { return out };
            let large_area = large.bbox.area() as f64;
            let grow = (large_area * rules.min_to_max_area_ratio * 1.05 / area).sqrt();
            out.extend(with_subject_box(layout, first, scaled(&b, grow, frame)));
            let shrink = (area / (rules.min_to_max_area_ratio * 1.05) / large_area).sqrt();
            out.extend(with_subject_box(layout, large_id, scaled(&large.bbox, shrink, frame)));
        }
        ViolationKind::Overlap => {
            let Some(other_id) = v.ids.get(1) else { return out };
            let Some(other) = layout.entry(other_id) else { return out };
            out.extend(separations(layout, first, &b, other_id, &other.bbox, rules));
        }
        ViolationKind::ComponentOutsideParent => {
            let Some(parent) = v.ids.get(1).and_then(|p| layout.entry(p)) else { return out };
            let p = parent.bbox;
            let w = b.w.min(p.w);
            let h = b.h.min(p.h);
            let x = b.x.clamp(p.x, p.x + p.w - w);
            let y = b.y.clamp(p.y, p.y + p.h - h);
            out.extend(with_entry_box(layout, first, BoundingBox::new(x, y, w, h)));
        }
        // Caption format, arrangement and proportions need semantic knowledge.
        ViolationKind::ComponentLayout
        | ViolationKind::HeadBodyRatio
        | ViolationKind::Format
        | ViolationKind::Composition => {}
    }
    out
}

/// Candidate translations that pull two overlapping subjects apart, smallest displacement first.
fn separations(
    layout: &RawLayout,
    a_id: &SubjectId,
    a: &BoundingBox,
    b_id: &SubjectId,
    b: &BoundingBox,
    rules: &Rulebook,
) -> Vec<RawLayout> {
    let frame = layout.frame;
    // Distance each box must travel along an axis for the two to stop intersecting.
    let push_right = a.right() as i64 - b.x as i64;
    let push_left = b.right() as i64 - a.x as i64;
    let push_down = a.bottom() as i64 - b.y as i64;
    let push_up = b.bottom() as i64 - a.y as i64;
    let smaller_side_x = a.w.min(b.w) as f64;
    let smaller_side_y = a.h.min(b.h) as f64;
    // Leaving an overlap just under the limit moves less than full separation.
    let slack_x = (smaller_side_x * rules.max_overlap * 0.9).floor() as i64;
    let slack_y = (smaller_side_y * rules.max_overlap * 0.9).floor() as i64;

    let mut moves: Vec<(i64, i64)> = Vec::new();
    for (d, slack, horizontal) in [
        (push_right, slack_x, true),
        (-push_left, slack_x, true),
        (push_down, slack_y, false),
        (-push_up, slack_y, false),
    ] {
        for amount in [d - d.signum() * slack, d] {
            moves.push(if horizontal { (amount, 0) } else { (0, amount) });
        }
    }
    moves.sort_by_key(|(dx, dy)| dx.abs() + dy.abs());

    let mut out = Vec::new();
    for (dx, dy) in moves {
        // Move b, move a the opposite way, or split the distance.
        out.extend(with_subject_box(layout, b_id, translated(b, dx, dy, frame)));
        out.extend(with_subject_box(layout, a_id, translated(a, -dx, -dy, frame)));
        let half = with_subject_box(layout, b_id, translated(b, dx / 2, dy / 2, frame))
            .and_then(|l| with_subject_box(&l, a_id, translated(a, -(dx - dx / 2), -(dy - dy / 2), frame)));
        out.extend(half);
    }
    out
}
