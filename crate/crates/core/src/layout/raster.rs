//! Box → latent-grid masks.
//!
//! Comparisons are done in integer arithmetic: cell `c` of `n` spans
//! `[c·W/n, (c+1)·W/n)` in frame pixels, and its centre is `(2c+1)·W/(2n)`.

use super::{BoundingBox, FrameSize};
use crate::tensor::BinaryMask;

fn center_inside(cell: usize, cells: usize, extent: u32, lo: u64, hi: u64) -> bool {
    let num = (2 * cell as u64 + 1) * extent as u64;
    let den = 2 * cells as u64;
    lo * den <= num && num < hi * den
}

fn cell_inside(cell: usize, cells: usize, extent: u32, lo: u64, hi: u64) -> bool {
    let start = cell as u64 * extent as u64;
    let end = (cell as u64 + 1) * extent as u64;
    let n = cells as u64;
    lo * n <= start && end <= hi * n
}

/// Cell (r, c) is set iff its centre falls inside `bbox` (half-open on the right and bottom).
pub fn rasterize_mask(bbox: &BoundingBox, frame: FrameSize, latent_h: usize, latent_w: usize) -> BinaryMask {
    let cols: Vec<bool> =
        (0..latent_w).map(|c| center_inside(c, latent_w, frame.width, bbox.x as u64, bbox.right())).collect();
    let rows: Vec<bool> =
        (0..latent_h).map(|r| center_inside(r, latent_h, frame.height, bbox.y as u64, bbox.bottom())).collect();
    BinaryMask::from_fn(latent_h, latent_w, |r, c| rows[r] && cols[c])
}

/// Cell (r, c) is set iff the whole cell lies inside `bbox`. Used for edit regions,
/// where touching cells must keep their previous values.
pub fn rasterize_mask_contained(bbox: &BoundingBox, frame: FrameSize, latent_h: usize, latent_w: usize) -> BinaryMask {
    let cols: Vec<bool> =
        (0..latent_w).map(|c| cell_inside(c, latent_w, frame.width, bbox.x as u64, bbox.right())).collect();
    let rows: Vec<bool> =
        (0..latent_h).map(|r| cell_inside(r, latent_h, frame.height, bbox.y as u64, bbox.bottom())).collect();
    BinaryMask::from_fn(latent_h, latent_w, |r, c| rows[r] && cols[c])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Floating-point brute force over cell centres.
    fn oracle(b: &BoundingBox, frame: FrameSize, h: usize, w: usize) -> Vec<bool> {
        let mut out = Vec::new();
        for r in 0..h {
            for c in 0..w {
                let cx = (c as f64 + 0.5) * frame.width as f64 / w as f64;
                let cy = (r as f64 + 0.5) * frame.height as f64 / h as f64;
                out.push(cx >= b.x as f64 && cx < b.right() as f64 && cy >= b.y as f64 && cy < b.bottom() as f64);
            }
        }
        out
    }

    fn bits(m: &BinaryMask) -> Vec<bool> {
        (0..m.height()).flat_map(|r| (0..m.width()).map(move |c| (r, c))).map(|(r, c)| m.get(r, c)).collect()
    }

    #[test]
    fn full_frame_is_all_ones() {
        let f = FrameSize::new(1024, 768);
        let m = rasterize_mask(&f.full_box(), f, 96, 128);
        assert_eq!(m.count(), 96 * 128);
        assert_eq!(rasterize_mask_contained(&f.full_box(), f, 96, 128).count(), 96 * 128);
    }

    #[test]
    fn left_half() {
        let f = FrameSize::new(1024, 1024);
        let m = rasterize_mask(&BoundingBox::new(0, 0, 512, 1024), f, 32, 32);
        for r in 0..32 {
            for c in 0..32 {
                assert_eq!(m.get(r, c), c < 16);
            }
        }
        assert_eq!(bits(&m), oracle(&BoundingBox::new(0, 0, 512, 1024), f, 32, 32));
    }

    #[test]
    fn disjoint_boxes_disjoint_masks() {
        let f = FrameSize::new(1024, 1024);
        let a = rasterize_mask(&BoundingBox::new(0, 0, 512, 1024), f, 32, 32);
        let b = rasterize_mask(&BoundingBox::new(512, 0, 512, 1024), f, 32, 32);
        assert!(a.intersection(&b).unwrap().is_empty());
        assert_eq!(a.union(&b).unwrap().count(), 1024);
    }

    #[test]
    fn contained_is_subset() {
        let f = FrameSize::new(1024, 1024);
        let b = BoundingBox::new(100, 100, 300, 200);
        let centre = rasterize_mask(&b, f, 128, 128);
        let inner = rasterize_mask_contained(&b, f, 128, 128);
        assert!(inner.count() < centre.count());
        assert_eq!(inner.intersection(&centre).unwrap().count(), inner.count());
        // Cells of 8 px: x in [104, 400) and y in [104, 296).
        assert_eq!(inner.count(), 37 * 24);
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0u32..900, 0u32..600, 1u32..124, 1u32..168).prop_map(|(x, y, w, h)| BoundingBox::new(x, y, w, h))
    }

    proptest! {
        #[test]
        fn matches_centre_oracle(b in arb_box(), h in 1usize..40, w in 1usize..40) {
            let f = FrameSize::new(1024, 768);
            prop_assert_eq!(bits(&rasterize_mask(&b, f, h, w)), oracle(&b, f, h, w));
        }

        #[test]
        fn enlarging_never_clears(b in arb_box(), dx in 0u32..50, dy in 0u32..50, gw in 0u32..50, gh in 0u32..50) {
            let f = FrameSize::new(1024, 768);
            let x = b.x.saturating_sub(dx);
            let y = b.y.saturating_sub(dy);
            let big = BoundingBox::new(x, y, (b.right() - x as u64) as u32 + gw, (b.bottom() - y as u64) as u32 + gh);
            let small_m = rasterize_mask(&b, f, 32, 48);
            let big_m = rasterize_mask(&big, f, 32, 48);
            prop_assert_eq!(small_m.intersection(&big_m).unwrap().count(), small_m.count());
        }
    }
}
