//! Axis-aligned box arithmetic: IoU, L1 box distance, NMS and the IoU-based
//! ground-truth assignment rule.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Axis-aligned box, corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn is_valid(&self) -> bool {
        self.x1 <= self.x2
            && self.y1 <= self.y2
            && [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    /// Coordinates scaled into [0,1] by frame size.
    pub fn normalized(&self, frame_w: f64, frame_h: f64) -> BBox {
        BBox {
            x1: self.x1 / frame_w,
            y1: self.y1 / frame_h,
            x2: self.x2 / frame_w,
            y2: self.y2 / frame_h,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }
}

/// A ground-truth identity: per-frame boxes, absent frames omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtTrack {
    pub id: u64,
    /// (frame, box) pairs with strictly increasing frame indices.
    pub entries: Vec<(u64, BBox)>,
    #[serde(default)]
    pub text: String,
}

impl GtTrack {
    pub fn box_at(&self, frame: u64) -> Option<BBox> {
        self.entries
            .binary_search_by_key(&frame, |(f, _)| *f)
            .ok()
            .map(|i| self.entries[i].1)
    }
}

/// Intersection over union; 0 when the union is degenerate.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Index of the box best matching `gt_position`, or `None` when the ground
/// truth is absent or the best IoU is below 0.5. Exact ties go to the lowest
/// index.
pub fn gt_assign(boxes: &[BBox], gt_position: Option<BBox>) -> Option<usize> {
    let gt = gt_position?;
    let mut best: Option<(usize, f64)> = None;
    for (i, b) in boxes.iter().enumerate() {
        let v = iou(b, &gt);
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((i, v)),
        }
    }
    match best {
        Some((i, v)) if v >= 0.5 => Some(i),
        _ => None,
    }
}

/// Sum of absolute coordinate differences; callers normalize boxes first.
pub fn l1_box(a: &BBox, b: &BBox) -> f64 {
    (a.x1 - b.x1).abs() + (a.y1 - b.y1).abs() + (a.x2 - b.x2).abs() + (a.y2 - b.y2).abs()
}

/// Greedy descending-score suppression. Returns kept indices in descending
/// score order; anything overlapping a kept box above `iou_threshold` is
/// dropped.
pub fn nms(instances: &[(BBox, f64)], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.sort_by(|&a, &b| {
        instances[b]
            .1
            .partial_cmp(&instances[a].1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.iter().all(|&k| iou(&instances[k].0, &instances[i].0) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

/// Rejects tracks with unsorted frames, no entries or invalid boxes.
pub fn validate_tracks(tracks: &[GtTrack]) -> Result<()> {
    for t in tracks {
        if t.entries.is_empty() {
            return Err(Error::InvalidArgument(format!("track {} has no entries", t.id)));
        }
        for pair in t.entries.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(Error::InvalidArgument(format!(
                    "track {} frames not strictly increasing",
                    t.id
                )));
            }
        }
        if t.entries.iter().any(|(_, b)| !b.is_valid()) {
            return Err(Error::InvalidArgument(format!("track {} has invalid box", t.id)));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn iou_identical_is_one() {
        let b = BBox::new(1.0, 2.0, 4.0, 6.0);
        assert_eq!(iou(&b, &b), 1.0);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        assert_eq!(iou(&BBox::new(0.0, 0.0, 1.0, 1.0), &BBox::new(2.0, 2.0, 3.0, 3.0)), 0.0);
    }

    #[test]
    fn iou_direct_area_computation() {
        // inter 2, union 6 → 1/3
        let v = iou(&BBox::new(0.0, 0.0, 2.0, 2.0), &BBox::new(1.0, 0.0, 3.0, 2.0));
        assert_relative_eq!(v, 1.0 / 3.0, max_relative = 1e-12);
    }

    #[test]
    fn iou_degenerate_union_is_zero() {
        let p = BBox::new(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(&p, &p), 0.0);
    }

    #[test]
    fn gt_assign_absent_gt() {
        assert_eq!(gt_assign(&[BBox::new(0.0, 0.0, 1.0, 1.0)], None), None);
    }

    #[test]
    fn gt_assign_below_half_iou() {
        let boxes = [BBox::new(0.0, 0.0, 1.0, 1.0)];
        assert_eq!(gt_assign(&boxes, Some(BBox::new(5.0, 5.0, 6.0, 6.0))), None);
    }

    #[test]
    fn gt_assign_argmax_index() {
        let boxes = [BBox::new(0.0, 0.0, 2.0, 2.0), BBox::new(0.0, 0.0, 2.0, 1.8)];
        assert_eq!(gt_assign(&boxes, Some(BBox::new(0.0, 0.0, 2.0, 2.0))), Some(0));
    }

    #[test]
    fn gt_assign_tie_takes_lowest_index() {
        let b = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(gt_assign(&[b, b], Some(b)), Some(0));
    }

    #[test]
    fn l1_examples() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(l1_box(&a, &a), 0.0);
        assert_relative_eq!(
            l1_box(&a, &BBox::new(0.1, 0.0, 1.0, 1.0)),
            0.1,
            max_relative = 1e-12
        );
        // four coordinates each off by 0.25
        assert_relative_eq!(
            l1_box(&BBox::new(0.0, 0.0, 0.5, 0.5), &BBox::new(0.25, 0.25, 0.75, 0.75)),
            1.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn nms_single_kept() {
        assert_eq!(nms(&[(BBox::new(0.0, 0.0, 1.0, 1.0), 0.4)], 0.5), vec![0]);
    }

    #[test]
    fn nms_duplicate_suppressed() {
        let b = BBox::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(nms(&[(b, 0.8), (b, 0.9)], 0.5), vec![1]);
    }

    #[test]
    fn nms_disjoint_all_kept() {
        let kept = nms(
            &[(BBox::new(0.0, 0.0, 1.0, 1.0), 0.9), (BBox::new(5.0, 5.0, 6.0, 6.0), 0.1)],
            0.0,
        );
        assert_eq!(kept, vec![0, 1]);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0f64..100.0, 0.0f64..100.0, 0.1f64..50.0, 0.1f64..50.0)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            let ba = iou(&b, &a);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn gt_assign_matches_exhaustive_scan(
            boxes in proptest::collection::vec(arb_box(), 1..8),
            gt in arb_box()
        ) {
            let got = gt_assign(&boxes, Some(gt));
            let best = boxes.iter().enumerate()
                .map(|(i, b)| (i, iou(b, &gt)))
                .fold(None::<(usize, f64)>, |acc, (i, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((i, v)),
                });
            let expect = match best {
                Some((i, v)) if v >= 0.5 => Some(i),
                _ => None,
            };
            prop_assert_eq!(got, expect);
        }

        #[test]
        fn nms_output_is_antichain(
            instances in proptest::collection::vec((arb_box(), 0.0f64..1.0), 1..12),
            thr in 0.1f64..0.9
        ) {
            let kept = nms(&instances, thr);
            for (i, &a) in kept.iter().enumerate() {
                for &b in &kept[i + 1..] {
                    prop_assert!(iou(&instances[a].0, &instances[b].0) <= thr);
                }
            }
        }
    }
}
