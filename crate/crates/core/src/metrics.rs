//! CLEAR-MOT evaluation: MOTA, MOTP (mean matched IoU) and IDF1 between
//! predicted trajectories and ground-truth tracks, matched per frame by IoU
//! with carry-over of existing pairings.

use crate::error::Result;
use crate::geometry::{iou, BBox, GtTrack};
use crate::rescoring::hungarian;
use crate::math::Matrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Cost placed on pairs below the IoU threshold so the assignment only picks
/// them when forced; such pairs are discarded afterwards.
const INVALID_COST: f64 = 1e6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    /// 1 − (FN+FP+IDS)/gt_total; `None` when there is no ground truth.
    pub mota: Option<f64>,
    /// Mean IoU over matched pairs; `None` without matches.
    pub motp: Option<f64>,
    /// Identity F1 under an optimal global id correspondence; `None` when
    /// both sides are empty.
    pub idf1: Option<f64>,
    pub false_positives: u64,
    pub false_negatives: u64,
    pub id_switches: u64,
    pub matches: u64,
    pub gt_total: u64,
    pub pred_total: u64,
    /// Summed IoU over matches, kept for exact cross-video reduction.
    pub iou_sum: f64,
    /// Identity true positives from the global id assignment.
    pub idtp: u64,
}

impl MetricsReport {
    fn from_counts(
        false_positives: u64,
        false_negatives: u64,
        id_switches: u64,
        matches: u64,
        gt_total: u64,
        pred_total: u64,
        iou_sum: f64,
        idtp: u64,
    ) -> Self {
        let mota = (gt_total > 0).then(|| {
            1.0 - (false_negatives + false_positives + id_switches) as f64 / gt_total as f64
        });
        let motp = (matches > 0).then(|| iou_sum / matches as f64);
        let idf1 = (gt_total + pred_total > 0)
            .then(|| 2.0 * idtp as f64 / (gt_total + pred_total) as f64);
        MetricsReport {
            mota,
            motp,
            idf1,
            false_positives,
            false_negatives,
            id_switches,
            matches,
            gt_total,
            pred_total,
            iou_sum,
            idtp,
        }
    }

    /// Reduce per-video reports by summing counts, then recomputing ratios.
    pub fn merge(reports: &[MetricsReport]) -> MetricsReport {
        let mut fp = 0;
        let mut fneg = 0;
        let mut ids = 0;
        let mut matches = 0;
        let mut gt_total = 0;
        let mut pred_total = 0;
        let mut iou_sum = 0.0;
        let mut idtp = 0;
        for r in reports {
            fp += r.false_positives;
            fneg += r.false_negatives;
            ids += r.id_switches;
            matches += r.matches;
            gt_total += r.gt_total;
            pred_total += r.pred_total;
            iou_sum += r.iou_sum;
            idtp += r.idtp;
        }
        MetricsReport::from_counts(fp, fneg, ids, matches, gt_total, pred_total, iou_sum, idtp)
    }

    /// Aligned text table.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.4}"),
            None => "undefined".to_string(),
        };
        let mut s = String::new();
        s.push_str(&format!("{:<14}{:>12}\n", "metric", "value"));
        s.push_str(&format!("{:<14}{:>12}\n", "MOTA", fmt(self.mota)));
        s.push_str(&format!("{:<14}{:>12}\n", "MOTP", fmt(self.motp)));
        s.push_str(&format!("{:<14}{:>12}\n", "IDF1", fmt(self.idf1)));
        s.push_str(&format!("{:<14}{:>12}\n", "FP", self.false_positives));
        s.push_str(&format!("{:<14}{:>12}\n", "FN", self.false_negatives));
        s.push_str(&format!("{:<14}{:>12}\n", "IDSW", self.id_switches));
        s.push_str(&format!("{:<14}{:>12}\n", "matches", self.matches));
        s.push_str(&format!("{:<14}{:>12}\n", "GT boxes", self.gt_total));
        s.push_str(&format!("{:<14}{:>12}\n", "pred boxes", self.pred_total));
        s
    }
}

fn boxes_per_frame(tracks: &[GtTrack]) -> BTreeMap<u64, Vec<(usize, BBox)>> {
    let mut map: BTreeMap<u64, Vec<(usize, BBox)>> = BTreeMap::new();
    for (idx, t) in tracks.iter().enumerate() {
        for (frame, bbox) in &t.entries {
            map.entry(*frame).or_default().push((idx, *bbox));
        }
    }
    map
}

/// Evaluate predictions against ground truth for one video. Both sides use
/// the same track shape: per-frame boxes under an id.
pub fn evaluate(pred: &[GtTrack], gt: &[GtTrack], iou_threshold: f64) -> Result<MetricsReport> {
    let gt_frames = boxes_per_frame(gt);
    let pred_frames = boxes_per_frame(pred);
    let gt_total: u64 = gt.iter().map(|t| t.entries.len() as u64).sum();
    let pred_total: u64 = pred.iter().map(|t| t.entries.len() as u64).sum();

    let mut all_frames: Vec<u64> = gt_frames.keys().chain(pred_frames.keys()).cloned().collect();
    all_frames.sort_unstable();
    all_frames.dedup();

    // last known pred index per gt index, persisting across unmatched frames
    let mut mapping: BTreeMap<usize, usize> = BTreeMap::new();
    let mut false_positives = 0u64;
    let mut false_negatives = 0u64;
    let mut id_switches = 0u64;
    let mut matches = 0u64;
    let mut iou_sum = 0.0f64;

    let empty = Vec::new();
    for frame in all_frames {
        let gts = gt_frames.get(&frame).unwrap_or(&empty);
        let preds = pred_frames.get(&frame).unwrap_or(&empty);

        let mut gt_free: Vec<bool> = vec![true; gts.len()];
        let mut pred_free: Vec<bool> = vec![true; preds.len()];
        let mut frame_pairs: Vec<(usize, usize, f64)> = Vec::new(); // (gt idx in gts, pred idx in preds, iou)

        // carry over existing pairings while they still overlap
        for (gi, (g_idx, g_box)) in gts.iter().enumerate() {
            if let Some(p_idx) = mapping.get(g_idx) {
                if let Some(pi) = preds.iter().position(|(p, _)| p == p_idx) {
                    if pred_free[pi] {
                        let v = iou(g_box, &preds[pi].1);
                        if v >= iou_threshold {
                            gt_free[gi] = false;
                            pred_free[pi] = false;
                            frame_pairs.push((gi, pi, v));
                        }
                    }
                }
            }
        }

        // fresh minimum-cost matching for the leftovers
        let free_g: Vec<usize> = (0..gts.len()).filter(|&i| gt_free[i]).collect();
        let free_p: Vec<usize> = (0..preds.len()).filter(|&i| pred_free[i]).collect();
        if !free_g.is_empty() && !free_p.is_empty() {
            let mut cost = Matrix::zeros(free_g.len(), free_p.len());
            for (r, &gi) in free_g.iter().enumerate() {
                for (c, &pi) in free_p.iter().enumerate() {
                    let v = iou(&gts[gi].1, &preds[pi].1);
                    cost[(r, c)] = if v >= iou_threshold { 1.0 - v } else { INVALID_COST };
                }
            }
            for (r, c) in hungarian(&cost).pairs {
                if cost[(r, c)] < INVALID_COST {
                    let (gi, pi) = (free_g[r], free_p[c]);
                    let v = iou(&gts[gi].1, &preds[pi].1);
                    gt_free[gi] = false;
                    pred_free[pi] = false;
                    frame_pairs.push((gi, pi, v));
                }
            }
        }

        for (gi, pi, v) in frame_pairs {
            let g_idx = gts[gi].0;
            let p_idx = preds[pi].0;
            match mapping.get(&g_idx) {
                Some(prev) if *prev != p_idx => id_switches += 1,
                _ => {}
            }
            mapping.insert(g_idx, p_idx);
            matches += 1;
            iou_sum += v;
        }
        false_negatives += gt_free.iter().filter(|f| **f).count() as u64;
        false_positives += pred_free.iter().filter(|f| **f).count() as u64;
    }

    // global identity assignment: maximize total per-pair overlap frames
    let idtp = identity_true_positives(pred, gt, iou_threshold);

    Ok(MetricsReport::from_counts(
        false_positives,
        false_negatives,
        id_switches,
        matches,
        gt_total,
        pred_total,
        iou_sum,
        idtp,
    ))
}

fn identity_true_positives(pred: &[GtTrack], gt: &[GtTrack], iou_threshold: f64) -> u64 {
    if pred.is_empty() || gt.is_empty() {
        return 0;
    }
    let n = gt.len().max(pred.len());
    let mut overlap = Matrix::zeros(n, n);
    for (g, gt_track) in gt.iter().enumerate() {
        let pred_lookup: Vec<BTreeMap<u64, BBox>> = pred
            .iter()
            .map(|p| p.entries.iter().cloned().collect())
            .collect();
        for (p, lookup) in pred_lookup.iter().enumerate() {
            let mut count = 0.0;
            for (frame, g_box) in &gt_track.entries {
                if let Some(p_box) = lookup.get(frame) {
                    if iou(g_box, p_box) >= iou_threshold {
                        count += 1.0;
                    }
                }
            }
            overlap[(g, p)] = count;
        }
    }
    let cost = overlap.scale(-1.0);
    let assignment = hungarian(&cost);
    let mut idtp = 0.0;
    for (g, p) in assignment.pairs {
        if g < gt.len() && p < pred.len() {
            idtp += overlap[(g, p)];
        }
    }
    idtp as u64
}
