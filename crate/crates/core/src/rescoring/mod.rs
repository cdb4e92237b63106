//! Confidence rescoring: a trainable head recomputes per-query scores, a
//! fusion rule combines them with the detector's original score, and the head
//! trains with Hungarian-matched focal loss.

mod hungarian;

pub use hungarian::{hungarian, Assignment};

use crate::error::{Error, Result};
use crate::geometry::{l1_box, BBox};
use crate::math::layers::{linear_t, Linear};
use crate::math::matrix::Matrix;
use crate::math::tape::{focal_term, sigmoid, Tape, Var};
use serde::{Deserialize, Serialize};

/// One candidate instance in one frame, as produced by the detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame: u64,
    pub bbox: BBox,
    /// Original detector confidence in [0,1].
    pub score_orig: f64,
    /// Per-instance query vector, the only appearance signal.
    pub query: Vec<f64>,
    /// Opaque pass-through transcription.
    pub text: String,
}

/// A detection with recomputed and fused confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredInstance {
    pub detection: Detection,
    pub score_rescored: f64,
    pub score_fused: f64,
}

/// Score fusion rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FusionStrategy {
    #[default]
    Max,
    Mean,
    GeoMean,
}

impl std::str::FromStr for FusionStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(FusionStrategy::Max),
            "mean" => Ok(FusionStrategy::Mean),
            "geo-mean" | "geo_mean" => Ok(FusionStrategy::GeoMean),
            other => Err(Error::InvalidArgument(format!("unknown fusion strategy '{other}'"))),
        }
    }
}

impl std::fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FusionStrategy::Max => write!(f, "max"),
            FusionStrategy::Mean => write!(f, "mean"),
            FusionStrategy::GeoMean => write!(f, "geo-mean"),
        }
    }
}

/// Weights for the matching cost and focal loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FocalMatchConfig {
    pub lambda_cls: f64,
    pub lambda_box: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalMatchConfig {
    fn default() -> Self {
        FocalMatchConfig {
            lambda_cls: 2.0,
            lambda_box: 5.0,
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

/// Recomputed confidence per query row: sigmoid of the head's logit.
pub fn rescore(queries: &Matrix, head: &Linear<Matrix>) -> Result<Vec<f64>> {
    if head.weight.rows() != 1 {
        return Err(Error::dim("rescore", "head must map to a single logit"));
    }
    if queries.rows() == 0 {
        return Ok(Vec::new());
    }
    let logits = crate::math::layers::linear_forward(queries, head)?;
    Ok(logits.data().iter().map(|&l| sigmoid(l)).collect())
}

/// Fused confidence per strategy; inputs and output in [0,1].
pub fn fuse_scores(c_o: f64, c_r: f64, strategy: FusionStrategy) -> f64 {
    match strategy {
        FusionStrategy::Max => c_o.max(c_r),
        FusionStrategy::Mean => 0.5 * (c_o + c_r),
        FusionStrategy::GeoMean => (c_o * c_r).sqrt(),
    }
}

/// Matching cost between ground-truth boxes (rows) and predictions (cols):
/// focal-weighted classification cost plus L1 box distance, both weighted.
/// Boxes must be normalized to [0,1]. Empty inputs give an empty matrix.
pub fn match_cost(
    preds: &[(f64, BBox)],
    gts: &[BBox],
    cfg: &FocalMatchConfig,
) -> Matrix {
    let mut cost = Matrix::zeros(gts.len(), preds.len());
    for (i, gt) in gts.iter().enumerate() {
        for (j, (p, bbox)) in preds.iter().enumerate() {
            let p = p.clamp(1e-7, 1.0 - 1e-7);
            let cls = focal_term(p, true, cfg.alpha, cfg.gamma);
            cost[(i, j)] = cfg.lambda_cls * cls + cfg.lambda_box * l1_box(gt, bbox);
        }
    }
    cost
}

/// Focal loss over predicted probabilities, summed. Probabilities are
/// clamped to [1e-7, 1−1e-7] so logs stay finite.
pub fn focal_loss(p_hat: &[f64], is_positive: &[bool], alpha: f64, gamma: f64) -> f64 {
    debug_assert_eq!(p_hat.len(), is_positive.len());
    p_hat
        .iter()
        .zip(is_positive)
        .map(|(&p, &pos)| focal_term(p.clamp(1e-7, 1.0 - 1e-7), pos, alpha, gamma))
        .sum()
}

/// In-tape rescoring loss for one frame: Hungarian-match predictions to the
/// ground truth on the fused cost, then focal loss with matched predictions
/// positive. `queries` is an n×D_q node already on the tape; boxes must be
/// normalized. Returns a scalar node.
pub fn frame_rescoring_loss_t(
    tape: &mut Tape,
    head: &Linear<Var>,
    queries: Var,
    pred_boxes: &[BBox],
    gt_boxes: &[BBox],
    cfg: &FocalMatchConfig,
) -> Result<Var> {
    debug_assert_eq!(tape.value(queries).rows(), pred_boxes.len());
    let logits = linear_t(tape, queries, head)?;
    rescoring_loss_from_logits_t(tape, logits, pred_boxes, gt_boxes, cfg)
}

/// As [`frame_rescoring_loss_t`] but on precomputed logits, so callers can
/// reuse the same logit node for score filtering.
pub fn rescoring_loss_from_logits_t(
    tape: &mut Tape,
    logits: Var,
    pred_boxes: &[BBox],
    gt_boxes: &[BBox],
    cfg: &FocalMatchConfig,
) -> Result<Var> {
    let n = tape.value(logits).rows();
    debug_assert_eq!(n, pred_boxes.len());
    let probs: Vec<f64> = tape.value(logits).data().iter().map(|&l| sigmoid(l)).collect();

    let preds: Vec<(f64, BBox)> = probs.iter().cloned().zip(pred_boxes.iter().cloned()).collect();
    let cost = match_cost(&preds, gt_boxes, cfg);
    let assignment = hungarian(&cost);
    let mut positive = vec![false; n];
    for &(_, pred) in &assignment.pairs {
        positive[pred] = true;
    }
    tape.focal_loss_sigmoid(logits, positive, cfg.alpha, cfg.gamma)
}

/// Standalone rescoring loss for one frame with the gradient of the head.
/// Queries and boxes are frozen inputs; only the head receives gradients.
pub fn rescoring_loss(
    detections: &[Detection],
    gt_boxes: &[BBox],
    head: &Linear<Matrix>,
    cfg: &FocalMatchConfig,
) -> Result<(f64, Linear<Matrix>)> {
    let dim = head.weight.cols();
    let queries = Matrix::from_rows(
        &detections.iter().map(|d| d.query.clone()).collect::<Vec<_>>(),
    )?;
    let queries = if detections.is_empty() {
        Matrix::zeros(0, dim)
    } else {
        queries
    };
    let boxes: Vec<BBox> = detections.iter().map(|d| d.bbox).collect();

    let mut tape = Tape::new();
    let w = tape.leaf(head.weight.clone());
    let b = tape.leaf(head.bias.clone());
    let head_vars = Linear { weight: w, bias: b };
    let q = tape.leaf(queries);
    let loss = frame_rescoring_loss_t(&mut tape, &head_vars, q, &boxes, gt_boxes, cfg)?;
    let grads = tape.backward(loss)?;
    let grad = Linear {
        weight: grads[0].clone().unwrap_or_else(|| Matrix::zeros(head.weight.rows(), head.weight.cols())),
        bias: grads[1].clone().unwrap_or_else(|| Matrix::zeros(1, head.bias.cols())),
    };
    Ok((tape.scalar(loss), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::grad_check;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn unit_box() -> BBox {
        BBox::new(0.1, 0.1, 0.4, 0.3)
    }

    #[test]
    fn rescore_zero_everything_is_half() {
        let head = Linear {
            weight: Matrix::zeros(1, 4),
            bias: Matrix::zeros(1, 1),
        };
        let q = Matrix::zeros(1, 4);
        let c = rescore(&q, &head).unwrap();
        assert_eq!(c, vec![0.5]);
    }

    #[test]
    fn rescore_saturates_at_large_logit() {
        let head = Linear {
            weight: Matrix::from_vec(1, 1, vec![20.0]).unwrap(),
            bias: Matrix::zeros(1, 1),
        };
        let q = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let c = rescore(&q, &head).unwrap();
        assert!(c[0] > 0.9999);
    }

    #[test]
    fn rescore_empty_is_empty() {
        let head = Linear {
            weight: Matrix::zeros(1, 4),
            bias: Matrix::zeros(1, 1),
        };
        assert!(rescore(&Matrix::zeros(0, 4), &head).unwrap().is_empty());
    }

    #[test]
    fn fusion_rules() {
        assert_eq!(fuse_scores(0.9, 0.3, FusionStrategy::Max), 0.9);
        assert_relative_eq!(fuse_scores(0.4, 0.6, FusionStrategy::Mean), 0.5);
        // √(0.25·0.64) = √0.16 = 0.4
        assert_relative_eq!(fuse_scores(0.25, 0.64, FusionStrategy::GeoMean), 0.4, max_relative = 1e-12);
    }

    #[test]
    fn match_cost_perfect_prediction_vanishes() {
        let cfg = FocalMatchConfig::default();
        let b = unit_box();
        let cost = match_cost(&[(1.0 - 1e-9, b)], &[b], &cfg);
        assert!(cost[(0, 0)].abs() < 1e-5, "cost = {}", cost[(0, 0)]);
    }

    #[test]
    fn match_cost_classification_term() {
        // identical boxes, p=0.5, λ_c=1, λ_b=0 → 0.25·0.25·ln 2
        let cfg = FocalMatchConfig { lambda_cls: 1.0, lambda_box: 0.0, alpha: 0.25, gamma: 2.0 };
        let b = unit_box();
        let cost = match_cost(&[(0.5, b)], &[b], &cfg);
        assert_relative_eq!(cost[(0, 0)], 0.25 * 0.25 * std::f64::consts::LN_2, max_relative = 1e-9);
        assert_relative_eq!(cost[(0, 0)], 0.0433, max_relative = 1e-3);
    }

    #[test]
    fn match_cost_box_term() {
        let cfg = FocalMatchConfig { lambda_cls: 0.0, lambda_box: 5.0, alpha: 0.25, gamma: 2.0 };
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        let b = BBox::new(0.1, 0.0, 1.0, 1.0);
        let cost = match_cost(&[(0.5, b)], &[a], &cfg);
        assert_relative_eq!(cost[(0, 0)], 0.5, max_relative = 1e-12);
    }

    #[test]
    fn match_cost_empty_inputs() {
        let cfg = FocalMatchConfig::default();
        assert!(match_cost(&[], &[unit_box()], &cfg).is_empty());
        assert!(match_cost(&[(0.5, unit_box())], &[], &cfg).is_empty());
    }

    #[test]
    fn focal_loss_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert!(focal_loss(&[1.0 - 1e-7], &[true], 0.25, 2.0) < 1e-13);
        assert_relative_eq!(focal_loss(&[0.5], &[true], 0.25, 2.0), 0.25 * 0.25 * ln2, max_relative = 1e-12);
        assert_relative_eq!(focal_loss(&[0.5], &[false], 0.25, 2.0), 0.75 * 0.25 * ln2, max_relative = 1e-12);
    }

    fn det(bbox: BBox, query: Vec<f64>) -> Detection {
        Detection {
            frame: 1,
            bbox,
            score_orig: 0.5,
            query,
            text: "w000".into(),
        }
    }

    #[test]
    fn rescoring_loss_confident_negative_near_zero() {
        // head drives the logit strongly negative → p ≈ 0 for a background-only frame
        let head = Linear {
            weight: Matrix::from_vec(1, 2, vec![-30.0, 0.0]).unwrap(),
            bias: Matrix::zeros(1, 1),
        };
        let cfg = FocalMatchConfig::default();
        let d = det(unit_box(), vec![1.0, 0.0]);
        let (loss, _) = rescoring_loss(&[d], &[], &head, &cfg).unwrap();
        assert!(loss < 1e-10, "loss = {loss}");
    }

    #[test]
    fn rescoring_loss_unique_match_is_positive_class() {
        let head = Linear {
            weight: Matrix::from_vec(1, 2, vec![1.0, -1.0]).unwrap(),
            bias: Matrix::zeros(1, 1),
        };
        let cfg = FocalMatchConfig::default();
        let b = unit_box();
        let far = BBox::new(0.7, 0.7, 0.9, 0.9);
        let dets = vec![det(b, vec![2.0, 0.0]), det(far, vec![0.0, 2.0])];
        let (loss, _) = rescoring_loss(&dets, &[b], &head, &cfg).unwrap();
        // the overlapping prediction is the positive: loss = focal(pos, p0) + focal(neg, p1)
        let p0 = sigmoid(2.0);
        let p1 = sigmoid(-2.0);
        let expect = focal_loss(&[p0, p1], &[true, false], cfg.alpha, cfg.gamma);
        assert_relative_eq!(loss, expect, max_relative = 1e-12);
    }

    #[test]
    fn rescoring_loss_gradient_matches_finite_differences() {
        let mut rng = crate::math::layers::seeded_rng(11);
        let head = crate::math::layers::init_linear(1, 4, &mut rng);
        let cfg = FocalMatchConfig::default();
        use rand::Rng;
        let mut rand_q = || (0..4).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let dets = vec![
            det(BBox::new(0.1, 0.1, 0.3, 0.2), rand_q()),
            det(BBox::new(0.5, 0.5, 0.8, 0.7), rand_q()),
            det(BBox::new(0.2, 0.6, 0.4, 0.9), rand_q()),
        ];
        let gts = vec![BBox::new(0.12, 0.1, 0.31, 0.22), BBox::new(0.5, 0.52, 0.79, 0.71)];

        let (_, grad) = rescoring_loss(&dets, &gts, &head, &cfg).unwrap();
        let mut theta: Vec<f64> = head.weight.data().to_vec();
        theta.extend_from_slice(head.bias.data());
        let mut analytic: Vec<f64> = grad.weight.data().to_vec();
        analytic.extend_from_slice(grad.bias.data());

        let dets_c = dets.clone();
        let gts_c = gts.clone();
        let f = move |th: &[f64]| {
            let h = Linear {
                weight: Matrix::from_vec(1, 4, th[..4].to_vec()).unwrap(),
                bias: Matrix::from_vec(1, 1, th[4..].to_vec()).unwrap(),
            };
            rescoring_loss(&dets_c, &gts_c, &h, &cfg).unwrap().0
        };
        let err = grad_check(f, &theta, &analytic, 1e-5).unwrap();
        assert!(err < 1e-4, "rel err = {err}");
    }

    #[test]
    fn rescoring_loss_permutation_invariant() {
        let mut rng = crate::math::layers::seeded_rng(13);
        let head = crate::math::layers::init_linear(1, 3, &mut rng);
        let cfg = FocalMatchConfig::default();
        use rand::Rng;
        let mut rand_q = || (0..3).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let dets = vec![
            det(BBox::new(0.1, 0.1, 0.3, 0.2), rand_q()),
            det(BBox::new(0.5, 0.5, 0.8, 0.7), rand_q()),
            det(BBox::new(0.15, 0.62, 0.42, 0.88), rand_q()),
        ];
        let gts = vec![BBox::new(0.1, 0.1, 0.32, 0.21), BBox::new(0.51, 0.5, 0.8, 0.72)];
        let (base, _) = rescoring_loss(&dets, &gts, &head, &cfg).unwrap();

        let dets_p = vec![dets[2].clone(), dets[0].clone(), dets[1].clone()];
        let gts_p = vec![gts[1], gts[0]];
        let (permuted, _) = rescoring_loss(&dets_p, &gts_p, &head, &cfg).unwrap();
        assert_relative_eq!(base, permuted, max_relative = 1e-12);
    }

    proptest! {
        #[test]
        fn fusion_bounds(c_o in 0.0f64..=1.0, c_r in 0.0f64..=1.0) {
            let max = fuse_scores(c_o, c_r, FusionStrategy::Max);
            prop_assert!(max >= c_o && max >= c_r);
            for s in [FusionStrategy::Mean, FusionStrategy::GeoMean] {
                let v = fuse_scores(c_o, c_r, s);
                prop_assert!(v >= c_o.min(c_r) - 1e-12 && v <= c_o.max(c_r) + 1e-12);
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn focal_loss_nonneg_and_monotone(p in 0.01f64..0.99) {
            let step = 0.005;
            let pos_lo = focal_loss(&[p], &[true], 0.25, 2.0);
            let pos_hi = focal_loss(&[p + step], &[true], 0.25, 2.0);
            prop_assert!(pos_lo >= 0.0 && pos_hi >= 0.0);
            prop_assert!(pos_hi < pos_lo);
            let neg_lo = focal_loss(&[p], &[false], 0.25, 2.0);
            let neg_hi = focal_loss(&[p + step], &[false], 0.25, 2.0);
            prop_assert!(neg_hi > neg_lo);
        }
    }
}
