//! Training loop: per-clip loss combining the rescoring and association
//! terms, AdamW with a warmup-cosine schedule, deterministic from a seed.

use crate::error::{Error, Result};
use crate::geometry::{BBox, GtTrack};
use crate::matcher::{association_loss_t, ClipFrame};
use crate::math::layers::linear_t;
use crate::math::matrix::Matrix;
use crate::math::tape::{sigmoid, Tape};
use crate::params::{Gradients, ModelConfig, ModelParams};
use crate::records::VideoDetections;
use crate::rescoring::{
    fuse_scores, rescoring_loss_from_logits_t, Detection, FocalMatchConfig, FusionStrategy,
};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda_res: f64,
    pub lambda_asso: f64,
    pub focal: FocalMatchConfig,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Fraction of iterations spent in linear warmup before cosine decay.
    pub warmup_frac: f64,
    pub iterations: usize,
    /// Clip length T: consecutive frames drawn from one video per step.
    pub clip_len: usize,
    /// Fused-score threshold gating instances into the association loss.
    pub score_threshold: f64,
    pub fusion: FusionStrategy,
    /// Frame size used to normalize boxes for the matching cost.
    pub frame_size: (f64, f64),
    pub seed: u64,
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_res: 1.0,
            lambda_asso: 0.5,
            focal: FocalMatchConfig::default(),
            learning_rate: 5e-5,
            weight_decay: 1e-4,
            warmup_frac: 0.1,
            iterations: 2000,
            clip_len: 6,
            score_threshold: 0.3,
            fusion: FusionStrategy::Max,
            frame_size: (1280.0, 720.0),
            seed: 0,
            log_interval: 50,
        }
    }
}

/// One video's detections paired with its ground truth.
#[derive(Debug, Clone)]
pub struct TrainVideo {
    pub detections: VideoDetections,
    pub gt: Vec<GtTrack>,
}

/// A clip of consecutive frames plus the video's ground truth.
#[derive(Debug, Clone, Copy)]
pub struct Clip<'a> {
    pub frames: &'a [(u64, Vec<Detection>)],
    pub gt: &'a [GtTrack],
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub rescoring: f64,
    pub association: f64,
}

fn clip_loss_on_tape(
    tape: &mut Tape,
    bound: &crate::params::BoundModel,
    clip: Clip<'_>,
    params: &ModelParams,
    cfg: &TrainConfig,
) -> Result<(crate::math::tape::Var, LossBreakdown)> {
    let (fw, fh) = cfg.frame_size;
    let query_dim = params.cfg.query_dim;

    let mut res_pieces = Vec::new();
    let mut assoc_frames: Vec<ClipFrame> = Vec::new();
    for (frame, dets) in clip.frames {
        let queries = if dets.is_empty() {
            Matrix::zeros(0, query_dim)
        } else {
            Matrix::from_rows(&dets.iter().map(|d| d.query.clone()).collect::<Vec<_>>())?
        };
        let q = tape.leaf(queries);
        let logits = linear_t(tape, q, &bound.rescore)?;

        let pred_boxes: Vec<BBox> = dets.iter().map(|d| d.bbox.normalized(fw, fh)).collect();
        let gt_boxes: Vec<BBox> = clip
            .gt
            .iter()
            .filter_map(|t| t.box_at(*frame))
            .map(|b| b.normalized(fw, fh))
            .collect();
        res_pieces.push((
            rescoring_loss_from_logits_t(tape, logits, &pred_boxes, &gt_boxes, &cfg.focal)?,
            1.0,
        ));

        // gate instances into the association loss on the current fused score
        let logit_values = tape.value(logits).data().to_vec();
        let mut boxes = Vec::new();
        let mut kept_queries = Vec::new();
        for (d, &l) in dets.iter().zip(&logit_values) {
            let c_f = fuse_scores(d.score_orig, sigmoid(l), cfg.fusion);
            if c_f >= cfg.score_threshold {
                boxes.push(d.bbox);
                kept_queries.push(d.query.clone());
            }
        }
        assoc_frames.push(ClipFrame {
            frame: *frame,
            boxes,
            queries: kept_queries,
        });
    }
    let l_res = tape.add_scaled(res_pieces);
    let l_asso = association_loss_t(tape, &bound.matcher, &assoc_frames, clip.gt, query_dim)?;
    let total = tape.add_scaled(vec![(l_res, cfg.lambda_res), (l_asso, cfg.lambda_asso)]);
    Ok((
        total,
        LossBreakdown {
            total: tape.scalar(total),
            rescoring: tape.scalar(l_res),
            association: tape.scalar(l_asso),
        },
    ))
}

/// Combined training loss for one clip.
pub fn total_loss(clip: Clip<'_>, params: &ModelParams, cfg: &TrainConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let (bound, _) = params.bind(&mut tape);
    let (_, breakdown) = clip_loss_on_tape(&mut tape, &bound, clip, params, cfg)?;
    Ok(breakdown.total)
}

/// Loss plus gradients for every trainable parameter.
pub fn total_loss_grad(
    clip: Clip<'_>,
    params: &ModelParams,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Gradients)> {
    let mut tape = Tape::new();
    let (bound, leaves) = params.bind(&mut tape);
    let (loss, breakdown) = clip_loss_on_tape(&mut tape, &bound, clip, params, cfg)?;
    let grads = tape.gradients_for(loss, &leaves)?;
    Ok((breakdown, params.gradients_from(grads)))
}

/// Adaptive-moment descent with decoupled weight decay.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ModelParams, weight_decay: f64) -> Self {
        let sizes: Vec<usize> = params
            .tensors()
            .iter()
            .map(|(_, m)| m.rows() * m.cols())
            .collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((tensor, (_, grad)), (m, v)) in params
            .tensors_mut()
            .into_iter()
            .zip(&grads.tensors)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let data = tensor.data_mut();
            for i in 0..data.len() {
                let g = grad.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * data[i]);
            }
        }
    }
}

/// Linear warmup into cosine decay.
pub fn lr_at(base: f64, iter: usize, total: usize, warmup_frac: f64) -> f64 {
    let warmup = ((total as f64 * warmup_frac).ceil() as usize).clamp(1, total.max(1));
    if iter < warmup {
        base * (iter + 1) as f64 / warmup as f64
    } else {
        let rest = (total - warmup).max(1) as f64;
        let progress = (iter - warmup) as f64 / rest;
        base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogEvent {
    pub iter: usize,
    pub loss: f64,
    pub loss_rescoring: f64,
    pub loss_association: f64,
    pub lr: f64,
}

pub struct TrainReport {
    pub final_params: ModelParams,
    pub best_params: ModelParams,
    pub events: Vec<LogEvent>,
}

/// Fingerprint of everything the tracker must treat as frozen: detection
/// boxes, scores and query vectors.
pub fn dataset_checksum(dataset: &[TrainVideo]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    let mut mix = |bits: u64| {
        h ^= bits;
        h = h.wrapping_mul(0x100000001b3);
    };
    for video in dataset {
        for (frame, dets) in &video.detections.frames {
            mix(*frame);
            for d in dets {
                for c in d.bbox.as_array() {
                    mix(c.to_bits());
                }
                mix(d.score_orig.to_bits());
                for q in &d.query {
                    mix(q.to_bits());
                }
            }
        }
    }
    h
}

/// Minimize the combined loss over random clips. Only the rescoring head and
/// matcher parameters update; detection inputs are frozen and checksummed.
pub fn train(
    dataset: &[TrainVideo],
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::Training("empty dataset".into()));
    }
    if cfg.clip_len < 2 {
        return Err(Error::InvalidArgument("clip_len must be at least 2".into()));
    }
    let checksum_before = dataset_checksum(dataset);

    let mut params = ModelParams::init(model_cfg, cfg.seed)?;
    let mut optimizer = AdamW::new(&params, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut events = Vec::new();
    let mut best_params = params.clone();
    let mut best_avg = f64::INFINITY;
    let mut window_sum = LossBreakdown {
        total: 0.0,
        rescoring: 0.0,
        association: 0.0,
    };
    let mut window_n = 0usize;

    for iter in 0..cfg.iterations {
        let video = &dataset[rng.random_range(0..dataset.len())];
        let frames = &video.detections.frames;
        let start = if frames.len() <= cfg.clip_len {
            0
        } else {
            rng.random_range(0..=frames.len() - cfg.clip_len)
        };
        let end = (start + cfg.clip_len).min(frames.len());
        let clip = Clip {
            frames: &frames[start..end],
            gt: &video.gt,
        };

        let (breakdown, grads) = total_loss_grad(clip, &params, cfg)?;
        if !breakdown.total.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss {} at iteration {iter}",
                breakdown.total
            )));
        }
        let lr = lr_at(cfg.learning_rate, iter, cfg.iterations, cfg.warmup_frac);
        optimizer.step(&mut params, &grads, lr);

        window_sum.total += breakdown.total;
        window_sum.rescoring += breakdown.rescoring;
        window_sum.association += breakdown.association;
        window_n += 1;
        if (iter + 1) % cfg.log_interval.max(1) == 0 || iter + 1 == cfg.iterations {
            let n = window_n as f64;
            let avg = window_sum.total / n;
            events.push(LogEvent {
                iter: iter + 1,
                loss: avg,
                loss_rescoring: window_sum.rescoring / n,
                loss_association: window_sum.association / n,
                lr,
            });
            if avg < best_avg {
                best_avg = avg;
                best_params = params.clone();
            }
            window_sum = LossBreakdown {
                total: 0.0,
                rescoring: 0.0,
                association: 0.0,
            };
            window_n = 0;
        }
    }

    if dataset_checksum(dataset) != checksum_before {
        return Err(Error::Training("frozen inputs were mutated during training".into()));
    }
    Ok(TrainReport {
        final_params: params,
        best_params,
        events,
    })
}
