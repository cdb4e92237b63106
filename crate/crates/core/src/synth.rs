//! Deterministic synthetic scene generator standing in for a frozen
//! detector: ground-truth tracks plus per-frame detections with controllable
//! box noise, occlusion gaps, score suppression for small/blurry instances,
//! and an identity signal in the query vectors.

use crate::error::{Error, Result};
use crate::geometry::{BBox, GtTrack};
use crate::records::{DetectionRecord, GtRecord};
use crate::rescoring::Detection;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

/// Confidence model: a base score with penalties for small boxes and for
/// globally blurry frames.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreModel {
    pub base: f64,
    pub small_box_penalty: f64,
    pub blur_penalty: f64,
    /// Ground-truth box area below which an instance counts as small.
    pub small_area_threshold: f64,
    /// Fraction of frames drawn as blurry.
    pub blur_frame_prob: f64,
}

impl Default for ScoreModel {
    fn default() -> Self {
        ScoreModel {
            base: 0.85,
            small_box_penalty: 0.0,
            blur_penalty: 0.0,
            small_area_threshold: 900.0,
            blur_frame_prob: 0.0,
        }
    }
}

/// Track `track` emits no detection and no ground truth in
/// frames `from..=until`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OcclusionEpisode {
    pub track: usize,
    pub from: u64,
    pub until: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    pub video_id: String,
    pub frames: u64,
    pub tracks: usize,
    pub frame_size: (f64, f64),
    /// Per-axis speed bound for the linear motion component, px/frame.
    pub max_speed: f64,
    /// σ of the per-frame Gaussian jitter added to true positions.
    pub motion_jitter: f64,
    /// σ of the Gaussian noise between ground-truth and detected boxes.
    pub box_noise: f64,
    pub query_dim: usize,
    /// Minimum pairwise Euclidean distance between identity anchors.
    pub separation_margin: f64,
    /// σ of the Gaussian noise between anchors and emitted queries.
    pub embedding_noise: f64,
    pub occlusions: Vec<OcclusionEpisode>,
    pub score: ScoreModel,
    /// Expected false positives per frame (Poisson).
    pub false_positive_rate: f64,
    pub box_width: (f64, f64),
    pub box_height: (f64, f64),
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            video_id: "scene".into(),
            frames: 30,
            tracks: 5,
            frame_size: (1280.0, 720.0),
            max_speed: 6.0,
            motion_jitter: 0.5,
            box_noise: 1.0,
            query_dim: 32,
            separation_margin: 0.8,
            embedding_noise: 0.05,
            occlusions: Vec::new(),
            score: ScoreModel::default(),
            false_positive_rate: 0.0,
            box_width: (40.0, 120.0),
            box_height: (20.0, 60.0),
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("motion_jitter", self.motion_jitter),
            ("box_noise", self.box_noise),
            ("embedding_noise", self.embedding_noise),
            ("false_positive_rate", self.false_positive_rate),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be ≥ 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.score.blur_frame_prob) {
            return Err(Error::InvalidArgument("blur_frame_prob must be in [0,1]".into()));
        }
        if self.frames == 0 || self.query_dim == 0 {
            return Err(Error::InvalidArgument("frames and query_dim must be positive".into()));
        }
        Ok(())
    }

    fn occluded(&self, track: usize, frame: u64) -> bool {
        self.occlusions
            .iter()
            .any(|o| o.track == track && (o.from..=o.until).contains(&frame))
    }
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn sample_anchors(count: usize, dim: usize, margin: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut anchors: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut attempts = 0;
    while anchors.len() < count {
        let candidate = unit_vector(dim, rng);
        let ok = anchors.iter().all(|a| {
            let d2: f64 = a.iter().zip(&candidate).map(|(x, y)| (x - y) * (x - y)).sum();
            d2.sqrt() >= margin
        });
        if ok {
            anchors.push(candidate);
        }
        attempts += 1;
        assert!(attempts < 100_000, "anchor rejection sampling stalled; margin too large");
    }
    anchors
}

struct TrackState {
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    w: f64,
    h: f64,
    small: bool,
}

/// Generate one scene. Fully determined by the config (including its seed).
pub fn generate(cfg: &SceneConfig) -> Result<(Vec<GtTrack>, Vec<(u64, Vec<Detection>)>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (fw, fh) = cfg.frame_size;

    let anchors = sample_anchors(cfg.tracks, cfg.query_dim, cfg.separation_margin, &mut rng);
    let mut states: Vec<TrackState> = (0..cfg.tracks)
        .map(|_| {
            let w = rng.random_range(cfg.box_width.0..=cfg.box_width.1);
            let h = rng.random_range(cfg.box_height.0..=cfg.box_height.1);
            TrackState {
                cx: rng.random_range(w / 2.0..fw - w / 2.0),
                cy: rng.random_range(h / 2.0..fh - h / 2.0),
                vx: rng.random_range(-cfg.max_speed..=cfg.max_speed),
                vy: rng.random_range(-cfg.max_speed..=cfg.max_speed),
                w,
                h,
                small: w * h < cfg.score.small_area_threshold,
            }
        })
        .collect();

    let blur_frames: Vec<bool> = (0..cfg.frames)
        .map(|_| rng.random_range(0.0..1.0) < cfg.score.blur_frame_prob)
        .collect();

    let jitter = Normal::new(0.0, cfg.motion_jitter.max(1e-12)).unwrap();
    let box_noise = Normal::new(0.0, cfg.box_noise.max(1e-12)).unwrap();
    let emb_noise = Normal::new(0.0, cfg.embedding_noise.max(1e-12)).unwrap();

    let mut gt: Vec<GtTrack> = (0..cfg.tracks)
        .map(|k| GtTrack {
            id: k as u64 + 1,
            entries: Vec::new(),
            text: format!("w{k:03}"),
        })
        .collect();
    let mut frames_out: Vec<(u64, Vec<Detection>)> = Vec::with_capacity(cfg.frames as usize);
    let mut fp_counter = 0usize;

    for frame in 1..=cfg.frames {
        let blurry = blur_frames[(frame - 1) as usize];
        let mut dets: Vec<Detection> = Vec::new();
        for (k, s) in states.iter_mut().enumerate() {
            s.cx = (s.cx + s.vx + if cfg.motion_jitter > 0.0 { jitter.sample(&mut rng) } else { 0.0 })
                .clamp(s.w / 2.0, fw - s.w / 2.0);
            s.cy = (s.cy + s.vy + if cfg.motion_jitter > 0.0 { jitter.sample(&mut rng) } else { 0.0 })
                .clamp(s.h / 2.0, fh - s.h / 2.0);
            // bounce off the walls so long scenes keep moving
            if s.cx <= s.w / 2.0 || s.cx >= fw - s.w / 2.0 {
                s.vx = -s.vx;
            }
            if s.cy <= s.h / 2.0 || s.cy >= fh - s.h / 2.0 {
                s.vy = -s.vy;
            }
            if cfg.occluded(k, frame) {
                continue;
            }
            let gt_box = BBox::new(
                s.cx - s.w / 2.0,
                s.cy - s.h / 2.0,
                s.cx + s.w / 2.0,
                s.cy + s.h / 2.0,
            );
            gt[k].entries.push((frame, gt_box));

            let mut coords = gt_box.as_array();
            if cfg.box_noise > 0.0 {
                for c in &mut coords {
                    *c += box_noise.sample(&mut rng);
                }
            }
            let det_box = BBox::new(
                coords[0].min(coords[2]),
                coords[1].min(coords[3]),
                coords[0].max(coords[2]),
                coords[1].max(coords[3]),
            );
            let query: Vec<f64> = anchors[k]
                .iter()
                .map(|a| a + if cfg.embedding_noise > 0.0 { emb_noise.sample(&mut rng) } else { 0.0 })
                .collect();
            let mut score = cfg.score.base;
            if s.small {
                score -= cfg.score.small_box_penalty;
            }
            if blurry {
                score -= cfg.score.blur_penalty;
            }
            dets.push(Detection {
                frame,
                bbox: det_box,
                score_orig: score.clamp(0.01, 0.99),
                query,
                text: format!("w{k:03}"),
            });
        }

        if cfg.false_positive_rate > 0.0 {
            let poisson = Poisson::new(cfg.false_positive_rate).unwrap();
            let count = poisson.sample(&mut rng) as usize;
            for _ in 0..count {
                let w = rng.random_range(cfg.box_width.0..=cfg.box_width.1);
                let h = rng.random_range(cfg.box_height.0..=cfg.box_height.1);
                let cx = rng.random_range(w / 2.0..fw - w / 2.0);
                let cy = rng.random_range(h / 2.0..fh - h / 2.0);
                let query = unit_vector(cfg.query_dim, &mut rng);
                dets.push(Detection {
                    frame,
                    bbox: BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0),
                    score_orig: rng.random_range(0.3..0.6),
                    query,
                    text: format!("fp{fp_counter:03}"),
                });
                fp_counter += 1;
            }
        }
        frames_out.push((frame, dets));
    }

    gt.retain(|t| !t.entries.is_empty());
    Ok((gt, frames_out))
}

/// Named benchmark suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteKind {
    Easy,
    Occlusion,
    DomainGap,
}

impl std::str::FromStr for SuiteKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(SuiteKind::Easy),
            "occlusion" => Ok(SuiteKind::Occlusion),
            "domain_gap" | "domain-gap" => Ok(SuiteKind::DomainGap),
            other => Err(Error::InvalidArgument(format!("unknown suite '{other}'"))),
        }
    }
}

impl std::fmt::Display for SuiteKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SuiteKind::Easy => write!(f, "easy"),
            SuiteKind::Occlusion => write!(f, "occlusion"),
            SuiteKind::DomainGap => write!(f, "domain_gap"),
        }
    }
}

pub const DEFAULT_SUITE_SEED: u64 = 0;

/// Fixed suite recipes.
pub fn make_suite(kind: SuiteKind) -> Vec<SceneConfig> {
    make_suite_seeded(kind, DEFAULT_SUITE_SEED)
}

/// Suite recipes with a controllable base seed; scene i uses
/// `base_seed·1000 + i` so suites with different bases never share scenes.
pub fn make_suite_seeded(kind: SuiteKind, base_seed: u64) -> Vec<SceneConfig> {
    let scenes = 10usize;
    (0..scenes)
        .map(|i| {
            let seed = base_seed * 1000 + i as u64;
            let video_id = format!("{kind}-{i:02}");
            match kind {
                SuiteKind::Easy => SceneConfig {
                    video_id,
                    frames: 30,
                    tracks: 5,
                    seed,
                    ..SceneConfig::default()
                },
                SuiteKind::Occlusion => {
                    // every scene: two gaps of 2–4 frames, shorter than the
                    // default memory window of 5
                    let tracks = 5usize;
                    let g1 = 10 + (i as u64 % 3); // gap lengths 2..=4
                    let g2 = 20 + ((i as u64 + 1) % 3);
                    SceneConfig {
                        video_id,
                        frames: 32,
                        tracks,
                        occlusions: vec![
                            OcclusionEpisode { track: i % tracks, from: 10, until: g1 + 1 },
                            OcclusionEpisode { track: (i + 2) % tracks, from: 20, until: g2 + 1 },
                        ],
                        seed,
                        ..SceneConfig::default()
                    }
                }
                SuiteKind::DomainGap => SceneConfig {
                    video_id,
                    frames: 30,
                    tracks: 6,
                    // half the size range sits below the small-box area threshold
                    box_width: (20.0, 120.0),
                    box_height: (10.0, 60.0),
                    score: ScoreModel {
                        base: 0.55,
                        small_box_penalty: 0.35,
                        blur_penalty: 0.30,
                        small_area_threshold: 2000.0,
                        blur_frame_prob: 0.35,
                    },
                    false_positive_rate: 0.3,
                    seed,
                    ..SceneConfig::default()
                },
            }
        })
        .collect()
}

/// Flatten one generated scene into interchange records.
pub fn scene_records(
    video_id: &str,
    gt: &[GtTrack],
    frames: &[(u64, Vec<Detection>)],
) -> (Vec<DetectionRecord>, Vec<GtRecord>) {
    let mut det_records = Vec::new();
    for (frame, dets) in frames {
        for d in dets {
            det_records.push(DetectionRecord {
                video_id: video_id.to_string(),
                frame: *frame,
                bbox: d.bbox.as_array(),
                score: d.score_orig,
                query: d.query.clone(),
                text: d.text.clone(),
            });
        }
    }
    let mut gt_records = Vec::new();
    for t in gt {
        for (frame, bbox) in &t.entries {
            gt_records.push(GtRecord {
                video_id: video_id.to_string(),
                track_id: t.id,
                frame: *frame,
                bbox: bbox.as_array(),
                text: t.text.clone(),
            });
        }
    }
    (det_records, gt_records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::gt_assign;

    fn noiseless() -> SceneConfig {
        SceneConfig {
            motion_jitter: 0.0,
            box_noise: 0.0,
            embedding_noise: 0.0,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn zero_noise_detections_equal_gt() {
        let cfg = noiseless();
        let (gt, frames) = generate(&cfg).unwrap();
        assert_eq!(gt.len(), cfg.tracks);
        for (frame, dets) in &frames {
            assert_eq!(dets.len(), cfg.tracks, "one detection per track per frame");
            for (k, d) in dets.iter().enumerate() {
                let gt_box = gt[k].box_at(*frame).unwrap();
                assert_eq!(d.bbox, gt_box, "bitwise equal boxes at zero noise");
            }
        }
    }

    #[test]
    fn same_seed_identical_output() {
        let cfg = SceneConfig {
            false_positive_rate: 0.5,
            ..SceneConfig::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.0, b.0);
        let da: Vec<_> = a.1.iter().flat_map(|(_, d)| d.clone()).collect();
        let db: Vec<_> = b.1.iter().flat_map(|(_, d)| d.clone()).collect();
        assert_eq!(da, db);
    }

    #[test]
    fn occlusion_emits_nothing() {
        let cfg = SceneConfig {
            occlusions: vec![OcclusionEpisode { track: 1, from: 5, until: 8 }],
            ..noiseless()
        };
        let (gt, frames) = generate(&cfg).unwrap();
        for f in 5..=8u64 {
            assert!(gt[1].box_at(f).is_none());
            let dets = &frames[(f - 1) as usize].1;
            assert_eq!(dets.len(), cfg.tracks - 1);
            assert!(dets.iter().all(|d| d.text != "w001"));
        }
        assert!(gt[1].box_at(4).is_some());
        assert!(gt[1].box_at(9).is_some());
    }

    #[test]
    fn zero_noise_gt_assign_recovers_generator() {
        let cfg = noiseless();
        let (gt, frames) = generate(&cfg).unwrap();
        for (frame, dets) in &frames {
            let boxes: Vec<_> = dets.iter().map(|d| d.bbox).collect();
            for (k, track) in gt.iter().enumerate() {
                let idx = gt_assign(&boxes, track.box_at(*frame));
                assert_eq!(idx, Some(k));
            }
        }
    }

    #[test]
    fn suite_recipes() {
        let easy = make_suite(SuiteKind::Easy);
        assert_eq!(easy.len(), 10);
        assert!(easy.iter().all(|c| c.frames == 30 && c.tracks == 5 && c.occlusions.is_empty()));

        let occ = make_suite(SuiteKind::Occlusion);
        for c in &occ {
            assert!(!c.occlusions.is_empty());
            for o in &c.occlusions {
                let gap = o.until - o.from + 1;
                assert!((2..=4).contains(&gap), "gap {gap} outside 2–4");
                assert!(gap < 5, "gap must fit inside the memory window");
            }
        }

        // at least 30% of domain-gap instances sit below the 0.3 filter
        let dg = make_suite(SuiteKind::DomainGap);
        let mut low = 0usize;
        let mut total = 0usize;
        for c in &dg {
            let (_, frames) = generate(c).unwrap();
            for (_, dets) in &frames {
                for d in dets {
                    if d.text.starts_with('w') {
                        total += 1;
                        if d.score_orig < 0.3 {
                            low += 1;
                        }
                    }
                }
            }
        }
        let frac = low as f64 / total as f64;
        assert!(frac >= 0.3, "only {frac:.2} of true instances below 0.3");
    }

    #[test]
    fn unknown_suite_name_is_error() {
        assert!("weird".parse::<SuiteKind>().is_err());
    }

    #[test]
    fn anchors_respect_margin() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let anchors = sample_anchors(8, 16, 0.8, &mut rng);
        for i in 0..anchors.len() {
            let norm: f64 = anchors[i].iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
            for j in i + 1..anchors.len() {
                let d: f64 = anchors[i]
                    .iter()
                    .zip(&anchors[j])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                assert!(d >= 0.8);
            }
        }
    }
}
