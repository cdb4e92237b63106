//! Two-stage inference: threshold filter + NMS, short-term matching against
//! previous-frame trajectories, long-term matching of the leftovers against
//! the memory bank, then trajectory updates.

use crate::error::{Error, Result};
use crate::matcher::{embed, pairwise_scores, MatcherKind, MatcherParams};
use crate::math::layers::Linear;
use crate::math::matrix::Matrix;
use crate::params::ModelParams;
use crate::records::{TrackRecord, VideoDetections};
use crate::rescoring::{fuse_scores, rescore, Detection, FusionStrategy, ScoredInstance};
use crate::geometry::{nms, GtTrack};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// Which confidence drives filtering and NMS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScoringMode {
    Original,
    Rescored,
    #[default]
    Fused,
}

impl std::str::FromStr for ScoringMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(ScoringMode::Original),
            "rescored" => Ok(ScoringMode::Rescored),
            "fused" => Ok(ScoringMode::Fused),
            other => Err(Error::InvalidArgument(format!("unknown scoring mode '{other}'"))),
        }
    }
}

/// Which association stages run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MatcherMode {
    StOnly,
    LtOnly,
    #[default]
    Lst,
}

impl std::str::FromStr for MatcherMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "st" | "st-only" => Ok(MatcherMode::StOnly),
            "lt" | "lt-only" => Ok(MatcherMode::LtOnly),
            "lst" => Ok(MatcherMode::Lst),
            other => Err(Error::InvalidArgument(format!("unknown matcher mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackerConfig {
    /// Fused-score filter threshold.
    pub score_threshold: f64,
    /// Association probability threshold θ, applied to the softmax match
    /// probability against the null slot.
    pub assoc_threshold: f64,
    pub nms_iou: f64,
    /// History window H of the memory bank, in frames.
    pub memory_frames: u64,
    pub fusion: FusionStrategy,
    pub scoring: ScoringMode,
    pub matcher: MatcherMode,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            score_threshold: 0.3,
            assoc_threshold: 0.2,
            nms_iou: 0.7,
            memory_frames: 5,
            fusion: FusionStrategy::Max,
            scoring: ScoringMode::Fused,
            matcher: MatcherMode::Lst,
        }
    }
}

/// One tracked member: where an identity was in one frame.
#[derive(Debug, Clone)]
pub struct TrajMember {
    pub frame: u64,
    pub bbox: crate::geometry::BBox,
    pub embedding: Vec<f64>,
    pub score: f64,
    pub text: String,
}

/// An identity with per-frame members; the tracker's output unit.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub id: u64,
    pub members: Vec<TrajMember>,
}

impl Trajectory {
    pub fn last_frame(&self) -> u64 {
        self.members.last().map(|m| m.frame).unwrap_or(0)
    }
}

/// Rolling store of trajectory members from the last H frames.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    window: u64,
    frames: VecDeque<(u64, Vec<BankEntry>)>,
}

#[derive(Debug, Clone)]
pub struct BankEntry {
    /// Index into the tracker's trajectory list.
    pub traj: usize,
    pub embedding: Vec<f64>,
}

impl MemoryBank {
    pub fn new(window: u64) -> Self {
        MemoryBank {
            window,
            frames: VecDeque::new(),
        }
    }

    /// Drop frames outside the window `[current − H, current − 1]`.
    pub fn evict_for(&mut self, current: u64) {
        while let Some((f, _)) = self.frames.front() {
            if *f + self.window < current {
                self.frames.pop_front();
            } else {
                break;
            }
        }
    }

    pub fn push_frame(&mut self, frame: u64, entries: Vec<BankEntry>) {
        debug_assert!(self.frames.back().map(|(f, _)| *f < frame).unwrap_or(true));
        self.frames.push_back((frame, entries));
        while self.frames.len() as u64 > self.window {
            self.frames.pop_front();
        }
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    /// Entries of exactly one frame, if stored.
    pub fn entries_at(&self, frame: u64) -> Option<&[BankEntry]> {
        self.frames
            .iter()
            .find(|(f, _)| *f == frame)
            .map(|(_, e)| e.as_slice())
    }

    /// All banked (frame, entry) pairs, oldest first.
    pub fn all_entries(&self) -> impl Iterator<Item = (u64, &BankEntry)> {
        self.frames
            .iter()
            .flat_map(|(f, entries)| entries.iter().map(move |e| (*f, e)))
    }
}

/// Per-video tracking state.
pub struct TrackerState {
    pub trajectories: Vec<Trajectory>,
    bank: MemoryBank,
    next_id: u64,
}

impl TrackerState {
    pub fn new(cfg: &TrackerConfig) -> Self {
        TrackerState {
            trajectories: Vec::new(),
            bank: MemoryBank::new(cfg.memory_frames),
            next_id: 1,
        }
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.bank
    }
}

/// Rescore, fuse, threshold-filter and NMS one frame of detections.
/// Survivors come back in descending fused-score order.
pub fn filter_frame(
    dets: &[Detection],
    head: &Linear<Matrix>,
    cfg: &TrackerConfig,
) -> Result<Vec<ScoredInstance>> {
    if dets.is_empty() {
        return Ok(Vec::new());
    }
    let queries = Matrix::from_rows(&dets.iter().map(|d| d.query.clone()).collect::<Vec<_>>())?;
    let rescored = rescore(&queries, head)?;
    let mut kept: Vec<ScoredInstance> = Vec::new();
    for (d, &c_r) in dets.iter().zip(&rescored) {
        let c_f = match cfg.scoring {
            ScoringMode::Original => d.score_orig,
            ScoringMode::Rescored => c_r,
            ScoringMode::Fused => fuse_scores(d.score_orig, c_r, cfg.fusion),
        };
        if c_f >= cfg.score_threshold {
            kept.push(ScoredInstance {
                detection: d.clone(),
                score_rescored: c_r,
                score_fused: c_f,
            });
        }
    }
    let boxes: Vec<(crate::geometry::BBox, f64)> =
        kept.iter().map(|s| (s.detection.bbox, s.score_fused)).collect();
    let keep_idx = nms(&boxes, cfg.nms_iou);
    Ok(keep_idx.into_iter().map(|i| kept[i].clone()).collect())
}

/// Links found by one matching stage plus the instances left over.
#[derive(Debug, Clone, Default)]
pub struct StageMatches {
    /// (trajectory slot, instance index) pairs.
    pub links: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

/// Greedy descending-probability linking: each candidate pair above θ links
/// if both sides are still free.
fn greedy_link(
    mut candidates: Vec<(usize, usize, f64)>,
    traj_count_hint: usize,
    instances: &[usize],
    theta: f64,
) -> StageMatches {
    candidates.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    let mut traj_used = vec![false; traj_count_hint];
    let mut inst_used = vec![false; instances.len()];
    let mut links = Vec::new();
    for (traj_slot, local, p) in candidates {
        if p <= theta {
            break;
        }
        if traj_used[traj_slot] || inst_used[local] {
            continue;
        }
        traj_used[traj_slot] = true;
        inst_used[local] = true;
        links.push((traj_slot, instances[local]));
    }
    let unmatched = instances
        .iter()
        .enumerate()
        .filter_map(|(local, &inst)| (!inst_used[local]).then_some(inst))
        .collect();
    StageMatches { links, unmatched }
}

/// Stage 1: associate current instances with trajectories holding a member
/// at the previous frame.
pub fn st_match(
    current: &Matrix,
    instance_idx: &[usize],
    prev: &[(usize, &[f64])],
    theta: f64,
    params: &MatcherParams<Matrix>,
) -> Result<StageMatches> {
    if prev.is_empty() || instance_idx.is_empty() {
        return Ok(StageMatches {
            links: Vec::new(),
            unmatched: instance_idx.to_vec(),
        });
    }
    let history = Matrix::from_rows(&prev.iter().map(|(_, e)| e.to_vec()).collect::<Vec<_>>())?;
    let assoc = pairwise_scores(current, &history, MatcherKind::ShortTerm, params)?;
    let mut candidates = Vec::new();
    let mut slot_of = Vec::new();
    for (row, (slot, _)) in prev.iter().enumerate() {
        slot_of.push(*slot);
        let dist = assoc.distribution(row)?;
        for local in 0..instance_idx.len() {
            candidates.push((row, local, dist[local]));
        }
    }
    let mut matches = greedy_link(candidates, prev.len(), instance_idx, theta);
    for link in &mut matches.links {
        link.0 = slot_of[link.0];
    }
    Ok(matches)
}

/// Stage 2: associate leftovers against the memory bank. A trajectory's
/// score for an instance is the mean match probability over its banked
/// members.
pub fn lt_match(
    current: &Matrix,
    instance_idx: &[usize],
    bank_rows: &[(usize, &[f64])],
    theta: f64,
    params: &MatcherParams<Matrix>,
) -> Result<StageMatches> {
    if bank_rows.is_empty() || instance_idx.is_empty() {
        return Ok(StageMatches {
            links: Vec::new(),
            unmatched: instance_idx.to_vec(),
        });
    }
    let history =
        Matrix::from_rows(&bank_rows.iter().map(|(_, e)| e.to_vec()).collect::<Vec<_>>())?;
    let assoc = pairwise_scores(current, &history, MatcherKind::LongTerm, params)?;

    // mean probability per (trajectory, instance) over the trajectory's rows
    let mut slots: Vec<usize> = bank_rows.iter().map(|(s, _)| *s).collect();
    slots.sort_unstable();
    slots.dedup();
    let slot_pos = |slot: usize| slots.binary_search(&slot).unwrap();
    let mut sum = vec![vec![0.0f64; instance_idx.len()]; slots.len()];
    let mut count = vec![0usize; slots.len()];
    for (row, (slot, _)) in bank_rows.iter().enumerate() {
        let dist = assoc.distribution(row)?;
        let s = slot_pos(*slot);
        count[s] += 1;
        for local in 0..instance_idx.len() {
            sum[s][local] += dist[local];
        }
    }
    let mut candidates = Vec::new();
    for (s, per_inst) in sum.iter().enumerate() {
        for (local, total) in per_inst.iter().enumerate() {
            candidates.push((s, local, total / count[s] as f64));
        }
    }
    let mut matches = greedy_link(candidates, slots.len(), instance_idx, theta);
    for link in &mut matches.links {
        link.0 = slots[link.0];
    }
    Ok(matches)
}

/// Process one frame: filter → short-term stage → long-term stage → extend
/// or create trajectories → rotate the memory bank.
pub fn step(
    frame: u64,
    dets: &[Detection],
    state: &mut TrackerState,
    params: &ModelParams,
    cfg: &TrackerConfig,
) -> Result<()> {
    state.bank.evict_for(frame);

    let instances = filter_frame(dets, &params.rescore, cfg)?;
    let embeddings = if instances.is_empty() {
        Matrix::zeros(0, params.cfg.model_dim)
    } else {
        let queries = Matrix::from_rows(
            &instances.iter().map(|s| s.detection.query.clone()).collect::<Vec<_>>(),
        )?;
        embed(&queries, &params.matcher)?
    };
    let all_idx: Vec<usize> = (0..instances.len()).collect();

    // stage 1: previous-frame trajectories
    let st_result = if cfg.matcher == MatcherMode::LtOnly {
        StageMatches {
            links: Vec::new(),
            unmatched: all_idx.clone(),
        }
    } else {
        let prev: Vec<(usize, &[f64])> = state
            .bank
            .entries_at(frame.wrapping_sub(1))
            .map(|entries| entries.iter().map(|e| (e.traj, e.embedding.as_slice())).collect())
            .unwrap_or_default();
        st_match(&embeddings, &all_idx, &prev, cfg.assoc_threshold, &params.matcher)?
    };

    // stage 2: leftovers against the rest of the memory bank
    let lt_result = if cfg.matcher == MatcherMode::StOnly || st_result.unmatched.is_empty() {
        StageMatches {
            links: Vec::new(),
            unmatched: st_result.unmatched.clone(),
        }
    } else {
        let taken: Vec<usize> = st_result.links.iter().map(|(t, _)| *t).collect();
        let rows: Vec<(usize, &[f64])> = state
            .bank
            .all_entries()
            .filter(|(_, e)| !taken.contains(&e.traj))
            .map(|(_, e)| (e.traj, e.embedding.as_slice()))
            .collect();
        let sub = sub_rows(&embeddings, &st_result.unmatched);
        lt_match(&sub, &st_result.unmatched, &rows, cfg.assoc_threshold, &params.matcher)?
    };

    let mut bank_entries: Vec<(usize, BankEntry)> = Vec::new();
    let mut place = |slot: usize, inst: usize, state: &mut TrackerState| {
        let s = &instances[inst];
        let member = TrajMember {
            frame,
            bbox: s.detection.bbox,
            embedding: embeddings.row(inst).to_vec(),
            score: s.score_fused,
            text: s.detection.text.clone(),
        };
        let traj = &mut state.trajectories[slot];
        debug_assert!(traj.members.last().map(|m| m.frame < frame).unwrap_or(true));
        traj.members.push(member);
        bank_entries.push((inst, BankEntry { traj: slot, embedding: embeddings.row(inst).to_vec() }));
    };

    for &(slot, inst) in st_result.links.iter().chain(lt_result.links.iter()) {
        place(slot, inst, state);
    }
    for &inst in &lt_result.unmatched {
        let slot = state.trajectories.len();
        state.trajectories.push(Trajectory {
            id: state.next_id,
            members: Vec::new(),
        });
        state.next_id += 1;
        place(slot, inst, state);
    }

    // deterministic bank order: by instance index
    bank_entries.sort_by_key(|(inst, _)| *inst);
    debug_assert_eq!(bank_entries.len(), instances.len(), "every instance joins one trajectory");
    state
        .bank
        .push_frame(frame, bank_entries.into_iter().map(|(_, e)| e).collect());
    Ok(())
}

fn sub_rows(m: &Matrix, idx: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(idx.len(), m.cols());
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(m.row(i));
    }
    out
}

/// Track one video end to end. Frames must be strictly increasing.
pub fn run(
    video: &VideoDetections,
    params: &ModelParams,
    cfg: &TrackerConfig,
) -> Result<Vec<Trajectory>> {
    let mut state = TrackerState::new(cfg);
    let mut prev: Option<u64> = None;
    for (frame, dets) in &video.frames {
        if let Some(p) = prev {
            if *frame <= p {
                return Err(Error::OutOfOrderFrames {
                    previous: p,
                    found: *frame,
                });
            }
        }
        prev = Some(*frame);
        step(*frame, dets, &mut state, params, cfg)?;
    }
    Ok(state.trajectories)
}

/// Flatten trajectories into output records, ordered by track id then frame.
pub fn trajectory_records(video_id: &str, trajectories: &[Trajectory]) -> Vec<TrackRecord> {
    let mut out = Vec::new();
    let mut sorted: Vec<&Trajectory> = trajectories.iter().collect();
    sorted.sort_by_key(|t| t.id);
    for t in sorted {
        for m in &t.members {
            out.push(TrackRecord {
                video_id: video_id.to_string(),
                track_id: t.id,
                frame: m.frame,
                bbox: m.bbox.as_array(),
                score: m.score,
                text: m.text.clone(),
            });
        }
    }
    out
}

/// Trajectories as plain track shapes for evaluation.
pub fn as_track_shapes(trajectories: &[Trajectory]) -> Vec<GtTrack> {
    trajectories
        .iter()
        .map(|t| GtTrack {
            id: t.id,
            entries: t.members.iter().map(|m| (m.frame, m.bbox)).collect(),
            text: String::new(),
        })
        .collect()
}
