//! lstmatch: a trainable tracking-by-association engine.
//!
//! Per-frame detection records (from any source; a synthetic scene generator
//! ships in [`synth`]) are rescored by a lightweight head, filtered, and
//! linked into trajectories by a two-stage procedure: a short-term matcher
//! against previous-frame trajectories, then a long-term matcher against a
//! rolling memory bank. Both matchers are one-layer transformer
//! encoder/decoder pairs trained jointly with the rescoring head.

pub mod audit;
pub mod checkpoint;
pub mod error;
pub mod geometry;
pub mod matcher;
pub mod math;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod records;
pub mod rescoring;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{gt_assign, iou, l1_box, nms, BBox, GtTrack};
pub use matcher::{
    assoc_distribution, association_loss, embed, pairwise_scores, AssocMatrix, MatcherKind,
    MatcherParams,
};
pub use math::{grad_check, softmax_row, Matrix};
pub use metrics::{evaluate, MetricsReport};
pub use params::{Gradients, ModelConfig, ModelParams};
pub use pipeline::{
    filter_frame, lt_match, run, st_match, step, MatcherMode, MemoryBank, ScoringMode,
    TrackerConfig, Trajectory,
};
pub use records::{DetectionRecord, GtRecord, TrackRecord};
pub use rescoring::{
    focal_loss, fuse_scores, hungarian, match_cost, rescore, rescoring_loss, Assignment,
    Detection, FocalMatchConfig, FusionStrategy, ScoredInstance,
};
pub use synth::{generate, make_suite, make_suite_seeded, SceneConfig, SuiteKind};
pub use train::{total_loss, train, TrainConfig, TrainVideo};
