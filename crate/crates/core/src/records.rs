//! JSON Lines interchange formats: detections in, ground truth in, tracked
//! trajectories out. These are also the import surface for real detector
//! outputs.

use crate::error::{Error, Result};
use crate::geometry::{BBox, GtTrack};
use crate::rescoring::Detection;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// One detector candidate: `{video_id, frame, box, score, query, text}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub video_id: String,
    pub frame: u64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub score: f64,
    pub query: Vec<f64>,
    pub text: String,
}

/// One ground-truth member: `{video_id, track_id, frame, box, text}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GtRecord {
    pub video_id: String,
    pub track_id: u64,
    pub frame: u64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub text: String,
}

/// One trajectory member: `{video_id, track_id, frame, box, score, text}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackRecord {
    pub video_id: String,
    pub track_id: u64,
    pub frame: u64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub score: f64,
    pub text: String,
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Record {
            line: i + 1,
            detail: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Detections of one video, grouped per frame in ascending order.
#[derive(Debug, Clone)]
pub struct VideoDetections {
    pub video_id: String,
    pub frames: Vec<(u64, Vec<Detection>)>,
}

/// Group flat records by video, preserving first-appearance order of videos.
/// Frames within a video must be non-decreasing.
pub fn group_detections(records: Vec<DetectionRecord>) -> Result<Vec<VideoDetections>> {
    let mut order: Vec<String> = Vec::new();
    let mut by_video: BTreeMap<String, Vec<(u64, Vec<Detection>)>> = BTreeMap::new();
    for r in records {
        if !by_video.contains_key(&r.video_id) {
            order.push(r.video_id.clone());
        }
        let frames = by_video.entry(r.video_id.clone()).or_default();
        let det = Detection {
            frame: r.frame,
            bbox: BBox::from_array(r.bbox),
            score_orig: r.score,
            query: r.query,
            text: r.text,
        };
        match frames.last_mut() {
            Some((f, dets)) if *f == r.frame => dets.push(det),
            Some((f, _)) if *f > r.frame => {
                return Err(Error::OutOfOrderFrames {
                    previous: *f,
                    found: r.frame,
                })
            }
            _ => frames.push((r.frame, vec![det])),
        }
    }
    Ok(order
        .into_iter()
        .map(|video_id| {
            let frames = by_video.remove(&video_id).unwrap();
            VideoDetections { video_id, frames }
        })
        .collect())
}

/// Group ground-truth records into per-video track sets, first-appearance
/// video order, tracks sorted by id.
pub fn group_gt(records: Vec<GtRecord>) -> Result<Vec<(String, Vec<GtTrack>)>> {
    let mut order: Vec<String> = Vec::new();
    let mut by_video: BTreeMap<String, BTreeMap<u64, GtTrack>> = BTreeMap::new();
    for r in records {
        if !by_video.contains_key(&r.video_id) {
            order.push(r.video_id.clone());
        }
        let tracks = by_video.entry(r.video_id.clone()).or_default();
        let track = tracks.entry(r.track_id).or_insert_with(|| GtTrack {
            id: r.track_id,
            entries: Vec::new(),
            text: r.text.clone(),
        });
        track.entries.push((r.frame, BBox::from_array(r.bbox)));
    }
    let mut out = Vec::new();
    for video_id in order {
        let tracks: Vec<GtTrack> = by_video
            .remove(&video_id)
            .unwrap()
            .into_values()
            .map(|mut t| {
                t.entries.sort_by_key(|(f, _)| *f);
                t
            })
            .collect();
        crate::geometry::validate_tracks(&tracks)?;
        out.push((video_id, tracks));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detections_group_by_video_and_frame() {
        let rec = |v: &str, f: u64| DetectionRecord {
            video_id: v.into(),
            frame: f,
            bbox: [0.0, 0.0, 1.0, 1.0],
            score: 0.5,
            query: vec![1.0],
            text: "w000".into(),
        };
        let grouped =
            group_detections(vec![rec("a", 1), rec("a", 1), rec("b", 1), rec("a", 2)]).unwrap();
        assert_eq!(grouped.len(), 2);
        assert_eq!(grouped[0].video_id, "a");
        assert_eq!(grouped[0].frames.len(), 2);
        assert_eq!(grouped[0].frames[0].1.len(), 2);
        assert_eq!(grouped[1].video_id, "b");
    }

    #[test]
    fn out_of_order_frames_rejected() {
        let rec = |f: u64| DetectionRecord {
            video_id: "a".into(),
            frame: f,
            bbox: [0.0, 0.0, 1.0, 1.0],
            score: 0.5,
            query: vec![1.0],
            text: String::new(),
        };
        assert!(matches!(
            group_detections(vec![rec(2), rec(1)]),
            Err(Error::OutOfOrderFrames { .. })
        ));
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dets.jsonl");
        let items = vec![DetectionRecord {
            video_id: "v".into(),
            frame: 3,
            bbox: [1.0, 2.0, 3.0, 4.0],
            score: 0.25,
            query: vec![0.5, -0.5],
            text: "w007".into(),
        }];
        write_jsonl(&path, &items).unwrap();
        let back: Vec<DetectionRecord> = read_jsonl(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].frame, 3);
        assert_eq!(back[0].bbox, [1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn gt_grouping_sorts_tracks() {
        let rec = |t: u64, f: u64| GtRecord {
            video_id: "v".into(),
            track_id: t,
            frame: f,
            bbox: [0.0, 0.0, 1.0, 1.0],
            text: "w".into(),
        };
        let grouped = group_gt(vec![rec(2, 1), rec(1, 2), rec(1, 1)]).unwrap();
        assert_eq!(grouped[0].1.len(), 2);
        assert_eq!(grouped[0].1[0].id, 1);
        assert_eq!(grouped[0].1[0].entries.len(), 2);
    }
}
