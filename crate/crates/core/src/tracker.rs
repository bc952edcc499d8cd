//! Per-frame tracking pipeline and track lifecycle.
//!
//! Each frame: predict every live track, move the predictions into the
//! current frame with the platform transform, associate in two stages,
//! update, spawn, age and emit. Offline tracklet interpolation lives at the
//! bottom of this module.

use std::collections::{BTreeMap, HashSet};

use thiserror::Error;

use crate::appearance::{
    cosine_matrix, fuse_matrices, iou_matrix, AppearanceError, CoffConfig, Embedding, TrackAppearance, TrackView,
};
use crate::association::{first_stage, second_stage, Assignment, AssociationConfig, AssociationError, CostMatrix};
use crate::cmc::{CmcError, TransformSource};
use crate::geometry::{AffineTransform2D, Box2D};
use crate::motion::{
    apply_platform_compensation, initiate, predict, state_to_box, update, KalmanConfig, KalmanState, MotionError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackerError {
    #[error("frame {got} does not follow frame {previous}")]
    NonMonotonicFrame { previous: u32, got: u32 },
    #[error("detection {index} in frame {frame} is above the detection threshold but has no embedding")]
    MissingEmbedding { frame: u32, index: usize },
    #[error("stream misalignment: {0}")]
    StreamMisalignment(String),
    #[error(transparent)]
    Appearance(#[from] AppearanceError),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Association(#[from] AssociationError),
    #[error(transparent)]
    Cmc(#[from] CmcError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionObservation {
    pub frame: u32,
    pub bbox: Box2D,
    pub confidence: f64,
    pub class_id: i32,
    pub embedding: Option<Embedding>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrackStatus {
    Tentative,
    Confirmed,
    Lost,
    Removed,
}

#[derive(Debug, Clone)]
pub struct Track {
    pub track_id: u32,
    pub state: KalmanState,
    pub appearance: TrackAppearance,
    pub status: TrackStatus,
    pub frames_since_update: u32,
    pub hits: u32,
    pub class_id: i32,
    pub history: Vec<(u32, Box2D)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerConfig {
    /// Frames a lost track is kept before removal.
    pub buffer_frames: u32,
    /// Consecutive hits before a tentative track is confirmed.
    pub n_init: u32,
    pub cmc_enabled: bool,
    /// When off, the first stage runs on IoU distance alone.
    pub appearance_enabled: bool,
    pub association: AssociationConfig,
    pub coff: CoffConfig,
    pub kalman: KalmanConfig,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            buffer_frames: 30,
            n_init: 3,
            cmc_enabled: true,
            appearance_enabled: true,
            association: AssociationConfig::default(),
            coff: CoffConfig::default(),
            kalman: KalmanConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackOutput {
    pub track_id: u32,
    pub bbox: Box2D,
    pub confidence: f64,
    pub class_id: i32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameResult {
    pub frame: u32,
    /// Sorted by track id.
    pub outputs: Vec<TrackOutput>,
}

/// Where each detection of a frame ended up.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameAccounting {
    pub matched: Vec<usize>,
    pub spawned: Vec<usize>,
    pub discarded: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Tracker {
    cfg: TrackerConfig,
    tracks: Vec<Track>,
    next_id: u32,
    last_frame: Option<u32>,
    predictions: Vec<(u32, Box2D)>,
    accounting: FrameAccounting,
}

/// Split of one frame's detections by confidence.
struct Split {
    high: Vec<usize>,
    low: Vec<usize>,
    dropped: Vec<usize>,
}

fn split_detections(dets: &[DetectionObservation], cfg: &AssociationConfig) -> Split {
    let mut s = Split { high: Vec::new(), low: Vec::new(), dropped: Vec::new() };
    for (i, d) in dets.iter().enumerate() {
        if d.confidence >= cfg.detection_threshold {
            s.high.push(i);
        } else if d.confidence >= cfg.low_conf_threshold {
            s.low.push(i);
        } else {
            s.dropped.push(i);
        }
    }
    s
}

impl Tracker {
    pub fn new(cfg: TrackerConfig) -> Self {
        Self {
            cfg,
            tracks: Vec::new(),
            next_id: 1,
            last_frame: None,
            predictions: Vec::new(),
            accounting: FrameAccounting::default(),
        }
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    /// Live (not removed) tracks.
    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    /// Predicted, platform-compensated box of every live track from the most
    /// recent step, taken before association.
    pub fn predictions(&self) -> &[(u32, Box2D)] {
        &self.predictions
    }

    pub fn last_accounting(&self) -> &FrameAccounting {
        &self.accounting
    }

    /// First-stage association of `pool` against the high-confidence
    /// detections still in `available`. Returns `(track index, det index)`.
    fn coff_stage(
        &self,
        pool: &[usize],
        available: &[usize],
        dets: &[DetectionObservation],
    ) -> Result<Vec<(usize, usize)>, TrackerError> {
        if pool.is_empty() || available.is_empty() {
            return Ok(Vec::new());
        }
        let track_boxes: Vec<Box2D> = pool.iter().map(|&t| state_to_box(&self.tracks[t].state)).collect();
        let det_boxes: Vec<Box2D> = available.iter().map(|&d| dets[d].bbox).collect();
        let ious = iou_matrix(&track_boxes, &det_boxes);
        let (fused, cosine) = if self.cfg.appearance_enabled {
            let views: Vec<TrackView<'_>> = pool
                .iter()
                .zip(&track_boxes)
                .map(|(&t, &b)| TrackView { predicted: b, appearance: &self.tracks[t].appearance })
                .collect();
            let embs: Vec<&Embedding> =
                available.iter().map(|&d| dets[d].embedding.as_ref().expect("checked in step")).collect();
            let cosine = cosine_matrix(&views, &embs)?;
            (fuse_matrices(&cosine, &ious, &self.cfg.coff), Some(cosine))
        } else {
            let mut ones = CostMatrix::zeros(pool.len(), available.len());
            for r in 0..pool.len() {
                for c in 0..available.len() {
                    ones.set(r, c, 1.0);
                }
            }
            (fuse_matrices(&ones, &ious, &self.cfg.coff), None)
        };
        let a: Assignment = first_stage(&fused, &ious, cosine.as_ref(), &self.cfg.association)?;
        Ok(a.matches.into_iter().map(|(r, c)| (pool[r], available[c])).collect())
    }

    /// Advances the tracker by one frame.
    pub fn step(
        &mut self,
        frame: u32,
        dets: &[DetectionObservation],
        frame_transform: &AffineTransform2D,
    ) -> Result<FrameResult, TrackerError> {
        if let Some(prev) = self.last_frame {
            if frame <= prev {
                return Err(TrackerError::NonMonotonicFrame { previous: prev, got: frame });
            }
        }
        let split = split_detections(dets, &self.cfg.association);
        if self.cfg.appearance_enabled {
            if let Some(&index) = split.high.iter().find(|&&i| dets[i].embedding.is_none()) {
                return Err(TrackerError::MissingEmbedding { frame, index });
            }
        }
        self.last_frame = Some(frame);

        let buffer = self.cfg.buffer_frames;
        self.tracks.retain(|t| !(t.status == TrackStatus::Lost && t.frames_since_update >= buffer));

        // predict + compensate
        for t in &mut self.tracks {
            let mut s = predict(&t.state, &self.cfg.kalman);
            if self.cfg.cmc_enabled {
                s = apply_platform_compensation(&s, frame_transform);
            }
            t.state = s;
        }
        self.predictions = self.tracks.iter().map(|t| (t.track_id, state_to_box(&t.state))).collect();

        let established: Vec<usize> = (0..self.tracks.len())
            .filter(|&i| matches!(self.tracks[i].status, TrackStatus::Confirmed | TrackStatus::Lost))
            .collect();
        let tentative: Vec<usize> =
            (0..self.tracks.len()).filter(|&i| self.tracks[i].status == TrackStatus::Tentative).collect();

        // first stage: established tracks, then tentative ones, on the fused cost
        let mut matches = self.coff_stage(&established, &split.high, dets)?;
        let used: HashSet<usize> = matches.iter().map(|m| m.1).collect();
        let remaining_high: Vec<usize> = split.high.iter().copied().filter(|d| !used.contains(d)).collect();
        let tentative_matches = self.coff_stage(&tentative, &remaining_high, dets)?;
        matches.extend(&tentative_matches);

        // second stage: leftover established tracks against low-confidence detections
        let matched_tracks: HashSet<usize> = matches.iter().map(|m| m.0).collect();
        let leftovers: Vec<usize> = established.iter().copied().filter(|t| !matched_tracks.contains(t)).collect();
        let leftover_boxes: Vec<Box2D> = leftovers.iter().map(|&t| state_to_box(&self.tracks[t].state)).collect();
        let low_boxes: Vec<Box2D> = split.low.iter().map(|&d| dets[d].bbox).collect();
        let second = second_stage(&leftover_boxes, &low_boxes, &self.cfg.association);
        matches.extend(second.matches.iter().map(|&(r, c)| (leftovers[r], split.low[c])));

        // update
        let mut confidence: BTreeMap<usize, f64> = BTreeMap::new();
        for &(t, d) in &matches {
            let det = &dets[d];
            let track = &mut self.tracks[t];
            track.state = update(&track.state, &det.bbox, &self.cfg.kalman)?;
            if let Some(e) = det.embedding.as_ref().filter(|_| self.cfg.appearance_enabled) {
                if d_is_high(det, &self.cfg.association) {
                    track.appearance.uema_update(e)?;
                }
            }
            track.frames_since_update = 0;
            track.hits += 1;
            track.class_id = det.class_id;
            track.status = match track.status {
                TrackStatus::Tentative if track.hits >= self.cfg.n_init => TrackStatus::Confirmed,
                TrackStatus::Tentative => TrackStatus::Tentative,
                _ => TrackStatus::Confirmed,
            };
            track.history.push((frame, state_to_box(&track.state)));
            confidence.insert(t, det.confidence);
        }

        // age unmatched tracks
        for (i, t) in self.tracks.iter_mut().enumerate() {
            if confidence.contains_key(&i) {
                continue;
            }
            t.frames_since_update += 1;
            t.status = match t.status {
                TrackStatus::Tentative => TrackStatus::Removed,
                TrackStatus::Confirmed | TrackStatus::Lost => TrackStatus::Lost,
                TrackStatus::Removed => TrackStatus::Removed,
            };
        }

        // spawn from unmatched high-confidence detections
        let matched_dets: HashSet<usize> = matches.iter().map(|m| m.1).collect();
        let mut spawned = Vec::new();
        for &d in &split.high {
            if matched_dets.contains(&d) {
                continue;
            }
            let det = &dets[d];
            let Ok(state) = initiate(&det.bbox, &self.cfg.kalman) else {
                continue;
            };
            let dim = det.embedding.as_ref().map_or(0, Embedding::dim);
            let mut appearance = TrackAppearance::new(dim, self.cfg.coff.alpha);
            if let Some(e) = det.embedding.as_ref().filter(|_| self.cfg.appearance_enabled) {
                appearance.uema_update(e)?;
            }
            let status = if self.cfg.n_init <= 1 { TrackStatus::Confirmed } else { TrackStatus::Tentative };
            let idx = self.tracks.len();
            self.tracks.push(Track {
                track_id: self.next_id,
                history: vec![(frame, state_to_box(&state))],
                state,
                appearance,
                status,
                frames_since_update: 0,
                hits: 1,
                class_id: det.class_id,
            });
            self.next_id += 1;
            confidence.insert(idx, det.confidence);
            spawned.push(d);
        }

        let mut outputs: Vec<TrackOutput> = self
            .tracks
            .iter()
            .enumerate()
            .filter(|(_, t)| t.status == TrackStatus::Confirmed && t.frames_since_update == 0)
            .map(|(i, t)| TrackOutput {
                track_id: t.track_id,
                bbox: state_to_box(&t.state),
                confidence: confidence[&i],
                class_id: t.class_id,
            })
            .collect();
        outputs.sort_by_key(|o| o.track_id);

        self.tracks.retain(|t| t.status != TrackStatus::Removed);

        let mut matched: Vec<usize> = matched_dets.into_iter().collect();
        matched.sort_unstable();
        let mut discarded: Vec<usize> =
            (0..dets.len()).filter(|d| !matched.contains(d) && !spawned.contains(d)).collect();
        discarded.sort_unstable();
        self.accounting = FrameAccounting { matched, spawned, discarded };

        Ok(FrameResult { frame, outputs })
    }
}

fn d_is_high(det: &DetectionObservation, cfg: &AssociationConfig) -> bool {
    det.confidence >= cfg.detection_threshold
}

/// Groups detections by frame, keeping their in-frame order.
pub fn group_by_frame(dets: &[DetectionObservation]) -> BTreeMap<u32, Vec<DetectionObservation>> {
    let mut out: BTreeMap<u32, Vec<DetectionObservation>> = BTreeMap::new();
    for d in dets {
        out.entry(d.frame).or_default().push(d.clone());
    }
    out
}

/// Attaches embeddings keyed by `(frame, index within frame)`.
pub fn attach_embeddings(
    dets: &mut [DetectionObservation],
    embeddings: &BTreeMap<(u32, usize), Embedding>,
) -> Result<(), TrackerError> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for d in dets.iter_mut() {
        let idx = counts.entry(d.frame).or_insert(0);
        if let Some(e) = embeddings.get(&(d.frame, *idx)) {
            d.embedding = Some(e.clone());
        }
        *idx += 1;
    }
    for &(frame, index) in embeddings.keys() {
        if index >= counts.get(&frame).copied().unwrap_or(0) {
            return Err(TrackerError::StreamMisalignment(format!(
                "embedding for detection {index} of frame {frame}, which has {} detections",
                counts.get(&frame).copied().unwrap_or(0)
            )));
        }
    }
    Ok(())
}

/// How the two per-frame input branches (platform motion and detections
/// with appearance) are evaluated before they are joined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BranchMode {
    #[default]
    Sequential,
    /// Appearance branch first, then motion.
    Reversed,
    Concurrent,
}

fn appearance_branch(frame_dets: Option<&Vec<DetectionObservation>>) -> Vec<DetectionObservation> {
    frame_dets.cloned().unwrap_or_default()
}

/// Runs the tracker over frames `1..=frames`.
pub fn run_sequence(
    detections: &[DetectionObservation],
    transforms: &TransformSource,
    frames: u32,
    cfg: &TrackerConfig,
) -> Result<Vec<FrameResult>, TrackerError> {
    run_sequence_with(detections, transforms, frames, cfg, BranchMode::Sequential)
}

pub fn run_sequence_with(
    detections: &[DetectionObservation],
    transforms: &TransformSource,
    frames: u32,
    cfg: &TrackerConfig,
    mode: BranchMode,
) -> Result<Vec<FrameResult>, TrackerError> {
    if let Some(d) = detections.iter().find(|d| d.frame == 0 || d.frame > frames) {
        return Err(TrackerError::StreamMisalignment(format!("detection in frame {} outside 1..={frames}", d.frame)));
    }
    let by_frame = group_by_frame(detections);
    let mut tracker = Tracker::new(*cfg);
    let mut results = Vec::with_capacity(frames as usize);
    for frame in 1..=frames {
        let motion = || -> Result<AffineTransform2D, CmcError> {
            if cfg.cmc_enabled {
                transforms.transform_for(frame)
            } else {
                Ok(AffineTransform2D::identity())
            }
        };
        let (transform, dets) = match mode {
            BranchMode::Sequential => {
                let t = motion();
                (t, appearance_branch(by_frame.get(&frame)))
            }
            BranchMode::Reversed => {
                let d = appearance_branch(by_frame.get(&frame));
                (motion(), d)
            }
            BranchMode::Concurrent => std::thread::scope(|s| {
                let h = s.spawn(motion);
                let d = appearance_branch(by_frame.get(&frame));
                (h.join().expect("motion branch panicked"), d)
            }),
        };
        results.push(tracker.step(frame, &dets, &transform?)?);
    }
    Ok(results)
}

/// Fills gaps of at most `max_gap` missing frames inside each track with
/// linearly interpolated boxes. Longer gaps are left alone.
pub fn interpolate_tracklets(results: &[FrameResult], max_gap: u32) -> Vec<FrameResult> {
    let mut per_track: BTreeMap<u32, Vec<(u32, TrackOutput)>> = BTreeMap::new();
    for r in results {
        for o in &r.outputs {
            per_track.entry(o.track_id).or_default().push((r.frame, *o));
        }
    }
    let mut by_frame: BTreeMap<u32, Vec<TrackOutput>> = results.iter().map(|r| (r.frame, r.outputs.clone())).collect();
    for obs in per_track.values_mut() {
        obs.sort_by_key(|(f, _)| *f);
        for w in obs.windows(2) {
            let (f0, a) = w[0];
            let (f1, b) = w[1];
            let gap = f1 - f0 - 1;
            if gap == 0 || gap > max_gap {
                continue;
            }
            for f in f0 + 1..f1 {
                let t = f64::from(f - f0) / f64::from(f1 - f0);
                by_frame.entry(f).or_default().push(TrackOutput {
                    track_id: a.track_id,
                    bbox: a.bbox.lerp(&b.bbox, t),
                    confidence: a.confidence + (b.confidence - a.confidence) * t,
                    class_id: a.class_id,
                });
            }
        }
    }
    by_frame
        .into_iter()
        .map(|(frame, mut outputs)| {
            outputs.sort_by_key(|o| o.track_id);
            FrameResult { frame, outputs }
        })
        .collect()
}
