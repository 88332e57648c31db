//! Online tracking loop: predict, associate, update, manage track lifecycle,
//! and emit tracklets at end of stream.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assoc::{self, AppearanceBank, AssocError, AssocParams, CostMatrix};
use crate::geometry::{Iou, OverlapKernel};
use crate::kalman::{self, KalmanError, KalmanFilter, KalmanParams, KalmanState};
use crate::types::{BBox, Detection, Observation, Tracklet};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrackerError {
    #[error("frame {got} does not advance past frame {previous}")]
    NonMonotonicFrame { previous: u64, got: u64 },
    #[error("detection for frame {detection} passed to step for frame {frame}")]
    DetectionFrameMismatch { frame: u64, detection: u64 },
    #[error("track {track}: {source}")]
    Kalman { track: u64, source: KalmanError },
    #[error("detection {index} in frame {frame}: {source}")]
    Embedding { frame: u64, index: usize, source: AssocError },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerParams {
    /// Consecutive hits required to confirm a tentative track.
    pub n_init: u32,
    /// Frames without a match before a confirmed track is deleted.
    pub max_age: u32,
}

impl Default for TrackerParams {
    fn default() -> Self {
        TrackerParams { n_init: 3, max_age: 30 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackStatus {
    Tentative,
    Confirmed,
    /// Confirmed but currently unmatched; still takes part in association.
    Lost,
    Deleted,
}

#[derive(Debug, Clone)]
pub struct Track {
    pub id: u64,
    pub kalman: KalmanState,
    pub status: TrackStatus,
    /// Consecutive matched frames.
    pub hits: u32,
    pub time_since_update: u32,
    pub observations: Vec<Observation>,
    ever_confirmed: bool,
}

impl Track {
    pub fn is_active(&self) -> bool {
        self.status != TrackStatus::Deleted
    }

    pub fn was_confirmed(&self) -> bool {
        self.ever_confirmed
    }
}

/// What happened in one call to [`Tracker::step`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepOutcome {
    /// `(track id, detection index)` pairs.
    pub matches: Vec<(u64, usize)>,
    pub new_tracks: Vec<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub kalman: KalmanParams,
    pub assoc: AssocParams,
    pub tracker: TrackerParams,
}

/// One tracker per camera stream. Frames must be fed in strictly increasing order.
#[derive(Debug, Clone)]
pub struct Tracker {
    kf: KalmanFilter,
    assoc: AssocParams,
    params: TrackerParams,
    tracks: Vec<Track>,
    retired: Vec<Track>,
    bank: AppearanceBank,
    next_id: u64,
    last_frame: Option<u64>,
}

impl Tracker {
    pub fn new(config: TrackerConfig) -> Self {
        Tracker {
            kf: KalmanFilter::new(config.kalman),
            assoc: config.assoc,
            params: config.tracker,
            tracks: Vec::new(),
            retired: Vec::new(),
            bank: AppearanceBank::new(config.assoc.ema_alpha),
            next_id: 1,
            last_frame: None,
        }
    }

    /// Tracks that have not been deleted.
    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn appearance(&self, track: u64) -> Option<&[f64]> {
        self.bank.get(track)
    }

    pub fn last_frame(&self) -> Option<u64> {
        self.last_frame
    }

    /// Processes all detections of `frame`. Skipped frames are treated as
    /// frames without detections.
    pub fn step(&mut self, detections: &[Detection], frame: u64) -> Result<StepOutcome, TrackerError> {
        if let Some(previous) = self.last_frame {
            if frame <= previous {
                return Err(TrackerError::NonMonotonicFrame { previous, got: frame });
            }
        }
        if let Some(d) = detections.iter().find(|d| d.frame != frame) {
            return Err(TrackerError::DetectionFrameMismatch { frame, detection: d.frame });
        }
        let features = detections
            .iter()
            .enumerate()
            .map(|(index, d)| assoc::normalize(&d.embedding).map_err(|source| TrackerError::Embedding { frame, index, source }))
            .collect::<Result<Vec<_>, _>>()?;

        if let Some(previous) = self.last_frame {
            for _ in previous + 1..frame {
                self.predict_all();
                self.age_unmatched(&vec![true; self.tracks.len()]);
                self.retire_deleted();
            }
        }
        self.last_frame = Some(frame);

        let predicted = self.predict_all();
        let costs = self.cost_matrix(&predicted, detections, &features);
        let matching = assoc::hungarian(&costs, self.assoc.match_threshold);

        let mut outcome = StepOutcome::default();
        let mut unmatched = vec![true; self.tracks.len()];
        for &(row, col) in &matching.matches {
            let det = &detections[col];
            unmatched[row] = false;
            let track = &mut self.tracks[row];
            track.kalman = self
                .kf
                .update(&track.kalman, &det.bbox, det.confidence)
                .map_err(|source| TrackerError::Kalman { track: track.id, source })?;
            track.observations.push(Observation::from(det));
            track.hits += 1;
            track.time_since_update = 0;
            match track.status {
                TrackStatus::Tentative if track.hits >= self.params.n_init => {
                    track.status = TrackStatus::Confirmed;
                    track.ever_confirmed = true;
                }
                TrackStatus::Lost => track.status = TrackStatus::Confirmed,
                _ => {}
            }
            self.bank.ema_update(track.id, &features[col]);
            outcome.matches.push((track.id, col));
        }
        self.age_unmatched(&unmatched);

        for &col in &matching.unmatched_cols {
            let id = self.spawn(&detections[col], &features[col]);
            outcome.new_tracks.push(id);
        }
        self.retire_deleted();
        Ok(outcome)
    }

    fn predict_all(&mut self) -> Vec<Option<BBox>> {
        let mut boxes = Vec::with_capacity(self.tracks.len());
        for track in &mut self.tracks {
            track.kalman = self.kf.predict(&track.kalman);
            boxes.push(kalman::project(&track.kalman).ok());
        }
        boxes
    }

    fn cost_matrix(&self, predicted: &[Option<BBox>], detections: &[Detection], features: &[Vec<f64>]) -> CostMatrix {
        let (rows, cols) = (self.tracks.len(), detections.len());
        let appearance = CostMatrix::from_fn(rows, cols, |r, c| {
            Some(
                self.bank
                    .get(self.tracks[r].id)
                    .map_or(0.5, |e| assoc::cosine_cost(e, &features[c])),
            )
        });
        let motion = CostMatrix::from_fn(rows, cols, |r, c| {
            let overlap = Iou.overlap(&predicted[r]?, &detections[c].bbox);
            let gated = overlap == 0.0 && appearance.get(r, c).is_some_and(|a| a > self.assoc.appearance_gate);
            (!gated).then_some(1.0 - overlap)
        });
        assoc::fuse_costs(&motion, &appearance, self.assoc.lambda).expect("matrices built with equal shape")
    }

    fn age_unmatched(&mut self, unmatched: &[bool]) {
        for (track, &missed) in self.tracks.iter_mut().zip(unmatched) {
            if !missed {
                continue;
            }
            track.time_since_update += 1;
            track.hits = 0;
            track.status = match track.status {
                TrackStatus::Tentative => TrackStatus::Deleted,
                _ if track.time_since_update > self.params.max_age => TrackStatus::Deleted,
                TrackStatus::Confirmed | TrackStatus::Lost => TrackStatus::Lost,
                TrackStatus::Deleted => TrackStatus::Deleted,
            };
        }
    }

    fn spawn(&mut self, det: &Detection, feature: &[f64]) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        let confirmed = self.params.n_init <= 1;
        self.tracks.push(Track {
            id,
            kalman: self.kf.init(&det.bbox),
            status: if confirmed {
                TrackStatus::Confirmed
            } else {
                TrackStatus::Tentative
            },
            hits: 1,
            time_since_update: 0,
            observations: vec![Observation::from(det)],
            ever_confirmed: confirmed,
        });
        self.bank.ema_update(id, feature);
        id
    }

    fn retire_deleted(&mut self) {
        let (deleted, active): (Vec<Track>, Vec<Track>) = std::mem::take(&mut self.tracks)
            .into_iter()
            .partition(|t| t.status == TrackStatus::Deleted);
        self.tracks = active;
        for track in deleted {
            self.bank.remove(track.id);
            if track.ever_confirmed {
                self.retired.push(track);
            }
        }
    }

    /// Ends the stream: every track that was ever confirmed becomes a
    /// tracklet, ordered by id.
    pub fn finalize(self) -> Vec<Tracklet> {
        let mut tracks: Vec<Track> = self.retired.into_iter().chain(self.tracks).filter(|t| t.ever_confirmed).collect();
        tracks.sort_by_key(|t| t.id);
        tracks
            .into_iter()
            .map(|t| Tracklet::new(t.id, t.observations).expect("track observations are non-empty and frame-ordered"))
            .collect()
    }
}

/// Runs a fresh tracker over a frame-ordered detection list.
pub fn track_all(config: TrackerConfig, detections: &[Detection]) -> Result<Vec<Tracklet>, TrackerError> {
    let mut tracker = Tracker::new(config);
    for chunk in detections.chunk_by(|a, b| a.frame == b.frame) {
        tracker.step(chunk, chunk[0].frame)?;
    }
    Ok(tracker.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(frame: u64, bbox: BBox, emb: [f64; 2]) -> Detection {
        Detection {
            frame,
            bbox,
            confidence: 0.9,
            embedding: emb.to_vec(),
            tag_scores: [0.2; 5],
        }
    }

    #[test]
    fn cold_start_spawns_tentative_tracks() {
        let mut t = Tracker::new(TrackerConfig::default());
        let dets = vec![
            det(0, BBox::new(0.0, 0.0, 10.0, 10.0), [1.0, 0.0]),
            det(0, BBox::new(50.0, 0.0, 10.0, 10.0), [0.0, 1.0]),
        ];
        let out = t.step(&dets, 0).unwrap();
        assert_eq!(out.new_tracks, vec![1, 2]);
        assert!(t.tracks().iter().all(|tr| tr.status == TrackStatus::Tentative));
    }

    #[test]
    fn perfect_continuation_resets_age() {
        let mut t = Tracker::new(TrackerConfig::default());
        let b = BBox::new(10.0, 10.0, 20.0, 20.0);
        for f in 0..3 {
            t.step(&[det(f, b, [1.0, 0.0])], f).unwrap();
        }
        assert_eq!(t.tracks()[0].status, TrackStatus::Confirmed);
        t.step(&[], 3).unwrap();
        assert_eq!(t.tracks()[0].time_since_update, 1);
        assert_eq!(t.tracks()[0].status, TrackStatus::Lost);
        let out = t.step(&[det(4, b, [1.0, 0.0])], 4).unwrap();
        assert_eq!(out.matches, vec![(1, 0)]);
        assert_eq!(t.tracks()[0].time_since_update, 0);
        assert_eq!(t.tracks()[0].status, TrackStatus::Confirmed);
    }

    #[test]
    fn rejects_non_advancing_frames() {
        let mut t = Tracker::new(TrackerConfig::default());
        t.step(&[], 5).unwrap();
        assert_eq!(t.step(&[], 5), Err(TrackerError::NonMonotonicFrame { previous: 5, got: 5 }));
        let d = det(9, BBox::new(0.0, 0.0, 1.0, 1.0), [1.0, 0.0]);
        assert!(matches!(t.step(&[d], 8), Err(TrackerError::DetectionFrameMismatch { .. })));
    }

    #[test]
    fn zero_embedding_is_rejected() {
        let mut t = Tracker::new(TrackerConfig::default());
        let d = det(0, BBox::new(0.0, 0.0, 1.0, 1.0), [0.0, 0.0]);
        assert!(matches!(t.step(&[d], 0), Err(TrackerError::Embedding { index: 0, .. })));
    }

    #[test]
    fn lost_track_deleted_after_max_age() {
        let config = TrackerConfig {
            tracker: TrackerParams { n_init: 1, max_age: 4 },
            ..Default::default()
        };
        let mut t = Tracker::new(config);
        t.step(&[det(0, BBox::new(0.0, 0.0, 10.0, 10.0), [1.0, 0.0])], 0).unwrap();
        for f in 1..=4 {
            t.step(&[], f).unwrap();
            assert_eq!(t.tracks()[0].time_since_update, f as u32);
        }
        t.step(&[], 5).unwrap();
        assert!(t.tracks().is_empty());
        assert_eq!(t.finalize().len(), 1);
    }

    #[test]
    fn skipped_frames_age_tracks() {
        let config = TrackerConfig {
            tracker: TrackerParams { n_init: 1, max_age: 30 },
            ..Default::default()
        };
        let mut t = Tracker::new(config);
        t.step(&[det(0, BBox::new(0.0, 0.0, 10.0, 10.0), [1.0, 0.0])], 0).unwrap();
        t.step(&[], 7).unwrap();
        assert_eq!(t.tracks()[0].time_since_update, 7);
    }

    #[test]
    fn finalize_drops_tentative_and_keeps_confirmed() {
        let mut t = Tracker::new(TrackerConfig::default());
        let a = BBox::new(0.0, 0.0, 20.0, 20.0);
        let b = BBox::new(200.0, 200.0, 20.0, 20.0);
        t.step(&[det(0, a, [1.0, 0.0]), det(0, b, [0.0, 1.0])], 0).unwrap();
        t.step(&[det(1, a, [1.0, 0.0]), det(1, b, [0.0, 1.0])], 1).unwrap();
        t.step(&[det(2, a, [1.0, 0.0])], 2).unwrap();
        for f in 3..40 {
            t.step(&[], f).unwrap();
        }
        let tracklets = t.finalize();
        assert_eq!(tracklets.len(), 1);
        assert_eq!((tracklets[0].start_frame(), tracklets[0].end_frame()), (0, 2));
        assert!(tracklets[0].class_conf_sums().iter().all(|s| (s - 0.6).abs() < 1e-12));
    }
}
