//! CLEAR-MOT (MOTA, ID switches) and identity (IDF1, ID accuracy) metrics.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assoc::{solve_assignment, CostMatrix};
use crate::geometry::iou;
use crate::types::{BBox, Identity, Tracklet};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("hypothesis frames [{hyp_first}, {hyp_last}] fall outside ground-truth frames [{gt_first}, {gt_last}]")]
    FrameRangeMismatch {
        gt_first: u64,
        gt_last: u64,
        hyp_first: u64,
        hyp_last: u64,
    },
    #[error("ground truth contains no objects")]
    EmptyGroundTruth,
    #[error("ground truth frame {frame} lists target {id} more than once")]
    DuplicateTarget { frame: u64, id: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtObject {
    pub id: u64,
    pub bbox: BBox,
    pub identity: Option<Identity>,
}

/// Per-frame ground-truth boxes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    frames: BTreeMap<u64, Vec<GtObject>>,
}

impl GroundTruth {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, frame: u64, object: GtObject) -> Result<(), MetricsError> {
        let entry = self.frames.entry(frame).or_default();
        if entry.iter().any(|o| o.id == object.id) {
            return Err(MetricsError::DuplicateTarget { frame, id: object.id });
        }
        entry.push(object);
        Ok(())
    }

    /// Registers a frame that has no objects.
    pub fn add_empty_frame(&mut self, frame: u64) {
        self.frames.entry(frame).or_default();
    }

    pub fn frames(&self) -> impl Iterator<Item = (u64, &[GtObject])> {
        self.frames.iter().map(|(f, v)| (*f, v.as_slice()))
    }

    pub fn frame(&self, frame: u64) -> &[GtObject] {
        self.frames.get(&frame).map_or(&[], Vec::as_slice)
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn first_frame(&self) -> Option<u64> {
        self.frames.keys().next().copied()
    }

    pub fn last_frame(&self) -> Option<u64> {
        self.frames.keys().next_back().copied()
    }

    pub fn object_count(&self) -> usize {
        self.frames.values().map(Vec::len).sum()
    }
}

/// Trajectory label of a hypothesis box: the assigned identity when there is
/// one, otherwise the tracklet it came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HypothesisId {
    Identity(Identity),
    Tracklet(u64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HypObject {
    pub id: HypothesisId,
    pub bbox: BBox,
    pub identity: Option<Identity>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Hypotheses {
    frames: BTreeMap<u64, Vec<HypObject>>,
}

impl Hypotheses {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, frame: u64, object: HypObject) {
        self.frames.entry(frame).or_default().push(object);
    }

    /// Flattens tracklets into per-frame boxes. `identities` is aligned with
    /// `tracklets`; pass an empty slice for unlabelled tracklets.
    pub fn from_tracklets(tracklets: &[Tracklet], identities: &[Option<Identity>]) -> Self {
        let mut h = Hypotheses::new();
        for (k, t) in tracklets.iter().enumerate() {
            let identity = identities.get(k).copied().flatten();
            let id = identity.map_or(HypothesisId::Tracklet(t.id()), HypothesisId::Identity);
            for o in t.observations() {
                h.push(
                    o.frame,
                    HypObject {
                        id,
                        bbox: o.bbox,
                        identity,
                    },
                );
            }
        }
        h
    }

    pub fn frame(&self, frame: u64) -> &[HypObject] {
        self.frames.get(&frame).map_or(&[], Vec::as_slice)
    }

    pub fn frames(&self) -> impl Iterator<Item = (u64, &[HypObject])> {
        self.frames.iter().map(|(f, v)| (*f, v.as_slice()))
    }

    pub fn object_count(&self) -> usize {
        self.frames.values().map(Vec::len).sum()
    }
}

/// CLEAR correspondence for one frame: `(gt index, hyp index)` pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameMatch {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_gt: Vec<usize>,
    pub unmatched_hyp: Vec<usize>,
}

/// Matches one frame. Correspondences from `previous` (gt id -> hypothesis
/// id of its most recent match) are kept while their IoU stays above the
/// threshold; the remaining boxes are paired by maximum total IoU.
pub fn match_frame(gt: &[GtObject], hyp: &[HypObject], previous: &BTreeMap<u64, HypothesisId>, iou_threshold: f64) -> FrameMatch {
    let mut gt_used = vec![false; gt.len()];
    let mut hyp_used = vec![false; hyp.len()];
    let mut pairs = Vec::new();

    for (g, obj) in gt.iter().enumerate() {
        let Some(prev) = previous.get(&obj.id) else { continue };
        let kept = hyp
            .iter()
            .enumerate()
            .find(|(h, o)| !hyp_used[*h] && o.id == *prev && iou(&obj.bbox, &o.bbox) >= iou_threshold);
        if let Some((h, _)) = kept {
            gt_used[g] = true;
            hyp_used[h] = true;
            pairs.push((g, h));
        }
    }

    let free_gt: Vec<usize> = (0..gt.len()).filter(|&g| !gt_used[g]).collect();
    let free_hyp: Vec<usize> = (0..hyp.len()).filter(|&h| !hyp_used[h]).collect();
    let costs = CostMatrix::from_fn(free_gt.len(), free_hyp.len(), |r, c| {
        let v = iou(&gt[free_gt[r]].bbox, &hyp[free_hyp[c]].bbox);
        (v >= iou_threshold).then_some(1.0 - v)
    });
    for (r, c) in solve_assignment(&costs) {
        let (g, h) = (free_gt[r], free_hyp[c]);
        gt_used[g] = true;
        hyp_used[h] = true;
        pairs.push((g, h));
    }
    pairs.sort_unstable();
    FrameMatch {
        pairs,
        unmatched_gt: (0..gt.len()).filter(|&g| !gt_used[g]).collect(),
        unmatched_hyp: (0..hyp.len()).filter(|&h| !hyp_used[h]).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mota: f64,
    pub idf1: f64,
    pub id_switches: u64,
    pub switches_per_minute: f64,
    pub id_accuracy: f64,
    pub false_positives: u64,
    pub false_negatives: u64,
    pub gt_objects: u64,
    pub matches: u64,
    pub id_correct: u64,
    pub idtp: u64,
    pub idfp: u64,
    pub idfn: u64,
    pub frames: u64,
    pub minutes: f64,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mota = {:.6}", self.mota)?;
        writeln!(f, "idf1 = {:.6}", self.idf1)?;
        writeln!(f, "id_switches = {}", self.id_switches)?;
        writeln!(f, "switches_per_minute = {:.6}", self.switches_per_minute)?;
        writeln!(f, "id_accuracy = {:.6}", self.id_accuracy)?;
        writeln!(f, "false_positives = {}", self.false_positives)?;
        writeln!(f, "false_negatives = {}", self.false_negatives)?;
        writeln!(f, "gt_objects = {}", self.gt_objects)?;
        writeln!(f, "matches = {}", self.matches)?;
        writeln!(f, "id_correct = {}", self.id_correct)?;
        writeln!(f, "idtp = {}", self.idtp)?;
        writeln!(f, "idfp = {}", self.idfp)?;
        writeln!(f, "idfn = {}", self.idfn)?;
        writeln!(f, "frames = {}", self.frames)?;
        write!(f, "minutes = {:.6}", self.minutes)
    }
}

fn frame_range<'a>(frames: impl Iterator<Item = (u64, usize)> + 'a) -> Option<(u64, u64)> {
    frames.filter(|&(_, n)| n > 0).fold(None, |acc, (f, _)| match acc {
        None => Some((f, f)),
        Some((lo, hi)) => Some((lo.min(f), hi.max(f))),
    })
}

pub fn evaluate(gt: &GroundTruth, hyps: &Hypotheses, minutes: f64, iou_threshold: f64) -> Result<EvalReport, MetricsError> {
    let gt_objects = gt.object_count() as u64;
    if gt_objects == 0 {
        return Err(MetricsError::EmptyGroundTruth);
    }
    let (gt_first, gt_last) = (gt.first_frame().unwrap_or(0), gt.last_frame().unwrap_or(0));
    if let Some((hyp_first, hyp_last)) = frame_range(hyps.frames().map(|(f, v)| (f, v.len()))) {
        if hyp_first < gt_first || hyp_last > gt_last {
            return Err(MetricsError::FrameRangeMismatch {
                gt_first,
                gt_last,
                hyp_first,
                hyp_last,
            });
        }
    }

    let mut last_match: BTreeMap<u64, HypothesisId> = BTreeMap::new();
    let mut pair_overlap: BTreeMap<(u64, HypothesisId), u64> = BTreeMap::new();
    let (mut fp, mut fn_, mut idsw, mut matches, mut id_correct) = (0u64, 0u64, 0u64, 0u64, 0u64);

    let mut all_frames: Vec<u64> = gt.frames().map(|(f, _)| f).chain(hyps.frames().map(|(f, _)| f)).collect();
    all_frames.sort_unstable();
    all_frames.dedup();
    for frame in all_frames {
        let (gt_objs, hyp_objs) = (gt.frame(frame), hyps.frame(frame));
        let m = match_frame(gt_objs, hyp_objs, &last_match, iou_threshold);
        fp += m.unmatched_hyp.len() as u64;
        fn_ += m.unmatched_gt.len() as u64;
        for &(g, h) in &m.pairs {
            let (go, ho) = (&gt_objs[g], &hyp_objs[h]);
            matches += 1;
            if go.identity == ho.identity {
                id_correct += 1;
            }
            if let Some(prev) = last_match.insert(go.id, ho.id) {
                if prev != ho.id {
                    idsw += 1;
                }
            }
        }
        for go in gt_objs {
            for ho in hyp_objs {
                if iou(&go.bbox, &ho.bbox) >= iou_threshold {
                    *pair_overlap.entry((go.id, ho.id)).or_default() += 1;
                }
            }
        }
    }

    let idtp = best_identity_overlap(&pair_overlap);
    let hyp_objects = hyps.object_count() as u64;
    let idfn = gt_objects - idtp;
    let idfp = hyp_objects - idtp;
    let idf1_denominator = 2 * idtp + idfp + idfn;
    Ok(EvalReport {
        mota: 1.0 - (fn_ + fp + idsw) as f64 / gt_objects as f64,
        idf1: if idf1_denominator == 0 {
            0.0
        } else {
            2.0 * idtp as f64 / idf1_denominator as f64
        },
        id_switches: idsw,
        switches_per_minute: if minutes > 0.0 { idsw as f64 / minutes } else { 0.0 },
        id_accuracy: if matches == 0 { 0.0 } else { id_correct as f64 / matches as f64 },
        false_positives: fp,
        false_negatives: fn_,
        gt_objects,
        matches,
        id_correct,
        idtp,
        idfp,
        idfn,
        frames: gt.frame_count() as u64,
        minutes,
    })
}

/// Maximum total co-occurrence over one-to-one gt/hypothesis trajectory pairings.
fn best_identity_overlap(pair_overlap: &BTreeMap<(u64, HypothesisId), u64>) -> u64 {
    let mut gt_ids: Vec<u64> = pair_overlap.keys().map(|k| k.0).collect();
    let mut hyp_ids: Vec<HypothesisId> = pair_overlap.keys().map(|k| k.1).collect();
    gt_ids.sort_unstable();
    gt_ids.dedup();
    hyp_ids.sort_unstable();
    hyp_ids.dedup();
    // pairs that never overlap cost 0 rather than being gated: gating would
    // make the solver prefer more pairs over more overlap
    let costs = CostMatrix::from_fn(gt_ids.len(), hyp_ids.len(), |r, c| {
        Some(-(pair_overlap.get(&(gt_ids[r], hyp_ids[c])).copied().unwrap_or(0) as f64))
    });
    solve_assignment(&costs)
        .into_iter()
        .filter_map(|(r, c)| pair_overlap.get(&(gt_ids[r], hyp_ids[c])))
        .sum()
}
