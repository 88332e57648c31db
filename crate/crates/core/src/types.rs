//! Shared domain types: boxes, detections, ear-tag classes and tracklets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of ear-tag classes emitted by the classifier.
pub const NUM_TAG_CLASSES: usize = 5;

/// Tolerance on `sum(tag_scores) == 1`.
pub const TAG_SUM_TOLERANCE: f64 = 1e-6;

/// Default embedding dimension of the appearance vectors.
pub const DEFAULT_EMBEDDING_DIM: usize = 128;

pub type TagScores = [f64; NUM_TAG_CLASSES];

/// Axis-aligned box in top-left + width/height form, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn diagonal(&self) -> f64 {
        self.w.hypot(self.h)
    }

    /// Smallest box containing both `self` and `other`.
    pub fn union(&self, other: &BBox) -> BBox {
        let x = self.x.min(other.x);
        let y = self.y.min(other.y);
        BBox::new(x, y, self.right().max(other.right()) - x, self.bottom().max(other.bottom()) - y)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(self.x + dx, self.y + dy, self.w, self.h)
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if ![self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) {
            return Err(ValidationError::NonFiniteField("box"));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(ValidationError::NegativeDimension { w: self.w, h: self.h });
        }
        Ok(())
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

impl From<[f64; 4]> for BBox {
    fn from(a: [f64; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// The five classifier outputs. The first three carry identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarTagClass {
    BrownCheckered,
    RedBarred,
    BlackAllFilled,
    NoRead,
    NoEarTag,
}

impl EarTagClass {
    pub const ALL: [EarTagClass; NUM_TAG_CLASSES] = [
        EarTagClass::BrownCheckered,
        EarTagClass::RedBarred,
        EarTagClass::BlackAllFilled,
        EarTagClass::NoRead,
        EarTagClass::NoEarTag,
    ];

    pub const IDENTITY_BEARING: [EarTagClass; 3] = [EarTagClass::BrownCheckered, EarTagClass::RedBarred, EarTagClass::BlackAllFilled];

    /// Position of this class in a tag-score vector.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<EarTagClass> {
        Self::ALL.get(i).copied()
    }

    pub fn is_identity_bearing(self) -> bool {
        self.index() < Self::IDENTITY_BEARING.len()
    }

    pub fn name(self) -> &'static str {
        match self {
            EarTagClass::BrownCheckered => "brown_checkered",
            EarTagClass::RedBarred => "red_barred",
            EarTagClass::BlackAllFilled => "black_all_filled",
            EarTagClass::NoRead => "no_read",
            EarTagClass::NoEarTag => "no_ear_tag",
        }
    }
}

impl fmt::Display for EarTagClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EarTagClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EarTagClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown ear-tag class `{s}`"))
    }
}

/// An animal identity, named by the identity-bearing ear tag it wears.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "EarTagClass", into = "EarTagClass")]
pub struct Identity(EarTagClass);

impl Identity {
    pub fn new(label: EarTagClass) -> Option<Identity> {
        label.is_identity_bearing().then_some(Identity(label))
    }

    pub fn label(self) -> EarTagClass {
        self.0
    }

    /// The first `n` identities (`n` is clamped to the number of identity-bearing classes).
    pub fn cage(n: usize) -> Vec<Identity> {
        EarTagClass::IDENTITY_BEARING.iter().take(n).map(|&c| Identity(c)).collect()
    }
}

impl TryFrom<EarTagClass> for Identity {
    type Error = String;

    fn try_from(c: EarTagClass) -> Result<Self, Self::Error> {
        Identity::new(c).ok_or_else(|| format!("`{c}` does not name an identity"))
    }
}

impl From<Identity> for EarTagClass {
    fn from(i: Identity) -> Self {
        i.0
    }
}

impl fmt::Display for Identity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValidationError {
    #[error("non-finite value in field `{0}`")]
    NonFiniteField(&'static str),
    #[error("box must have positive width and height (w={w}, h={h})")]
    NegativeDimension { w: f64, h: f64 },
    #[error("confidence {0} outside [0, 1]")]
    ConfidenceOutOfRange(f64),
    #[error("tag score {value} at index {index} is negative")]
    NegativeScore { index: usize, value: f64 },
    #[error("tag scores sum to {0}, expected 1")]
    ScoreSumMismatch(f64),
    #[error("embedding has dimension {found}, stream expects {expected}")]
    EmbeddingDimMismatch { expected: usize, found: usize },
}

/// One detector output for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub frame: u64,
    pub bbox: BBox,
    pub confidence: f64,
    pub embedding: Vec<f64>,
    pub tag_scores: TagScores,
}

impl Detection {
    pub fn argmax_tag(&self) -> EarTagClass {
        argmax_class(&self.tag_scores)
    }
}

pub fn argmax_class(scores: &TagScores) -> EarTagClass {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    EarTagClass::ALL[best]
}

/// Checks every invariant of a detection against a stream embedding dimension.
pub fn validate_detection(d: &Detection, embedding_dim: usize) -> Result<(), ValidationError> {
    d.bbox.validate()?;
    if !d.confidence.is_finite() {
        return Err(ValidationError::NonFiniteField("conf"));
    }
    if !(0.0..=1.0).contains(&d.confidence) {
        return Err(ValidationError::ConfidenceOutOfRange(d.confidence));
    }
    if d.embedding.iter().any(|v| !v.is_finite()) {
        return Err(ValidationError::NonFiniteField("emb"));
    }
    if d.embedding.len() != embedding_dim {
        return Err(ValidationError::EmbeddingDimMismatch {
            expected: embedding_dim,
            found: d.embedding.len(),
        });
    }
    validate_tag_scores(&d.tag_scores)
}

pub fn validate_tag_scores(scores: &TagScores) -> Result<(), ValidationError> {
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(ValidationError::NonFiniteField("tags"));
    }
    if let Some((index, &value)) = scores.iter().enumerate().find(|(_, v)| **v < 0.0) {
        return Err(ValidationError::NegativeScore { index, value });
    }
    let sum: f64 = scores.iter().sum();
    if (sum - 1.0).abs() > TAG_SUM_TOLERANCE {
        return Err(ValidationError::ScoreSumMismatch(sum));
    }
    Ok(())
}

/// A matched detection as stored on a track.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub frame: u64,
    pub bbox: BBox,
    pub tag_scores: TagScores,
    pub confidence: f64,
}

impl From<&Detection> for Observation {
    fn from(d: &Detection) -> Self {
        Observation {
            frame: d.frame,
            bbox: d.bbox,
            tag_scores: d.tag_scores,
            confidence: d.confidence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrackletError {
    #[error("tracklet has no observations")]
    Empty,
    #[error("observation frames must be strictly increasing (frame {0} follows {1})")]
    NonIncreasingFrames(u64, u64),
}

/// A temporally ordered run of observations attributed to one hypothesis.
///
/// `class_conf_sums` is maintained alongside the observations; the only way to
/// build or grow a tracklet keeps the two consistent.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    id: u64,
    observations: Vec<Observation>,
    class_conf_sums: TagScores,
}

impl Tracklet {
    pub fn new(id: u64, observations: Vec<Observation>) -> Result<Tracklet, TrackletError> {
        if observations.is_empty() {
            return Err(TrackletError::Empty);
        }
        for pair in observations.windows(2) {
            if pair[1].frame <= pair[0].frame {
                return Err(TrackletError::NonIncreasingFrames(pair[1].frame, pair[0].frame));
            }
        }
        let class_conf_sums = sum_tag_scores(&observations);
        Ok(Tracklet {
            id,
            observations,
            class_conf_sums,
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn with_id(mut self, id: u64) -> Tracklet {
        self.id = id;
        self
    }

    pub fn start_frame(&self) -> u64 {
        self.observations[0].frame
    }

    pub fn end_frame(&self) -> u64 {
        self.observations[self.observations.len() - 1].frame
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn first(&self) -> &Observation {
        &self.observations[0]
    }

    pub fn last(&self) -> &Observation {
        &self.observations[self.observations.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn class_conf_sums(&self) -> &TagScores {
        &self.class_conf_sums
    }

    /// Whether the inclusive frame intervals of the two tracklets intersect.
    pub fn overlaps(&self, other: &Tracklet) -> bool {
        self.start_frame() <= other.end_frame() && other.start_frame() <= self.end_frame()
    }

    pub fn contains_frame(&self, frame: u64) -> bool {
        self.start_frame() <= frame && frame <= self.end_frame()
    }

    pub fn observation_at(&self, frame: u64) -> Option<&Observation> {
        self.observations
            .binary_search_by_key(&frame, |o| o.frame)
            .ok()
            .map(|i| &self.observations[i])
    }

    pub fn mean_confidence(&self) -> f64 {
        self.observations.iter().map(|o| o.confidence).sum::<f64>() / self.len() as f64
    }

    /// Appends `other` after `self`. Frames must stay strictly increasing.
    pub fn concat(mut self, other: &Tracklet) -> Result<Tracklet, TrackletError> {
        if other.start_frame() <= self.end_frame() {
            return Err(TrackletError::NonIncreasingFrames(other.start_frame(), self.end_frame()));
        }
        self.observations.extend_from_slice(&other.observations);
        for (acc, v) in self.class_conf_sums.iter_mut().zip(other.class_conf_sums) {
            *acc += v;
        }
        Ok(self)
    }
}

fn sum_tag_scores(observations: &[Observation]) -> TagScores {
    let mut sums = [0.0; NUM_TAG_CLASSES];
    for o in observations {
        for (acc, v) in sums.iter_mut().zip(o.tag_scores) {
            *acc += v;
        }
    }
    sums
}
