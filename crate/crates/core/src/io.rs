//! JSON-lines wire formats.
//!
//! * detections: one detection per line, frames non-decreasing
//! * tracklets: one tracklet per line
//! * ground truth: one target box per line
//!
//! Blank lines and lines starting with `#` are ignored by every reader.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{GroundTruth, GtObject, MetricsError};
use crate::types::{
    validate_tag_scores, BBox, Detection, EarTagClass, Identity, Observation, TagScores, Tracklet, TrackletError, ValidationError,
};

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: {source}")]
    Invalid {
        line: usize,
        #[source]
        source: ValidationError,
    },
    #[error("line {line}: frame {frame} precedes frame {previous}")]
    FrameOrder { line: usize, previous: u64, frame: u64 },
    #[error("line {line}: {message}")]
    Contract { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ParseError {
    pub fn line(&self) -> Option<usize> {
        match self {
            ParseError::Syntax { line, .. }
            | ParseError::Invalid { line, .. }
            | ParseError::FrameOrder { line, .. }
            | ParseError::Contract { line, .. } => Some(*line),
            ParseError::Io(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub frame: u64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub conf: f64,
    pub emb: Vec<f64>,
    pub tags: TagScores,
}

impl From<&Detection> for DetectionRecord {
    fn from(d: &Detection) -> Self {
        DetectionRecord {
            frame: d.frame,
            bbox: d.bbox.to_array(),
            conf: d.confidence,
            emb: d.embedding.clone(),
            tags: d.tag_scores,
        }
    }
}

impl From<DetectionRecord> for Detection {
    fn from(r: DetectionRecord) -> Self {
        Detection {
            frame: r.frame,
            bbox: BBox::from(r.bbox),
            confidence: r.conf,
            embedding: r.emb,
            tag_scores: r.tags,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationRecord {
    pub frame: u64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub tags: TagScores,
    /// Detector confidence; older files without it read as 1.
    #[serde(default = "unit_conf")]
    pub conf: f64,
}

fn unit_conf() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackletRecord {
    pub tracklet_id: u64,
    pub identity: Option<Identity>,
    pub start: u64,
    pub end: u64,
    pub obs: Vec<ObservationRecord>,
}

impl TrackletRecord {
    pub fn new(t: &Tracklet, identity: Option<Identity>) -> Self {
        TrackletRecord {
            tracklet_id: t.id(),
            identity,
            start: t.start_frame(),
            end: t.end_frame(),
            obs: t
                .observations()
                .iter()
                .map(|o| ObservationRecord {
                    frame: o.frame,
                    bbox: o.bbox.to_array(),
                    tags: o.tag_scores,
                    conf: o.confidence,
                })
                .collect(),
        }
    }

    pub fn into_tracklet(self) -> Result<(Tracklet, Option<Identity>), String> {
        let observations: Vec<Observation> = self
            .obs
            .into_iter()
            .map(|o| Observation {
                frame: o.frame,
                bbox: BBox::from(o.bbox),
                tag_scores: o.tags,
                confidence: o.conf,
            })
            .collect();
        for o in &observations {
            o.bbox.validate().map_err(|e| e.to_string())?;
            validate_tag_scores(&o.tag_scores).map_err(|e| e.to_string())?;
            if !(0.0..=1.0).contains(&o.confidence) {
                return Err(format!("observation confidence {} outside [0, 1]", o.confidence));
            }
        }
        let t = Tracklet::new(self.tracklet_id, observations).map_err(|e: TrackletError| e.to_string())?;
        if t.start_frame() != self.start || t.end_frame() != self.end {
            return Err(format!(
                "declared span [{}, {}] differs from observed span [{}, {}]",
                self.start,
                self.end,
                t.start_frame(),
                t.end_frame()
            ));
        }
        Ok((t, self.identity))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtRecord {
    pub frame: u64,
    pub gt_id: u64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub identity: Option<Identity>,
}

/// Yields `(line number, content)` for every non-comment line.
fn data_lines<R: BufRead>(reader: R) -> impl Iterator<Item = Result<(usize, String), ParseError>> {
    reader.lines().enumerate().filter_map(|(i, line)| match line {
        Err(e) => Some(Err(ParseError::Io(e))),
        Ok(l) => {
            let trimmed = l.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                None
            } else {
                Some(Ok((i + 1, l)))
            }
        }
    })
}

fn parse_json<T: for<'de> Deserialize<'de>>(line: usize, text: &str) -> Result<T, ParseError> {
    serde_json::from_str(text).map_err(|e| ParseError::Syntax {
        line,
        message: e.to_string(),
    })
}

/// Streaming detection reader. Each item is a validated detection.
pub struct DetectionReader<R> {
    lines: Box<dyn Iterator<Item = Result<(usize, String), ParseError>>>,
    embedding_dim: usize,
    previous: Option<u64>,
    _reader: std::marker::PhantomData<R>,
}

impl<R: BufRead + 'static> DetectionReader<R> {
    pub fn new(reader: R, embedding_dim: usize) -> Self {
        DetectionReader {
            lines: Box::new(data_lines(reader)),
            embedding_dim,
            previous: None,
            _reader: std::marker::PhantomData,
        }
    }
}

impl<R> Iterator for DetectionReader<R> {
    type Item = Result<Detection, ParseError>;

    fn next(&mut self) -> Option<Self::Item> {
        let (line, text) = match self.lines.next()? {
            Ok(v) => v,
            Err(e) => return Some(Err(e)),
        };
        let record: DetectionRecord = match parse_json(line, &text) {
            Ok(r) => r,
            Err(e) => return Some(Err(e)),
        };
        let det = Detection::from(record);
        if let Err(source) = crate::types::validate_detection(&det, self.embedding_dim) {
            return Some(Err(ParseError::Invalid { line, source }));
        }
        if let Some(previous) = self.previous {
            if det.frame < previous {
                return Some(Err(ParseError::FrameOrder {
                    line,
                    previous,
                    frame: det.frame,
                }));
            }
        }
        self.previous = Some(det.frame);
        Some(Ok(det))
    }
}

/// Groups a detection stream into frames without buffering more than one frame.
pub struct FrameGrouper<I: Iterator<Item = Result<Detection, ParseError>>> {
    inner: std::iter::Peekable<I>,
}

impl<I: Iterator<Item = Result<Detection, ParseError>>> FrameGrouper<I> {
    pub fn new(inner: I) -> Self {
        FrameGrouper { inner: inner.peekable() }
    }
}

impl<I: Iterator<Item = Result<Detection, ParseError>>> Iterator for FrameGrouper<I> {
    type Item = Result<(u64, Vec<Detection>), ParseError>;

    fn next(&mut self) -> Option<Self::Item> {
        let first = match self.inner.next()? {
            Ok(d) => d,
            Err(e) => return Some(Err(e)),
        };
        let frame = first.frame;
        let mut batch = vec![first];
        while let Some(Ok(d)) = self.inner.peek() {
            if d.frame != frame {
                break;
            }
            batch.push(self.inner.next().unwrap().unwrap());
        }
        Some(Ok((frame, batch)))
    }
}

pub fn write_detection<W: Write>(out: &mut W, d: &Detection) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, &DetectionRecord::from(d))?;
    out.write_all(b"\n")
}

pub fn read_detections<R: BufRead + 'static>(reader: R, embedding_dim: usize) -> Result<Vec<Detection>, ParseError> {
    DetectionReader::new(reader, embedding_dim).collect()
}

pub fn write_tracklet<W: Write>(out: &mut W, t: &Tracklet, identity: Option<Identity>) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, &TrackletRecord::new(t, identity))?;
    out.write_all(b"\n")
}

pub fn write_tracklets<W: Write>(out: &mut W, tracklets: &[Tracklet], identities: &[Option<Identity>]) -> std::io::Result<()> {
    for (k, t) in tracklets.iter().enumerate() {
        write_tracklet(out, t, identities.get(k).copied().flatten())?;
    }
    Ok(())
}

/// Reads a tracklets file. Tracklet ids must be unique.
pub fn read_tracklets<R: BufRead>(reader: R) -> Result<(Vec<Tracklet>, Vec<Option<Identity>>), ParseError> {
    let mut tracklets = Vec::new();
    let mut identities = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for item in data_lines(reader) {
        let (line, text) = item?;
        let record: TrackletRecord = parse_json(line, &text)?;
        let (t, identity) = record.into_tracklet().map_err(|message| ParseError::Contract { line, message })?;
        if !seen.insert(t.id()) {
            return Err(ParseError::Contract {
                line,
                message: format!("duplicate tracklet id {}", t.id()),
            });
        }
        tracklets.push(t);
        identities.push(identity);
    }
    Ok((tracklets, identities))
}

pub fn write_gt_frame<W: Write>(out: &mut W, frame: u64, objects: &[GtObject]) -> std::io::Result<()> {
    for o in objects {
        let rec = GtRecord {
            frame,
            gt_id: o.id,
            bbox: o.bbox.to_array(),
            identity: o.identity,
        };
        serde_json::to_writer(&mut *out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_ground_truth<W: Write>(out: &mut W, gt: &GroundTruth) -> std::io::Result<()> {
    for (frame, objects) in gt.frames() {
        write_gt_frame(out, frame, objects)?;
    }
    Ok(())
}

pub fn read_ground_truth<R: BufRead>(reader: R) -> Result<GroundTruth, ParseError> {
    let mut gt = GroundTruth::new();
    for item in data_lines(reader) {
        let (line, text) = item?;
        let rec: GtRecord = parse_json(line, &text)?;
        let bbox = BBox::from(rec.bbox);
        bbox.validate().map_err(|source| ParseError::Invalid { line, source })?;
        gt.push(
            rec.frame,
            GtObject {
                id: rec.gt_id,
                bbox,
                identity: rec.identity,
            },
        )
        .map_err(|e: MetricsError| ParseError::Contract {
            line,
            message: e.to_string(),
        })?;
    }
    Ok(gt)
}

/// Identity names accepted in tracklet files.
pub fn identity_names() -> Vec<&'static str> {
    EarTagClass::IDENTITY_BEARING.iter().map(|c| c.name()).collect()
}
