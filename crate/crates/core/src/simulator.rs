//! Synthetic cage scenes: ground-truth trajectories plus degraded detector
//! and classifier output.
//!
//! Mice follow a bounded random walk with speed persistence and reflect off
//! the cage walls. Each frame the detector may miss a mouse, jitter its box,
//! or merge two overlapping mice into one union box. Tag scores are sampled
//! through a confusion matrix; with probability `no_read_rate` the tag is
//! treated as illegible and the no-read row is used instead. Embeddings are
//! per-mouse anchors on the unit sphere with Gaussian perturbation.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::iou;
use crate::metrics::{GroundTruth, GtObject};
use crate::types::{BBox, Detection, EarTagClass, Identity, TagScores, DEFAULT_EMBEDDING_DIM, NUM_TAG_CLASSES};

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid scene config: {0}")]
pub struct InvalidConfig(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    pub n_mice: usize,
    pub fps: f64,
    pub duration_s: f64,
    pub cage_width: f64,
    pub cage_height: f64,
    /// Body length and width; box extents follow the heading.
    pub mouse_length: f64,
    pub mouse_width: f64,
    pub embedding_dim: usize,
    pub seed: u64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            n_mice: 3,
            fps: 30.0,
            duration_s: 60.0,
            cage_width: 640.0,
            cage_height: 480.0,
            mouse_length: 64.0,
            mouse_width: 32.0,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionParams {
    /// Pixels per frame.
    pub speed_mean: f64,
    pub speed_std: f64,
    /// Radians per frame.
    pub turn_std: f64,
    /// AR(1) coefficient of the speed process.
    pub persistence: f64,
}

impl Default for MotionParams {
    fn default() -> Self {
        MotionParams {
            speed_mean: 3.0,
            speed_std: 1.5,
            turn_std: 0.15,
            persistence: 0.95,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorParams {
    pub miss_rate: f64,
    pub box_jitter_std: f64,
    pub conf_mean: f64,
    pub conf_std: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        DetectorParams {
            miss_rate: 0.05,
            box_jitter_std: 1.5,
            conf_mean: 0.85,
            conf_std: 0.08,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcclusionParams {
    pub enabled: bool,
    /// Two mice whose boxes overlap by more than this IoU produce one detection.
    pub iou_threshold: f64,
    /// Confidence multiplier for merged detections.
    pub merged_conf_scale: f64,
}

impl Default for OcclusionParams {
    fn default() -> Self {
        OcclusionParams {
            enabled: true,
            iou_threshold: 0.3,
            merged_conf_scale: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierParams {
    /// Explicit 5x5 row-stochastic confusion matrix (true class -> predicted class).
    pub confusion: Option<Vec<Vec<f64>>>,
    /// Used when `confusion` is absent: diagonal value, remainder spread evenly.
    pub confusion_diagonal: f64,
    pub no_read_rate: f64,
    /// 0 gives identical anchors for all mice; 1 gives independent anchors.
    pub embedding_separation: f64,
    /// Per-dimension std of the Gaussian added to the anchor.
    pub embedding_noise: f64,
    /// Range of the probability mass placed on the predicted class.
    pub peak_min: f64,
    pub peak_max: f64,
}

impl Default for ClassifierParams {
    fn default() -> Self {
        ClassifierParams {
            confusion: None,
            confusion_diagonal: 0.85,
            no_read_rate: 0.33,
            embedding_separation: 0.5,
            embedding_noise: 0.02,
            peak_min: 0.55,
            peak_max: 0.95,
        }
    }
}

impl ClassifierParams {
    pub fn confusion_matrix(&self) -> [[f64; NUM_TAG_CLASSES]; NUM_TAG_CLASSES] {
        let mut m = [[0.0; NUM_TAG_CLASSES]; NUM_TAG_CLASSES];
        match &self.confusion {
            Some(rows) => {
                for (r, row) in rows.iter().enumerate().take(NUM_TAG_CLASSES) {
                    for (c, v) in row.iter().enumerate().take(NUM_TAG_CLASSES) {
                        m[r][c] = *v;
                    }
                }
            }
            None => {
                let off = (1.0 - self.confusion_diagonal) / (NUM_TAG_CLASSES - 1) as f64;
                for (r, row) in m.iter_mut().enumerate() {
                    for (c, v) in row.iter_mut().enumerate() {
                        *v = if r == c { self.confusion_diagonal } else { off };
                    }
                }
            }
        }
        m
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub scene: SceneParams,
    pub motion: MotionParams,
    pub detector: DetectorParams,
    pub occlusion: OcclusionParams,
    pub classifier: ClassifierParams,
}

impl SceneConfig {
    /// Detections equal ground truth, tags are read correctly and embeddings
    /// sit exactly on their anchors.
    pub fn perfect() -> Self {
        SceneConfig {
            detector: DetectorParams {
                miss_rate: 0.0,
                box_jitter_std: 0.0,
                ..Default::default()
            },
            occlusion: OcclusionParams {
                enabled: false,
                ..Default::default()
            },
            classifier: ClassifierParams {
                confusion_diagonal: 1.0,
                no_read_rate: 0.0,
                embedding_noise: 0.0,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn frame_count(&self) -> u64 {
        (self.scene.fps * self.scene.duration_s).round().max(0.0) as u64
    }

    pub fn validate(&self) -> Result<(), InvalidConfig> {
        let bad = |msg: String| Err(InvalidConfig(msg));
        let s = &self.scene;
        if s.n_mice == 0 {
            return bad("scene.n_mice must be at least 1".into());
        }
        if !(s.fps > 0.0 && s.fps.is_finite()) {
            return bad(format!("scene.fps must be positive, got {}", s.fps));
        }
        if !(s.duration_s >= 0.0 && s.duration_s.is_finite()) {
            return bad(format!("scene.duration_s must be non-negative, got {}", s.duration_s));
        }
        if !(s.mouse_length > 0.0 && s.mouse_width > 0.0) {
            return bad("mouse dimensions must be positive".into());
        }
        let extent = s.mouse_length.hypot(s.mouse_width);
        if !(s.cage_width > extent && s.cage_height > extent) {
            return bad("cage must be larger than a mouse in both directions".into());
        }
        if s.embedding_dim == 0 {
            return bad("scene.embedding_dim must be positive".into());
        }
        let m = &self.motion;
        if [m.speed_mean, m.speed_std, m.turn_std]
            .iter()
            .any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            return bad("motion parameters must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&m.persistence) {
            return bad("motion.persistence must lie in [0, 1]".into());
        }
        let d = &self.detector;
        if !(0.0..=1.0).contains(&d.miss_rate) {
            return bad(format!("detector.miss_rate must lie in [0, 1], got {}", d.miss_rate));
        }
        if !(d.box_jitter_std >= 0.0 && d.conf_std >= 0.0) {
            return bad("detector standard deviations must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&d.conf_mean) {
            return bad("detector.conf_mean must lie in [0, 1]".into());
        }
        let o = &self.occlusion;
        if !(0.0..=1.0).contains(&o.iou_threshold) || !(0.0..=1.0).contains(&o.merged_conf_scale) {
            return bad("occlusion parameters must lie in [0, 1]".into());
        }
        let c = &self.classifier;
        if !(0.0..=1.0).contains(&c.no_read_rate) {
            return bad(format!("classifier.no_read_rate must lie in [0, 1], got {}", c.no_read_rate));
        }
        if !(0.0..=1.0).contains(&c.embedding_separation) || c.embedding_noise.is_nan() || c.embedding_noise < 0.0 {
            return bad("classifier embedding parameters out of range".into());
        }
        if !(0.0 < c.peak_min && c.peak_min <= c.peak_max && c.peak_max <= 1.0) {
            return bad("classifier peak range must satisfy 0 < peak_min <= peak_max <= 1".into());
        }
        if let Some(rows) = &c.confusion {
            if rows.len() != NUM_TAG_CLASSES || rows.iter().any(|r| r.len() != NUM_TAG_CLASSES) {
                return bad("classifier.confusion must be 5x5".into());
            }
        } else if !(0.0..=1.0).contains(&c.confusion_diagonal) {
            return bad("classifier.confusion_diagonal must lie in [0, 1]".into());
        }
        for (r, row) in c.confusion_matrix().iter().enumerate() {
            if row.iter().any(|v| v.is_nan() || *v < 0.0) {
                return bad(format!("confusion row {r} has a negative entry"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return bad(format!("confusion row {r} sums to {sum}"));
            }
        }
        Ok(())
    }
}

/// Where a synthetic detection came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    /// Ground-truth ids covered by the box (two for an occlusion merge).
    pub sources: Vec<u64>,
    /// The mouse whose tag and appearance the detection carries.
    pub primary: u64,
    /// Tag was illegible; scores came from the no-read row.
    pub no_read: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimFrame {
    pub frame: u64,
    pub truth: Vec<GtObject>,
    pub detections: Vec<Detection>,
    pub provenance: Vec<Provenance>,
}

#[derive(Debug, Clone)]
struct Mouse {
    cx: f64,
    cy: f64,
    heading: f64,
    speed: f64,
    anchor: Vec<f64>,
    tag_class: EarTagClass,
    identity: Option<Identity>,
}

/// Streaming scene generator; yields one [`SimFrame`] per frame.
#[derive(Debug, Clone)]
pub struct SceneGenerator {
    cfg: SceneConfig,
    confusion: [[f64; NUM_TAG_CLASSES]; NUM_TAG_CLASSES],
    rng: ChaCha8Rng,
    mice: Vec<Mouse>,
    frame: u64,
    total: u64,
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = crate::assoc::l2_norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

impl SceneGenerator {
    pub fn new(cfg: SceneConfig) -> Result<Self, InvalidConfig> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.scene.seed);
        let s = cfg.scene;
        let dim = s.embedding_dim;
        let common = random_unit(&mut rng, dim);
        let identities = Identity::cage(EarTagClass::IDENTITY_BEARING.len());
        let sep = cfg.classifier.embedding_separation;
        // half the largest box extent over all headings
        let margin = s.mouse_length.hypot(s.mouse_width) / 2.0;
        let mice = (0..s.n_mice)
            .map(|i| {
                let own = random_unit(&mut rng, dim);
                let mixed: Vec<f64> = common.iter().zip(&own).map(|(c, o)| (1.0 - sep) * c + sep * o).collect();
                let anchor = crate::assoc::normalize(&mixed).unwrap_or(own);
                let identity = identities.get(i).copied();
                Mouse {
                    cx: rng.random_range(margin..s.cage_width - margin),
                    cy: rng.random_range(margin..s.cage_height - margin),
                    heading: rng.random_range(-PI..PI),
                    speed: cfg.motion.speed_mean,
                    anchor,
                    tag_class: identity.map_or(EarTagClass::NoEarTag, Identity::label),
                    identity,
                }
            })
            .collect();
        Ok(SceneGenerator {
            confusion: cfg.classifier.confusion_matrix(),
            total: cfg.frame_count(),
            cfg,
            rng,
            mice,
            frame: 0,
        })
    }

    pub fn config(&self) -> &SceneConfig {
        &self.cfg
    }

    fn mouse_box(&self, m: &Mouse) -> BBox {
        let (l, w) = (self.cfg.scene.mouse_length, self.cfg.scene.mouse_width);
        let (sin, cos) = m.heading.sin_cos();
        let bw = l * cos.abs() + w * sin.abs();
        let bh = l * sin.abs() + w * cos.abs();
        BBox::from_center(m.cx, m.cy, bw, bh)
    }

    fn advance(&mut self) {
        let motion = self.cfg.motion;
        let (cage_w, cage_h) = (self.cfg.scene.cage_width, self.cfg.scene.cage_height);
        let (l, w) = (self.cfg.scene.mouse_length, self.cfg.scene.mouse_width);
        let innovation = motion.speed_std * (1.0 - motion.persistence * motion.persistence).sqrt();
        for m in &mut self.mice {
            let turn: f64 = self.rng.sample(StandardNormal);
            let accel: f64 = self.rng.sample(StandardNormal);
            m.heading += motion.turn_std * turn;
            m.speed = (motion.persistence * m.speed + (1.0 - motion.persistence) * motion.speed_mean + innovation * accel).max(0.0);
            m.cx += m.speed * m.heading.cos();
            m.cy += m.speed * m.heading.sin();
            let (sin, cos) = m.heading.sin_cos();
            let half_w = (l * cos.abs() + w * sin.abs()) / 2.0;
            let half_h = (l * sin.abs() + w * cos.abs()) / 2.0;
            if m.cx < half_w || m.cx > cage_w - half_w {
                m.cx = if m.cx < half_w {
                    2.0 * half_w - m.cx
                } else {
                    2.0 * (cage_w - half_w) - m.cx
                };
                m.heading = PI - m.heading;
            }
            if m.cy < half_h || m.cy > cage_h - half_h {
                m.cy = if m.cy < half_h {
                    2.0 * half_h - m.cy
                } else {
                    2.0 * (cage_h - half_h) - m.cy
                };
                m.heading = -m.heading;
            }
            m.heading = (m.heading + PI).rem_euclid(2.0 * PI) - PI;
            // the heading change alters the box extents; clamp so the box stays inside
            let (sin, cos) = m.heading.sin_cos();
            let half_w = (l * cos.abs() + w * sin.abs()) / 2.0;
            let half_h = (l * sin.abs() + w * cos.abs()) / 2.0;
            m.cx = m.cx.clamp(half_w, cage_w - half_w);
            m.cy = m.cy.clamp(half_h, cage_h - half_h);
        }
    }

    fn sample_tags(&mut self, true_class: EarTagClass) -> (TagScores, bool) {
        let no_read = self.rng.random_bool(self.cfg.classifier.no_read_rate);
        let row = if no_read { EarTagClass::NoRead.index() } else { true_class.index() };
        let u: f64 = self.rng.random();
        let mut predicted = NUM_TAG_CLASSES - 1;
        let mut acc = 0.0;
        for (k, p) in self.confusion[row].iter().enumerate() {
            acc += p;
            if u < acc {
                predicted = k;
                break;
            }
        }
        let c = &self.cfg.classifier;
        let peak = if c.peak_max > c.peak_min {
            self.rng.random_range(c.peak_min..=c.peak_max)
        } else {
            c.peak_min
        };
        let weights: Vec<f64> = (0..NUM_TAG_CLASSES - 1).map(|_| self.rng.random::<f64>() + 1e-3).collect();
        let wsum: f64 = weights.iter().sum();
        let mut scores = [0.0; NUM_TAG_CLASSES];
        let mut others = weights.iter();
        for (k, s) in scores.iter_mut().enumerate() {
            *s = if k == predicted {
                peak
            } else {
                (1.0 - peak) * others.next().unwrap() / wsum
            };
        }
        (scores, no_read)
    }

    fn sample_embedding(&mut self, mouse: usize) -> Vec<f64> {
        let noise = self.cfg.classifier.embedding_noise;
        let anchor = self.mice[mouse].anchor.clone();
        if noise == 0.0 {
            return anchor;
        }
        let normal = Normal::new(0.0, noise).expect("validated std");
        let v: Vec<f64> = anchor.iter().map(|a| a + normal.sample(&mut self.rng)).collect();
        crate::assoc::normalize(&v).unwrap_or(anchor)
    }

    fn sample_confidence(&mut self) -> f64 {
        let d = self.cfg.detector;
        if d.conf_std == 0.0 {
            return d.conf_mean;
        }
        let z: f64 = self.rng.sample(StandardNormal);
        (d.conf_mean + d.conf_std * z).clamp(0.01, 1.0)
    }

    fn jitter(&mut self, b: BBox) -> BBox {
        let s = self.cfg.detector.box_jitter_std;
        if s == 0.0 {
            return b;
        }
        let mut n = || s * self.rng.sample::<f64, _>(StandardNormal);
        let (dx, dy, dw, dh) = (n(), n(), n(), n());
        BBox::new(b.x + dx, b.y + dy, (b.w + dw).max(1.0), (b.h + dh).max(1.0))
    }

    fn emit(&mut self) -> SimFrame {
        let frame = self.frame;
        let boxes: Vec<BBox> = self.mice.iter().map(|m| self.mouse_box(m)).collect();
        let truth = self
            .mice
            .iter()
            .zip(&boxes)
            .enumerate()
            .map(|(i, (m, b))| GtObject {
                id: i as u64 + 1,
                bbox: *b,
                identity: m.identity,
            })
            .collect();

        // occlusion groups: each mouse merges with at most one overlapping partner
        let n = self.mice.len();
        let mut partner = vec![None; n];
        if self.cfg.occlusion.enabled {
            for i in 0..n {
                for j in i + 1..n {
                    if partner[i].is_none() && partner[j].is_none() && iou(&boxes[i], &boxes[j]) > self.cfg.occlusion.iou_threshold {
                        partner[i] = Some(j);
                        partner[j] = Some(i);
                    }
                }
            }
        }

        let mut detections = Vec::new();
        let mut provenance = Vec::new();
        for i in 0..n {
            let (sources, bbox, primary, conf_scale) = match partner[i] {
                Some(j) if j < i => continue,
                Some(j) => {
                    let front = if self.rng.random_bool(0.5) { i } else { j };
                    (
                        vec![i as u64 + 1, j as u64 + 1],
                        boxes[i].union(&boxes[j]),
                        front,
                        self.cfg.occlusion.merged_conf_scale,
                    )
                }
                None => (vec![i as u64 + 1], boxes[i], i, 1.0),
            };
            if self.rng.random_bool(self.cfg.detector.miss_rate) {
                continue;
            }
            let bbox = self.jitter(bbox);
            let confidence = (self.sample_confidence() * conf_scale).clamp(0.0, 1.0);
            let (tag_scores, no_read) = self.sample_tags(self.mice[primary].tag_class);
            let embedding = self.sample_embedding(primary);
            detections.push(Detection {
                frame,
                bbox,
                confidence,
                embedding,
                tag_scores,
            });
            provenance.push(Provenance {
                sources,
                primary: primary as u64 + 1,
                no_read,
            });
        }
        SimFrame {
            frame,
            truth,
            detections,
            provenance,
        }
    }
}

impl Iterator for SceneGenerator {
    type Item = SimFrame;

    fn next(&mut self) -> Option<SimFrame> {
        if self.frame >= self.total {
            return None;
        }
        if self.frame > 0 {
            self.advance();
        }
        let out = self.emit();
        self.frame += 1;
        Some(out)
    }
}

/// A fully materialized scene.
#[derive(Debug, Clone)]
pub struct Scene {
    pub ground_truth: GroundTruth,
    pub detections: Vec<Detection>,
    pub provenance: Vec<Provenance>,
    pub frames: u64,
}

pub fn generate(cfg: &SceneConfig) -> Result<Scene, InvalidConfig> {
    let generator = SceneGenerator::new(cfg.clone())?;
    let mut scene = Scene {
        ground_truth: GroundTruth::new(),
        detections: Vec::new(),
        provenance: Vec::new(),
        frames: cfg.frame_count(),
    };
    for f in generator {
        scene.ground_truth.add_empty_frame(f.frame);
        for obj in f.truth {
            scene.ground_truth.push(f.frame, obj).expect("one box per mouse per frame");
        }
        scene.detections.extend(f.detections);
        scene.provenance.extend(f.provenance);
    }
    Ok(scene)
}
