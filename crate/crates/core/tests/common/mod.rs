//! Slow reference implementations and random instance generators used by
//! the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use cagetrack::metrics::{GroundTruth, GtObject, HypObject, Hypotheses, HypothesisId};
use cagetrack::mousemap::{AssignmentProblem, Request};
use cagetrack::types::{BBox, EarTagClass, Identity};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- assignment

/// Best partial matching by exhaustive search: most feasible pairs first,
/// then lowest total cost. Returns `(pair count, total cost)`.
pub fn brute_assignment(costs: &[Vec<Option<f64>>]) -> (usize, f64) {
    fn go(costs: &[Vec<Option<f64>>], row: usize, used: &mut Vec<bool>, count: usize, total: f64, best: &mut (usize, f64)) {
        if row == costs.len() {
            if count > best.0 || (count == best.0 && total < best.1) {
                *best = (count, total);
            }
            return;
        }
        go(costs, row + 1, used, count, total, best);
        for c in 0..used.len() {
            if let (false, Some(v)) = (used[c], costs[row][c]) {
                used[c] = true;
                go(costs, row + 1, used, count + 1, total + v, best);
                used[c] = false;
            }
        }
    }
    let cols = costs.first().map_or(0, Vec::len);
    let mut best = (0, 0.0);
    go(costs, 0, &mut vec![false; cols], 0, 0.0, &mut best);
    best
}

// ------------------------------------------------------------------ mousemap

#[derive(Debug, Clone)]
pub struct RawProblem {
    pub requests: Vec<Request>,
    pub scores: Vec<Vec<f64>>,
    pub n: usize,
}

impl RawProblem {
    pub fn build(&self) -> AssignmentProblem {
        AssignmentProblem::new(self.requests.clone(), self.scores.clone(), self.n).unwrap()
    }
}

pub fn random_problem(rng: &mut ChaCha8Rng, max_requests: usize, n: usize, integer_scores: bool) -> RawProblem {
    let t = rng.random_range(0..=max_requests);
    let mut ids: Vec<u64> = (1..=3 * t as u64 + 1).collect();
    ids.shuffle(rng);
    let requests = (0..t)
        .map(|k| {
            let start = rng.random_range(0..100u64);
            let len = rng.random_range(0..40u64);
            Request {
                id: ids[k],
                start,
                end: start + len,
            }
        })
        .collect();
    let scores = (0..t)
        .map(|_| {
            (0..n)
                .map(|_| {
                    if integer_scores {
                        rng.random_range(0..4u32) as f64
                    } else {
                        rng.random_range(0.0..50.0)
                    }
                })
                .collect()
        })
        .collect();
    RawProblem { requests, scores, n }
}

/// Enumerates every assignment in `{0..n, unassigned}^T`, keeping feasible
/// ones. Ties: more assigned, then lexicographically smallest identity
/// vector in tracklet-id order with unassigned counted as `n`.
pub fn brute_mousemap(p: &RawProblem) -> (Vec<Option<usize>>, f64) {
    let t = p.requests.len();
    let mut by_id: Vec<usize> = (0..t).collect();
    by_id.sort_by_key(|&r| p.requests[r].id);
    let key = |a: &[Option<usize>]| -> Vec<usize> { by_id.iter().map(|&r| a[r].unwrap_or(p.n)).collect() };

    // depth-first over requests in index order; infeasible partial
    // assignments are cut, every feasible complete one is scored
    fn go(r: usize, p: &RawProblem, a: &mut Vec<Option<usize>>, visit: &mut dyn FnMut(&[Option<usize>])) {
        if r == p.requests.len() {
            visit(a);
            return;
        }
        for choice in (0..p.n).map(Some).chain([None]) {
            if let Some(i) = choice {
                let req = &p.requests[r];
                if (0..r).any(|q| a[q] == Some(i) && req.start <= p.requests[q].end && p.requests[q].start <= req.end) {
                    continue;
                }
            }
            a[r] = choice;
            go(r + 1, p, a, visit);
        }
        a[r] = None;
    }
    let mut best: Option<(Vec<Option<usize>>, f64, usize)> = None;
    let mut visit = |a: &[Option<usize>]| {
        let value: f64 = (0..t).filter_map(|r| a[r].map(|i| p.scores[r][i])).sum();
        let assigned = a.iter().filter(|x| x.is_some()).count();
        let better = match &best {
            None => true,
            Some((b, bv, bn)) => value > *bv || (value == *bv && (assigned > *bn || (assigned == *bn && key(a) < key(b)))),
        };
        if better {
            best = Some((a.to_vec(), value, assigned));
        }
    };
    go(0, p, &mut vec![None; t], &mut visit);
    let (a, v, _) = best.unwrap();
    (a, v)
}

// -------------------------------------------------------------------- kalman

/// Scalar Kalman update: returns posterior `(mean, variance)`.
pub fn scalar_update(mean: f64, var: f64, z: f64, r: f64) -> (f64, f64) {
    let k = var / (var + r);
    (mean + k * (z - mean), (1.0 - k) * var)
}

/// Position/velocity pair observed through its position only.
/// Returns posterior `(x, v, P)`.
pub fn scalar_cv_update(x: f64, v: f64, p: [[f64; 2]; 2], z: f64, r: f64) -> (f64, f64, [[f64; 2]; 2]) {
    let s = p[0][0] + r;
    let (k0, k1) = (p[0][0] / s, p[1][0] / s);
    let y = z - x;
    let post = [
        [p[0][0] - k0 * k0 * s, p[0][1] - k0 * k1 * s],
        [p[1][0] - k1 * k0 * s, p[1][1] - k1 * k1 * s],
    ];
    (x + k0 * y, v + k1 * y, post)
}

/// Relative closeness used by the numeric oracles.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

/// Position/velocity pair under a unit-step constant-velocity model with
/// additive diagonal noise `(qx, qv)`.
pub fn scalar_cv_predict(x: f64, v: f64, p: [[f64; 2]; 2], qx: f64, qv: f64) -> (f64, f64, [[f64; 2]; 2]) {
    let p00 = p[0][0] + p[1][0] + p[0][1] + p[1][1] + qx;
    let p01 = p[0][1] + p[1][1];
    let p10 = p[1][0] + p[1][1];
    let p11 = p[1][1] + qv;
    (x + v, v, [[p00, p01], [p10, p11]])
}

// ------------------------------------------------------------------- metrics

/// Random small scene: gt random walks, hypotheses derived from them with
/// label noise, swaps, drop-outs and clutter.
pub fn random_metric_scene(rng: &mut ChaCha8Rng) -> (GroundTruth, Hypotheses) {
    let frames = rng.random_range(1..25u64);
    let n_gt = rng.random_range(1..=3u64);
    let mut gt = GroundTruth::new();
    let mut hyps = Hypotheses::new();
    let mut pos: Vec<(f64, f64)> = (0..n_gt)
        .map(|_| (rng.random_range(0.0..60.0), rng.random_range(0.0..60.0)))
        .collect();
    let idents = Identity::cage(3);
    let mut label: Vec<HypothesisId> = (0..n_gt)
        .map(|k| {
            if rng.random_bool(0.5) {
                HypothesisId::Identity(idents[k as usize])
            } else {
                HypothesisId::Tracklet(k + 10)
            }
        })
        .collect();
    for f in 0..frames {
        gt.add_empty_frame(f);
        if rng.random_bool(0.2) && n_gt > 1 {
            label.swap(0, 1);
        }
        if rng.random_bool(0.1) {
            label[0] = HypothesisId::Tracklet(rng.random_range(100..103));
        }
        for k in 0..n_gt as usize {
            pos[k].0 += rng.random_range(-6.0..6.0);
            pos[k].1 += rng.random_range(-6.0..6.0);
            let b = BBox::new(pos[k].0, pos[k].1, 20.0, 16.0);
            if rng.random_bool(0.9) {
                gt.push(
                    f,
                    GtObject {
                        id: k as u64 + 1,
                        bbox: b,
                        identity: idents.get(k).copied(),
                    },
                )
                .unwrap();
            }
            if rng.random_bool(0.85) {
                let jitter = BBox::new(b.x + rng.random_range(-5.0..5.0), b.y + rng.random_range(-5.0..5.0), 20.0, 16.0);
                let identity = match label[k] {
                    HypothesisId::Identity(i) => Some(i),
                    HypothesisId::Tracklet(_) => None,
                };
                hyps.push(
                    f,
                    HypObject {
                        id: label[k],
                        bbox: jitter,
                        identity,
                    },
                );
            }
        }
        if rng.random_bool(0.15) {
            hyps.push(
                f,
                HypObject {
                    id: HypothesisId::Tracklet(200 + f),
                    bbox: BBox::new(rng.random_range(0.0..60.0), rng.random_range(0.0..60.0), 20.0, 16.0),
                    identity: Identity::new(EarTagClass::RedBarred),
                },
            );
        }
    }
    (gt, hyps)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NaiveMetrics {
    pub mota: f64,
    pub idf1: f64,
    pub idsw: u64,
    pub fp: u64,
    pub fn_: u64,
}

fn naive_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    inter / (a.w * a.h + b.w * b.h - inter)
}

/// CLEAR-MOT and IDF1 by direct enumeration.
pub fn naive_metrics(gt: &GroundTruth, hyps: &Hypotheses, thr: f64) -> NaiveMetrics {
    let mut frames: BTreeSet<u64> = gt.frames().map(|(f, _)| f).collect();
    frames.extend(hyps.frames().map(|(f, _)| f));
    let mut last: BTreeMap<u64, HypothesisId> = BTreeMap::new();
    let (mut fp, mut fn_, mut idsw, mut n_gt, mut n_hyp) = (0u64, 0u64, 0u64, 0u64, 0u64);
    let mut co: BTreeMap<(u64, HypothesisId), u64> = BTreeMap::new();

    for f in frames {
        let g = gt.frame(f);
        let h = hyps.frame(f);
        n_gt += g.len() as u64;
        n_hyp += h.len() as u64;
        let mut gu = vec![false; g.len()];
        let mut hu = vec![false; h.len()];
        let mut pairs = Vec::new();
        for (gi, go) in g.iter().enumerate() {
            if let Some(prev) = last.get(&go.id) {
                if let Some(hi) = (0..h.len()).find(|&hi| !hu[hi] && h[hi].id == *prev && naive_iou(&go.bbox, &h[hi].bbox) >= thr) {
                    gu[gi] = true;
                    hu[hi] = true;
                    pairs.push((gi, hi));
                }
            }
        }
        let free_g: Vec<usize> = (0..g.len()).filter(|&i| !gu[i]).collect();
        let free_h: Vec<usize> = (0..h.len()).filter(|&i| !hu[i]).collect();
        // exhaustive best matching on the rest
        #[allow(clippy::too_many_arguments)]
        fn search(
            k: usize,
            fg: &[usize],
            fh: &[usize],
            used: &mut Vec<bool>,
            cost: &dyn Fn(usize, usize) -> Option<f64>,
            cur: &mut Vec<(usize, usize)>,
            total: f64,
            best: &mut (usize, f64, Vec<(usize, usize)>),
        ) {
            if k == fg.len() {
                if cur.len() > best.0 || (cur.len() == best.0 && total < best.1) {
                    *best = (cur.len(), total, cur.clone());
                }
                return;
            }
            search(k + 1, fg, fh, used, cost, cur, total, best);
            for j in 0..fh.len() {
                if used[j] {
                    continue;
                }
                if let Some(c) = cost(fg[k], fh[j]) {
                    used[j] = true;
                    cur.push((fg[k], fh[j]));
                    search(k + 1, fg, fh, used, cost, cur, total + c, best);
                    cur.pop();
                    used[j] = false;
                }
            }
        }
        let cost = |gi: usize, hi: usize| {
            let v = naive_iou(&g[gi].bbox, &h[hi].bbox);
            (v >= thr).then_some(1.0 - v)
        };
        let mut best = (0, 0.0, Vec::new());
        search(
            0,
            &free_g,
            &free_h,
            &mut vec![false; free_h.len()],
            &cost,
            &mut Vec::new(),
            0.0,
            &mut best,
        );
        pairs.extend(best.2);
        fn_ += (g.len() - pairs.len()) as u64;
        fp += (h.len() - pairs.len()) as u64;
        for &(gi, hi) in &pairs {
            if let Some(prev) = last.insert(g[gi].id, h[hi].id) {
                if prev != h[hi].id {
                    idsw += 1;
                }
            }
        }
        for go in g {
            for ho in h {
                if naive_iou(&go.bbox, &ho.bbox) >= thr {
                    *co.entry((go.id, ho.id)).or_default() += 1;
                }
            }
        }
    }

    // IDF1: best injective gt -> hypothesis pairing by enumeration
    let gids: Vec<u64> = co.keys().map(|k| k.0).collect::<BTreeSet<_>>().into_iter().collect();
    let hids: Vec<HypothesisId> = co.keys().map(|k| k.1).collect::<BTreeSet<_>>().into_iter().collect();
    fn pair(k: usize, gids: &[u64], hids: &[HypothesisId], used: &mut Vec<bool>, co: &BTreeMap<(u64, HypothesisId), u64>) -> u64 {
        if k == gids.len() {
            return 0;
        }
        let mut best = pair(k + 1, gids, hids, used, co);
        for j in 0..hids.len() {
            if !used[j] {
                used[j] = true;
                let v = co.get(&(gids[k], hids[j])).copied().unwrap_or(0) + pair(k + 1, gids, hids, used, co);
                best = best.max(v);
                used[j] = false;
            }
        }
        best
    }
    let idtp = pair(0, &gids, &hids, &mut vec![false; hids.len()], &co);
    let idf1 = if n_gt + n_hyp == 0 {
        0.0
    } else {
        2.0 * idtp as f64 / (n_gt + n_hyp) as f64
    };
    NaiveMetrics {
        mota: 1.0 - (fp + fn_ + idsw) as f64 / n_gt as f64,
        idf1,
        idsw,
        fp,
        fn_,
    }
}
