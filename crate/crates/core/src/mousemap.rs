//! Tracklet-to-identity assignment.
//!
//! Every tracklet is a booking request over the inclusive frame interval it
//! spans; every identity is a room that can hold at most one booking at a
//! time. The solver picks at most one identity per tracklet so that the
//! summed ear-tag evidence of the assigned tracklets is maximal. A tracklet
//! may stay unassigned, which keeps every instance feasible.
//!
//! When the tracker produced more simultaneous hypotheses than there are
//! animals, [`presolve`] first stitches fragments that are close in space
//! and disjoint in time, then keeps only the most confident hypotheses in
//! every window where too many are active.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::center_distance;
use crate::types::{Identity, Tracklet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MouseMapParams {
    /// Number of identities housed in the cage.
    pub n_identities: usize,
    /// Largest frame gap bridged by stitching.
    pub gap_max: u64,
    /// Stitch distance limit as a fraction of the mean boundary-box diagonal.
    pub dist_max_ratio: f64,
    /// Streaming window length; `0` solves the whole recording at once.
    pub window_minutes: f64,
    /// Score bonus for continuing an identity across a window boundary.
    pub continuity_bonus: f64,
}

impl Default for MouseMapParams {
    fn default() -> Self {
        MouseMapParams {
            n_identities: 3,
            gap_max: 90,
            dist_max_ratio: 0.5,
            window_minutes: 1.0,
            continuity_bonus: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProblemError {
    #[error("at least one identity is required")]
    NoIdentities,
    #[error("request {0} has start after end")]
    InvalidInterval(usize),
    #[error("score for request {request}, identity {identity} is {value}; scores must be finite and non-negative")]
    InvalidScore { request: usize, identity: usize, value: f64 },
    #[error("score table has {found} rows for {expected} requests")]
    ShapeMismatch { expected: usize, found: usize },
}

/// A frame interval competing for an identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Request {
    /// Tracklet id; orders requests for tie-breaking.
    pub id: u64,
    pub start: u64,
    pub end: u64,
}

impl Request {
    fn overlaps(&self, start: u64, end: u64) -> bool {
        self.start <= end && start <= self.end
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentProblem {
    requests: Vec<Request>,
    scores: Vec<Vec<f64>>,
    bonus: Option<Vec<Vec<f64>>>,
    n_identities: usize,
    /// Intervals per identity that are already booked (earlier windows).
    reserved: Vec<Vec<(u64, u64)>>,
}

impl AssignmentProblem {
    pub fn new(requests: Vec<Request>, scores: Vec<Vec<f64>>, n_identities: usize) -> Result<Self, ProblemError> {
        if n_identities == 0 {
            return Err(ProblemError::NoIdentities);
        }
        if scores.len() != requests.len() {
            return Err(ProblemError::ShapeMismatch {
                expected: requests.len(),
                found: scores.len(),
            });
        }
        for (r, req) in requests.iter().enumerate() {
            if req.start > req.end {
                return Err(ProblemError::InvalidInterval(r));
            }
            if scores[r].len() != n_identities {
                return Err(ProblemError::ShapeMismatch {
                    expected: n_identities,
                    found: scores[r].len(),
                });
            }
            if let Some((i, &v)) = scores[r].iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
                return Err(ProblemError::InvalidScore {
                    request: r,
                    identity: i,
                    value: v,
                });
            }
        }
        Ok(AssignmentProblem {
            requests,
            scores,
            bonus: None,
            n_identities,
            reserved: vec![Vec::new(); n_identities],
        })
    }

    /// Score of tracklet `t` for identity `i` is the summed classifier
    /// confidence of the class that identity wears. No-read and
    /// no-ear-tag mass never contributes.
    pub fn from_tracklets(tracklets: &[Tracklet], identities: &[Identity]) -> Result<Self, ProblemError> {
        let requests = tracklets
            .iter()
            .map(|t| Request {
                id: t.id(),
                start: t.start_frame(),
                end: t.end_frame(),
            })
            .collect();
        let scores = tracklets
            .iter()
            .map(|t| identities.iter().map(|i| t.class_conf_sums()[i.label().index()]).collect())
            .collect();
        AssignmentProblem::new(requests, scores, identities.len())
    }

    /// Additional utility used only to choose between assignments; the
    /// reported objective stays the raw score sum.
    pub fn with_bonus(mut self, bonus: Vec<Vec<f64>>) -> Self {
        assert_eq!(bonus.len(), self.requests.len());
        self.bonus = Some(bonus);
        self
    }

    pub fn with_reserved(mut self, identity: usize, start: u64, end: u64) -> Self {
        self.reserved[identity].push((start, end));
        self
    }

    pub fn requests(&self) -> &[Request] {
        &self.requests
    }

    pub fn n_identities(&self) -> usize {
        self.n_identities
    }

    pub fn score(&self, request: usize, identity: usize) -> f64 {
        self.scores[request][identity]
    }

    fn utility(&self, request: usize, identity: usize) -> f64 {
        let b = self.bonus.as_ref().map_or(0.0, |b| b[request][identity]);
        self.scores[request][identity] + b
    }

    /// Raw objective of an assignment, summed in request order.
    pub fn objective(&self, assignment: &[Option<usize>]) -> f64 {
        assignment
            .iter()
            .enumerate()
            .filter_map(|(r, a)| a.map(|i| self.scores[r][i]))
            .sum()
    }

    /// Whether no identity holds two overlapping intervals, reserved ones included.
    pub fn is_feasible(&self, assignment: &[Option<usize>]) -> bool {
        for (r, a) in assignment.iter().enumerate() {
            let Some(i) = *a else { continue };
            let req = &self.requests[r];
            if self.reserved[i].iter().any(|&(s, e)| req.overlaps(s, e)) {
                return false;
            }
            for (q, b) in assignment.iter().enumerate().skip(r + 1) {
                if *b == Some(i) && req.overlaps(self.requests[q].start, self.requests[q].end) {
                    return false;
                }
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityAssignment {
    /// Identity index per request, `None` for unassigned.
    pub assignment: Vec<Option<usize>>,
    pub objective: f64,
}

impl IdentityAssignment {
    pub fn assigned_count(&self) -> usize {
        self.assignment.iter().filter(|a| a.is_some()).count()
    }
}

struct Best {
    assignment: Vec<Option<usize>>,
    utility: f64,
    assigned: usize,
}

struct Search<'a> {
    problem: &'a AssignmentProblem,
    /// Requests in branching order.
    order: Vec<usize>,
    /// Request indices sorted by tracklet id, for lexicographic tie-breaks.
    by_id: Vec<usize>,
    bookings: Vec<Vec<(u64, u64)>>,
    current: Vec<Option<usize>>,
    best: Option<Best>,
}

impl Search<'_> {
    fn can_book(&self, request: usize, identity: usize) -> bool {
        let req = &self.problem.requests[request];
        !self.bookings[identity].iter().any(|&(s, e)| req.overlaps(s, e))
    }

    fn optimistic_rest(&self, depth: usize) -> f64 {
        self.order[depth..]
            .iter()
            .map(|&r| {
                (0..self.problem.n_identities)
                    .filter(|&i| self.can_book(r, i))
                    .map(|i| self.problem.utility(r, i))
                    .fold(0.0, f64::max)
            })
            .sum()
    }

    fn canonical_utility(&self, assignment: &[Option<usize>]) -> f64 {
        assignment
            .iter()
            .enumerate()
            .filter_map(|(r, a)| a.map(|i| self.problem.utility(r, i)))
            .sum()
    }

    fn lex_key(&self, assignment: &[Option<usize>]) -> Vec<usize> {
        let n = self.problem.n_identities;
        self.by_id.iter().map(|&r| assignment[r].unwrap_or(n)).collect()
    }

    fn offer(&mut self) {
        let utility = self.canonical_utility(&self.current);
        let assigned = self.current.iter().filter(|a| a.is_some()).count();
        let better = match &self.best {
            None => true,
            Some(b) => match utility.partial_cmp(&b.utility).unwrap_or(Ordering::Equal) {
                Ordering::Greater => true,
                Ordering::Less => false,
                Ordering::Equal => {
                    assigned > b.assigned || (assigned == b.assigned && self.lex_key(&self.current) < self.lex_key(&b.assignment))
                }
            },
        };
        if better {
            self.best = Some(Best {
                assignment: self.current.clone(),
                utility,
                assigned,
            });
        }
    }

    fn dfs(&mut self, depth: usize, partial: f64, assigned: usize) {
        if depth == self.order.len() {
            self.offer();
            return;
        }
        if let Some(best) = &self.best {
            let bound = partial + self.optimistic_rest(depth);
            let slack = 1e-9 * (1.0 + best.utility.abs());
            if bound < best.utility - slack {
                return;
            }
            // Ties on utility can only win through more assignments.
            let remaining = self.order.len() - depth;
            if bound <= best.utility + slack && assigned + remaining < best.assigned {
                return;
            }
        }
        let r = self.order[depth];
        let mut options: Vec<usize> = (0..self.problem.n_identities).filter(|&i| self.can_book(r, i)).collect();
        options.sort_by(|&a, &b| {
            self.problem
                .utility(r, b)
                .partial_cmp(&self.problem.utility(r, a))
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        let req = self.problem.requests[r];
        for i in options {
            self.bookings[i].push((req.start, req.end));
            self.current[r] = Some(i);
            self.dfs(depth + 1, partial + self.problem.utility(r, i), assigned + 1);
            self.current[r] = None;
            self.bookings[i].pop();
        }
        self.dfs(depth + 1, partial, assigned);
    }
}

/// Exact branch-and-bound maximization.
///
/// Among optimal assignments the one with more assigned tracklets wins, then
/// the lexicographically smallest identity vector taken in tracklet-id order.
pub fn solve(problem: &AssignmentProblem) -> IdentityAssignment {
    let n_req = problem.requests.len();
    let best_utility = |r: usize| (0..problem.n_identities).map(|i| problem.utility(r, i)).fold(0.0, f64::max);
    let mut order: Vec<usize> = (0..n_req).collect();
    order.sort_by(|&a, &b| {
        best_utility(b)
            .partial_cmp(&best_utility(a))
            .unwrap_or(Ordering::Equal)
            .then(problem.requests[a].id.cmp(&problem.requests[b].id))
    });
    let mut by_id: Vec<usize> = (0..n_req).collect();
    by_id.sort_by_key(|&r| (problem.requests[r].id, r));

    let mut search = Search {
        problem,
        order,
        by_id,
        bookings: problem.reserved.clone(),
        current: vec![None; n_req],
        best: None,
    };
    search.dfs(0, 0.0, 0);
    let best = search.best.expect("the empty assignment is always feasible");
    IdentityAssignment {
        objective: problem.objective(&best.assignment),
        assignment: best.assignment,
    }
}

/// Two tracklets could not be stitched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("tracklets {first} and {second} are not stitchable")]
pub struct Incompatible {
    pub first: u64,
    pub second: u64,
}

/// Whether `b` can continue `a` after a tracking break.
pub fn stitchable(a: &Tracklet, b: &Tracklet, params: &MouseMapParams) -> bool {
    if a.end_frame() >= b.start_frame() {
        return false;
    }
    if b.start_frame() - a.end_frame() > params.gap_max {
        return false;
    }
    let (last, first) = (&a.last().bbox, &b.first().bbox);
    let limit = params.dist_max_ratio * 0.5 * (last.diagonal() + first.diagonal());
    center_distance(last, first) <= limit
}

/// Joins `b` onto the end of `a`; the result keeps `a`'s id.
pub fn stitch(a: &Tracklet, b: &Tracklet, params: &MouseMapParams) -> Result<Tracklet, Incompatible> {
    let incompatible = Incompatible {
        first: a.id(),
        second: b.id(),
    };
    if !stitchable(a, b, params) {
        return Err(incompatible);
    }
    a.clone().concat(b).map_err(|_| incompatible)
}

/// Largest number of tracklets active on any single frame.
pub fn max_concurrency(tracklets: &[Tracklet]) -> usize {
    let mut events: Vec<(u64, i64)> = Vec::with_capacity(tracklets.len() * 2);
    for t in tracklets {
        events.push((t.start_frame(), 1));
        events.push((t.end_frame() + 1, -1));
    }
    // ends sort before starts on the same frame
    events.sort_unstable();
    let mut active = 0i64;
    let mut peak = 0i64;
    for (_, delta) in events {
        active += delta;
        peak = peak.max(active);
    }
    peak as usize
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PresolveOutcome {
    pub kept: Vec<Tracklet>,
    /// Tracklets removed by the concurrency limit.
    pub dropped: Vec<Tracklet>,
    /// `(surviving id, absorbed id)` for every stitch performed.
    pub merges: Vec<(u64, u64)>,
}

/// Stitches fragments, then enforces at most `n` concurrent tracklets.
pub fn presolve(tracklets: &[Tracklet], n: usize, params: &MouseMapParams) -> Vec<Tracklet> {
    presolve_detailed(tracklets, n, params).kept
}

pub fn presolve_detailed(tracklets: &[Tracklet], n: usize, params: &MouseMapParams) -> PresolveOutcome {
    let (stitched, merges) = stitch_all(tracklets, params);
    let (kept, dropped) = limit_concurrency(stitched, n);
    PresolveOutcome { kept, dropped, merges }
}

/// Links each tracklet to at most one successor, closest gaps first.
fn stitch_all(tracklets: &[Tracklet], params: &MouseMapParams) -> (Vec<Tracklet>, Vec<(u64, u64)>) {
    let mut sorted: Vec<&Tracklet> = tracklets.iter().collect();
    sorted.sort_by_key(|t| (t.start_frame(), t.id()));

    let mut candidates = Vec::new();
    for (ai, a) in sorted.iter().enumerate() {
        for (bi, b) in sorted.iter().enumerate() {
            if ai != bi && stitchable(a, b, params) {
                let gap = b.start_frame() - a.end_frame();
                let dist = center_distance(&a.last().bbox, &b.first().bbox);
                candidates.push((gap, dist, a.id(), b.id(), ai, bi));
            }
        }
    }
    candidates.sort_by(|x, y| {
        x.0.cmp(&y.0)
            .then(x.1.partial_cmp(&y.1).unwrap_or(Ordering::Equal))
            .then(x.2.cmp(&y.2))
            .then(x.3.cmp(&y.3))
    });

    let mut next: Vec<Option<usize>> = vec![None; sorted.len()];
    let mut has_prev = vec![false; sorted.len()];
    for &(_, _, _, _, ai, bi) in &candidates {
        if next[ai].is_none() && !has_prev[bi] {
            next[ai] = Some(bi);
            has_prev[bi] = true;
        }
    }

    let mut out = Vec::new();
    let mut merges = Vec::new();
    for head in 0..sorted.len() {
        if has_prev[head] {
            continue;
        }
        let mut merged = sorted[head].clone();
        let mut cursor = head;
        while let Some(succ) = next[cursor] {
            merges.push((merged.id(), sorted[succ].id()));
            merged = merged.concat(sorted[succ]).expect("successor starts after predecessor ends");
            cursor = succ;
        }
        out.push(merged);
    }
    out.sort_by_key(|t| t.id());
    (out, merges)
}

/// Frames `[start, end]` of the first maximal run where more than `n`
/// tracklets are active.
fn first_conflict_window(tracklets: &[Tracklet], n: usize) -> Option<(u64, u64)> {
    let mut events: Vec<(u64, i64)> = Vec::with_capacity(tracklets.len() * 2);
    for t in tracklets {
        events.push((t.start_frame(), 1));
        events.push((t.end_frame() + 1, -1));
    }
    events.sort_unstable();
    let mut active = 0i64;
    let mut start = None;
    let mut i = 0;
    while i < events.len() {
        let frame = events[i].0;
        while i < events.len() && events[i].0 == frame {
            active += events[i].1;
            i += 1;
        }
        match start {
            None if active > n as i64 => start = Some(frame),
            Some(s) if active <= n as i64 => return Some((s, frame - 1)),
            _ => {}
        }
    }
    start.map(|s| (s, u64::MAX))
}

fn mean_confidence_in(t: &Tracklet, start: u64, end: u64) -> f64 {
    let (sum, count) = t
        .observations()
        .iter()
        .filter(|o| start <= o.frame && o.frame <= end)
        .fold((0.0, 0usize), |(s, c), o| (s + o.confidence, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

fn limit_concurrency(mut tracklets: Vec<Tracklet>, n: usize) -> (Vec<Tracklet>, Vec<Tracklet>) {
    let mut dropped = Vec::new();
    while let Some((start, end)) = first_conflict_window(&tracklets, n) {
        // least probable: lowest mean confidence inside the window, then
        // fewest observations, then highest id
        let victim = tracklets
            .iter()
            .enumerate()
            .filter(|(_, t)| t.start_frame() <= end && start <= t.end_frame())
            .min_by(|(_, a), (_, b)| {
                mean_confidence_in(a, start, end)
                    .partial_cmp(&mean_confidence_in(b, start, end))
                    .unwrap_or(Ordering::Equal)
                    .then(a.len().cmp(&b.len()))
                    .then(b.id().cmp(&a.id()))
            })
            .map(|(i, _)| i)
            .expect("a conflict window always contains tracklets");
        dropped.push(tracklets.remove(victim));
    }
    dropped.sort_by_key(|t| t.id());
    (tracklets, dropped)
}

/// Final per-tracklet identities for a whole recording.
#[derive(Debug, Clone, PartialEq)]
pub struct Identification {
    /// Tracklets after presolve (stitched and dropped ones included), by id.
    pub tracklets: Vec<Tracklet>,
    pub identities: Vec<Option<Identity>>,
    /// Sum of raw scores over assigned tracklets.
    pub objective: f64,
    pub presolved: bool,
}

/// Runs presolve when needed, then solves per window (or once, in batch mode).
pub fn identify(tracklets: &[Tracklet], params: &MouseMapParams, fps: f64) -> Identification {
    let identities = Identity::cage(params.n_identities);
    let n = identities.len();
    let presolved = max_concurrency(tracklets) > n;
    let (candidates, dropped) = if presolved {
        let outcome = presolve_detailed(tracklets, n, params);
        (outcome.kept, outcome.dropped)
    } else {
        let mut all = tracklets.to_vec();
        all.sort_by_key(|t| t.id());
        (all, Vec::new())
    };

    let window_frames = (params.window_minutes * 60.0 * fps).round();
    let window_of = |t: &Tracklet| {
        if window_frames >= 1.0 {
            t.start_frame() / window_frames as u64
        } else {
            0
        }
    };
    let mut windows: Vec<u64> = candidates.iter().map(window_of).collect();
    windows.sort_unstable();
    windows.dedup();

    let mut chosen: Vec<Option<usize>> = vec![None; candidates.len()];
    // (start, end, tracklet index) bookings per identity, across windows
    let mut booked: Vec<Vec<(u64, u64, usize)>> = vec![Vec::new(); n];
    let mut objective = 0.0;
    for w in windows {
        let members: Vec<usize> = (0..candidates.len()).filter(|&k| window_of(&candidates[k]) == w).collect();
        let subset: Vec<Tracklet> = members.iter().map(|&k| candidates[k].clone()).collect();
        let mut problem =
            AssignmentProblem::from_tracklets(&subset, &identities).expect("class confidence sums are finite and non-negative");
        if !booked.iter().all(Vec::is_empty) {
            let bonus = subset
                .iter()
                .map(|t| {
                    (0..n)
                        .map(|i| {
                            let previous = booked[i].iter().filter(|b| b.1 < t.start_frame()).max_by_key(|b| b.1);
                            match previous {
                                Some(&(_, _, k)) if stitchable(&candidates[k], t, params) => params.continuity_bonus,
                                _ => 0.0,
                            }
                        })
                        .collect()
                })
                .collect();
            problem = problem.with_bonus(bonus);
            let first = subset.iter().map(Tracklet::start_frame).min().unwrap_or(0);
            for (i, list) in booked.iter().enumerate() {
                for &(s, e, _) in list.iter().filter(|b| b.1 >= first) {
                    problem = problem.with_reserved(i, s, e);
                }
            }
        }
        let solution = solve(&problem);
        objective += solution.objective;
        for (local, &k) in members.iter().enumerate() {
            if let Some(i) = solution.assignment[local] {
                chosen[k] = Some(i);
                booked[i].push((candidates[k].start_frame(), candidates[k].end_frame(), k));
            }
        }
    }

    let mut labelled: Vec<(Tracklet, Option<Identity>)> = candidates
        .into_iter()
        .zip(chosen)
        .map(|(t, c)| (t, c.map(|i| identities[i])))
        .chain(dropped.into_iter().map(|t| (t, None)))
        .collect();
    labelled.sort_by_key(|(t, _)| t.id());
    let (tracklets, identities) = labelled.into_iter().unzip();
    Identification {
        tracklets,
        identities,
        objective,
        presolved,
    }
}
