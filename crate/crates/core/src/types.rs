//! Domain types shared by every stage of the pipeline.
//!
//! Positions are bounding-box centers in pixels and frames are 1-based, as
//! in MOTChallenge files.

use std::collections::HashSet;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use crate::error::{Error, Result};
use crate::potentials;
use crate::tracklets;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_sq(self) -> f64 {
        self.x * self.x + self.y * self.y
    }

    pub fn l1(self) -> f64 {
        self.x.abs() + self.y.abs()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Converts a `left, top, width, height` box into `(center, size)`.
pub fn box_to_center(left: f64, top: f64, width: f64, height: f64) -> Result<(Vec2, Vec2)> {
    if !(width > 0.0 && height > 0.0) {
        return Err(Error::MalformedInput(format!(
            "box size must be positive, got {width}x{height}"
        )));
    }
    if !(left.is_finite() && top.is_finite() && width.is_finite() && height.is_finite()) {
        return Err(Error::MalformedInput("non-finite box coordinate".into()));
    }
    Ok((
        Vec2::new(left + width / 2.0, top + height / 2.0),
        Vec2::new(width, height),
    ))
}

/// One bounding-box observation.
///
/// Both the center and the top-left corner are stored so that either
/// representation survives a round trip bit-for-bit; the constructors keep
/// them consistent.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub frame: u32,
    pub center: Vec2,
    pub size: Vec2,
    pub corner: Vec2,
    pub confidence: f64,
    pub appearance: Option<Vec<f64>>,
    /// Ground-truth identity, only known for simulated or annotated data.
    pub identity: Option<i64>,
}

impl Detection {
    pub fn from_box(frame: u32, left: f64, top: f64, width: f64, height: f64, confidence: f64) -> Result<Self> {
        if frame == 0 {
            return Err(Error::MalformedInput("frames are 1-based".into()));
        }
        let (center, size) = box_to_center(left, top, width, height)?;
        Ok(Detection {
            frame,
            center,
            size,
            corner: Vec2::new(left, top),
            confidence,
            appearance: None,
            identity: None,
        })
    }

    pub fn from_center(frame: u32, center: Vec2, size: Vec2, confidence: f64) -> Result<Self> {
        if frame == 0 {
            return Err(Error::MalformedInput("frames are 1-based".into()));
        }
        if !(size.x > 0.0 && size.y > 0.0) {
            return Err(Error::MalformedInput(format!(
                "box size must be positive, got {}x{}",
                size.x, size.y
            )));
        }
        Ok(Detection {
            frame,
            center,
            size,
            corner: center - size * 0.5,
            confidence,
            appearance: None,
            identity: None,
        })
    }

    pub fn with_appearance(mut self, appearance: Vec<f64>) -> Self {
        self.appearance = Some(appearance);
        self
    }

    pub fn with_identity(mut self, id: i64) -> Self {
        self.identity = Some(id);
        self
    }

    /// `(left, top, width, height)`.
    pub fn to_box(&self) -> [f64; 4] {
        [self.corner.x, self.corner.y, self.size.x, self.size.y]
    }

    pub fn diagonal(&self) -> f64 {
        self.size.norm()
    }

    /// Shifts center and corner by the same offset.
    pub fn translate(&mut self, by: Vec2) {
        self.center += by;
        self.corner += by;
    }

    pub fn iou(&self, other: &Detection) -> f64 {
        let [l1, t1, w1, h1] = self.to_box();
        let [l2, t2, w2, h2] = other.to_box();
        let iw = (l1 + w1).min(l2 + w2) - l1.max(l2);
        let ih = (t1 + h1).min(t2 + h2) - t1.max(t2);
        if iw <= 0.0 || ih <= 0.0 {
            return 0.0;
        }
        let inter = iw * ih;
        inter / (w1 * h1 + w2 * h2 - inter)
    }
}

/// Detections of one target in consecutive frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Tracklet {
    pub id: usize,
    pub detections: Vec<Detection>,
    pub head_velocity: Vec2,
    pub tail_velocity: Vec2,
    /// Descriptor of the most confident detection; empty when that detection
    /// carries none.
    pub appearance: Vec<f64>,
}

impl Tracklet {
    /// Builds a tracklet, estimating endpoint velocities over `velocity_window`
    /// detections at each end.
    pub fn new(id: usize, detections: Vec<Detection>, velocity_window: usize) -> Result<Self> {
        if detections.is_empty() {
            return Err(Error::Contract(format!("tracklet {id} has no detections")));
        }
        for w in detections.windows(2) {
            if w[1].frame != w[0].frame + 1 {
                return Err(Error::Contract(format!(
                    "tracklet {id} is not consecutive: frame {} followed by {}",
                    w[0].frame, w[1].frame
                )));
            }
        }
        let mut t = Tracklet {
            id,
            detections,
            head_velocity: Vec2::ZERO,
            tail_velocity: Vec2::ZERO,
            appearance: Vec::new(),
        };
        t.head_velocity = tracklets::estimate_velocity(&t, tracklets::End::Head, velocity_window);
        t.tail_velocity = tracklets::estimate_velocity(&t, tracklets::End::Tail, velocity_window);
        t.appearance = tracklets::most_confident_detection(&t)
            .appearance
            .clone()
            .unwrap_or_default();
        Ok(t)
    }

    pub fn start(&self) -> u32 {
        self.detections[0].frame
    }

    pub fn end(&self) -> u32 {
        self.detections[self.detections.len() - 1].frame
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn head(&self) -> &Detection {
        &self.detections[0]
    }

    pub fn tail(&self) -> &Detection {
        &self.detections[self.detections.len() - 1]
    }

    /// Observed center at `frame` when covered, otherwise the constant-velocity
    /// extrapolation from the nearest endpoint.
    pub fn center_at(&self, frame: i64) -> Vec2 {
        let s = self.start() as i64;
        let e = self.end() as i64;
        if frame < s {
            self.head().center - self.head_velocity * (s - frame) as f64
        } else if frame > e {
            self.tail().center + self.tail_velocity * (frame - e) as f64
        } else {
            self.detections[(frame - s) as usize].center
        }
    }

    pub fn mean_width(&self) -> f64 {
        self.detections.iter().map(|d| d.size.x).sum::<f64>() / self.len() as f64
    }

    /// Majority ground-truth identity; `None` when no detection carries one
    /// or unlabeled detections form the majority.
    pub fn identity(&self) -> Option<i64> {
        let mut ids: Vec<Option<i64>> = self.detections.iter().map(|d| d.identity).collect();
        ids.sort();
        let mut best: (usize, Option<i64>) = (0, None);
        let mut i = 0;
        while i < ids.len() {
            let mut j = i;
            while j < ids.len() && ids[j] == ids[i] {
                j += 1;
            }
            if j - i > best.0 {
                best = (j - i, ids[i]);
            }
            i = j;
        }
        best.1
    }
}

/// A candidate link `first -> second` between two tracklets.
///
/// `first` and `second` index into the tracklet slice the node was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfNode {
    pub index: usize,
    pub first: usize,
    pub second: usize,
    /// `(z0, z1)`: probability the pair is not / is the same target.
    pub unary_prob: [f64; 2],
}

impl CrfNode {
    /// Checked constructor enforcing `0 < second.start - first.end < t_thr`.
    pub fn link(
        index: usize,
        tracklets: &[Tracklet],
        first: usize,
        second: usize,
        t_thr: u32,
        z1: f64,
    ) -> Result<Self> {
        let (a, b) = match (tracklets.get(first), tracklets.get(second)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Contract("node references a missing tracklet".into())),
        };
        let gap = b.start() as i64 - a.end() as i64;
        if !(gap > 0 && gap < t_thr as i64) {
            return Err(Error::Contract(format!(
                "tracklets {} -> {} have gap {gap}, need 0 < gap < {t_thr}",
                a.id, b.id
            )));
        }
        if !(0.0..=1.0).contains(&z1) {
            return Err(Error::Contract(format!("unary probability {z1} outside [0,1]")));
        }
        Ok(CrfNode {
            index,
            first,
            second,
            unary_prob: [1.0 - z1, z1],
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeKind {
    Consistency,
    Repellency,
}

/// A difficult node pair. `potential[λ][μ]` is the cost of labeling node `i`
/// with λ and node `j` with μ.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfEdge {
    pub i: usize,
    pub j: usize,
    pub kind: EdgeKind,
    /// Context-conditioned probabilities that `i` (resp. `j`) takes label 1.
    pub joint_prob: [f64; 2],
    pub potential: [[f64; 2]; 2],
}

impl CrfEdge {
    pub fn new(i: usize, j: usize, kind: EdgeKind) -> Self {
        CrfEdge {
            i,
            j,
            kind,
            joint_prob: [0.5, 0.5],
            potential: [[0.0; 2]; 2],
        }
    }

    /// Endpoint opposite `node`, with the potential oriented so that the
    /// first index is `node`'s label.
    pub fn oriented(&self, node: usize) -> (usize, [[f64; 2]; 2]) {
        if node == self.i {
            (self.j, self.potential)
        } else {
            let p = self.potential;
            (self.i, [[p[0][0], p[1][0]], [p[0][1], p[1][1]]])
        }
    }
}

/// The energy model: nodes, unary potentials `φ_i(λ)` and pairwise edges.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfGraph {
    pub nodes: Vec<CrfNode>,
    pub unary: Vec<[f64; 2]>,
    pub edges: Vec<CrfEdge>,
    pub adjacency: Vec<Vec<usize>>,
}

impl CrfGraph {
    /// Assembles a graph from explicit potentials.
    pub fn from_parts(nodes: Vec<CrfNode>, unary: Vec<[f64; 2]>, edges: Vec<CrfEdge>) -> Result<Self> {
        if nodes.len() != unary.len() {
            return Err(Error::Contract(format!(
                "{} nodes but {} unary rows",
                nodes.len(),
                unary.len()
            )));
        }
        let n = nodes.len();
        let mut seen = HashSet::with_capacity(edges.len());
        let mut adjacency = vec![Vec::new(); n];
        for (k, e) in edges.iter().enumerate() {
            if e.i == e.j {
                return Err(Error::Contract(format!("self-loop on node {}", e.i)));
            }
            if e.i >= n || e.j >= n {
                return Err(Error::Contract(format!("edge ({}, {}) out of range", e.i, e.j)));
            }
            if !seen.insert((e.i.min(e.j), e.i.max(e.j))) {
                return Err(Error::Contract(format!("duplicate edge ({}, {})", e.i, e.j)));
            }
            adjacency[e.i].push(k);
            adjacency[e.j].push(k);
        }
        Ok(CrfGraph {
            nodes,
            unary,
            edges,
            adjacency,
        })
    }

    /// Assembles a graph whose potentials are derived from the node unary
    /// probabilities and edge joint probabilities.
    pub fn with_potentials(nodes: Vec<CrfNode>, mut edges: Vec<CrfEdge>, w_u: f64, w_d: f64, eps: f64) -> Result<Self> {
        let unary = nodes
            .iter()
            .map(|n| potentials::unary_table(n.unary_prob[1], w_u, eps))
            .collect();
        for e in &mut edges {
            e.potential = potentials::pairwise_potential(
                potentials::clamp_prob(e.joint_prob[0]),
                potentials::clamp_prob(e.joint_prob[1]),
                w_d,
                eps,
            );
        }
        Self::from_parts(nodes, unary, edges)
    }

    /// Recomputes every potential from the stored probabilities.
    pub fn reweighted(&self, w_u: f64, w_d: f64, eps: f64) -> Self {
        let mut g = self.clone();
        for (u, n) in g.unary.iter_mut().zip(&g.nodes) {
            *u = potentials::unary_table(n.unary_prob[1], w_u, eps);
        }
        for e in &mut g.edges {
            e.potential = potentials::pairwise_potential(
                potentials::clamp_prob(e.joint_prob[0]),
                potentials::clamp_prob(e.joint_prob[1]),
                w_d,
                eps,
            );
        }
        g
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `q⁰`: the clamped unary probabilities.
    pub fn initial_labeling(&self) -> RelaxedLabeling {
        RelaxedLabeling {
            q: self
                .nodes
                .iter()
                .map(|n| {
                    let z1 = potentials::clamp_prob(n.unary_prob[1]);
                    [1.0 - z1, z1]
                })
                .collect(),
        }
    }

    /// Induced subgraph on `keep` (in the given order), reindexed from zero.
    pub fn subgraph(&self, keep: &[usize]) -> Self {
        let mut remap = vec![usize::MAX; self.len()];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new;
        }
        let nodes = keep
            .iter()
            .enumerate()
            .map(|(new, &old)| CrfNode {
                index: new,
                ..self.nodes[old].clone()
            })
            .collect();
        let unary = keep.iter().map(|&old| self.unary[old]).collect();
        let mut edges = Vec::new();
        let mut adjacency = vec![Vec::new(); keep.len()];
        for e in &self.edges {
            let (a, b) = (remap[e.i], remap[e.j]);
            if a != usize::MAX && b != usize::MAX {
                adjacency[a].push(edges.len());
                adjacency[b].push(edges.len());
                edges.push(CrfEdge {
                    i: a,
                    j: b,
                    ..e.clone()
                });
            }
        }
        CrfGraph {
            nodes,
            unary,
            edges,
            adjacency,
        }
    }
}

/// Per-node label probabilities `q[i] = [q_{i:0}, q_{i:1}]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedLabeling {
    pub q: Vec<[f64; 2]>,
}

impl RelaxedLabeling {
    pub fn uniform(n: usize) -> Self {
        RelaxedLabeling { q: vec![[0.5, 0.5]; n] }
    }

    /// One-hot encoding of a binary labeling.
    pub fn one_hot(labels: &[u8]) -> Self {
        RelaxedLabeling {
            q: labels
                .iter()
                .map(|&x| if x == 1 { [0.0, 1.0] } else { [1.0, 0.0] })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    /// Largest deviation of a row sum from one.
    pub fn simplex_violation(&self) -> f64 {
        self.q.iter().map(|r| (r[0] + r[1] - 1.0).abs()).fold(0.0, f64::max)
    }
}

/// Normalization applied after each gradient step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Projection {
    #[default]
    Softmax,
    /// Clip to `[0, 1]` and renormalize.
    ClipRenorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrfParams {
    pub w_u: f64,
    pub w_d: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub iterations: usize,
    pub t_thr_round1: u32,
    pub t_thr_round2: u32,
    pub window_size: usize,
    pub window_overlap: f64,
    pub projection: Projection,
}

impl Default for CrfParams {
    fn default() -> Self {
        CrfParams {
            w_u: 1.0,
            w_d: 1.0,
            gamma: 0.5,
            epsilon: 1e-6,
            iterations: 5,
            t_thr_round1: 20,
            t_thr_round2: 50,
            window_size: 200,
            window_overlap: 0.5,
            projection: Projection::Softmax,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.w_u >= 0.0 && self.w_u.is_finite()) {
            return bad("w_u must be finite and >= 0");
        }
        if !(self.w_d >= 0.0 && self.w_d.is_finite()) {
            return bad("w_d must be finite and >= 0");
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be finite and > 0");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be > 0");
        }
        if self.window_size == 0 {
            return bad("window_size must be > 0");
        }
        if !(0.0..1.0).contains(&self.window_overlap) {
            return bad("window_overlap must be in [0, 1)");
        }
        if self.t_thr_round1 < 2 || self.t_thr_round2 < 2 {
            return bad("T_thr must be at least 2 frames");
        }
        Ok(())
    }
}
