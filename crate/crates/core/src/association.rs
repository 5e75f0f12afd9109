//! Window batching, CRF and unary-only association, stitching and
//! fragment interpolation.

use std::collections::{HashMap, HashSet};
use std::ops::Range;

use crate::error::{Error, Result};
use crate::graph::{build_nodes, find_difficult_pairs, DifficultPairConfig};
use crate::inference::{self, InferenceTrace};
use crate::par::{self, Execution};
use crate::potentials::{node_pair_feature, FeatureConfig, PairContext, PairwiseProvider, UnaryProvider};
use crate::tracklets::LinkThresholds;
use crate::types::{CrfGraph, CrfNode, CrfParams, Detection, Tracklet, Vec2};

/// Consecutive detections of one output trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub id: usize,
    pub detections: Vec<Detection>,
    pub interpolated: Vec<bool>,
}

impl Track {
    pub fn start(&self) -> u32 {
        self.detections[0].frame
    }

    pub fn end(&self) -> u32 {
        self.detections[self.detections.len() - 1].frame
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrackSet {
    pub tracks: Vec<Track>,
}

impl TrackSet {
    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    /// Total number of boxes, interpolated ones included.
    pub fn box_count(&self) -> usize {
        self.tracks.iter().map(|t| t.detections.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mode {
    Unary,
    #[default]
    Crf,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unary" => Ok(Mode::Unary),
            "crf" => Ok(Mode::Crf),
            other => Err(Error::Config(format!("unknown mode `{other}` (expected unary or crf)"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Unary => "unary",
            Mode::Crf => "crf",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AssociationConfig {
    pub params: CrfParams,
    pub link: LinkThresholds,
    pub difficult: DifficultPairConfig,
    pub features: FeatureConfig,
    pub mode: Mode,
}

#[derive(Clone, Copy)]
pub struct Providers<'a> {
    pub unary: &'a dyn UnaryProvider,
    pub pairwise: &'a dyn PairwiseProvider,
}

/// `[start, end)` node ranges of consecutive windows.
pub fn sliding_windows(n_nodes: usize, window_size: usize, overlap: f64) -> Vec<Range<usize>> {
    let window_size = window_size.max(1);
    let step = ((window_size as f64 * (1.0 - overlap)).ceil() as usize).clamp(1, window_size);
    let mut out = Vec::new();
    let mut start = 0;
    while start < n_nodes {
        let end = (start + window_size).min(n_nodes);
        out.push(start..end);
        if end == n_nodes {
            break;
        }
        start += step;
    }
    out
}

/// Result of one association round.
#[derive(Clone, Debug, PartialEq)]
pub struct Association {
    pub nodes: Vec<CrfNode>,
    pub labels: Vec<u8>,
    /// One trace per window, in window order. Empty in unary mode.
    pub traces: Vec<InferenceTrace>,
    /// Difficult pairs evaluated, summed over windows.
    pub edges: usize,
}

/// Runs inference and decoding per window, finalizes each node's label in
/// the first window where it is not in the trailing overlap, then repairs
/// the combined labeling.
///
/// Edges are only built between nodes that share a window, so each window
/// graph equals the induced subgraph of the full graph.
pub fn associate_crf(
    tracklets: &[Tracklet],
    t_thr: u32,
    cfg: &AssociationConfig,
    providers: Providers<'_>,
    exec: Execution,
) -> Result<Association> {
    let nodes = build_nodes(tracklets, t_thr, providers.unary);
    let windows = sliding_windows(nodes.len(), cfg.params.window_size, cfg.params.window_overlap);
    let per_window = par::map(exec, &windows, |w| -> Result<_> {
        let local: Vec<CrfNode> = nodes[w.clone()]
            .iter()
            .enumerate()
            .map(|(k, n)| CrfNode { index: k, ..n.clone() })
            .collect();
        let g = window_graph(tracklets, local, cfg, providers)?;
        let trace = inference::infer(&g, &cfg.params);
        let labels = inference::decode(&trace.final_q, &g);
        Ok((labels, trace, g.edges.len()))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut labels = vec![0u8; nodes.len()];
    let mut conf = vec![0.0; nodes.len()];
    for (k, (w, (wl, trace, _))) in windows.iter().zip(&per_window).enumerate() {
        let owned_end = windows.get(k + 1).map_or(w.end, |next| next.start);
        for i in w.start..owned_end {
            labels[i] = wl[i - w.start];
            conf[i] = trace.final_q.q[i - w.start][1];
        }
    }
    let mut candidates: Vec<usize> = (0..nodes.len()).filter(|&i| labels[i] == 1).collect();
    candidates.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]).then(a.cmp(&b)));
    let labels = inference::repair(&nodes, &candidates);
    let edges = per_window.iter().map(|p| p.2).sum();
    Ok(Association {
        nodes,
        labels,
        traces: per_window.into_iter().map(|p| p.1).collect(),
        edges,
    })
}

fn window_graph(
    tracklets: &[Tracklet],
    nodes: Vec<CrfNode>,
    cfg: &AssociationConfig,
    providers: Providers<'_>,
) -> Result<CrfGraph> {
    let mut edges = find_difficult_pairs(tracklets, &nodes, &cfg.difficult, Execution::Sequential);
    for e in &mut edges {
        let (vi, vj) = (&nodes[e.i], &nodes[e.j]);
        let feature = node_pair_feature(tracklets, vi, vj, &cfg.features)?;
        let p = providers.pairwise.joint_probability(&PairContext {
            tracklets,
            vi,
            vj,
            feature: &feature,
        });
        e.joint_prob = [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)];
    }
    let p = &cfg.params;
    CrfGraph::with_potentials(nodes, edges, p.w_u, p.w_d, p.epsilon)
}

/// Minimum-cost assignment of rows to columns.
///
/// Infinite entries are forbidden pairs. With `no_assign = Some(c0)` every
/// row may stay unassigned at cost `c0`; otherwise `min(n, m)` pairs are
/// assigned and the problem must be feasible. Ties prefer lower indices.
pub fn hungarian(cost: &[Vec<f64>], no_assign: Option<f64>) -> Vec<Option<usize>> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    debug_assert!(cost.iter().all(|r| r.len() == m));
    match no_assign {
        Some(c0) => {
            let padded: Vec<Vec<f64>> = cost
                .iter()
                .enumerate()
                .map(|(i, row)| {
                    let mut r = row.clone();
                    r.extend((0..n).map(|k| if k == i { c0 } else { f64::INFINITY }));
                    r
                })
                .collect();
            solve_rows(&padded).into_iter().map(|c| c.filter(|&c| c < m)).collect()
        }
        None if n <= m => solve_rows(cost),
        None => {
            let t: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| cost[i][j]).collect()).collect();
            let cols = solve_rows(&t);
            let mut rows = vec![None; n];
            for (j, i) in cols.into_iter().enumerate() {
                if let Some(i) = i {
                    rows[i] = Some(j);
                }
            }
            rows
        }
    }
}

/// Shortest augmenting path with potentials, `n ≤ m`.
fn solve_rows(a: &[Vec<f64>]) -> Vec<Option<usize>> {
    let n = a.len();
    let m = a[0].len();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: row (1-based) matched to column j; column 0 is the virtual root
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = usize::MAX;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            if j1 == usize::MAX {
                // no reachable column: the row stays unassigned
                break;
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                loop {
                    let j1 = way[j0];
                    p[j0] = p[j1];
                    j0 = j1;
                    if j0 == 0 {
                        break;
                    }
                }
                break;
            }
        }
    }
    let mut rows = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            rows[p[j] - 1] = Some(j - 1);
        }
    }
    rows
}

/// Unary-only baseline: one bipartite problem of predecessors against
/// successors with cost `−ln(z₁ + ε)` and no-assignment cost `−ln 0.5`.
pub fn associate_unary(
    tracklets: &[Tracklet],
    t_thr: u32,
    params: &CrfParams,
    provider: &dyn UnaryProvider,
) -> (Vec<CrfNode>, Vec<u8>) {
    let nodes = build_nodes(tracklets, t_thr, provider);
    let labels = unary_labels(&nodes, params.epsilon);
    (nodes, labels)
}

pub fn unary_labels(nodes: &[CrfNode], eps: f64) -> Vec<u8> {
    let mut rows: Vec<usize> = nodes.iter().map(|n| n.first).collect();
    let mut cols: Vec<usize> = nodes.iter().map(|n| n.second).collect();
    rows.sort_unstable();
    rows.dedup();
    cols.sort_unstable();
    cols.dedup();
    let row_of: HashMap<usize, usize> = rows.iter().enumerate().map(|(r, &t)| (t, r)).collect();
    let col_of: HashMap<usize, usize> = cols.iter().enumerate().map(|(c, &t)| (t, c)).collect();
    let mut cost = vec![vec![f64::INFINITY; cols.len()]; rows.len()];
    let mut node_at = HashMap::new();
    for (k, n) in nodes.iter().enumerate() {
        let (r, c) = (row_of[&n.first], col_of[&n.second]);
        cost[r][c] = -(n.unary_prob[1] + eps).ln();
        node_at.insert((r, c), k);
    }
    let assignment = hungarian(&cost, Some(-(0.5f64).ln()));
    let mut labels = vec![0u8; nodes.len()];
    for (r, c) in assignment.into_iter().enumerate() {
        if let Some(c) = c {
            labels[node_at[&(r, c)]] = 1;
        }
    }
    labels
}

/// Checks that no tracklet has two successors or two predecessors.
pub fn validate_links(nodes: &[CrfNode], labels: &[u8]) -> Result<()> {
    let mut succ = HashSet::new();
    let mut pred = HashSet::new();
    for (n, &l) in nodes.iter().zip(labels) {
        if l == 1 && (!succ.insert(n.first) || !pred.insert(n.second)) {
            return Err(Error::Contract(format!(
                "link {} -> {} reuses a tracklet",
                n.first, n.second
            )));
        }
    }
    Ok(())
}

/// Joins linked pieces into chains. `pieces[k]` holds detections and
/// interpolation flags of tracklet `k`; ids follow earliest start frame.
fn stitch_pieces(pieces: &[(&[Detection], &[bool])], nodes: &[CrfNode], labels: &[u8]) -> Result<TrackSet> {
    validate_links(nodes, labels)?;
    let mut next = vec![None; pieces.len()];
    let mut has_pred = vec![false; pieces.len()];
    for (n, &l) in nodes.iter().zip(labels) {
        if l == 1 {
            next[n.first] = Some(n.second);
            has_pred[n.second] = true;
        }
    }
    let mut heads: Vec<usize> = (0..pieces.len()).filter(|&k| !has_pred[k]).collect();
    heads.sort_by_key(|&k| (pieces[k].0[0].frame, k));
    let mut visited = 0;
    let mut tracks = Vec::with_capacity(heads.len());
    for (id, &h) in heads.iter().enumerate() {
        let mut detections = Vec::new();
        let mut interpolated = Vec::new();
        let mut cur = Some(h);
        while let Some(k) = cur {
            visited += 1;
            if visited > pieces.len() {
                return Err(Error::Contract("cyclic links".into()));
            }
            if let Some(last) = detections.last() {
                let last: &Detection = last;
                if pieces[k].0[0].frame <= last.frame {
                    return Err(Error::Contract(format!("link into tracklet {k} goes back in time")));
                }
            }
            detections.extend_from_slice(pieces[k].0);
            interpolated.extend_from_slice(pieces[k].1);
            cur = next[k];
        }
        tracks.push(Track {
            id,
            detections,
            interpolated,
        });
    }
    if visited != pieces.len() {
        return Err(Error::Contract("cyclic links".into()));
    }
    Ok(TrackSet { tracks })
}

/// Chains of label-1 links become tracks; unlinked tracklets stay alone.
pub fn stitch(tracklets: &[Tracklet], nodes: &[CrfNode], labels: &[u8]) -> Result<TrackSet> {
    let flags: Vec<Vec<bool>> = tracklets.iter().map(|t| vec![false; t.len()]).collect();
    let pieces: Vec<(&[Detection], &[bool])> = tracklets
        .iter()
        .zip(&flags)
        .map(|(t, f)| (t.detections.as_slice(), f.as_slice()))
        .collect();
    stitch_pieces(&pieces, nodes, labels)
}

/// Fills every frame gap with linearly interpolated boxes of confidence 0.
pub fn interpolate(track: &Track) -> Track {
    let mut detections = Vec::with_capacity(track.detections.len());
    let mut interpolated = Vec::with_capacity(track.detections.len());
    for (k, (d, &flag)) in track.detections.iter().zip(&track.interpolated).enumerate() {
        if let Some(prev) = k.checked_sub(1).map(|p| &track.detections[p]) {
            let span = (d.frame - prev.frame) as f64;
            for f in prev.frame + 1..d.frame {
                let a = (f - prev.frame) as f64 / span;
                let lerp = |x: Vec2, y: Vec2| x * (1.0 - a) + y * a;
                let mut fill = Detection::from_center(f, lerp(prev.center, d.center), lerp(prev.size, d.size), 0.0)
                    .expect("interpolated sizes stay positive");
                fill.identity = None;
                detections.push(fill);
                interpolated.push(true);
            }
        }
        detections.push(d.clone());
        interpolated.push(flag);
    }
    Track {
        id: track.id,
        detections,
        interpolated,
    }
}

/// Everything produced by the tracking pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackingOutput {
    pub tracklets: Vec<Tracklet>,
    pub rounds: Vec<Association>,
    pub tracks: TrackSet,
}

fn associate_round(
    tracklets: &[Tracklet],
    t_thr: u32,
    cfg: &AssociationConfig,
    providers: Providers<'_>,
    exec: Execution,
) -> Result<Association> {
    match cfg.mode {
        Mode::Crf => associate_crf(tracklets, t_thr, cfg, providers, exec),
        Mode::Unary => {
            let (nodes, labels) = associate_unary(tracklets, t_thr, &cfg.params, providers.unary);
            Ok(Association {
                nodes,
                labels,
                traces: Vec::new(),
                edges: 0,
            })
        }
    }
}

/// Round one over the input tracklets, round two over the interpolated
/// round-one tracks, then a final stitch and interpolation.
pub fn two_round(
    tracklets: &[Tracklet],
    cfg: &AssociationConfig,
    providers: Providers<'_>,
    exec: Execution,
) -> Result<(Vec<Association>, TrackSet)> {
    let p = &cfg.params;
    let r1 = associate_round(tracklets, p.t_thr_round1, cfg, providers, exec)?;
    let first = stitch(tracklets, &r1.nodes, &r1.labels)?;
    let first: Vec<Track> = first.tracks.iter().map(interpolate).collect();

    let round2_tracklets = first
        .iter()
        .enumerate()
        .map(|(k, t)| Tracklet::new(k, t.detections.clone(), cfg.link.velocity_window))
        .collect::<Result<Vec<_>>>()?;
    let r2 = associate_round(&round2_tracklets, p.t_thr_round2, cfg, providers, exec)?;
    let pieces: Vec<(&[Detection], &[bool])> = first
        .iter()
        .map(|t| (t.detections.as_slice(), t.interpolated.as_slice()))
        .collect();
    let stitched = stitch_pieces(&pieces, &r2.nodes, &r2.labels)?;
    let tracks = TrackSet {
        tracks: stitched.tracks.iter().map(interpolate).collect(),
    };
    Ok((vec![r1, r2], tracks))
}

/// Detections to tracklets to tracks.
pub fn track(
    detections: Vec<Detection>,
    cfg: &AssociationConfig,
    providers: Providers<'_>,
    exec: Execution,
) -> Result<TrackingOutput> {
    cfg.params.validate()?;
    let frames = crate::tracklets::group_by_frame(detections);
    let tracklets = crate::tracklets::link_detections(&frames, &cfg.link);
    let (rounds, tracks) = two_round(&tracklets, cfg, providers, exec)?;
    Ok(TrackingOutput {
        tracklets,
        rounds,
        tracks,
    })
}

/// Checks an output track set: strictly increasing frames per track and no
/// observed box claimed by two tracks.
pub fn validate_trackset(ts: &TrackSet) -> Result<()> {
    let mut claimed = HashSet::new();
    for t in &ts.tracks {
        if t.detections.len() != t.interpolated.len() {
            return Err(Error::Contract(format!("track {} has mismatched flags", t.id)));
        }
        for w in t.detections.windows(2) {
            if w[1].frame <= w[0].frame {
                return Err(Error::Contract(format!(
                    "track {} repeats or reverses frame {}",
                    t.id, w[1].frame
                )));
            }
        }
        for (d, &interp) in t.detections.iter().zip(&t.interpolated) {
            if interp {
                continue;
            }
            let key = (d.frame, d.to_box().map(f64::to_bits));
            if !claimed.insert(key) {
                return Err(Error::Contract(format!(
                    "box at frame {} claimed by two tracks",
                    d.frame
                )));
            }
        }
    }
    Ok(())
}
