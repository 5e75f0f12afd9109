//! CRF graph construction: nodes from linkable tracklet pairs, edges from
//! difficult node pairs.

use std::fmt::Write as _;

use crate::error::Result;
use crate::par::{self, Execution};
use crate::potentials::{node_pair_feature, FeatureConfig, PairContext, PairwiseProvider, UnaryProvider};
use crate::types::{CrfEdge, CrfGraph, CrfNode, CrfParams, EdgeKind, Tracklet};

/// Endpoint-proximity radius.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TauClose {
    Pixels(f64),
    /// Multiple of the mean box width of the two tracklets compared.
    WidthMultiple(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DifficultPairConfig {
    pub tau_close: TauClose,
    /// Maximum endpoint frame offset, in frames.
    pub delta_t: u32,
}

impl Default for DifficultPairConfig {
    fn default() -> Self {
        DifficultPairConfig {
            tau_close: TauClose::WidthMultiple(2.0),
            delta_t: 10,
        }
    }
}

impl DifficultPairConfig {
    fn radius(&self, a: &Tracklet, b: &Tracklet) -> f64 {
        match self.tau_close {
            TauClose::Pixels(r) => r,
            TauClose::WidthMultiple(k) => k * 0.5 * (a.mean_width() + b.mean_width()),
        }
    }

    fn tail_close(&self, a: &Tracklet, b: &Tracklet) -> bool {
        if a.end().abs_diff(b.end()) > self.delta_t {
            return false;
        }
        let t = a.end().min(b.end()) as i64;
        (a.center_at(t) - b.center_at(t)).norm() <= self.radius(a, b)
    }

    fn head_close(&self, a: &Tracklet, b: &Tracklet) -> bool {
        if a.start().abs_diff(b.start()) > self.delta_t {
            return false;
        }
        let t = a.start().max(b.start()) as i64;
        (a.center_at(t) - b.center_at(t)).norm() <= self.radius(a, b)
    }
}

/// One node per ordered pair with `0 < start(b) − end(a) < t_thr`, sorted by
/// `(start(b), end(a), id(a), id(b))`.
pub fn build_nodes(tracklets: &[Tracklet], t_thr: u32, provider: &dyn UnaryProvider) -> Vec<CrfNode> {
    let mut pairs = Vec::new();
    for (a, ta) in tracklets.iter().enumerate() {
        for (b, tb) in tracklets.iter().enumerate() {
            let gap = tb.start() as i64 - ta.end() as i64;
            if gap > 0 && gap < t_thr as i64 {
                pairs.push((a, b));
            }
        }
    }
    pairs.sort_by_key(|&(a, b)| {
        (
            tracklets[b].start(),
            tracklets[a].end(),
            tracklets[a].id,
            tracklets[b].id,
        )
    });
    pairs
        .into_iter()
        .enumerate()
        .map(|(index, (first, second))| {
            let z1 = provider
                .link_probability(tracklets, first, second, t_thr)
                .clamp(0.0, 1.0);
            CrfNode {
                index,
                first,
                second,
                unary_prob: [1.0 - z1, z1],
            }
        })
        .collect()
}

/// Classifies one node pair, if it is difficult.
pub fn classify_pair(
    tracklets: &[Tracklet],
    vi: &CrfNode,
    vj: &CrfNode,
    cfg: &DifficultPairConfig,
) -> Option<EdgeKind> {
    if vi.first == vj.first || vi.second == vj.second {
        return Some(EdgeKind::Repellency);
    }
    if vi.first == vj.second || vi.second == vj.first {
        // a chain through a shared tracklet is not a conflict
        return None;
    }
    let close = cfg.tail_close(&tracklets[vi.first], &tracklets[vj.first])
        || cfg.head_close(&tracklets[vi.second], &tracklets[vj.second]);
    close.then_some(EdgeKind::Consistency)
}

/// All difficult node pairs with `i < j`, sorted. Probabilities and
/// potentials are left at their neutral defaults.
pub fn find_difficult_pairs(
    tracklets: &[Tracklet],
    nodes: &[CrfNode],
    cfg: &DifficultPairConfig,
    exec: Execution,
) -> Vec<CrfEdge> {
    par::map_range(exec, nodes.len(), |i| {
        (i + 1..nodes.len())
            .filter_map(|j| classify_pair(tracklets, &nodes[i], &nodes[j], cfg).map(|k| CrfEdge::new(i, j, k)))
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Everything needed to turn tracklets into a potential-filled graph.
#[derive(Clone, Copy)]
pub struct GraphInputs<'a> {
    pub unary: &'a dyn UnaryProvider,
    pub pairwise: &'a dyn PairwiseProvider,
    pub difficult: &'a DifficultPairConfig,
    pub features: &'a FeatureConfig,
    pub params: &'a CrfParams,
}

/// Builds nodes and edges, queries both providers and evaluates potentials.
pub fn build_graph(tracklets: &[Tracklet], t_thr: u32, inputs: GraphInputs<'_>, exec: Execution) -> Result<CrfGraph> {
    let nodes = build_nodes(tracklets, t_thr, inputs.unary);
    let mut edges = find_difficult_pairs(tracklets, &nodes, inputs.difficult, exec);
    let probs = par::map(exec, &edges, |e| -> Result<[f64; 2]> {
        let (vi, vj) = (&nodes[e.i], &nodes[e.j]);
        let feature = node_pair_feature(tracklets, vi, vj, inputs.features)?;
        let p = inputs.pairwise.joint_probability(&PairContext {
            tracklets,
            vi,
            vj,
            feature: &feature,
        });
        Ok([p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)])
    });
    for (e, p) in edges.iter_mut().zip(probs) {
        e.joint_prob = p?;
    }
    let p = inputs.params;
    CrfGraph::with_potentials(nodes, edges, p.w_u, p.w_d, p.epsilon)
}

/// Debug dump: `(nodes.csv, edges.csv)` contents.
pub fn graph_to_csv(g: &CrfGraph, tracklets: &[Tracklet]) -> (String, String) {
    let mut nodes = String::from("index,first,second,z0,z1,phi0,phi1\n");
    for (n, u) in g.nodes.iter().zip(&g.unary) {
        let _ = writeln!(
            nodes,
            "{},{},{},{},{},{},{}",
            n.index, tracklets[n.first].id, tracklets[n.second].id, n.unary_prob[0], n.unary_prob[1], u[0], u[1]
        );
    }
    let mut edges = String::from("i,j,kind,zi,zj,phi00,phi01,phi10,phi11\n");
    for e in &g.edges {
        let kind = match e.kind {
            EdgeKind::Consistency => "consistency",
            EdgeKind::Repellency => "repellency",
        };
        let p = e.potential;
        let _ = writeln!(
            edges,
            "{},{},{kind},{},{},{},{},{},{}",
            e.i, e.j, e.joint_prob[0], e.joint_prob[1], p[0][0], p[0][1], p[1][0], p[1][1]
        );
    }
    (nodes, edges)
}
