//! Motion features, node-pair features and the potential formulas.
//!
//! Unary potentials are `φ_i(λ) = −w_u ln(z_{i:λ} + ε)` and pairwise
//! potentials are `φ_ij(λ, μ) = −w_d ln(z_{i:λ} z_{j:μ} + ε)`, where the
//! probabilities come from pluggable [`provider`]s.

pub mod provider;

pub use provider::{
    LogisticPairwise, LogisticUnary, PairContext, PairwiseProvider, ProbabilityTable, ProviderFile, UnaryProvider,
};

use crate::error::{Error, Result};
use crate::tracklets::cosine;
use crate::types::{CrfNode, Tracklet, Vec2};

/// Probabilities are clamped into `[PROB_FLOOR, 1 − PROB_FLOOR]` before use.
pub const PROB_FLOOR: f64 = 1e-6;

pub fn clamp_prob(z: f64) -> f64 {
    z.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Constant-velocity prediction residuals between two tracklets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionFeature {
    pub dp1: Vec2,
    pub dp2: Vec2,
}

impl MotionFeature {
    pub fn sentinel(value: f64) -> Self {
        MotionFeature {
            dp1: Vec2::new(value, value),
            dp2: Vec2::new(value, value),
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.dp1.x, self.dp1.y, self.dp2.x, self.dp2.y]
    }

    pub fn from_slice(s: &[f64]) -> Self {
        MotionFeature {
            dp1: Vec2::new(s[0], s[1]),
            dp2: Vec2::new(s[2], s[3]),
        }
    }
}

/// Forward prediction of `tk` against the head of `tm` (`dp1`) and backward
/// prediction of `tm` against the tail of `tk` (`dp2`).
pub fn motion_feature_pair(tk: &Tracklet, tm: &Tracklet) -> Result<MotionFeature> {
    let gap = tm.start() as i64 - tk.end() as i64;
    if gap <= 0 {
        return Err(Error::Contract(format!(
            "motion feature needs {} to start after {} ends (gap {gap})",
            tm.id, tk.id
        )));
    }
    let g = gap as f64;
    let pk = tk.tail().center;
    let pm = tm.head().center;
    Ok(MotionFeature {
        dp1: pk + tk.tail_velocity * g - pm,
        dp2: pm - tm.head_velocity * g - pk,
    })
}

/// Relative-motion feature of two nodes, evaluated at
/// `t_x = min(end(T_i1), end(T_j1))`.
pub fn motion_feature_nodepair(tracklets: &[Tracklet], vi: &CrfNode, vj: &CrfNode) -> MotionFeature {
    let (i1, i2) = (&tracklets[vi.first], &tracklets[vi.second]);
    let (j1, j2) = (&tracklets[vj.first], &tracklets[vj.second]);
    let tx = i1.end().min(j1.end()) as i64;
    let back = |t: &Tracklet| t.head().center - t.head_velocity * (t.start() as i64 - tx) as f64;
    MotionFeature {
        dp1: back(i2) - back(j2),
        dp2: i1.center_at(tx) - j1.center_at(tx),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureConfig {
    /// Appearance descriptor dimension `d_a`.
    pub appearance_dim: usize,
    /// Value filling motion features of temporally invalid cross pairings.
    pub sentinel: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            appearance_dim: 16,
            sentinel: 1e4,
        }
    }
}

impl FeatureConfig {
    pub fn pair_dim(&self) -> usize {
        4 * self.appearance_dim + 20
    }
}

/// Concatenated node-pair feature: appearance of `T_i1, T_i2, T_j1, T_j2`,
/// then motion features of `(i1,i2), (i1,j2), (j1,i2), (j1,j2)` and the
/// node-pair motion feature.
#[derive(Clone, Debug, PartialEq)]
pub struct NodePairFeature {
    pub values: Vec<f64>,
    pub appearance_dim: usize,
}

impl NodePairFeature {
    /// Appearance block `k` in `0..4`.
    pub fn appearance(&self, k: usize) -> &[f64] {
        let d = self.appearance_dim;
        &self.values[k * d..(k + 1) * d]
    }

    /// Motion block `k` in `0..5`.
    pub fn motion(&self, k: usize) -> MotionFeature {
        let o = 4 * self.appearance_dim + 4 * k;
        MotionFeature::from_slice(&self.values[o..o + 4])
    }
}

fn appearance_block(t: &Tracklet, d: usize) -> Result<Vec<f64>> {
    if t.appearance.is_empty() {
        Ok(vec![0.0; d])
    } else if t.appearance.len() == d {
        Ok(t.appearance.clone())
    } else {
        Err(Error::Contract(format!(
            "tracklet {} has a {}-dim descriptor, expected {d}",
            t.id,
            t.appearance.len()
        )))
    }
}

pub fn node_pair_feature(
    tracklets: &[Tracklet],
    vi: &CrfNode,
    vj: &CrfNode,
    cfg: &FeatureConfig,
) -> Result<NodePairFeature> {
    let d = cfg.appearance_dim;
    let ts = [
        &tracklets[vi.first],
        &tracklets[vi.second],
        &tracklets[vj.first],
        &tracklets[vj.second],
    ];
    let mut values = Vec::with_capacity(cfg.pair_dim());
    for t in ts {
        values.extend(appearance_block(t, d)?);
    }
    let cross = |a: &Tracklet, b: &Tracklet| {
        motion_feature_pair(a, b).unwrap_or_else(|_| MotionFeature::sentinel(cfg.sentinel))
    };
    for (a, b) in [(0, 1), (0, 3), (2, 1), (2, 3)] {
        values.extend(cross(ts[a], ts[b]).to_array());
    }
    values.extend(motion_feature_nodepair(tracklets, vi, vj).to_array());
    debug_assert_eq!(values.len(), cfg.pair_dim());
    Ok(NodePairFeature {
        values,
        appearance_dim: d,
    })
}

/// Number of unary logistic inputs.
pub const UNARY_DIM: usize = 4;

/// `[cos(f_a(T1), f_a(T2)), |dp1|/D, |dp2|/D, gap/T_thr]` with `D` the mean
/// diagonal of the two endpoint boxes.
pub fn unary_features(first: &Tracklet, second: &Tracklet, t_thr: u32) -> Result<[f64; UNARY_DIM]> {
    let m = motion_feature_pair(first, second)?;
    let diag = 0.5 * (first.tail().diagonal() + second.head().diagonal());
    let gap = (second.start() - first.end()) as f64;
    Ok([
        cosine(&first.appearance, &second.appearance),
        m.dp1.norm() / diag,
        m.dp2.norm() / diag,
        gap / t_thr as f64,
    ])
}

/// Number of inputs of each pairwise logistic head.
pub const PAIR_EMBED_DIM: usize = 19;

/// Which node of the pair the embedding is oriented towards.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    I,
    J,
}

/// Link evidence of one node: appearance similarity, motion residuals
/// relative to the box diagonal, and the gap over `gap_scale`.
fn link_evidence(tracklets: &[Tracklet], n: &CrfNode, m: MotionFeature, gap_scale: f64) -> [f64; 4] {
    let (a, b) = (&tracklets[n.first], &tracklets[n.second]);
    let diag = (0.5 * (a.tail().diagonal() + b.head().diagonal())).max(1e-9);
    let gap = b.start() as f64 - a.end() as f64;
    [
        cosine(&a.appearance, &b.appearance),
        m.dp1.norm() / diag,
        m.dp2.norm() / diag,
        gap / gap_scale,
    ]
}

/// Fixed embedding of a node pair, oriented towards one node: the link
/// evidence of the node itself and of the other node (again gated on the two
/// nodes sharing a tracklet), the appearance
/// similarities and motion residuals of the crossed pairings, the node-pair
/// motion, and whether the two nodes share a tracklet.
pub fn pair_embedding(ctx: &PairContext<'_>, side: Side, scale: f64, gap_scale: f64) -> [f64; PAIR_EMBED_DIM] {
    let f = ctx.feature;
    // appearance blocks: 0=i1 1=i2 2=j1 3=j2; motion: 0=(i1,i2) 1=(i1,j2) 2=(j1,i2) 3=(j1,j2) 4=node pair
    let (own, oth, own1, own2, oth1, oth2, m_own, m_own_oth, m_oth_own, m_oth) = match side {
        Side::I => (ctx.vi, ctx.vj, 0, 1, 2, 3, 0, 1, 2, 3),
        Side::J => (ctx.vj, ctx.vi, 2, 3, 0, 1, 3, 2, 1, 0),
    };
    let squash = |v: Vec2| (v.norm() / scale).ln_1p();
    let both = |m: MotionFeature| 0.5 * (squash(m.dp1) + squash(m.dp2));
    let mine = link_evidence(ctx.tracklets, own, f.motion(m_own), gap_scale);
    let theirs = link_evidence(ctx.tracklets, oth, f.motion(m_oth), gap_scale);
    let np = f.motion(4);
    let shares = if own.first == oth.first || own.second == oth.second {
        1.0
    } else {
        0.0
    };
    [
        mine[0],
        mine[1],
        mine[2],
        mine[3],
        theirs[0],
        theirs[1],
        theirs[2],
        theirs[3],
        shares * theirs[0],
        shares * theirs[1],
        shares * theirs[2],
        shares * theirs[3],
        cosine(f.appearance(own1), f.appearance(oth2)),
        cosine(f.appearance(oth1), f.appearance(own2)),
        both(f.motion(m_own_oth)),
        both(f.motion(m_oth_own)),
        squash(np.dp1),
        squash(np.dp2),
        shares,
    ]
}

/// `−w_u ln(z + ε)`.
pub fn unary_potential(z: f64, w_u: f64, eps: f64) -> f64 {
    -w_u * (z + eps).ln()
}

/// `[φ(0), φ(1)]` for a node whose clamped label-1 probability is `z1`.
pub fn unary_table(z1: f64, w_u: f64, eps: f64) -> [f64; 2] {
    let z1 = clamp_prob(z1);
    [unary_potential(1.0 - z1, w_u, eps), unary_potential(z1, w_u, eps)]
}

/// Table `φ(λ, μ) = −w_d ln(z_{i:λ} z_{j:μ} + ε)` from the label-1
/// probabilities `zi`, `zj`.
pub fn pairwise_potential(zi: f64, zj: f64, w_d: f64, eps: f64) -> [[f64; 2]; 2] {
    let pi = [1.0 - zi, zi];
    let pj = [1.0 - zj, zj];
    let mut t = [[0.0; 2]; 2];
    for l in 0..2 {
        for m in 0..2 {
            t[l][m] = -w_d * (pi[l] * pj[m] + eps).ln();
        }
    }
    t
}
