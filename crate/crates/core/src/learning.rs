//! End-to-end fitting of `(w_u, w_d, γ)` and the logistic providers by
//! minimizing the cross-entropy of `q^T` against ground-truth node labels.
//!
//! The gradient is accumulated in reverse through the unrolled iterations.
//! [`param_gradient_fd`] is the central-difference reference.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use std::path::Path;

use crate::association::{hungarian, sliding_windows, TrackSet};
use crate::config::{params_to_text, read_params};
use crate::error::{Error, Result};
use crate::evalsim::mot::write_atomic;
use crate::graph::{build_nodes, find_difficult_pairs, DifficultPairConfig};
use crate::par::{self, Execution};
use crate::potentials::{
    clamp_prob, node_pair_feature, unary_features, FeatureConfig, LogisticPairwise, LogisticUnary, PairContext,
    ProviderFile, PAIR_EMBED_DIM, PROB_FLOOR, UNARY_DIM,
};
use crate::tracklets::{group_by_frame, link_detections, LinkThresholds};
use crate::types::{CrfEdge, CrfGraph, CrfNode, CrfParams, Detection, Projection, RelaxedLabeling, Tracklet};

/// Smallest probability the loss takes a logarithm of.
pub const LOSS_FLOOR: f64 = 1e-9;

/// Inference parameters plus both providers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Model {
    pub params: CrfParams,
    pub unary: LogisticUnary,
    pub pairwise: LogisticPairwise,
}

const HEAD: usize = PAIR_EMBED_DIM + 1;
const U0: usize = 3;
const P0: usize = U0 + UNARY_DIM + 1;
/// Length of the trainable vector: `w_u, w_d, γ`, unary weights and bias,
/// then the two pairwise heads.
pub const N_PARAMS: usize = P0 + 2 * HEAD;

impl Model {
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = vec![self.params.w_u, self.params.w_d, self.params.gamma];
        v.extend_from_slice(&self.unary.weights);
        v.push(self.unary.bias);
        for h in &self.pairwise.heads {
            v.extend_from_slice(h);
        }
        v
    }

    pub fn set_vector(&mut self, v: &[f64]) {
        assert_eq!(v.len(), N_PARAMS);
        self.params.w_u = v[0];
        self.params.w_d = v[1];
        self.params.gamma = v[2];
        self.unary.weights.copy_from_slice(&v[U0..U0 + UNARY_DIM]);
        self.unary.bias = v[U0 + UNARY_DIM];
        for (k, h) in self.pairwise.heads.iter_mut().enumerate() {
            h.copy_from_slice(&v[P0 + k * HEAD..P0 + (k + 1) * HEAD]);
        }
    }

    pub fn with_vector(&self, v: &[f64]) -> Self {
        let mut m = self.clone();
        m.set_vector(v);
        m
    }
}

/// A window of nodes with precomputed provider inputs and target labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingWindow {
    /// Potentials from the model the window was built with.
    pub graph: CrfGraph,
    pub unary_x: Vec<[f64; UNARY_DIM]>,
    /// Oriented embeddings per edge, for node `i` and node `j`.
    pub edge_x: Vec<[[f64; PAIR_EMBED_DIM]; 2]>,
    pub gt_labels: Vec<u8>,
}

struct Potentials {
    z: Vec<f64>,
    z_raw: Vec<f64>,
    ab: Vec<[f64; 2]>,
    ab_raw: Vec<[f64; 2]>,
    graph: CrfGraph,
}

impl TrainingWindow {
    fn potentials(&self, m: &Model) -> Potentials {
        let z_raw: Vec<f64> = self.unary_x.iter().map(|x| m.unary.probability(x)).collect();
        let ab_raw: Vec<[f64; 2]> = self
            .edge_x
            .iter()
            .map(|[ei, ej]| [m.pairwise.head_probability(0, ei), m.pairwise.head_probability(1, ej)])
            .collect();
        let mut nodes = self.graph.nodes.clone();
        for (n, &z) in nodes.iter_mut().zip(&z_raw) {
            n.unary_prob = [1.0 - z, z];
        }
        let mut edges = self.graph.edges.clone();
        for (e, p) in edges.iter_mut().zip(&ab_raw) {
            e.joint_prob = *p;
        }
        let graph = CrfGraph::with_potentials(nodes, edges, m.params.w_u, m.params.w_d, m.params.epsilon)
            .expect("structure was validated when the window was built");
        Potentials {
            z: z_raw.iter().map(|&z| clamp_prob(z)).collect(),
            ab: ab_raw.iter().map(|p| [clamp_prob(p[0]), clamp_prob(p[1])]).collect(),
            z_raw,
            ab_raw,
            graph,
        }
    }

    /// Window graph with potentials from `m`.
    pub fn graph_for(&self, m: &Model) -> CrfGraph {
        self.potentials(m).graph
    }

    pub fn len(&self) -> usize {
        self.gt_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt_labels.is_empty()
    }
}

/// `−(1/|V|) Σ ln q_{i:gt_i}` with `q` clamped to `[1e−9, 1]`.
pub fn loss(q: &RelaxedLabeling, gt: &[u8]) -> f64 {
    assert_eq!(q.len(), gt.len(), "labeling and labels differ in length");
    if gt.is_empty() {
        return 0.0;
    }
    let s: f64 =
        q.q.iter()
            .zip(gt)
            .map(|(qi, &g)| qi[g as usize].clamp(LOSS_FLOOR, 1.0).ln())
            .sum();
    -s / gt.len() as f64
}

/// Whether the loss clamp would activate anywhere.
pub fn loss_clamped(q: &RelaxedLabeling, gt: &[u8]) -> bool {
    q.q.iter().zip(gt).any(|(qi, &g)| qi[g as usize] < LOSS_FLOOR)
}

fn project(v: [f64; 2], projection: Projection) -> [f64; 2] {
    match projection {
        Projection::Softmax => crate::inference::softmax2(v),
        Projection::ClipRenorm => {
            let a = [v[0].clamp(0.0, 1.0), v[1].clamp(0.0, 1.0)];
            let s = a[0] + a[1];
            if s > 0.0 {
                [a[0] / s, a[1] / s]
            } else {
                [0.5, 0.5]
            }
        }
    }
}

fn project_backward(v: [f64; 2], out: [f64; 2], dout: [f64; 2], projection: Projection) -> [f64; 2] {
    match projection {
        Projection::Softmax => {
            let dot = out[0] * dout[0] + out[1] * dout[1];
            [out[0] * (dout[0] - dot), out[1] * (dout[1] - dot)]
        }
        Projection::ClipRenorm => {
            let a = [v[0].clamp(0.0, 1.0), v[1].clamp(0.0, 1.0)];
            let s = a[0] + a[1];
            if s <= 0.0 {
                return [0.0, 0.0];
            }
            let dot = out[0] * dout[0] + out[1] * dout[1];
            let inside = |x: f64| if x > 0.0 && x < 1.0 { 1.0 } else { 0.0 };
            [(dout[0] - dot) / s * inside(v[0]), (dout[1] - dot) / s * inside(v[1])]
        }
    }
}

/// Loss of `m` on `w`, plus the final labeling.
pub fn window_loss(w: &TrainingWindow, m: &Model) -> (f64, RelaxedLabeling) {
    let pot = w.potentials(m);
    let tr = crate::inference::infer(&pot.graph, &m.params);
    (loss(&tr.final_q, &w.gt_labels), tr.final_q)
}

fn gradient_table(g: &CrfGraph, q: &RelaxedLabeling) -> Vec<[f64; 2]> {
    crate::inference::gradient(g, q)
}

/// Loss and its gradient over the trainable vector, by reverse
/// accumulation through the unrolled iterations.
pub fn param_gradient(w: &TrainingWindow, m: &Model) -> (f64, Vec<f64>) {
    let n = w.len();
    let mut grad = vec![0.0; N_PARAMS];
    if n == 0 {
        return (0.0, grad);
    }
    let p = &m.params;
    let pot = w.potentials(m);
    let g = &pot.graph;
    let eps = p.epsilon;

    // forward, keeping every labeling and pre-projection value
    let mut qs = vec![g.initial_labeling()];
    let mut grads = Vec::with_capacity(p.iterations);
    let mut pre = Vec::with_capacity(p.iterations);
    for _ in 0..p.iterations {
        let q = qs.last().unwrap();
        let gt = gradient_table(g, q);
        let v: Vec<[f64; 2]> =
            q.q.iter()
                .zip(&gt)
                .map(|(qi, gi)| [qi[0] - p.gamma * gi[0], qi[1] - p.gamma * gi[1]])
                .collect();
        let next = RelaxedLabeling {
            q: v.iter().map(|&x| project(x, p.projection)).collect(),
        };
        grads.push(gt);
        pre.push(v);
        qs.push(next);
    }
    let q_final = qs.last().unwrap();
    let l = loss(q_final, &w.gt_labels);

    let mut dq = vec![[0.0; 2]; n];
    for (i, &gl) in w.gt_labels.iter().enumerate() {
        let v = q_final.q[i][gl as usize];
        if v > LOSS_FLOOR && v <= 1.0 {
            dq[i][gl as usize] = -1.0 / (n as f64 * v);
        }
    }

    let mut d_unary = vec![[0.0; 2]; n];
    let mut d_edge = vec![[[0.0; 2]; 2]; g.edges.len()];
    let mut d_gamma = 0.0;
    for t in (0..p.iterations).rev() {
        let q_prev = &qs[t];
        let out = &qs[t + 1];
        let mut dv = vec![[0.0; 2]; n];
        for i in 0..n {
            dv[i] = project_backward(pre[t][i], out.q[i], dq[i], p.projection);
        }
        let mut dq_prev = dv.clone();
        let mut dgrad = vec![[0.0; 2]; n];
        for i in 0..n {
            d_gamma -= grads[t][i][0] * dv[i][0] + grads[t][i][1] * dv[i][1];
            dgrad[i] = [-p.gamma * dv[i][0], -p.gamma * dv[i][1]];
            d_unary[i][0] += dgrad[i][0];
            d_unary[i][1] += dgrad[i][1];
        }
        for (k, e) in g.edges.iter().enumerate() {
            let (i, j) = (e.i, e.j);
            let pt = e.potential;
            for l in 0..2 {
                for mu in 0..2 {
                    // g_i(l) += P(l, mu) q_j(mu); g_j(mu) += P(l, mu) q_i(l)
                    d_edge[k][l][mu] += dgrad[i][l] * q_prev.q[j][mu] + dgrad[j][mu] * q_prev.q[i][l];
                    dq_prev[j][mu] += pt[l][mu] * dgrad[i][l];
                    dq_prev[i][l] += pt[l][mu] * dgrad[j][mu];
                }
            }
        }
        dq = dq_prev;
    }
    grad[2] = d_gamma;

    // q⁰ = (1 − z, z) and unary potentials −w_u ln(z_λ + ε)
    let mut dz = vec![0.0; n];
    for i in 0..n {
        let z1 = pot.z[i];
        let z0 = 1.0 - z1;
        dz[i] += dq[i][1] - dq[i][0];
        grad[0] += -d_unary[i][0] * (z0 + eps).ln() - d_unary[i][1] * (z1 + eps).ln();
        dz[i] += d_unary[i][0] * p.w_u / (z0 + eps) - d_unary[i][1] * p.w_u / (z1 + eps);
    }
    for (i, x) in w.unary_x.iter().enumerate() {
        let raw = pot.z_raw[i];
        if raw <= PROB_FLOOR || raw >= 1.0 - PROB_FLOOR {
            continue;
        }
        let du = dz[i] * raw * (1.0 - raw);
        for (k, xk) in x.iter().enumerate() {
            grad[U0 + k] += du * xk;
        }
        grad[U0 + UNARY_DIM] += du;
    }

    // pairwise potentials −w_d ln(a_λ b_μ + ε)
    for (k, e) in g.edges.iter().enumerate() {
        let [a1, b1] = pot.ab[k];
        let a = [1.0 - a1, a1];
        let b = [1.0 - b1, b1];
        let (mut da1, mut db1) = (0.0, 0.0);
        for l in 0..2 {
            for mu in 0..2 {
                let d = d_edge[k][l][mu];
                let inner = a[l] * b[mu] + eps;
                grad[1] += -d * inner.ln();
                let sa = if l == 1 { 1.0 } else { -1.0 };
                let sb = if mu == 1 { 1.0 } else { -1.0 };
                da1 += d * -p.w_d * b[mu] * sa / inner;
                db1 += d * -p.w_d * a[l] * sb / inner;
            }
        }
        let _ = e;
        for (h, dh) in [(0usize, da1), (1, db1)] {
            let raw = pot.ab_raw[k][h];
            if raw <= PROB_FLOOR || raw >= 1.0 - PROB_FLOOR {
                continue;
            }
            let du = dh * raw * (1.0 - raw);
            let base = P0 + h * HEAD;
            for (c, xc) in w.edge_x[k][h].iter().enumerate() {
                grad[base + c] += du * xc;
            }
            grad[base + PAIR_EMBED_DIM] += du;
        }
    }
    (l, grad)
}

/// Central differences with step `rel · max(|θ_k|, 1)`.
pub fn param_gradient_fd(w: &TrainingWindow, m: &Model, rel: f64) -> Vec<f64> {
    let theta = m.to_vector();
    (0..N_PARAMS)
        .map(|k| {
            let h = rel * theta[k].abs().max(1.0);
            let mut plus = theta.clone();
            plus[k] += h;
            let mut minus = theta.clone();
            minus[k] -= h;
            let lp = window_loss(w, &m.with_vector(&plus)).0;
            let lm = window_loss(w, &m.with_vector(&minus)).0;
            (lp - lm) / (2.0 * h)
        })
        .collect()
}

/// Ground-truth node labels: consecutive tracklets of the same identity are
/// linked, everything else is not.
pub fn gt_labels(tracklets: &[Tracklet], nodes: &[CrfNode]) -> Vec<u8> {
    let mut by_id: HashMap<i64, Vec<usize>> = HashMap::new();
    for (k, t) in tracklets.iter().enumerate() {
        if let Some(id) = t.identity() {
            by_id.entry(id).or_default().push(k);
        }
    }
    let mut links = std::collections::HashSet::new();
    for ks in by_id.values_mut() {
        ks.sort_by_key(|&k| (tracklets[k].start(), k));
        for w in ks.windows(2) {
            if tracklets[w[1]].start() > tracklets[w[0]].end() {
                links.insert((w[0], w[1]));
            }
        }
    }
    nodes
        .iter()
        .map(|n| u8::from(links.contains(&(n.first, n.second))))
        .collect()
}

/// Cuts the node list of one tracklet set into training windows.
pub fn build_windows(
    tracklets: &[Tracklet],
    t_thr: u32,
    model: &Model,
    difficult: &DifficultPairConfig,
    features: &FeatureConfig,
    exec: Execution,
) -> Result<Vec<TrainingWindow>> {
    let nodes = build_nodes(tracklets, t_thr, &model.unary);
    let labels = gt_labels(tracklets, &nodes);
    let ranges = sliding_windows(nodes.len(), model.params.window_size, model.params.window_overlap);
    par::map(exec, &ranges, |r| -> Result<TrainingWindow> {
        let local: Vec<CrfNode> = nodes[r.clone()]
            .iter()
            .enumerate()
            .map(|(k, n)| CrfNode { index: k, ..n.clone() })
            .collect();
        let mut edges: Vec<CrfEdge> = find_difficult_pairs(tracklets, &local, difficult, Execution::Sequential);
        let mut edge_x = Vec::with_capacity(edges.len());
        for e in &mut edges {
            let f = node_pair_feature(tracklets, &local[e.i], &local[e.j], features)?;
            let ctx = PairContext {
                tracklets,
                vi: &local[e.i],
                vj: &local[e.j],
                feature: &f,
            };
            edge_x.push(model.pairwise.embeddings(&ctx));
            e.joint_prob = model.pairwise.probabilities(&ctx);
        }
        let unary_x = local
            .iter()
            .map(|n| unary_features(&tracklets[n.first], &tracklets[n.second], t_thr))
            .collect::<Result<Vec<_>>>()?;
        let p = &model.params;
        let graph = CrfGraph::with_potentials(local, edges, p.w_u, p.w_d, p.epsilon)?;
        Ok(TrainingWindow {
            graph,
            unary_x,
            edge_x,
            gt_labels: labels[r.clone()].to_vec(),
        })
    })
    .into_iter()
    .collect()
}

/// Copies ground-truth identities onto detections: per frame, a maximum
/// IoU assignment restricted to pairs with IoU at least `iou_threshold`.
/// Unmatched detections lose any identity they carried.
pub fn attach_identities(detections: &mut [Detection], gt: &TrackSet, iou_threshold: f64) {
    let mut gt_by_frame: HashMap<u32, Vec<(i64, &Detection)>> = HashMap::new();
    for t in &gt.tracks {
        for d in &t.detections {
            gt_by_frame.entry(d.frame).or_default().push((t.id as i64, d));
        }
    }
    let mut by_frame: HashMap<u32, Vec<usize>> = HashMap::new();
    for (k, d) in detections.iter().enumerate() {
        by_frame.entry(d.frame).or_default().push(k);
    }
    for (frame, ks) in by_frame {
        let gts = gt_by_frame.get(&frame).map(Vec::as_slice).unwrap_or(&[]);
        let cost: Vec<Vec<f64>> = ks
            .iter()
            .map(|&k| {
                gts.iter()
                    .map(|(_, g)| {
                        let o = detections[k].iou(g);
                        if o >= iou_threshold {
                            -o
                        } else {
                            f64::INFINITY
                        }
                    })
                    .collect()
            })
            .collect();
        let assignment = if gts.is_empty() {
            vec![None; ks.len()]
        } else {
            hungarian(&cost, Some(0.0))
        };
        for (&k, a) in ks.iter().zip(assignment) {
            detections[k].identity = a.map(|c| gts[c].0);
        }
    }
}

/// Training windows of one labeled sequence: tracklets linked from
/// `detections`, nodes at `model.params.t_thr_round1`.
pub fn sequence_windows(
    detections: Vec<Detection>,
    link: &LinkThresholds,
    model: &Model,
    difficult: &DifficultPairConfig,
    features: &FeatureConfig,
    exec: Execution,
) -> Result<Vec<TrainingWindow>> {
    let tracklets = link_detections(&group_by_frame(detections), link);
    build_windows(&tracklets, model.params.t_thr_round1, model, difficult, features, exec)
}

/// Writes `unary.txt`, `pairwise.txt` and `params.txt` into `dir`.
pub fn save_model(m: &Model, dir: &Path, appearance_dim: usize) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let unary = ProviderFile::Unary {
        appearance_dim,
        model: m.unary.clone(),
    };
    let pairwise = ProviderFile::Pairwise {
        appearance_dim,
        model: m.pairwise.clone(),
    };
    write_atomic(&dir.join("unary.txt"), &unary.to_text())?;
    write_atomic(&dir.join("pairwise.txt"), &pairwise.to_text())?;
    write_atomic(&dir.join("params.txt"), &params_to_text(&m.params))
}

/// Loads whichever parts are given over the defaults and `base`.
pub fn load_model(
    unary: Option<&Path>,
    pairwise: Option<&Path>,
    params: Option<&Path>,
    base: &CrfParams,
) -> Result<Model> {
    let mut m = Model {
        params: base.clone(),
        ..Model::default()
    };
    if let Some(p) = unary {
        match ProviderFile::read(p)? {
            ProviderFile::Unary { model, .. } => m.unary = model,
            ProviderFile::Pairwise { .. } => {
                return Err(Error::Config(format!("{} holds a pairwise provider", p.display())))
            }
        }
    }
    if let Some(p) = pairwise {
        match ProviderFile::read(p)? {
            ProviderFile::Pairwise { model, .. } => m.pairwise = model,
            ProviderFile::Unary { .. } => return Err(Error::Config(format!("{} holds a unary provider", p.display()))),
        }
    }
    if let Some(p) = params {
        m.params = read_params(p, base)?;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            learning_rate: 0.001,
            epochs: 50,
            batch: 8,
            patience: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainResult {
    /// Parameters with the lowest validation loss seen, initial included.
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
}

impl TrainResult {
    pub fn log_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for e in &self.log {
            s.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val_loss));
        }
        s
    }
}

pub fn mean_loss(windows: &[TrainingWindow], m: &Model, exec: Execution) -> f64 {
    if windows.is_empty() {
        return 0.0;
    }
    par::map(exec, windows, |w| window_loss(w, m).0).iter().sum::<f64>() / windows.len() as f64
}

/// Fraction of nodes whose decoded label matches the ground truth.
pub fn decoded_accuracy(windows: &[TrainingWindow], m: &Model, exec: Execution) -> f64 {
    let counts = par::map(exec, windows, |w| {
        let (_, q) = window_loss(w, m);
        let g = w.graph_for(m);
        let labels = crate::inference::decode(&q, &g);
        let hit = labels.iter().zip(&w.gt_labels).filter(|(a, b)| a == b).count();
        (hit, labels.len())
    });
    let (hit, total) = counts.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, theta: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for k in 0..theta.len() {
            self.m[k] = Self::B1 * self.m[k] + (1.0 - Self::B1) * g[k];
            self.v[k] = Self::B2 * self.v[k] + (1.0 - Self::B2) * g[k] * g[k];
            theta[k] -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Smallest step size kept after an update.
pub const MIN_GAMMA: f64 = 1e-6;

fn constrain(theta: &mut [f64]) {
    theta[0] = theta[0].max(0.0);
    theta[1] = theta[1].max(0.0);
    theta[2] = theta[2].max(MIN_GAMMA);
}

/// Mini-batch Adam with early stopping on validation loss.
pub fn train(
    train_set: &[TrainingWindow],
    val_set: &[TrainingWindow],
    init: &Model,
    schedule: &Schedule,
    exec: Execution,
) -> Result<TrainResult> {
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut current = init.clone();
    let mut theta = current.to_vector();
    let mut adam = Adam::new(N_PARAMS);
    let val_of = |m: &Model| {
        if val_set.is_empty() {
            mean_loss(train_set, m, exec)
        } else {
            mean_loss(val_set, m, exec)
        }
    };
    let initial_val_loss = val_of(&current);
    if !initial_val_loss.is_finite() {
        return Err(Error::Numeric("initial validation loss is not finite".into()));
    }
    let mut best = (initial_val_loss, current.clone());
    let mut since_best = 0;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let batch = schedule.batch.max(1);

    for epoch in 1..=schedule.epochs {
        order.shuffle(&mut rng);
        let mut window_losses = vec![0.0; train_set.len()];
        for chunk in order.chunks(batch) {
            let results = par::map(exec, chunk, |&k| param_gradient(&train_set[k], &current));
            let mut g = vec![0.0; N_PARAMS];
            for (&k, (l, gk)) in chunk.iter().zip(&results) {
                window_losses[k] = *l;
                for (a, b) in g.iter_mut().zip(gk) {
                    *a += b / chunk.len() as f64;
                }
            }
            if !g.iter().all(|x| x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in epoch {epoch}")));
            }
            if schedule.learning_rate != 0.0 {
                adam.step(&mut theta, &g, schedule.learning_rate);
                constrain(&mut theta);
                current.set_vector(&theta);
            }
        }
        let train_loss = window_losses.iter().sum::<f64>() / train_set.len() as f64;
        let val_loss = val_of(&current);
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Numeric(format!("loss diverged in epoch {epoch}")));
        }
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best.0 {
            best = (val_loss, current.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= schedule.patience {
                break;
            }
        }
    }
    Ok(TrainResult {
        model: best.1,
        log,
        initial_val_loss,
        best_val_loss: best.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{planted_graph, PlantedConfig};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    #[test]
    fn loss_examples() {
        let gt = [1u8, 0, 1];
        assert_eq!(loss(&RelaxedLabeling::one_hot(&gt), &gt), 0.0);
        assert_abs_diff_eq!(
            loss(&RelaxedLabeling::uniform(3), &gt),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        let q = RelaxedLabeling {
            q: vec![[0.2, 0.8], [0.9, 0.1]],
        };
        let expected = -(0.8f64.ln() + 0.1f64.ln()) / 2.0;
        assert_abs_diff_eq!(loss(&q, &[1, 1]), expected, epsilon = 1e-15);
        let q = RelaxedLabeling { q: vec![[1.0, 0.0]] };
        assert_abs_diff_eq!(loss(&q, &[1]), -(1e-9f64).ln(), epsilon = 1e-12);
        assert!(loss_clamped(&q, &[1]));
    }

    /// Window over a planted graph with random provider inputs.
    fn random_window(seed: u64, nodes: usize) -> TrainingWindow {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pg = planted_graph(
            &mut rng,
            &PlantedConfig {
                nodes,
                ..PlantedConfig::default()
            },
        );
        let unary_x = (0..nodes)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect();
        let edge_x = pg
            .graph
            .edges
            .iter()
            .map(|_| std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))))
            .collect();
        TrainingWindow {
            graph: pg.graph,
            unary_x,
            edge_x,
            gt_labels: pg.truth,
        }
    }

    fn random_model(rng: &mut ChaCha8Rng) -> Model {
        let mut m = Model::default();
        let v: Vec<f64> = (0..N_PARAMS)
            .map(|k| match k {
                0 | 1 => rng.random_range(0.2..1.5),
                2 => rng.random_range(0.1..0.8),
                _ => rng.random_range(-1.0..1.0),
            })
            .collect();
        m.set_vector(&v);
        m
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let scale: f64 = a
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        diff / scale.max(1e-12)
    }

    #[test]
    fn reverse_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for seed in 0..6 {
            let w = random_window(seed, 14);
            let m = random_model(&mut rng);
            let (l, g) = param_gradient(&w, &m);
            assert_abs_diff_eq!(l, window_loss(&w, &m).0, epsilon = 1e-14);
            let fd = param_gradient_fd(&w, &m, 1e-4);
            assert!(rel_err(&g, &fd) < 1e-6, "seed {seed}: {g:?} vs {fd:?}");
        }
    }

    #[test]
    fn clip_renorm_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random_window(3, 10);
        let mut m = random_model(&mut rng);
        m.params.projection = Projection::ClipRenorm;
        m.params.gamma = 0.05;
        let (_, g) = param_gradient(&w, &m);
        let fd = param_gradient_fd(&w, &m, 1e-6);
        assert!(rel_err(&g, &fd) < 1e-4, "{g:?} vs {fd:?}");
    }

    #[test]
    fn w_u_sign_matches_slope() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for seed in 0..50 {
            let w = random_window(100 + seed, 8);
            let m = random_model(&mut rng);
            let (_, g) = param_gradient(&w, &m);
            let fd = param_gradient_fd(&w, &m, 1e-4);
            if fd[0].abs() > 1e-8 {
                assert_eq!(g[0].signum(), fd[0].signum(), "seed {seed}");
            }
        }
    }

    #[test]
    fn gamma_unused_without_iterations() {
        let w = random_window(1, 9);
        let mut m = Model::default();
        m.params.iterations = 0;
        let (_, g) = param_gradient(&w, &m);
        assert_eq!(g[2], 0.0);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let ws: Vec<TrainingWindow> = (0..5).map(|s| random_window(s, 10)).collect();
        let init = Model::default();
        let schedule = Schedule {
            learning_rate: 0.0,
            epochs: 3,
            ..Schedule::default()
        };
        let r = train(&ws, &ws[..2], &init, &schedule, Execution::Sequential).unwrap();
        assert_eq!(r.model, init);
        assert!(r
            .log
            .windows(2)
            .all(|p| p[0].train_loss == p[1].train_loss && p[0].val_loss == p[1].val_loss));
    }

    #[test]
    fn training_is_deterministic_and_improves() {
        let ws: Vec<TrainingWindow> = (0..12).map(|s| random_window(s, 12)).collect();
        let schedule = Schedule {
            learning_rate: 0.05,
            epochs: 15,
            ..Schedule::default()
        };
        let a = train(&ws[..8], &ws[8..], &Model::default(), &schedule, Execution::Parallel).unwrap();
        let b = train(&ws[..8], &ws[8..], &Model::default(), &schedule, Execution::Sequential).unwrap();
        assert_eq!(a, b);
        assert!(a.best_val_loss <= a.initial_val_loss);
        assert!(a.model.params.w_u >= 0.0 && a.model.params.w_d >= 0.0 && a.model.params.gamma > 0.0);
    }

    #[test]
    fn empty_training_set_rejected() {
        assert!(train(&[], &[], &Model::default(), &Schedule::default(), Execution::Sequential).is_err());
    }

    #[test]
    fn vector_round_trip() {
        let m = Model::default();
        let v = m.to_vector();
        assert_eq!(v.len(), N_PARAMS);
        assert_eq!(m.with_vector(&v), m);
    }

    #[test]
    fn identities_follow_overlapping_gt() {
        use crate::association::Track;
        let b = |f, x: f64| Detection::from_box(f, x, 0.0, 10.0, 20.0, 1.0).unwrap();
        let gt = TrackSet {
            tracks: vec![
                Track {
                    id: 0,
                    detections: vec![b(1, 0.0), b(2, 1.0)],
                    interpolated: vec![false; 2],
                },
                Track {
                    id: 4,
                    detections: vec![b(1, 6.0)],
                    interpolated: vec![false],
                },
            ],
        };
        // frame 1: the detection at 5 overlaps both gt boxes, the one at 0.5 only the first
        let mut dets = vec![b(1, 5.0), b(1, 0.5), b(2, 40.0).with_identity(9), b(3, 0.0)];
        attach_identities(&mut dets, &gt, 0.5);
        let ids: Vec<_> = dets.iter().map(|d| d.identity).collect();
        assert_eq!(ids, vec![Some(4), Some(0), None, None]);
    }

    #[test]
    fn model_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let m = random_model(&mut rng);
        save_model(&m, dir.path(), 16).unwrap();
        let back = load_model(
            Some(&dir.path().join("unary.txt")),
            Some(&dir.path().join("pairwise.txt")),
            Some(&dir.path().join("params.txt")),
            &m.params,
        )
        .unwrap();
        assert_eq!(back, m);
        let swapped = load_model(Some(&dir.path().join("pairwise.txt")), None, None, &m.params);
        assert!(swapped.is_err());
        assert_eq!(
            load_model(None, None, None, &CrfParams::default()).unwrap(),
            Model::default()
        );
    }
}
