//! Relaxed CRF energy, its gradient, unrolled gradient-descent inference,
//! decoding, and an exhaustive oracle for small graphs.

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::types::{CrfGraph, CrfParams, Projection, RelaxedLabeling};

/// Relaxed energy per iteration (`iterations + 1` entries, the first before
/// any step) and the final labeling.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceTrace {
    pub energies: Vec<f64>,
    pub final_q: RelaxedLabeling,
}

/// Gibbs energy of a binary labeling; each undirected edge counted once.
pub fn energy_integer(g: &CrfGraph, x: &[u8]) -> f64 {
    debug_assert_eq!(x.len(), g.len());
    let mut e = 0.0;
    for (u, &l) in g.unary.iter().zip(x) {
        e += u[l as usize];
    }
    for edge in &g.edges {
        e += edge.potential[x[edge.i] as usize][x[edge.j] as usize];
    }
    e
}

/// Quadratic relaxation of [`energy_integer`]. At one-hot labelings it
/// accumulates the same terms in the same order, so the two agree exactly.
pub fn energy_relaxed(g: &CrfGraph, q: &RelaxedLabeling) -> f64 {
    debug_assert_eq!(q.len(), g.len());
    let mut e = 0.0;
    for (u, qi) in g.unary.iter().zip(&q.q) {
        for l in 0..2 {
            e += u[l] * qi[l];
        }
    }
    for edge in &g.edges {
        let (qi, qj) = (q.q[edge.i], q.q[edge.j]);
        for l in 0..2 {
            for m in 0..2 {
                e += edge.potential[l][m] * qi[l] * qj[m];
            }
        }
    }
    e
}

/// Pairwise message of one node: for each label λ, first the per-μ
/// accumulation `Σ_j φ_ij(λ, μ) q_{j:μ}`, then the sum over μ.
fn pairwise_message(g: &CrfGraph, q: &RelaxedLabeling, i: usize) -> [f64; 2] {
    let mut acc = [[0.0; 2]; 2];
    for &k in &g.adjacency[i] {
        let (j, phi) = g.edges[k].oriented(i);
        let qj = q.q[j];
        for l in 0..2 {
            for m in 0..2 {
                acc[l][m] += phi[l][m] * qj[m];
            }
        }
    }
    [acc[0][0] + acc[0][1], acc[1][0] + acc[1][1]]
}

/// `∂E/∂q_{i:λ} = φ_i(λ) + Σ_{j, μ} φ_ij(λ, μ) q_{j:μ}`.
pub fn gradient(g: &CrfGraph, q: &RelaxedLabeling) -> Vec<[f64; 2]> {
    gradient_with(g, q, Execution::Sequential)
}

pub fn gradient_with(g: &CrfGraph, q: &RelaxedLabeling, exec: Execution) -> Vec<[f64; 2]> {
    par::map_range(exec, g.len(), |i| {
        let m = pairwise_message(g, q, i);
        [g.unary[i][0] + m[0], g.unary[i][1] + m[1]]
    })
}

/// Two-label softmax, stable for large magnitudes.
pub fn softmax2(v: [f64; 2]) -> [f64; 2] {
    let hi = v[0].max(v[1]);
    let e0 = (v[0] - hi).exp();
    let e1 = (v[1] - hi).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

fn clip_renorm(v: [f64; 2]) -> [f64; 2] {
    let a = v[0].clamp(0.0, 1.0);
    let b = v[1].clamp(0.0, 1.0);
    let s = a + b;
    if s > 0.0 {
        [a / s, b / s]
    } else {
        [0.5, 0.5]
    }
}

/// One gradient step followed by the configured normalization.
pub fn iterate(g: &CrfGraph, q: &RelaxedLabeling, gamma: f64) -> RelaxedLabeling {
    iterate_with(g, q, gamma, Projection::Softmax, Execution::Sequential)
}

pub fn iterate_with(
    g: &CrfGraph,
    q: &RelaxedLabeling,
    gamma: f64,
    projection: Projection,
    exec: Execution,
) -> RelaxedLabeling {
    let grad = gradient_with(g, q, exec);
    let q =
        q.q.iter()
            .zip(&grad)
            .map(|(qi, gi)| {
                let stepped = [qi[0] - gamma * gi[0], qi[1] - gamma * gi[1]];
                match projection {
                    Projection::Softmax => softmax2(stepped),
                    Projection::ClipRenorm => clip_renorm(stepped),
                }
            })
            .collect();
    RelaxedLabeling { q }
}

/// Runs `params.iterations` steps from the unary probabilities.
pub fn infer(g: &CrfGraph, params: &CrfParams) -> InferenceTrace {
    infer_observed(g, params, Execution::Sequential, |_, _| {})
}

/// Like [`infer`], calling `observe(t, q^t)` for `t = 0..=iterations`.
pub fn infer_observed<F>(g: &CrfGraph, params: &CrfParams, exec: Execution, mut observe: F) -> InferenceTrace
where
    F: FnMut(usize, &RelaxedLabeling),
{
    let mut q = g.initial_labeling();
    let mut energies = Vec::with_capacity(params.iterations + 1);
    energies.push(energy_relaxed(g, &q));
    observe(0, &q);
    for t in 1..=params.iterations {
        q = iterate_with(g, &q, params.gamma, params.projection, exec);
        energies.push(energy_relaxed(g, &q));
        observe(t, &q);
    }
    InferenceTrace { energies, final_q: q }
}

impl InferenceTrace {
    /// `iteration,energy` rows, one per entry of the trace.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,energy\n");
        for (t, e) in self.energies.iter().enumerate() {
            s.push_str(&format!("{t},{e}\n"));
        }
        s
    }
}

/// Per-node argmax (ties to 0), then a greedy repair that keeps label 1 only
/// for the most confident node of each first tracklet and each second
/// tracklet.
pub fn decode(q: &RelaxedLabeling, g: &CrfGraph) -> Vec<u8> {
    let mut order: Vec<usize> = (0..g.len()).filter(|&i| q.q[i][1] > q.q[i][0]).collect();
    order.sort_by(|&a, &b| q.q[b][1].total_cmp(&q.q[a][1]).then(a.cmp(&b)));
    repair(&g.nodes, &order)
}

/// Accepts candidates in the given order while each tracklet keeps at most
/// one successor and one predecessor.
pub(crate) fn repair(nodes: &[crate::types::CrfNode], candidates: &[usize]) -> Vec<u8> {
    use std::collections::HashSet;
    let mut labels = vec![0u8; nodes.len()];
    let mut has_succ = HashSet::new();
    let mut has_pred = HashSet::new();
    for &i in candidates {
        let n = &nodes[i];
        if has_succ.contains(&n.first) || has_pred.contains(&n.second) {
            continue;
        }
        has_succ.insert(n.first);
        has_pred.insert(n.second);
        labels[i] = 1;
    }
    labels
}

/// Largest graph [`brute_force_minimize`] accepts.
pub const BRUTE_FORCE_MAX_NODES: usize = 25;

#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    pub labels: Vec<u8>,
    pub energy: f64,
    /// Number of labelings evaluated.
    pub visited: u64,
}

/// Exhaustive minimization over all `2^|V|` labelings. Ties go to the
/// lexicographically smallest labeling, so the result does not depend on
/// how the enumeration is split across threads.
pub fn brute_force_minimize(g: &CrfGraph, exec: Execution) -> Result<OracleResult> {
    let n = g.len();
    if n > BRUTE_FORCE_MAX_NODES {
        return Err(Error::SizeLimit {
            what: "nodes",
            got: n,
            max: BRUTE_FORCE_MAX_NODES,
        });
    }
    // bit (n-1-i) of a code is x_i, so numeric order is lexicographic order
    let decode_code = |code: u64, x: &mut [u8]| {
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = ((code >> (n - 1 - i)) & 1) as u8;
        }
    };
    let total: u64 = 1u64 << n;
    let low_bits = n.min(12);
    let blocks = (total >> low_bits) as usize;
    let per_block = 1u64 << low_bits;
    let results = par::map_range(exec, blocks, |b| {
        let mut x = vec![0u8; n];
        let mut best = (f64::INFINITY, u64::MAX);
        let mut visited = 0u64;
        let base = (b as u64) << low_bits;
        for off in 0..per_block {
            let code = base | off;
            decode_code(code, &mut x);
            let e = energy_integer(g, &x);
            visited += 1;
            if e < best.0 || (e == best.0 && code < best.1) {
                best = (e, code);
            }
        }
        (best, visited)
    });
    let mut best = (f64::INFINITY, u64::MAX);
    let mut visited = 0;
    for ((e, code), v) in results {
        visited += v;
        if e < best.0 || (e == best.0 && code < best.1) {
            best = (e, code);
        }
    }
    let mut labels = vec![0u8; n];
    if n > 0 {
        decode_code(best.1, &mut labels);
    } else {
        best.0 = 0.0;
    }
    Ok(OracleResult {
        labels,
        energy: best.0,
        visited,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{CrfEdge, CrfNode, EdgeKind};
    use approx::assert_abs_diff_eq;

    fn node(index: usize, first: usize, second: usize, z1: f64) -> CrfNode {
        CrfNode {
            index,
            first,
            second,
            unary_prob: [1.0 - z1, z1],
        }
    }

    fn graph(unary: Vec<[f64; 2]>, edges: Vec<(usize, usize, [[f64; 2]; 2])>) -> CrfGraph {
        let nodes = (0..unary.len()).map(|i| node(i, 2 * i, 2 * i + 1, 0.5)).collect();
        let edges = edges
            .into_iter()
            .map(|(i, j, p)| CrfEdge {
                potential: p,
                ..CrfEdge::new(i, j, EdgeKind::Consistency)
            })
            .collect();
        CrfGraph::from_parts(nodes, unary, edges).unwrap()
    }

    #[test]
    fn energy_examples() {
        let empty = graph(vec![], vec![]);
        assert_eq!(energy_integer(&empty, &[]), 0.0);
        let one = graph(vec![[1.0, 2.0]], vec![]);
        assert_eq!(energy_integer(&one, &[0]), 1.0);
        assert_eq!(energy_relaxed(&one, &RelaxedLabeling { q: vec![[0.5, 0.5]] }), 1.5);
    }

    #[test]
    fn two_node_uniform_energy() {
        let p = [[1.0, 2.0], [3.0, 6.0]];
        let g = graph(vec![[0.2, 0.8], [1.0, 0.4]], vec![(0, 1, p)]);
        // mean unaries 0.5 + 0.7, plus a quarter of the table sum 12
        let expected = 0.5 + 0.7 + 3.0;
        assert_abs_diff_eq!(
            energy_relaxed(&g, &RelaxedLabeling::uniform(2)),
            expected,
            epsilon = 1e-15
        );
    }

    #[test]
    fn edgeless_gradient_is_unary() {
        let g = graph(vec![[0.3, 0.9], [2.0, 0.1]], vec![]);
        let q = RelaxedLabeling {
            q: vec![[0.2, 0.8], [0.6, 0.4]],
        };
        assert_eq!(gradient(&g, &q), g.unary);
    }

    #[test]
    fn gradient_uses_both_edge_orientations() {
        let p = [[1.0, 2.0], [3.0, 4.0]];
        let g = graph(vec![[0.0; 2], [0.0; 2]], vec![(0, 1, p)]);
        let q = RelaxedLabeling {
            q: vec![[0.25, 0.75], [0.6, 0.4]],
        };
        let grad = gradient(&g, &q);
        // node 0: Σ_μ φ(λ, μ) q_1μ ; node 1: Σ_λ φ(λ, μ) q_0λ
        assert_abs_diff_eq!(grad[0][0], 1.0 * 0.6 + 2.0 * 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(grad[0][1], 3.0 * 0.6 + 4.0 * 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(grad[1][0], 1.0 * 0.25 + 3.0 * 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(grad[1][1], 2.0 * 0.25 + 4.0 * 0.75, epsilon = 1e-15);
    }

    #[test]
    fn softmax_step_examples() {
        let zero = graph(vec![[0.0; 2]], vec![]);
        let q = iterate(&zero, &RelaxedLabeling { q: vec![[0.5, 0.5]] }, 0.5);
        assert_eq!(q.q[0], [0.5, 0.5]);
        let q = iterate(&zero, &RelaxedLabeling { q: vec![[1.0, 0.0]] }, 0.5);
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(q.q[0][0], e / (e + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(q.q[0][0], 0.731059, epsilon = 1e-6);
        assert_abs_diff_eq!(q.q[0][1], 0.268941, epsilon = 1e-6);
    }

    #[test]
    fn clip_renorm_projection() {
        let g = graph(vec![[0.0, 4.0]], vec![]);
        let q = iterate_with(
            &g,
            &RelaxedLabeling { q: vec![[0.5, 0.5]] },
            0.5,
            Projection::ClipRenorm,
            Execution::Sequential,
        );
        assert_eq!(q.q[0], [1.0, 0.0]);
    }

    #[test]
    fn hand_unrolled_two_node_step() {
        // φ_0 = (0.5, 1.0), φ_1 = (2.0, 0.25), edge table [[1, 0], [0, 3]]
        // q = [(0.4, 0.6), (0.7, 0.3)], γ = 0.5
        // ∇_0 = (0.5 + 1·0.7, 1.0 + 3·0.3) = (1.2, 1.9)
        // ∇_1 = (2.0 + 1·0.4, 0.25 + 3·0.6) = (2.4, 2.05)
        // q̃_0 = (0.4 − 0.6, 0.6 − 0.95) = (−0.2, −0.35)
        // q̃_1 = (0.7 − 1.2, 0.3 − 1.025) = (−0.5, −0.725)
        let g = graph(vec![[0.5, 1.0], [2.0, 0.25]], vec![(0, 1, [[1.0, 0.0], [0.0, 3.0]])]);
        let q = RelaxedLabeling {
            q: vec![[0.4, 0.6], [0.7, 0.3]],
        };
        let out = iterate(&g, &q, 0.5);
        let sm = |a: f64, b: f64| (a.exp() / (a.exp() + b.exp()), b.exp() / (a.exp() + b.exp()));
        let (a0, a1) = sm(-0.2, -0.35);
        let (b0, b1) = sm(-0.5, -0.725);
        assert_abs_diff_eq!(out.q[0][0], a0, epsilon = 1e-15);
        assert_abs_diff_eq!(out.q[0][1], a1, epsilon = 1e-15);
        assert_abs_diff_eq!(out.q[1][0], b0, epsilon = 1e-15);
        assert_abs_diff_eq!(out.q[1][1], b1, epsilon = 1e-15);
        assert_abs_diff_eq!(out.q[0][1], 0.462570, epsilon = 1e-6);
    }

    #[test]
    fn zero_iterations_return_unaries() {
        let mut g = graph(vec![[0.1, 0.2]], vec![]);
        g.nodes[0].unary_prob = [0.3, 0.7];
        let p = CrfParams {
            iterations: 0,
            ..CrfParams::default()
        };
        let tr = infer(&g, &p);
        assert_eq!(tr.energies.len(), 1);
        assert_eq!(tr.final_q.q, vec![[1.0 - 0.7, 0.7]]);
    }

    #[test]
    fn edgeless_dynamics_favor_cheaper_label() {
        // 1-node closed form: r ← tanh((r − γΔ)/2) with r = q1 − q0
        let mut g = graph(vec![[0.9, 0.4]], vec![]);
        g.nodes[0].unary_prob = [0.55, 0.45];
        let gamma = 0.05;
        let p = CrfParams {
            iterations: 200,
            gamma,
            ..CrfParams::default()
        };
        let tr = infer(&g, &p);
        let delta = 0.4 - 0.9;
        let mut r: f64 = 0.45 - 0.55;
        for _ in 0..200 {
            r = ((r - gamma * delta) / 2.0).tanh();
        }
        assert!(tr.final_q.q[0][1] > 0.5);
        assert_abs_diff_eq!(tr.final_q.q[0][1] - tr.final_q.q[0][0], r, epsilon = 1e-12);
    }

    #[test]
    fn decode_examples() {
        let mut g = graph(vec![[0.0; 2]], vec![]);
        assert_eq!(decode(&RelaxedLabeling { q: vec![[0.3, 0.7]] }, &g), vec![1]);
        assert_eq!(decode(&RelaxedLabeling { q: vec![[0.5, 0.5]] }, &g), vec![0]);
        g = graph(vec![[0.0; 2], [0.0; 2]], vec![]);
        g.nodes[0] = node(0, 7, 8, 0.5);
        g.nodes[1] = node(1, 7, 9, 0.5);
        let q = RelaxedLabeling {
            q: vec![[0.1, 0.9], [0.2, 0.8]],
        };
        assert_eq!(decode(&q, &g), vec![1, 0]);
        let q = RelaxedLabeling {
            q: vec![[0.2, 0.8], [0.1, 0.9]],
        };
        assert_eq!(decode(&q, &g), vec![0, 1]);
    }

    #[test]
    fn brute_force_examples() {
        let one = graph(vec![[1.0, 2.0]], vec![]);
        let r = brute_force_minimize(&one, Execution::Sequential).unwrap();
        assert_eq!((r.labels, r.energy, r.visited), (vec![0], 1.0, 2));

        // unaries favor both = 1, but (1,1) is prohibitively expensive:
        // 00: 1.6, 01: 1.4, 10: 1.1, 11: 100.9
        let g = graph(vec![[0.6, 0.1], [1.0, 0.8]], vec![(0, 1, [[0.0, 0.0], [0.0, 100.0]])]);
        let r = brute_force_minimize(&g, Execution::Parallel).unwrap();
        assert_eq!(r.labels, vec![1, 0]);
        assert_abs_diff_eq!(r.energy, 0.1 + 1.0, epsilon = 1e-15);

        let big = graph(vec![[0.0; 2]; 26], vec![]);
        assert!(matches!(
            brute_force_minimize(&big, Execution::Sequential),
            Err(Error::SizeLimit { got: 26, .. })
        ));
    }

    #[test]
    fn brute_force_counts_and_tie_rule() {
        let g = graph(vec![[0.0; 2]; 14], vec![]);
        for exec in [Execution::Sequential, Execution::Parallel] {
            let r = brute_force_minimize(&g, exec).unwrap();
            assert_eq!(r.visited, 1 << 14);
            assert_eq!(r.labels, vec![0; 14]);
        }
        let tie = graph(vec![[1.0, 1.0], [2.0, 1.0]], vec![]);
        assert_eq!(
            brute_force_minimize(&tie, Execution::Sequential).unwrap().labels,
            vec![0, 1]
        );
    }
}
