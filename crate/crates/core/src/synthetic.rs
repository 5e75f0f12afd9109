//! Random CRF instances for property tests, the exactness oracle and
//! benchmarks.
//!
//! [`random_graph`] draws arbitrary nonnegative potential tables.
//! [`planted_graph`] mimics association windows: a hidden one-to-one
//! matching between predecessor and successor tracklets, noisy unary
//! probabilities around it, repellency between nodes sharing a tracklet and
//! random consistency edges, with potentials derived from probabilities.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::inference::{brute_force_minimize, decode, energy_integer, infer};
use crate::par::{self, Execution};
use crate::types::{CrfEdge, CrfGraph, CrfNode, CrfParams, EdgeKind};

fn isolated_nodes(n: usize, z1: impl Fn(usize) -> f64) -> Vec<CrfNode> {
    (0..n)
        .map(|i| {
            let z = z1(i);
            CrfNode {
                index: i,
                first: 2 * i,
                second: 2 * i + 1,
                unary_prob: [1.0 - z, z],
            }
        })
        .collect()
}

/// `n` nodes over distinct tracklets, each unordered pair joined with
/// probability `density`, unary and pairwise entries uniform in
/// `[0, max_potential)`.
pub fn random_graph<R: Rng + ?Sized>(rng: &mut R, n: usize, density: f64, max_potential: f64) -> CrfGraph {
    let nodes = isolated_nodes(n, |_| 0.5);
    let unary = (0..n)
        .map(|_| [rng.random::<f64>() * max_potential, rng.random::<f64>() * max_potential])
        .collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < density {
                let mut e = CrfEdge::new(i, j, EdgeKind::Consistency);
                for row in &mut e.potential {
                    for v in row.iter_mut() {
                        *v = rng.random::<f64>() * max_potential;
                    }
                }
                edges.push(e);
            }
        }
    }
    CrfGraph::from_parts(nodes, unary, edges).expect("generated edges are valid")
}

pub fn random_labeling<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<u8> {
    (0..n).map(|_| rng.random_range(0..2u8)).collect()
}

/// Graph with no edges over distinct tracklets and uniform unary
/// probabilities, using the standard potential form.
pub fn edgeless_graph<R: Rng + ?Sized>(rng: &mut R, n: usize) -> CrfGraph {
    let z: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    CrfGraph::with_potentials(isolated_nodes(n, |i| z[i]), Vec::new(), 1.0, 1.0, 1e-6).expect("valid")
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlantedConfig {
    pub nodes: usize,
    /// Probability that a unary probability is mirrored to the wrong side.
    pub unary_flip: f64,
    /// Probability that one endpoint's pairwise probability is mirrored.
    pub pair_flip: f64,
    /// Edge probability for node pairs that share no tracklet.
    pub consistency_density: f64,
    pub w_u: f64,
    pub w_d: f64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            nodes: 12,
            unary_flip: 0.15,
            pair_flip: 0.1,
            consistency_density: 0.05,
            w_u: 1.0,
            w_d: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlantedGraph {
    pub graph: CrfGraph,
    /// Labels of the hidden matching.
    pub truth: Vec<u8>,
}

fn noisy_prob<R: Rng + ?Sized>(rng: &mut R, positive: bool, flip: f64) -> f64 {
    let good = if positive {
        rng.random_range(0.6..0.95)
    } else {
        rng.random_range(0.05..0.4)
    };
    if rng.random::<f64>() < flip {
        1.0 - good
    } else {
        good
    }
}

/// See the module docs. Predecessors are tracklets `0..k`, successors
/// `k..2k`, and the true links are `(i, k + i)`.
pub fn planted_graph<R: Rng + ?Sized>(rng: &mut R, cfg: &PlantedConfig) -> PlantedGraph {
    let n = cfg.nodes;
    let k = (n.div_ceil(3)).max((n as f64).sqrt().ceil() as usize).max(1);
    let truth_pairs = k.min(n);
    let mut pairs: Vec<(usize, usize)> = (0..truth_pairs).map(|i| (i, i)).collect();
    let mut others: Vec<(usize, usize)> = (0..k)
        .flat_map(|a| (0..k).filter(move |&b| b != a).map(move |b| (a, b)))
        .collect();
    others.shuffle(rng);
    pairs.extend(others.into_iter().take(n - truth_pairs));
    pairs.shuffle(rng);

    let truth: Vec<u8> = pairs.iter().map(|&(a, b)| u8::from(a == b)).collect();
    let nodes: Vec<CrfNode> = pairs
        .iter()
        .enumerate()
        .map(|(index, &(a, b))| {
            let z = noisy_prob(rng, a == b, cfg.unary_flip);
            CrfNode {
                index,
                first: a,
                second: k + b,
                unary_prob: [1.0 - z, z],
            }
        })
        .collect();

    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&nodes[i], &nodes[j]);
            let kind = if a.first == b.first || a.second == b.second {
                EdgeKind::Repellency
            } else if rng.random::<f64>() < cfg.consistency_density {
                EdgeKind::Consistency
            } else {
                continue;
            };
            let mut e = CrfEdge::new(i, j, kind);
            e.joint_prob = [
                noisy_prob(rng, truth[i] == 1, cfg.pair_flip),
                noisy_prob(rng, truth[j] == 1, cfg.pair_flip),
            ];
            edges.push(e);
        }
    }
    let graph = CrfGraph::with_potentials(nodes, edges, cfg.w_u, cfg.w_d, 1e-6).expect("generated edges are valid");
    PlantedGraph { graph, truth }
}

/// One instance of the exactness sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleRow {
    pub seed: u64,
    pub nodes: usize,
    pub edges: usize,
    pub oracle: f64,
    pub decoded: f64,
    /// `(decoded − oracle) / max(|oracle|, 1)`.
    pub gap: f64,
    /// Decoded labeling attains the optimum energy.
    pub agree: bool,
}

impl OracleRow {
    pub const CSV_HEADER: &'static str = "seed,nodes,edges,oracle,decoded,gap,agree";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.seed,
            self.nodes,
            self.edges,
            self.oracle,
            self.decoded,
            self.gap,
            u8::from(self.agree)
        )
    }
}

/// Seed of the planted instance for `(size, seed)`.
pub fn instance_seed(size: usize, seed: u64) -> u64 {
    seed ^ ((size as u64) << 40)
}

/// Decoded inference against exhaustive minimization on planted graphs, one
/// row per `(size, seed)`, sizes outermost.
pub fn oracle_check(
    sizes: &[usize],
    seeds: &[u64],
    planted: &PlantedConfig,
    params: &CrfParams,
    exec: Execution,
) -> Result<Vec<OracleRow>> {
    let jobs: Vec<(usize, u64)> = sizes.iter().flat_map(|&n| seeds.iter().map(move |&s| (n, s))).collect();
    par::map(exec, &jobs, |&(n, seed)| -> Result<OracleRow> {
        let mut rng = ChaCha8Rng::seed_from_u64(instance_seed(n, seed));
        let g = planted_graph(
            &mut rng,
            &PlantedConfig {
                nodes: n,
                ..planted.clone()
            },
        )
        .graph;
        let best = brute_force_minimize(&g, Execution::Sequential)?;
        let labels = decode(&infer(&g, params).final_q, &g);
        let decoded = energy_integer(&g, &labels);
        let gap = (decoded - best.energy) / best.energy.abs().max(1.0);
        Ok(OracleRow {
            seed,
            nodes: g.len(),
            edges: g.edges.len(),
            oracle: best.energy,
            decoded,
            gap,
            agree: gap <= 1e-12,
        })
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_graph_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_graph(&mut rng, 30, 0.3, 5.0);
        assert_eq!(g.len(), 30);
        assert!(g.edges.len() < 30 * 29 / 2);
        for e in &g.edges {
            assert!(e.potential.iter().flatten().all(|&v| (0.0..5.0).contains(&v)));
        }
    }

    #[test]
    fn planted_truth_is_a_matching() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in [1, 5, 12, 50] {
            let p = planted_graph(
                &mut rng,
                &PlantedConfig {
                    nodes: n,
                    ..PlantedConfig::default()
                },
            );
            assert_eq!(p.graph.len(), n);
            let mut firsts = std::collections::HashSet::new();
            let mut seconds = std::collections::HashSet::new();
            for (node, &t) in p.graph.nodes.iter().zip(&p.truth) {
                if t == 1 {
                    assert!(firsts.insert(node.first));
                    assert!(seconds.insert(node.second));
                }
            }
            for e in &p.graph.edges {
                assert!(e.potential.iter().flatten().all(|&v| v >= 0.0 && v.is_finite()));
            }
        }
    }

    #[test]
    fn same_seed_same_instance() {
        let a = planted_graph(&mut ChaCha8Rng::seed_from_u64(1), &PlantedConfig::default());
        let b = planted_graph(&mut ChaCha8Rng::seed_from_u64(1), &PlantedConfig::default());
        assert_eq!(a, b);
    }

    #[test]
    fn single_node_sweep_always_agrees() {
        let rows = oracle_check(
            &[1],
            &(0..20).collect::<Vec<_>>(),
            &PlantedConfig::default(),
            &CrfParams::default(),
            Execution::Parallel,
        )
        .unwrap();
        assert_eq!(rows.len(), 20);
        assert!(rows.iter().all(|r| r.agree && r.gap == 0.0 && r.nodes == 1));
    }

    #[test]
    fn sweep_has_one_row_per_size_and_seed() {
        let p = CrfParams::default();
        let rows = oracle_check(
            &[3, 6],
            &[5, 6, 7, 8],
            &PlantedConfig::default(),
            &p,
            Execution::Parallel,
        )
        .unwrap();
        assert_eq!(rows.len(), 8);
        assert_eq!(rows[0].nodes, 3);
        assert_eq!(rows[4].nodes, 6);
        assert!(rows.iter().all(|r| r.decoded >= r.oracle && r.gap >= 0.0));
        let seq = oracle_check(
            &[3, 6],
            &[5, 6, 7, 8],
            &PlantedConfig::default(),
            &p,
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(rows, seq);
        assert_eq!(
            rows[0].to_csv_row().split(',').count(),
            OracleRow::CSV_HEADER.split(',').count()
        );
    }
}
