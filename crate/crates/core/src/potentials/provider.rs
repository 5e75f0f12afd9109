//! Probability providers: the learned components that turn tracklet pairs
//! and node pairs into link probabilities.
//!
//! Two families ship here: logistic models over hand-built features, which
//! the learning module can fit, and [`ProbabilityTable`], which replays
//! probabilities computed elsewhere.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{
    node_pair_feature, pair_embedding, unary_features, FeatureConfig, NodePairFeature, Side, PAIR_EMBED_DIM, UNARY_DIM,
};
use crate::error::{Error, Result};
use crate::types::{CrfNode, Tracklet};

pub trait UnaryProvider: Send + Sync {
    /// Probability that `tracklets[first] -> tracklets[second]` is a true link.
    fn link_probability(&self, tracklets: &[Tracklet], first: usize, second: usize, t_thr: u32) -> f64;
}

/// Everything a pairwise provider may look at for one difficult node pair.
pub struct PairContext<'a> {
    pub tracklets: &'a [Tracklet],
    pub vi: &'a CrfNode,
    pub vj: &'a CrfNode,
    pub feature: &'a NodePairFeature,
}

pub trait PairwiseProvider: Send + Sync {
    /// Context-conditioned probabilities that `vi` and `vj` take label 1.
    fn joint_probability(&self, ctx: &PairContext<'_>) -> [f64; 2];
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn affine(w: &[f64], bias: f64, x: &[f64]) -> f64 {
    w.iter().zip(x).fold(bias, |acc, (a, b)| acc + a * b)
}

/// `σ(w · unary_features + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticUnary {
    pub weights: [f64; UNARY_DIM],
    pub bias: f64,
}

impl Default for LogisticUnary {
    fn default() -> Self {
        LogisticUnary {
            weights: [4.0, -2.5, -2.5, -1.0],
            bias: -0.5,
        }
    }
}

impl LogisticUnary {
    pub fn zeros() -> Self {
        LogisticUnary {
            weights: [0.0; UNARY_DIM],
            bias: 0.0,
        }
    }

    pub fn probability(&self, x: &[f64; UNARY_DIM]) -> f64 {
        sigmoid(affine(&self.weights, self.bias, x))
    }
}

impl UnaryProvider for LogisticUnary {
    fn link_probability(&self, tracklets: &[Tracklet], first: usize, second: usize, t_thr: u32) -> f64 {
        match unary_features(&tracklets[first], &tracklets[second], t_thr) {
            Ok(x) => self.probability(&x),
            Err(_) => 0.0,
        }
    }
}

/// Two logistic heads over the oriented node-pair embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticPairwise {
    /// Pixel scale of the log-compressed crossed motion magnitudes.
    pub scale: f64,
    /// Frame scale of the link gaps.
    pub gap_scale: f64,
    /// `heads[0]` scores node `i`, `heads[1]` node `j`; the last entry of
    /// each head is its bias.
    pub heads: [[f64; PAIR_EMBED_DIM + 1]; 2],
}

impl Default for LogisticPairwise {
    fn default() -> Self {
        let head = [
            4.0, -2.5, -2.5, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -0.5,
        ];
        LogisticPairwise {
            scale: 50.0,
            gap_scale: 25.0,
            heads: [head, head],
        }
    }
}

impl LogisticPairwise {
    pub fn zeros() -> Self {
        LogisticPairwise {
            scale: 50.0,
            gap_scale: 25.0,
            heads: [[0.0; PAIR_EMBED_DIM + 1]; 2],
        }
    }

    pub fn embeddings(&self, ctx: &PairContext<'_>) -> [[f64; PAIR_EMBED_DIM]; 2] {
        [
            pair_embedding(ctx, Side::I, self.scale, self.gap_scale),
            pair_embedding(ctx, Side::J, self.scale, self.gap_scale),
        ]
    }

    pub fn head_probability(&self, head: usize, x: &[f64; PAIR_EMBED_DIM]) -> f64 {
        let h = &self.heads[head];
        sigmoid(affine(&h[..PAIR_EMBED_DIM], h[PAIR_EMBED_DIM], x))
    }

    pub fn probabilities(&self, ctx: &PairContext<'_>) -> [f64; 2] {
        let [ei, ej] = self.embeddings(ctx);
        [self.head_probability(0, &ei), self.head_probability(1, &ej)]
    }
}

impl PairwiseProvider for LogisticPairwise {
    fn joint_probability(&self, ctx: &PairContext<'_>) -> [f64; 2] {
        self.probabilities(ctx)
    }
}

/// Stored probabilities keyed by tracklet ids.
///
/// CSV rows are `key,z0,z1`. Node keys are `n:<first>:<second>` and the
/// values are the unary pair `(z0, z1)`. Edge keys are
/// `e:<i1>:<i2>:<j1>:<j2>` and the two values are the label-1
/// probabilities of node `i` and node `j`. Unknown keys yield 0.5.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProbabilityTable {
    pub nodes: HashMap<(usize, usize), [f64; 2]>,
    pub edges: HashMap<[usize; 4], [f64; 2]>,
}

impl ProbabilityTable {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut table = ProbabilityTable::default();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: k + 1,
                msg,
            };
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 3 {
                return Err(err(format!("expected 3 fields, found {}", cols.len())));
            }
            let num = |s: &str| -> Result<f64> {
                let v: f64 = s.parse().map_err(|_| err(format!("bad number {s:?}")))?;
                if (0.0..=1.0).contains(&v) {
                    Ok(v)
                } else {
                    Err(err(format!("probability {v} outside [0,1]")))
                }
            };
            let vals = [num(cols[1])?, num(cols[2])?];
            let ids: Vec<usize> = cols[0]
                .split(':')
                .skip(1)
                .map(|s| s.parse::<usize>().map_err(|_| err(format!("bad key {:?}", cols[0]))))
                .collect::<Result<_>>()?;
            match (cols[0].split(':').next(), ids.as_slice()) {
                (Some("n"), &[a, b]) => {
                    table.nodes.insert((a, b), vals);
                }
                (Some("e"), &[a, b, c, d]) => {
                    table.edges.insert([a, b, c, d], vals);
                }
                _ => return Err(err(format!("bad key {:?}", cols[0]))),
            }
        }
        Ok(table)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_csv(&self) -> String {
        let mut nodes: Vec<_> = self.nodes.iter().collect();
        nodes.sort_by_key(|(k, _)| **k);
        let mut edges: Vec<_> = self.edges.iter().collect();
        edges.sort_by_key(|(k, _)| **k);
        let mut out = String::new();
        for ((a, b), [z0, z1]) in nodes {
            let _ = writeln!(out, "n:{a}:{b},{z0},{z1}");
        }
        for ([a, b, c, d], [zi, zj]) in edges {
            let _ = writeln!(out, "e:{a}:{b}:{c}:{d},{zi},{zj}");
        }
        out
    }

    /// Records the outputs of other providers so they can be replayed.
    pub fn capture(
        tracklets: &[Tracklet],
        nodes: &[CrfNode],
        edges: &[(usize, usize)],
        unary: &dyn UnaryProvider,
        pairwise: &dyn PairwiseProvider,
        t_thr: u32,
        features: &FeatureConfig,
    ) -> Result<Self> {
        let mut table = ProbabilityTable::default();
        for n in nodes {
            let z1 = unary.link_probability(tracklets, n.first, n.second, t_thr);
            let key = (tracklets[n.first].id, tracklets[n.second].id);
            table.nodes.insert(key, [1.0 - z1, z1]);
        }
        for &(i, j) in edges {
            let (vi, vj) = (&nodes[i], &nodes[j]);
            let feature = node_pair_feature(tracklets, vi, vj, features)?;
            let p = pairwise.joint_probability(&PairContext {
                tracklets,
                vi,
                vj,
                feature: &feature,
            });
            table.edges.insert(edge_key(tracklets, vi, vj), p);
        }
        Ok(table)
    }
}

fn edge_key(tracklets: &[Tracklet], vi: &CrfNode, vj: &CrfNode) -> [usize; 4] {
    [
        tracklets[vi.first].id,
        tracklets[vi.second].id,
        tracklets[vj.first].id,
        tracklets[vj.second].id,
    ]
}

impl UnaryProvider for ProbabilityTable {
    fn link_probability(&self, tracklets: &[Tracklet], first: usize, second: usize, _t_thr: u32) -> f64 {
        self.nodes
            .get(&(tracklets[first].id, tracklets[second].id))
            .map_or(0.5, |z| z[1])
    }
}

impl PairwiseProvider for ProbabilityTable {
    fn joint_probability(&self, ctx: &PairContext<'_>) -> [f64; 2] {
        let key = edge_key(ctx.tracklets, ctx.vi, ctx.vj);
        if let Some(p) = self.edges.get(&key) {
            return *p;
        }
        let [a, b, c, d] = key;
        self.edges.get(&[c, d, a, b]).map_or([0.5, 0.5], |p| [p[1], p[0]])
    }
}

/// A logistic provider parameter file.
///
/// The header is `key=value` lines (`type`, `d_a`, `dims`, and `scale`, `gap_scale` for
/// pairwise models); the remaining lines hold whitespace-separated weights,
/// each weight vector followed by its bias.
#[derive(Clone, Debug, PartialEq)]
pub enum ProviderFile {
    Unary {
        appearance_dim: usize,
        model: LogisticUnary,
    },
    Pairwise {
        appearance_dim: usize,
        model: LogisticPairwise,
    },
}

impl ProviderFile {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let join = |xs: &[f64]| xs.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ");
        match self {
            ProviderFile::Unary { appearance_dim, model } => {
                let _ = writeln!(out, "type=logistic-unary");
                let _ = writeln!(out, "d_a={appearance_dim}");
                let _ = writeln!(out, "dims={UNARY_DIM}");
                let mut w = model.weights.to_vec();
                w.push(model.bias);
                let _ = writeln!(out, "{}", join(&w));
            }
            ProviderFile::Pairwise { appearance_dim, model } => {
                let _ = writeln!(out, "type=logistic-pairwise");
                let _ = writeln!(out, "d_a={appearance_dim}");
                let _ = writeln!(out, "dims={PAIR_EMBED_DIM}");
                let _ = writeln!(out, "scale={}", model.scale);
                let _ = writeln!(out, "gap_scale={}", model.gap_scale);
                for h in &model.heads {
                    let _ = writeln!(out, "{}", join(h));
                }
            }
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut header: HashMap<String, (String, usize)> = HashMap::new();
        let mut numbers: Vec<f64> = Vec::new();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: k + 1,
                msg,
            };
            if let Some((key, value)) = line.split_once('=') {
                if !numbers.is_empty() {
                    return Err(err("header line after weights".into()));
                }
                header.insert(key.trim().to_string(), (value.trim().to_string(), k + 1));
            } else {
                for tok in line.split_whitespace() {
                    numbers.push(tok.parse().map_err(|_| err(format!("bad weight {tok:?}")))?);
                }
            }
        }
        let field = |name: &str| -> Result<&(String, usize)> {
            header.get(name).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: format!("missing header key {name:?}"),
            })
        };
        let int = |name: &str| -> Result<usize> {
            let (v, line) = field(name)?;
            v.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: *line,
                msg: format!("{name} must be an integer"),
            })
        };
        let appearance_dim = int("d_a")?;
        let dims = int("dims")?;
        let (kind, kind_line) = field("type")?.clone();
        let expect = |want_dims: usize, want_len: usize| -> Result<()> {
            if dims != want_dims || numbers.len() != want_len {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: kind_line,
                    msg: format!(
                        "{kind}: expected dims={want_dims} and {want_len} weights, got dims={dims} and {} weights",
                        numbers.len()
                    ),
                });
            }
            Ok(())
        };
        match kind.as_str() {
            "logistic-unary" => {
                expect(UNARY_DIM, UNARY_DIM + 1)?;
                let mut weights = [0.0; UNARY_DIM];
                weights.copy_from_slice(&numbers[..UNARY_DIM]);
                Ok(ProviderFile::Unary {
                    appearance_dim,
                    model: LogisticUnary {
                        weights,
                        bias: numbers[UNARY_DIM],
                    },
                })
            }
            "logistic-pairwise" => {
                expect(PAIR_EMBED_DIM, 2 * (PAIR_EMBED_DIM + 1))?;
                let number = |name: &str| -> Result<f64> {
                    let (v, line) = field(name)?;
                    v.parse().map_err(|_| Error::Parse {
                        path: path.to_path_buf(),
                        line: *line,
                        msg: format!("{name} must be a number"),
                    })
                };
                let scale = number("scale")?;
                let gap_scale = number("gap_scale")?;
                let mut heads = [[0.0; PAIR_EMBED_DIM + 1]; 2];
                heads[0].copy_from_slice(&numbers[..PAIR_EMBED_DIM + 1]);
                heads[1].copy_from_slice(&numbers[PAIR_EMBED_DIM + 1..]);
                Ok(ProviderFile::Pairwise {
                    appearance_dim,
                    model: LogisticPairwise {
                        scale,
                        gap_scale,
                        heads,
                    },
                })
            }
            other => Err(Error::Parse {
                path: path.to_path_buf(),
                line: kind_line,
                msg: format!("unknown provider type {other:?}"),
            }),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}
