//! Frame-to-frame linking of detections into short, conservative tracklets.

use crate::error::{Error, Result};
use crate::types::{Detection, Tracklet, Vec2};

/// Two-threshold linking parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkThresholds {
    /// Minimum affinity for a link.
    pub theta_high: f64,
    /// Required margin over every conflicting affinity.
    pub theta_margin: f64,
    /// Spread of the relative size-change factor.
    pub sigma_size: f64,
    /// Detections used for each endpoint velocity fit.
    pub velocity_window: usize,
}

impl Default for LinkThresholds {
    fn default() -> Self {
        LinkThresholds {
            theta_high: 0.5,
            theta_margin: 0.1,
            sigma_size: 0.3,
            velocity_window: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum End {
    Head,
    Tail,
}

/// Cosine similarity; zero when either vector is empty or null.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || a.len() != b.len() {
        return 0.0;
    }
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

/// Affinity of `a` in frame `t` and `b` in frame `t + 1`: product of a
/// position factor, a relative size factor and an appearance factor.
pub fn frame_affinity(a: &Detection, b: &Detection, sigma_size: f64) -> Result<f64> {
    if b.frame != a.frame + 1 {
        return Err(Error::Contract(format!(
            "affinity needs adjacent frames, got {} and {}",
            a.frame, b.frame
        )));
    }
    let sigma_p = 0.5 * (a.diagonal() + b.diagonal());
    let position = (-(a.center - b.center).norm_sq() / (2.0 * sigma_p * sigma_p)).exp();
    let rel = (a.size - b.size).l1() / a.size.l1();
    let size = (-(rel * rel) / (2.0 * sigma_size * sigma_size)).exp();
    let appearance = match (&a.appearance, &b.appearance) {
        (Some(x), Some(y)) => 0.5 * (1.0 + cosine(x, y)),
        _ => 1.0,
    };
    Ok(position * size * appearance)
}

/// Groups detections by frame, sorted ascending. Empty frames are omitted.
pub fn group_by_frame(mut detections: Vec<Detection>) -> Vec<Vec<Detection>> {
    detections.sort_by_key(|d| d.frame);
    let mut out: Vec<Vec<Detection>> = Vec::new();
    for d in detections {
        match out.last_mut() {
            Some(g) if g[0].frame == d.frame => g.push(d),
            _ => out.push(vec![d]),
        }
    }
    out
}

/// Links detections of consecutive frames and returns the maximal chains.
///
/// A pair is linked only if its affinity reaches `theta_high` and beats every
/// conflicting pair (same source or same target) by `theta_margin`. Eligible
/// pairs are accepted greedily by descending affinity.
pub fn link_detections(frames: &[Vec<Detection>], thr: &LinkThresholds) -> Vec<Tracklet> {
    // chains[k] holds the detections of an open or closed chain
    let mut chains: Vec<Vec<Detection>> = Vec::new();
    // open[i] = chain index of detection i in the previous frame
    let mut open: Vec<usize> = Vec::new();
    let mut prev: Option<&Vec<Detection>> = None;

    for frame in frames {
        let mut next_open = vec![usize::MAX; frame.len()];
        if let Some(p) = prev.filter(|p| !p.is_empty() && !frame.is_empty() && frame[0].frame == p[0].frame + 1) {
            let aff: Vec<Vec<f64>> = p
                .iter()
                .map(|a| {
                    frame
                        .iter()
                        .map(|b| frame_affinity(a, b, thr.sigma_size).unwrap_or(0.0))
                        .collect()
                })
                .collect();
            let row_best2 = |i: usize, skip: usize| {
                (0..frame.len())
                    .filter(|&j| j != skip)
                    .map(|j| aff[i][j])
                    .fold(0.0, f64::max)
            };
            let col_best2 = |j: usize, skip: usize| {
                (0..p.len())
                    .filter(|&i| i != skip)
                    .map(|i| aff[i][j])
                    .fold(0.0, f64::max)
            };
            let mut eligible = Vec::new();
            for i in 0..p.len() {
                for j in 0..frame.len() {
                    let a = aff[i][j];
                    let conflict = row_best2(i, j).max(col_best2(j, i));
                    if a >= thr.theta_high && a >= thr.theta_margin + conflict {
                        eligible.push((a, i, j));
                    }
                }
            }
            eligible.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
            let mut used_src = vec![false; p.len()];
            for (_, i, j) in eligible {
                if used_src[i] || next_open[j] != usize::MAX {
                    continue;
                }
                used_src[i] = true;
                let c = open[i];
                chains[c].push(frame[j].clone());
                next_open[j] = c;
            }
        }
        for (j, d) in frame.iter().enumerate() {
            if next_open[j] == usize::MAX {
                next_open[j] = chains.len();
                chains.push(vec![d.clone()]);
            }
        }
        open = next_open;
        prev = Some(frame);
    }

    chains.sort_by_key(|c| c[0].frame);
    chains
        .into_iter()
        .enumerate()
        .map(|(id, dets)| Tracklet::new(id, dets, thr.velocity_window).expect("linked chains are consecutive"))
        .collect()
}

/// Least-squares slope of center versus frame over the first (`Head`) or last
/// (`Tail`) `min(window, len)` detections; zero for single detections.
pub fn estimate_velocity(t: &Tracklet, end: End, window: usize) -> Vec2 {
    let n = t.detections.len().min(window.max(2));
    if n < 2 {
        return Vec2::ZERO;
    }
    let span = match end {
        End::Head => &t.detections[..n],
        End::Tail => &t.detections[t.detections.len() - n..],
    };
    let mean_f = span.iter().map(|d| d.frame as f64).sum::<f64>() / n as f64;
    let mean_c = span.iter().fold(Vec2::ZERO, |acc, d| acc + d.center) * (1.0 / n as f64);
    let mut sxx = 0.0;
    let mut sxy = Vec2::ZERO;
    for d in span {
        let df = d.frame as f64 - mean_f;
        sxx += df * df;
        sxy += (d.center - mean_c) * df;
    }
    sxy * (1.0 / sxx)
}

/// Detection with maximal confidence, earliest frame on ties.
pub fn most_confident_detection(t: &Tracklet) -> &Detection {
    let mut best = &t.detections[0];
    for d in &t.detections[1..] {
        if d.confidence > best.confidence {
            best = d;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(frame: u32, cx: f64, cy: f64) -> Detection {
        Detection::from_center(frame, Vec2::new(cx, cy), Vec2::new(20.0, 40.0), 0.9).unwrap()
    }

    #[test]
    fn affinity_of_identical_boxes_is_one() {
        let a = det(1, 50.0, 50.0).with_appearance(vec![1.0, 0.0]);
        let b = det(2, 50.0, 50.0).with_appearance(vec![1.0, 0.0]);
        assert_eq!(frame_affinity(&a, &b, 0.3).unwrap(), 1.0);
    }

    #[test]
    fn affinity_three_sigma_apart() {
        let a = det(1, 0.0, 0.0);
        let sigma = a.diagonal();
        let b = det(2, 3.0 * sigma, 0.0);
        let v = frame_affinity(&a, &b, 0.3).unwrap();
        assert!((v - (-4.5f64).exp()).abs() < 1e-15);
        assert!((v - 0.011109).abs() < 1e-6);
    }

    #[test]
    fn affinity_missing_appearance_is_neutral() {
        let a = det(1, 0.0, 0.0).with_appearance(vec![1.0, 0.0]);
        let b = det(2, 0.0, 0.0);
        assert_eq!(frame_affinity(&a, &b, 0.3).unwrap(), 1.0);
        assert!(frame_affinity(&a, &det(3, 0.0, 0.0), 0.3).is_err());
    }

    #[test]
    fn single_target_forms_one_tracklet() {
        let frames: Vec<_> = (1..=10).map(|f| vec![det(f, 10.0 + 3.0 * f as f64, 40.0)]).collect();
        let ts = link_detections(&frames, &LinkThresholds::default());
        assert_eq!(ts.len(), 1);
        assert_eq!(ts[0].len(), 10);
        assert!(link_detections(&[], &LinkThresholds::default()).is_empty());
    }

    #[test]
    fn frame_holes_break_chains() {
        let frames = vec![vec![det(1, 0.0, 0.0)], vec![det(2, 0.0, 0.0)], vec![det(4, 0.0, 0.0)]];
        let ts = link_detections(&frames, &LinkThresholds::default());
        assert_eq!(ts.iter().map(|t| t.len()).collect::<Vec<_>>(), vec![2, 1]);
    }

    #[test]
    fn velocity_examples() {
        let t = Tracklet::new(0, vec![det(1, 0.0, 0.0), det(2, 2.0, 0.0), det(3, 4.0, 0.0)], 3).unwrap();
        assert_eq!(estimate_velocity(&t, End::Tail, 3), Vec2::new(2.0, 0.0));
        assert_eq!(t.tail_velocity, Vec2::new(2.0, 0.0));
        let single = Tracklet::new(1, vec![det(4, 1.0, 1.0)], 5).unwrap();
        assert_eq!(estimate_velocity(&single, End::Head, 5), Vec2::ZERO);
    }

    #[test]
    fn velocity_uses_the_requested_end() {
        // accelerating track: head slope 1, tail slope 3
        let xs = [0.0, 1.0, 2.0, 5.0, 8.0];
        let dets = xs.iter().enumerate().map(|(k, &x)| det(k as u32 + 1, x, 0.0)).collect();
        let t = Tracklet::new(0, dets, 3).unwrap();
        assert_eq!(estimate_velocity(&t, End::Head, 3).x, 1.0);
        assert_eq!(estimate_velocity(&t, End::Tail, 3).x, 3.0);
    }

    #[test]
    fn most_confident_examples() {
        let mk = |cs: &[f64]| {
            let dets = cs
                .iter()
                .enumerate()
                .map(|(k, &c)| {
                    let mut d = det(k as u32 + 1, 0.0, 0.0);
                    d.confidence = c;
                    d
                })
                .collect();
            Tracklet::new(0, dets, 5).unwrap()
        };
        let pick = |cs: &[f64]| {
            let t = mk(cs);
            let d = most_confident_detection(&t);
            (d.frame - 1) as usize
        };
        assert_eq!(pick(&[0.3, 0.9, 0.5]), 1);
        assert_eq!(pick(&[0.7, 0.7, 0.7]), 0);
        assert_eq!(pick(&[0.5, 0.5, 0.8]), 2);
    }

    fn random_frames(seed: &[(u8, u8, u8)]) -> Vec<Vec<Detection>> {
        // a handful of loosely moving detections per frame
        let mut frames = Vec::new();
        let mut uid = 0;
        for (f, chunk) in seed.chunks(3).enumerate() {
            let dets = chunk
                .iter()
                .map(|&(x, y, _)| {
                    uid += 1;
                    det(f as u32 + 1, x as f64, y as f64).with_identity(uid)
                })
                .collect();
            frames.push(dets);
        }
        frames
    }

    proptest! {
        #[test]
        fn linking_partitions_detections(seed in prop::collection::vec((0u8..80, 0u8..80, 0u8..1), 1..60)) {
            let frames = random_frames(&seed);
            let ts = link_detections(&frames, &LinkThresholds::default());
            let mut got: Vec<i64> = ts
                .iter()
                .flat_map(|t| t.detections.iter())
                .map(|d| d.identity.unwrap())
                .collect();
            let mut want: Vec<i64> = frames.iter().flatten().map(|d| d.identity.unwrap()).collect();
            got.sort();
            want.sort();
            prop_assert_eq!(got, want);
        }

        #[test]
        fn raising_theta_high_only_splits(seed in prop::collection::vec((0u8..80, 0u8..80, 0u8..1), 1..60), lo in 0.1f64..0.6, bump in 0.0f64..0.4) {
            let frames = random_frames(&seed);
            let low = LinkThresholds { theta_high: lo, ..Default::default() };
            let high = LinkThresholds { theta_high: lo + bump, ..Default::default() };
            let a = link_detections(&frames, &low);
            let b = link_detections(&frames, &high);
            let key = |d: &Detection| d.identity;
            for t in &b {
                let first = key(&t.detections[0]);
                let parent = a.iter().find(|p| p.detections.iter().any(|d| key(d) == first)).unwrap();
                prop_assert!(t.len() <= parent.len());
                for d in &t.detections {
                    prop_assert!(parent.detections.iter().any(|p| key(p) == key(d)));
                }
            }
        }
    }
}
