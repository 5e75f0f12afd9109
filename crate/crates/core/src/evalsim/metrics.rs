use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::association::{hungarian, Track, TrackSet};
use crate::types::Detection;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub mota: f64,
    pub motp: f64,
    pub idf1: f64,
    pub mt: f64,
    pub ml: f64,
    pub fp: usize,
    pub fn_: usize,
    pub ids: usize,
    pub fm: usize,
    pub gt_boxes: usize,
    pub result_boxes: usize,
    pub matches: usize,
    pub gt_tracks: usize,
}

impl MetricsReport {
    /// Whether every count is zero and every ratio is at its best value.
    pub fn is_perfect(&self) -> bool {
        self.mota == 1.0
            && self.idf1 == 1.0
            && self.fp == 0
            && self.fn_ == 0
            && self.ids == 0
            && self.fm == 0
            && self.ml == 0.0
            && (self.gt_tracks == 0 || self.mt == 1.0)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>8} {:>8} {:>8} {:>6} {:>6} {:>6} {:>6} {:>5} {:>5}",
            "MOTA", "MOTP", "IDF1", "MT", "ML", "FP", "FN", "IDS", "FM"
        );
        let _ = writeln!(
            s,
            "{:>8.4} {:>8.4} {:>8.4} {:>6.3} {:>6.3} {:>6} {:>6} {:>5} {:>5}",
            self.mota, self.motp, self.idf1, self.mt, self.ml, self.fp, self.fn_, self.ids, self.fm
        );
        s
    }

    pub fn csv_header() -> &'static str {
        "mota,motp,idf1,mt,ml,fp,fn,ids,fm,gt_boxes,result_boxes"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.mota,
            self.motp,
            self.idf1,
            self.mt,
            self.ml,
            self.fp,
            self.fn_,
            self.ids,
            self.fm,
            self.gt_boxes,
            self.result_boxes
        )
    }
}

type FrameBoxes<'a> = BTreeMap<u32, Vec<(usize, &'a Detection)>>;

fn by_frame(ts: &TrackSet) -> FrameBoxes<'_> {
    let mut m: FrameBoxes<'_> = BTreeMap::new();
    for (k, t) in ts.tracks.iter().enumerate() {
        for d in &t.detections {
            m.entry(d.frame).or_default().push((k, d));
        }
    }
    m
}

/// Matches one frame: earlier correspondences that still clear the
/// threshold are kept, the rest go through a maximum-cardinality,
/// maximum-IoU assignment. Returns `(gt slot, result slot, iou)`.
fn match_frame(
    gts: &[(usize, &Detection)],
    res: &[(usize, &Detection)],
    previous: &HashMap<usize, usize>,
    thr: f64,
) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    let mut gt_used = vec![false; gts.len()];
    let mut res_used = vec![false; res.len()];
    for (gi, (g, gd)) in gts.iter().enumerate() {
        if let Some(&r) = previous.get(g) {
            if let Some(ri) = res.iter().position(|(rk, _)| *rk == r) {
                let iou = gd.iou(res[ri].1);
                if !res_used[ri] && iou >= thr {
                    gt_used[gi] = true;
                    res_used[ri] = true;
                    out.push((gi, ri, iou));
                }
            }
        }
    }
    let free_g: Vec<usize> = (0..gts.len()).filter(|&i| !gt_used[i]).collect();
    let free_r: Vec<usize> = (0..res.len()).filter(|&i| !res_used[i]).collect();
    if free_g.is_empty() || free_r.is_empty() {
        return out;
    }
    // a per-match bonus above any IoU sum difference puts cardinality first
    let bonus = (free_g.len() + 1) as f64;
    let cost: Vec<Vec<f64>> = free_g
        .iter()
        .map(|&gi| {
            free_r
                .iter()
                .map(|&ri| {
                    let iou = gts[gi].1.iou(res[ri].1);
                    if iou >= thr {
                        -(bonus + iou)
                    } else {
                        f64::INFINITY
                    }
                })
                .collect()
        })
        .collect();
    for (a, c) in hungarian(&cost, Some(0.0)).into_iter().enumerate() {
        if let Some(c) = c {
            let (gi, ri) = (free_g[a], free_r[c]);
            out.push((gi, ri, gts[gi].1.iou(res[ri].1)));
        }
    }
    out
}

/// First and last frame holding a box, if any.
pub fn frame_range(ts: &TrackSet) -> Option<(u32, u32)> {
    let frames = ts.tracks.iter().flat_map(|t| t.detections.iter().map(|d| d.frame));
    frames.fold(None, |acc, f| match acc {
        None => Some((f, f)),
        Some((lo, hi)) => Some((lo.min(f), hi.max(f))),
    })
}

/// Boxes with `lo <= frame <= hi`; tracks left empty are dropped.
pub fn restrict_frames(ts: &TrackSet, lo: u32, hi: u32) -> TrackSet {
    let tracks = ts
        .tracks
        .iter()
        .filter_map(|t| {
            let keep: Vec<usize> = (0..t.detections.len())
                .filter(|&k| (lo..=hi).contains(&t.detections[k].frame))
                .collect();
            (!keep.is_empty()).then(|| Track {
                id: t.id,
                detections: keep.iter().map(|&k| t.detections[k].clone()).collect(),
                interpolated: keep.iter().map(|&k| t.interpolated[k]).collect(),
            })
        })
        .collect();
    TrackSet { tracks }
}

/// CLEAR-MOT and identity metrics of `result` against `gt`.
pub fn evaluate(gt: &TrackSet, result: &TrackSet, iou_threshold: f64) -> MetricsReport {
    let gt_frames = by_frame(gt);
    let res_frames = by_frame(result);
    let mut frames: Vec<u32> = gt_frames.keys().chain(res_frames.keys()).copied().collect();
    frames.sort_unstable();
    frames.dedup();

    let n_gt = gt.tracks.len();
    let mut current: HashMap<usize, usize> = HashMap::new();
    let mut last_id: Vec<Option<usize>> = vec![None; n_gt];
    let mut matched_frames = vec![0usize; n_gt];
    // 0 = never matched, 1 = matched, 2 = lost after a match
    let mut status = vec![0u8; n_gt];
    let (mut fp, mut fn_, mut ids, mut fm, mut matches) = (0, 0, 0, 0, 0);
    let mut iou_sum = 0.0;
    let empty = Vec::new();

    for f in frames {
        let gts = gt_frames.get(&f).unwrap_or(&empty);
        let res = res_frames.get(&f).unwrap_or(&empty);
        let m = match_frame(gts, res, &current, iou_threshold);
        let mut next = HashMap::with_capacity(m.len());
        let mut gt_hit = vec![false; gts.len()];
        for &(gi, ri, iou) in &m {
            let (g, r) = (gts[gi].0, res[ri].0);
            gt_hit[gi] = true;
            if last_id[g].is_some_and(|prev| prev != r) {
                ids += 1;
            }
            if status[g] == 2 {
                fm += 1;
            }
            status[g] = 1;
            last_id[g] = Some(r);
            matched_frames[g] += 1;
            next.insert(g, r);
            iou_sum += iou;
        }
        for (gi, &(g, _)) in gts.iter().enumerate() {
            if !gt_hit[gi] && status[g] == 1 {
                status[g] = 2;
            }
        }
        matches += m.len();
        fn_ += gts.len() - m.len();
        fp += res.len() - m.len();
        current = next;
    }

    let gt_boxes = gt.box_count();
    let result_boxes = result.box_count();
    let errors = (fp + fn_ + ids) as f64;
    let mota = 1.0 - errors / gt_boxes.max(1) as f64;
    let motp = if matches > 0 { iou_sum / matches as f64 } else { 0.0 };

    let (mut mt, mut ml) = (0.0, 0.0);
    for (t, &hit) in gt.tracks.iter().zip(&matched_frames) {
        let cover = hit as f64 / t.detections.len().max(1) as f64;
        if cover >= 0.8 {
            mt += 1.0;
        }
        if cover <= 0.2 {
            ml += 1.0;
        }
    }
    if n_gt > 0 {
        mt /= n_gt as f64;
        ml /= n_gt as f64;
    }

    MetricsReport {
        mota,
        motp,
        idf1: idf1(gt, result, &gt_frames, &res_frames, iou_threshold),
        mt,
        ml,
        fp,
        fn_,
        ids,
        fm,
        gt_boxes,
        result_boxes,
        matches,
        gt_tracks: n_gt,
    }
}

/// `2·IDTP / (gt boxes + result boxes)` under the track-level assignment
/// maximizing the number of frames where matched tracks overlap.
fn idf1(gt: &TrackSet, result: &TrackSet, gf: &FrameBoxes<'_>, rf: &FrameBoxes<'_>, thr: f64) -> f64 {
    let total = gt.box_count() + result.box_count();
    if total == 0 {
        return 1.0;
    }
    if gt.is_empty() || result.is_empty() {
        return 0.0;
    }
    let mut overlap = vec![vec![0usize; result.len()]; gt.len()];
    for (f, gts) in gf {
        if let Some(res) = rf.get(f) {
            for (g, gd) in gts {
                for (r, rd) in res {
                    if gd.iou(rd) >= thr {
                        overlap[*g][*r] += 1;
                    }
                }
            }
        }
    }
    let cost: Vec<Vec<f64>> = overlap
        .iter()
        .map(|row| {
            row.iter()
                .map(|&c| if c > 0 { -(c as f64) } else { f64::INFINITY })
                .collect()
        })
        .collect();
    let idtp: usize = hungarian(&cost, Some(0.0))
        .into_iter()
        .enumerate()
        .filter_map(|(g, r)| r.map(|r| overlap[g][r]))
        .sum();
    2.0 * idtp as f64 / total as f64
}
