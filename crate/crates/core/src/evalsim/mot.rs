//! MOTChallenge text files.
//!
//! Rows are `frame,id,bb_left,bb_top,bb_width,bb_height,conf,x,y,z`. Ground
//! truth uses columns 7 to 9 for flag, class and visibility instead. Any
//! columns after the tenth hold an appearance descriptor.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::association::{Track, TrackSet};
use crate::error::{Error, Result};
use crate::types::Detection;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotRole {
    Detections,
    GroundTruth,
    Results,
}

impl MotRole {
    fn min_fields(self) -> usize {
        match self {
            MotRole::GroundTruth => 9,
            _ => 7,
        }
    }
}

/// One row as stored: the six leading columns plus everything after them.
#[derive(Clone, Debug, PartialEq)]
pub struct MotRow {
    pub frame: u32,
    pub id: i64,
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
    /// Columns 7 onwards.
    pub tail: Vec<f64>,
}

impl MotRow {
    pub fn confidence(&self) -> f64 {
        self.tail[0]
    }

    pub fn appearance(&self) -> Option<&[f64]> {
        (self.tail.len() > 4).then(|| &self.tail[4..])
    }
}

fn parse_row(line: &str, lineno: usize, path: &Path, role: MotRole) -> Result<MotRow> {
    let err = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: lineno,
        msg,
    };
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() < role.min_fields() {
        return Err(err(format!(
            "expected at least {} fields, found {}",
            role.min_fields(),
            fields.len()
        )));
    }
    let frame: u32 = fields[0]
        .parse()
        .map_err(|_| err(format!("bad frame `{}`", fields[0])))?;
    if frame == 0 {
        return Err(err("frames are 1-based".into()));
    }
    let id: i64 = fields[1].parse().map_err(|_| err(format!("bad id `{}`", fields[1])))?;
    let mut nums = Vec::with_capacity(fields.len() - 2);
    for (k, f) in fields[2..].iter().enumerate() {
        let v: f64 = f
            .parse()
            .map_err(|_| err(format!("bad number `{f}` in column {}", k + 3)))?;
        if !v.is_finite() {
            return Err(err(format!("non-finite value in column {}", k + 3)));
        }
        nums.push(v);
    }
    if nums[2] <= 0.0 || nums[3] <= 0.0 {
        return Err(err(format!("box size must be positive, got {}x{}", nums[2], nums[3])));
    }
    let mut tail = nums.split_off(4);
    // ground truth keeps its nine columns; other roles are padded to ten
    while role != MotRole::GroundTruth && tail.len() < 4 {
        tail.push(-1.0);
    }
    Ok(MotRow {
        frame,
        id,
        left: nums[0],
        top: nums[1],
        width: nums[2],
        height: nums[3],
        tail,
    })
}

/// Parses file contents; blank lines are skipped and rows are stably sorted
/// by frame.
pub fn parse_mot(text: &str, path: &Path, role: MotRole) -> Result<Vec<MotRow>> {
    let mut rows = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(parse_row(line, k + 1, path, role)?);
    }
    rows.sort_by_key(|r| r.frame);
    Ok(rows)
}

pub fn read_mot(path: &Path, role: MotRole) -> Result<Vec<MotRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_mot(&text, path, role)
}

/// Shortest text that parses back to the same value.
pub fn write_mot(rows: &[MotRow]) -> String {
    let mut out = String::new();
    for r in rows {
        let _ = write!(
            out,
            "{},{},{},{},{},{}",
            r.frame, r.id, r.left, r.top, r.width, r.height
        );
        for v in &r.tail {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn rows_to_detections(rows: &[MotRow]) -> Result<Vec<Detection>> {
    rows.iter()
        .map(|r| {
            let mut d = Detection::from_box(r.frame, r.left, r.top, r.width, r.height, r.confidence())?;
            d.appearance = r.appearance().map(<[f64]>::to_vec);
            if r.id >= 0 {
                d.identity = Some(r.id);
            }
            Ok(d)
        })
        .collect()
}

pub fn detections_to_rows(dets: &[Detection]) -> Vec<MotRow> {
    dets.iter()
        .map(|d| {
            let [left, top, width, height] = d.to_box();
            let mut tail = vec![d.confidence, -1.0, -1.0, -1.0];
            if let Some(a) = &d.appearance {
                tail.extend_from_slice(a);
            }
            MotRow {
                frame: d.frame,
                id: -1,
                left,
                top,
                width,
                height,
                tail,
            }
        })
        .collect()
}

/// Groups rows by id into tracks with id `file id − 1`. Rows flagged 0 in
/// ground truth are dropped.
pub fn rows_to_trackset(rows: &[MotRow], role: MotRole) -> Result<TrackSet> {
    let mut by_id: BTreeMap<i64, Vec<&MotRow>> = BTreeMap::new();
    for r in rows {
        if role == MotRole::GroundTruth && r.tail[0] == 0.0 {
            continue;
        }
        if r.id < 1 {
            return Err(Error::MalformedInput(format!(
                "track ids must be positive, found {} at frame {}",
                r.id, r.frame
            )));
        }
        by_id.entry(r.id).or_default().push(r);
    }
    let mut tracks = Vec::with_capacity(by_id.len());
    for (id, mut rs) in by_id {
        rs.sort_by_key(|r| r.frame);
        let mut detections = Vec::with_capacity(rs.len());
        let mut interpolated = Vec::with_capacity(rs.len());
        for r in rs {
            if detections.last().is_some_and(|d: &Detection| d.frame == r.frame) {
                return Err(Error::MalformedInput(format!(
                    "id {id} appears twice in frame {}",
                    r.frame
                )));
            }
            let conf = if role == MotRole::Results { r.confidence() } else { 1.0 };
            let mut d = Detection::from_box(r.frame, r.left, r.top, r.width, r.height, conf)?;
            d.identity = Some(id);
            interpolated.push(role == MotRole::Results && conf == 0.0);
            detections.push(d);
        }
        tracks.push(Track {
            id: (id - 1) as usize,
            detections,
            interpolated,
        });
    }
    Ok(TrackSet { tracks })
}

/// Rows in frame order, ids `track.id + 1`. Ground truth rows carry flag 1,
/// class 1 and visibility 1; result rows carry the box confidence.
pub fn trackset_to_rows(ts: &TrackSet, role: MotRole) -> Vec<MotRow> {
    let mut rows = Vec::with_capacity(ts.box_count());
    for t in &ts.tracks {
        for d in &t.detections {
            let [left, top, width, height] = d.to_box();
            let tail = match role {
                MotRole::GroundTruth => vec![1.0, 1.0, 1.0],
                _ => vec![d.confidence, -1.0, -1.0, -1.0],
            };
            rows.push(MotRow {
                frame: d.frame,
                id: t.id as i64 + 1,
                left,
                top,
                width,
                height,
                tail,
            });
        }
    }
    rows.sort_by_key(|r| (r.frame, r.id));
    rows
}

/// Writes `contents` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
