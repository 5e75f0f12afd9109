use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::association::{Track, TrackSet};
use crate::error::{Error, Result};
use crate::types::{Detection, Vec2};

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub n_targets: usize,
    pub n_frames: u32,
    pub arena: (f64, f64),
    /// Speed range in px/frame.
    pub speed: (f64, f64),
    /// Box width range; heights are twice the width.
    pub box_width: (f64, f64),
    pub direction_change: f64,
    pub crossings: usize,
    pub miss_rate: f64,
    /// Expected false positives per frame.
    pub fp_rate: f64,
    pub position_noise: f64,
    pub appearance_dim: usize,
    pub appearance_noise: f64,
    /// Per-target, per-frame probability that an occlusion starts.
    pub occlusion_rate: f64,
    /// Longest occlusion in frames.
    pub max_occlusion: u32,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_targets: 8,
            n_frames: 150,
            arena: (640.0, 480.0),
            speed: (1.0, 4.0),
            box_width: (20.0, 36.0),
            direction_change: 0.02,
            crossings: 3,
            miss_rate: 0.1,
            fp_rate: 0.2,
            position_noise: 2.0,
            appearance_dim: 16,
            appearance_noise: 0.3,
            occlusion_rate: 0.01,
            max_occlusion: 8,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("miss_rate", self.miss_rate),
            ("fp_rate", self.fp_rate),
            ("direction_change", self.direction_change),
            ("occlusion_rate", self.occlusion_rate),
        ];
        for (name, r) in rates {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {r}")));
            }
        }
        let positive = [
            ("arena width", self.arena.0),
            ("arena height", self.arena.1),
            ("box width", self.box_width.0),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.box_width.1 < self.box_width.0 || self.speed.1 < self.speed.0 || self.speed.0 < 0.0 {
            return Err(Error::Config("ranges must be ordered and nonnegative".into()));
        }
        if self.n_frames == 0 {
            return Err(Error::Config("n_frames must be positive".into()));
        }
        if self.position_noise < 0.0 || self.appearance_noise < 0.0 {
            return Err(Error::Config("noise levels must be nonnegative".into()));
        }
        if self.appearance_dim == 0 {
            return Err(Error::Config("appearance_dim must be positive".into()));
        }
        if 2.0 * self.box_width.1 >= self.arena.0.min(self.arena.1) {
            return Err(Error::Config("boxes do not fit in the arena".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// One track per target; track `k` carries identity `k + 1`.
    pub gt: TrackSet,
    /// Noisy detections sorted by frame.
    pub detections: Vec<Detection>,
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn random_velocity(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> Vec2 {
    let speed = rng.random_range(cfg.speed.0..=cfg.speed.1);
    let a = rng.random_range(0.0..std::f64::consts::TAU);
    Vec2::new(speed * a.cos(), speed * a.sin())
}

/// Piecewise-constant-velocity walk from `start`, `steps` frames long,
/// reflecting off the borders that keep the whole box inside the arena.
fn walk(rng: &mut ChaCha8Rng, cfg: &SceneConfig, start: Vec2, half: Vec2, steps: usize) -> Vec<Vec2> {
    let (lo, hi) = (half, Vec2::new(cfg.arena.0, cfg.arena.1) - half);
    let mut p = start;
    let mut v = random_velocity(rng, cfg);
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        out.push(p);
        if rng.random::<f64>() < cfg.direction_change {
            v = random_velocity(rng, cfg);
        }
        p += v;
        if p.x < lo.x || p.x > hi.x {
            v.x = -v.x;
            p.x = if p.x < lo.x { 2.0 * lo.x - p.x } else { 2.0 * hi.x - p.x };
        }
        if p.y < lo.y || p.y > hi.y {
            v.y = -v.y;
            p.y = if p.y < lo.y { 2.0 * lo.y - p.y } else { 2.0 * hi.y - p.y };
        }
        p.x = p.x.clamp(lo.x, hi.x);
        p.y = p.y.clamp(lo.y, hi.y);
    }
    out
}

fn box_at(frame: u32, center: Vec2, size: Vec2) -> Detection {
    Detection::from_center(frame, center, size, 1.0).expect("validated box size")
}

/// Number of maximal frame runs during which some pair of targets has
/// overlapping boxes.
pub fn count_crossings(gt: &TrackSet) -> usize {
    let mut events = 0;
    for (a, ta) in gt.tracks.iter().enumerate() {
        for tb in &gt.tracks[a + 1..] {
            let mut inside = false;
            for (da, db) in ta.detections.iter().zip(&tb.detections) {
                let overlap = da.iou(db) > 0.0;
                if overlap && !inside {
                    events += 1;
                }
                inside = overlap;
            }
        }
    }
    events
}

/// Draws a scene. The first `min(crossings, n_targets / 2)` disjoint target
/// pairs are planted to meet mid-sequence; if the overlap count still falls
/// short, the scene is redrawn from a derived seed.
pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    for attempt in 0..64u64 {
        let scene = draw(cfg, cfg.seed.wrapping_add(attempt.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
        if count_crossings(&scene.gt) >= cfg.crossings {
            return Ok(scene);
        }
    }
    Err(Error::Config(format!(
        "could not realize {} crossings with {} targets",
        cfg.crossings, cfg.n_targets
    )))
}

fn draw(cfg: &SceneConfig, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.n_targets;
    let frames = cfg.n_frames as usize;
    let sizes: Vec<Vec2> = (0..n)
        .map(|_| {
            let w = rng.random_range(cfg.box_width.0..=cfg.box_width.1);
            Vec2::new(w, 2.0 * w)
        })
        .collect();
    let appearance: Vec<Vec<f64>> = (0..n).map(|_| unit_vector(&mut rng, cfg.appearance_dim)).collect();
    let random_start = |rng: &mut ChaCha8Rng, half: Vec2| {
        Vec2::new(
            rng.random_range(half.x..=cfg.arena.0 - half.x),
            rng.random_range(half.y..=cfg.arena.1 - half.y),
        )
    };

    let mut paths: Vec<Vec<Vec2>> = Vec::with_capacity(n);
    let planted = cfg.crossings.min(n / 2);
    for k in 0..n {
        let half = sizes[k] * 0.5;
        if k % 2 == 1 && k / 2 < planted {
            // meet the partner at a random middle frame, walking both ways
            let meet = rng.random_range(frames / 4..=(3 * frames / 4).max(frames / 4));
            let lo = Vec2::new(half.x, half.y);
            let hi = Vec2::new(cfg.arena.0 - half.x, cfg.arena.1 - half.y);
            let p = paths[k - 1][meet];
            let at = Vec2::new(p.x.clamp(lo.x, hi.x), p.y.clamp(lo.y, hi.y));
            let mut back = walk(&mut rng, cfg, at, half, meet + 1);
            back.reverse();
            let fwd = walk(&mut rng, cfg, at, half, frames - meet);
            back.pop();
            back.extend(fwd);
            paths.push(back);
        } else {
            let start = random_start(&mut rng, half);
            paths.push(walk(&mut rng, cfg, start, half, frames));
        }
    }

    let tracks = paths
        .iter()
        .enumerate()
        .map(|(k, path)| {
            let detections: Vec<Detection> = path
                .iter()
                .enumerate()
                .map(|(f, &c)| {
                    box_at(f as u32 + 1, c, sizes[k])
                        .with_appearance(appearance[k].clone())
                        .with_identity(k as i64 + 1)
                })
                .collect();
            Track {
                id: k,
                interpolated: vec![false; detections.len()],
                detections,
            }
        })
        .collect();
    let gt = TrackSet { tracks };

    let noise = Normal::new(0.0, cfg.position_noise).expect("validated noise");
    let app_noise = Normal::new(0.0, cfg.appearance_noise).expect("validated noise");
    let mut detections = Vec::new();
    let mut occluded = vec![0u32; n];
    for f in 0..frames {
        for (k, track) in gt.tracks.iter().enumerate() {
            if occluded[k] > 0 {
                occluded[k] -= 1;
                continue;
            }
            if cfg.max_occlusion > 0 && rng.random::<f64>() < cfg.occlusion_rate {
                occluded[k] = rng.random_range(1..=cfg.max_occlusion) - 1;
                continue;
            }
            if rng.random::<f64>() < cfg.miss_rate {
                continue;
            }
            let g = &track.detections[f];
            let jitter = Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng));
            let app = if cfg.appearance_noise > 0.0 {
                let v: Vec<f64> = appearance[k].iter().map(|a| a + app_noise.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x / norm).collect()
            } else {
                appearance[k].clone()
            };
            let conf = rng.random_range(0.5..=1.0);
            let d = Detection::from_center(g.frame, g.center + jitter, g.size, conf)
                .expect("validated box size")
                .with_appearance(app)
                .with_identity(k as i64 + 1);
            detections.push(d);
        }
        let fps = cfg.fp_rate.floor() as usize + usize::from(rng.random::<f64>() < cfg.fp_rate.fract());
        for _ in 0..fps {
            let w = rng.random_range(cfg.box_width.0..=cfg.box_width.1);
            let size = Vec2::new(w, 2.0 * w);
            let c = random_start(&mut rng, size * 0.5);
            let conf = rng.random_range(0.3..=0.8);
            detections.push(
                Detection::from_center(f as u32 + 1, c, size, conf)
                    .expect("validated box size")
                    .with_appearance(unit_vector(&mut rng, cfg.appearance_dim)),
            );
        }
    }
    Scene { gt, detections }
}
