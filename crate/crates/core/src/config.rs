//! Plain-text `key=value` run configuration.
//!
//! Keys are `section.field`. Every key has a default, unknown keys are
//! rejected, and `#` starts a comment. The same [`RunConfig::set`] path
//! serves file lines and command-line overrides, so later assignments win.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::association::{AssociationConfig, Mode};
use crate::error::{Error, Result};
use crate::evalsim::SceneConfig;
use crate::graph::{DifficultPairConfig, TauClose};
use crate::potentials::FeatureConfig;
use crate::tracklets::LinkThresholds;
use crate::types::{CrfParams, Projection};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub params: CrfParams,
    pub link: LinkThresholds,
    pub difficult: DifficultPairConfig,
    pub features: FeatureConfig,
    pub scene: SceneConfig,
    pub mode: Mode,
    pub unary_provider: Option<PathBuf>,
    pub pairwise_provider: Option<PathBuf>,
    /// `w_u`, `w_d`, `gamma` and `iterations` overrides from a params file.
    pub params_file: Option<PathBuf>,
    pub iou_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            params: CrfParams::default(),
            link: LinkThresholds::default(),
            difficult: DifficultPairConfig::default(),
            features: FeatureConfig::default(),
            scene: SceneConfig::default(),
            mode: Mode::default(),
            unary_provider: None,
            pairwise_provider: None,
            params_file: None,
            iou_threshold: 0.5,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn pair(key: &str, value: &str) -> Result<(f64, f64)> {
    let (a, b) = value
        .split_once(',')
        .ok_or_else(|| Error::Config(format!("{key}: expected two comma-separated numbers")))?;
    Ok((parse(key, a.trim())?, parse(key, b.trim())?))
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn parse_projection(key: &str, value: &str) -> Result<Projection> {
    match value {
        "softmax" => Ok(Projection::Softmax),
        "clip" => Ok(Projection::ClipRenorm),
        _ => Err(Error::Config(format!("{key}: expected softmax or clip, got {value:?}"))),
    }
}

fn show_projection(p: Projection) -> &'static str {
    match p {
        Projection::Softmax => "softmax",
        Projection::ClipRenorm => "clip",
    }
}

/// `40` is a radius in pixels, `2w` a multiple of the mean box width.
fn parse_tau(key: &str, value: &str) -> Result<TauClose> {
    match value.strip_suffix('w') {
        Some(k) => Ok(TauClose::WidthMultiple(parse(key, k)?)),
        None => Ok(TauClose::Pixels(parse(key, value.trim_end_matches("px"))?)),
    }
}

fn show_tau(t: TauClose) -> String {
    match t {
        TauClose::Pixels(r) => format!("{r}"),
        TauClose::WidthMultiple(k) => format!("{k}w"),
    }
}

impl RunConfig {
    /// All keys with their current values, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let p = &self.params;
        let l = &self.link;
        let s = &self.scene;
        vec![
            ("mode", self.mode.to_string()),
            ("crf.w_u", p.w_u.to_string()),
            ("crf.w_d", p.w_d.to_string()),
            ("crf.gamma", p.gamma.to_string()),
            ("crf.epsilon", p.epsilon.to_string()),
            ("crf.iterations", p.iterations.to_string()),
            ("crf.t_thr_round1", p.t_thr_round1.to_string()),
            ("crf.t_thr_round2", p.t_thr_round2.to_string()),
            ("crf.window_size", p.window_size.to_string()),
            ("crf.window_overlap", p.window_overlap.to_string()),
            ("crf.projection", show_projection(p.projection).to_string()),
            ("link.theta_high", l.theta_high.to_string()),
            ("link.theta_margin", l.theta_margin.to_string()),
            ("link.sigma_size", l.sigma_size.to_string()),
            ("link.velocity_window", l.velocity_window.to_string()),
            ("difficult.tau_close", show_tau(self.difficult.tau_close)),
            ("difficult.delta_t", self.difficult.delta_t.to_string()),
            ("feature.appearance_dim", self.features.appearance_dim.to_string()),
            ("feature.sentinel", self.features.sentinel.to_string()),
            ("scene.n_targets", s.n_targets.to_string()),
            ("scene.n_frames", s.n_frames.to_string()),
            ("scene.arena", format!("{},{}", s.arena.0, s.arena.1)),
            ("scene.speed", format!("{},{}", s.speed.0, s.speed.1)),
            ("scene.box_width", format!("{},{}", s.box_width.0, s.box_width.1)),
            ("scene.direction_change", s.direction_change.to_string()),
            ("scene.crossings", s.crossings.to_string()),
            ("scene.miss_rate", s.miss_rate.to_string()),
            ("scene.fp_rate", s.fp_rate.to_string()),
            ("scene.position_noise", s.position_noise.to_string()),
            ("scene.appearance_dim", s.appearance_dim.to_string()),
            ("scene.appearance_noise", s.appearance_noise.to_string()),
            ("scene.occlusion_rate", s.occlusion_rate.to_string()),
            ("scene.max_occlusion", s.max_occlusion.to_string()),
            ("scene.seed", s.seed.to_string()),
            ("provider.unary", show_path(&self.unary_provider)),
            ("provider.pairwise", show_path(&self.pairwise_provider)),
            ("provider.params", show_path(&self.params_file)),
            ("eval.iou_threshold", self.iou_threshold.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let p = &mut self.params;
        let l = &mut self.link;
        let s = &mut self.scene;
        match key.trim() {
            "mode" => self.mode = v.parse()?,
            "crf.w_u" => p.w_u = parse(key, v)?,
            "crf.w_d" => p.w_d = parse(key, v)?,
            "crf.gamma" => p.gamma = parse(key, v)?,
            "crf.epsilon" => p.epsilon = parse(key, v)?,
            "crf.iterations" => p.iterations = parse(key, v)?,
            "crf.t_thr_round1" => p.t_thr_round1 = parse(key, v)?,
            "crf.t_thr_round2" => p.t_thr_round2 = parse(key, v)?,
            "crf.window_size" => p.window_size = parse(key, v)?,
            "crf.window_overlap" => p.window_overlap = parse(key, v)?,
            "crf.projection" => p.projection = parse_projection(key, v)?,
            "link.theta_high" => l.theta_high = parse(key, v)?,
            "link.theta_margin" => l.theta_margin = parse(key, v)?,
            "link.sigma_size" => l.sigma_size = parse(key, v)?,
            "link.velocity_window" => l.velocity_window = parse(key, v)?,
            "difficult.tau_close" => self.difficult.tau_close = parse_tau(key, v)?,
            "difficult.delta_t" => self.difficult.delta_t = parse(key, v)?,
            "feature.appearance_dim" => self.features.appearance_dim = parse(key, v)?,
            "feature.sentinel" => self.features.sentinel = parse(key, v)?,
            "scene.n_targets" => s.n_targets = parse(key, v)?,
            "scene.n_frames" => s.n_frames = parse(key, v)?,
            "scene.arena" => s.arena = pair(key, v)?,
            "scene.speed" => s.speed = pair(key, v)?,
            "scene.box_width" => s.box_width = pair(key, v)?,
            "scene.direction_change" => s.direction_change = parse(key, v)?,
            "scene.crossings" => s.crossings = parse(key, v)?,
            "scene.miss_rate" => s.miss_rate = parse(key, v)?,
            "scene.fp_rate" => s.fp_rate = parse(key, v)?,
            "scene.position_noise" => s.position_noise = parse(key, v)?,
            "scene.appearance_dim" => s.appearance_dim = parse(key, v)?,
            "scene.appearance_noise" => s.appearance_noise = parse(key, v)?,
            "scene.occlusion_rate" => s.occlusion_rate = parse(key, v)?,
            "scene.max_occlusion" => s.max_occlusion = parse(key, v)?,
            "scene.seed" => s.seed = parse(key, v)?,
            "provider.unary" => self.unary_provider = path(v),
            "provider.pairwise" => self.pairwise_provider = path(v),
            "provider.params" => self.params_file = path(v),
            "eval.iou_threshold" => self.iou_threshold = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str, file: &Path) -> Result<()> {
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: file.to_path_buf(),
                line: k + 1,
                msg,
            };
            let (key, value) = line.split_once('=').ok_or_else(|| err("expected key=value".into()))?;
            self.set(key, value).map_err(|e| match e {
                Error::Config(msg) => err(msg),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str, file: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text, file)?;
        Ok(cfg)
    }

    pub fn read(file: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
        Self::parse(&text, file)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.scene.validate()?;
        let l = &self.link;
        if !(l.theta_high > 0.0 && l.theta_high < 1.0) || l.theta_margin < 0.0 || l.sigma_size <= 0.0 {
            return Err(Error::Config("link thresholds out of range".into()));
        }
        if l.velocity_window == 0 {
            return Err(Error::Config("link.velocity_window must be positive".into()));
        }
        let tau = match self.difficult.tau_close {
            TauClose::Pixels(r) | TauClose::WidthMultiple(r) => r,
        };
        if !(tau > 0.0) {
            return Err(Error::Config("difficult.tau_close must be positive".into()));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config("eval.iou_threshold must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn association(&self) -> AssociationConfig {
        AssociationConfig {
            params: self.params.clone(),
            link: self.link.clone(),
            difficult: self.difficult.clone(),
            features: self.features.clone(),
            mode: self.mode,
        }
    }
}

/// Keys of a fitted params file.
const PARAM_KEYS: [&str; 4] = ["w_u", "w_d", "gamma", "iterations"];

pub fn params_to_text(p: &CrfParams) -> String {
    format!(
        "w_u={}\nw_d={}\ngamma={}\niterations={}\n",
        p.w_u, p.w_d, p.gamma, p.iterations
    )
}

/// Reads `w_u`, `w_d`, `gamma` and `iterations` over `base`; all four are
/// required.
pub fn parse_params(text: &str, file: &Path, base: &CrfParams) -> Result<CrfParams> {
    let mut out = base.clone();
    let mut seen = [false; 4];
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: file.to_path_buf(),
            line: k + 1,
            msg,
        };
        let (key, value) = line.split_once('=').ok_or_else(|| err("expected key=value".into()))?;
        let (key, value) = (key.trim(), value.trim());
        let slot = PARAM_KEYS
            .iter()
            .position(|&p| p == key)
            .ok_or_else(|| err(format!("unknown key {key:?}")))?;
        let bad = || err(format!("{key}: cannot parse {value:?}"));
        match slot {
            0 => out.w_u = value.parse().map_err(|_| bad())?,
            1 => out.w_d = value.parse().map_err(|_| bad())?,
            2 => out.gamma = value.parse().map_err(|_| bad())?,
            _ => out.iterations = value.parse().map_err(|_| bad())?,
        }
        seen[slot] = true;
    }
    if let Some(k) = seen.iter().position(|s| !s) {
        return Err(Error::Parse {
            path: file.to_path_buf(),
            line: 1,
            msg: format!("missing key {:?}", PARAM_KEYS[k]),
        });
    }
    out.validate()?;
    Ok(out)
}

pub fn read_params(file: &Path, base: &CrfParams) -> Result<CrfParams> {
    let text = std::fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
    parse_params(&text, file, base)
}
