//! Plain-text interchange: MOTChallenge-style box files, embeddings and the
//! flat `key=value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::appearance::{AppearanceError, Embedding};
use crate::cmc::CmcConfig;
use crate::geometry::Box2D;
use crate::metrics::{GtEntry, ResultEntry};
use crate::tracker::{DetectionObservation, FrameResult, TrackerConfig};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: negative box dimensions")]
    NegativeDimensions { line: usize },
    #[error("line {line}: embedding has {found} values, expected {expected}")]
    InconsistentDimension { line: usize, expected: usize, found: usize },
    #[error("line {line}: {source}")]
    Embedding { line: usize, source: AppearanceError },
    #[error("config key '{key}': {message}")]
    Config { key: String, message: String },
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    std::fs::read_to_string(path).map_err(|source| IoError::Io { path: path.to_path_buf(), source })
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    std::fs::write(path, text).map_err(|source| IoError::Io { path: path.to_path_buf(), source })
}

/// One `frame,id,x,y,w,h,conf,class,visibility` row. Missing trailing
/// fields default to `conf = 1`, `class = -1`, `visibility = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotRow {
    pub frame: u32,
    pub id: i64,
    pub bbox: Box2D,
    pub confidence: f64,
    pub class_id: i32,
    pub visibility: f64,
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn field<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T, IoError> {
    s.trim().parse().map_err(|_| IoError::Parse { line, message: format!("bad {what} '{}'", s.trim()) })
}

/// Parses MOT rows and sorts them by frame, keeping file order within a
/// frame.
pub fn parse_mot(text: &str) -> Result<Vec<MotRow>, IoError> {
    let mut rows = Vec::new();
    for (line, l) in data_lines(text) {
        let f: Vec<&str> = l.split(',').collect();
        if f.len() < 6 {
            return Err(IoError::Parse { line, message: format!("expected at least 6 fields, found {}", f.len()) });
        }
        let frame: u32 = field(f[0], line, "frame")?;
        if frame == 0 {
            return Err(IoError::Parse { line, message: "frames are 1-based".into() });
        }
        let id: f64 = field(f[1], line, "id")?;
        let v: Vec<f64> = f[2..6].iter().map(|s| field(s, line, "box value")).collect::<Result<_, _>>()?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(IoError::Parse { line, message: "non-finite box value".into() });
        }
        if v[2] < 0.0 || v[3] < 0.0 {
            return Err(IoError::NegativeDimensions { line });
        }
        let confidence = f.get(6).map(|s| field::<f64>(s, line, "confidence")).transpose()?.unwrap_or(1.0);
        let class_id = f.get(7).map(|s| field::<f64>(s, line, "class")).transpose()?.unwrap_or(-1.0) as i32;
        let visibility = f.get(8).map(|s| field::<f64>(s, line, "visibility")).transpose()?.unwrap_or(1.0);
        rows.push(MotRow {
            frame,
            id: id as i64,
            bbox: Box2D::new(v[0], v[1], v[2], v[3]),
            confidence,
            class_id,
            visibility,
        });
    }
    rows.sort_by_key(|r| r.frame);
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotKind {
    Gt,
    Det,
    Result,
}

/// The three views of a MOT file.
#[derive(Debug, Clone, PartialEq)]
pub enum MotEntries {
    Gt(Vec<GtEntry>),
    Det(Vec<DetectionObservation>),
    Result(Vec<ResultEntry>),
}

pub fn read_mot_file(path: &Path, kind: MotKind) -> Result<MotEntries, IoError> {
    let rows = parse_mot(&read_text(path)?)?;
    Ok(match kind {
        MotKind::Gt => MotEntries::Gt(gt_from_rows(&rows)),
        MotKind::Det => MotEntries::Det(detections_from_rows(&rows)),
        MotKind::Result => MotEntries::Result(results_from_rows(&rows)),
    })
}

/// Ground truth rows; visibility `<= 0` marks an ignored box.
pub fn gt_from_rows(rows: &[MotRow]) -> Vec<GtEntry> {
    rows.iter()
        .map(|r| GtEntry { frame: r.frame, id: r.id.max(0) as u32, bbox: r.bbox, visible: r.visibility > 0.0 })
        .collect()
}

pub fn detections_from_rows(rows: &[MotRow]) -> Vec<DetectionObservation> {
    rows.iter()
        .map(|r| DetectionObservation {
            frame: r.frame,
            bbox: r.bbox,
            confidence: r.confidence,
            class_id: r.class_id,
            embedding: None,
        })
        .collect()
}

pub fn results_from_rows(rows: &[MotRow]) -> Vec<ResultEntry> {
    rows.iter()
        .map(|r| ResultEntry { frame: r.frame, id: r.id.max(0) as u32, bbox: r.bbox, confidence: r.confidence })
        .collect()
}

pub fn read_gt(path: &Path) -> Result<Vec<GtEntry>, IoError> {
    Ok(gt_from_rows(&parse_mot(&read_text(path)?)?))
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionObservation>, IoError> {
    Ok(detections_from_rows(&parse_mot(&read_text(path)?)?))
}

pub fn read_results(path: &Path) -> Result<Vec<ResultEntry>, IoError> {
    Ok(results_from_rows(&parse_mot(&read_text(path)?)?))
}

/// `frame,id,x,y,w,h,conf,-1,-1,-1` rows sorted by frame then id, six
/// decimals.
pub fn format_results(results: &[FrameResult]) -> String {
    let mut rows: Vec<(u32, u32, Box2D, f64)> = results
        .iter()
        .flat_map(|r| r.outputs.iter().map(move |o| (r.frame, o.track_id, o.bbox, o.confidence)))
        .collect();
    rows.sort_by_key(|r| (r.0, r.1));
    let mut s = String::new();
    for (frame, id, b, conf) in rows {
        let _ = writeln!(s, "{frame},{id},{:.6},{:.6},{:.6},{:.6},{conf:.6},-1,-1,-1", b.x, b.y, b.w, b.h);
    }
    s
}

/// Same layout as [`format_results`] for already-flattened entries.
pub fn format_result_entries(entries: &[ResultEntry]) -> String {
    let mut rows = entries.to_vec();
    rows.sort_by_key(|r| (r.frame, r.id));
    let mut s = String::new();
    for r in rows {
        let b = r.bbox;
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},-1,-1,-1",
            r.frame, r.id, b.x, b.y, b.w, b.h, r.confidence
        );
    }
    s
}

pub fn write_results(path: &Path, results: &[FrameResult]) -> Result<(), IoError> {
    write_text(path, &format_results(results))
}

/// Ground truth with `conf = 1`, `class = 1` and visibility 1 or 0. Numbers
/// use the shortest round-trip form.
pub fn format_gt(gt: &[GtEntry]) -> String {
    let mut s = String::new();
    for g in gt {
        let b = g.bbox;
        let _ = writeln!(s, "{},{},{},{},{},{},1,1,{}", g.frame, g.id, b.x, b.y, b.w, b.h, u8::from(g.visible));
    }
    s
}

/// Detection rows with `id = -1` and visibility `-1`.
pub fn format_detections(dets: &[DetectionObservation]) -> String {
    let mut s = String::new();
    for d in dets {
        let b = d.bbox;
        let _ = writeln!(s, "{},-1,{},{},{},{},{},{},-1", d.frame, b.x, b.y, b.w, b.h, d.confidence, d.class_id);
    }
    s
}

/// Parses `frame,det_index,v0,…` rows; `det_index` is the 0-based position of
/// the detection among its frame's rows. Vectors are L2-normalised.
pub fn parse_embeddings(text: &str) -> Result<BTreeMap<(u32, usize), Embedding>, IoError> {
    let mut out = BTreeMap::new();
    let mut dim: Option<usize> = None;
    for (line, l) in data_lines(text) {
        let f: Vec<&str> = l.split(',').collect();
        if f.len() < 3 {
            return Err(IoError::Parse { line, message: "expected frame, index and at least one value".into() });
        }
        let frame: u32 = field(f[0], line, "frame")?;
        let index: usize = field(f[1], line, "detection index")?;
        let values: Vec<f64> = f[2..].iter().map(|s| field(s, line, "embedding value")).collect::<Result<_, _>>()?;
        match dim {
            Some(d) if d != values.len() => {
                return Err(IoError::InconsistentDimension { line, expected: d, found: values.len() })
            }
            _ => dim = Some(values.len()),
        }
        let e = Embedding::normalized(values).map_err(|source| IoError::Embedding { line, source })?;
        out.insert((frame, index), e);
    }
    Ok(out)
}

pub fn read_embeddings(path: &Path) -> Result<BTreeMap<(u32, usize), Embedding>, IoError> {
    parse_embeddings(&read_text(path)?)
}

/// Embedding rows for every detection that carries one, indexed within its
/// frame.
pub fn format_embeddings(dets: &[DetectionObservation]) -> String {
    let mut s = String::new();
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for d in dets {
        let idx = counts.entry(d.frame).or_insert(0);
        if let Some(e) = &d.embedding {
            let _ = write!(s, "{},{}", d.frame, idx);
            for v in e.as_slice() {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        *idx += 1;
    }
    s
}

/// Every tunable of a tracking run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub tracker: TrackerConfig,
    pub cmc: CmcConfig,
    /// Longest gap filled when interpolation is requested.
    pub interpolation_max_gap: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { tracker: TrackerConfig::default(), cmc: CmcConfig::default(), interpolation_max_gap: 20 }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, IoError> {
    v.parse().map_err(|_| IoError::Config { key: key.into(), message: format!("cannot parse '{v}'") })
}

fn in_range(key: &str, v: f64, lo: f64, hi: f64) -> Result<f64, IoError> {
    if v.is_finite() && (lo..=hi).contains(&v) {
        Ok(v)
    } else {
        Err(IoError::Config { key: key.into(), message: format!("{v} outside [{lo}, {hi}]") })
    }
}

fn positive(key: &str, v: f64) -> Result<f64, IoError> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(IoError::Config { key: key.into(), message: format!("{v} must be positive") })
    }
}

impl RunConfig {
    pub const KEYS: [&'static str; 21] = [
        "buffer_frames",
        "n_init",
        "cmc_enabled",
        "appearance_enabled",
        "high_conf_threshold",
        "low_conf_threshold",
        "detection_threshold",
        "match_cost_threshold",
        "second_stage_iou_threshold",
        "appearance_sim_threshold",
        "linear_iou_threshold",
        "beta",
        "theta_iou",
        "uema_alpha",
        "kalman_position_weight",
        "kalman_velocity_weight",
        "ransac_iterations",
        "ransac_inlier_threshold",
        "ransac_min_inlier_fraction",
        "ransac_seed",
        "interpolation_max_gap",
    ];

    /// Applies one `key=value` override, validating its range.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), IoError> {
        let t = &mut self.tracker;
        let unit = |v: &str| -> Result<f64, IoError> { in_range(key, parse_value(key, v)?, 0.0, 1.0) };
        match key {
            "buffer_frames" => t.buffer_frames = parse_value(key, value)?,
            "n_init" => t.n_init = parse_value(key, value)?,
            "cmc_enabled" => t.cmc_enabled = parse_value(key, value)?,
            "appearance_enabled" => t.appearance_enabled = parse_value(key, value)?,
            "high_conf_threshold" => t.association.high_conf_threshold = unit(value)?,
            "low_conf_threshold" => t.association.low_conf_threshold = unit(value)?,
            "detection_threshold" => t.association.detection_threshold = unit(value)?,
            "match_cost_threshold" => t.association.match_cost_threshold = unit(value)?,
            "second_stage_iou_threshold" => t.association.second_stage_iou_threshold = unit(value)?,
            "appearance_sim_threshold" => {
                t.association.appearance_sim_threshold = in_range(key, parse_value(key, value)?, 0.0, 2.0)?
            }
            "linear_iou_threshold" => t.association.linear_iou_threshold = unit(value)?,
            "beta" => t.coff.beta = positive(key, parse_value(key, value)?)?,
            "theta_iou" => t.coff.theta_iou = unit(value)?,
            "uema_alpha" => {
                let a = unit(value)?;
                if a >= 1.0 {
                    return Err(IoError::Config { key: key.into(), message: "must be below 1".into() });
                }
                t.coff.alpha = a;
            }
            "kalman_position_weight" => t.kalman.position_weight = positive(key, parse_value(key, value)?)?,
            "kalman_velocity_weight" => t.kalman.velocity_weight = positive(key, parse_value(key, value)?)?,
            "ransac_iterations" => {
                let n: usize = parse_value(key, value)?;
                if n == 0 {
                    return Err(IoError::Config { key: key.into(), message: "must be at least 1".into() });
                }
                self.cmc.ransac_iterations = n;
            }
            "ransac_inlier_threshold" => self.cmc.inlier_threshold = positive(key, parse_value(key, value)?)?,
            "ransac_min_inlier_fraction" => self.cmc.min_inlier_fraction = unit(value)?,
            "ransac_seed" => self.cmc.seed = parse_value(key, value)?,
            "interpolation_max_gap" => self.interpolation_max_gap = parse_value(key, value)?,
            _ => return Err(IoError::Config { key: key.into(), message: "unknown key".into() }),
        }
        let a = &self.tracker.association;
        if a.low_conf_threshold > a.detection_threshold {
            return Err(IoError::Config {
                key: key.into(),
                message: "low_conf_threshold must not exceed detection_threshold".into(),
            });
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, IoError> {
        let mut cfg = Self::default();
        for (line, l) in data_lines(text) {
            let l = l.split('#').next().unwrap_or("").trim();
            if l.is_empty() {
                continue;
            }
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| IoError::Parse { line, message: format!("expected key=value, found '{l}'") })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        Self::parse(&read_text(path)?)
    }

    /// Every key with its current value, in [`RunConfig::KEYS`] order.
    pub fn dump(&self) -> String {
        let t = &self.tracker;
        let a = &t.association;
        let values: [String; 21] = [
            t.buffer_frames.to_string(),
            t.n_init.to_string(),
            t.cmc_enabled.to_string(),
            t.appearance_enabled.to_string(),
            a.high_conf_threshold.to_string(),
            a.low_conf_threshold.to_string(),
            a.detection_threshold.to_string(),
            a.match_cost_threshold.to_string(),
            a.second_stage_iou_threshold.to_string(),
            a.appearance_sim_threshold.to_string(),
            a.linear_iou_threshold.to_string(),
            t.coff.beta.to_string(),
            t.coff.theta_iou.to_string(),
            t.coff.alpha.to_string(),
            t.kalman.position_weight.to_string(),
            t.kalman.velocity_weight.to_string(),
            self.cmc.ransac_iterations.to_string(),
            self.cmc.inlier_threshold.to_string(),
            self.cmc.min_inlier_fraction.to_string(),
            self.cmc.seed.to_string(),
            self.interpolation_max_gap.to_string(),
        ];
        Self::KEYS.iter().zip(values).map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
