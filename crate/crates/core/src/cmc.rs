//! Platform (camera) motion estimation.
//!
//! Every transform here maps frame `k-1` image coordinates into frame `k`
//! image coordinates. Frame 1 has the identity transform.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{AffineTransform2D, Point2D};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CmcError {
    #[error("need at least 3 correspondences, got {0}")]
    InsufficientCorrespondences(usize),
    #[error("source points are collinear")]
    DegenerateConfiguration,
    #[error("best consensus covers {inliers} of {total} correspondences")]
    NoConsensus { inliers: usize, total: usize },
    #[error("no transform for frame {0}")]
    MissingFrame(u32),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub source: Point2D,
    pub target: Point2D,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCorrespondenceSet {
    pub frame_index: u32,
    pub pairs: Vec<Correspondence>,
}

impl PointCorrespondenceSet {
    pub fn new(frame_index: u32, pairs: Vec<Correspondence>) -> Self {
        Self { frame_index, pairs }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CmcConfig {
    pub ransac_iterations: usize,
    /// Pixels.
    pub inlier_threshold: f64,
    pub min_inlier_fraction: f64,
    pub seed: u64,
}

impl Default for CmcConfig {
    fn default() -> Self {
        Self { ransac_iterations: 200, inlier_threshold: 3.0, min_inlier_fraction: 0.3, seed: 0 }
    }
}

fn residual(t: &AffineTransform2D, c: &Correspondence) -> f64 {
    let p = t.apply_point(c.source);
    (p.x - c.target.x).hypot(p.y - c.target.y)
}

/// Least-squares affine fit minimising `Σ‖m·s + t − d‖²`.
///
/// Solved on centered coordinates: the translation decouples, leaving a
/// 2×2 normal system shared by both output rows.
pub fn fit_affine_lsq(pairs: &[Correspondence]) -> Result<AffineTransform2D, CmcError> {
    let n = pairs.len();
    if n < 3 {
        return Err(CmcError::InsufficientCorrespondences(n));
    }
    let nf = n as f64;
    let (mut sx, mut sy, mut dx, mut dy) = (0.0, 0.0, 0.0, 0.0);
    for c in pairs {
        sx += c.source.x;
        sy += c.source.y;
        dx += c.target.x;
        dy += c.target.y;
    }
    let (sx, sy, dx, dy) = (sx / nf, sy / nf, dx / nf, dy / nf);

    // Sss = Σ s̃ s̃ᵀ, Sds = Σ d̃ s̃ᵀ
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    let mut sds = [[0.0; 2]; 2];
    for c in pairs {
        let (ux, uy) = (c.source.x - sx, c.source.y - sy);
        let (vx, vy) = (c.target.x - dx, c.target.y - dy);
        sxx += ux * ux;
        sxy += ux * uy;
        syy += uy * uy;
        sds[0][0] += vx * ux;
        sds[0][1] += vx * uy;
        sds[1][0] += vy * ux;
        sds[1][1] += vy * uy;
    }
    let det = sxx * syy - sxy * sxy;
    let scale = (sxx + syy).powi(2);
    if scale <= 0.0 || det <= 1e-12 * scale {
        return Err(CmcError::DegenerateConfiguration);
    }
    let inv = [[syy / det, -sxy / det], [-sxy / det, sxx / det]];
    let mut m = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            m[r][c] = sds[r][0] * inv[0][c] + sds[r][1] * inv[1][c];
        }
    }
    let t = [dx - (m[0][0] * sx + m[0][1] * sy), dy - (m[1][0] * sx + m[1][1] * sy)];
    Ok(AffineTransform2D::new(m, t))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacFit {
    pub transform: AffineTransform2D,
    pub inliers: Vec<bool>,
}

impl RansacFit {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

/// Robust affine estimate. Moving targets show up as outliers.
///
/// Minimal samples of three are drawn from a ChaCha stream seeded by
/// `cfg.seed`, so the result is reproducible. The best hypothesis (first
/// one wins on ties) is refit on its inliers.
pub fn estimate_affine_ransac(pairs: &[Correspondence], cfg: &CmcConfig) -> Result<RansacFit, CmcError> {
    let n = pairs.len();
    if n < 3 {
        return Err(CmcError::InsufficientCorrespondences(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, AffineTransform2D)> = None;
    for _ in 0..cfg.ransac_iterations.max(1) {
        let idx = index::sample(&mut rng, n, 3);
        let sample = [pairs[idx.index(0)], pairs[idx.index(1)], pairs[idx.index(2)]];
        let Ok(model) = fit_affine_lsq(&sample) else {
            continue;
        };
        let count = pairs.iter().filter(|c| residual(&model, c) < cfg.inlier_threshold).count();
        if best.as_ref().is_none_or(|(b, _)| count > *b) {
            best = Some((count, model));
            if count == n {
                break;
            }
        }
    }
    let Some((count, model)) = best else {
        return Err(CmcError::DegenerateConfiguration);
    };
    if (count as f64) < cfg.min_inlier_fraction * n as f64 || count < 3 {
        return Err(CmcError::NoConsensus { inliers: count, total: n });
    }
    let mask: Vec<bool> = pairs.iter().map(|c| residual(&model, c) < cfg.inlier_threshold).collect();
    let inlier_pairs: Vec<Correspondence> =
        pairs.iter().zip(&mask).filter_map(|(c, &keep)| keep.then_some(*c)).collect();
    let refit = fit_affine_lsq(&inlier_pairs)?;
    let inliers = pairs.iter().map(|c| residual(&refit, c) < cfg.inlier_threshold).collect();
    Ok(RansacFit { transform: refit, inliers })
}

/// Per-frame supply of platform transforms.
#[derive(Debug, Clone)]
pub enum TransformSource {
    /// CMC disabled.
    Identity,
    /// Precomputed transforms keyed by frame.
    File(BTreeMap<u32, AffineTransform2D>),
    /// Estimated on demand from correspondences. Frames without a set
    /// (including frame 1) get the identity.
    Correspondences { sets: BTreeMap<u32, PointCorrespondenceSet>, config: CmcConfig },
}

impl TransformSource {
    pub fn transform_for(&self, frame: u32) -> Result<AffineTransform2D, CmcError> {
        match self {
            TransformSource::Identity => Ok(AffineTransform2D::identity()),
            TransformSource::File(map) => map.get(&frame).copied().ok_or(CmcError::MissingFrame(frame)),
            TransformSource::Correspondences { sets, config } => match sets.get(&frame) {
                Some(set) if !set.pairs.is_empty() => {
                    let cfg = CmcConfig { seed: config.seed ^ u64::from(frame), ..*config };
                    estimate_affine_ransac(&set.pairs, &cfg).map(|f| f.transform)
                }
                _ => Ok(AffineTransform2D::identity()),
            },
        }
    }

    /// Transforms for frames `1..=frames`, in order.
    pub fn stream(&self, frames: u32) -> impl Iterator<Item = Result<AffineTransform2D, CmcError>> + '_ {
        (1..=frames).map(move |f| self.transform_for(f))
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, TransformSource::Identity)
    }
}

fn parse_fields(line: &str, lineno: usize, want: usize) -> Result<Vec<f64>, CmcError> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() < want {
        return Err(CmcError::Parse {
            line: lineno,
            message: format!("expected {want} fields, found {}", fields.len()),
        });
    }
    fields[..want]
        .iter()
        .map(|f| f.parse::<f64>().map_err(|e| CmcError::Parse { line: lineno, message: format!("{f:?}: {e}") }))
        .collect()
}

fn parse_frame(v: f64, lineno: usize) -> Result<u32, CmcError> {
    if v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
        Ok(v as u32)
    } else {
        Err(CmcError::Parse { line: lineno, message: format!("bad frame index {v}") })
    }
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

/// Parses `frame,a11,a12,a21,a22,tx,ty` rows.
pub fn parse_transforms(text: &str) -> Result<BTreeMap<u32, AffineTransform2D>, CmcError> {
    let mut out = BTreeMap::new();
    for (lineno, line) in data_lines(text) {
        let v = parse_fields(line, lineno, 7)?;
        let frame = parse_frame(v[0], lineno)?;
        let t = AffineTransform2D::new([[v[1], v[2]], [v[3], v[4]]], [v[5], v[6]]);
        if !t.is_finite() {
            return Err(CmcError::Parse { line: lineno, message: "non-finite entry".into() });
        }
        out.insert(frame, t);
    }
    Ok(out)
}

/// Inverse of [`parse_transforms`]; numbers use Rust's shortest round-trip form.
pub fn format_transforms<'a>(rows: impl IntoIterator<Item = (u32, &'a AffineTransform2D)>) -> String {
    let mut s = String::new();
    for (frame, t) in rows {
        let _ = writeln!(s, "{frame},{},{},{},{},{},{}", t.m[0][0], t.m[0][1], t.m[1][0], t.m[1][1], t.t[0], t.t[1]);
    }
    s
}

/// Parses `frame,src_x,src_y,dst_x,dst_y` rows, grouped by frame.
pub fn parse_correspondences(text: &str) -> Result<BTreeMap<u32, PointCorrespondenceSet>, CmcError> {
    let mut out: BTreeMap<u32, PointCorrespondenceSet> = BTreeMap::new();
    for (lineno, line) in data_lines(text) {
        let v = parse_fields(line, lineno, 5)?;
        let frame = parse_frame(v[0], lineno)?;
        if v[1..5].iter().any(|x| !x.is_finite()) {
            return Err(CmcError::Parse { line: lineno, message: "non-finite point".into() });
        }
        out.entry(frame)
            .or_insert_with(|| PointCorrespondenceSet::new(frame, Vec::new()))
            .pairs
            .push(Correspondence { source: Point2D::new(v[1], v[2]), target: Point2D::new(v[3], v[4]) });
    }
    Ok(out)
}

pub fn format_correspondences<'a>(sets: impl IntoIterator<Item = &'a PointCorrespondenceSet>) -> String {
    let mut s = String::new();
    for set in sets {
        for c in &set.pairs {
            let _ = writeln!(s, "{},{},{},{},{}", set.frame_index, c.source.x, c.source.y, c.target.x, c.target.y);
        }
    }
    s
}
