//! Appearance side of the fused association cost.
//!
//! Per track, embeddings are smoothed with a bias-corrected exponential
//! moving average. Cosine distances are amplified by `β` and clipped at 1,
//! overridden to 1 when the boxes barely overlap, and finally multiplied
//! by the IoU distance.

use thiserror::Error;

use crate::association::CostMatrix;
use crate::geometry::{iou, Box2D};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AppearanceError {
    #[error("embedding has zero norm")]
    ZeroVector,
    #[error("embedding contains a non-finite value")]
    NonFinite,
    #[error("track appearance has no observations")]
    NoObservations,
    #[error("embedding dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// An appearance descriptor. Constructed through [`Embedding::normalized`]
/// it has unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Keeps the values as given.
    pub fn raw(values: Vec<f64>) -> Result<Self, AppearanceError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AppearanceError::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn normalized(values: Vec<f64>) -> Result<Self, AppearanceError> {
        let mut e = Self::raw(values)?;
        let n = e.norm();
        if n == 0.0 {
            return Err(AppearanceError::ZeroVector);
        }
        e.0.iter_mut().for_each(|v| *v /= n);
        Ok(e)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoffConfig {
    /// Amplification applied to raw cosine distances.
    pub beta: f64,
    /// Overlap below which the appearance distance is forced to 1.
    pub theta_iou: f64,
    /// UEMA decay.
    pub alpha: f64,
}

impl Default for CoffConfig {
    fn default() -> Self {
        Self { beta: 800.0, theta_iou: 0.3, alpha: 0.9 }
    }
}

/// `1 − a·b / (‖a‖‖b‖)`, in `[0, 2]`.
pub fn cosine_distance(a: &Embedding, b: &Embedding) -> Result<f64, AppearanceError> {
    if a.dim() != b.dim() {
        return Err(AppearanceError::DimensionMismatch { expected: a.dim(), found: b.dim() });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(AppearanceError::ZeroVector);
    }
    Ok((1.0 - a.dot(b) / (na * nb)).clamp(0.0, 2.0))
}

/// Smoothed appearance of one track.
///
/// `ema` starts at zero; `frame_count` counts the updates folded in so far.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackAppearance {
    ema: Vec<f64>,
    frame_count: u32,
    alpha: f64,
}

impl TrackAppearance {
    pub fn new(dim: usize, alpha: f64) -> Self {
        Self { ema: vec![0.0; dim], frame_count: 0, alpha }
    }

    pub fn frame_count(&self) -> u32 {
        self.frame_count
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn ema(&self) -> &[f64] {
        &self.ema
    }

    /// `e ← α·e + (1 − α)·f`.
    pub fn uema_update(&mut self, f: &Embedding) -> Result<(), AppearanceError> {
        if f.dim() != self.ema.len() {
            return Err(AppearanceError::DimensionMismatch { expected: self.ema.len(), found: f.dim() });
        }
        let a = self.alpha;
        for (e, v) in self.ema.iter_mut().zip(f.as_slice()) {
            *e = a * *e + (1.0 - a) * v;
        }
        self.frame_count += 1;
        Ok(())
    }

    /// `e / (1 − αᵏ)`.
    pub fn uema_unbiased(&self) -> Result<Embedding, AppearanceError> {
        if self.frame_count == 0 {
            return Err(AppearanceError::NoObservations);
        }
        let correction = 1.0 - self.alpha.powi(self.frame_count as i32);
        Embedding::raw(self.ema.iter().map(|v| v / correction).collect())
    }
}

/// `min(d·β, 1)`.
pub fn amplify_distance(d: f64, beta: f64) -> f64 {
    (d * beta).min(1.0)
}

/// Appearance distance forced to 1 when `iou < theta_iou` (strict).
pub fn spatial_gate(d_cos: f64, iou: f64, theta_iou: f64) -> f64 {
    if iou < theta_iou {
        1.0
    } else {
        d_cos
    }
}

/// Gated appearance distance times IoU distance `(1 − iou)`.
pub fn fused_cost(d_cos_gated: f64, iou: f64) -> f64 {
    d_cos_gated * (1.0 - iou)
}

pub fn pair_cost(raw_cosine: f64, iou: f64, cfg: &CoffConfig) -> f64 {
    fused_cost(spatial_gate(amplify_distance(raw_cosine, cfg.beta), iou, cfg.theta_iou), iou)
}

/// What the cost builder needs to know about a track.
#[derive(Debug, Clone, Copy)]
pub struct TrackView<'a> {
    pub predicted: Box2D,
    pub appearance: &'a TrackAppearance,
}

/// Raw cosine distances between each track's unbiased embedding and each
/// detection embedding.
pub fn cosine_matrix(tracks: &[TrackView<'_>], embeddings: &[&Embedding]) -> Result<CostMatrix, AppearanceError> {
    let mut out = CostMatrix::zeros(tracks.len(), embeddings.len());
    for (i, t) in tracks.iter().enumerate() {
        let e = t.appearance.uema_unbiased()?;
        for (j, f) in embeddings.iter().enumerate() {
            out.set(i, j, cosine_distance(&e, f)?);
        }
    }
    Ok(out)
}

pub fn iou_matrix(tracks: &[Box2D], detections: &[Box2D]) -> CostMatrix {
    let mut out = CostMatrix::zeros(tracks.len(), detections.len());
    for (i, t) in tracks.iter().enumerate() {
        for (j, d) in detections.iter().enumerate() {
            out.set(i, j, iou(t, d));
        }
    }
    out
}

/// Fused cost for every track/detection pair.
pub fn build_cost_matrix(
    tracks: &[TrackView<'_>],
    detections: &[Box2D],
    embeddings: &[&Embedding],
    cfg: &CoffConfig,
) -> Result<CostMatrix, AppearanceError> {
    if embeddings.len() != detections.len() {
        return Err(AppearanceError::DimensionMismatch { expected: detections.len(), found: embeddings.len() });
    }
    let boxes: Vec<Box2D> = tracks.iter().map(|t| t.predicted).collect();
    let ious = iou_matrix(&boxes, detections);
    let cos = cosine_matrix(tracks, embeddings)?;
    Ok(fuse_matrices(&cos, &ious, cfg))
}

/// Elementwise [`pair_cost`] over aligned cosine and IoU matrices.
pub fn fuse_matrices(cosine: &CostMatrix, ious: &CostMatrix, cfg: &CoffConfig) -> CostMatrix {
    let mut out = CostMatrix::zeros(ious.rows(), ious.cols());
    for i in 0..ious.rows() {
        for j in 0..ious.cols() {
            out.set(i, j, pair_cost(cosine.get(i, j), ious.get(i, j), cfg));
        }
    }
    out
}
