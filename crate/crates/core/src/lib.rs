//! Multi-object tracking for moving platforms.
//!
//! A detection-driven tracker that removes platform motion from its Kalman
//! predictions, fuses amplified appearance distances with box overlap, and
//! associates in two confidence stages. Also ships CLEAR/identity/HOTA
//! evaluation, a synthetic scene generator and a few numeric self-checks.

pub mod appearance;
pub mod association;
pub mod cmc;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod motion;
pub mod papermath;
pub mod sim;
pub mod tracker;

pub use appearance::{CoffConfig, Embedding, TrackAppearance};
pub use association::{solve_assignment, Assignment, AssociationConfig, CostMatrix};
pub use cmc::{estimate_affine_ransac, CmcConfig, Correspondence, PointCorrespondenceSet, TransformSource};
pub use geometry::{iou, AffineTransform2D, Box2D, Point2D};
pub use io::RunConfig;
pub use metrics::{evaluate, GtEntry, MetricsReport, ResultEntry};
pub use motion::{KalmanConfig, KalmanState};
pub use sim::{generate, preset, ScenarioBundle, ScenarioConfig};
pub use tracker::{
    interpolate_tracklets, run_sequence, DetectionObservation, FrameResult, TrackOutput, Tracker, TrackerConfig,
};
