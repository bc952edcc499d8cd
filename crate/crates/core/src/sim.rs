//! Synthetic maritime scenes: ground truth, noisy detections with
//! identity-clustered embeddings, background point correspondences and the
//! true platform transforms.
//!
//! Targets move with constant velocity in a world frame and bounce off its
//! edges. The camera sways: its pose is a damped second-order process whose
//! frame-to-frame increments are first-order autoregressive, so the image
//! motion is smooth but never settles. Image-frame boxes are the world boxes
//! pushed through the cumulative pose.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use thiserror::Error;

use crate::appearance::{amplify_distance, cosine_distance, Embedding};
use crate::cmc::{Correspondence, PointCorrespondenceSet};
use crate::geometry::{AffineTransform2D, Box2D, Point2D};
use crate::metrics::GtEntry;
use crate::tracker::DetectionObservation;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid scenario config: {0}")]
    ConfigInvalid(String),
    #[error("unknown preset '{0}'")]
    UnknownPreset(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PlatformMotion {
    None,
    /// Sway scale in pixels.
    TranslationJitter(f64),
    /// Sway scale in radians, about the image centre.
    RotationJitter(f64),
    Composite {
        translation: f64,
        rotation: f64,
    },
}

impl PlatformMotion {
    fn sigmas(&self) -> (f64, f64) {
        match *self {
            PlatformMotion::None => (0.0, 0.0),
            PlatformMotion::TranslationJitter(t) => (t, 0.0),
            PlatformMotion::RotationJitter(r) => (0.0, r),
            PlatformMotion::Composite { translation, rotation } => (translation, rotation),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OcclusionEvent {
    /// Zero-based target index.
    pub target: usize,
    pub start: u32,
    pub duration: u32,
}

impl OcclusionEvent {
    fn covers(&self, target: usize, frame: u32) -> bool {
        self.target == target && frame >= self.start && frame < self.start + self.duration
    }
}

/// How identity anchor embeddings are laid out on the sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnchorLayout {
    /// Anchors at a fixed angle (radians) from a shared centre, each in a
    /// random direction.
    Clustered(f64),
    /// Mutually orthogonal anchors; needs `embedding_dim >= n_targets`.
    Orthogonal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub n_targets: usize,
    pub frames: u32,
    /// Image width and height in pixels; the world has the same extent.
    pub image_size: (f64, f64),
    /// Box width range in pixels; heights are 0.5–1.0 of the width.
    pub target_size_range: (f64, f64),
    /// Pixels per frame.
    pub speed_range: (f64, f64),
    pub platform_motion: PlatformMotion,
    /// Lag-one correlation of the sway increments.
    pub jitter_correlation: f64,
    /// Spring constant pulling the camera back to its rest pose.
    pub jitter_restoring: f64,
    pub detection_noise_sigma: f64,
    pub miss_rate: f64,
    /// Expected false positives per frame.
    pub false_positive_rate: f64,
    /// Share of true detections whose confidence falls below the
    /// high-confidence split.
    pub low_confidence_rate: f64,
    pub occlusion_events: Vec<OcclusionEvent>,
    pub embedding_dim: usize,
    /// Angle of the per-observation perturbation, radians.
    pub embedding_noise_angle: f64,
    pub anchor_layout: AnchorLayout,
    pub background_points: usize,
    pub correspondence_outlier_fraction: f64,
    pub correspondence_noise_sigma: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_targets: 5,
            frames: 300,
            image_size: (1920.0, 1080.0),
            target_size_range: (40.0, 80.0),
            speed_range: (0.5, 2.5),
            platform_motion: PlatformMotion::None,
            jitter_correlation: 0.8,
            jitter_restoring: 0.02,
            detection_noise_sigma: 0.5,
            miss_rate: 0.02,
            false_positive_rate: 0.2,
            low_confidence_rate: 0.1,
            occlusion_events: Vec::new(),
            embedding_dim: 128,
            embedding_noise_angle: 0.01,
            anchor_layout: AnchorLayout::Clustered(0.1),
            background_points: 60,
            correspondence_outlier_fraction: 0.3,
            correspondence_noise_sigma: 0.2,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::ConfigInvalid(m));
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.frames == 0 {
            return bad("frames must be at least 1".into());
        }
        if !(self.image_size.0 > 0.0 && self.image_size.1 > 0.0) {
            return bad("image_size must be positive".into());
        }
        let (lo, hi) = self.target_size_range;
        if !(lo > 0.0 && lo <= hi && hi < self.image_size.0.min(self.image_size.1)) {
            return bad("target_size_range must be positive, ordered and fit the image".into());
        }
        if !(self.speed_range.0 >= 0.0 && self.speed_range.0 <= self.speed_range.1) {
            return bad("speed_range must be nonnegative and ordered".into());
        }
        let (ts, rs) = self.platform_motion.sigmas();
        if !(ts >= 0.0 && rs >= 0.0) {
            return bad("platform jitter must be nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.jitter_correlation) || !(0.0..1.0).contains(&self.jitter_restoring) {
            return bad("jitter_correlation and jitter_restoring must lie in [0, 1)".into());
        }
        for (name, v) in [
            ("miss_rate", self.miss_rate),
            ("low_confidence_rate", self.low_confidence_rate),
            ("correspondence_outlier_fraction", self.correspondence_outlier_fraction),
        ] {
            if !unit(v) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.false_positive_rate >= 0.0
            && self.detection_noise_sigma >= 0.0
            && self.correspondence_noise_sigma >= 0.0)
        {
            return bad("rates and noise scales must be nonnegative".into());
        }
        if self.embedding_dim < 2 {
            return bad("embedding_dim must be at least 2".into());
        }
        if self.anchor_layout == AnchorLayout::Orthogonal && self.embedding_dim < self.n_targets {
            return bad("orthogonal anchors need embedding_dim >= n_targets".into());
        }
        if let Some(e) = self.occlusion_events.iter().find(|e| e.target >= self.n_targets) {
            return bad(format!("occlusion event refers to target {} of {}", e.target, self.n_targets));
        }
        Ok(())
    }
}

pub const PRESETS: [&str; 4] = ["calm", "jitter", "occlusion", "crowded"];

pub fn preset(name: &str) -> Result<ScenarioConfig, SimError> {
    let calm = ScenarioConfig::default();
    match name {
        "calm" => Ok(calm),
        "jitter" => Ok(ScenarioConfig {
            platform_motion: PlatformMotion::Composite { translation: 8.0, rotation: 0.01 },
            ..calm
        }),
        "occlusion" => Ok(ScenarioConfig {
            occlusion_events: vec![
                OcclusionEvent { target: 0, start: 60, duration: 10 },
                OcclusionEvent { target: 1, start: 120, duration: 18 },
                OcclusionEvent { target: 2, start: 200, duration: 25 },
            ],
            ..calm
        }),
        "crowded" => Ok(ScenarioConfig { n_targets: 20, miss_rate: 0.08, ..calm }),
        other => Err(SimError::UnknownPreset(other.to_string())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioBundle {
    pub config: ScenarioConfig,
    /// Image-frame ground truth; occluded targets carry `visible = false`.
    pub gt: Vec<GtEntry>,
    /// The same trajectories in world coordinates.
    pub world_gt: Vec<GtEntry>,
    /// Every detection carries an embedding.
    pub detections: Vec<DetectionObservation>,
    /// GT id behind each detection; `None` for false positives.
    pub detection_ids: Vec<Option<u32>>,
    /// Frame-to-frame transforms, index `k - 1` for frame `k`; frame 1 is
    /// the identity.
    pub transforms: Vec<AffineTransform2D>,
    /// World to image pose of each frame.
    pub poses: Vec<AffineTransform2D>,
    /// One set per frame from 2 on.
    pub correspondences: Vec<PointCorrespondenceSet>,
}

struct Target {
    pos: (f64, f64),
    vel: (f64, f64),
    size: (f64, f64),
}

fn random_unit(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Rotates unit `a` by `angle` towards a random direction orthogonal to it.
fn rotate_random(a: &[f64], angle: f64, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let mut u: Vec<f64> = (0..a.len()).map(|_| StandardNormal.sample(rng)).collect();
        let d: f64 = u.iter().zip(a).map(|(x, y)| x * y).sum();
        u.iter_mut().zip(a).for_each(|(x, y)| *x -= d * y);
        let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            let (c, s) = (angle.cos(), angle.sin());
            return a.iter().zip(&u).map(|(x, y)| c * x + s * y / n).collect();
        }
    }
}

fn anchors(cfg: &ScenarioConfig, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    match cfg.anchor_layout {
        AnchorLayout::Clustered(spread) => {
            let centre = random_unit(cfg.embedding_dim, rng);
            (0..cfg.n_targets).map(|_| rotate_random(&centre, spread, rng)).collect()
        }
        AnchorLayout::Orthogonal => {
            let mut out: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_targets);
            while out.len() < cfg.n_targets {
                let mut v = random_unit(cfg.embedding_dim, rng);
                for b in &out {
                    let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
                }
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-6 {
                    out.push(v.into_iter().map(|x| x / n).collect());
                }
            }
            out
        }
    }
}

/// Camera poses for frames `1..=frames`; frame 1 is the identity.
fn platform_poses(cfg: &ScenarioConfig, rng: &mut impl Rng) -> Vec<AffineTransform2D> {
    let (ts, rs) = cfg.platform_motion.sigmas();
    let rho = cfg.jitter_correlation;
    let kappa = cfg.jitter_restoring;
    let innovation = (1.0 - rho * rho).sqrt();
    let centre = Point2D::new(cfg.image_size.0 / 2.0, cfg.image_size.1 / 2.0);
    // [x, y, angle]
    let mut pos = [0.0f64; 3];
    let mut vel = [0.0f64; 3];
    let scale = [ts, ts, rs];
    let mut poses = Vec::with_capacity(cfg.frames as usize);
    poses.push(AffineTransform2D::identity());
    for _ in 1..cfg.frames {
        for i in 0..3 {
            let e: f64 = StandardNormal.sample(rng);
            vel[i] = rho * vel[i] - kappa * pos[i] + scale[i] * innovation * e;
            pos[i] += vel[i];
        }
        let pose =
            AffineTransform2D::translation(pos[0], pos[1]).compose(&AffineTransform2D::rotation_about(pos[2], centre));
        poses.push(pose);
    }
    poses
}

fn frame_transforms(poses: &[AffineTransform2D]) -> Vec<AffineTransform2D> {
    let mut out = Vec::with_capacity(poses.len());
    out.push(AffineTransform2D::identity());
    for w in poses.windows(2) {
        let prev_inv = w[0].invert().expect("rigid poses are invertible");
        out.push(w[1].compose(&prev_inv));
    }
    out
}

pub fn generate(cfg: &ScenarioConfig) -> Result<ScenarioBundle, SimError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (width, height) = cfg.image_size;

    let poses = platform_poses(cfg, &mut rng);
    let transforms = frame_transforms(&poses);

    let mut targets: Vec<Target> = (0..cfg.n_targets)
        .map(|_| {
            let w = rng.random_range(cfg.target_size_range.0..=cfg.target_size_range.1);
            let h = w * rng.random_range(0.5..=1.0);
            let speed = rng.random_range(cfg.speed_range.0..=cfg.speed_range.1);
            let heading = rng.random_range(0.0..std::f64::consts::TAU);
            Target {
                pos: (rng.random_range(0.0..=width - w), rng.random_range(0.0..=height - h)),
                vel: (speed * heading.cos(), speed * heading.sin()),
                size: (w, h),
            }
        })
        .collect();
    let anchor = anchors(cfg, &mut rng);

    let noise = Normal::new(0.0, cfg.detection_noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let fp_count =
        (cfg.false_positive_rate > 0.0).then(|| Poisson::new(cfg.false_positive_rate).expect("positive rate"));

    let mut gt = Vec::new();
    let mut world_gt = Vec::new();
    let mut detections = Vec::new();
    let mut detection_ids = Vec::new();

    for frame in 1..=cfg.frames {
        let pose = &poses[(frame - 1) as usize];
        let mut frame_dets: Vec<(DetectionObservation, Option<u32>)> = Vec::new();
        for (i, t) in targets.iter_mut().enumerate() {
            if frame > 1 {
                t.pos.0 += t.vel.0;
                t.pos.1 += t.vel.1;
                let (w, h) = t.size;
                if t.pos.0 < 0.0 || t.pos.0 > width - w {
                    t.vel.0 = -t.vel.0;
                    t.pos.0 = t.pos.0.clamp(0.0, width - w);
                }
                if t.pos.1 < 0.0 || t.pos.1 > height - h {
                    t.vel.1 = -t.vel.1;
                    t.pos.1 = t.pos.1.clamp(0.0, height - h);
                }
            }
            let id = i as u32 + 1;
            let world = Box2D::new(t.pos.0, t.pos.1, t.size.0, t.size.1);
            let image = pose.apply_box(&world);
            let visible = !cfg.occlusion_events.iter().any(|e| e.covers(i, frame));
            world_gt.push(GtEntry { frame, id, bbox: world, visible });
            gt.push(GtEntry { frame, id, bbox: image, visible });

            // draws happen whether or not the detection survives, so the
            // random stream does not depend on occlusion or misses
            let corners: [f64; 4] =
                std::array::from_fn(|_| if cfg.detection_noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 });
            let missed = rng.random_bool(cfg.miss_rate);
            let low = rng.random_bool(cfg.low_confidence_rate);
            let confidence = if low { rng.random_range(0.15..0.58) } else { rng.random_range(0.65..0.98) };
            let embedding = rotate_random(&anchor[i], cfg.embedding_noise_angle, &mut rng);
            if !visible || missed {
                continue;
            }
            let x1 = image.x + corners[0];
            let y1 = image.y + corners[1];
            let x2 = image.right() + corners[2];
            let y2 = image.bottom() + corners[3];
            let bbox = Box2D::new(x1, y1, (x2 - x1).max(1.0), (y2 - y1).max(1.0));
            frame_dets.push((
                DetectionObservation {
                    frame,
                    bbox,
                    confidence,
                    class_id: 1,
                    embedding: Some(Embedding::normalized(embedding).expect("unit vector")),
                },
                Some(id),
            ));
        }
        let n_fp = fp_count.as_ref().map_or(0, |p| p.sample(&mut rng) as usize);
        for _ in 0..n_fp {
            let w = rng.random_range(cfg.target_size_range.0..=cfg.target_size_range.1);
            let h = w * rng.random_range(0.5..=1.0);
            let bbox = Box2D::new(rng.random_range(0.0..width - w), rng.random_range(0.0..height - h), w, h);
            let embedding = random_unit(cfg.embedding_dim, &mut rng);
            frame_dets.push((
                DetectionObservation {
                    frame,
                    bbox,
                    confidence: rng.random_range(0.1..0.75),
                    class_id: 1,
                    embedding: Some(Embedding::normalized(embedding).expect("unit vector")),
                },
                None,
            ));
        }
        frame_dets.shuffle(&mut rng);
        for (d, id) in frame_dets {
            detections.push(d);
            detection_ids.push(id);
        }
    }

    let correspondences = background_correspondences(cfg, &poses, &mut rng);

    Ok(ScenarioBundle {
        config: cfg.clone(),
        gt,
        world_gt,
        detections,
        detection_ids,
        transforms,
        poses,
        correspondences,
    })
}

/// Static world points seen in consecutive frames. Outliers stand in for
/// points on moving targets and land at random image positions.
fn background_correspondences(
    cfg: &ScenarioConfig,
    poses: &[AffineTransform2D],
    rng: &mut impl Rng,
) -> Vec<PointCorrespondenceSet> {
    let (width, height) = cfg.image_size;
    let points: Vec<Point2D> = (0..cfg.background_points)
        .map(|_| Point2D::new(rng.random_range(0.0..width), rng.random_range(0.0..height)))
        .collect();
    let noise = Normal::new(0.0, cfg.correspondence_noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let n_out = (cfg.correspondence_outlier_fraction * cfg.background_points as f64).round() as usize;
    let mut out = Vec::with_capacity(poses.len().saturating_sub(1));
    for (k, w) in poses.windows(2).enumerate() {
        let frame = k as u32 + 2;
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.shuffle(rng);
        let outliers: std::collections::HashSet<usize> = order[..n_out].iter().copied().collect();
        let pairs = points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let source = w[0].apply_point(*p);
                let target = if outliers.contains(&i) {
                    Point2D::new(rng.random_range(0.0..width), rng.random_range(0.0..height))
                } else {
                    let t = w[1].apply_point(*p);
                    if cfg.correspondence_noise_sigma > 0.0 {
                        Point2D::new(t.x + noise.sample(rng), t.y + noise.sample(rng))
                    } else {
                        t
                    }
                };
                Correspondence { source, target }
            })
            .collect();
        out.push(PointCorrespondenceSet::new(frame, pairs));
    }
    out
}

/// Amplified cosine distances between detections of the same identity
/// (positives) and of different identities (negatives). False positives are
/// left out. Detections are thinned to at most `max_samples` by taking every
/// k-th one.
pub fn embedding_distance_histogram(bundle: &ScenarioBundle, beta: f64, max_samples: usize) -> (Vec<f64>, Vec<f64>) {
    let labelled: Vec<(u32, &Embedding)> = bundle
        .detections
        .iter()
        .zip(&bundle.detection_ids)
        .filter_map(|(d, id)| Some((((*id)?), d.embedding.as_ref()?)))
        .collect();
    let stride = labelled.len().div_ceil(max_samples.max(1)).max(1);
    let sample: Vec<(u32, &Embedding)> = labelled.into_iter().step_by(stride).collect();
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..sample.len() {
        for j in i + 1..sample.len() {
            let d = cosine_distance(sample[i].1, sample[j].1).expect("matching dimensions");
            let s = amplify_distance(d, beta);
            if sample[i].0 == sample[j].0 {
                pos.push(s);
            } else {
                neg.push(s);
            }
        }
    }
    (pos, neg)
}

/// Mean distance between where the estimate and the truth send each source
/// point.
pub fn mean_point_residual(estimate: &AffineTransform2D, truth: &AffineTransform2D, points: &[Point2D]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    points
        .iter()
        .map(|p| {
            let a = estimate.apply_point(*p);
            let b = truth.apply_point(*p);
            (a.x - b.x).hypot(a.y - b.y)
        })
        .sum::<f64>()
        / points.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmc::{estimate_affine_ransac, CmcConfig};

    fn small(seed: u64) -> ScenarioConfig {
        ScenarioConfig { frames: 40, seed, ..ScenarioConfig::default() }
    }

    #[test]
    fn empty_scene() {
        let cfg = ScenarioConfig { n_targets: 0, false_positive_rate: 0.0, ..small(1) };
        let b = generate(&cfg).unwrap();
        assert!(b.gt.is_empty() && b.detections.is_empty());
    }

    #[test]
    fn no_platform_motion_gives_identity() {
        let b = generate(&small(2)).unwrap();
        assert_eq!(b.transforms.len(), 40);
        assert!(b.transforms.iter().all(|t| *t == AffineTransform2D::identity()));
    }

    #[test]
    fn deterministic() {
        let cfg = ScenarioConfig {
            platform_motion: PlatformMotion::Composite { translation: 8.0, rotation: 0.01 },
            ..small(3)
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = ScenarioConfig { seed: 4, ..cfg.clone() };
        assert_ne!(generate(&cfg).unwrap().detections, generate(&other).unwrap().detections);
    }

    #[test]
    fn presets() {
        assert_eq!(preset("calm").unwrap().n_targets, 5);
        assert_ne!(preset("jitter").unwrap().platform_motion, PlatformMotion::None);
        assert_eq!(preset("occlusion").unwrap().occlusion_events.len(), 3);
        let crowded = preset("crowded").unwrap();
        assert_eq!((crowded.n_targets, crowded.miss_rate), (20, 0.08));
        assert_eq!(preset("stormy"), Err(SimError::UnknownPreset("stormy".into())));
        for name in PRESETS {
            preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            ScenarioConfig { frames: 0, ..small(0) },
            ScenarioConfig { miss_rate: 1.5, ..small(0) },
            ScenarioConfig { occlusion_events: vec![OcclusionEvent { target: 9, start: 1, duration: 2 }], ..small(0) },
        ] {
            assert!(matches!(generate(&cfg), Err(SimError::ConfigInvalid(_))));
        }
    }

    #[test]
    fn gt_maps_back_to_world() {
        let cfg = ScenarioConfig {
            platform_motion: PlatformMotion::Composite { translation: 8.0, rotation: 0.01 },
            ..small(5)
        };
        let b = generate(&cfg).unwrap();
        for (img, world) in b.gt.iter().zip(&b.world_gt) {
            let inv = b.poses[(img.frame - 1) as usize].invert().unwrap();
            let back = inv.apply_box(&img.bbox);
            for (u, v) in
                [(back.x, world.bbox.x), (back.y, world.bbox.y), (back.w, world.bbox.w), (back.h, world.bbox.h)]
            {
                assert!((u - v).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn transforms_compose_to_poses() {
        let cfg = ScenarioConfig {
            platform_motion: PlatformMotion::Composite { translation: 8.0, rotation: 0.01 },
            ..small(6)
        };
        let b = generate(&cfg).unwrap();
        let mut acc = AffineTransform2D::identity();
        for (t, p) in b.transforms.iter().zip(&b.poses) {
            acc = t.compose(&acc);
            assert!(acc.max_abs_diff(p) < 1e-9);
        }
    }

    #[test]
    fn correspondences_recover_transforms() {
        let clean = ScenarioConfig {
            platform_motion: PlatformMotion::Composite { translation: 8.0, rotation: 0.01 },
            correspondence_outlier_fraction: 0.0,
            correspondence_noise_sigma: 0.0,
            ..small(7)
        };
        let b = generate(&clean).unwrap();
        for set in &b.correspondences {
            let fit = estimate_affine_ransac(&set.pairs, &CmcConfig::default()).unwrap();
            assert!(fit.transform.max_abs_diff(&b.transforms[(set.frame_index - 1) as usize]) < 1e-6);
        }
        let noisy = ScenarioConfig { correspondence_outlier_fraction: 0.3, correspondence_noise_sigma: 0.2, ..clean };
        let b = generate(&noisy).unwrap();
        for set in &b.correspondences {
            let fit = estimate_affine_ransac(&set.pairs, &CmcConfig::default()).unwrap();
            let sources: Vec<Point2D> = set.pairs.iter().map(|c| c.source).collect();
            let truth = &b.transforms[(set.frame_index - 1) as usize];
            assert!(mean_point_residual(&fit.transform, truth, &sources) < 0.5);
        }
    }

    #[test]
    fn occluded_targets_have_no_detections() {
        let cfg = ScenarioConfig {
            occlusion_events: vec![OcclusionEvent { target: 0, start: 5, duration: 10 }],
            false_positive_rate: 0.0,
            miss_rate: 0.0,
            ..small(8)
        };
        let b = generate(&cfg).unwrap();
        for f in 5..15 {
            assert!(!b.detections.iter().zip(&b.detection_ids).any(|(d, id)| d.frame == f && *id == Some(1)));
            assert!(b.gt.iter().any(|g| g.frame == f && g.id == 1 && !g.visible));
        }
        assert_eq!(b.detections.len(), 5 * 40 - 10);
    }

    #[test]
    fn zero_noise_positives_are_zero() {
        let cfg = ScenarioConfig { embedding_noise_angle: 0.0, ..small(9) };
        let (pos, _) = embedding_distance_histogram(&generate(&cfg).unwrap(), 800.0, 300);
        assert!(!pos.is_empty());
        assert!(pos.iter().all(|&d| d.abs() < 1e-12));
    }

    #[test]
    fn orthogonal_anchors_saturate_negatives() {
        let cfg = ScenarioConfig { anchor_layout: AnchorLayout::Orthogonal, ..small(10) };
        let (_, neg) = embedding_distance_histogram(&generate(&cfg).unwrap(), 800.0, 300);
        assert!(!neg.is_empty());
        assert!(neg.iter().all(|&d| d == 1.0));
    }

    #[test]
    fn calibrated_noise_hits_the_target_distance() {
        let b = generate(&small(11)).unwrap();
        let (pos, _) = embedding_distance_histogram(&b, 1.0, 400);
        let mean = pos.iter().sum::<f64>() / pos.len() as f64;
        assert!(mean > 5e-5 && mean < 2e-4, "mean raw positive distance {mean}");
    }
}
