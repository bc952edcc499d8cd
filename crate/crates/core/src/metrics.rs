//! Tracking evaluation: CLEAR MOT (MOTA, FP, FN, IDSW, Frag, LocA),
//! identity F1 and HOTA.
//!
//! Ground-truth rows flagged invisible are ignored. Predictions that overlap
//! an ignored box (IoU ≥ 0.5, one-to-one) are removed before scoring, so
//! outputs during occlusions are neither rewarded nor punished.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::association::{solve_assignment, CostMatrix};
use crate::geometry::{iou, Box2D};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("ground truth is empty")]
    EmptyGroundTruth,
    #[error("no true positives")]
    NoTruePositives,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtEntry {
    pub frame: u32,
    pub id: u32,
    pub bbox: Box2D,
    pub visible: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResultEntry {
    pub frame: u32,
    pub id: u32,
    pub bbox: Box2D,
    pub confidence: f64,
}

/// Matching threshold used by CLEAR MOT, identity metrics and LocA.
pub const CLEAR_THRESHOLD: f64 = 0.5;

/// `0.05, 0.10, …, 0.95`.
pub fn default_alphas() -> Vec<f64> {
    (1..=19).map(|i| f64::from(i) * 0.05).collect()
}

const EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameMatch {
    /// `(gt index, pred index, iou)`.
    pub pairs: Vec<(usize, usize, f64)>,
    pub fp: usize,
    pub fn_: usize,
}

/// Maximum-cardinality matching among pairs with IoU ≥ `alpha`, breaking
/// ties by maximum total IoU.
pub fn match_frame(gt: &[Box2D], pred: &[Box2D], alpha: f64) -> FrameMatch {
    match_frame_scored(gt, pred, alpha, |_, _, s| s)
}

/// As [`match_frame`] but maximising `score(g, p, iou)` (in `[0, 1]`) among
/// maximum-cardinality matchings.
fn match_frame_scored(
    gt: &[Box2D],
    pred: &[Box2D],
    alpha: f64,
    score: impl Fn(usize, usize, f64) -> f64,
) -> FrameMatch {
    let mut costs = CostMatrix::zeros(gt.len(), pred.len());
    let mut sims = vec![0.0; gt.len() * pred.len()];
    for (g, gb) in gt.iter().enumerate() {
        for (p, pb) in pred.iter().enumerate() {
            let s = iou(gb, pb);
            sims[g * pred.len() + p] = s;
            if s >= alpha - EPS {
                costs.set(g, p, 1.0 - score(g, p, s).clamp(0.0, 1.0));
            } else {
                costs.forbid(g, p);
            }
        }
    }
    let a = solve_assignment(&costs);
    let pairs: Vec<(usize, usize, f64)> = a.matches.iter().map(|&(g, p)| (g, p, sims[g * pred.len() + p])).collect();
    FrameMatch { fp: pred.len() - pairs.len(), fn_: gt.len() - pairs.len(), pairs }
}

/// One frame of evaluation input after ignore handling, ids made dense.
#[derive(Debug, Clone, Default)]
struct Frame {
    gt_ids: Vec<usize>,
    gt_boxes: Vec<Box2D>,
    pr_ids: Vec<usize>,
    pr_boxes: Vec<Box2D>,
}

#[derive(Debug, Clone, Default)]
struct Prepared {
    frames: Vec<Frame>,
    num_gt_ids: usize,
    num_pr_ids: usize,
}

fn prepare(gt: &[GtEntry], results: &[ResultEntry]) -> Prepared {
    let mut gt_id_map: BTreeMap<u32, usize> = BTreeMap::new();
    let mut pr_id_map: BTreeMap<u32, usize> = BTreeMap::new();
    let mut by_frame: BTreeMap<u32, (Vec<&GtEntry>, Vec<&ResultEntry>)> = BTreeMap::new();
    for g in gt {
        by_frame.entry(g.frame).or_default().0.push(g);
    }
    for r in results {
        by_frame.entry(r.frame).or_default().1.push(r);
    }
    let mut frames = Vec::with_capacity(by_frame.len());
    for (_, (gts, prs)) in by_frame {
        let ignored: Vec<Box2D> = gts.iter().filter(|g| !g.visible).map(|g| g.bbox).collect();
        let mut drop = vec![false; prs.len()];
        if !ignored.is_empty() && !prs.is_empty() {
            let pboxes: Vec<Box2D> = prs.iter().map(|r| r.bbox).collect();
            // match against all gt so a prediction that belongs to a visible
            // target is not swallowed by an ignored neighbour
            let all: Vec<Box2D> = gts.iter().map(|g| g.bbox).collect();
            let m = match_frame(&all, &pboxes, CLEAR_THRESHOLD);
            for (g, p, _) in m.pairs {
                if !gts[g].visible {
                    drop[p] = true;
                }
            }
        }
        let mut f = Frame::default();
        for g in gts.iter().filter(|g| g.visible) {
            let n = gt_id_map.len();
            f.gt_ids.push(*gt_id_map.entry(g.id).or_insert(n));
            f.gt_boxes.push(g.bbox);
        }
        for (r, _) in prs.iter().zip(&drop).filter(|(_, &d)| !d) {
            let n = pr_id_map.len();
            f.pr_ids.push(*pr_id_map.entry(r.id).or_insert(n));
            f.pr_boxes.push(r.bbox);
        }
        frames.push(f);
    }
    Prepared { frames, num_gt_ids: gt_id_map.len(), num_pr_ids: pr_id_map.len() }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClearStats {
    pub mota: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub idsw: usize,
    pub frag: usize,
    pub gt_count: usize,
    pub iou_sum: f64,
}

fn clear_on(p: &Prepared) -> ClearStats {
    let mut s = ClearStats::default();
    let mut last_pred: Vec<Option<usize>> = vec![None; p.num_gt_ids];
    let mut prev_frame_pred: Vec<Option<usize>> = vec![None; p.num_gt_ids];
    let mut tracked_segments = vec![0usize; p.num_gt_ids];
    let mut was_tracked = vec![false; p.num_gt_ids];
    for f in &p.frames {
        s.gt_count += f.gt_ids.len();
        let m = prefer_continuity(f, &prev_frame_pred);
        s.tp += m.pairs.len();
        s.fp += m.fp;
        s.fn_ += m.fn_;
        let mut tracked_now = vec![None; f.gt_ids.len()];
        for &(g, pi, sim) in &m.pairs {
            let gid = f.gt_ids[g];
            let pid = f.pr_ids[pi];
            if last_pred[gid].is_some_and(|prev| prev != pid) {
                s.idsw += 1;
            }
            last_pred[gid] = Some(pid);
            tracked_now[g] = Some(pid);
            s.iou_sum += sim;
        }
        prev_frame_pred.iter_mut().for_each(|v| *v = None);
        for (g, t) in tracked_now.iter().enumerate() {
            let gid = f.gt_ids[g];
            prev_frame_pred[gid] = *t;
            if t.is_some() && !was_tracked[gid] {
                tracked_segments[gid] += 1;
            }
            was_tracked[gid] = t.is_some();
        }
    }
    s.frag = tracked_segments.iter().map(|&n| n.saturating_sub(1)).sum();
    s.mota = if s.gt_count == 0 { f64::NAN } else { 1.0 - (s.fp + s.fn_ + s.idsw) as f64 / s.gt_count as f64 };
    s
}

/// CLEAR matching ranks continued identities above everything else: among
/// matchings of pairs with IoU ≥ 0.5, maximise `1000·[continued] + IoU`.
fn prefer_continuity(f: &Frame, prev: &[Option<usize>]) -> FrameMatch {
    let (ng, np) = (f.gt_boxes.len(), f.pr_boxes.len());
    let mut costs = CostMatrix::zeros(ng, np);
    let mut sims = vec![0.0; ng * np];
    let big = 1000.0;
    for g in 0..ng {
        for p in 0..np {
            let s = iou(&f.gt_boxes[g], &f.pr_boxes[p]);
            sims[g * np + p] = s;
            if s >= CLEAR_THRESHOLD - EPS {
                let bonus = if prev[f.gt_ids[g]] == Some(f.pr_ids[p]) { big } else { 0.0 };
                costs.set(g, p, big + 1.0 - (bonus + s));
            } else {
                costs.forbid(g, p);
            }
        }
    }
    let a = solve_assignment(&costs);
    let pairs: Vec<(usize, usize, f64)> = a.matches.iter().map(|&(g, p)| (g, p, sims[g * np + p])).collect();
    FrameMatch { fp: np - pairs.len(), fn_: ng - pairs.len(), pairs }
}

/// CLEAR MOT counts at IoU 0.5.
pub fn clear(gt: &[GtEntry], results: &[ResultEntry]) -> Result<ClearStats, MetricsError> {
    let s = clear_on(&prepare(gt, results));
    if s.gt_count == 0 {
        return Err(MetricsError::EmptyGroundTruth);
    }
    Ok(s)
}

pub fn mota(gt: &[GtEntry], results: &[ResultEntry]) -> Result<f64, MetricsError> {
    clear(gt, results).map(|s| s.mota)
}

/// Number of tracked → untracked → tracked transitions, summed over GT ids.
pub fn frag(gt: &[GtEntry], results: &[ResultEntry]) -> usize {
    clear_on(&prepare(gt, results)).frag
}

/// Mean IoU over the CLEAR true positives.
pub fn loca(gt: &[GtEntry], results: &[ResultEntry]) -> Result<f64, MetricsError> {
    let s = clear(gt, results)?;
    if s.tp == 0 {
        return Err(MetricsError::NoTruePositives);
    }
    Ok(s.iou_sum / s.tp as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IdentityStats {
    pub idf1: f64,
    pub idtp: usize,
    pub idfp: usize,
    pub idfn: usize,
}

fn identity_on(p: &Prepared) -> IdentityStats {
    let (ng, np) = (p.num_gt_ids, p.num_pr_ids);
    let mut overlap = vec![0usize; ng * np];
    let (mut total_gt, mut total_pr) = (0usize, 0usize);
    for f in &p.frames {
        total_gt += f.gt_ids.len();
        total_pr += f.pr_ids.len();
        for (g, gb) in f.gt_boxes.iter().enumerate() {
            for (q, pb) in f.pr_boxes.iter().enumerate() {
                if iou(gb, pb) >= CLEAR_THRESHOLD - EPS {
                    overlap[f.gt_ids[g] * np + f.pr_ids[q]] += 1;
                }
            }
        }
    }
    let max = overlap.iter().copied().max().unwrap_or(0) as f64;
    let mut costs = CostMatrix::zeros(ng, np);
    for g in 0..ng {
        for q in 0..np {
            costs.set(g, q, max - overlap[g * np + q] as f64);
        }
    }
    let idtp: usize = solve_assignment(&costs).matches.iter().map(|&(g, q)| overlap[g * np + q]).sum();
    let idfn = total_gt - idtp;
    let idfp = total_pr - idtp;
    let denom = 2 * idtp + idfp + idfn;
    IdentityStats { idf1: if denom == 0 { 0.0 } else { 2.0 * idtp as f64 / denom as f64 }, idtp, idfp, idfn }
}

/// Identity F1 over the best one-to-one mapping of GT to predicted ids.
pub fn idf1(gt: &[GtEntry], results: &[ResultEntry]) -> Result<IdentityStats, MetricsError> {
    let p = prepare(gt, results);
    if p.frames.iter().all(|f| f.gt_ids.is_empty()) {
        return Err(MetricsError::EmptyGroundTruth);
    }
    Ok(identity_on(&p))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HotaAtAlpha {
    pub alpha: f64,
    pub hota: f64,
    pub deta: f64,
    pub assa: f64,
    pub loca: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct HotaReport {
    /// Averages over `per_alpha`.
    pub hota: f64,
    pub deta: f64,
    pub assa: f64,
    pub per_alpha: Vec<HotaAtAlpha>,
}

/// Soft co-occurrence of each (gt id, pred id) pair, normalised like a
/// Jaccard index over the two id lifetimes.
fn global_alignment(p: &Prepared) -> Vec<f64> {
    let (ng, np) = (p.num_gt_ids, p.num_pr_ids);
    let mut potential = vec![0.0; ng * np];
    let mut gt_count = vec![0.0; ng];
    let mut pr_count = vec![0.0; np];
    for f in &p.frames {
        let (fg, fp) = (f.gt_boxes.len(), f.pr_boxes.len());
        let sim: Vec<f64> = (0..fg * fp).map(|k| iou(&f.gt_boxes[k / fp.max(1)], &f.pr_boxes[k % fp.max(1)])).collect();
        let row_sum: Vec<f64> = (0..fg).map(|g| (0..fp).map(|q| sim[g * fp + q]).sum()).collect();
        let col_sum: Vec<f64> = (0..fp).map(|q| (0..fg).map(|g| sim[g * fp + q]).sum()).collect();
        for g in 0..fg {
            for q in 0..fp {
                let s = sim[g * fp + q];
                let denom = row_sum[g] + col_sum[q] - s;
                if denom > EPS {
                    potential[f.gt_ids[g] * np + f.pr_ids[q]] += s / denom;
                }
            }
        }
        f.gt_ids.iter().for_each(|&g| gt_count[g] += 1.0);
        f.pr_ids.iter().for_each(|&q| pr_count[q] += 1.0);
    }
    let mut out = vec![0.0; ng * np];
    for g in 0..ng {
        for q in 0..np {
            let pm = potential[g * np + q];
            let d = gt_count[g] + pr_count[q] - pm;
            out[g * np + q] = if d > EPS { pm / d } else { 0.0 };
        }
    }
    out
}

fn hota_on(p: &Prepared, alphas: &[f64]) -> HotaReport {
    let (ng, np) = (p.num_gt_ids, p.num_pr_ids);
    let align = global_alignment(p);
    let mut gt_count = vec![0usize; ng];
    let mut pr_count = vec![0usize; np];
    for f in &p.frames {
        f.gt_ids.iter().for_each(|&g| gt_count[g] += 1);
        f.pr_ids.iter().for_each(|&q| pr_count[q] += 1);
    }
    let mut per_alpha = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut pair_tp = vec![0usize; ng * np];
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        let mut iou_sum = 0.0;
        for f in &p.frames {
            let m = match_frame_scored(&f.gt_boxes, &f.pr_boxes, alpha, |g, q, s| {
                align[f.gt_ids[g] * np + f.pr_ids[q]] * s
            });
            tp += m.pairs.len();
            fp += m.fp;
            fn_ += m.fn_;
            for &(g, q, s) in &m.pairs {
                pair_tp[f.gt_ids[g] * np + f.pr_ids[q]] += 1;
                iou_sum += s;
            }
        }
        // A(c) summed over TPs = Σ_pairs tpa · tpa / (tpa + fpa + fna)
        let mut ass_sum = 0.0;
        for g in 0..ng {
            for q in 0..np {
                let tpa = pair_tp[g * np + q];
                if tpa > 0 {
                    let denom = gt_count[g] + pr_count[q] - tpa;
                    ass_sum += tpa as f64 * tpa as f64 / denom as f64;
                }
            }
        }
        let assa = if tp == 0 { 0.0 } else { ass_sum / tp as f64 };
        let deta = if tp + fp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fp + fn_) as f64 };
        per_alpha.push(HotaAtAlpha {
            alpha,
            hota: (deta * assa).sqrt(),
            deta,
            assa,
            loca: if tp == 0 { 0.0 } else { iou_sum / tp as f64 },
            tp,
            fp,
            fn_,
        });
    }
    let n = per_alpha.len().max(1) as f64;
    HotaReport {
        hota: per_alpha.iter().map(|a| a.hota).sum::<f64>() / n,
        deta: per_alpha.iter().map(|a| a.deta).sum::<f64>() / n,
        assa: per_alpha.iter().map(|a| a.assa).sum::<f64>() / n,
        per_alpha,
    }
}

pub fn hota(gt: &[GtEntry], results: &[ResultEntry], alphas: &[f64]) -> Result<HotaReport, MetricsError> {
    let p = prepare(gt, results);
    if p.frames.iter().all(|f| f.gt_ids.is_empty()) {
        return Err(MetricsError::EmptyGroundTruth);
    }
    Ok(hota_on(&p, alphas))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub mota: f64,
    pub idf1: f64,
    /// Averaged over the 19 default thresholds.
    pub hota: f64,
    pub deta: f64,
    pub assa: f64,
    /// HOTA at the single threshold 0.5.
    pub hota_05: f64,
    /// Mean IoU over CLEAR true positives; 0 when there are none.
    pub loca: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub idsw: usize,
    pub frag: usize,
    pub gt_count: usize,
    pub idtp: usize,
    pub idfp: usize,
    pub idfn: usize,
    pub per_alpha: Vec<HotaAtAlpha>,
}

pub fn evaluate(gt: &[GtEntry], results: &[ResultEntry]) -> Result<MetricsReport, MetricsError> {
    let p = prepare(gt, results);
    let c = clear_on(&p);
    if c.gt_count == 0 {
        return Err(MetricsError::EmptyGroundTruth);
    }
    let id = identity_on(&p);
    let h = hota_on(&p, &default_alphas());
    let hota_05 = h.per_alpha.iter().find(|a| (a.alpha - 0.5).abs() < 1e-9).map_or(0.0, |a| a.hota);
    Ok(MetricsReport {
        mota: c.mota,
        idf1: id.idf1,
        hota: h.hota,
        deta: h.deta,
        assa: h.assa,
        hota_05,
        loca: if c.tp == 0 { 0.0 } else { c.iou_sum / c.tp as f64 },
        tp: c.tp,
        fp: c.fp,
        fn_: c.fn_,
        idsw: c.idsw,
        frag: c.frag,
        gt_count: c.gt_count,
        idtp: id.idtp,
        idfp: id.idfp,
        idfn: id.idfn,
        per_alpha: h.per_alpha,
    })
}

impl MetricsReport {
    /// Aligned, human-readable summary.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let rows: [(&str, String); 13] = [
            ("HOTA", format!("{:.4}", self.hota)),
            ("DetA", format!("{:.4}", self.deta)),
            ("AssA", format!("{:.4}", self.assa)),
            ("HOTA@0.5", format!("{:.4}", self.hota_05)),
            ("MOTA", format!("{:.4}", self.mota)),
            ("IDF1", format!("{:.4}", self.idf1)),
            ("LocA", format!("{:.4}", self.loca)),
            ("FP", self.fp.to_string()),
            ("FN", self.fn_.to_string()),
            ("IDs", self.idsw.to_string()),
            ("Frag", self.frag.to_string()),
            ("TP", self.tp.to_string()),
            ("GT", self.gt_count.to_string()),
        ];
        for (k, v) in rows {
            s.push_str(&format!("{k:<10}{v:>12}\n"));
        }
        s
    }

    /// `key=value` lines, one per metric, including the per-threshold HOTA.
    pub fn to_key_values(&self) -> String {
        let mut s = format!(
            "hota={:.6}\ndeta={:.6}\nassa={:.6}\nhota_05={:.6}\nmota={:.6}\nidf1={:.6}\nloca={:.6}\n\
             tp={}\nfp={}\nfn={}\nidsw={}\nfrag={}\ngt={}\nidtp={}\nidfp={}\nidfn={}\n",
            self.hota,
            self.deta,
            self.assa,
            self.hota_05,
            self.mota,
            self.idf1,
            self.loca,
            self.tp,
            self.fp,
            self.fn_,
            self.idsw,
            self.frag,
            self.gt_count,
            self.idtp,
            self.idfp,
            self.idfn
        );
        for a in &self.per_alpha {
            s.push_str(&format!(
                "hota@{:.2}={:.6}\ndeta@{:.2}={:.6}\nassa@{:.2}={:.6}\n",
                a.alpha, a.hota, a.alpha, a.deta, a.alpha, a.assa
            ));
        }
        s
    }
}
