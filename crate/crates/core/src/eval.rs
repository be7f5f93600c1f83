//! Rotated BEV IoU, interpolated average precision, and per-band evaluation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Box3D, LabeledObject};

/// Number of recall sample points of the interpolated AP.
pub const AP_RECALL_POINTS: usize = 40;

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let (p, q) = (poly[i], poly[(i + 1) % n]);
            p[0] * q[1] - q[0] * p[1]
        })
        .sum();
    0.5 * twice.abs()
}

/// Sutherland-Hodgman clip of `subject` by the convex counter-clockwise `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for k in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[k], clip[(k + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for i in 0..input.len() {
            let cur = input[i];
            let prev = input[(i + input.len() - 1) % input.len()];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in != prev_in {
                let (d1, d2) = (cross(a, b, prev), cross(a, b, cur));
                let t = d1 / (d1 - d2);
                out.push([prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])]);
            }
            if cur_in {
                out.push(cur);
            }
        }
    }
    out
}

/// Intersection-over-union of two yaw-rotated footprints.
pub fn rotated_bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let inter = polygon_area(&clip_convex(&a.bev_corners(), &b.bev_corners()));
    let union = a.bev_area() + b.bev_area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// A scored box; its band follows the range of its center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Box3D,
    pub score: f64,
}

impl Detection {
    pub fn range(&self) -> f64 {
        self.bbox.range()
    }
}

/// Greedy NMS: keeps boxes in descending score, dropping any whose IoU with a
/// kept box exceeds `iou_thresh`.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept.iter().all(|k| rotated_bev_iou(&k.bbox, &d.bbox) <= iou_thresh) {
            kept.push(d);
        }
    }
    kept
}

/// Half-open range interval `[lo, hi)` in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Band {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

impl Band {
    pub fn new(name: &str, lo: f64, hi: f64) -> Self {
        Band {
            name: name.to_string(),
            lo,
            hi,
        }
    }

    pub fn contains(&self, range: f64) -> bool {
        range >= self.lo && range < self.hi
    }

    /// full [0, 70.4), near [0, 40), far [40, 70.4), far60 [60, 70.4).
    pub fn defaults() -> Vec<Band> {
        vec![
            Band::new("full", 0.0, 70.4),
            Band::new("near", 0.0, 40.0),
            Band::new("far", 40.0, 70.4),
            Band::new("far60", 60.0, 70.4),
        ]
    }
}

/// Detections and ground truth of one scene.
#[derive(Debug, Clone, Default)]
pub struct SceneResult {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<LabeledObject>,
}

/// Per-detection match outcome, in descending score order.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchTable {
    /// `(score, is_true_positive)` sorted by descending score.
    pub ranked: Vec<(f64, bool)>,
    pub n_gt: usize,
}

/// Greedy matching within each scene: detections in descending score claim the
/// unmatched ground truth of highest IoU, if that IoU reaches `iou_thresh`.
pub fn match_detections(scenes: &[SceneResult], iou_thresh: f64, band: Option<&Band>) -> MatchTable {
    let mut ranked = Vec::new();
    let mut n_gt = 0;
    let in_band = |r: f64| band.is_none_or(|b| b.contains(r));
    for s in scenes {
        let gts: Vec<&LabeledObject> = s.ground_truth.iter().filter(|g| in_band(g.range())).collect();
        n_gt += gts.len();
        let mut dets: Vec<&Detection> = s.detections.iter().filter(|d| in_band(d.range())).collect();
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut taken = vec![false; gts.len()];
        for d in dets {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if taken[gi] {
                    continue;
                }
                let iou = rotated_bev_iou(&d.bbox, &g.bbox);
                if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            if let Some((gi, _)) = best {
                taken[gi] = true;
            }
            ranked.push((d.score, best.is_some()));
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    MatchTable { ranked, n_gt }
}

/// Cumulative (score, precision, recall) after each ranked detection.
pub fn pr_curve(table: &MatchTable) -> Vec<(f64, f64, f64)> {
    let mut tp = 0usize;
    table
        .ranked
        .iter()
        .enumerate()
        .map(|(i, &(score, hit))| {
            tp += hit as usize;
            let precision = tp as f64 / (i + 1) as f64;
            let recall = if table.n_gt > 0 { tp as f64 / table.n_gt as f64 } else { 0.0 };
            (score, precision, recall)
        })
        .collect()
}

/// 40-point interpolated AP; `None` when there is no ground truth.
pub fn interpolated_ap(table: &MatchTable) -> Option<f64> {
    if table.n_gt == 0 {
        return None;
    }
    let curve = pr_curve(table);
    // Running max from the tail gives the interpolated precision envelope.
    let mut envelope: Vec<(f64, f64)> = curve.iter().map(|&(_, p, r)| (r, p)).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i].1 = envelope[i].1.max(envelope[i + 1].1);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for step in 1..=AP_RECALL_POINTS {
        let r = step as f64 / AP_RECALL_POINTS as f64;
        while k < envelope.len() && envelope[k].0 < r - 1e-12 {
            k += 1;
        }
        if k < envelope.len() {
            sum += envelope[k].1;
        }
    }
    Some(sum / AP_RECALL_POINTS as f64)
}

/// AP of `scenes` restricted to `band` (`None` = no restriction).
pub fn average_precision(scenes: &[SceneResult], iou_thresh: f64, band: Option<&Band>) -> Option<f64> {
    interpolated_ap(&match_detections(scenes, iou_thresh, band))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandMetric {
    pub band: String,
    pub iou: f64,
    pub ap: Option<f64>,
    pub n_gt: usize,
    pub n_det: usize,
    pub n_matched: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrPoint {
    pub band: String,
    pub iou: f64,
    pub score: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalResult {
    pub metrics: Vec<BandMetric>,
    pub pr: Vec<PrPoint>,
}

impl EvalResult {
    pub fn ap(&self, band: &str, iou: f64) -> Option<f64> {
        self.metrics
            .iter()
            .find(|m| m.band == band && (m.iou - iou).abs() < 1e-12)
            .and_then(|m| m.ap)
    }

    /// `band,iou,ap,n_gt,n_det`; bands without ground truth report `NA`.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("band,iou,ap,n_gt,n_det\n");
        for m in &self.metrics {
            let ap = m.ap.map_or_else(|| "NA".to_string(), |a| format!("{a:.6}"));
            let _ = writeln!(s, "{},{:.2},{},{},{}", m.band, m.iou, ap, m.n_gt, m.n_det);
        }
        s
    }

    /// `band,iou,score,precision,recall`.
    pub fn pr_csv(&self) -> String {
        let mut s = String::from("band,iou,score,precision,recall\n");
        for p in &self.pr {
            let _ = writeln!(s, "{},{:.2},{:.6},{:.6},{:.6}", p.band, p.iou, p.score, p.precision, p.recall);
        }
        s
    }
}

/// AP and PR curves for every band at every IoU threshold.
pub fn evaluate_scenes(scenes: &[SceneResult], bands: &[Band], ious: &[f64]) -> Result<EvalResult> {
    if scenes.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty split".into()));
    }
    let mut out = EvalResult::default();
    for band in bands {
        for &iou in ious {
            let table = match_detections(scenes, iou, Some(band));
            let n_matched = table.ranked.iter().filter(|r| r.1).count();
            out.metrics.push(BandMetric {
                band: band.name.clone(),
                iou,
                ap: interpolated_ap(&table),
                n_gt: table.n_gt,
                n_det: table.ranked.len(),
                n_matched,
            });
            out.pr.extend(pr_curve(&table).into_iter().map(|(score, precision, recall)| PrPoint {
                band: band.name.clone(),
                iou,
                score,
                precision,
                recall,
            }));
        }
    }
    Ok(out)
}
