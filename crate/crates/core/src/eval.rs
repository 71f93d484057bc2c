//! Desk-scale detection metrics: greedy score-ordered matching, 101-point
//! interpolated AP, heading-weighted APH, two difficulty levels and
//! distance bands.
//!
//! A GT box is level 2 if it has at least one point in its frame and level 1
//! if it has more than five. GT boxes outside the evaluated level or band are
//! ignored: detections matched to them count as neither TP nor FP.

use std::f64::consts::PI;

use serde::Serialize;

use crate::backbone::Detection;
use crate::geom::{wrap_angle, BoundingBox3D, IouMode};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalConfig {
    pub class_names: Vec<String>,
    pub iou_thresholds: Vec<f64>,
    /// `[lo, hi)` BEV distance bands in meters; the last may be unbounded.
    pub bands: Vec<(f64, f64)>,
    #[serde(skip)]
    pub iou_mode: IouMode,
    /// Level 1 requires strictly more than this many points.
    pub level1_min_points: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            class_names: vec!["vehicle".into(), "pedestrian".into(), "cyclist".into()],
            iou_thresholds: vec![0.5, 0.25, 0.25],
            bands: vec![(0.0, 6.0), (6.0, 10.0), (10.0, f64::INFINITY)],
            iou_mode: IouMode::ThreeD,
            level1_min_points: 5,
        }
    }
}

/// Detections and ground truth for one frame. `gt_points[i]` is the number of
/// frame points inside `gts[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEval {
    pub detections: Vec<Detection>,
    pub gts: Vec<BoundingBox3D>,
    pub gt_points: Vec<usize>,
}

/// One scored detection after matching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchRecord {
    pub score: f64,
    pub tp: bool,
    /// Heading accuracy of a TP, 0 for FPs.
    pub heading: f64,
}

/// `max(0, 1 − |Δyaw|/π)` with the difference wrapped.
pub fn heading_accuracy(a: f64, b: f64) -> f64 {
    (1.0 - wrap_angle(a - b).abs() / PI).max(0.0)
}

/// 101-point interpolated AP and APH from match records and the GT count.
/// Returns `None` when there is no GT.
pub fn average_precision(records: &[MatchRecord], num_gt: usize) -> Option<(f64, f64)> {
    if num_gt == 0 {
        return None;
    }
    let mut recs = records.to_vec();
    recs.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut tp = 0.0;
    let mut tph = 0.0;
    let mut curve = Vec::with_capacity(recs.len());
    for (i, r) in recs.iter().enumerate() {
        if r.tp {
            tp += 1.0;
            tph += r.heading;
        }
        let n = (i + 1) as f64;
        curve.push((tp / num_gt as f64, tp / n, tph / n));
    }
    // suffix maxima give the interpolated precision at recall ≥ r
    let mut best = (0.0f64, 0.0f64);
    let mut env = vec![(0.0, 0.0); curve.len()];
    for i in (0..curve.len()).rev() {
        best = (best.0.max(curve[i].1), best.1.max(curve[i].2));
        env[i] = best;
    }
    let (mut ap, mut aph) = (0.0, 0.0);
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        if let Some(i) = curve.iter().position(|c| c.0 >= r - 1e-12) {
            ap += env[i].0;
            aph += env[i].1;
        }
    }
    Some((ap / 101.0, aph / 101.0))
}

/// Match one frame's detections of `class` against its GT. `valid[i]` says
/// whether GT `i` counts; `det_in_scope` filters unmatched detections
/// (e.g. by distance band). Returns records and the number of valid GT.
pub fn match_frame(
    frame: &FrameEval,
    class: u32,
    threshold: f64,
    mode: IouMode,
    valid: &dyn Fn(usize) -> bool,
    det_in_scope: &dyn Fn(&Detection) -> bool,
) -> (Vec<MatchRecord>, usize) {
    let gts: Vec<usize> = (0..frame.gts.len())
        .filter(|&i| frame.gts[i].class_id == class)
        .collect();
    let num_valid = gts.iter().filter(|&&i| valid(i)).count();
    let mut dets: Vec<&Detection> = frame.detections.iter().filter(|d| d.bbox.class_id == class).collect();
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut taken = vec![false; frame.gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for d in dets {
        let mut best: Option<(usize, f64)> = None;
        for &i in &gts {
            if taken[i] {
                continue;
            }
            let iou = mode.iou(&d.bbox, &frame.gts[i]);
            if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((i, iou));
            }
        }
        match best {
            Some((i, _)) => {
                taken[i] = true;
                if valid(i) {
                    out.push(MatchRecord {
                        score: d.score,
                        tp: true,
                        heading: heading_accuracy(d.bbox.yaw, frame.gts[i].yaw),
                    });
                }
            }
            None => {
                if det_in_scope(d) {
                    out.push(MatchRecord {
                        score: d.score,
                        tp: false,
                        heading: 0.0,
                    });
                }
            }
        }
    }
    (out, num_valid)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandMetrics {
    pub lo: f64,
    pub hi: f64,
    pub num_gt: usize,
    pub ap: Option<f64>,
    pub aph: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class_id: u32,
    pub name: String,
    pub iou_threshold: f64,
    pub num_gt_l1: usize,
    pub num_gt_l2: usize,
    pub ap_l1: Option<f64>,
    pub aph_l1: Option<f64>,
    pub ap_l2: Option<f64>,
    pub aph_l2: Option<f64>,
    /// Level-2 metrics per distance band.
    pub bands: Vec<BandMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandSummary {
    pub lo: f64,
    pub hi: f64,
    pub map: f64,
    pub maph: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub classes: Vec<ClassMetrics>,
    pub map_l1: f64,
    pub maph_l1: f64,
    pub map_l2: f64,
    pub maph_l2: f64,
    pub bands: Vec<BandSummary>,
}

fn mean_defined(xs: impl Iterator<Item = Option<f64>>) -> f64 {
    let v: Vec<f64> = xs.flatten().collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn pooled(
    frames: &[FrameEval],
    class: u32,
    cfg: &EvalConfig,
    valid: impl Fn(&FrameEval, usize) -> bool,
    scope: impl Fn(&Detection) -> bool,
) -> (Option<(f64, f64)>, usize) {
    let mut records = Vec::new();
    let mut n = 0;
    let thr = cfg.iou_thresholds.get(class as usize).copied().unwrap_or(0.5);
    for f in frames {
        let (r, k) = match_frame(f, class, thr, cfg.iou_mode, &|i| valid(f, i), &scope);
        records.extend(r);
        n += k;
    }
    (average_precision(&records, n), n)
}

fn in_band(d: f64, band: (f64, f64)) -> bool {
    d >= band.0 && d < band.1
}

pub fn evaluate(frames: &[FrameEval], cfg: &EvalConfig) -> EvalReport {
    let l1 = |f: &FrameEval, i: usize| f.gt_points[i] > cfg.level1_min_points;
    let l2 = |f: &FrameEval, i: usize| f.gt_points[i] >= 1;
    let classes: Vec<ClassMetrics> = (0..cfg.class_names.len() as u32)
        .map(|c| {
            let (m1, n1) = pooled(frames, c, cfg, l1, |_| true);
            let (m2, n2) = pooled(frames, c, cfg, l2, |_| true);
            let bands = cfg
                .bands
                .iter()
                .map(|&band| {
                    let (m, n) = pooled(
                        frames,
                        c,
                        cfg,
                        |f, i| l2(f, i) && in_band(f.gts[i].bev_distance(), band),
                        |d| in_band(d.bbox.bev_distance(), band),
                    );
                    BandMetrics {
                        lo: band.0,
                        hi: band.1,
                        num_gt: n,
                        ap: m.map(|x| x.0),
                        aph: m.map(|x| x.1),
                    }
                })
                .collect();
            ClassMetrics {
                class_id: c,
                name: cfg.class_names[c as usize].clone(),
                iou_threshold: cfg.iou_thresholds.get(c as usize).copied().unwrap_or(0.5),
                num_gt_l1: n1,
                num_gt_l2: n2,
                ap_l1: m1.map(|x| x.0),
                aph_l1: m1.map(|x| x.1),
                ap_l2: m2.map(|x| x.0),
                aph_l2: m2.map(|x| x.1),
                bands,
            }
        })
        .collect();
    let bands = cfg
        .bands
        .iter()
        .enumerate()
        .map(|(b, &(lo, hi))| BandSummary {
            lo,
            hi,
            map: mean_defined(classes.iter().map(|c| c.bands[b].ap)),
            maph: mean_defined(classes.iter().map(|c| c.bands[b].aph)),
        })
        .collect();
    EvalReport {
        map_l1: mean_defined(classes.iter().map(|c| c.ap_l1)),
        maph_l1: mean_defined(classes.iter().map(|c| c.aph_l1)),
        map_l2: mean_defined(classes.iter().map(|c| c.ap_l2)),
        maph_l2: mean_defined(classes.iter().map(|c| c.aph_l2)),
        classes,
        bands,
    }
}

impl EvalReport {
    /// The single number experiments compare: level-2 mAPH.
    pub fn score(&self) -> f64 {
        self.maph_l2
    }

    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map_or(String::from("NA"), |x| format!("{x:.6}"));
        let mut s = String::from("class,iou_threshold,num_gt_l1,num_gt_l2,ap_l1,aph_l1,ap_l2,aph_l2");
        for b in self.bands.iter() {
            let hi = if b.hi.is_finite() {
                format!("{}", b.hi)
            } else {
                "inf".into()
            };
            s.push_str(&format!(",ap_{}_{hi},aph_{}_{hi}", b.lo, b.lo));
        }
        s.push('\n');
        for c in &self.classes {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}",
                c.name,
                c.iou_threshold,
                c.num_gt_l1,
                c.num_gt_l2,
                f(c.ap_l1),
                f(c.aph_l1),
                f(c.ap_l2),
                f(c.aph_l2)
            ));
            for b in &c.bands {
                s.push_str(&format!(",{},{}", f(b.ap), f(b.aph)));
            }
            s.push('\n');
        }
        s.push_str(&format!(
            "mean,,,,{:.6},{:.6},{:.6},{:.6}",
            self.map_l1, self.maph_l1, self.map_l2, self.maph_l2
        ));
        for b in &self.bands {
            s.push_str(&format!(",{:.6},{:.6}", b.map, b.maph));
        }
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heading_weight_extremes() {
        assert_eq!(heading_accuracy(0.3, 0.3), 1.0);
        assert!(heading_accuracy(0.0, PI).abs() < 1e-12);
    }

    #[test]
    fn no_gt_gives_none() {
        assert!(average_precision(&[], 0).is_none());
        assert_eq!(average_precision(&[], 3), Some((0.0, 0.0)));
    }
}
