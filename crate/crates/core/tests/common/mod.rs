//! Brute-force oracles shared by the oracle tests and the acceptance run.
#![allow(dead_code)]

use std::collections::HashMap;

use mfkd::backbone::Detection;
use mfkd::eval::{EvalConfig, FrameEval};
use mfkd::fusion::voxel_key;
use mfkd::geom::{BoundingBox3D, Point3};
use mfkd::rng::Rng;

/// Textbook greedy max-min selection, recomputing every distance each round.
pub fn exhaustive_fps(points: &[Point3], k: usize, seed: usize) -> Vec<usize> {
    let n = points.len();
    let mut chosen = vec![seed % n];
    while chosen.len() < k.min(n) {
        let mut best = None;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen
                .iter()
                .map(|&j| points[i].dist2(&points[j]))
                .fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best = Some(i);
            }
        }
        chosen.push(best.unwrap());
    }
    chosen
}

pub fn cloud(rng: &mut Rng, n: usize, grid: bool) -> Vec<Point3> {
    (0..n)
        .map(|_| {
            // a coarse lattice produces many exact distance ties
            let c = |r: &mut Rng| {
                if grid {
                    r.below(4) as f64 * 0.5
                } else {
                    r.range(-2.0, 2.0)
                }
            };
            Point3::new(c(rng), c(rng), c(rng), rng.uniform())
        })
        .collect()
}

/// Bucket every point, then keep the first `cap` indices of each bucket.
pub fn bucket_subsample(pts: &[Point3], voxel: [f64; 3], cap: usize) -> Vec<Point3> {
    let mut buckets: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in pts.iter().enumerate() {
        buckets.entry(voxel_key(p, voxel)).or_default().push(i);
    }
    let mut keep: Vec<usize> = buckets.values().flat_map(|v| v.iter().take(cap).copied()).collect();
    keep.sort_unstable();
    keep.iter().map(|&i| pts[i]).collect()
}

pub fn random_pair(rng: &mut Rng) -> (BoundingBox3D, BoundingBox3D) {
    let mk = |rng: &mut Rng, c: [f64; 3]| {
        BoundingBox3D::new(
            c,
            [rng.range(0.5, 3.0), rng.range(0.5, 5.0), rng.range(0.5, 2.5)],
            rng.range(-3.2, 3.2),
            0,
            0,
        )
        .unwrap()
    };
    let ca = [rng.range(-1.0, 1.0), rng.range(-1.0, 1.0), rng.range(0.0, 1.0)];
    let a = mk(rng, ca);
    let cb = [
        ca[0] + rng.range(-1.5, 1.5),
        ca[1] + rng.range(-1.5, 1.5),
        ca[2] + rng.range(-0.8, 0.8),
    ];
    let b = mk(rng, cb);
    (a, b)
}

/// Uniform samples over an axis-aligned region containing both boxes.
pub fn monte_carlo_iou(a: &BoundingBox3D, b: &BoundingBox3D, samples: usize, rng: &mut Rng, bev: bool) -> f64 {
    let r = |x: &BoundingBox3D| x.length().hypot(x.width()) / 2.0;
    let lo = [
        (a.center[0] - r(a)).min(b.center[0] - r(b)),
        (a.center[1] - r(a)).min(b.center[1] - r(b)),
        a.z_range().0.min(b.z_range().0),
    ];
    let hi = [
        (a.center[0] + r(a)).max(b.center[0] + r(b)),
        (a.center[1] + r(a)).max(b.center[1] + r(b)),
        a.z_range().1.max(b.z_range().1),
    ];
    let (mut ia, mut ib, mut both) = (0usize, 0usize, 0usize);
    for _ in 0..samples {
        let x = rng.range(lo[0], hi[0]);
        let y = rng.range(lo[1], hi[1]);
        let (za, zb) = if bev {
            (a.center[2], b.center[2])
        } else {
            let z = rng.range(lo[2], hi[2]);
            (z, z)
        };
        let inside_a = a.contains([x, y, za], 0.0);
        let inside_b = b.contains([x, y, zb], 0.0);
        ia += inside_a as usize;
        ib += inside_b as usize;
        both += (inside_a && inside_b) as usize;
    }
    both as f64 / (ia + ib - both) as f64
}

pub fn car(x: f64, y: f64, yaw: f64) -> BoundingBox3D {
    // square footprint: a quarter-turn heading error keeps IoU = 1
    BoundingBox3D::new([x, y, 0.8], [3.0, 3.0, 1.6], yaw, 0, 0).unwrap()
}

/// 3 GT; detections by score: TP (exact heading), FP, TP (heading off by π/2), FP.
/// Recall/precision: (1/3, 1), (1/3, 1/2), (2/3, 2/3), (2/3, 1/2).
/// Interpolated precision is 1 for the 34 recall points 0..=0.33, 2/3 for the
/// 33 points 0.34..=0.66, then 0, so AP = 56/101. Heading-weighted precision
/// is 1 then 1/2, so APH = 50.5/101.
pub fn hand_ap_scene() -> (FrameEval, EvalConfig, f64, f64) {
    let gts = vec![car(5.0, 0.0, 0.0), car(-5.0, 3.0, 1.0), car(0.0, -8.0, 0.5)];
    let det = |b: BoundingBox3D, score| Detection { bbox: b, score };
    let frame = FrameEval {
        detections: vec![
            det(car(5.0, 0.0, 0.0), 0.9),
            det(car(12.0, 12.0, 0.0), 0.8),
            det(car(-5.0, 3.0, 1.0 + std::f64::consts::FRAC_PI_2), 0.7),
            det(car(-12.0, -12.0, 0.0), 0.6),
        ],
        gts,
        gt_points: vec![20, 20, 20],
    };
    let cfg = EvalConfig {
        class_names: vec!["vehicle".into()],
        iou_thresholds: vec![0.5],
        iou_mode: mfkd::geom::IouMode::Bev,
        ..EvalConfig::default()
    };
    (frame, cfg, 56.0 / 101.0, 50.5 / 101.0)
}
