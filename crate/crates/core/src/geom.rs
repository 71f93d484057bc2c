//! Points, oriented boxes, canonical transforms and rotated-box overlap.

use std::cmp::Ordering;
use std::f64::consts::PI;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeomError {
    #[error("box size must be positive and finite, got {0:?}")]
    BadSize([f64; 3]),
    #[error("non-finite box pose")]
    NonFinite,
}

/// A LiDAR return: position in meters and intensity in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Point3 { x, y, z, intensity }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dist2(&self, o: &Point3) -> f64 {
        let (dx, dy, dz) = (self.x - o.x, self.y - o.y, self.z - o.z);
        dx * dx + dy * dy + dz * dz
    }

    /// Round every field through `f32`, the precision of all on-disk formats.
    pub fn quantized(&self) -> Point3 {
        Point3 {
            x: self.x as f32 as f64,
            y: self.y as f32 as f64,
            z: self.z as f32 as f64,
            intensity: self.intensity as f32 as f64,
        }
    }
}

/// Wrap an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

/// Oriented 3-D box. `size` is (width, length, height); length runs along the
/// heading, so a yaw of 0 aligns length with +x.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub class_id: u32,
    pub track_id: u64,
}

impl BoundingBox3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64, class_id: u32, track_id: u64) -> Result<Self, GeomError> {
        if size.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(GeomError::BadSize(size));
        }
        if center.iter().any(|c| !c.is_finite()) || !yaw.is_finite() {
            return Err(GeomError::NonFinite);
        }
        Ok(BoundingBox3D {
            center,
            size,
            yaw: wrap_angle(yaw),
            class_id,
            track_id,
        })
    }

    pub fn width(&self) -> f64 {
        self.size[0]
    }

    pub fn length(&self) -> f64 {
        self.size[1]
    }

    pub fn height(&self) -> f64 {
        self.size[2]
    }

    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }

    pub fn bev_area(&self) -> f64 {
        self.size[0] * self.size[1]
    }

    pub fn z_range(&self) -> (f64, f64) {
        (self.center[2] - self.size[2] / 2.0, self.center[2] + self.size[2] / 2.0)
    }

    /// Same box with all fields rounded through `f32`.
    pub fn quantized(&self) -> BoundingBox3D {
        let q = |v: f64| v as f32 as f64;
        BoundingBox3D {
            center: self.center.map(q),
            size: self.size.map(q),
            yaw: q(self.yaw),
            ..*self
        }
    }

    /// BEV corners in counter-clockwise order.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.length() / 2.0, self.width() / 2.0);
        [(hl, -hw), (hl, hw), (-hl, hw), (-hl, -hw)]
            .map(|(u, v)| [self.center[0] + c * u - s * v, self.center[1] + s * u + c * v])
    }

    /// World point to box frame: `R(−yaw)·(p − center)`.
    pub fn to_canonical(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]]
    }

    pub fn from_canonical(&self, q: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.center[0] + c * q[0] - s * q[1],
            self.center[1] + s * q[0] + c * q[1],
            self.center[2] + q[2],
        ]
    }

    /// Whether a canonical point lies inside the box grown by `margin` per dimension.
    pub fn contains_canonical(&self, q: [f64; 3], margin: f64) -> bool {
        q[0].abs() <= (self.length() + margin) / 2.0
            && q[1].abs() <= (self.width() + margin) / 2.0
            && q[2].abs() <= (self.height() + margin) / 2.0
    }

    pub fn contains(&self, p: [f64; 3], margin: f64) -> bool {
        self.contains_canonical(self.to_canonical(p), margin)
    }

    /// Same box grown by `margin` on every dimension.
    pub fn enlarged(&self, margin: f64) -> BoundingBox3D {
        BoundingBox3D {
            size: self.size.map(|s| s + margin),
            ..*self
        }
    }

    pub fn bev_distance(&self) -> f64 {
        self.center[0].hypot(self.center[1])
    }

    fn total_cmp(&self, o: &BoundingBox3D) -> Ordering {
        let a = self.center.iter().chain(&self.size).chain([&self.yaw]);
        let b = o.center.iter().chain(&o.size).chain([&o.yaw]);
        for (x, y) in a.zip(b) {
            match x.total_cmp(y) {
                Ordering::Equal => continue,
                ord => return ord,
            }
        }
        Ordering::Equal
    }
}

/// One LiDAR sweep.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub frame_index: u32,
    pub points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(frame_index: u32, points: Vec<Point3>) -> Self {
        PointCloud { frame_index, points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Express points in the box's canonical frame. Intensity is carried through.
pub fn canonical_transform(points: &[Point3], bx: &BoundingBox3D) -> Vec<Point3> {
    points
        .iter()
        .map(|p| {
            let [x, y, z] = bx.to_canonical(p.xyz());
            Point3::new(x, y, z, p.intensity)
        })
        .collect()
}

pub fn inverse_canonical_transform(points: &[Point3], bx: &BoundingBox3D) -> Vec<Point3> {
    points
        .iter()
        .map(|p| {
            let [x, y, z] = bx.from_canonical(p.xyz());
            Point3::new(x, y, z, p.intensity)
        })
        .collect()
}

/// Indices of points inside `bx` grown by `margin` along all three dimensions.
pub fn points_in_box(points: &[Point3], bx: &BoundingBox3D, margin: f64) -> Vec<usize> {
    points
        .iter()
        .enumerate()
        .filter(|(_, p)| bx.contains(p.xyz(), margin))
        .map(|(i, _)| i)
        .collect()
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Signed shoelace area (positive for counter-clockwise polygons).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        s += p[0] * q[1] - q[0] * p[1];
    }
    s / 2.0
}

/// Sutherland–Hodgman clipping of `subject` by the convex counter-clockwise
/// polygon `clip`. Points on a clip edge count as inside.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (cur_in, prev_in) = (cross(a, b, cur) >= 0.0, cross(a, b, prev) >= 0.0);
            if cur_in {
                if !prev_in {
                    output.push(intersect(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(intersect(prev, cur, a, b));
            }
        }
    }
    output
}

fn intersect(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let (dp, dq) = (cross(a, b, p), cross(a, b, q));
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Order a pair canonically so overlap results are exactly symmetric.
fn ordered<'a>(a: &'a BoundingBox3D, b: &'a BoundingBox3D) -> (&'a BoundingBox3D, &'a BoundingBox3D) {
    if a.total_cmp(b) == Ordering::Greater {
        (b, a)
    } else {
        (a, b)
    }
}

/// Area of the intersection of the two BEV footprints.
pub fn bev_intersection_area(a: &BoundingBox3D, b: &BoundingBox3D) -> f64 {
    let (a, b) = ordered(a, b);
    let poly = clip_convex(&a.bev_corners(), &b.bev_corners());
    polygon_area(&poly).max(0.0)
}

/// IoU of the yaw-rotated BEV rectangles.
pub fn rotated_iou_bev(a: &BoundingBox3D, b: &BoundingBox3D) -> f64 {
    let (a, b) = ordered(a, b);
    let (aa, ab) = (polygon_area(&a.bev_corners()), polygon_area(&b.bev_corners()));
    if aa <= 0.0 || ab <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b);
    let union = aa + ab - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// 3-D IoU: BEV intersection area times z-overlap over the union of volumes.
pub fn iou_3d(a: &BoundingBox3D, b: &BoundingBox3D) -> f64 {
    let (a, b) = ordered(a, b);
    let (aa, ab) = (polygon_area(&a.bev_corners()), polygon_area(&b.bev_corners()));
    let (va, vb) = (aa * a.height(), ab * b.height());
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    let (a0, a1) = a.z_range();
    let (b0, b1) = b.z_range();
    let dz = (a1.min(b1) - a0.max(b0)).max(0.0);
    let inter = bev_intersection_area(a, b) * dz;
    let union = va + vb - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Which overlap measure weights box pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IouMode {
    Bev,
    #[default]
    ThreeD,
}

impl IouMode {
    pub fn iou(self, a: &BoundingBox3D, b: &BoundingBox3D) -> f64 {
        match self {
            IouMode::Bev => rotated_iou_bev(a, b),
            IouMode::ThreeD => iou_3d(a, b),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(center: [f64; 3], yaw: f64) -> BoundingBox3D {
        BoundingBox3D::new(center, [1.0, 1.0, 1.0], yaw, 0, 0).unwrap()
    }

    #[test]
    fn canonical_examples() {
        let b = unit([0.0, 0.0, 0.0], 0.7);
        let q = canonical_transform(&[Point3::new(0.0, 0.0, 0.0, 0.5)], &b);
        assert_eq!(q[0].xyz(), [0.0, 0.0, 0.0]);

        let b = unit([1.0, 2.0, 0.0], 0.0);
        let q = canonical_transform(&[Point3::new(2.0, 2.0, 0.0, 0.0)], &b);
        assert_eq!(q[0].xyz(), [1.0, 0.0, 0.0]);

        let b = unit([0.0, 0.0, 0.0], PI / 2.0);
        let q = canonical_transform(&[Point3::new(1.0, 0.0, 0.0, 0.0)], &b)[0];
        // R(−π/2)·(1,0,0) = (cos(π/2), −sin(π/2), 0)
        assert!(q.x.abs() < 1e-15 && (q.y + 1.0).abs() < 1e-15 && q.z == 0.0);
    }

    #[test]
    fn points_in_box_margin() {
        let b = unit([0.0, 0.0, 0.0], 0.0);
        let pts = [Point3::new(0.49, 0.0, 0.0, 0.0), Point3::new(0.6, 0.0, 0.0, 0.0)];
        assert_eq!(points_in_box(&pts, &b, 0.0), vec![0]);
        assert_eq!(points_in_box(&pts, &b, 0.8), vec![0, 1]);
    }

    #[test]
    fn iou_examples() {
        let a = unit([0.0, 0.0, 0.0], 0.3);
        assert_eq!(rotated_iou_bev(&a, &a), 1.0);
        assert_eq!(iou_3d(&a, &a), 1.0);
        let far = unit([5.0, 0.0, 0.0], 0.0);
        assert_eq!(rotated_iou_bev(&a, &far), 0.0);
        let s0 = unit([0.0, 0.0, 0.0], 0.0);
        let s1 = unit([0.5, 0.0, 0.0], 0.0);
        assert!((rotated_iou_bev(&s0, &s1) - 1.0 / 3.0).abs() < 1e-12);
        let stacked = unit([0.0, 0.0, 1.0], 0.0);
        assert_eq!(iou_3d(&s0, &stacked), 0.0);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BoundingBox3D::new([0.0; 3], [0.0, 1.0, 1.0], 0.0, 0, 0).is_err());
        assert!(BoundingBox3D::new([f64::NAN, 0.0, 0.0], [1.0; 3], 0.0, 0, 0).is_err());
    }

    #[test]
    fn yaw_wraps_into_half_open_interval() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        let b = BoundingBox3D::new([0.0; 3], [1.0; 3], 7.0, 0, 0).unwrap();
        assert!(b.yaw > -PI && b.yaw <= PI);
    }
}
