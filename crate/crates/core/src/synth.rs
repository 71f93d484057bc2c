//! Deterministic synthetic LiDAR sequences.
//!
//! Objects are hollow box shells. Each frame samples only the faces turned
//! toward the sensor, with a per-face point budget proportional to the solid
//! angle the face subtends at the configured angular resolution, followed by
//! Bernoulli dropout. A single sweep therefore sees at most two lateral faces
//! of any object, which is what makes multi-frame fusion worth doing.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use mfkd_tensor::wire::{ByteReader, ByteWriter, FormatError};
use thiserror::Error;

use crate::fusion::FrameSequence;
use crate::geom::{BoundingBox3D, Point3, PointCloud};
use crate::par::{self, Exec};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: FormatError },
    #[error("no frame files found in {0}")]
    EmptyDirectory(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorSpec {
    pub origin: [f64; 3],
    /// Horizontal and vertical angular resolution, degrees.
    pub azimuth_res_deg: f64,
    pub elevation_res_deg: f64,
    pub max_range: f64,
    pub dropout: f64,
    pub ground_points: usize,
}

impl Default for SensorSpec {
    fn default() -> Self {
        SensorSpec {
            origin: [0.0, 0.0, 1.8],
            azimuth_res_deg: 0.6,
            elevation_res_deg: 1.2,
            max_range: 24.0,
            dropout: 0.1,
            ground_points: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Trajectory {
    /// Constant planar velocity and yaw rate from the initial pose.
    Linear { velocity: [f64; 2], yaw_rate: f64 },
    /// Circle of `radius` around the sensor's ground point; the box's own yaw
    /// changes only by `yaw_rate`.
    Orbit {
        radius: f64,
        angular_rate: f64,
        phase: f64,
        yaw_rate: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSpec {
    pub class_id: u32,
    /// (width, length, height)
    pub size: [f64; 3],
    /// Initial BEV center; the box rests on the ground plane.
    pub start: [f64; 2],
    pub yaw: f64,
    pub trajectory: Trajectory,
}

impl ObjectSpec {
    pub fn box_at(&self, t: f64, track_id: u64) -> BoundingBox3D {
        let z = self.size[2] / 2.0;
        let (center, yaw) = match self.trajectory {
            Trajectory::Linear { velocity, yaw_rate } => (
                [self.start[0] + velocity[0] * t, self.start[1] + velocity[1] * t, z],
                self.yaw + yaw_rate * t,
            ),
            Trajectory::Orbit {
                radius,
                angular_rate,
                phase,
                yaw_rate,
            } => {
                let a = phase + angular_rate * t;
                ([radius * a.cos(), radius * a.sin(), z], self.yaw + yaw_rate * t)
            }
        };
        BoundingBox3D::new(center, self.size, yaw, self.class_id, track_id)
            .expect("object spec validated")
            .quantized()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub num_frames: usize,
    /// Seconds between frames.
    pub dt: f64,
    /// Half-width of the square annotation range, meters.
    pub range: f64,
    pub sensor: SensorSpec,
    pub objects: Vec<ObjectSpec>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        if self.num_frames == 0 {
            return bad("num_frames must be at least 1");
        }
        if !(self.dt > 0.0 && self.range > 0.0) {
            return bad("dt and range must be positive");
        }
        let s = &self.sensor;
        if !(s.azimuth_res_deg > 0.0 && s.elevation_res_deg > 0.0 && s.max_range > 0.0) {
            return bad("sensor resolution and range must be positive");
        }
        if !(0.0..1.0).contains(&s.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        for o in &self.objects {
            if o.size.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return bad("object sizes must be positive");
            }
        }
        Ok(())
    }
}

/// Object class template used by the random scene builder.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSpec {
    pub name: &'static str,
    pub size: [f64; 3],
    pub size_jitter: f64,
    pub max_speed: f64,
    pub weight: f64,
}

pub fn default_classes() -> Vec<ClassSpec> {
    vec![
        ClassSpec {
            name: "vehicle",
            size: [2.0, 4.5, 1.6],
            size_jitter: 0.1,
            max_speed: 3.0,
            weight: 0.5,
        },
        ClassSpec {
            name: "pedestrian",
            size: [0.8, 0.8, 1.8],
            size_jitter: 0.1,
            max_speed: 1.2,
            weight: 0.25,
        },
        ClassSpec {
            name: "cyclist",
            size: [0.8, 1.8, 1.7],
            size_jitter: 0.1,
            max_speed: 2.5,
            weight: 0.25,
        },
    ]
}

/// Random non-overlapping movers inside `range`.
pub fn random_scene(seed: u64, num_frames: usize, num_objects: usize, range: f64, classes: &[ClassSpec]) -> SceneSpec {
    let mut rng = Rng::stream(seed, &[0x5CE7E]);
    let dt = 0.1;
    let total_w: f64 = classes.iter().map(|c| c.weight).sum();
    let mut objects: Vec<ObjectSpec> = Vec::new();
    let mut attempts = 0;
    while objects.len() < num_objects && attempts < 1000 {
        attempts += 1;
        let mut pick = rng.uniform() * total_w;
        let mut class_id = classes.len() - 1;
        for (i, c) in classes.iter().enumerate() {
            if pick < c.weight {
                class_id = i;
                break;
            }
            pick -= c.weight;
        }
        let c = &classes[class_id];
        let size = c.size.map(|s| s * (1.0 + c.size_jitter * (2.0 * rng.uniform() - 1.0)));
        let margin = size[1] / 2.0 + 1.0;
        let start = [
            rng.range(-range + margin, range - margin),
            rng.range(-range + margin, range - margin),
        ];
        let yaw = rng.range(-PI, PI);
        let speed = rng.range(0.0, c.max_speed);
        let heading = yaw;
        let yaw_rate = rng.range(-0.2, 0.2);
        let cand = ObjectSpec {
            class_id: class_id as u32,
            size,
            start,
            yaw,
            trajectory: Trajectory::Linear {
                velocity: [speed * heading.cos(), speed * heading.sin()],
                yaw_rate,
            },
        };
        // keep clear of the sensor and of every other object for the whole sequence
        let clear = (0..num_frames).all(|k| {
            let t = k as f64 * dt;
            let b = cand.box_at(t, 0);
            let r = b.size[1].hypot(b.size[0]) / 2.0;
            b.bev_distance() > r + 1.5
                && objects.iter().all(|o| {
                    let ob = o.box_at(t, 0);
                    let orad = ob.size[1].hypot(ob.size[0]) / 2.0;
                    (b.center[0] - ob.center[0]).hypot(b.center[1] - ob.center[1]) > r + orad + 0.3
                })
        });
        if clear {
            objects.push(cand);
        }
    }
    SceneSpec {
        seed,
        num_frames,
        dt,
        range,
        sensor: SensorSpec::default(),
        objects,
    }
}

/// One vehicle-sized box circling the sensor once over the sequence with fixed yaw.
pub fn orbit_scene(seed: u64, num_frames: usize, radius: f64) -> SceneSpec {
    let dt = 0.1;
    let period = num_frames as f64 * dt;
    SceneSpec {
        seed,
        num_frames,
        dt,
        range: radius + 6.0,
        sensor: SensorSpec {
            dropout: 0.05,
            ground_points: 500,
            ..SensorSpec::default()
        },
        objects: vec![ObjectSpec {
            class_id: 0,
            size: [2.0, 4.5, 1.6],
            start: [radius, 0.0],
            yaw: 0.3,
            trajectory: Trajectory::Orbit {
                radius,
                angular_rate: 2.0 * PI / period,
                phase: 0.0,
                yaw_rate: 0.0,
            },
        }],
    }
}

const FACE_INSET: (f64, f64) = (0.005, 0.02);

/// Canonical faces: (axis, sign).
const FACES: [(usize, f64); 6] = [(0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0), (2, 1.0), (2, -1.0)];

/// Faces of `bx` whose outward normal points toward `sensor`.
pub fn visible_faces(bx: &BoundingBox3D, sensor: [f64; 3]) -> Vec<(usize, f64)> {
    let half = [bx.length() / 2.0, bx.width() / 2.0, bx.height() / 2.0];
    FACES
        .iter()
        .copied()
        .filter(|&(axis, sign)| {
            let mut q = [0.0; 3];
            q[axis] = sign * half[axis];
            let fc = bx.from_canonical(q);
            let n = face_normal(bx, axis, sign);
            let to = [sensor[0] - fc[0], sensor[1] - fc[1], sensor[2] - fc[2]];
            n[0] * to[0] + n[1] * to[1] + n[2] * to[2] > 0.0
        })
        .collect()
}

fn face_normal(bx: &BoundingBox3D, axis: usize, sign: f64) -> [f64; 3] {
    let (s, c) = bx.yaw.sin_cos();
    match axis {
        0 => [sign * c, sign * s, 0.0],
        1 => [-sign * s, sign * c, 0.0],
        _ => [0.0, 0.0, sign],
    }
}

fn sample_object(bx: &BoundingBox3D, sensor: &SensorSpec, rng: &mut Rng, out: &mut Vec<Point3>) {
    let half = [bx.length() / 2.0, bx.width() / 2.0, bx.height() / 2.0];
    let cell = sensor.azimuth_res_deg.to_radians() * sensor.elevation_res_deg.to_radians();
    for (axis, sign) in visible_faces(bx, sensor.origin) {
        let mut q = [0.0; 3];
        q[axis] = sign * half[axis];
        let fc = bx.from_canonical(q);
        let n = face_normal(bx, axis, sign);
        let to = [
            sensor.origin[0] - fc[0],
            sensor.origin[1] - fc[1],
            sensor.origin[2] - fc[2],
        ];
        let r = (to[0] * to[0] + to[1] * to[1] + to[2] * to[2]).sqrt();
        if r > sensor.max_range {
            continue;
        }
        let cos = (n[0] * to[0] + n[1] * to[1] + n[2] * to[2]) / r;
        let (ua, va) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let area = 4.0 * half[ua] * half[va];
        let expected = area * cos / (r * r) / cell;
        let count = (expected + rng.uniform()).floor() as usize;
        for _ in 0..count {
            let mut c = [0.0; 3];
            c[axis] = sign * (half[axis] - rng.range(FACE_INSET.0, FACE_INSET.1));
            let edge = FACE_INSET.0;
            c[ua] = rng.range(-half[ua] + edge, half[ua] - edge);
            c[va] = rng.range(-half[va] + edge, half[va] - edge);
            let intensity = rng.range(0.3, 0.9);
            if rng.bernoulli(sensor.dropout) {
                continue;
            }
            let [x, y, z] = bx.from_canonical(c);
            out.push(Point3::new(x, y, z, intensity).quantized());
        }
    }
}

fn sample_ground(boxes: &[BoundingBox3D], sensor: &SensorSpec, rng: &mut Rng, out: &mut Vec<Point3>) {
    let r_min = 2.0;
    for _ in 0..sensor.ground_points {
        let r = rng.range(r_min, sensor.max_range);
        let th = rng.range(-PI, PI);
        let z = 0.02 * rng.normal();
        let intensity = rng.range(0.0, 0.3);
        let p = [sensor.origin[0] + r * th.cos(), sensor.origin[1] + r * th.sin(), z];
        if rng.bernoulli(sensor.dropout) {
            continue;
        }
        if boxes.iter().any(|b| b.contains([p[0], p[1], b.center[2]], 0.1)) {
            continue;
        }
        out.push(Point3::new(p[0], p[1], p[2], intensity).quantized());
    }
}

/// Render every frame of a scene. Frames use independent random streams, so
/// the result does not depend on how frames are scheduled.
pub fn generate_sequence(spec: &SceneSpec, exec: Exec) -> Result<FrameSequence, SynthError> {
    spec.validate()?;
    let frames: Vec<(PointCloud, Vec<BoundingBox3D>)> = par::map_range(exec, spec.num_frames, |k| {
        let mut rng = Rng::stream(spec.seed, &[0xF4A3E, k as u64]);
        let t = k as f64 * spec.dt;
        let all: Vec<BoundingBox3D> = spec
            .objects
            .iter()
            .enumerate()
            .map(|(i, o)| o.box_at(t, i as u64 + 1))
            .collect();
        let mut points = Vec::new();
        for b in &all {
            sample_object(b, &spec.sensor, &mut rng, &mut points);
        }
        sample_ground(&all, &spec.sensor, &mut rng, &mut points);
        let annotated = all
            .into_iter()
            .filter(|b| b.center[0].abs() <= spec.range && b.center[1].abs() <= spec.range)
            .collect();
        (PointCloud::new(k as u32, points), annotated)
    });
    let (clouds, mut annotations): (Vec<_>, Vec<_>) = frames.into_iter().unzip();
    // drop tracks that never receive a single point
    let mut seen = std::collections::BTreeSet::new();
    for (cloud, boxes) in clouds.iter().zip(&annotations) {
        for b in boxes {
            if cloud.points.iter().any(|p| b.contains(p.xyz(), 0.0)) {
                seen.insert(b.track_id);
            }
        }
    }
    for boxes in &mut annotations {
        boxes.retain(|b| seen.contains(&b.track_id));
    }
    Ok(FrameSequence::new(clouds, annotations))
}

pub const FRAME_MAGIC: &[u8; 4] = b"SMFF";
pub const FRAME_VERSION: u32 = 1;

pub fn encode_frame(cloud: &PointCloud, boxes: &[BoundingBox3D]) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(FRAME_MAGIC)
        .u32(FRAME_VERSION)
        .u32(cloud.frame_index)
        .u32(cloud.points.len() as u32)
        .u32(boxes.len() as u32);
    for p in &cloud.points {
        w.f32(p.x as f32)
            .f32(p.y as f32)
            .f32(p.z as f32)
            .f32(p.intensity as f32);
    }
    for b in boxes {
        w.u64(b.track_id).u32(b.class_id);
        for v in [
            b.center[0],
            b.center[1],
            b.center[2],
            b.size[0],
            b.size[1],
            b.size[2],
            b.yaw,
        ] {
            w.f32(v as f32);
        }
    }
    w.into_bytes()
}

pub fn decode_frame(bytes: &[u8]) -> Result<(PointCloud, Vec<BoundingBox3D>), FormatError> {
    let mut r = ByteReader::new(bytes);
    r.magic(FRAME_MAGIC)?;
    r.version(FRAME_VERSION)?;
    let frame_index = r.u32()?;
    let count_at = r.offset();
    let n_points = r.u32()? as usize;
    let n_boxes = r.u32()? as usize;
    let needed = n_points
        .checked_mul(16)
        .and_then(|a| n_boxes.checked_mul(40).and_then(|b| a.checked_add(b)));
    if needed.is_none_or(|n| n > r.remaining()) {
        return Err(FormatError::Invalid {
            offset: count_at,
            field: "point/box count",
            reason: format!(
                "{n_points} points and {n_boxes} boxes exceed the {} remaining bytes",
                r.remaining()
            ),
        });
    }
    let mut points = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let (x, y, z, i) = (r.f32()?, r.f32()?, r.f32()?, r.f32()?);
        points.push(Point3::new(x as f64, y as f64, z as f64, i as f64));
    }
    let mut boxes = Vec::with_capacity(n_boxes);
    for _ in 0..n_boxes {
        let at = r.offset();
        let track_id = r.u64()?;
        let class_id = r.u32()?;
        let mut v = [0.0f64; 7];
        for slot in &mut v {
            *slot = r.f32()? as f64;
        }
        let b = BoundingBox3D::new([v[0], v[1], v[2]], [v[3], v[4], v[5]], v[6], class_id, track_id).map_err(|e| {
            FormatError::Invalid {
                offset: at,
                field: "box",
                reason: e.to_string(),
            }
        })?;
        boxes.push(b);
    }
    r.finish()?;
    Ok((PointCloud::new(frame_index, points), boxes))
}

pub fn frame_file_name(frame_index: u32) -> String {
    format!("frame_{frame_index:04}.smff")
}

pub fn write_frame(path: impl AsRef<Path>, cloud: &PointCloud, boxes: &[BoundingBox3D]) -> Result<(), FormatError> {
    std::fs::write(path, encode_frame(cloud, boxes))?;
    Ok(())
}

pub fn read_frame(path: impl AsRef<Path>) -> Result<(PointCloud, Vec<BoundingBox3D>), FormatError> {
    decode_frame(&std::fs::read(path)?)
}

pub fn write_sequence(dir: impl AsRef<Path>, seq: &FrameSequence) -> Result<(), FormatError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (cloud, boxes) in seq.frames.iter().zip(&seq.annotations) {
        write_frame(dir.join(frame_file_name(cloud.frame_index)), cloud, boxes)?;
    }
    Ok(())
}

/// Frame files in a directory, sorted by name.
pub fn frame_files(dir: impl AsRef<Path>) -> std::io::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "smff"))
        .collect();
    files.sort();
    Ok(files)
}

pub fn read_sequence(dir: impl AsRef<Path>) -> Result<FrameSequence, SynthError> {
    let dir = dir.as_ref();
    let files = frame_files(dir).map_err(FormatError::from)?;
    if files.is_empty() {
        return Err(SynthError::EmptyDirectory(dir.to_path_buf()));
    }
    let mut frames = Vec::with_capacity(files.len());
    for f in files {
        let fr = read_frame(&f).map_err(|source| SynthError::File {
            path: f.clone(),
            source,
        })?;
        frames.push(fr);
    }
    frames.sort_by_key(|(c, _)| c.frame_index);
    let (clouds, boxes) = frames.into_iter().unzip();
    Ok(FrameSequence::new(clouds, boxes))
}

/// Fraction of occupied bins over the four lateral faces of a box of `size`
/// (w, l, h), given points in its canonical frame. Each face is split into
/// `bins.0` columns along its horizontal extent and `bins.1` rows along
/// height; a point belongs to the face whose plane is nearest, if within `tol`.
pub fn lateral_face_coverage(points: &[Point3], size: [f64; 3], bins: (usize, usize), tol: f64) -> f64 {
    let half = [size[1] / 2.0, size[0] / 2.0, size[2] / 2.0];
    let (nu, nv) = bins;
    let mut occupied = vec![false; 4 * nu * nv];
    for p in points {
        let q = p.xyz();
        if q[2].abs() > half[2] {
            continue;
        }
        // lateral faces: (axis, sign) for ±x then ±y
        let cands = [(0usize, 1.0f64), (0, -1.0), (1, 1.0), (1, -1.0)];
        let (fi, &(axis, _), d) = cands
            .iter()
            .enumerate()
            .map(|(i, c)| (i, c, (q[c.0] - c.1 * half[c.0]).abs()))
            .min_by(|a, b| a.2.total_cmp(&b.2))
            .expect("four faces");
        if d > tol {
            continue;
        }
        let ua = 1 - axis;
        let u = ((q[ua] + half[ua]) / (2.0 * half[ua]) * nu as f64).floor();
        let v = ((q[2] + half[2]) / (2.0 * half[2]) * nv as f64).floor();
        if u < 0.0 || v < 0.0 {
            continue;
        }
        let (u, v) = ((u as usize).min(nu - 1), (v as usize).min(nv - 1));
        occupied[(fi * nu + u) * nv + v] = true;
    }
    occupied.iter().filter(|&&o| o).count() as f64 / occupied.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cube_due_north_shows_one_side() {
        let b = BoundingBox3D::new([0.0, 10.0, 0.5], [1.0, 1.0, 1.0], 0.0, 0, 1).unwrap();
        let faces = visible_faces(&b, [0.0, 0.0, 1.8]);
        // the −y side faces the sensor and the top is seen from above
        assert_eq!(faces, vec![(1, -1.0), (2, 1.0)]);
        let lateral = faces.iter().filter(|f| f.0 != 2).count();
        assert!((1..=2).contains(&lateral));
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut s = orbit_scene(1, 10, 8.0);
        s.sensor.dropout = 1.0;
        assert!(generate_sequence(&s, Exec::Sequential).is_err());
        s.sensor.dropout = 0.0;
        s.num_frames = 0;
        assert!(generate_sequence(&s, Exec::Sequential).is_err());
    }

    #[test]
    fn empty_frame_round_trips() {
        let bytes = encode_frame(&PointCloud::new(3, vec![]), &[]);
        assert_eq!(bytes.len(), 20);
        let (c, b) = decode_frame(&bytes).unwrap();
        assert_eq!(c.frame_index, 3);
        assert!(c.points.is_empty() && b.is_empty());
    }

    #[test]
    fn coverage_counts_bins() {
        let size = [2.0, 4.0, 2.0];
        // one point on the +x face center and one on the −y face corner
        let pts = [Point3::new(1.99, 0.0, 0.0, 0.0), Point3::new(-1.9, -0.99, -0.9, 0.0)];
        let c = lateral_face_coverage(&pts, size, (2, 2), 0.05);
        assert_eq!(c, 2.0 / 16.0);
    }
}
