//! Dense per-object fusion across a frame sequence.
//!
//! For a target frame j and a track, member frames are split into groups of
//! consecutive frames. Each group contributes a farthest-point sample of the
//! object's canonical in-box points whose size is the mean per-frame count in
//! that group. The union is denoised and grid-subsampled, then cached in a
//! binary file per frame so the teacher can paste dense objects back into
//! the original sweep.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use mfkd_tensor::wire::{ByteReader, ByteWriter, FormatError};
use thiserror::Error;

use crate::geom::{BoundingBox3D, Point3, PointCloud};
use crate::par::{self, Exec};
use crate::rng::derive_seed;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("track {track} not in frame {frame}")]
    TrackNotInFrame { track: u64, frame: u32 },
    #[error("invalid fusion parameter: {0}")]
    InvalidParam(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Frames in temporal order with per-frame annotations.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameSequence {
    pub frames: Vec<PointCloud>,
    pub annotations: Vec<Vec<BoundingBox3D>>,
}

impl FrameSequence {
    pub fn new(frames: Vec<PointCloud>, annotations: Vec<Vec<BoundingBox3D>>) -> Self {
        assert_eq!(frames.len(), annotations.len(), "one annotation list per frame");
        FrameSequence { frames, annotations }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Box of `track` in the frame at position `pos`.
    pub fn box_of(&self, pos: usize, track: u64) -> Option<&BoundingBox3D> {
        self.annotations[pos].iter().find(|b| b.track_id == track)
    }
}

/// Group `t` (1-based) covers frame positions `frames`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameGroup {
    pub index: usize,
    pub frames: Range<usize>,
}

impl FrameGroup {
    /// First member frame, 1-based: `group_size·t − group_size + 1`.
    pub fn first_frame_1based(&self) -> usize {
        self.frames.start + 1
    }
}

/// `⌊n/group_size⌋` groups of consecutive frames; the remainder is dropped.
pub fn group_frames(n_frames: usize, group_size: usize) -> Result<Vec<FrameGroup>, FusionError> {
    if group_size == 0 {
        return Err(FusionError::InvalidParam("group size must be at least 1".into()));
    }
    Ok((0..n_frames / group_size)
        .map(|t| FrameGroup {
            index: t + 1,
            frames: t * group_size..(t + 1) * group_size,
        })
        .collect())
}

/// In-box point count of `track` per group frame, `None` where it is absent.
fn group_counts(track: u64, group: &FrameGroup, seq: &FrameSequence) -> Vec<Option<usize>> {
    group
        .frames
        .clone()
        .map(|k| {
            seq.box_of(k, track)
                .map(|b| seq.frames[k].points.iter().filter(|p| b.contains(p.xyz(), 0.0)).count())
        })
        .collect()
}

/// Rounded mean count over the frames of the group where the track appears.
pub fn mean_of_present(counts: &[Option<usize>]) -> usize {
    let present: Vec<usize> = counts.iter().flatten().copied().collect();
    if present.is_empty() {
        return 0;
    }
    (present.iter().sum::<usize>() as f64 / present.len() as f64).round() as usize
}

pub fn avg_points_per_frame(track: u64, group: &FrameGroup, seq: &FrameSequence) -> usize {
    mean_of_present(&group_counts(track, group, seq))
}

/// Greedy max-min subsampling starting at `seed_index`; ties go to the lowest
/// index. Asking for more than `points.len()` returns every index.
pub fn farthest_point_sampling(points: &[Point3], k: usize, seed_index: usize) -> Vec<usize> {
    let n = points.len();
    if n == 0 || k == 0 {
        return Vec::new();
    }
    let k = k.min(n);
    let first = seed_index % n;
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut cur = first;
    loop {
        chosen.push(cur);
        taken[cur] = true;
        if chosen.len() == k {
            break;
        }
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let d = points[i].dist2(&points[cur]);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        cur = best;
    }
    chosen
}

const DENOISE_NEIGHBORS: usize = 8;

/// Mean distance from each point to its 8 nearest neighbours.
pub fn knn_mean_distance(points: &[Point3]) -> Vec<f64> {
    let k = DENOISE_NEIGHBORS.min(points.len().saturating_sub(1));
    let mut buf = Vec::with_capacity(points.len());
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            buf.clear();
            buf.extend(
                points
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, q)| p.dist2(q)),
            );
            if k == 0 {
                return 0.0;
            }
            buf.select_nth_unstable_by(k - 1, f64::total_cmp);
            buf[..k].iter().map(|d| d.sqrt()).sum::<f64>() / k as f64
        })
        .collect()
}

/// Statistical outlier removal: drop the `⌈fraction·n⌉` points with the
/// largest mean neighbour distance. Clouds of 9 points or fewer pass through.
pub fn denoise(points: &[Point3], fraction: f64) -> Result<Vec<Point3>, FusionError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(FusionError::InvalidParam(format!(
            "denoise fraction {fraction} outside [0, 1)"
        )));
    }
    let n = points.len();
    if n <= DENOISE_NEIGHBORS + 1 {
        return Ok(points.to_vec());
    }
    // the small slack keeps e.g. 0.005·1000 from rounding up to 6
    let remove = (fraction * n as f64 - 1e-9).ceil().max(0.0) as usize;
    if remove == 0 {
        return Ok(points.to_vec());
    }
    let score = knn_mean_distance(points);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    let mut drop = vec![false; n];
    for &i in &order[..remove] {
        drop[i] = true;
    }
    Ok(points.iter().zip(drop).filter(|(_, d)| !d).map(|(p, _)| *p).collect())
}

pub fn voxel_key(p: &Point3, voxel: [f64; 3]) -> (i64, i64, i64) {
    (
        (p.x / voxel[0]).floor() as i64,
        (p.y / voxel[1]).floor() as i64,
        (p.z / voxel[2]).floor() as i64,
    )
}

/// Keep at most `max_per_voxel` points per grid cell, earliest first.
pub fn grid_subsample(points: &[Point3], voxel: [f64; 3], max_per_voxel: usize) -> Result<Vec<Point3>, FusionError> {
    if voxel.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(FusionError::InvalidParam(format!(
            "voxel size {voxel:?} must be positive"
        )));
    }
    let mut counts: HashMap<(i64, i64, i64), usize> = HashMap::new();
    Ok(points
        .iter()
        .filter(|p| {
            let c = counts.entry(voxel_key(p, voxel)).or_insert(0);
            *c += 1;
            *c <= max_per_voxel
        })
        .copied()
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub group_size: usize,
    pub voxel: [f64; 3],
    pub max_per_voxel: usize,
    pub denoise: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams {
            group_size: 5,
            voxel: [0.1, 0.1, 0.15],
            max_per_voxel: 5,
            denoise: 0.005,
        }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<(), FusionError> {
        if self.group_size == 0 || self.max_per_voxel == 0 {
            return Err(FusionError::InvalidParam(
                "group size and max points per voxel must be ≥ 1".into(),
            ));
        }
        if self.voxel.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(FusionError::InvalidParam(format!(
                "voxel size {:?} must be positive",
                self.voxel
            )));
        }
        if !(0.0..1.0).contains(&self.denoise) {
            return Err(FusionError::InvalidParam(format!(
                "denoise fraction {} outside [0, 1)",
                self.denoise
            )));
        }
        Ok(())
    }
}

/// A dense object in its own canonical frame, posed by `reference`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedObject {
    pub track_id: u64,
    pub reference: BoundingBox3D,
    pub points: Vec<Point3>,
}

/// Per-stage sizes of one fusion, for accounting checks.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FusionTrace {
    pub group_targets: Vec<usize>,
    pub sampled: usize,
    pub denoised: usize,
    pub subsampled: usize,
}

pub fn fuse_object(
    track: u64,
    target: usize,
    seq: &FrameSequence,
    params: &FusionParams,
) -> Result<FusedObject, FusionError> {
    fuse_object_traced(track, target, seq, params).map(|(o, _)| o)
}

pub fn fuse_object_traced(
    track: u64,
    target: usize,
    seq: &FrameSequence,
    params: &FusionParams,
) -> Result<(FusedObject, FusionTrace), FusionError> {
    params.validate()?;
    let reference = *seq.box_of(target, track).ok_or(FusionError::TrackNotInFrame {
        track,
        frame: seq.frames.get(target).map_or(target as u32, |f| f.frame_index),
    })?;
    let mut trace = FusionTrace::default();
    let mut fused = Vec::new();
    for group in group_frames(seq.len(), params.group_size)? {
        let mut pooled = Vec::new();
        let mut counts = Vec::with_capacity(params.group_size);
        for k in group.frames.clone() {
            let Some(b) = seq.box_of(k, track) else {
                counts.push(None);
                continue;
            };
            let before = pooled.len();
            for p in &seq.frames[k].points {
                let q = b.to_canonical(p.xyz());
                if b.contains_canonical(q, 0.0) {
                    pooled.push(Point3::new(q[0], q[1], q[2], p.intensity).quantized());
                }
            }
            counts.push(Some(pooled.len() - before));
        }
        let n_t = mean_of_present(&counts);
        trace.group_targets.push(n_t);
        if pooled.is_empty() || n_t == 0 {
            continue;
        }
        let seed = derive_seed(track, &[target as u64, group.index as u64]);
        let start = (seed % pooled.len() as u64) as usize;
        for i in farthest_point_sampling(&pooled, n_t, start) {
            fused.push(pooled[i]);
        }
    }
    trace.sampled = fused.len();
    let fused = denoise(&fused, params.denoise)?;
    trace.denoised = fused.len();
    let fused = grid_subsample(&fused, params.voxel, params.max_per_voxel)?;
    trace.subsampled = fused.len();
    Ok((
        FusedObject {
            track_id: track,
            reference,
            points: fused,
        },
        trace,
    ))
}

/// Fuse every annotated object of every frame. Work items are independent,
/// so the result is the same for any worker count.
pub fn fuse_sequence(
    seq: &FrameSequence,
    params: &FusionParams,
    exec: Exec,
) -> Result<Vec<Vec<FusedObject>>, FusionError> {
    params.validate()?;
    let items: Vec<(usize, u64)> = seq
        .annotations
        .iter()
        .enumerate()
        .flat_map(|(j, boxes)| boxes.iter().map(move |b| (j, b.track_id)))
        .collect();
    let fused = par::map(exec, &items, |&(j, track)| fuse_object(track, j, seq, params));
    let mut out: Vec<Vec<FusedObject>> = vec![Vec::new(); seq.len()];
    for ((j, _), f) in items.iter().zip(fused) {
        out[*j].push(f?);
    }
    Ok(out)
}

/// The original sweep followed by every fused object posed in this frame.
pub fn assemble_multiframe(
    frame: &PointCloud,
    boxes: &[BoundingBox3D],
    fused: &[FusedObject],
) -> Result<PointCloud, FusionError> {
    let extra: usize = fused.iter().map(|o| o.points.len()).sum();
    let mut points = Vec::with_capacity(frame.points.len() + extra);
    points.extend_from_slice(&frame.points);
    for obj in fused {
        let b = boxes
            .iter()
            .find(|b| b.track_id == obj.track_id)
            .ok_or(FusionError::TrackNotInFrame {
                track: obj.track_id,
                frame: frame.frame_index,
            })?;
        points.extend(obj.points.iter().map(|p| {
            let [x, y, z] = b.from_canonical(p.xyz());
            Point3::new(x, y, z, p.intensity).quantized()
        }));
    }
    Ok(PointCloud::new(frame.frame_index, points))
}

pub const FUSED_MAGIC: &[u8; 4] = b"SMFB";
pub const FUSED_VERSION: u32 = 1;
const FUSED_OBJECT_HEADER: usize = 8 + 7 * 4 + 4 + 4;

pub fn encode_fused(objects: &[FusedObject]) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(FUSED_MAGIC).u32(FUSED_VERSION).u32(objects.len() as u32).u32(0);
    for o in objects {
        let b = &o.reference;
        w.u64(o.track_id);
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
        w.u32(b.class_id).u32(o.points.len() as u32);
        for p in &o.points {
            w.f32(p.x as f32)
                .f32(p.y as f32)
                .f32(p.z as f32)
                .f32(p.intensity as f32);
        }
    }
    w.into_bytes()
}

pub fn decode_fused(bytes: &[u8]) -> Result<Vec<FusedObject>, FormatError> {
    let mut r = ByteReader::new(bytes);
    r.magic(FUSED_MAGIC)?;
    r.version(FUSED_VERSION)?;
    let count = r.count(FUSED_OBJECT_HEADER, "object_count")?;
    let reserved_at = r.offset();
    let reserved = r.u32()?;
    if reserved != 0 {
        return Err(FormatError::Invalid {
            offset: reserved_at,
            field: "reserved",
            reason: format!("expected 0, found {reserved}"),
        });
    }
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.offset();
        let track_id = r.u64()?;
        let mut v = [0.0f64; 7];
        for slot in &mut v {
            *slot = r.f32()? as f64;
        }
        let class_id = r.u32()?;
        let reference =
            BoundingBox3D::new([v[0], v[1], v[2]], [v[3], v[4], v[5]], v[6], class_id, track_id).map_err(|e| {
                FormatError::Invalid {
                    offset: at + 8,
                    field: "box",
                    reason: e.to_string(),
                }
            })?;
        let n = r.count(16, "point_count")?;
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            let (x, y, z, i) = (r.f32()?, r.f32()?, r.f32()?, r.f32()?);
            points.push(Point3::new(x as f64, y as f64, z as f64, i as f64));
        }
        objects.push(FusedObject {
            track_id,
            reference,
            points,
        });
    }
    r.finish()?;
    Ok(objects)
}

pub fn fused_file_name(frame_index: u32) -> String {
    format!("fused_{frame_index:04}.smfb")
}

pub fn write_fused_file(path: impl AsRef<Path>, objects: &[FusedObject]) -> Result<(), FormatError> {
    std::fs::write(path, encode_fused(objects))?;
    Ok(())
}

pub fn read_fused_file(path: impl AsRef<Path>) -> Result<Vec<FusedObject>, FormatError> {
    decode_fused(&std::fs::read(path)?)
}
