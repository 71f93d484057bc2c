use mfkd::backbone::{voxelize, ModelConfig};
use mfkd::distill::select_and_match_voxels;
use mfkd::fusion::{assemble_multiframe, fuse_object_traced, fuse_sequence, FusionParams};
use mfkd::geom::canonical_transform;
use mfkd::par::{with_jobs, Exec};
use mfkd::synth::{default_classes, generate_sequence, lateral_face_coverage, orbit_scene, random_scene};

const BINS: (usize, usize) = (8, 4);
const TOL: f64 = 0.05;

#[test]
fn orbit_fusion_covers_all_sides() {
    let seq = generate_sequence(&orbit_scene(5, 20, 7.0), Exec::Sequential).unwrap();
    let params = FusionParams::default();
    let mut worst_single = 0.0f64;
    for (k, frame) in seq.frames.iter().enumerate() {
        let b = seq.annotations[k][0];
        let inside: Vec<_> = canonical_transform(&frame.points, &b)
            .into_iter()
            .filter(|p| b.contains_canonical(p.xyz(), 0.0))
            .collect();
        worst_single = worst_single.max(lateral_face_coverage(&inside, b.size, BINS, TOL));
    }
    let track = seq.annotations[0][0].track_id;
    let (obj, trace) = fuse_object_traced(track, 0, &seq, &params).unwrap();
    let fused = lateral_face_coverage(&obj.points, obj.reference.size, BINS, TOL);
    println!("fused coverage {fused:.3}, best single frame {worst_single:.3}, trace {trace:?}");
    assert!(fused >= 0.9, "fused coverage {fused}");
    assert!(worst_single <= 0.55, "single-frame coverage {worst_single}");
}

#[test]
fn fusion_budget_accounting() {
    let seq = generate_sequence(&orbit_scene(2, 12, 6.0), Exec::Sequential).unwrap();
    let track = seq.annotations[0][0].track_id;
    let (obj, t) = fuse_object_traced(track, 3, &seq, &FusionParams::default()).unwrap();
    assert_eq!(t.group_targets.len(), 2);
    assert!(t.sampled <= t.group_targets.iter().sum::<usize>());
    assert!(t.denoised <= t.sampled && t.subsampled <= t.denoised);
    assert_eq!(obj.points.len(), t.subsampled);
}

#[test]
fn single_frame_is_prefix_and_voxels_match() {
    let cfg = ModelConfig::bench();
    let params = FusionParams::default();
    for seed in 0..6 {
        let spec = random_scene(seed, 10, 6, cfg.grid.range, &default_classes());
        let seq = generate_sequence(&spec, Exec::Sequential).unwrap();
        let fused = fuse_sequence(&seq, &params, Exec::Sequential).unwrap();
        for (k, frame) in seq.frames.iter().enumerate() {
            let multi = assemble_multiframe(frame, &seq.annotations[k], &fused[k]).unwrap();
            assert_eq!(&multi.points[..frame.points.len()], &frame.points[..]);
            let s = voxelize(frame, &cfg.grid);
            let t = voxelize(&multi, &cfg.grid);
            let pairs = select_and_match_voxels(&s, &t, &seq.annotations[k], 0.8).unwrap();
            for p in pairs {
                assert_eq!(s.coords[p.student_row], t.coords[p.teacher_row]);
            }
        }
    }
}

#[test]
fn fusion_independent_of_worker_count() {
    let spec = random_scene(11, 10, 6, 16.0, &default_classes());
    let seq = generate_sequence(&spec, Exec::Sequential).unwrap();
    let params = FusionParams::default();
    let base = fuse_sequence(&seq, &params, Exec::Sequential).unwrap();
    for jobs in [1, 3, 8] {
        let seq2 = with_jobs(Some(jobs), || generate_sequence(&spec, Exec::Parallel)).unwrap();
        assert_eq!(seq2, seq);
        let out = with_jobs(Some(jobs), || fuse_sequence(&seq, &params, Exec::Parallel)).unwrap();
        assert_eq!(out, base, "jobs = {jobs}");
    }
}
