//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass criterion numbers to run a subset:
//! `cargo test -p mfkd --test acceptance -- 1 4 9`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use mfkd::backbone::{voxelize, Detector, ModelConfig, MsRpn, RawRpn, RpnKind};
use mfkd::config::{RunConfig, TeacherKind};
use mfkd::distill::{adaptive_weights, select_and_match_voxels};
use mfkd::eval::evaluate;
use mfkd::experiment::{
    build_benchmark, evaluate_model, init_student, mean_std, pretrain_teacher, run_ablation, train_student,
    AblationResult, Arm,
};
use mfkd::fusion::{
    assemble_multiframe, decode_fused, encode_fused, farthest_point_sampling, fuse_object_traced, fuse_sequence,
    grid_subsample, FusionParams,
};
use mfkd::geom::{canonical_transform, iou_3d, rotated_iou_bev};
use mfkd::gradsuite::run_suite;
use mfkd::par::{with_jobs, Exec};
use mfkd::rng::Rng;
use mfkd::synth::{
    decode_frame, default_classes, encode_frame, generate_sequence, lateral_face_coverage, orbit_scene, random_scene,
};
use mfkd::tensor::checkpoint;

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(t: Instant, limit: Duration) -> Result<(), String> {
    ensure(t.elapsed() <= limit, || {
        format!("took {:.1?}, budget {limit:?}", t.elapsed())
    })
}

fn weight_sums() -> Outcome {
    let t = Instant::now();
    let mut rng = Rng::new(0xACC1);
    let mut worst: f64 = 0.0;
    let mut check = |scores: &[f64], losses: &[f64]| -> Result<(), String> {
        let total: f64 = losses.iter().sum();
        let w = adaptive_weights(scores, losses).ok_or("no weights for positive scores")?;
        let weighted: f64 = w.iter().zip(losses).map(|(w, l)| w * l).sum();
        let dev = (weighted - total).abs();
        worst = worst.max(dev);
        ensure(dev <= 1e-9, || format!("Σ wL = {weighted} vs Σ L = {total}"))
    };
    for _ in 0..1000 {
        // classification: teacher heatmap scores h
        let n = 1 + rng.below(256);
        let h: Vec<f64> = (0..n).map(|_| rng.uniform().max(1e-6)).collect();
        let l: Vec<f64> = (0..n).map(|_| rng.uniform() * 5.0).collect();
        check(&h, &l)?;
    }
    for _ in 0..1000 {
        // regression: IoU between a teacher box and a perturbed student box
        let n = 1 + rng.below(64);
        let mut iou = Vec::with_capacity(n);
        for _ in 0..n {
            let (a, b) = common::random_pair(&mut rng);
            iou.push(iou_3d(&a, &b).max(1e-3));
        }
        let l: Vec<f64> = (0..n).map(|_| rng.uniform() * 2.0).collect();
        check(&iou, &l)?;
    }
    within(t, Duration::from_secs(1))?;
    Ok(format!("2000 configurations, worst |Σ wL - Σ L| = {worst:.1e}"))
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let results = run_suite();
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} ({:.2e})", r.name, r.max_rel_error()))
        .collect();
    ensure(failed.is_empty(), || format!("failed: {}", failed.join(", ")))?;
    within(t, Duration::from_secs(120))?;
    let worst = results.iter().map(|r| r.max_rel_error()).fold(0.0, f64::max);
    Ok(format!("{} checks, worst rel err {worst:.2e}", results.len()))
}

fn oracles() -> Outcome {
    let mut rng = Rng::new(0xACC3);
    for trial in 0..300 {
        let n = 1 + rng.below(64);
        let pts = common::cloud(&mut rng, n, trial % 2 == 0);
        let k = 1 + rng.below(n + 3);
        let seed = rng.below(1000);
        ensure(
            farthest_point_sampling(&pts, k, seed) == common::exhaustive_fps(&pts, k, seed),
            || format!("FPS differs on trial {trial}"),
        )?;
    }
    for trial in 0..200 {
        let n = rng.below(400);
        let pts = common::cloud(&mut rng, n, trial % 3 == 0);
        let voxel = [rng.range(0.05, 0.6), rng.range(0.05, 0.6), rng.range(0.05, 0.6)];
        let cap = 1 + rng.below(6);
        let got = grid_subsample(&pts, voxel, cap).map_err(|e| e.to_string())?;
        ensure(got == common::bucket_subsample(&pts, voxel, cap), || {
            format!("subsample differs on trial {trial}")
        })?;
    }
    let mut mc = Rng::new(0xACC4);
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let (a, b) = common::random_pair(&mut rng);
        let bev = i % 2 == 0;
        let exact = if bev { rotated_iou_bev(&a, &b) } else { iou_3d(&a, &b) };
        let est = common::monte_carlo_iou(&a, &b, 1_000_000, &mut mc, bev);
        worst = worst.max((exact - est).abs());
    }
    ensure(worst < 0.01, || format!("IoU off by {worst}"))?;
    let (frame, cfg, ap, aph) = common::hand_ap_scene();
    let c = evaluate(&[frame], &cfg).classes.remove(0);
    let close = |x: Option<f64>, y: f64| x.is_some_and(|x| (x - y).abs() < 1e-12);
    ensure(close(c.ap_l2, ap) && close(c.aph_l2, aph), || {
        format!("AP {:?} / APH {:?}, expected {ap} / {aph}", c.ap_l2, c.aph_l2)
    })?;
    Ok(format!(
        "FPS 300/300, subsample 200/200, worst IoU error {worst:.4}, AP {ap:.4} APH {aph:.4}"
    ))
}

fn fusion_efficacy() -> Outcome {
    let t = Instant::now();
    let params = FusionParams::default();
    let seq = generate_sequence(&orbit_scene(5, 20, 7.0), Exec::Parallel).map_err(|e| e.to_string())?;
    let (bins, tol) = ((8, 4), 0.05);
    let mut best_single: f64 = 0.0;
    for (k, frame) in seq.frames.iter().enumerate() {
        let b = seq.annotations[k][0];
        let inside: Vec<_> = canonical_transform(&frame.points, &b)
            .into_iter()
            .filter(|p| b.contains_canonical(p.xyz(), 0.0))
            .collect();
        best_single = best_single.max(lateral_face_coverage(&inside, b.size, bins, tol));
    }
    let track = seq.annotations[0][0].track_id;
    let (obj, _) = fuse_object_traced(track, 0, &seq, &params).map_err(|e| e.to_string())?;
    let fused = lateral_face_coverage(&obj.points, obj.reference.size, bins, tol);
    ensure(fused >= 0.9, || format!("fused coverage {fused:.3}"))?;
    ensure(best_single <= 0.55, || {
        format!("single-frame coverage {best_single:.3}")
    })?;

    // every scene of the standard benchmark plus extra random scenes
    let cfg = RunConfig::default();
    let mut specs = Vec::new();
    for i in 0..cfg.data.train_sequences {
        specs.push(mfkd::experiment::benchmark_scene(
            &cfg,
            mfkd::experiment::Split::Train,
            i,
        ));
    }
    for i in 0..cfg.data.eval_sequences {
        specs.push(mfkd::experiment::benchmark_scene(
            &cfg,
            mfkd::experiment::Split::Eval,
            i,
        ));
    }
    for s in 0..4 {
        specs.push(random_scene(0xF00 + s, 10, 8, cfg.model.grid.range, &default_classes()));
    }
    let mut frames = 0;
    let mut pairs = 0;
    for spec in &specs {
        let seq = generate_sequence(spec, Exec::Parallel).map_err(|e| e.to_string())?;
        let fused = fuse_sequence(&seq, &params, Exec::Parallel).map_err(|e| e.to_string())?;
        for (k, frame) in seq.frames.iter().enumerate() {
            let multi = assemble_multiframe(frame, &seq.annotations[k], &fused[k]).map_err(|e| e.to_string())?;
            ensure(multi.points[..frame.points.len()] == frame.points[..], || {
                format!("frame {k}: single-frame points are not a prefix")
            })?;
            let s = voxelize(frame, &cfg.model.grid);
            let m = voxelize(&multi, &cfg.model.grid);
            let matched = select_and_match_voxels(&s, &m, &seq.annotations[k], cfg.distill.context_margin)
                .map_err(|e| format!("voxel matching failed: {e}"))?;
            pairs += matched.len();
            frames += 1;
        }
    }
    within(t, Duration::from_secs(60))?;
    Ok(format!(
        "coverage fused {fused:.3} vs best single {best_single:.3}; prefix and matching hold on {frames} frames ({pairs} voxel pairs)"
    ))
}

fn param_ratio() -> Outcome {
    let t = Instant::now();
    let ms = MsRpn::param_count(256, [64, 128, 256], 64, 128);
    let raw = RawRpn::param_count(256, [128, 256], [1, 2], 5, 256);
    let ratio = ms as f64 / raw as f64;
    ensure(ratio < 0.6, || format!("ratio {ratio:.3}"))?;
    // the closed form agrees with built networks
    for rpn in [RpnKind::MultiScale, RpnKind::Raw] {
        let cfg = ModelConfig {
            rpn,
            ..ModelConfig::desk()
        };
        let (_, store) = Detector::new(cfg.clone(), 0).map_err(|e| e.to_string())?;
        let built = store.num_scalars_with_prefix("rpn.");
        let formula = match rpn {
            RpnKind::MultiScale => {
                MsRpn::param_count(cfg.voxel_channels, cfg.widths, cfg.bottleneck, cfg.fused_channels)
            }
            RpnKind::Raw => RawRpn::param_count(
                cfg.voxel_channels,
                cfg.raw_widths,
                cfg.raw_strides,
                cfg.raw_extra_convs,
                cfg.fused_channels / 2,
            ),
        };
        ensure(built == formula, || {
            format!("{rpn:?}: built {built}, formula {formula}")
        })?;
    }
    within(t, Duration::from_secs(1))?;
    Ok(format!("MS-RPN {ms} / raw RPN {raw} = {ratio:.3}"))
}

/// Shared by criteria 6 and 7.
fn ablation() -> &'static Result<AblationResult, String> {
    static CELL: std::sync::OnceLock<Result<AblationResult, String>> = std::sync::OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = RunConfig::default();
        let bench = build_benchmark(&cfg, Exec::Parallel).map_err(|e| e.to_string())?;
        let arms = [Arm::Baseline, Arm::Voxel, Arm::Bev, Arm::Rsp, Arm::All];
        let result = run_ablation(&cfg, &bench, &arms, Exec::Parallel).map_err(|e| e.to_string())?;
        print!("{}", result.table_csv());
        Ok(result)
    })
}

fn distillation_gain() -> Outcome {
    let t = Instant::now();
    let r = ablation().as_ref().map_err(Clone::clone)?;
    let (base, all, teacher) = (r.mean(Arm::Baseline), r.mean(Arm::All), r.teacher_mean());
    ensure(r.scores(Arm::All).len() == 3, || "expected 3 seeds".into())?;
    ensure(all > base, || {
        format!("distilled {all:.4} does not beat baseline {base:.4}")
    })?;
    ensure(teacher > base, || {
        format!("teacher {teacher:.4} does not beat baseline {base:.4}")
    })?;
    within(t, Duration::from_secs(30 * 60))?;
    Ok(format!(
        "L2 mAPH over 3 seeds: baseline {base:.4}, distilled {all:.4}, multi-frame teacher {teacher:.4}"
    ))
}

fn ablation_sanity() -> Outcome {
    let r = ablation().as_ref().map_err(Clone::clone)?;
    let (base, base_sd) = mean_std(&r.scores(Arm::Baseline));
    let margin = 2.0 * base_sd;
    let mut parts = Vec::new();
    for arm in [Arm::Voxel, Arm::Bev, Arm::Rsp] {
        let m = r.mean(arm);
        ensure(m >= base - margin, || {
            format!("{} {m:.4} below baseline {base:.4} - {margin:.4}", arm.name())
        })?;
        parts.push(format!("{} {m:.4}", arm.name()));
    }
    let best = [Arm::Baseline, Arm::Voxel, Arm::Bev, Arm::Rsp, Arm::All]
        .iter()
        .map(|&a| r.mean(a))
        .fold(f64::MIN, f64::max);
    let all = r.mean(Arm::All);
    ensure(all >= best - margin, || {
        format!("all {all:.4} vs best {best:.4} (margin {margin:.4})")
    })?;
    Ok(format!(
        "margin {margin:.4}; {}; all {all:.4} (best {best:.4})",
        parts.join(", ")
    ))
}

fn golden(name: &str) -> Result<Vec<u8>, String> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name);
    std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))
}

/// Decode then re-encode; `None` when the decoder rejects the bytes.
fn reencode(name: &str, bytes: &[u8]) -> Option<Vec<u8>> {
    match name {
        "smff" => decode_frame(bytes).ok().map(|(c, b)| encode_frame(&c, &b)),
        "smfb" => decode_fused(bytes).ok().map(|o| encode_fused(&o)),
        _ => checkpoint::decode(bytes).ok().map(|s| checkpoint::encode(&s)),
    }
}

fn format_fidelity() -> Outcome {
    // full-size artifacts
    let spec = random_scene(21, 10, 6, 12.0, &default_classes());
    let seq = generate_sequence(&spec, Exec::Parallel).map_err(|e| e.to_string())?;
    let fused = fuse_sequence(&seq, &FusionParams::default(), Exec::Parallel).map_err(|e| e.to_string())?;
    let (_, store) = Detector::new(ModelConfig::bench(), 3).map_err(|e| e.to_string())?;
    let mut files = vec![
        ("smff", encode_frame(&seq.frames[7], &seq.annotations[7])),
        ("smfb", encode_fused(&fused[7])),
        ("smfw", checkpoint::encode(&store)),
    ];
    for (kind, bytes) in &files {
        ensure(reencode(kind, bytes).as_deref() == Some(&bytes[..]), || {
            format!("{kind} does not round-trip")
        })?;
    }
    let decoded = checkpoint::decode(&files[2].1).map_err(|e| e.to_string())?;
    for ((_, a, x), (_, b, y)) in store.iter().zip(decoded.iter()) {
        ensure(a == b && x == y, || format!("checkpoint tensor {a} changed"))?;
    }
    // golden files: round trip, then every truncation and a trailing byte
    files = vec![
        ("smff", golden("frame.smff")?),
        ("smfb", golden("fused.smfb")?),
        ("smfw", golden("weights.smfw")?),
    ];
    let mut cuts = 0;
    for (kind, g) in &files {
        ensure(reencode(kind, g).as_deref() == Some(&g[..]), || {
            format!("golden {kind} does not round-trip")
        })?;
        for cut in 0..g.len() {
            let res = catch_unwind(|| reencode(kind, &g[..cut]));
            ensure(matches!(res, Ok(None)), || {
                format!("{kind} truncated at {cut}: not a structured error")
            })?;
            cuts += 1;
        }
        let mut long = g.clone();
        long.push(0);
        ensure(reencode(kind, &long).is_none(), || {
            format!("{kind} accepted a trailing byte")
        })?;
    }
    Ok(format!("3 formats round-trip bit-exactly; {cuts} truncations rejected"))
}

/// Everything one pipeline run writes, as bytes.
#[derive(PartialEq)]
struct PipelineOutput {
    frames: Vec<Vec<u8>>,
    fused: Vec<Vec<u8>>,
    teacher: Vec<u8>,
    student: Vec<u8>,
    report_csv: String,
    report_json: String,
}

fn pipeline(jobs: usize) -> Result<PipelineOutput, String> {
    let mut cfg = RunConfig::default();
    cfg.data.train_sequences = 1;
    cfg.data.eval_sequences = 1;
    cfg.data.frames = 10;
    cfg.train.steps = 8;
    cfg.train.teacher_steps = 8;
    cfg.train.seeds = vec![5];
    with_jobs(Some(jobs), || {
        let e = |e: mfkd::experiment::ExperimentError| e.to_string();
        let mut frames = Vec::new();
        let mut fused_files = Vec::new();
        for split in [mfkd::experiment::Split::Train, mfkd::experiment::Split::Eval] {
            let spec = mfkd::experiment::benchmark_scene(&cfg, split, 0);
            let seq = generate_sequence(&spec, Exec::Parallel).map_err(|e| e.to_string())?;
            let fused = fuse_sequence(&seq, &cfg.fusion, Exec::Parallel).map_err(|e| e.to_string())?;
            frames.extend(seq.frames.iter().zip(&seq.annotations).map(|(c, b)| encode_frame(c, b)));
            fused_files.extend(fused.iter().map(|o| encode_fused(o)));
        }
        let bench = build_benchmark(&cfg, Exec::Parallel).map_err(e)?;
        let (tdet, tout) = pretrain_teacher(&cfg, &bench, 5, TeacherKind::MultiFrame).map_err(e)?;
        let (det, init) = init_student(&cfg.model, 5).map_err(e)?;
        let student = train_student(
            &cfg,
            &det,
            &init,
            &bench,
            Some((&tdet, &tout.store, TeacherKind::MultiFrame)),
            &cfg.distill,
            &cfg.weights,
            5,
            Exec::Parallel,
        )
        .map_err(e)?;
        let report = evaluate_model(
            &det,
            &student.store,
            &bench.eval,
            TeacherKind::SingleFrame,
            &cfg,
            Exec::Parallel,
        )
        .map_err(e)?;
        Ok(PipelineOutput {
            frames,
            fused: fused_files,
            teacher: checkpoint::encode(&tout.store),
            student: checkpoint::encode(&student.store),
            report_csv: report.to_csv(),
            report_json: serde_json::to_string(&report).map_err(|e| e.to_string())?,
        })
    })
}

fn determinism() -> Outcome {
    let a = pipeline(1)?;
    let b = pipeline(8)?;
    ensure(a.frames == b.frames, || "frame files differ".into())?;
    ensure(a.fused == b.fused, || "fused files differ".into())?;
    ensure(a.teacher == b.teacher && a.student == b.student, || {
        "checkpoints differ".into()
    })?;
    ensure(a.report_csv == b.report_csv && a.report_json == b.report_json, || {
        "eval reports differ".into()
    })?;
    Ok(format!(
        "jobs 1 vs 8: {} frame files, {} fused files, checkpoints and eval report identical",
        a.frames.len(),
        a.fused.len()
    ))
}

fn main() {
    let criteria: [Criterion; 9] = [
        (1, "adaptive weights preserve the loss sum", weight_sums),
        (2, "gradient suite", gradient_suite),
        (3, "oracle equivalence", oracles),
        (4, "fusion efficacy", fusion_efficacy),
        (5, "MS-RPN parameter ratio", param_ratio),
        (6, "directional distillation gain", distillation_gain),
        (7, "ablation sanity", ablation_sanity),
        (8, "format fidelity", format_fidelity),
        (9, "determinism across worker counts", determinism),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} {name}: PASS ({secs:.1} s) {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL ({secs:.1} s) {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
