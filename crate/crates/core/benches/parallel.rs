//! Sequential vs rayon execution of the data-parallel stages.
//! With `--no-default-features` both variants run sequentially.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mfkd::config::{RunConfig, TeacherKind};
use mfkd::experiment::{benchmark_scene, evaluate_model, init_student, prepare_sequence, Split};
use mfkd::fusion::fuse_sequence;
use mfkd::par::Exec;
use mfkd::synth::generate_sequence;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.frames = 10;
    cfg
}

fn stages(c: &mut Criterion) {
    let cfg = config();
    let spec = benchmark_scene(&cfg, Split::Train, 0);
    let seq = generate_sequence(&spec, Exec::Parallel).unwrap();
    let fused = fuse_sequence(&seq, &cfg.fusion, Exec::Parallel).unwrap();
    let frames = prepare_sequence(&seq, &fused, &cfg.model).unwrap();
    let (det, store) = init_student(&cfg.model, 1).unwrap();

    let mut g = c.benchmark_group("stages");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new("generate", name), &exec, |b, &e| {
            b.iter(|| generate_sequence(&spec, e).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("fuse", name), &exec, |b, &e| {
            b.iter(|| fuse_sequence(&seq, &cfg.fusion, e).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("eval", name), &exec, |b, &e| {
            b.iter(|| evaluate_model(&det, &store, &frames, TeacherKind::SingleFrame, &cfg, e).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, stages);
criterion_main!(benches);
