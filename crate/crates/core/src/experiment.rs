//! Benchmark construction, training loops, evaluation and the ablation grid.

use mfkd_tensor::{cosine_lr, GradAccumulator, Graph, ParamStore, Params, Sgd, Tensor};
use serde::Serialize;
use thiserror::Error;

use crate::backbone::{
    bind, build_targets, decode_detections, supervised_loss, voxelize, Detector, ModelConfig, ModelError,
    SparseVoxelGrid, Targets,
};
use crate::config::{DistillSwitches, RunConfig, TeacherKind, TrainConfig};
use crate::distill::{
    adaptive_cls_loss, adaptive_reg_loss, bev_distill_loss, bev_mask, foreground_mask, gather_cells_tensor,
    select_and_match_voxels, spatial_cells, total_loss, voxel_distill_loss, DistillError, DistillModules,
    DistillWeights, LossValues, LossVars, TeacherTargets,
};
use crate::eval::{evaluate, EvalConfig, EvalReport, FrameEval};
use crate::fusion::{assemble_multiframe, fuse_sequence, FrameSequence, FusedObject, FusionError};
use crate::geom::BoundingBox3D;
use crate::par::{self, Exec};
use crate::rng::{derive_seed, Rng};
use crate::synth::{default_classes, generate_sequence, random_scene, SceneSpec, SynthError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Tensor(#[from] mfkd_tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Scene `index` of a split of the synthetic benchmark.
pub fn benchmark_scene(cfg: &RunConfig, split: Split, index: usize) -> SceneSpec {
    let key = match split {
        Split::Train => 1,
        Split::Eval => 2,
    };
    let seed = derive_seed(cfg.data.seed, &[key, index as u64]);
    let mut spec = random_scene(
        seed,
        cfg.data.frames,
        cfg.data.objects,
        cfg.model.grid.range,
        &default_classes(),
    );
    spec.sensor.max_range = cfg.model.grid.range * 1.5;
    spec
}

/// One frame ready for training or evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedFrame {
    pub single: SparseVoxelGrid,
    pub multi: SparseVoxelGrid,
    /// Every annotated box and its single-frame point count.
    pub gts: Vec<BoundingBox3D>,
    pub gt_points: Vec<usize>,
    /// Supervision from boxes with at least one point.
    pub targets: Targets,
    pub boxes: Vec<BoundingBox3D>,
}

impl PreparedFrame {
    pub fn grid(&self, input: TeacherKind) -> &SparseVoxelGrid {
        match input {
            TeacherKind::MultiFrame => &self.multi,
            TeacherKind::SingleFrame => &self.single,
        }
    }
}

pub fn prepare_sequence(
    seq: &FrameSequence,
    fused: &[Vec<FusedObject>],
    model: &ModelConfig,
) -> Result<Vec<PreparedFrame>> {
    let mut out = Vec::with_capacity(seq.len());
    for (k, frame) in seq.frames.iter().enumerate() {
        let gts = seq.annotations[k].clone();
        let multi_cloud = assemble_multiframe(frame, &gts, &fused[k])?;
        let gt_points: Vec<usize> = gts
            .iter()
            .map(|b| frame.points.iter().filter(|p| b.contains(p.xyz(), 0.0)).count())
            .collect();
        let boxes: Vec<BoundingBox3D> = gts
            .iter()
            .zip(&gt_points)
            .filter(|(_, &n)| n > 0)
            .map(|(b, _)| *b)
            .collect();
        out.push(PreparedFrame {
            single: voxelize(frame, &model.grid),
            multi: voxelize(&multi_cloud, &model.grid),
            targets: build_targets(&boxes, &model.grid, model.num_classes),
            gts,
            gt_points,
            boxes,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub train: Vec<PreparedFrame>,
    pub eval: Vec<PreparedFrame>,
}

/// Generate, fuse and voxelize every sequence of the benchmark.
pub fn build_benchmark(cfg: &RunConfig, exec: Exec) -> Result<Benchmark> {
    let build = |split: Split, n: usize| -> Result<Vec<PreparedFrame>> {
        let mut frames = Vec::new();
        for i in 0..n {
            let seq = generate_sequence(&benchmark_scene(cfg, split, i), exec)?;
            let fused = fuse_sequence(&seq, &cfg.fusion, exec)?;
            frames.extend(prepare_sequence(&seq, &fused, &cfg.model)?);
        }
        Ok(frames)
    };
    Ok(Benchmark {
        train: build(Split::Train, cfg.data.train_sequences)?,
        eval: build(Split::Eval, cfg.data.eval_sequences)?,
    })
}

/// Teacher-side quantities for one training frame.
pub fn teacher_targets(
    teacher: &Detector,
    store: &ParamStore,
    input: TeacherKind,
    frame: &PreparedFrame,
    tau: f64,
    margin: f64,
) -> Result<TeacherTargets> {
    let tgrid = frame.grid(input);
    let mut g = Graph::new();
    let ws = bind(&mut g, &Params::frozen(store));
    let out = teacher.forward(&mut g, &ws, tgrid)?;
    let pairs = select_and_match_voxels(&frame.single, tgrid, &frame.boxes, margin)?;
    let c = teacher.config.voxel_channels;
    let voxel_features = match out.voxel_features {
        Some(f) if !pairs.is_empty() => {
            let d = g.value(f).data();
            let rows = pairs
                .iter()
                .flat_map(|p| d[p.teacher_row * c..(p.teacher_row + 1) * c].iter().copied())
                .collect();
            Tensor::new(vec![pairs.len(), c], rows)?
        }
        _ => Tensor::zeros(&[0, c]),
    };
    let footprint = bev_mask(&frame.boxes, &teacher.config.grid);
    let levels = out
        .rpn
        .levels
        .iter()
        .map(|&l| gather_cells_tensor(g.value(l), &footprint))
        .collect();
    let fg_mask = foreground_mask(&frame.targets.heatmap, tau);
    let heat = g.sigmoid(out.responses.heat_logits);
    let hv = g.value(heat).data();
    let fg_probs = fg_mask.iter().map(|&i| hv[i]).collect();
    let plane = teacher.config.grid.bev_size().pow(2);
    let fg_cells = spatial_cells(&fg_mask, plane);
    let fg_reg = gather_cells_tensor(g.value(out.responses.reg), &fg_cells);
    Ok(TeacherTargets {
        pairs,
        voxel_features,
        footprint,
        levels,
        fg_mask,
        fg_probs,
        fg_cells,
        fg_reg,
    })
}

/// Distillation inputs for a student run.
pub struct DistillSetup<'a> {
    pub modules: &'a DistillModules,
    pub store: ParamStore,
    pub targets: &'a [TeacherTargets],
    pub switches: DistillSwitches,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub cls: f64,
    pub reg: f64,
    pub vxl: f64,
    pub bev: f64,
    pub rsp_c: f64,
    pub rsp_r: f64,
    pub total: f64,
    pub lr: f64,
    /// Joint gradient norm before clipping.
    pub grad_norm: f64,
}

pub fn loss_log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,L_cls,L_reg,L_vxl,L_bev,L_rsp_c,L_rsp_r,total,lr,grad_norm\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.step, r.cls, r.reg, r.vxl, r.bev, r.rsp_c, r.rsp_r, r.total, r.lr, r.grad_norm
        ));
    }
    s
}

/// Loss for one frame; distillation terms are zero constants when disabled.
pub fn frame_loss(
    g: &mut Graph,
    det: &Detector,
    ws: &[mfkd_tensor::Var],
    grid: &SparseVoxelGrid,
    targets: &Targets,
    distill: Option<(&DistillModules, &[mfkd_tensor::Var], &TeacherTargets, &DistillSwitches)>,
    weights: &DistillWeights,
) -> Result<(mfkd_tensor::Var, LossValues)> {
    let out = det.forward(g, ws, grid)?;
    let (cls, reg) = supervised_loss(g, &out.responses, targets)?;
    let zero = g.constant(Tensor::scalar(0.0));
    let mut parts = LossVars {
        cls,
        reg,
        vxl: zero,
        bev: zero,
        rsp_c: zero,
        rsp_r: zero,
    };
    if let Some((m, mws, t, sw)) = distill {
        if sw.voxel && !t.pairs.is_empty() {
            if let Some(f) = out.voxel_features {
                let rows: Vec<usize> = t.pairs.iter().map(|p| p.student_row).collect();
                let sel = g.gather_rows(f, &rows)?;
                let centers: Vec<[f64; 3]> = t.pairs.iter().map(|p| grid.grid.voxel_center(p.coord)).collect();
                let enc = m.attention.forward(g, mws, sel, &centers)?;
                let tv = g.constant(t.voxel_features.clone());
                parts.vxl = voxel_distill_loss(g, enc, tv)?;
            }
        }
        if sw.bev {
            parts.bev = bev_distill_loss(g, mws, &m.adapters, &out.rpn.levels, &t.levels, &t.footprint)?;
        }
        if sw.rsp {
            parts.rsp_c = adaptive_cls_loss(g, out.responses.heat_logits, &t.fg_probs, &t.fg_mask)?;
            parts.rsp_r = adaptive_reg_loss(g, out.responses.reg, &t.fg_reg, &t.fg_cells, &grid.grid, sw.iou_mode)?;
        }
    }
    Ok(total_loss(g, &parts, weights)?)
}

/// Trained parameters and the per-step loss log.
pub struct TrainOutcome {
    pub store: ParamStore,
    pub modules: Option<ParamStore>,
    pub log: Vec<LogRow>,
}

/// SGD with momentum, cosine schedule and joint gradient-norm clipping.
/// The frame order depends only on `seed`, so arms sharing a seed see the
/// same data in the same order.
#[allow(clippy::too_many_arguments)]
pub fn train(
    det: &Detector,
    mut store: ParamStore,
    frames: &[PreparedFrame],
    input: TeacherKind,
    mut distill: Option<DistillSetup<'_>>,
    weights: &DistillWeights,
    tc: &TrainConfig,
    steps: usize,
    seed: u64,
) -> Result<TrainOutcome> {
    let mut rng = Rng::stream(seed, &[0x0DE4]);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut acc = GradAccumulator::new(&store);
    let mut opt = Sgd::new(&store, tc.momentum, tc.weight_decay);
    let mut macc = distill.as_ref().map(|d| GradAccumulator::new(&d.store));
    let mut mopt = distill
        .as_ref()
        .map(|d| Sgd::new(&d.store, tc.momentum, tc.weight_decay));
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let lr = cosine_lr(step, steps, tc.lr);
        acc.reset();
        if let Some(a) = macc.as_mut() {
            a.reset();
        }
        let mut vals = LossValues::default();
        for _ in 0..tc.batch {
            if cursor == order.len() {
                // reshuffle each epoch (Fisher–Yates)
                order = (0..frames.len()).collect();
                for i in (1..order.len()).rev() {
                    order.swap(i, rng.below(i + 1));
                }
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;
            let frame = &frames[idx];
            let mut g = Graph::new();
            let ws = bind(&mut g, &Params::trainable(&store));
            let (loss, v) = match distill.as_ref() {
                Some(d) => {
                    let mws = bind(&mut g, &Params::trainable(&d.store));
                    frame_loss(
                        &mut g,
                        det,
                        &ws,
                        frame.grid(input),
                        &frame.targets,
                        Some((d.modules, &mws, &d.targets[idx], &d.switches)),
                        weights,
                    )?
                }
                None => frame_loss(&mut g, det, &ws, frame.grid(input), &frame.targets, None, weights)?,
            };
            let grads = g.backward(loss)?;
            acc.add(&store, &grads);
            if let (Some(a), Some(d)) = (macc.as_mut(), distill.as_ref()) {
                a.add(&d.store, &grads);
            }
            vals.add(&v);
        }
        let inv = 1.0 / tc.batch as f64;
        acc.scale(inv);
        let mut norm2 = acc.global_norm().powi(2);
        if let Some(a) = macc.as_mut() {
            a.scale(inv);
            norm2 += a.global_norm().powi(2);
        }
        let norm = norm2.sqrt();
        if norm > tc.clip && norm > 0.0 {
            acc.scale(tc.clip / norm);
            if let Some(a) = macc.as_mut() {
                a.scale(tc.clip / norm);
            }
        }
        opt.step(&mut store, &acc, lr);
        if let (Some(a), Some(o), Some(d)) = (macc.as_ref(), mopt.as_mut(), distill.as_mut()) {
            o.step(&mut d.store, a, lr);
        }
        let v = vals.scaled(inv);
        log.push(LogRow {
            step,
            cls: v.cls,
            reg: v.reg,
            vxl: v.vxl,
            bev: v.bev,
            rsp_c: v.rsp_c,
            rsp_r: v.rsp_r,
            total: v.total,
            lr,
            grad_norm: norm,
        });
    }
    Ok(TrainOutcome {
        store,
        modules: distill.map(|d| d.store),
        log,
    })
}

/// Run the detector over frames and score it.
pub fn evaluate_model(
    det: &Detector,
    store: &ParamStore,
    frames: &[PreparedFrame],
    input: TeacherKind,
    cfg: &RunConfig,
    exec: Exec,
) -> Result<EvalReport> {
    let evals: Vec<Result<FrameEval>> = par::map(exec, frames, |f| {
        let (heat, reg) = det.predict(store, f.grid(input))?;
        let detections = decode_detections(&heat, &reg, &cfg.model.grid, cfg.eval.score_threshold, cfg.eval.max_det);
        Ok(FrameEval {
            detections,
            gts: f.gts.clone(),
            gt_points: f.gt_points.clone(),
        })
    });
    let evals: Vec<FrameEval> = evals.into_iter().collect::<Result<_>>()?;
    let ecfg = EvalConfig {
        iou_mode: cfg.distill.iou_mode,
        ..EvalConfig::default()
    };
    Ok(evaluate(&evals, &ecfg))
}

/// Arms of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Arm {
    Baseline,
    Voxel,
    Bev,
    Rsp,
    All,
    SingleFrameTeacher,
}

impl Arm {
    pub const ALL: [Arm; 6] = [
        Arm::Baseline,
        Arm::Voxel,
        Arm::Bev,
        Arm::Rsp,
        Arm::All,
        Arm::SingleFrameTeacher,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Voxel => "+voxel",
            Arm::Bev => "+bev",
            Arm::Rsp => "+rsp",
            Arm::All => "all",
            Arm::SingleFrameTeacher => "all (single-frame teacher)",
        }
    }

    pub fn switches(self, base: &DistillSwitches) -> DistillSwitches {
        let (voxel, bev, rsp) = match self {
            Arm::Baseline => (false, false, false),
            Arm::Voxel => (true, false, false),
            Arm::Bev => (false, true, false),
            Arm::Rsp => (false, false, true),
            Arm::All | Arm::SingleFrameTeacher => (true, true, true),
        };
        DistillSwitches {
            voxel,
            bev,
            rsp,
            teacher: if self == Arm::SingleFrameTeacher {
                TeacherKind::SingleFrame
            } else {
                TeacherKind::MultiFrame
            },
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub seed: u64,
    pub score: f64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedTeacher {
    pub seed: u64,
    /// Multi-frame teacher on multi-frame eval input.
    pub score: f64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationResult {
    pub teachers: Vec<SeedTeacher>,
    pub arms: Vec<ArmResult>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len().saturating_sub(1).max(1)) as f64;
    (m, var.sqrt())
}

impl AblationResult {
    pub fn scores(&self, arm: Arm) -> Vec<f64> {
        self.arms.iter().filter(|r| r.arm == arm).map(|r| r.score).collect()
    }

    pub fn mean(&self, arm: Arm) -> f64 {
        mean_std(&self.scores(arm)).0
    }

    pub fn teacher_mean(&self) -> f64 {
        mean_std(&self.teachers.iter().map(|t| t.score).collect::<Vec<_>>()).0
    }

    pub fn table_csv(&self) -> String {
        let mut s = String::from("arm,mean_score,std_score,scores\n");
        let t: Vec<f64> = self.teachers.iter().map(|t| t.score).collect();
        let (m, sd) = mean_std(&t);
        s.push_str(&format!("multi-frame teacher,{m:.6},{sd:.6},{}\n", fmt_list(&t)));
        for arm in Arm::ALL {
            let xs = self.scores(arm);
            if xs.is_empty() {
                continue;
            }
            let (m, sd) = mean_std(&xs);
            s.push_str(&format!("{},{m:.6},{sd:.6},{}\n", arm.name(), fmt_list(&xs)));
        }
        s
    }
}

fn fmt_list(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(" ")
}

/// Build distillation modules and teacher targets, then train one student.
#[allow(clippy::too_many_arguments)]
pub fn train_student(
    cfg: &RunConfig,
    det: &Detector,
    init: &ParamStore,
    bench: &Benchmark,
    teacher: Option<(&Detector, &ParamStore, TeacherKind)>,
    switches: &DistillSwitches,
    weights: &DistillWeights,
    seed: u64,
    exec: Exec,
) -> Result<TrainOutcome> {
    let Some((tdet, tstore, tkind)) = teacher.filter(|_| switches.any()) else {
        return train(
            det,
            init.clone(),
            &bench.train,
            TeacherKind::SingleFrame,
            None,
            weights,
            &cfg.train,
            cfg.train.steps,
            seed,
        );
    };
    let targets: Vec<Result<TeacherTargets>> = par::map(exec, &bench.train, |f| {
        teacher_targets(tdet, tstore, tkind, f, weights.tau, switches.context_margin)
    });
    let targets: Vec<TeacherTargets> = targets.into_iter().collect::<Result<_>>()?;
    let (modules, mstore) = DistillModules::new(det.config.voxel_channels, &det.level_channels(), seed)?;
    train(
        det,
        init.clone(),
        &bench.train,
        TeacherKind::SingleFrame,
        Some(DistillSetup {
            modules: &modules,
            store: mstore,
            targets: &targets,
            switches: switches.clone(),
        }),
        weights,
        &cfg.train,
        cfg.train.steps,
        seed,
    )
}

/// Freshly initialized student for a seed. Every arm of a seed starts here.
pub fn init_student(model: &ModelConfig, seed: u64) -> Result<(Detector, ParamStore)> {
    Ok(Detector::new(model.clone(), derive_seed(seed, &[0x57DE]))?)
}

/// Freshly initialized teacher for a seed.
pub fn init_teacher(model: &ModelConfig, seed: u64) -> Result<(Detector, ParamStore)> {
    Ok(Detector::new(model.clone(), derive_seed(seed, &[0x7EAC]))?)
}

/// Pretrain a teacher for a seed on `input` frames.
pub fn pretrain_teacher(
    cfg: &RunConfig,
    bench: &Benchmark,
    seed: u64,
    input: TeacherKind,
) -> Result<(Detector, TrainOutcome)> {
    let (det, store) = init_teacher(&cfg.model, seed)?;
    let out = train(
        &det,
        store,
        &bench.train,
        input,
        None,
        &cfg.weights,
        &cfg.train,
        cfg.train.teacher_steps,
        seed,
    )?;
    Ok((det, out))
}

/// The ablation grid over every configured seed. `arms` selects which
/// student arms to run; the baseline always runs because it is also the
/// single-frame teacher.
pub fn run_ablation(cfg: &RunConfig, bench: &Benchmark, arms: &[Arm], exec: Exec) -> Result<AblationResult> {
    let mut teachers = Vec::new();
    let mut results = Vec::new();
    for &seed in &cfg.train.seeds {
        let (tdet, tout) = pretrain_teacher(cfg, bench, seed, TeacherKind::MultiFrame)?;
        let treport = evaluate_model(&tdet, &tout.store, &bench.eval, TeacherKind::MultiFrame, cfg, exec)?;
        log::info!("seed {seed}: multi-frame teacher score {:.4}", treport.score());
        teachers.push(SeedTeacher {
            seed,
            score: treport.score(),
            report: treport,
        });

        let (det, init) = init_student(&cfg.model, seed)?;
        let base = train_student(
            cfg,
            &det,
            &init,
            bench,
            None,
            &Arm::Baseline.switches(&cfg.distill),
            &cfg.weights,
            seed,
            exec,
        )?;
        let brep = evaluate_model(&det, &base.store, &bench.eval, TeacherKind::SingleFrame, cfg, exec)?;
        log::info!("seed {seed}: baseline score {:.4}", brep.score());
        results.push(ArmResult {
            arm: Arm::Baseline,
            seed,
            score: brep.score(),
            report: brep,
        });
        for &arm in arms.iter().filter(|&&a| a != Arm::Baseline) {
            let sw = arm.switches(&cfg.distill);
            let teacher = match sw.teacher {
                TeacherKind::MultiFrame => (&tdet, &tout.store, TeacherKind::MultiFrame),
                TeacherKind::SingleFrame => (&det, &base.store, TeacherKind::SingleFrame),
            };
            let out = train_student(cfg, &det, &init, bench, Some(teacher), &sw, &cfg.weights, seed, exec)?;
            let rep = evaluate_model(&det, &out.store, &bench.eval, TeacherKind::SingleFrame, cfg, exec)?;
            log::info!("seed {seed}: {} score {:.4}", arm.name(), rep.score());
            results.push(ArmResult {
                arm,
                seed,
                score: rep.score(),
                report: rep,
            });
        }
    }
    Ok(AblationResult {
        teachers,
        arms: results,
    })
}
