//! Finite-difference checks of every differentiable piece: tensor
//! primitives, detector blocks, the attention encoder, each distillation
//! loss and the full training objective. Adaptive response weights are
//! stop-gradient quantities, so their checks hold the weights fixed at the
//! base point.

use mfkd_tensor::gradcheck::{self, GradCheckReport};
use mfkd_tensor::{Graph, ParamStore, Params, Tensor, TensorError, Var};

use crate::backbone::{bind, build_targets, supervised_loss, voxelize, Detector, ModelConfig, RpnKind, REG_CHANNELS};
use crate::distill::{
    adaptive_cls_loss_with, adaptive_cls_weights, adaptive_reg_loss_with, adaptive_reg_weights, bev_distill_loss,
    foreground_mask, gather_cells_tensor, spatial_cells, total_loss, voxel_distill_loss, DistillModules,
    DistillWeights, LossVars,
};
use crate::geom::{BoundingBox3D, IouMode, Point3, PointCloud};
use crate::rng::Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub scalars: usize,
    pub report: Result<GradCheckReport, String>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        matches!(&self.report, Ok(r) if r.passed(TOLERANCE))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.report.as_ref().map_or(f64::INFINITY, |r| r.max_rel_error)
    }
}

fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).expect("shape")
}

/// Reduce any output to a scalar through a fixed random projection.
fn project(g: &mut Graph, out: Var, seed: u64) -> mfkd_tensor::Result<Var> {
    let mut rng = Rng::new(seed);
    let r = rand_tensor(&mut rng, g.shape(out));
    let r = g.constant(r);
    let m = g.mul(out, r)?;
    Ok(g.sum(m))
}

fn run<F>(name: &str, inputs: Vec<Tensor>, f: F) -> CheckResult
where
    F: Fn(&mut Graph, &[Var]) -> mfkd_tensor::Result<Var>,
{
    let scalars = inputs.iter().map(Tensor::numel).sum();
    CheckResult {
        name: name.to_string(),
        scalars,
        report: gradcheck::check(&inputs, STEP, f).map_err(|e| e.to_string()),
    }
}

fn prim<F>(name: &str, shapes: &[&[usize]], seed: u64, f: F) -> CheckResult
where
    F: Fn(&mut Graph, &[Var]) -> mfkd_tensor::Result<Var>,
{
    let mut rng = Rng::stream(seed, &[name.len() as u64]);
    let inputs = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
    run(name, inputs, |g, v| {
        let out = f(g, v)?;
        project(g, out, seed ^ 0xABCD)
    })
}

/// Checks of every tensor primitive on small random inputs.
pub fn primitive_checks() -> Vec<CheckResult> {
    let s = 11;
    let mut out = vec![
        prim("matmul", &[&[3, 4], &[4, 2]], s, |g, v| g.matmul(v[0], v[1])),
        prim("add", &[&[2, 3], &[2, 3]], s, |g, v| g.add(v[0], v[1])),
        prim("sub", &[&[2, 3], &[2, 3]], s, |g, v| g.sub(v[0], v[1])),
        prim("mul", &[&[2, 3], &[2, 3]], s, |g, v| g.mul(v[0], v[1])),
        prim("scale", &[&[2, 3]], s, |g, v| Ok(g.scale(v[0], -1.7))),
        prim("add_row_bias", &[&[3, 4], &[4]], s, |g, v| g.add_row_bias(v[0], v[1])),
        prim("add_channel_bias", &[&[2, 3, 3], &[2]], s, |g, v| {
            g.add_channel_bias(v[0], v[1])
        }),
        prim("mul_broadcast", &[&[3, 2, 2], &[1, 2, 2]], s, |g, v| {
            g.mul_broadcast(v[0], v[1])
        }),
        prim("transpose", &[&[2, 5]], s, |g, v| g.transpose(v[0])),
        prim("reshape", &[&[2, 6]], s, |g, v| g.reshape(v[0], &[3, 4])),
        prim("concat", &[&[2, 3], &[2, 2]], s, |g, v| g.concat(&[v[0], v[1]], 1)),
        prim("slice", &[&[4, 3]], s, |g, v| g.slice(v[0], 0, 1, 2)),
        prim("relu", &[&[4, 4]], s, |g, v| Ok(g.relu(v[0]))),
        prim("sigmoid", &[&[3, 3]], s, |g, v| Ok(g.sigmoid(v[0]))),
        prim("exp", &[&[3, 3]], s, |g, v| Ok(g.exp(v[0]))),
        prim("softmax", &[&[3, 4]], s, |g, v| g.softmax(v[0], 1)),
        prim("softmax_axis0", &[&[3, 2, 2]], s, |g, v| g.softmax(v[0], 0)),
        prim("conv2d_3x3", &[&[2, 5, 5], &[3, 2, 3, 3]], s, |g, v| {
            g.conv2d(v[0], v[1], 1, 1)
        }),
        prim("conv2d_stride2", &[&[2, 6, 6], &[2, 2, 3, 3]], s, |g, v| {
            g.conv2d(v[0], v[1], 2, 1)
        }),
        prim("conv2d_1x1", &[&[3, 4, 4], &[2, 3, 1, 1]], s, |g, v| {
            g.conv2d(v[0], v[1], 1, 0)
        }),
        prim("deconv2d_stride2", &[&[2, 3, 3], &[2, 3, 3, 3]], s, |g, v| {
            g.deconv2d(v[0], v[1], 2, 1, 1)
        }),
        prim("deconv2d_k2", &[&[2, 3, 3], &[2, 2, 2, 2]], s, |g, v| {
            g.deconv2d(v[0], v[1], 2, 0, 0)
        }),
        prim("bilinear_upsample", &[&[2, 3, 3]], s, |g, v| {
            g.bilinear_upsample(v[0], 6, 6)
        }),
        prim("sum", &[&[2, 3]], s, |g, v| Ok(g.sum(v[0]))),
        prim("mean", &[&[2, 3]], s, |g, v| Ok(g.mean(v[0]))),
        prim("mse_loss", &[&[2, 3], &[2, 3]], s, |g, v| g.mse_loss(v[0], v[1])),
        prim("smooth_l1_loss", &[&[3, 3], &[3, 3]], s, |g, v| {
            g.smooth_l1_loss(v[0], v[1], 1.0)
        }),
        prim("smooth_l1", &[&[3, 3], &[3, 3]], s, |g, v| g.smooth_l1(v[0], v[1], 0.5)),
        prim("aggregate_rows", &[&[4, 3]], s, |g, v| {
            g.aggregate_rows(v[0], vec![vec![(0, 0.5), (2, 0.5)], vec![], vec![(3, 1.0), (1, -2.0)]])
        }),
        prim("gather_rows", &[&[4, 3]], s, |g, v| g.gather_rows(v[0], &[3, 0, 3])),
        prim("gather_cells", &[&[2, 3, 3]], s, |g, v| {
            g.gather_cells(v[0], &[0, 4, 8, 4])
        }),
        prim("scatter_max", &[&[5, 3]], s, |g, v| {
            g.scatter_max(v[0], &[0, 2, 0, 3, 2], 2, 2)
        }),
        prim("pairwise_diff", &[&[4, 1]], s, |g, v| g.pairwise_diff(v[0])),
    ];
    let mut rng = Rng::new(5);
    let mut target = Tensor::zeros(&[2, 3, 3]);
    for (i, t) in target.data_mut().iter_mut().enumerate() {
        *t = if i == 4 { 1.0 } else { 0.8 * rng.uniform() };
    }
    out.push(run(
        "focal_loss",
        vec![rand_tensor(&mut rng, &[2, 3, 3])],
        move |g, v| g.focal_loss(v[0], &target),
    ));
    out
}

/// A small planted scene on the toy grid: a box shell with ground points.
pub fn toy_scene(seed: u64) -> (PointCloud, PointCloud, Vec<BoundingBox3D>) {
    let mut rng = Rng::new(seed);
    let boxes = vec![
        BoundingBox3D::new([2.3, -1.1, 0.8], [1.8, 4.0, 1.6], 0.4, 0, 1).expect("box"),
        BoundingBox3D::new([-3.2, 2.6, 0.9], [0.8, 0.8, 1.8], -1.0, 1, 2).expect("box"),
    ];
    let mut single = Vec::new();
    for b in &boxes {
        for _ in 0..40 {
            let q = [
                (rng.uniform() - 0.5) * b.length(),
                -b.width() / 2.0 + 0.01,
                (rng.uniform() - 0.5) * b.height(),
            ];
            let [x, y, z] = b.from_canonical(q);
            single.push(Point3::new(x, y, z, rng.uniform()));
        }
    }
    for _ in 0..60 {
        single.push(Point3::new(
            rng.range(-7.5, 7.5),
            rng.range(-7.5, 7.5),
            0.0,
            0.1 * rng.uniform(),
        ));
    }
    let mut multi = single.clone();
    for b in &boxes {
        for _ in 0..40 {
            let q = [
                (rng.uniform() - 0.5) * b.length(),
                b.width() / 2.0 - 0.01,
                (rng.uniform() - 0.5) * b.height(),
            ];
            let [x, y, z] = b.from_canonical(q);
            multi.push(Point3::new(x, y, z, rng.uniform()));
        }
    }
    (PointCloud::new(0, single), PointCloud::new(0, multi), boxes)
}

fn split<'a>(vars: &'a [Var], lens: &[usize]) -> Vec<&'a [Var]> {
    let mut out = Vec::new();
    let mut at = 0;
    for &n in lens {
        out.push(&vars[at..at + n]);
        at += n;
    }
    out
}

/// Store tensors moved off their initial values. Zero-initialized biases put
/// ReLUs exactly on their kink, where one-sided differences disagree with
/// any subgradient.
fn store_tensors(store: &ParamStore) -> Vec<Tensor> {
    let mut rng = Rng::new(0x51DE);
    store
        .iter()
        .map(|(_, _, t)| {
            let mut t = t.clone();
            t.data_mut().iter_mut().for_each(|v| *v += 0.05 * rng.normal());
            t
        })
        .collect()
}

fn err(e: impl std::fmt::Display) -> TensorError {
    TensorError::InvalidArgument {
        op: "gradsuite",
        reason: e.to_string(),
    }
}

/// Checks of detector blocks, distillation losses and the full objective.
pub fn model_checks() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let (single, multi, boxes) = toy_scene(3);
    for rpn in [RpnKind::MultiScale, RpnKind::Raw] {
        let cfg = ModelConfig {
            rpn,
            ..ModelConfig::toy()
        };
        let (det, store) = Detector::new(cfg.clone(), 9).expect("toy detector");
        let grid = voxelize(&single, &cfg.grid);
        let targets = build_targets(&boxes, &cfg.grid, cfg.num_classes);
        let name = match rpn {
            RpnKind::MultiScale => "detector_ms_rpn_supervised",
            RpnKind::Raw => "detector_raw_rpn_supervised",
        };
        let w = DistillWeights::default();
        out.push(run(name, store_tensors(&store), |g, ws| {
            let o = det.forward(g, ws, &grid).map_err(err)?;
            let (c, r) = supervised_loss(g, &o.responses, &targets).map_err(err)?;
            let r = g.scale(r, w.alpha);
            g.add(c, r)
        }));
    }

    let cfg = ModelConfig::toy();
    let (det, store) = Detector::new(cfg.clone(), 9).expect("toy detector");
    let grid = voxelize(&single, &cfg.grid);
    let tgrid = voxelize(&multi, &cfg.grid);
    let n_det = store.len();

    // voxel encoder wrt its input features
    out.push(run("voxel_encoder_input", vec![grid.features.clone()], |g, v| {
        let ws = bind(g, &Params::frozen(&store));
        let f = det
            .encoder
            .forward(g, &ws, v[0], crate::backbone::neighbor_rows(&grid.coords))
            .map_err(err)?;
        project(g, f, 21)
    }));

    let (modules, mstore) = DistillModules::new(cfg.voxel_channels, &det.level_channels(), 4).expect("modules");
    let n_mod = mstore.len();
    let mut rng = Rng::new(77);
    let n_sel = 6;
    let centers: Vec<[f64; 3]> = grid.centers().into_iter().take(n_sel).collect();
    let c = cfg.voxel_channels;
    let x = rand_tensor(&mut rng, &[n_sel, c]).map(f64::abs);
    let teacher_vox = rand_tensor(&mut rng, &[n_sel, c]).map(f64::abs);

    // attention encoder wrt its input and every projection
    let mut inputs = store_tensors(&mstore);
    inputs.push(x.clone());
    out.push(run("attention_encoder", inputs, |g, v| {
        let parts = split(v, &[n_mod, 1]);
        let y = modules
            .attention
            .forward(g, parts[0], parts[1][0], &centers)
            .map_err(err)?;
        project(g, y, 31)
    }));

    let mut inputs = store_tensors(&mstore);
    inputs.push(x.clone());
    out.push(run("voxel_distill_loss", inputs, |g, v| {
        let parts = split(v, &[n_mod, 1]);
        let y = modules
            .attention
            .forward(g, parts[0], parts[1][0], &centers)
            .map_err(err)?;
        let t = g.constant(teacher_vox.clone());
        voxel_distill_loss(g, y, t).map_err(err)
    }));

    // BEV loss wrt student levels and adapters
    let cells = crate::distill::bev_mask(&boxes, &cfg.grid);
    let n = cfg.grid.bev_size();
    let chans = det.level_channels();
    let levels: Vec<Tensor> = chans
        .iter()
        .map(|&ch| rand_tensor(&mut rng, &[ch, n, n]).map(f64::abs))
        .collect();
    let tlevels: Vec<Tensor> = chans
        .iter()
        .map(|&ch| gather_cells_tensor(&rand_tensor(&mut rng, &[ch, n, n]).map(f64::abs), &cells))
        .collect();
    let mut inputs = store_tensors(&mstore);
    inputs.extend(levels.iter().cloned());
    out.push(run("bev_distill_loss", inputs, |g, v| {
        let parts = split(v, &[n_mod, chans.len()]);
        bev_distill_loss(g, parts[0], &modules.adapters, parts[1], &tlevels, &cells).map_err(err)
    }));

    // response losses with weights fixed at the base point
    let heat = build_targets(&boxes, &cfg.grid, cfg.num_classes).heatmap;
    let mask = foreground_mask(&heat, 0.1);
    let logits = rand_tensor(&mut rng, &[cfg.num_classes, n, n]);
    let tprobs: Vec<f64> = mask.iter().map(|_| rng.uniform()).collect();
    let cls_weights = adaptive_cls_weights(&logits, &tprobs, &mask)
        .expect("cls terms")
        .expect("nonzero weighted loss");
    out.push(run("adaptive_cls_loss", vec![logits], |g, v| {
        adaptive_cls_loss_with(g, v[0], &tprobs, &mask, Some(&cls_weights)).map_err(err)
    }));

    let fg_cells = spatial_cells(&mask, n * n);
    let reg = rand_tensor(&mut rng, &[REG_CHANNELS, n, n]).map(|v| 0.3 * v);
    let treg = gather_cells_tensor(
        &rand_tensor(&mut rng, &[REG_CHANNELS, n, n]).map(|v| 0.3 * v),
        &fg_cells,
    );
    let reg_weights = adaptive_reg_weights(&reg, &treg, &fg_cells, &cfg.grid, IouMode::ThreeD)
        .expect("reg terms")
        .unwrap_or_else(|| vec![1.0; fg_cells.len()]);
    out.push(run("adaptive_reg_loss", vec![reg], |g, v| {
        adaptive_reg_loss_with(
            g,
            v[0],
            &treg,
            &fg_cells,
            &cfg.grid,
            IouMode::ThreeD,
            Some(&reg_weights),
        )
        .map_err(err)
    }));

    // the full objective wrt every student parameter, teacher frozen
    let (tdet, tstore) = Detector::new(cfg.clone(), 10).expect("teacher");
    let prepared_targets = build_targets(&boxes, &cfg.grid, cfg.num_classes);
    let pairs = crate::distill::select_and_match_voxels(&grid, &tgrid, &boxes, 0.8).expect("subset");
    let tt = {
        let mut g = Graph::new();
        let ws = bind(&mut g, &Params::frozen(&tstore));
        let o = tdet.forward(&mut g, &ws, &tgrid).expect("teacher forward");
        let f = g.value(o.voxel_features.expect("voxels")).clone();
        let rows: Vec<f64> = pairs
            .iter()
            .flat_map(|p| f.data()[p.teacher_row * c..(p.teacher_row + 1) * c].to_vec())
            .collect();
        let vox = Tensor::new(vec![pairs.len(), c], rows).expect("rows");
        let lv: Vec<Tensor> = o
            .rpn
            .levels
            .iter()
            .map(|&l| gather_cells_tensor(g.value(l), &cells))
            .collect();
        let h = g.sigmoid(o.responses.heat_logits);
        let probs: Vec<f64> = mask.iter().map(|&i| g.value(h).data()[i]).collect();
        let r = gather_cells_tensor(g.value(o.responses.reg), &fg_cells);
        (vox, lv, probs, r)
    };
    // adaptive weights from the student's base-point values
    let (w_cls, w_reg) = {
        let (heat, reg) = {
            let mut g = Graph::new();
            let ws = bind(&mut g, &Params::frozen(&store));
            let o = det.forward(&mut g, &ws, &grid).expect("student forward");
            (
                g.value(o.responses.heat_logits).clone(),
                g.value(o.responses.reg).clone(),
            )
        };
        let wc = adaptive_cls_weights(&heat, &tt.2, &mask)
            .expect("cls")
            .unwrap_or_else(|| vec![0.0; mask.len()]);
        let wr = adaptive_reg_weights(&reg, &tt.3, &fg_cells, &cfg.grid, IouMode::ThreeD)
            .expect("reg")
            .unwrap_or_else(|| vec![0.0; fg_cells.len()]);
        (wc, wr)
    };
    let pair_rows: Vec<usize> = pairs.iter().map(|p| p.student_row).collect();
    let pair_centers: Vec<[f64; 3]> = pairs.iter().map(|p| cfg.grid.voxel_center(p.coord)).collect();
    let mut inputs = store_tensors(&store);
    inputs.extend(store_tensors(&mstore));
    let weights = DistillWeights::default();
    out.push(run("total_objective_student_params", inputs, |g, v| {
        let parts = split(v, &[n_det, n_mod]);
        let o = det.forward(g, parts[0], &grid).map_err(err)?;
        let (cls, reg) = supervised_loss(g, &o.responses, &prepared_targets).map_err(err)?;
        let f = o.voxel_features.expect("voxels");
        let sel = g.gather_rows(f, &pair_rows)?;
        let enc = modules
            .attention
            .forward(g, parts[1], sel, &pair_centers)
            .map_err(err)?;
        let tv = g.constant(tt.0.clone());
        let vxl = voxel_distill_loss(g, enc, tv).map_err(err)?;
        let bev = bev_distill_loss(g, parts[1], &modules.adapters, &o.rpn.levels, &tt.1, &cells).map_err(err)?;
        let rsp_c = adaptive_cls_loss_with(g, o.responses.heat_logits, &tt.2, &mask, Some(&w_cls)).map_err(err)?;
        let rsp_r = adaptive_reg_loss_with(
            g,
            o.responses.reg,
            &tt.3,
            &fg_cells,
            &cfg.grid,
            IouMode::ThreeD,
            Some(&w_reg),
        )
        .map_err(err)?;
        let lv = LossVars {
            cls,
            reg,
            vxl,
            bev,
            rsp_c,
            rsp_r,
        };
        Ok(total_loss(g, &lv, &weights).map_err(err)?.0)
    }));
    out
}

/// Every check, primitives first.
pub fn run_suite() -> Vec<CheckResult> {
    let mut all = primitive_checks();
    all.extend(model_checks());
    all
}
