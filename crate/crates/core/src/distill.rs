//! Distillation losses connecting a frozen multi-frame teacher to a
//! single-frame student: attention-encoded voxel imitation, foreground BEV
//! imitation at every RPN level, and adaptively weighted response matching.

use mfkd_tensor::{Graph, ParamId, ParamStore, Tensor, TensorError, Var};
use thiserror::Error;

use crate::backbone::{bind, decode_box, footprint_cells, GridConfig, ModelError, SparseVoxelGrid, REG_CHANNELS};
use crate::geom::{BoundingBox3D, IouMode};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("subset property violated: student voxel {0:?} has no teacher voxel")]
    SubsetViolated([i32; 3]),
    #[error("attention encoder needs at least one voxel")]
    NoVoxels,
    #[error("invalid distillation weights: {0}")]
    InvalidWeights(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, DistillError>;

pub const ATTENTION_HEADS: usize = 8;
/// Smooth-L1 transition point for response distillation.
pub const RESPONSE_BETA: f64 = 1.0;
pub const CONTEXT_MARGIN: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillWeights {
    pub tau: f64,
    pub pi1: f64,
    pub pi2: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub mu: f64,
}

impl Default for DistillWeights {
    fn default() -> Self {
        DistillWeights {
            tau: 0.1,
            pi1: 2.0,
            pi2: 1.0,
            alpha: 2.0,
            beta: 8.0,
            lambda: 1.0,
            mu: 1.0,
        }
    }
}

impl DistillWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.tau,
            self.pi1,
            self.pi2,
            self.alpha,
            self.beta,
            self.lambda,
            self.mu,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(DistillError::InvalidWeights(
                "all weights must be finite and ≥ 0".into(),
            ));
        }
        if self.pi1 <= self.pi2 {
            return Err(DistillError::InvalidWeights(format!(
                "classification response weight {} must exceed regression weight {}",
                self.pi1, self.pi2
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MatchedVoxelPair {
    pub coord: [i32; 3],
    pub student_row: usize,
    pub teacher_row: usize,
}

/// Student voxels whose centers lie in a GT box grown by `margin`, each
/// paired with the teacher voxel at the same coordinates.
pub fn select_and_match_voxels(
    student: &SparseVoxelGrid,
    teacher: &SparseVoxelGrid,
    boxes: &[BoundingBox3D],
    margin: f64,
) -> Result<Vec<MatchedVoxelPair>> {
    let mut pairs = Vec::new();
    if boxes.is_empty() {
        return Ok(pairs);
    }
    for (row, &c) in student.coords.iter().enumerate() {
        let center = student.grid.voxel_center(c);
        if !boxes.iter().any(|b| b.contains(center, margin)) {
            continue;
        }
        let t = teacher.row_of(c).ok_or(DistillError::SubsetViolated(c))?;
        pairs.push(MatchedVoxelPair {
            coord: c,
            student_row: row,
            teacher_row: t,
        });
    }
    Ok(pairs)
}

/// Multi-head self-attention over selected voxels with a per-head scalar
/// relative-position logit, followed by an output projection and a
/// two-layer ReLU FFN, both with residuals.
#[derive(Debug, Clone)]
pub struct AttentionEncoder {
    pub channels: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wr: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub f1: ParamId,
    pub fb1: ParamId,
    pub f2: ParamId,
    pub fb2: ParamId,
}

fn normal(store: &mut ParamStore, rng: &mut Rng, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| std * rng.normal()).collect();
    Ok(store.add(name, Tensor::new(shape.to_vec(), data)?)?)
}

impl AttentionEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, c: usize) -> Result<Self> {
        if !c.is_multiple_of(ATTENTION_HEADS) || c == 0 {
            return Err(DistillError::InvalidWeights(format!(
                "{c} channels do not split into 8 heads"
            )));
        }
        let s = (1.0 / c as f64).sqrt();
        let he = (2.0 / c as f64).sqrt();
        Ok(AttentionEncoder {
            channels: c,
            wq: normal(store, rng, "attn.wq", &[c, c], s)?,
            wk: normal(store, rng, "attn.wk", &[c, c], s)?,
            wv: normal(store, rng, "attn.wv", &[c, c], s)?,
            wr: normal(store, rng, "attn.wr", &[3, ATTENTION_HEADS], 0.1)?,
            wo: normal(store, rng, "attn.wo", &[c, c], s)?,
            bo: store.add("attn.bo", Tensor::zeros(&[c]))?,
            f1: normal(store, rng, "attn.ffn1.w", &[c, c], he)?,
            fb1: store.add("attn.ffn1.b", Tensor::zeros(&[c]))?,
            f2: normal(store, rng, "attn.ffn2.w", &[c, c], he)?,
            fb2: store.add("attn.ffn2.b", Tensor::zeros(&[c]))?,
        })
    }

    /// Per-head attention weights `[N × N]`, for inspection.
    pub fn attention(&self, g: &mut Graph, ws: &[Var], x: Var, centers: &[[f64; 3]]) -> Result<Vec<Var>> {
        Ok(self.heads(g, ws, x, centers)?.0)
    }

    fn heads(&self, g: &mut Graph, ws: &[Var], x: Var, centers: &[[f64; 3]]) -> Result<(Vec<Var>, Vec<Var>)> {
        let n = centers.len();
        if n == 0 || g.shape(x)[0] != n {
            return Err(DistillError::NoVoxels);
        }
        let d = self.channels / ATTENTION_HEADS;
        let pos = Tensor::new(vec![n, 3], centers.iter().flatten().copied().collect())?;
        let pos = g.constant(pos);
        let q = g.matmul(x, ws[self.wq.index()])?;
        let k = g.matmul(x, ws[self.wk.index()])?;
        let v = g.matmul(x, ws[self.wv.index()])?;
        let r = g.matmul(pos, ws[self.wr.index()])?;
        let mut attn = Vec::with_capacity(ATTENTION_HEADS);
        let mut outs = Vec::with_capacity(ATTENTION_HEADS);
        for h in 0..ATTENTION_HEADS {
            let qh = g.slice(q, 1, h * d, d)?;
            let kh = g.slice(k, 1, h * d, d)?;
            let vh = g.slice(v, 1, h * d, d)?;
            let kt = g.transpose(kh)?;
            let logits = g.matmul(qh, kt)?;
            let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
            let rh = g.slice(r, 1, h, 1)?;
            let rel = g.pairwise_diff(rh)?;
            let logits = g.add(logits, rel)?;
            let a = g.softmax(logits, 1)?;
            outs.push(g.matmul(a, vh)?);
            attn.push(a);
        }
        Ok((attn, outs))
    }

    /// `[N × C]` features at voxel centers (meters) to encoded `[N × C]`.
    pub fn forward(&self, g: &mut Graph, ws: &[Var], x: Var, centers: &[[f64; 3]]) -> Result<Var> {
        let (_, outs) = self.heads(g, ws, x, centers)?;
        let cat = g.concat(&outs, 1)?;
        let proj = g.matmul(cat, ws[self.wo.index()])?;
        let proj = g.add_row_bias(proj, ws[self.bo.index()])?;
        let hat = g.add(proj, x)?;
        let f = g.matmul(hat, ws[self.f1.index()])?;
        let f = g.add_row_bias(f, ws[self.fb1.index()])?;
        let f = g.relu(f);
        let f = g.matmul(f, ws[self.f2.index()])?;
        let f = g.add_row_bias(f, ws[self.fb2.index()])?;
        let f = g.relu(f);
        Ok(g.add(f, hat)?)
    }
}

/// Per-level 1×1 conv + ReLU mapping student BEV features onto the teacher's.
#[derive(Debug, Clone)]
pub struct BevAdapters {
    pub weights: Vec<ParamId>,
    pub biases: Vec<ParamId>,
}

impl BevAdapters {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, channels: &[usize]) -> Result<Self> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (l, &c) in channels.iter().enumerate() {
            // start near identity so the adapter does not hide the student's features
            let mut w = Tensor::zeros(&[c, c, 1, 1]);
            for i in 0..c {
                for j in 0..c {
                    w.data_mut()[i * c + j] = if i == j { 1.0 } else { 0.0 } + 0.01 * rng.normal();
                }
            }
            weights.push(store.add(format!("bev.adapt{l}.w"), w)?);
            biases.push(store.add(format!("bev.adapt{l}.b"), Tensor::zeros(&[c]))?);
        }
        Ok(BevAdapters { weights, biases })
    }

    pub fn forward(&self, g: &mut Graph, ws: &[Var], level: usize, x: Var) -> Result<Var> {
        let y = g.conv2d(x, ws[self.weights[level].index()], 1, 0)?;
        let y = g.add_channel_bias(y, ws[self.biases[level].index()])?;
        Ok(g.relu(y))
    }
}

/// Trainable student-side modules used only for distillation.
#[derive(Debug, Clone)]
pub struct DistillModules {
    pub attention: AttentionEncoder,
    pub adapters: BevAdapters,
}

impl DistillModules {
    pub fn new(voxel_channels: usize, level_channels: &[usize], seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = Rng::stream(seed, &[0xD157]);
        let attention = AttentionEncoder::new(&mut store, &mut rng, voxel_channels)?;
        let adapters = BevAdapters::new(&mut store, &mut rng, level_channels)?;
        Ok((DistillModules { attention, adapters }, store))
    }

    pub fn bind(g: &mut Graph, params: &mfkd_tensor::Params<'_>) -> Vec<Var> {
        bind(g, params)
    }
}

/// `(1/N) Σ‖ṽˢ − vᵐ‖²`
pub fn voxel_distill_loss(g: &mut Graph, encoded: Var, teacher: Var) -> Result<Var> {
    let c = g.shape(encoded).get(1).copied().unwrap_or(1);
    let m = g.mse_loss(encoded, teacher)?;
    Ok(g.scale(m, c as f64))
}

/// Mean squared feature distance over masked cells, summed over levels.
/// `teacher[l]` holds the teacher's features at `cells` as `[cells × c_l]`.
pub fn bev_distill_loss(
    g: &mut Graph,
    ws: &[Var],
    adapters: &BevAdapters,
    student_levels: &[Var],
    teacher: &[Tensor],
    cells: &[usize],
) -> Result<Var> {
    let mut total = g.constant(Tensor::scalar(0.0));
    if cells.is_empty() {
        return Ok(total);
    }
    for (l, (&s, t)) in student_levels.iter().zip(teacher).enumerate() {
        let adapted = adapters.forward(g, ws, l, s)?;
        let picked = g.gather_cells(adapted, cells)?;
        let tv = g.constant(t.clone());
        let c = t.shape()[1] as f64;
        let m = g.mse_loss(picked, tv)?;
        let m = g.scale(m, c);
        total = g.add(total, m)?;
    }
    Ok(total)
}

/// Teacher features `[c × H × W]` read at `cells`, as `[cells × c]`.
pub fn gather_cells_tensor(map: &Tensor, cells: &[usize]) -> Tensor {
    let s = map.shape();
    let (c, plane) = (s[0], s[1] * s[2]);
    let d = map.data();
    let mut out = Vec::with_capacity(cells.len() * c);
    for &cell in cells {
        for ch in 0..c {
            out.push(d[ch * plane + cell]);
        }
    }
    Tensor::new(vec![cells.len(), c], out).expect("gathered rows")
}

/// Flat `(class, y, x)` indices where the target heatmap exceeds `tau`.
pub fn foreground_mask(heatmap: &Tensor, tau: f64) -> Vec<usize> {
    heatmap
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > tau)
        .map(|(i, _)| i)
        .collect()
}

/// Distinct spatial cells of a foreground mask over a `[K × plane]` heatmap.
pub fn spatial_cells(mask: &[usize], plane: usize) -> Vec<usize> {
    let mut cells: Vec<usize> = mask.iter().map(|i| i % plane).collect();
    cells.sort_unstable();
    cells.dedup();
    cells
}

/// Sum-preserving weights `wᵢ = sᵢ · ΣL / Σ(s·L)`; `None` when `Σ(s·L) = 0`.
pub fn adaptive_weights(scores: &[f64], losses: &[f64]) -> Option<Vec<f64>> {
    let total: f64 = losses.iter().sum();
    let denom: f64 = scores.iter().zip(losses).map(|(s, l)| s * l).sum();
    if denom == 0.0 || !denom.is_finite() {
        return None;
    }
    Some(scores.iter().map(|s| s * total / denom).collect())
}

/// `(1/n) Σ wᵢ·Lᵢ` with the weights either given or derived from `scores`.
fn weighted_mean(g: &mut Graph, per_item: Var, scores: &[f64], fixed: Option<&[f64]>) -> Result<Var> {
    let n = scores.len();
    let wts = match fixed {
        Some(w) => w.to_vec(),
        None => {
            let losses: Vec<f64> = g.value(per_item).data().to_vec();
            match adaptive_weights(scores, &losses) {
                Some(w) => w,
                None => return Ok(g.constant(Tensor::scalar(0.0))),
            }
        }
    };
    // the weights are treated as constants
    let wv = g.constant(Tensor::new(vec![n, 1], wts)?);
    let prod = g.mul(per_item, wv)?;
    let s = g.sum(prod);
    Ok(g.scale(s, 1.0 / n as f64))
}

/// Confidence-weighted smooth-L1 between student and teacher heatmaps on `mask`.
/// `teacher_probs` holds the teacher's sigmoid scores at `mask`.
pub fn adaptive_cls_loss(g: &mut Graph, student_logits: Var, teacher_probs: &[f64], mask: &[usize]) -> Result<Var> {
    adaptive_cls_loss_with(g, student_logits, teacher_probs, mask, None)
}

/// As [`adaptive_cls_loss`], optionally with externally fixed weights.
pub fn adaptive_cls_loss_with(
    g: &mut Graph,
    student_logits: Var,
    teacher_probs: &[f64],
    mask: &[usize],
    fixed: Option<&[f64]>,
) -> Result<Var> {
    if mask.is_empty() {
        log::debug!("empty foreground mask, classification response loss is 0");
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let (l, scores) = cls_terms(g, student_logits, teacher_probs, mask)?;
    weighted_mean(g, l, &scores, fixed)
}

fn cls_terms(g: &mut Graph, student_logits: Var, teacher_probs: &[f64], mask: &[usize]) -> Result<(Var, Vec<f64>)> {
    let s = g.shape(student_logits).to_vec();
    let probs = g.sigmoid(student_logits);
    let flat = g.reshape(probs, &[1, 1, s.iter().product()])?;
    let hs = g.gather_cells(flat, mask)?;
    let hm = g.constant(Tensor::new(vec![mask.len(), 1], teacher_probs.to_vec())?);
    let l = g.smooth_l1(hs, hm, RESPONSE_BETA)?;
    let scores = g.value(hs).data().to_vec();
    Ok((l, scores))
}

/// The weights [`adaptive_cls_loss`] would use at these logits.
pub fn adaptive_cls_weights(
    student_logits: &Tensor,
    teacher_probs: &[f64],
    mask: &[usize],
) -> Result<Option<Vec<f64>>> {
    let mut g = Graph::new();
    let x = g.constant(student_logits.clone());
    let (l, scores) = cls_terms(&mut g, x, teacher_probs, mask)?;
    Ok(adaptive_weights(&scores, g.value(l).data()))
}

/// Regression channels decoded into metric box parameters
/// `(x, y, z, w, l, h, sin, cos)` up to per-cell constant offsets.
fn decode_rows(g: &mut Graph, rows: Var, cell: f64) -> Result<Var> {
    let m = g.shape(rows)[0];
    let lin = g.slice(rows, 1, 0, 3)?;
    let scale = Tensor::new(vec![m, 3], (0..m).flat_map(|_| [cell, cell, 1.0]).collect())?;
    let scale = g.constant(scale);
    let lin = g.mul(lin, scale)?;
    let logs = g.slice(rows, 1, 3, 3)?;
    let sizes = g.exp(logs);
    let trig = g.slice(rows, 1, 6, 2)?;
    Ok(g.concat(&[lin, sizes, trig], 1)?)
}

/// Teacher regression at `cells`, decoded like the student's (constant).
pub fn decode_rows_tensor(rows: &Tensor, cell: f64) -> Tensor {
    let mut out = rows.clone();
    for r in out.data_mut().chunks_mut(REG_CHANNELS) {
        r[0] *= cell;
        r[1] *= cell;
        for v in &mut r[3..6] {
            *v = v.exp();
        }
    }
    out
}

/// IoU-weighted smooth-L1 between decoded student and teacher boxes at `cells`.
/// `teacher_rows` is the teacher's raw regression at `cells`, `[cells × 8]`.
pub fn adaptive_reg_loss(
    g: &mut Graph,
    student_reg: Var,
    teacher_rows: &Tensor,
    cells: &[usize],
    grid: &GridConfig,
    iou: IouMode,
) -> Result<Var> {
    adaptive_reg_loss_with(g, student_reg, teacher_rows, cells, grid, iou, None)
}

/// As [`adaptive_reg_loss`], optionally with externally fixed weights.
pub fn adaptive_reg_loss_with(
    g: &mut Graph,
    student_reg: Var,
    teacher_rows: &Tensor,
    cells: &[usize],
    grid: &GridConfig,
    iou: IouMode,
    fixed: Option<&[f64]>,
) -> Result<Var> {
    if cells.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let (per_box, ious) = reg_terms(g, student_reg, teacher_rows, cells, grid, iou)?;
    weighted_mean(g, per_box, &ious, fixed)
}

fn reg_terms(
    g: &mut Graph,
    student_reg: Var,
    teacher_rows: &Tensor,
    cells: &[usize],
    grid: &GridConfig,
    iou: IouMode,
) -> Result<(Var, Vec<f64>)> {
    let m = cells.len();
    let rows = g.gather_cells(student_reg, cells)?;
    let student_raw = g.value(rows).clone();
    let ds = decode_rows(g, rows, grid.cell)?;
    let dt = g.constant(decode_rows_tensor(teacher_rows, grid.cell));
    let l = g.smooth_l1(ds, dt, RESPONSE_BETA)?;
    let avg = g.constant(Tensor::full(&[REG_CHANNELS, 1], 1.0 / REG_CHANNELS as f64));
    let per_box = g.matmul(l, avg)?;
    let ious: Vec<f64> = (0..m)
        .map(|i| {
            let a = decode_box(
                cells[i],
                &student_raw.data()[i * REG_CHANNELS..(i + 1) * REG_CHANNELS],
                grid,
                0,
            );
            let b = decode_box(
                cells[i],
                &teacher_rows.data()[i * REG_CHANNELS..(i + 1) * REG_CHANNELS],
                grid,
                0,
            );
            iou.iou(&a, &b)
        })
        .collect();
    Ok((per_box, ious))
}

/// The weights [`adaptive_reg_loss`] would use at this regression map.
pub fn adaptive_reg_weights(
    student_reg: &Tensor,
    teacher_rows: &Tensor,
    cells: &[usize],
    grid: &GridConfig,
    iou: IouMode,
) -> Result<Option<Vec<f64>>> {
    let mut g = Graph::new();
    let x = g.constant(student_reg.clone());
    let (l, ious) = reg_terms(&mut g, x, teacher_rows, cells, grid, iou)?;
    Ok(adaptive_weights(&ious, g.value(l).data()))
}

/// Everything the teacher contributes for one training frame. The teacher is
/// frozen, so these are computed once and reused across epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTargets {
    pub pairs: Vec<MatchedVoxelPair>,
    /// Teacher voxel features at `pairs`, `[pairs × C]`.
    pub voxel_features: Tensor,
    pub footprint: Vec<usize>,
    /// Per level, teacher features at `footprint`.
    pub levels: Vec<Tensor>,
    pub fg_mask: Vec<usize>,
    pub fg_probs: Vec<f64>,
    pub fg_cells: Vec<usize>,
    /// Raw teacher regression at `fg_cells`, `[cells × 8]`.
    pub fg_reg: Tensor,
}

/// Per-component loss graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub cls: Var,
    pub reg: Var,
    pub vxl: Var,
    pub bev: Var,
    pub rsp_c: Var,
    pub rsp_r: Var,
}

/// Scalar loss components for logging.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub cls: f64,
    pub reg: f64,
    pub vxl: f64,
    pub bev: f64,
    pub rsp_c: f64,
    pub rsp_r: f64,
    pub total: f64,
}

impl LossValues {
    pub fn add(&mut self, o: &LossValues) {
        self.cls += o.cls;
        self.reg += o.reg;
        self.vxl += o.vxl;
        self.bev += o.bev;
        self.rsp_c += o.rsp_c;
        self.rsp_r += o.rsp_r;
        self.total += o.total;
    }

    pub fn scaled(&self, s: f64) -> LossValues {
        LossValues {
            cls: self.cls * s,
            reg: self.reg * s,
            vxl: self.vxl * s,
            bev: self.bev * s,
            rsp_c: self.rsp_c * s,
            rsp_r: self.rsp_r * s,
            total: self.total * s,
        }
    }
}

/// `π₁·Lᶜ + π₂·Lʳ`
pub fn response_distill_loss(g: &mut Graph, cls: Var, reg: Var, w: &DistillWeights) -> Result<Var> {
    let a = g.scale(cls, w.pi1);
    let b = g.scale(reg, w.pi2);
    Ok(g.add(a, b)?)
}

/// `L_cls + α·L_reg + β·L_vxl + λ·L_bev + μ·L_rsp`
pub fn total_loss(g: &mut Graph, parts: &LossVars, w: &DistillWeights) -> Result<(Var, LossValues)> {
    let rsp = response_distill_loss(g, parts.rsp_c, parts.rsp_r, w)?;
    let terms = [
        (parts.cls, 1.0),
        (parts.reg, w.alpha),
        (parts.vxl, w.beta),
        (parts.bev, w.lambda),
        (rsp, w.mu),
    ];
    let mut total = g.scale(terms[0].0, terms[0].1);
    for &(v, k) in &terms[1..] {
        let s = g.scale(v, k);
        total = g.add(total, s)?;
    }
    let val = |v: Var| g.value(v).item();
    let values = LossValues {
        cls: val(parts.cls),
        reg: val(parts.reg),
        vxl: val(parts.vxl),
        bev: val(parts.bev),
        rsp_c: val(parts.rsp_c),
        rsp_r: val(parts.rsp_r),
        total: val(total),
    };
    Ok((total, values))
}

/// Footprint cells used for BEV imitation.
pub fn bev_mask(boxes: &[BoundingBox3D], grid: &GridConfig) -> Vec<usize> {
    footprint_cells(boxes, grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_cell_weights() {
        let l = 0.3;
        let w = adaptive_weights(&[0.8, 0.2], &[l, l]).unwrap();
        assert!((w[0] - 1.6).abs() < 1e-12 && (w[1] - 0.4).abs() < 1e-12);
        assert!((w[0] * l + w[1] * l - 2.0 * l).abs() < 1e-12);
        assert!(adaptive_weights(&[0.0, 0.0], &[1.0, 1.0]).is_none());
    }

    #[test]
    fn weights_defaults_and_order() {
        let w = DistillWeights::default();
        assert!(w.validate().is_ok());
        let bad = DistillWeights {
            pi1: 1.0,
            pi2: 1.0,
            ..w
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn response_arithmetic() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(0.3));
        let r = g.constant(Tensor::scalar(0.1));
        let v = response_distill_loss(&mut g, c, r, &DistillWeights::default()).unwrap();
        assert!((g.value(v).item() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn unit_components_total_thirteen() {
        let mut g = Graph::new();
        let one = g.constant(Tensor::scalar(1.0));
        let half = g.constant(Tensor::scalar(1.0 / 3.0));
        // π₁/3 + π₂/3 = 1, so every component contributes its weight
        let parts = LossVars {
            cls: one,
            reg: one,
            vxl: one,
            bev: one,
            rsp_c: half,
            rsp_r: half,
        };
        let (_, v) = total_loss(&mut g, &parts, &DistillWeights::default()).unwrap();
        assert!((v.total - 13.0).abs() < 1e-12);
    }
}
