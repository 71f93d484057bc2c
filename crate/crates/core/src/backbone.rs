//! Toy detector shared by teacher and student: voxelizer, voxel encoder,
//! BEV scatter, region proposal network and center-based heads.

use std::collections::HashMap;

use mfkd_tensor::{Graph, ParamId, ParamStore, Params, Tensor, TensorError, Var};
use thiserror::Error;

use crate::geom::{wrap_angle, BoundingBox3D, Point3, PointCloud};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Number of raw per-voxel input features.
pub const VOXEL_INPUT_FEATURES: usize = 6;
/// Regression channels: dx, dy, z, log w, log l, log h, sin yaw, cos yaw.
pub const REG_CHANNELS: usize = 8;
/// Heatmap logit bias at init, so the initial score is about 0.1.
pub const HEATMAP_PRIOR_BIAS: f64 = -2.19;

/// Square detection range split into BEV cells, with vertical voxel slabs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridConfig {
    /// Half-width of the square range, meters.
    pub range: f64,
    /// BEV cell and voxel footprint, meters.
    pub cell: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub voxel_z: f64,
}

impl GridConfig {
    pub fn bev_size(&self) -> usize {
        (2.0 * self.range / self.cell).round() as usize
    }

    pub fn z_layers(&self) -> usize {
        ((self.z_max - self.z_min) / self.voxel_z).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.range > 0.0 && self.cell > 0.0 && self.voxel_z > 0.0 && self.z_max > self.z_min) {
            return Err(ModelError::Config(format!("degenerate grid {self:?}")));
        }
        let n = 2.0 * self.range / self.cell;
        if (n - n.round()).abs() > 1e-9 || !self.bev_size().is_multiple_of(4) {
            return Err(ModelError::Config(
                "2·range/cell must be an integer divisible by 4".into(),
            ));
        }
        Ok(())
    }

    pub fn voxel_of(&self, p: &Point3) -> Option<[i32; 3]> {
        let n = self.bev_size() as i64;
        let ix = ((p.x + self.range) / self.cell).floor() as i64;
        let iy = ((p.y + self.range) / self.cell).floor() as i64;
        let iz = ((p.z - self.z_min) / self.voxel_z).floor() as i64;
        if ix < 0 || iy < 0 || iz < 0 || ix >= n || iy >= n || iz >= self.z_layers() as i64 {
            return None;
        }
        Some([ix as i32, iy as i32, iz as i32])
    }

    pub fn voxel_center(&self, c: [i32; 3]) -> [f64; 3] {
        [
            (c[0] as f64 + 0.5) * self.cell - self.range,
            (c[1] as f64 + 0.5) * self.cell - self.range,
            (c[2] as f64 + 0.5) * self.voxel_z + self.z_min,
        ]
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> [f64; 2] {
        [
            (ix as f64 + 0.5) * self.cell - self.range,
            (iy as f64 + 0.5) * self.cell - self.range,
        ]
    }

    /// Flat BEV index `iy·W + ix`.
    pub fn cell_index(&self, c: [i32; 3]) -> usize {
        c[1] as usize * self.bev_size() + c[0] as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RpnKind {
    MultiScale,
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub grid: GridConfig,
    pub num_classes: usize,
    pub voxel_channels: usize,
    pub rpn: RpnKind,
    /// MS-RPN group widths at scales 1, 1/2 and 1/4.
    pub widths: [usize; 3],
    pub bottleneck: usize,
    /// Channels of the fused map fed to the head.
    pub fused_channels: usize,
    pub head_channels: usize,
    /// Raw RPN block widths, strides and extra convs per block.
    pub raw_widths: [usize; 2],
    pub raw_strides: [usize; 2],
    pub raw_extra_convs: usize,
}

impl ModelConfig {
    /// The configuration used by the acceptance experiments: ±12 m at 0.5 m cells.
    pub fn bench() -> Self {
        ModelConfig {
            grid: GridConfig {
                range: 12.0,
                cell: 0.5,
                z_min: -0.5,
                z_max: 2.5,
                voxel_z: 0.5,
            },
            num_classes: 3,
            voxel_channels: 16,
            rpn: RpnKind::MultiScale,
            widths: [8, 16, 32],
            bottleneck: 8,
            fused_channels: 16,
            head_channels: 16,
            raw_widths: [16, 32],
            raw_strides: [1, 2],
            raw_extra_convs: 2,
        }
    }

    /// ±16 m at 0.25 m cells with the full desk widths.
    pub fn desk() -> Self {
        ModelConfig {
            grid: GridConfig {
                range: 16.0,
                cell: 0.25,
                z_min: -0.5,
                z_max: 2.5,
                voxel_z: 0.25,
            },
            num_classes: 3,
            voxel_channels: 32,
            rpn: RpnKind::MultiScale,
            widths: [64, 128, 256],
            bottleneck: 64,
            fused_channels: 128,
            head_channels: 64,
            raw_widths: [128, 256],
            raw_strides: [1, 2],
            raw_extra_convs: 2,
        }
    }

    /// Tiny shapes for finite-difference checks (32×32 BEV).
    pub fn toy() -> Self {
        ModelConfig {
            grid: GridConfig {
                range: 8.0,
                cell: 0.5,
                z_min: -0.5,
                z_max: 2.5,
                voxel_z: 1.0,
            },
            num_classes: 2,
            voxel_channels: 8,
            rpn: RpnKind::MultiScale,
            widths: [2, 3, 4],
            bottleneck: 2,
            fused_channels: 4,
            head_channels: 3,
            raw_widths: [2, 3],
            raw_strides: [1, 2],
            raw_extra_convs: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.num_classes == 0 || self.voxel_channels == 0 || !self.voxel_channels.is_multiple_of(8) {
            return Err(ModelError::Config(
                "need at least one class and voxel channels divisible by the 8 attention heads".into(),
            ));
        }
        let all = self.widths.iter().chain(&self.raw_widths);
        if all
            .chain([&self.bottleneck, &self.fused_channels, &self.head_channels])
            .any(|&w| w == 0)
        {
            return Err(ModelError::Config("channel widths must be positive".into()));
        }
        if self.rpn == RpnKind::Raw && !self.fused_channels.is_multiple_of(2) {
            return Err(ModelError::Config("raw RPN needs an even fused width".into()));
        }
        if self.raw_strides.iter().any(|s| !matches!(s, 1 | 2)) {
            return Err(ModelError::Config("raw RPN strides must be 1 or 2".into()));
        }
        Ok(())
    }
}

/// Occupied voxels with row-aligned features.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVoxelGrid {
    pub grid: GridConfig,
    /// Unique coordinates in lexicographic order.
    pub coords: Vec<[i32; 3]>,
    pub counts: Vec<usize>,
    /// `[n × VOXEL_INPUT_FEATURES]`
    pub features: Tensor,
}

impl SparseVoxelGrid {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn row_of(&self, c: [i32; 3]) -> Option<usize> {
        self.coords.binary_search(&c).ok()
    }

    pub fn centers(&self) -> Vec<[f64; 3]> {
        self.coords.iter().map(|&c| self.grid.voxel_center(c)).collect()
    }
}

/// Bucket points into voxels. Features per voxel: mean offset of the points
/// from the voxel center (in voxel units), mean intensity, log-normalized
/// point count and normalized voxel height.
pub fn voxelize(cloud: &PointCloud, grid: &GridConfig) -> SparseVoxelGrid {
    let mut acc: HashMap<[i32; 3], [f64; 5]> = HashMap::new();
    for p in &cloud.points {
        if let Some(c) = grid.voxel_of(p) {
            let a = acc.entry(c).or_insert([0.0; 5]);
            a[0] += p.x;
            a[1] += p.y;
            a[2] += p.z;
            a[3] += p.intensity;
            a[4] += 1.0;
        }
    }
    let mut coords: Vec<[i32; 3]> = acc.keys().copied().collect();
    coords.sort_unstable();
    let size = [grid.cell, grid.cell, grid.voxel_z];
    let mut data = Vec::with_capacity(coords.len() * VOXEL_INPUT_FEATURES);
    let mut counts = Vec::with_capacity(coords.len());
    for c in &coords {
        let a = acc[c];
        let n = a[4];
        let center = grid.voxel_center(*c);
        for d in 0..3 {
            data.push((a[d] / n - center[d]) / size[d]);
        }
        data.push(a[3] / n);
        data.push((1.0 + n).ln() / 65f64.ln());
        data.push((center[2] - grid.z_min) / (grid.z_max - grid.z_min));
        counts.push(n as usize);
    }
    let n = coords.len();
    SparseVoxelGrid {
        grid: *grid,
        coords,
        counts,
        features: Tensor::new(vec![n, VOXEL_INPUT_FEATURES], data).expect("row-aligned features"),
    }
}

/// Row lists averaging each voxel's occupied 6-connected neighbours.
pub fn neighbor_rows(coords: &[[i32; 3]]) -> Vec<Vec<(usize, f64)>> {
    let index: HashMap<[i32; 3], usize> = coords.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    const OFFSETS: [[i32; 3]; 6] = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];
    coords
        .iter()
        .map(|c| {
            let nb: Vec<usize> = OFFSETS
                .iter()
                .filter_map(|o| index.get(&[c[0] + o[0], c[1] + o[1], c[2] + o[2]]).copied())
                .collect();
            let w = 1.0 / nb.len().max(1) as f64;
            nb.into_iter().map(|i| (i, w)).collect()
        })
        .collect()
}

/// Parameter initialization helper.
struct Init<'a> {
    store: &'a mut ParamStore,
    rng: Rng,
}

impl Init<'_> {
    fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| std * self.rng.normal()).collect();
        Ok(self.store.add(name, Tensor::new(shape.to_vec(), data)?)?)
    }

    /// Conv weight `[cout × cin × k × k]` with He scaling.
    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) -> Result<ParamId> {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        self.normal(name, &[cout, cin, k, k], std)
    }

    /// Deconv weight `[cin × cout × k × k]`.
    fn deconv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<ParamId> {
        let std = (2.0 * (stride * stride) as f64 / (cin * k * k) as f64).sqrt();
        self.normal(name, &[cin, cout, k, k], std)
    }

    /// Linear weight `[in × out]`.
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let std = (2.0 / fan_in as f64).sqrt();
        self.normal(name, &[fan_in, fan_out], std)
    }

    fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        Ok(self.store.add(name, Tensor::full(shape, value))?)
    }
}

/// Bind every parameter of a store into a graph, indexed by `ParamId`.
pub fn bind(g: &mut Graph, params: &Params<'_>) -> Vec<Var> {
    params.store.iter().map(|(id, _, _)| g.param(params, id)).collect()
}

fn w(ws: &[Var], id: ParamId) -> Var {
    ws[id.index()]
}

fn conv_relu(g: &mut Graph, x: Var, weight: Var, stride: usize) -> Result<Var> {
    let y = g.conv2d(x, weight, stride, 1)?;
    Ok(g.relu(y))
}

fn conv1x1(g: &mut Graph, x: Var, weight: Var) -> Result<Var> {
    Ok(g.conv2d(x, weight, 1, 0)?)
}

#[derive(Debug, Clone)]
pub struct VoxelEncoder {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub mix_w: ParamId,
    pub mix_b: ParamId,
}

impl VoxelEncoder {
    fn new(init: &mut Init<'_>, c: usize) -> Result<Self> {
        Ok(VoxelEncoder {
            w1: init.linear("vfe.l1.w", VOXEL_INPUT_FEATURES, c)?,
            b1: init.constant("vfe.l1.b", &[c], 0.0)?,
            w2: init.linear("vfe.l2.w", c, c)?,
            b2: init.constant("vfe.l2.b", &[c], 0.0)?,
            mix_w: init.linear("vfe.mix.w", 2 * c, c)?,
            mix_b: init.constant("vfe.mix.b", &[c], 0.0)?,
        })
    }

    /// Two-layer per-voxel MLP, then concatenation with the mean of occupied
    /// 6-neighbours and a linear mix. Output `[n × C]`; rows stay aligned with
    /// the input coordinates.
    pub fn forward(&self, g: &mut Graph, ws: &[Var], input: Var, neighbors: Vec<Vec<(usize, f64)>>) -> Result<Var> {
        let h = g.matmul(input, w(ws, self.w1))?;
        let h = g.add_row_bias(h, w(ws, self.b1))?;
        let h = g.relu(h);
        let h = g.matmul(h, w(ws, self.w2))?;
        let h = g.add_row_bias(h, w(ws, self.b2))?;
        let h = g.relu(h);
        let nb = g.aggregate_rows(h, neighbors)?;
        let cat = g.concat(&[h, nb], 1)?;
        let m = g.matmul(cat, w(ws, self.mix_w))?;
        let m = g.add_row_bias(m, w(ws, self.mix_b))?;
        Ok(g.relu(m))
    }
}

/// Multi-scale RPN output: the fused map plus the four distillation levels
/// (three mid-bottleneck maps and the fused map), all at input resolution.
#[derive(Debug, Clone)]
pub struct RpnOutput {
    pub fused: Var,
    pub levels: Vec<Var>,
    /// Per-scale fusion weights `[3 × H × W]`, when the RPN has them.
    pub spatial_weights: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct MsRpn {
    pub groups: [[ParamId; 3]; 3],
    pub deconv32: ParamId,
    pub deconv21: ParamId,
    pub down: [ParamId; 3],
    pub up: [ParamId; 3],
    pub spatial: [ParamId; 3],
}

impl MsRpn {
    fn new(init: &mut Init<'_>, cin: usize, widths: [usize; 3], bottleneck: usize, out: usize) -> Result<Self> {
        let mut groups = [[ParamId::default(); 3]; 3];
        let mut prev = cin;
        for (s, &wd) in widths.iter().enumerate() {
            for (j, slot) in groups[s].iter_mut().enumerate() {
                *slot = init.conv(&format!("rpn.g{s}.c{j}"), wd, if j == 0 { prev } else { wd }, 3)?;
            }
            prev = wd;
        }
        let deconv32 = init.deconv("rpn.up32", widths[2], widths[1], 3, 2)?;
        let deconv21 = init.deconv("rpn.up21", widths[1], widths[0], 3, 2)?;
        let mut down = [ParamId::default(); 3];
        let mut up = [ParamId::default(); 3];
        let mut spatial = [ParamId::default(); 3];
        for s in 0..3 {
            down[s] = init.conv(&format!("rpn.bn{s}.down"), bottleneck, widths[s], 1)?;
            up[s] = init.conv(&format!("rpn.bn{s}.up"), out, bottleneck, 1)?;
            spatial[s] = init.conv(&format!("rpn.sw{s}"), 1, out, 1)?;
        }
        Ok(MsRpn {
            groups,
            deconv32,
            deconv21,
            down,
            up,
            spatial,
        })
    }

    /// Scalar count for a given shape, without building the network.
    pub fn param_count(cin: usize, widths: [usize; 3], bottleneck: usize, out: usize) -> usize {
        let mut n = 0;
        let mut prev = cin;
        for &wd in &widths {
            n += 9 * (prev * wd + 2 * wd * wd);
            prev = wd;
        }
        n += 9 * (widths[2] * widths[1] + widths[1] * widths[0]);
        n += widths
            .iter()
            .map(|&wd| wd * bottleneck + bottleneck * out + out)
            .sum::<usize>();
        n
    }

    pub fn forward(&self, g: &mut Graph, ws: &[Var], bev: Var) -> Result<RpnOutput> {
        let (h, wd) = {
            let s = g.shape(bev);
            (s[1], s[2])
        };
        let mut x = bev;
        let mut scales = Vec::with_capacity(3);
        for (s, group) in self.groups.iter().enumerate() {
            for (j, &id) in group.iter().enumerate() {
                let stride = if s > 0 && j == 0 { 2 } else { 1 };
                x = conv_relu(g, x, w(ws, id), stride)?;
            }
            scales.push(x);
        }
        // top-down enrichment: coarse semantics added into finer scales
        let d3 = g.deconv2d(scales[2], w(ws, self.deconv32), 2, 1, 1)?;
        let d3 = g.relu(d3);
        let e2 = g.add(scales[1], d3)?;
        let d2 = g.deconv2d(e2, w(ws, self.deconv21), 2, 1, 1)?;
        let d2 = g.relu(d2);
        let e1 = g.add(scales[0], d2)?;
        let enriched = [
            e1,
            g.bilinear_upsample(e2, h, wd)?,
            g.bilinear_upsample(scales[2], h, wd)?,
        ];

        let mut mids = Vec::with_capacity(3);
        let mut outs = Vec::with_capacity(3);
        let mut logits = Vec::with_capacity(3);
        for (s, &e) in enriched.iter().enumerate() {
            let m = conv1x1(g, e, w(ws, self.down[s]))?;
            let m = g.relu(m);
            let o = conv1x1(g, m, w(ws, self.up[s]))?;
            let o = g.relu(o);
            logits.push(conv1x1(g, o, w(ws, self.spatial[s]))?);
            mids.push(m);
            outs.push(o);
        }
        let stacked = g.concat(&logits, 0)?;
        let weights = g.softmax(stacked, 0)?;
        let mut fused = None;
        for (s, &o) in outs.iter().enumerate() {
            let ws_s = g.slice(weights, 0, s, 1)?;
            let term = g.mul_broadcast(o, ws_s)?;
            fused = Some(match fused {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        let fused = fused.expect("three scales");
        mids.push(fused);
        Ok(RpnOutput {
            fused,
            levels: mids,
            spatial_weights: Some(weights),
        })
    }
}

/// Two-block RPN baseline: each block is a (possibly strided) conv plus
/// extra convs, and each block is deconvolved back to input resolution.
#[derive(Debug, Clone)]
pub struct RawRpn {
    pub blocks: [Vec<ParamId>; 2],
    pub ups: [ParamId; 2],
    pub strides: [usize; 2],
}

impl RawRpn {
    fn new(
        init: &mut Init<'_>,
        cin: usize,
        widths: [usize; 2],
        strides: [usize; 2],
        extra: usize,
        up: usize,
    ) -> Result<Self> {
        let mut blocks = [Vec::new(), Vec::new()];
        let mut prev = cin;
        for b in 0..2 {
            for j in 0..=extra {
                let from = if j == 0 { prev } else { widths[b] };
                blocks[b].push(init.conv(&format!("rpn.b{b}.c{j}"), widths[b], from, 3)?);
            }
            prev = widths[b];
        }
        // block b sits at total stride strides[0]·…·strides[b]; its deconv undoes that
        let total = [strides[0], strides[0] * strides[1]];
        let ups = [
            init.deconv("rpn.up0", widths[0], up, total[0], total[0])?,
            init.deconv("rpn.up1", widths[1], up, total[1], total[1])?,
        ];
        Ok(RawRpn { blocks, ups, strides })
    }

    pub fn param_count(cin: usize, widths: [usize; 2], strides: [usize; 2], extra: usize, up: usize) -> usize {
        let total = [strides[0], strides[0] * strides[1]];
        let mut n = 0;
        let mut prev = cin;
        for b in 0..2 {
            n += 9 * (prev * widths[b] + extra * widths[b] * widths[b]);
            n += widths[b] * up * total[b] * total[b];
            prev = widths[b];
        }
        n
    }

    pub fn forward(&self, g: &mut Graph, ws: &[Var], bev: Var) -> Result<RpnOutput> {
        let mut x = bev;
        let mut ups = Vec::with_capacity(2);
        let mut total = 1;
        for b in 0..2 {
            for (j, &id) in self.blocks[b].iter().enumerate() {
                let stride = if j == 0 { self.strides[b] } else { 1 };
                x = conv_relu(g, x, w(ws, id), stride)?;
            }
            total *= self.strides[b];
            let u = g.deconv2d(x, w(ws, self.ups[b]), total, 0, 0)?;
            ups.push(g.relu(u));
        }
        let fused = g.concat(&ups, 0)?;
        Ok(RpnOutput {
            fused,
            levels: vec![fused],
            spatial_weights: None,
        })
    }
}

#[derive(Debug, Clone)]
pub enum Rpn {
    MultiScale(MsRpn),
    Raw(RawRpn),
}

#[derive(Debug, Clone)]
pub struct DetectionHead {
    pub shared_w: ParamId,
    pub shared_b: ParamId,
    pub heat_w: ParamId,
    pub heat_b: ParamId,
    pub reg_w: ParamId,
    pub reg_b: ParamId,
}

/// Head outputs: heatmap logits `[K × H × W]` and regression `[8 × H × W]`.
#[derive(Debug, Clone, Copy)]
pub struct ResponseVars {
    pub heat_logits: Var,
    pub reg: Var,
}

impl DetectionHead {
    fn new(init: &mut Init<'_>, cin: usize, mid: usize, classes: usize) -> Result<Self> {
        Ok(DetectionHead {
            shared_w: init.conv("head.shared.w", mid, cin, 3)?,
            shared_b: init.constant("head.shared.b", &[mid], 0.0)?,
            heat_w: init.normal("head.heat.w", &[classes, mid, 1, 1], 0.01)?,
            heat_b: init.constant("head.heat.b", &[classes], HEATMAP_PRIOR_BIAS)?,
            reg_w: init.normal("head.reg.w", &[REG_CHANNELS, mid, 1, 1], 0.01)?,
            reg_b: init.constant("head.reg.b", &[REG_CHANNELS], 0.0)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, ws: &[Var], fused: Var) -> Result<ResponseVars> {
        let s = g.conv2d(fused, w(ws, self.shared_w), 1, 1)?;
        let s = g.add_channel_bias(s, w(ws, self.shared_b))?;
        let s = g.relu(s);
        let hm = conv1x1(g, s, w(ws, self.heat_w))?;
        let heat_logits = g.add_channel_bias(hm, w(ws, self.heat_b))?;
        let r = conv1x1(g, s, w(ws, self.reg_w))?;
        let reg = g.add_channel_bias(r, w(ws, self.reg_b))?;
        Ok(ResponseVars { heat_logits, reg })
    }
}

/// Everything a forward pass exposes to the losses.
#[derive(Debug, Clone)]
pub struct DetectorOutput {
    /// Encoded voxel features `[n × C]`, `None` for an empty grid.
    pub voxel_features: Option<Var>,
    pub bev: Var,
    pub rpn: RpnOutput,
    pub responses: ResponseVars,
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub config: ModelConfig,
    pub encoder: VoxelEncoder,
    pub rpn: Rpn,
    pub head: DetectionHead,
}

impl Detector {
    /// Build the network and a freshly initialized parameter store.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: Rng::stream(seed, &[0x1417]),
        };
        let c = config.voxel_channels;
        let encoder = VoxelEncoder::new(&mut init, c)?;
        let rpn = match config.rpn {
            RpnKind::MultiScale => Rpn::MultiScale(MsRpn::new(
                &mut init,
                c,
                config.widths,
                config.bottleneck,
                config.fused_channels,
            )?),
            RpnKind::Raw => Rpn::Raw(RawRpn::new(
                &mut init,
                c,
                config.raw_widths,
                config.raw_strides,
                config.raw_extra_convs,
                config.fused_channels / 2,
            )?),
        };
        let head = DetectionHead::new(
            &mut init,
            config.fused_channels,
            config.head_channels,
            config.num_classes,
        )?;
        Ok((
            Detector {
                config,
                encoder,
                rpn,
                head,
            },
            store,
        ))
    }

    pub fn bev_shape(&self) -> (usize, usize) {
        let n = self.config.grid.bev_size();
        (n, n)
    }

    /// Channel counts of the distillation levels.
    pub fn level_channels(&self) -> Vec<usize> {
        match self.rpn {
            Rpn::MultiScale(_) => vec![
                self.config.bottleneck,
                self.config.bottleneck,
                self.config.bottleneck,
                self.config.fused_channels,
            ],
            Rpn::Raw(_) => vec![self.config.fused_channels],
        }
    }

    pub fn forward(&self, g: &mut Graph, ws: &[Var], grid: &SparseVoxelGrid) -> Result<DetectorOutput> {
        let (h, wd) = self.bev_shape();
        let c = self.config.voxel_channels;
        let (voxel_features, bev) = if grid.is_empty() {
            (None, g.constant(Tensor::zeros(&[c, h, wd])))
        } else {
            let input = g.constant(grid.features.clone());
            let f = self.encoder.forward(g, ws, input, neighbor_rows(&grid.coords))?;
            let cells: Vec<usize> = grid.coords.iter().map(|&k| self.config.grid.cell_index(k)).collect();
            let bev = g.scatter_max(f, &cells, h, wd)?;
            (Some(f), bev)
        };
        let rpn = match &self.rpn {
            Rpn::MultiScale(m) => m.forward(g, ws, bev)?,
            Rpn::Raw(r) => r.forward(g, ws, bev)?,
        };
        let responses = self.head.forward(g, ws, rpn.fused)?;
        Ok(DetectorOutput {
            voxel_features,
            bev,
            rpn,
            responses,
        })
    }

    /// Inference without gradients.
    pub fn predict(&self, store: &ParamStore, grid: &SparseVoxelGrid) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let ws = bind(&mut g, &Params::frozen(store));
        let out = self.forward(&mut g, &ws, grid)?;
        let heat = g.sigmoid(out.responses.heat_logits);
        Ok((g.value(heat).clone(), g.value(out.responses.reg).clone()))
    }
}

/// CenterNet Gaussian radius for a box of `height × width` cells.
pub fn gaussian_radius(height: f64, width: f64, min_overlap: f64) -> f64 {
    let (h, w, o) = (height, width, min_overlap);
    let b1 = h + w;
    let c1 = w * h * (1.0 - o) / (1.0 + o);
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;
    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - o) * w * h;
    let r2 = (b2 + (b2 * b2 - 16.0 * c2).sqrt()) / 2.0;
    let a3 = 4.0 * o;
    let b3 = -2.0 * o * (h + w);
    let c3 = (o - 1.0) * w * h;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;
    r1.min(r2).min(r3)
}

pub const MIN_OVERLAP: f64 = 0.7;
pub const MIN_RADIUS: usize = 1;

/// Integer splat radius in cells for a box on `grid`.
pub fn box_radius(b: &BoundingBox3D, grid: &GridConfig) -> usize {
    let r = gaussian_radius(b.length() / grid.cell, b.width() / grid.cell, MIN_OVERLAP);
    (r.floor().max(0.0) as usize).max(MIN_RADIUS)
}

/// Supervision targets for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    /// `[K × H × W]` Gaussian heatmap.
    pub heatmap: Tensor,
    /// Flat BEV center cell of each regressed object.
    pub centers: Vec<usize>,
    pub classes: Vec<u32>,
    /// `[centers × 8]`
    pub regression: Tensor,
}

/// Center cell and regression target of a box, `None` when outside the map.
pub fn encode_box(b: &BoundingBox3D, grid: &GridConfig) -> Option<(usize, [f64; REG_CHANNELS])> {
    let n = grid.bev_size() as f64;
    let fx = (b.center[0] + grid.range) / grid.cell;
    let fy = (b.center[1] + grid.range) / grid.cell;
    if !(fx >= 0.0 && fy >= 0.0 && fx < n && fy < n) {
        return None;
    }
    let (ix, iy) = (fx.floor(), fy.floor());
    let cell = iy as usize * n as usize + ix as usize;
    Some((
        cell,
        [
            fx - ix,
            fy - iy,
            b.center[2],
            b.width().ln(),
            b.length().ln(),
            b.height().ln(),
            b.yaw.sin(),
            b.yaw.cos(),
        ],
    ))
}

/// Inverse of [`encode_box`] at a flat cell.
pub fn decode_box(cell: usize, r: &[f64], grid: &GridConfig, class_id: u32) -> BoundingBox3D {
    let n = grid.bev_size();
    let (ix, iy) = ((cell % n) as f64, (cell / n) as f64);
    let size = [
        r[3].clamp(-5.0, 5.0).exp(),
        r[4].clamp(-5.0, 5.0).exp(),
        r[5].clamp(-5.0, 5.0).exp(),
    ];
    let x = (ix + r[0]) * grid.cell - grid.range;
    let y = (iy + r[1]) * grid.cell - grid.range;
    let yaw = if r[6] == 0.0 && r[7] == 0.0 {
        0.0
    } else {
        r[6].atan2(r[7])
    };
    BoundingBox3D::new([x, y, r[2]], size, wrap_angle(yaw), class_id, 0)
        .unwrap_or_else(|_| BoundingBox3D::new([0.0; 3], [1e-3; 3], 0.0, class_id, 0).expect("fallback box"))
}

pub fn build_gt_heatmap(boxes: &[BoundingBox3D], grid: &GridConfig, num_classes: usize) -> Tensor {
    let n = grid.bev_size();
    let mut heat = Tensor::zeros(&[num_classes, n, n]);
    let d = heat.data_mut();
    for b in boxes {
        let k = b.class_id as usize;
        if k >= num_classes {
            continue;
        }
        let Some((cell, _)) = encode_box(b, grid) else {
            continue;
        };
        let (cx, cy) = ((cell % n) as i64, (cell / n) as i64);
        let r = box_radius(b, grid) as i64;
        let sigma = r as f64 / 3.0;
        for y in (cy - r).max(0)..=(cy + r).min(n as i64 - 1) {
            for x in (cx - r).max(0)..=(cx + r).min(n as i64 - 1) {
                let (dx, dy) = ((x - cx) as f64, (y - cy) as f64);
                let v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                let slot = &mut d[(k * n + y as usize) * n + x as usize];
                *slot = slot.max(v);
            }
        }
    }
    heat
}

pub fn build_targets(boxes: &[BoundingBox3D], grid: &GridConfig, num_classes: usize) -> Targets {
    let heatmap = build_gt_heatmap(boxes, grid, num_classes);
    let mut centers = Vec::new();
    let mut classes = Vec::new();
    let mut reg = Vec::new();
    for b in boxes {
        if b.class_id as usize >= num_classes {
            continue;
        }
        if let Some((cell, r)) = encode_box(b, grid) {
            if centers.contains(&cell) {
                continue;
            }
            centers.push(cell);
            classes.push(b.class_id);
            reg.extend_from_slice(&r);
        }
    }
    let m = centers.len();
    Targets {
        heatmap,
        centers,
        classes,
        regression: Tensor::new(vec![m, REG_CHANNELS], reg).expect("row-aligned targets"),
    }
}

/// Cells whose centers fall inside any box footprint.
pub fn footprint_cells(boxes: &[BoundingBox3D], grid: &GridConfig) -> Vec<usize> {
    let n = grid.bev_size();
    let mut mask = vec![false; n * n];
    for b in boxes {
        let r = b.length().hypot(b.width()) / 2.0;
        let lo = |v: f64| (((v - r + grid.range) / grid.cell).floor().max(0.0) as usize).min(n);
        let hi = |v: f64| (((v + r + grid.range) / grid.cell).ceil().max(0.0) as usize).min(n);
        for iy in lo(b.center[1])..hi(b.center[1]) {
            for ix in lo(b.center[0])..hi(b.center[0]) {
                let [x, y] = grid.cell_center(ix, iy);
                if b.contains([x, y, b.center[2]], 0.0) {
                    mask[iy * n + ix] = true;
                }
            }
        }
    }
    mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
}

/// A decoded detection.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox3D,
    pub score: f64,
}

/// 3×3 local-maximum peaks above `threshold`, highest score first.
pub fn decode_detections(
    heat: &Tensor,
    reg: &Tensor,
    grid: &GridConfig,
    threshold: f64,
    max_det: usize,
) -> Vec<Detection> {
    let s = heat.shape();
    let (k, h, wd) = (s[0], s[1], s[2]);
    let plane = h * wd;
    let d = heat.data();
    let r = reg.data();
    let mut peaks: Vec<(f64, usize, usize)> = Vec::new();
    for c in 0..k {
        let m = &d[c * plane..(c + 1) * plane];
        for y in 0..h {
            for x in 0..wd {
                let v = m[y * wd + x];
                if v < threshold {
                    continue;
                }
                let mut is_max = true;
                'nb: for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(wd - 1) {
                        let u = m[ny * wd + nx];
                        // plateaus keep only their first cell
                        if u > v || (u == v && ny * wd + nx < y * wd + x) {
                            is_max = false;
                            break 'nb;
                        }
                    }
                }
                if is_max {
                    peaks.push((v, c, y * wd + x));
                }
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    peaks.truncate(max_det);
    peaks
        .into_iter()
        .map(|(score, c, cell)| {
            let v: Vec<f64> = (0..REG_CHANNELS).map(|ch| r[ch * plane + cell]).collect();
            Detection {
                bbox: decode_box(cell, &v, grid, c as u32),
                score,
            }
        })
        .collect()
}

/// Focal heatmap loss and L1 regression loss at GT centers (summed over
/// channels, averaged over objects), returned separately.
pub fn supervised_loss(g: &mut Graph, responses: &ResponseVars, targets: &Targets) -> Result<(Var, Var)> {
    let cls = g.focal_loss(responses.heat_logits, &targets.heatmap)?;
    let reg = if targets.centers.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let pred = g.gather_cells(responses.reg, &targets.centers)?;
        let tgt = g.constant(targets.regression.clone());
        let l1 = g.smooth_l1(pred, tgt, 0.0)?;
        let s = g.sum(l1);
        g.scale(s, 1.0 / targets.centers.len() as f64)
    };
    Ok((cls, reg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_voxel_has_zero_offset() {
        let grid = ModelConfig::bench().grid;
        let c = grid.voxel_center([10, 20, 2]);
        let cloud = PointCloud::new(0, vec![Point3::new(c[0], c[1], c[2], 0.5)]);
        let v = voxelize(&cloud, &grid);
        assert_eq!(v.coords, vec![[10, 20, 2]]);
        assert_eq!(&v.features.data()[..4], &[0.0, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn paper_width_param_ratio() {
        let ms = MsRpn::param_count(256, [64, 128, 256], 64, 128);
        let raw = RawRpn::param_count(256, [128, 256], [1, 2], 5, 256);
        assert!((ms as f64) < 0.6 * raw as f64, "{ms} vs {raw}");
    }

    #[test]
    fn radius_has_floor() {
        let grid = ModelConfig::bench().grid;
        let b = BoundingBox3D::new([0.0, 0.0, 0.9], [0.1, 0.1, 1.8], 0.0, 1, 1).unwrap();
        assert_eq!(box_radius(&b, &grid), MIN_RADIUS);
    }
}
