//! Run configuration in a small INI dialect: `[section]` headers,
//! `key = value` lines, `#` or `;` comments. Unknown sections and keys are
//! rejected. [`RunConfig::to_ini`] writes every key, and parsing that text
//! gives back an identical config.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::backbone::{ModelConfig, RpnKind};
use crate::distill::DistillWeights;
use crate::fusion::FusionParams;
use crate::geom::IouMode;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("line {line}: unknown key '{section}.{key}'")]
    UnknownKey { line: usize, section: String, key: String },
    #[error("line {line}: bad value for '{section}.{key}': {reason}")]
    BadValue {
        line: usize,
        section: String,
        key: String,
        reason: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherKind {
    MultiFrame,
    SingleFrame,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub seed: u64,
    pub train_sequences: usize,
    pub eval_sequences: usize,
    pub frames: usize,
    pub objects: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillSwitches {
    pub voxel: bool,
    pub bev: bool,
    pub rsp: bool,
    pub teacher: TeacherKind,
    pub context_margin: f64,
    pub iou_mode: IouMode,
}

impl DistillSwitches {
    pub fn any(&self) -> bool {
        self.voxel || self.bev || self.rsp
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub teacher_steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip: f64,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub score_threshold: f64,
    pub max_det: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub fusion: FusionParams,
    pub model: ModelConfig,
    pub weights: DistillWeights,
    pub distill: DistillSwitches,
    pub train: TrainConfig,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig {
                seed: 7,
                train_sequences: 4,
                eval_sequences: 2,
                frames: 20,
                objects: 6,
            },
            fusion: FusionParams::default(),
            model: ModelConfig::bench(),
            weights: DistillWeights::default(),
            distill: DistillSwitches {
                voxel: true,
                bev: true,
                rsp: true,
                teacher: TeacherKind::MultiFrame,
                context_margin: 0.8,
                iou_mode: IouMode::ThreeD,
            },
            train: TrainConfig {
                steps: 400,
                teacher_steps: 400,
                batch: 2,
                lr: 0.005,
                momentum: 0.9,
                weight_decay: 1e-4,
                clip: 10.0,
                seeds: vec![1, 2, 3],
            },
            eval: EvalSettings {
                score_threshold: 0.05,
                max_det: 60,
            },
        }
    }
}

/// Every key with a one-line description, in file order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("data", "seed", "base seed of the synthetic benchmark"),
    ("data", "train_sequences", "number of training sequences"),
    ("data", "eval_sequences", "number of evaluation sequences"),
    ("data", "frames", "frames per sequence"),
    ("data", "objects", "objects per sequence"),
    ("fusion", "group_size", "frames per fusion group"),
    ("fusion", "voxel", "fusion grid size x,y,z in meters"),
    ("fusion", "max_per_voxel", "points kept per fusion voxel"),
    ("fusion", "denoise", "fraction of fused points removed as outliers"),
    ("model", "range", "half-width of the square detection range, meters"),
    ("model", "cell", "BEV cell size, meters"),
    ("model", "z_min", "lowest voxel boundary, meters"),
    ("model", "z_max", "highest voxel boundary, meters"),
    ("model", "voxel_z", "voxel height, meters"),
    ("model", "classes", "number of object classes"),
    ("model", "voxel_channels", "encoded voxel feature width"),
    ("model", "rpn", "ms (multi-scale) or raw"),
    ("model", "widths", "multi-scale group widths s1,s2,s3"),
    ("model", "bottleneck", "bottleneck width"),
    ("model", "fused_channels", "width of the map fed to the head"),
    ("model", "head_channels", "width of the shared head conv"),
    ("model", "raw_widths", "raw RPN block widths"),
    ("model", "raw_strides", "raw RPN block strides"),
    ("model", "raw_extra_convs", "extra convs per raw RPN block"),
    ("distill", "tau", "heatmap foreground threshold"),
    ("distill", "pi1", "classification response weight"),
    ("distill", "pi2", "regression response weight"),
    ("distill", "alpha", "supervised regression weight"),
    ("distill", "beta", "voxel distillation weight"),
    ("distill", "lambda", "BEV distillation weight"),
    ("distill", "mu", "response distillation weight"),
    ("distill", "voxel", "enable voxel distillation"),
    ("distill", "bev", "enable BEV distillation"),
    ("distill", "rsp", "enable response distillation"),
    ("distill", "teacher", "multi or single (frame input of the teacher)"),
    (
        "distill",
        "context_margin",
        "GT box enlargement for voxel selection, meters",
    ),
    ("distill", "iou", "3d or bev overlap for regression weights"),
    ("train", "steps", "student optimizer steps"),
    ("train", "teacher_steps", "teacher optimizer steps"),
    ("train", "batch", "frames per step"),
    ("train", "lr", "peak learning rate (cosine schedule)"),
    ("train", "momentum", "SGD momentum"),
    ("train", "weight_decay", "L2 weight decay"),
    ("train", "clip", "gradient norm clip"),
    ("train", "seeds", "comma-separated training seeds"),
    ("eval", "score_threshold", "minimum detection score"),
    ("eval", "max_det", "detections kept per frame"),
];

fn parse<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true/false, got '{v}'")),
    }
}

fn parse_list<T, const N: usize>(v: &str) -> Result<[T; N], String>
where
    T: FromStr + Copy + Default,
    T::Err: std::fmt::Display,
{
    let items: Vec<&str> = v.split(',').map(str::trim).collect();
    if items.len() != N {
        return Err(format!("expected {N} comma-separated values"));
    }
    let mut out = [T::default(); N];
    for (slot, s) in out.iter_mut().zip(items) {
        *slot = parse(s)?;
    }
    Ok(out)
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') || l.starts_with(';') {
                continue;
            }
            if let Some(rest) = l.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or(ConfigError::Syntax {
                    line,
                    reason: "unterminated section header".into(),
                })?;
                section = name.trim().to_string();
                if !KEYS.iter().any(|k| k.0 == section) {
                    return Err(ConfigError::Syntax {
                        line,
                        reason: format!("unknown section [{section}]"),
                    });
                }
                continue;
            }
            let (key, value) = l.split_once('=').ok_or(ConfigError::Syntax {
                line,
                reason: "expected key = value".into(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(&section, key, value).map_err(|e| match e {
                None => ConfigError::UnknownKey {
                    line,
                    section: section.clone(),
                    key: key.to_string(),
                },
                Some(reason) => ConfigError::BadValue {
                    line,
                    section: section.clone(),
                    key: key.to_string(),
                    reason,
                },
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Set one key. `Err(None)` means the key is unknown.
    pub fn set(&mut self, section: &str, key: &str, v: &str) -> Result<(), Option<String>> {
        let m = &mut self.model;
        match (section, key) {
            ("data", "seed") => self.data.seed = parse(v)?,
            ("data", "train_sequences") => self.data.train_sequences = parse(v)?,
            ("data", "eval_sequences") => self.data.eval_sequences = parse(v)?,
            ("data", "frames") => self.data.frames = parse(v)?,
            ("data", "objects") => self.data.objects = parse(v)?,
            ("fusion", "group_size") => self.fusion.group_size = parse(v)?,
            ("fusion", "voxel") => self.fusion.voxel = parse_list(v)?,
            ("fusion", "max_per_voxel") => self.fusion.max_per_voxel = parse(v)?,
            ("fusion", "denoise") => self.fusion.denoise = parse(v)?,
            ("model", "range") => m.grid.range = parse(v)?,
            ("model", "cell") => m.grid.cell = parse(v)?,
            ("model", "z_min") => m.grid.z_min = parse(v)?,
            ("model", "z_max") => m.grid.z_max = parse(v)?,
            ("model", "voxel_z") => m.grid.voxel_z = parse(v)?,
            ("model", "classes") => m.num_classes = parse(v)?,
            ("model", "voxel_channels") => m.voxel_channels = parse(v)?,
            ("model", "rpn") => {
                m.rpn = match v {
                    "ms" => RpnKind::MultiScale,
                    "raw" => RpnKind::Raw,
                    _ => return Err(Some(format!("expected ms or raw, got '{v}'"))),
                }
            }
            ("model", "widths") => m.widths = parse_list(v)?,
            ("model", "bottleneck") => m.bottleneck = parse(v)?,
            ("model", "fused_channels") => m.fused_channels = parse(v)?,
            ("model", "head_channels") => m.head_channels = parse(v)?,
            ("model", "raw_widths") => m.raw_widths = parse_list(v)?,
            ("model", "raw_strides") => m.raw_strides = parse_list(v)?,
            ("model", "raw_extra_convs") => m.raw_extra_convs = parse(v)?,
            ("distill", "tau") => self.weights.tau = parse(v)?,
            ("distill", "pi1") => self.weights.pi1 = parse(v)?,
            ("distill", "pi2") => self.weights.pi2 = parse(v)?,
            ("distill", "alpha") => self.weights.alpha = parse(v)?,
            ("distill", "beta") => self.weights.beta = parse(v)?,
            ("distill", "lambda") => self.weights.lambda = parse(v)?,
            ("distill", "mu") => self.weights.mu = parse(v)?,
            ("distill", "voxel") => self.distill.voxel = parse_bool(v)?,
            ("distill", "bev") => self.distill.bev = parse_bool(v)?,
            ("distill", "rsp") => self.distill.rsp = parse_bool(v)?,
            ("distill", "teacher") => {
                self.distill.teacher = match v {
                    "multi" => TeacherKind::MultiFrame,
                    "single" => TeacherKind::SingleFrame,
                    _ => return Err(Some(format!("expected multi or single, got '{v}'"))),
                }
            }
            ("distill", "context_margin") => self.distill.context_margin = parse(v)?,
            ("distill", "iou") => {
                self.distill.iou_mode = match v {
                    "3d" => IouMode::ThreeD,
                    "bev" => IouMode::Bev,
                    _ => return Err(Some(format!("expected 3d or bev, got '{v}'"))),
                }
            }
            ("train", "steps") => self.train.steps = parse(v)?,
            ("train", "teacher_steps") => self.train.teacher_steps = parse(v)?,
            ("train", "batch") => self.train.batch = parse(v)?,
            ("train", "lr") => self.train.lr = parse(v)?,
            ("train", "momentum") => self.train.momentum = parse(v)?,
            ("train", "weight_decay") => self.train.weight_decay = parse(v)?,
            ("train", "clip") => self.train.clip = parse(v)?,
            ("train", "seeds") => {
                self.train.seeds = v.split(',').map(|s| parse::<u64>(s.trim())).collect::<Result<_, _>>()?
            }
            ("eval", "score_threshold") => self.eval.score_threshold = parse(v)?,
            ("eval", "max_det") => self.eval.max_det = parse(v)?,
            _ => return Err(None),
        }
        Ok(())
    }

    fn get(&self, section: &str, key: &str) -> String {
        let m = &self.model;
        let w = &self.weights;
        match (section, key) {
            ("data", "seed") => self.data.seed.to_string(),
            ("data", "train_sequences") => self.data.train_sequences.to_string(),
            ("data", "eval_sequences") => self.data.eval_sequences.to_string(),
            ("data", "frames") => self.data.frames.to_string(),
            ("data", "objects") => self.data.objects.to_string(),
            ("fusion", "group_size") => self.fusion.group_size.to_string(),
            ("fusion", "voxel") => join(&self.fusion.voxel),
            ("fusion", "max_per_voxel") => self.fusion.max_per_voxel.to_string(),
            ("fusion", "denoise") => self.fusion.denoise.to_string(),
            ("model", "range") => m.grid.range.to_string(),
            ("model", "cell") => m.grid.cell.to_string(),
            ("model", "z_min") => m.grid.z_min.to_string(),
            ("model", "z_max") => m.grid.z_max.to_string(),
            ("model", "voxel_z") => m.grid.voxel_z.to_string(),
            ("model", "classes") => m.num_classes.to_string(),
            ("model", "voxel_channels") => m.voxel_channels.to_string(),
            ("model", "rpn") => match m.rpn {
                RpnKind::MultiScale => "ms".into(),
                RpnKind::Raw => "raw".into(),
            },
            ("model", "widths") => join(&m.widths),
            ("model", "bottleneck") => m.bottleneck.to_string(),
            ("model", "fused_channels") => m.fused_channels.to_string(),
            ("model", "head_channels") => m.head_channels.to_string(),
            ("model", "raw_widths") => join(&m.raw_widths),
            ("model", "raw_strides") => join(&m.raw_strides),
            ("model", "raw_extra_convs") => m.raw_extra_convs.to_string(),
            ("distill", "tau") => w.tau.to_string(),
            ("distill", "pi1") => w.pi1.to_string(),
            ("distill", "pi2") => w.pi2.to_string(),
            ("distill", "alpha") => w.alpha.to_string(),
            ("distill", "beta") => w.beta.to_string(),
            ("distill", "lambda") => w.lambda.to_string(),
            ("distill", "mu") => w.mu.to_string(),
            ("distill", "voxel") => self.distill.voxel.to_string(),
            ("distill", "bev") => self.distill.bev.to_string(),
            ("distill", "rsp") => self.distill.rsp.to_string(),
            ("distill", "teacher") => match self.distill.teacher {
                TeacherKind::MultiFrame => "multi".into(),
                TeacherKind::SingleFrame => "single".into(),
            },
            ("distill", "context_margin") => self.distill.context_margin.to_string(),
            ("distill", "iou") => match self.distill.iou_mode {
                IouMode::ThreeD => "3d".into(),
                IouMode::Bev => "bev".into(),
            },
            ("train", "steps") => self.train.steps.to_string(),
            ("train", "teacher_steps") => self.train.teacher_steps.to_string(),
            ("train", "batch") => self.train.batch.to_string(),
            ("train", "lr") => self.train.lr.to_string(),
            ("train", "momentum") => self.train.momentum.to_string(),
            ("train", "weight_decay") => self.train.weight_decay.to_string(),
            ("train", "clip") => self.train.clip.to_string(),
            ("train", "seeds") => join(&self.train.seeds),
            ("eval", "score_threshold") => self.eval.score_threshold.to_string(),
            ("eval", "max_det") => self.eval.max_det.to_string(),
            _ => unreachable!("every listed key has a getter"),
        }
    }

    /// Canonical text form listing every key.
    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for &(s, k, _) in KEYS {
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{s}]");
                section = s;
            }
            let _ = writeln!(out, "{k} = {}", self.get(s, k));
        }
        out
    }

    /// Key reference for `--help`.
    pub fn help_text() -> String {
        let mut out = String::from("Config keys ([section] key = value):\n");
        for &(s, k, d) in KEYS {
            let _ = writeln!(out, "  {:<24} {d}", format!("{s}.{k}"));
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: String| ConfigError::Invalid(e);
        self.fusion.validate().map_err(|e| inv(e.to_string()))?;
        self.model.validate().map_err(|e| inv(e.to_string()))?;
        self.weights.validate().map_err(|e| inv(e.to_string()))?;
        if self.data.frames == 0 || self.data.train_sequences == 0 || self.data.eval_sequences == 0 {
            return Err(inv("need at least one frame and one train and eval sequence".into()));
        }
        if self.train.batch == 0 || self.train.seeds.is_empty() {
            return Err(inv("batch must be ≥ 1 and at least one seed is required".into()));
        }
        if self.distill.context_margin < 0.0 {
            return Err(inv("context margin must be ≥ 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.train.lr = 0.1 + 0.2;
        cfg.distill.teacher = TeacherKind::SingleFrame;
        let text = cfg.to_ini();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_rejected() {
        let e = RunConfig::parse("[train]\nsteps = 3\nlearning_rate = 0.1\n").unwrap_err();
        assert!(matches!(e, ConfigError::UnknownKey { line: 3, .. }));
        assert!(RunConfig::parse("[nope]\n").is_err());
        assert!(RunConfig::parse("[train]\nsteps = x\n").is_err());
    }
}
