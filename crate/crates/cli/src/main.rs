//! `mfkd`: generate data, fuse, train, distill, evaluate and ablate.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mfkd::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "mfkd",
    version,
    about = "Multi-frame to single-frame LiDAR detector distillation"
)]
#[command(after_long_help = RunConfig::help_text())]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Config file; keys not in the file keep their defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key (repeatable)
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed; overrides data.seed for `generate` and train.seeds elsewhere
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for the parallel stages (default: all cores)
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct Inputs {
    /// Dataset root written by `generate`
    #[arg(long)]
    pub data: PathBuf,
    /// Fused-object root written by `fuse`
    #[arg(long)]
    pub fused: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    Single,
    Multi,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the synthetic benchmark as frame files (train/ and eval/ splits)
    #[command(after_long_help = RunConfig::help_text())]
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Fuse every object of a sequence, or of every sequence under a dataset root
    #[command(after_long_help = RunConfig::help_text())]
    Fuse {
        #[command(flatten)]
        common: Common,
        /// Sequence directory (or dataset root)
        #[arg(long)]
        sequence: PathBuf,
        /// Frames per fusion group
        #[arg(long)]
        group_size: Option<usize>,
        /// Fusion voxel size in meters
        #[arg(long, value_name = "X,Y,Z", value_parser = parse_triplet)]
        voxel: Option<[f64; 3]>,
        /// Points kept per fusion voxel
        #[arg(long)]
        max_per_voxel: Option<usize>,
        /// Fraction of fused points removed as outliers
        #[arg(long)]
        denoise: Option<f64>,
    },
    /// Train the teacher detector on fused (multi-frame) input
    #[command(after_long_help = RunConfig::help_text())]
    PretrainTeacher {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Train the single-frame student, distilling from a teacher checkpoint
    #[command(after_long_help = RunConfig::help_text())]
    DistillStudent {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        /// Teacher checkpoint from `pretrain-teacher`
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Score a checkpoint on the eval split
    #[command(after_long_help = RunConfig::help_text())]
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Frame input fed to the detector
        #[arg(long, value_enum, default_value = "single")]
        input: InputKind,
    },
    /// Finite-difference check of every differentiable op and loss
    #[command(after_long_help = RunConfig::help_text())]
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Run the ablation grid over all seeds
    #[command(after_long_help = RunConfig::help_text())]
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Arms to run: baseline, voxel, bev, rsp, all, single
        #[arg(long, value_delimiter = ',')]
        arms: Option<Vec<String>>,
        /// Dataset root; generated in memory when omitted
        #[arg(long, requires = "fused")]
        data: Option<PathBuf>,
        #[arg(long, requires = "data")]
        fused: Option<PathBuf>,
    },
}

fn parse_triplet(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    v.try_into()
        .map_err(|_| "expected three comma-separated numbers".to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Generate { common } => commands::generate(&common),
        Cmd::Fuse {
            common,
            sequence,
            group_size,
            voxel,
            max_per_voxel,
            denoise,
        } => commands::fuse(
            &common,
            &sequence,
            commands::FuseOverrides {
                group_size,
                voxel,
                max_per_voxel,
                denoise,
            },
        ),
        Cmd::PretrainTeacher { common, inputs } => commands::pretrain_teacher(&common, &inputs),
        Cmd::DistillStudent {
            common,
            inputs,
            teacher,
        } => commands::distill_student(&common, &inputs, teacher.as_deref()),
        Cmd::Eval {
            common,
            inputs,
            checkpoint,
            input,
        } => commands::eval(&common, &inputs, &checkpoint, input),
        Cmd::Gradcheck { common } => commands::gradcheck(&common),
        Cmd::Ablate {
            common,
            arms,
            data,
            fused,
        } => {
            let inputs = data.zip(fused).map(|(data, fused)| Inputs { data, fused });
            commands::ablate(&common, arms.as_deref(), inputs.as_ref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
