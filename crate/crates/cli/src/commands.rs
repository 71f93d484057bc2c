use std::path::{Path, PathBuf};

use mfkd::backbone::Detector;
use mfkd::config::{RunConfig, TeacherKind};
use mfkd::experiment::{
    benchmark_scene, evaluate_model, init_student, init_teacher, loss_log_csv, prepare_sequence, run_ablation, train,
    train_student, Arm, Benchmark, PreparedFrame, Split,
};
use mfkd::fusion::{fuse_sequence, fused_file_name, read_fused_file, write_fused_file, FusionParams};
use mfkd::gradsuite::{run_suite, TOLERANCE};
use mfkd::par::{self, Exec};
use mfkd::synth::{frame_files, generate_sequence, read_sequence, write_sequence};
use mfkd_tensor::{checkpoint, ParamStore};
use serde::Serialize;

use crate::error::{format, io, CliError, Result};
use crate::manifest::{file_sha256, Manifest};
use crate::{Common, InputKind, Inputs};

const FUSE_STAMP: &str = "fuse.json";
const TEACHER_FILE: &str = "teacher.smfw";
const STUDENT_FILE: &str = "student.smfw";

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::parse(&std::fs::read_to_string(path).map_err(io(path))?)?,
        None => RunConfig::default(),
    };
    for item in &common.set {
        let bad = || CliError::Usage(format!("--set expects SECTION.KEY=VALUE, got '{item}'"));
        let (name, value) = item.split_once('=').ok_or_else(bad)?;
        let (section, key) = name.trim().split_once('.').ok_or_else(bad)?;
        cfg.set(section, key, value.trim()).map_err(|e| {
            CliError::Usage(match e {
                None => format!("unknown config key '{section}.{key}'"),
                Some(reason) => format!("bad value for '{section}.{key}': {reason}"),
            })
        })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_out(common: &Common) -> Result<&Path> {
    let out = common.out.as_path();
    std::fs::create_dir_all(out).map_err(io(out))?;
    Ok(out)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    write(path, &(text + "\n"))
}

/// Seeds for a training command: `--seed` wins over the config.
fn seeds(common: &Common, cfg: &RunConfig) -> Vec<u64> {
    common.seed.map_or_else(|| cfg.train.seeds.clone(), |s| vec![s])
}

fn with_jobs<R: Send>(common: &Common, f: impl FnOnce() -> R + Send) -> R {
    par::with_jobs(common.jobs, f)
}

fn finish(mut manifest: Manifest, out: &Path) -> Result<()> {
    manifest.hash_outputs(out)?;
    manifest.write(out)
}

fn split_dir(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Eval => "eval",
    }
}

fn seq_name(i: usize) -> String {
    format!("seq_{i:03}")
}

pub fn generate(common: &Common) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.data.seed = s;
    }
    let out = create_out(common)?;
    with_jobs(common, || -> Result<()> {
        for (split, n) in [
            (Split::Train, cfg.data.train_sequences),
            (Split::Eval, cfg.data.eval_sequences),
        ] {
            for i in 0..n {
                let seq = generate_sequence(&benchmark_scene(&cfg, split, i), Exec::Parallel)?;
                let dir = out.join(split_dir(split)).join(seq_name(i));
                write_sequence(&dir, &seq).map_err(format(&dir))?;
                log::info!("wrote {} frames to {}", seq.len(), dir.display());
            }
        }
        Ok(())
    })?;
    let ini = cfg.to_ini();
    write(&out.join("config.ini"), &ini)?;
    finish(Manifest::new("generate", &ini, vec![cfg.data.seed], common.jobs), out)
}

pub struct FuseOverrides {
    pub group_size: Option<usize>,
    pub voxel: Option<[f64; 3]>,
    pub max_per_voxel: Option<usize>,
    pub denoise: Option<f64>,
}

fn fusion_stamp(params: &FusionParams, inputs: &[(String, String)]) -> serde_json::Value {
    serde_json::json!({
        "group_size": params.group_size,
        "voxel": params.voxel,
        "max_per_voxel": params.max_per_voxel,
        "denoise": params.denoise,
        "frames": inputs.iter().map(|(n, h)| serde_json::json!([n, h])).collect::<Vec<_>>(),
    })
}

/// Every directory under `root` (inclusive) holding frame files, sorted.
fn sequence_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        if !frame_files(&d).map_err(io(&d))?.is_empty() {
            found.push(d.clone());
        }
        for e in std::fs::read_dir(&d).map_err(io(&d))? {
            let p = e.map_err(io(&d))?.path();
            if p.is_dir() {
                stack.push(p);
            }
        }
    }
    found.sort();
    Ok(found)
}

/// Fuse one sequence into `out`, reusing earlier output when the frames and
/// parameters are unchanged. Returns whether work was done.
fn fuse_one(seq_dir: &Path, out: &Path, params: &FusionParams) -> Result<bool> {
    let files = frame_files(seq_dir).map_err(io(seq_dir))?;
    let mut hashes = Vec::with_capacity(files.len());
    for f in &files {
        let name = f.file_name().unwrap_or_default().to_string_lossy().into_owned();
        hashes.push((name, file_sha256(f)?));
    }
    let stamp = fusion_stamp(params, &hashes);
    let stamp_path = out.join(FUSE_STAMP);
    if let Ok(text) = std::fs::read_to_string(&stamp_path) {
        if serde_json::from_str::<serde_json::Value>(&text).ok().as_ref() == Some(&stamp) {
            log::info!("{}: fused files up to date", out.display());
            return Ok(false);
        }
    }
    let seq = read_sequence(seq_dir)?;
    let fused = fuse_sequence(&seq, params, Exec::Parallel)?;
    std::fs::create_dir_all(out).map_err(io(out))?;
    for (frame, objects) in seq.frames.iter().zip(&fused) {
        let path = out.join(fused_file_name(frame.frame_index));
        write_fused_file(&path, objects).map_err(format(&path))?;
    }
    write_json(&stamp_path, &stamp)?;
    log::info!("fused {} frames into {}", seq.len(), out.display());
    Ok(true)
}

pub fn fuse(common: &Common, sequence: &Path, o: FuseOverrides) -> Result<()> {
    let mut cfg = load_config(common)?;
    let f = &mut cfg.fusion;
    f.group_size = o.group_size.unwrap_or(f.group_size);
    f.voxel = o.voxel.unwrap_or(f.voxel);
    f.max_per_voxel = o.max_per_voxel.unwrap_or(f.max_per_voxel);
    f.denoise = o.denoise.unwrap_or(f.denoise);
    cfg.validate()?;
    if !sequence.is_dir() {
        return Err(CliError::Missing {
            what: format!("sequence directory {} does not exist", sequence.display()),
            hint: format!("mfkd generate --out {}", sequence.display()),
        });
    }
    let dirs = sequence_dirs(sequence)?;
    if dirs.is_empty() {
        return Err(CliError::Missing {
            what: format!("no frame files under {}", sequence.display()),
            hint: format!("mfkd generate --out {}", sequence.display()),
        });
    }
    let out = create_out(common)?;
    with_jobs(common, || -> Result<()> {
        for d in &dirs {
            let rel = d.strip_prefix(sequence).unwrap_or(Path::new(""));
            fuse_one(d, &out.join(rel), &cfg.fusion)?;
        }
        Ok(())
    })?;
    let ini = cfg.to_ini();
    write(&out.join("config.ini"), &ini)?;
    finish(Manifest::new("fuse", &ini, vec![], common.jobs), out)
}

fn fuse_hint(inputs: &Inputs) -> String {
    format!(
        "mfkd fuse --sequence {} --out {}",
        inputs.data.display(),
        inputs.fused.display()
    )
}

/// Read one split of an on-disk dataset together with its fused objects.
fn load_split(cfg: &RunConfig, inputs: &Inputs, split: Split) -> Result<Vec<PreparedFrame>> {
    let root = inputs.data.join(split_dir(split));
    let dirs = if root.is_dir() {
        sequence_dirs(&root)?
    } else {
        Vec::new()
    };
    if dirs.is_empty() {
        return Err(CliError::Missing {
            what: format!("no {} sequences under {}", split_dir(split), inputs.data.display()),
            hint: format!("mfkd generate --out {}", inputs.data.display()),
        });
    }
    let mut frames = Vec::new();
    for d in dirs {
        let rel = d.strip_prefix(&inputs.data).unwrap_or(&d);
        let fdir = inputs.fused.join(rel);
        let seq = read_sequence(&d)?;
        let mut fused = Vec::with_capacity(seq.len());
        for frame in &seq.frames {
            let path = fdir.join(fused_file_name(frame.frame_index));
            if !path.is_file() {
                return Err(CliError::Missing {
                    what: format!("fused file {} is missing", path.display()),
                    hint: fuse_hint(inputs),
                });
            }
            fused.push(read_fused_file(&path).map_err(format(&path))?);
        }
        frames.extend(prepare_sequence(&seq, &fused, &cfg.model)?);
    }
    Ok(frames)
}

fn load_store(path: &Path, template: &ParamStore) -> Result<ParamStore> {
    let loaded = checkpoint::load(path).map_err(format(path))?;
    let mut store = template.clone();
    store.load_from(&loaded).map_err(|e| {
        CliError::Usage(format!(
            "{}: checkpoint does not match the configured model: {e}",
            path.display()
        ))
    })?;
    Ok(store)
}

fn save_store(store: &ParamStore, path: &Path) -> Result<()> {
    checkpoint::save(store, path).map_err(format(path))
}

fn single_seed(common: &Common, cfg: &RunConfig) -> u64 {
    seeds(common, cfg)[0]
}

pub fn pretrain_teacher(common: &Common, inputs: &Inputs) -> Result<()> {
    let cfg = load_config(common)?;
    let seed = single_seed(common, &cfg);
    let input = cfg.distill.teacher;
    let train_frames = with_jobs(common, || load_split(&cfg, inputs, Split::Train))?;
    let out = create_out(common)?;
    let (det, init) = init_teacher(&cfg.model, seed)?;
    let outcome = with_jobs(common, || {
        train(
            &det,
            init,
            &train_frames,
            input,
            None,
            &cfg.weights,
            &cfg.train,
            cfg.train.teacher_steps,
            seed,
        )
    })?;
    save_store(&outcome.store, &out.join(TEACHER_FILE))?;
    write(&out.join("loss_log.csv"), &loss_log_csv(&outcome.log))?;
    let ini = cfg.to_ini();
    write(&out.join("config.ini"), &ini)?;
    log::info!("teacher written to {}", out.join(TEACHER_FILE).display());
    finish(Manifest::new("pretrain-teacher", &ini, vec![seed], common.jobs), out)
}

pub fn distill_student(common: &Common, inputs: &Inputs, teacher: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let seed = single_seed(common, &cfg);
    let sw = cfg.distill.clone();
    let teacher_path = match teacher {
        Some(p) if p.is_dir() => Some(p.join(TEACHER_FILE)),
        Some(p) => Some(p.to_path_buf()),
        None => None,
    };
    let teacher_path = match teacher_path {
        Some(p) if sw.any() && !p.is_file() => {
            return Err(CliError::Missing {
                what: format!("teacher checkpoint {} not found", p.display()),
                hint: format!(
                    "mfkd pretrain-teacher --data {} --fused {} --out {}",
                    inputs.data.display(),
                    inputs.fused.display(),
                    p.parent().unwrap_or(Path::new(".")).display()
                ),
            })
        }
        None if sw.any() => {
            return Err(CliError::Missing {
                what: "distillation is enabled but no --teacher checkpoint was given".into(),
                hint: format!(
                    "mfkd pretrain-teacher --data {} --fused {} --out <dir>",
                    inputs.data.display(),
                    inputs.fused.display()
                ),
            })
        }
        p => p.filter(|_| sw.any()),
    };
    let train_frames = with_jobs(common, || load_split(&cfg, inputs, Split::Train))?;
    let out = create_out(common)?;
    let mut manifest = Manifest::new("distill-student", &cfg.to_ini(), vec![seed], common.jobs);
    let teacher = match &teacher_path {
        Some(p) => {
            manifest.input("teacher_checkpoint", p)?;
            let (tdet, template) = init_teacher(&cfg.model, seed)?;
            Some((tdet, load_store(p, &template)?))
        }
        None => None,
    };
    let bench = Benchmark {
        train: train_frames,
        eval: Vec::new(),
    };
    let (det, init) = init_student(&cfg.model, seed)?;
    let outcome = with_jobs(common, || {
        train_student(
            &cfg,
            &det,
            &init,
            &bench,
            teacher.as_ref().map(|(d, s)| (d, s, sw.teacher)),
            &sw,
            &cfg.weights,
            seed,
            Exec::Parallel,
        )
    })?;
    save_store(&outcome.store, &out.join(STUDENT_FILE))?;
    if let Some(m) = &outcome.modules {
        save_store(m, &out.join("distill_modules.smfw"))?;
    }
    write(&out.join("loss_log.csv"), &loss_log_csv(&outcome.log))?;
    write(&out.join("config.ini"), &manifest.config)?;
    log::info!("student written to {}", out.join(STUDENT_FILE).display());
    finish(manifest, out)
}

pub fn eval(common: &Common, inputs: &Inputs, ckpt: &Path, input: InputKind) -> Result<()> {
    let cfg = load_config(common)?;
    if !ckpt.is_file() {
        return Err(CliError::Missing {
            what: format!("checkpoint {} not found", ckpt.display()),
            hint: "mfkd pretrain-teacher or mfkd distill-student".into(),
        });
    }
    let frames = with_jobs(common, || load_split(&cfg, inputs, Split::Eval))?;
    let out = create_out(common)?;
    let (det, template) = Detector::new(cfg.model.clone(), 0)?;
    let store = load_store(ckpt, &template)?;
    let kind = match input {
        InputKind::Single => TeacherKind::SingleFrame,
        InputKind::Multi => TeacherKind::MultiFrame,
    };
    let report = with_jobs(common, || {
        evaluate_model(&det, &store, &frames, kind, &cfg, Exec::Parallel)
    })?;
    write(&out.join("report.csv"), &report.to_csv())?;
    write_json(&out.join("report.json"), &report)?;
    println!("L2 mAPH {:.6}  L2 mAP {:.6}", report.maph_l2, report.map_l2);
    let mut manifest = Manifest::new("eval", &cfg.to_ini(), vec![], common.jobs);
    manifest.input("checkpoint", ckpt)?;
    finish(manifest, out)
}

#[derive(Serialize)]
struct GradRow {
    name: String,
    scalars: usize,
    max_rel_error: f64,
    passed: bool,
    error: Option<String>,
}

pub fn gradcheck(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let out = create_out(common)?;
    let rows: Vec<GradRow> = with_jobs(common, run_suite)
        .into_iter()
        .map(|r| GradRow {
            passed: r.passed(),
            max_rel_error: r.max_rel_error(),
            error: r.report.as_ref().err().cloned(),
            scalars: r.scalars,
            name: r.name,
        })
        .collect();
    let mut csv = String::from("name,scalars,max_rel_error,passed\n");
    for r in &rows {
        println!(
            "{:<40} {:>6} scalars  max rel err {:.3e}  {}",
            r.name,
            r.scalars,
            r.max_rel_error,
            if r.passed { "ok" } else { "FAIL" }
        );
        csv.push_str(&format!(
            "{},{},{:e},{}\n",
            r.name, r.scalars, r.max_rel_error, r.passed
        ));
    }
    write(&out.join("gradcheck.csv"), &csv)?;
    write_json(&out.join("gradcheck.json"), &rows)?;
    finish(Manifest::new("gradcheck", &cfg.to_ini(), vec![], common.jobs), out)?;
    let failed = rows.iter().filter(|r| !r.passed).count();
    println!("{} checks, {} failed (tolerance {TOLERANCE:e})", rows.len(), failed);
    if failed > 0 {
        return Err(CliError::GradcheckFailed(failed));
    }
    Ok(())
}

fn parse_arm(name: &str) -> Result<Arm> {
    Ok(match name.trim() {
        "baseline" => Arm::Baseline,
        "voxel" => Arm::Voxel,
        "bev" => Arm::Bev,
        "rsp" => Arm::Rsp,
        "all" => Arm::All,
        "single" => Arm::SingleFrameTeacher,
        other => {
            return Err(CliError::Usage(format!(
                "unknown arm '{other}' (expected baseline, voxel, bev, rsp, all or single)"
            )))
        }
    })
}

pub fn ablate(common: &Common, arms: Option<&[String]>, inputs: Option<&Inputs>) -> Result<()> {
    let mut cfg = load_config(common)?;
    cfg.train.seeds = seeds(common, &cfg);
    let arms: Vec<Arm> = match arms {
        Some(names) => names.iter().map(|n| parse_arm(n)).collect::<Result<_>>()?,
        None => Arm::ALL.to_vec(),
    };
    let bench = with_jobs(common, || -> Result<Benchmark> {
        match inputs {
            Some(i) => Ok(Benchmark {
                train: load_split(&cfg, i, Split::Train)?,
                eval: load_split(&cfg, i, Split::Eval)?,
            }),
            None => Ok(mfkd::experiment::build_benchmark(&cfg, Exec::Parallel)?),
        }
    })?;
    let out = create_out(common)?;
    let result = with_jobs(common, || run_ablation(&cfg, &bench, &arms, Exec::Parallel))?;
    let table = result.table_csv();
    print!("{table}");
    write(&out.join("table.csv"), &table)?;
    write_json(&out.join("ablation.json"), &result)?;
    let ini = cfg.to_ini();
    write(&out.join("config.ini"), &ini)?;
    finish(Manifest::new("ablate", &ini, cfg.train.seeds.clone(), common.jobs), out)
}
