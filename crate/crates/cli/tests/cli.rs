use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set",
    "data.train_sequences=1",
    "--set",
    "data.eval_sequences=1",
    "--set",
    "data.frames=6",
    "--set",
    "train.steps=3",
    "--set",
    "train.teacher_steps=3",
];

fn mfkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfkd"))
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .expect("spawn mfkd")
}

fn ok(args: &[&str]) -> Output {
    let out = mfkd(args);
    assert!(
        out.status.success(),
        "mfkd {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run(cmd: &str, extra: &[&str]) -> Output {
    let mut args = vec![cmd];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(&args)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files_under(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

/// Generated and fused data shared by a test.
fn prepared(root: &Path) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    let fused = root.join("fused");
    run("generate", &["--out", s(&data)]);
    run("fuse", &["--sequence", s(&data), "--out", s(&fused)]);
    (data, fused)
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (data, fused) = prepared(root);
    assert!(fused.join("train/seq_000/fused_0000.smfb").is_file());

    let again = run("fuse", &["--sequence", s(&data), "--out", s(&fused)]);
    assert!(String::from_utf8_lossy(&again.stderr).contains("up to date"));

    let teacher = root.join("teacher");
    run(
        "pretrain-teacher",
        &["--data", s(&data), "--fused", s(&fused), "--out", s(&teacher)],
    );
    let student = root.join("student");
    run(
        "distill-student",
        &[
            "--data",
            s(&data),
            "--fused",
            s(&fused),
            "--teacher",
            s(&teacher.join("teacher.smfw")),
            "--out",
            s(&student),
        ],
    );
    let m = manifest(&student);
    let teacher_hash = &manifest(&teacher)["artifacts"]["teacher.smfw"];
    assert_eq!(&m["inputs"]["teacher_checkpoint"], teacher_hash);
    assert!(m["artifacts"]["student.smfw"].is_string());
    assert!(m["config"].as_str().unwrap().contains("steps = 3"));
    assert_eq!(m["seeds"], serde_json::json!([1]));

    let log = std::fs::read_to_string(student.join("loss_log.csv")).unwrap();
    assert!(log.starts_with("step,L_cls,L_reg,L_vxl,L_bev,L_rsp_c,L_rsp_r,total,lr"));
    assert_eq!(log.lines().count(), 4);

    let eval = root.join("eval");
    let out = run(
        "eval",
        &[
            "--data",
            s(&data),
            "--fused",
            s(&fused),
            "--checkpoint",
            s(&student.join("student.smfw")),
            "--out",
            s(&eval),
        ],
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("L2 mAPH"));
    let csv = std::fs::read_to_string(eval.join("report.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("vehicle,")));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    assert!(json["maph_l2"].is_number());
}

#[test]
fn missing_prerequisites_name_the_command() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    run("generate", &["--out", s(&data)]);

    let out = mfkd(&[
        "pretrain-teacher",
        "--data",
        s(&data),
        "--fused",
        s(&root.join("fused")),
        "--out",
        s(&root.join("t")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("mfkd fuse --sequence"));

    run("fuse", &["--sequence", s(&data), "--out", s(&root.join("fused"))]);
    let out = mfkd(&[
        "distill-student",
        "--data",
        s(&data),
        "--fused",
        s(&root.join("fused")),
        "--teacher",
        s(&root.join("nowhere/teacher.smfw")),
        "--out",
        s(&root.join("s")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("mfkd pretrain-teacher"));

    let out = mfkd(&["generate", "--set", "train.nope=1", "--out", s(&root.join("g"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.nope"));
}

#[test]
fn zero_distill_weights_reproduce_plain_training() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (data, fused) = prepared(root);
    let teacher = root.join("teacher");
    run(
        "pretrain-teacher",
        &["--data", s(&data), "--fused", s(&fused), "--out", s(&teacher)],
    );
    let common = ["--data", s(&data), "--fused", s(&fused)];

    let plain = root.join("plain");
    let mut args = common.to_vec();
    args.extend([
        "--set",
        "distill.voxel=false",
        "--set",
        "distill.bev=false",
        "--set",
        "distill.rsp=false",
        "--out",
        s(&plain),
    ]);
    run("distill-student", &args);

    let zero = root.join("zero");
    let mut args = common.to_vec();
    args.extend([
        "--set",
        "distill.beta=0",
        "--set",
        "distill.lambda=0",
        "--set",
        "distill.mu=0",
        "--teacher",
        s(&teacher),
        "--out",
        s(&zero),
    ]);
    run("distill-student", &args);

    let cols = |dir: &Path| -> Vec<String> {
        std::fs::read_to_string(dir.join("loss_log.csv"))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                // step, L_cls, L_reg, total, lr, grad_norm
                [f[0], f[1], f[2], f[7], f[8], f[9]].join(",")
            })
            .collect()
    };
    assert_eq!(cols(&plain), cols(&zero));
    assert_eq!(
        std::fs::read(plain.join("student.smfw")).unwrap(),
        std::fs::read(zero.join("student.smfw")).unwrap()
    );
}

#[test]
fn outputs_do_not_depend_on_jobs() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    run("generate", &["--out", s(&data)]);
    let mut fused = Vec::new();
    let mut reports = Vec::new();
    for jobs in ["1", "8"] {
        let f = root.join(format!("fused{jobs}"));
        run("fuse", &["--jobs", jobs, "--sequence", s(&data), "--out", s(&f)]);
        let t = root.join(format!("teacher{jobs}"));
        run(
            "pretrain-teacher",
            &["--jobs", jobs, "--data", s(&data), "--fused", s(&f), "--out", s(&t)],
        );
        let st = root.join(format!("student{jobs}"));
        run(
            "distill-student",
            &[
                "--jobs",
                jobs,
                "--data",
                s(&data),
                "--fused",
                s(&f),
                "--teacher",
                s(&t),
                "--out",
                s(&st),
            ],
        );
        let e = root.join(format!("eval{jobs}"));
        run(
            "eval",
            &[
                "--jobs",
                jobs,
                "--data",
                s(&data),
                "--fused",
                s(&f),
                "--checkpoint",
                s(&st.join("student.smfw")),
                "--out",
                s(&e),
            ],
        );
        let smfb: Vec<_> = files_under(&f)
            .into_iter()
            .filter(|(p, _)| p.extension().is_some_and(|x| x == "smfb"))
            .collect();
        assert!(!smfb.is_empty());
        fused.push(smfb);
        reports.push((
            std::fs::read(e.join("report.csv")).unwrap(),
            std::fs::read(e.join("report.json")).unwrap(),
        ));
    }
    assert_eq!(fused[0], fused[1]);
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn fuse_flags_override_config() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    run("generate", &["--out", s(&data)]);
    let seq = data.join("train/seq_000");
    let out = root.join("f");
    run(
        "fuse",
        &[
            "--sequence",
            s(&seq),
            "--out",
            s(&out),
            "--group-size",
            "3",
            "--voxel",
            "0.2,0.2,0.3",
            "--max-per-voxel",
            "2",
            "--denoise",
            "0.01",
        ],
    );
    let cfg = std::fs::read_to_string(out.join("config.ini")).unwrap();
    assert!(cfg.contains("group_size = 3"));
    assert!(cfg.contains("voxel = 0.2,0.2,0.3"));
    assert!(out.join("fused_0000.smfb").is_file());
    let bad = mfkd(&["fuse", "--sequence", s(&seq), "--out", s(&out), "--voxel", "0.1,0.1"]);
    assert!(!bad.status.success());
}

#[test]
fn ablate_emits_every_arm() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ablate");
    let res = run("ablate", &["--seed", "4", "--out", s(&out)]);
    let table = std::fs::read_to_string(out.join("table.csv")).unwrap();
    for row in [
        "multi-frame teacher",
        "baseline",
        "+voxel",
        "+bev",
        "+rsp",
        "all,",
        "all (single-frame teacher)",
    ] {
        assert!(table.contains(row), "missing {row} in\n{table}");
    }
    assert_eq!(String::from_utf8_lossy(&res.stdout), table);
    assert!(manifest(&out)["artifacts"]["ablation.json"].is_string());
}

#[test]
fn gradcheck_passes_and_reports_each_check() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("gc");
    let res = ok(&["gradcheck", "--out", s(&out)]);
    let stdout = String::from_utf8_lossy(&res.stdout);
    print!("{stdout}");
    assert!(stdout.contains("0 failed"));
    let csv = std::fs::read_to_string(out.join("gradcheck.csv")).unwrap();
    assert!(csv.lines().count() > 30);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
}

#[test]
fn help_documents_every_config_key() {
    let out = ok(&["distill-student", "--help"]);
    let help = String::from_utf8_lossy(&out.stdout);
    for &(section, key, _) in mfkd_keys() {
        assert!(
            help.contains(&format!("{section}.{key}")),
            "{section}.{key} not in help"
        );
    }
}

fn mfkd_keys() -> &'static [(&'static str, &'static str, &'static str)] {
    mfkd::config::KEYS
}
