//! End-to-end checks of the installed binary: exit codes, artifact layout,
//! determinism, and the CSV contracts of each subcommand.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use minet::haze::{make_dataset, save_ppm, write_dataset, Image, Pair};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_minet"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn minet");
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn init_checkpoint(dir: &Path, extra: &[&str]) -> std::path::PathBuf {
    let out_dir = dir.join("run");
    let mut cmd = bin();
    cmd.args([
        "train",
        "--pairs",
        "2",
        "--size",
        "16",
        "--channels",
        "8",
        "--T",
        "2",
        "--iters",
        "0",
        "--seed",
        "3",
        "--set",
        "rca_reduction=8",
        "--out",
    ])
    .arg(&out_dir)
    .args(extra);
    run_ok(&mut cmd);
    out_dir.join("checkpoint.minw")
}

#[test]
fn train_with_zero_iterations_writes_initial_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = init_checkpoint(dir.path(), &[]);
    let run = ckpt.parent().unwrap();

    assert!(ckpt.is_file());
    assert!(run.join("resolved.cfg").is_file());
    assert!(run.join("train_log.csv").is_file());
    assert!(run.join("data").join("manifest.tsv").is_file());

    let cfg = fs::read_to_string(run.join("resolved.cfg")).unwrap();
    for needle in ["trunk_channels=8", "recursions=2,2,2", "iters=0", "seed=3"] {
        assert!(cfg.contains(needle), "resolved.cfg missing {needle}:\n{cfg}");
    }
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "iteration,loss,lr,psnr_train,seconds");
}

#[test]
fn unknown_flag_exits_2_and_unknown_config_key_exits_1() {
    let out = bin().args(["train", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["train", "--set", "bogus=1", "--out"])
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bogus"), "stderr should list the key: {stderr}");
}

#[test]
fn infer_is_deterministic_and_prints_full_residual_traces() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = init_checkpoint(dir.path(), &[]);
    let input = ckpt.parent().unwrap().join("data").join("hazy_000.ppm");
    let out_a = dir.path().join("a.ppm");
    let out_b = dir.path().join("b.ppm");

    let first = run_ok(bin().args(["infer", "--checkpoint"]).arg(&ckpt).arg("--input").arg(&input).arg("--output").arg(&out_a));
    run_ok(bin().args(["infer", "--checkpoint"]).arg(&ckpt).arg("--input").arg(&input).arg("--output").arg(&out_b));

    assert_eq!(fs::read(&out_a).unwrap(), fs::read(&out_b).unwrap());

    let stdout = String::from_utf8_lossy(&first.stdout);
    for block in 1..=3 {
        let prefix = format!("block{block} residuals: ");
        let line = stdout
            .lines()
            .find(|l| l.starts_with(&prefix))
            .unwrap_or_else(|| panic!("missing {prefix:?} in:\n{stdout}"));
        // T=2 recursions -> exactly two residual entries
        assert_eq!(line[prefix.len()..].split_whitespace().count(), 2);
    }
}

#[test]
fn infer_pads_odd_inputs_and_crops_back() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = init_checkpoint(dir.path(), &[]);
    let odd = Image::constant(15, 13, 0.5).unwrap();
    let input = dir.path().join("odd.ppm");
    save_ppm(&odd, &input).unwrap();
    let output = dir.path().join("odd_out.ppm");

    let out = run_ok(bin().args(["infer", "--checkpoint"]).arg(&ckpt).arg("--input").arg(&input).arg("--output").arg(&output));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("padded"), "expected pad notice, got: {stderr}");

    let produced = minet::haze::load_ppm(&output).unwrap();
    assert_eq!((produced.height, produced.width), (15, 13));
}

#[test]
fn eval_identity_on_clean_vs_clean_reports_perfect_scores() {
    let dir = tempfile::tempdir().unwrap();
    // manifest whose "hazy" column points at the clean image too
    let pairs: Vec<Pair> = make_dataset(11, 3, 16, 16, (0.5, 1.0), (0.8, 0.9))
        .unwrap()
        .into_iter()
        .map(|p| Pair {
            hazy: p.clean.clone(),
            ..p
        })
        .collect();
    let manifest = write_dataset(dir.path(), &pairs).unwrap();

    let out = run_ok(bin().args(["eval", "--identity", "--manifest"]).arg(&manifest));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "filename,psnr_db,ssim");
    assert_eq!(lines.len(), 1 + 3 + 1, "3 rows plus header and mean:\n{stdout}");
    for row in &lines[1..] {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[1], "inf", "psnr column: {row}");
        assert_eq!(cols[2], "1", "ssim column: {row}");
    }
}

#[test]
fn eval_scores_every_manifest_row_with_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = init_checkpoint(dir.path(), &[]);
    let manifest = ckpt.parent().unwrap().join("data").join("manifest.tsv");
    let csv_path = dir.path().join("metrics.csv");

    run_ok(bin()
        .args(["eval", "--checkpoint"])
        .arg(&ckpt)
        .arg("--manifest")
        .arg(&manifest)
        .arg("--out")
        .arg(&csv_path));
    let csv = fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "filename,psnr_db,ssim");
    assert_eq!(lines.len(), 1 + 2 + 1, "2 rows plus header and mean:\n{csv}");
    for row in &lines[1..3] {
        let cols: Vec<&str> = row.split(',').collect();
        assert!(cols[1].parse::<f64>().unwrap().is_finite(), "{row}");
    }
}

#[test]
fn euler_csv_has_header_and_one_row_per_step() {
    let out = run_ok(bin().args(["euler", "--lambda", "-50", "--eta", "0.1", "--steps", "20"]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "step,explicit,implicit");
    assert_eq!(lines.len(), 1 + 21, "steps 0..=20:\n{stdout}");
    // stiff regime: explicit blows up, implicit decays
    let last: Vec<&str> = lines[21].split(',').collect();
    assert!(last[1].parse::<f64>().unwrap().abs() > 1e10);
    assert!(last[2].parse::<f64>().unwrap().abs() < 1e-10);
}

#[test]
fn tsweep_single_element_yields_one_row_and_empty_list_fails() {
    let out = run_ok(bin().args([
        "tsweep", "--ts", "2", "--size", "16", "--channels", "8", "--pairs", "1", "--repeats", "1",
    ]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "T,psnr_db,seconds_per_image");
    assert_eq!(lines.len(), 2, "one data row:\n{stdout}");
    assert!(lines[1].starts_with("2,"));

    let err = bin().args(["tsweep", "--ts", ""]).output().unwrap();
    assert_ne!(err.status.code(), Some(0));
}

#[test]
fn stability_reports_all_three_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = init_checkpoint(dir.path(), &[]);
    let csv_path = dir.path().join("growth.csv");

    let out = run_ok(bin()
        .args(["stability", "--checkpoint"])
        .arg(&ckpt)
        .args(["--size", "16", "--iters", "12", "--out"])
        .arg(&csv_path));
    let stdout = String::from_utf8_lossy(&out.stdout);
    for block in 1..=3 {
        assert!(stdout.contains(&format!("block{block}: rho ")), "{stdout}");
    }
    let csv = fs::read_to_string(&csv_path).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "block,step,norm_ratio");
    for block in 1..=3 {
        assert!(csv.lines().any(|l| l.starts_with(&format!("{block},0,"))));
    }
}

#[test]
fn train_from_manifest_matches_generated_data_behavior() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    fs::create_dir_all(&data_dir).unwrap();
    let pairs = make_dataset(5, 2, 16, 16, (0.5, 1.0), (0.8, 0.9)).unwrap();
    let manifest = write_dataset(&data_dir, &pairs).unwrap();

    let run = dir.path().join("run");
    run_ok(bin()
        .args([
            "train",
            "--channels",
            "8",
            "--T",
            "1",
            "--iters",
            "2",
            "--set",
            "rca_reduction=8",
            "--set",
            "log_every=1",
            "--manifest",
        ])
        .arg(&manifest)
        .arg("--out")
        .arg(&run));
    assert!(run.join("checkpoint.minw").is_file());
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    // header + iterations 0 and 1
    assert_eq!(log.lines().count(), 3, "{log}");
}
