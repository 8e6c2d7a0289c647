use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn myoseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_myoseg"))
        .args(args)
        .env_remove("MYOSEG_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = myoseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, count: usize) {
    ok(&["gen-phantoms", "--out", p(dir), "--count", &count.to_string(), "--size", "16", "--seed", "3"]);
}

#[test]
fn gen_phantoms_writes_named_pairs_reproducibly() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen(a.path(), 3);
    gen(b.path(), 3);
    let mut names: Vec<String> = fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "case_0000_img.nii.gz",
            "case_0000_seg.nii.gz",
            "case_0001_img.nii.gz",
            "case_0001_seg.nii.gz",
            "case_0002_img.nii.gz",
            "case_0002_seg.nii.gz"
        ]
    );
    for n in names {
        assert_eq!(fs::read(a.path().join(&n)).unwrap(), fs::read(b.path().join(&n)).unwrap(), "{n}");
    }
}

#[test]
fn split_writes_a_partition() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), 5);
    let stdout = ok(&["split", "--data", p(dir.path()), "--fraction", "0.6", "--seed", "1"]);
    assert!(stdout.contains("train 3 / test 2"), "{stdout}");
    let text = fs::read_to_string(dir.path().join("split.toml")).unwrap();
    let split: toml::Value = toml::from_str(&text).unwrap();
    let count = |k: &str| split[k].as_array().unwrap().len();
    assert_eq!((count("train"), count("test")), (3, 2));
}

#[test]
fn evaluating_ground_truth_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    gen(dir.path(), 2);
    let d = p(dir.path());
    let stdout = ok(&["evaluate", "--pred", d, "--gt", d, "--out", p(out.path())]);
    assert!(stdout.starts_with("| Label | Dice Score |\n|---|---|\n| Uterine Wall | 1.00 ± 0.00 |"), "{stdout}");
    assert!(stdout.contains("| Mean | 1.00 |"));
    for row in stdout.lines().skip(2) {
        assert!(row.contains("1.00"), "{row}");
    }
    let csv = fs::read_to_string(out.path().join("dice.csv")).unwrap();
    assert!(csv.starts_with("case_id,class_id,class_name,dsc\ncase_0000,1,uterine_wall,1"));
    assert!(out.path().join("report.md").exists());
    assert!(out.path().join("boxplot/uterine_wall.csv").exists());
}

#[test]
fn report_renders_the_class_table() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("dice.csv");
    fs::write(
        &csv,
        "case_id,class_id,class_name,dsc\n\
         a,1,uterine_wall,0.86\na,2,uterine_cavity,0.79\na,3,myoma,0.70\na,4,nabothian_cyst,0.68\n",
    )
    .unwrap();
    let stdout = ok(&["report", "--csv", p(&csv)]);
    assert_eq!(
        stdout,
        "| Label | Dice Score |\n|---|---|\n\
         | Uterine Wall | 0.86 ± 0.00 |\n\
         | Uterine Cavity | 0.79 ± 0.00 |\n\
         | Myoma | 0.70 ± 0.00 |\n\
         | Nabothian Cyst | 0.68 ± 0.00 |\n\
         | Mean | 0.76 |\n"
    );
}

#[test]
fn gradcheck_reports_and_passes() {
    let stdout = ok(&["gradcheck", "--instances", "2", "--seed", "4"]);
    for op in ["conv3d", "conv_transpose3d", "instance_norm", "leaky_relu", "softmax", "dice_loss", "ce_loss", "total_loss", "micro_unet"] {
        assert!(stdout.contains(op), "{op} missing from\n{stdout}");
    }
    assert!(stdout.contains("max relative error"));
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let missing = myoseg(&["report", "--csv", "/nonexistent/dice.csv"]);
    assert!(!missing.status.success());
    let err = String::from_utf8_lossy(&missing.stderr);
    assert!(err.starts_with("error:") && err.contains("/nonexistent/dice.csv"), "{err}");

    let unknown = myoseg(&["split", "--frobnicate"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("--frobnicate"));

    let no_data = myoseg(&["split"]);
    assert!(!no_data.status.success());
    assert!(String::from_utf8_lossy(&no_data.stderr).contains("no data directory"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nepochz = 3\n").unwrap();
    let bad = myoseg(&["--config", p(&cfg), "gradcheck", "--instances", "1"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("epochz"));
}

#[test]
fn missing_prediction_is_a_per_case_failure() {
    let gt = tempfile::tempdir().unwrap();
    let pred = tempfile::tempdir().unwrap();
    gen(gt.path(), 2);
    fs::copy(
        gt.path().join("case_0001_seg.nii.gz"),
        pred.path().join("case_0001_pred.nii.gz"),
    )
    .unwrap();
    let out = myoseg(&["evaluate", "--pred", p(pred.path()), "--gt", p(gt.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("case_0000"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("| Mean | 1.00 |"));
}

#[test]
fn train_predict_evaluate_round_trip() {
    let data = tempfile::tempdir().unwrap();
    let run = tempfile::tempdir().unwrap();
    gen(data.path(), 4);
    let cfg = run.path().join("run.toml");
    fs::write(
        &cfg,
        "[model]\nlevels = 2\nbase_channels = 2\n\n[train]\nepochs = 1\nbatches_per_epoch = 2\npatch_size = [16, 16, 16]\nlearning_rate = 0.01\nmomentum = 0.9\n\n[inference]\npatch_size = [16, 16, 16]\nstride = [8, 8, 8]\n",
    )
    .unwrap();
    let c = p(&cfg);
    ok(&["--config", c, "--data-dir", p(data.path()), "split", "--fraction", "0.5"]);
    let split = data.path().join("split.toml");
    let model_dir = run.path().join("model");
    ok(&["--config", c, "train", "--data", p(data.path()), "--split", p(&split), "--out", p(&model_dir), "--epochs", "2"]);
    let log = fs::read_to_string(model_dir.join("training_log.csv")).unwrap();
    assert!(log.starts_with("epoch,mean_total_loss,mean_dice_loss,mean_ce_loss,lr\n"));
    assert_eq!(log.lines().count(), 3, "flag overrides the config's epoch count");
    let ckpt = model_dir.join("model.ckpt");
    assert_eq!(&fs::read(&ckpt).unwrap()[..4], b"MYO1");

    let preds = run.path().join("pred");
    let stdout = ok(&["--config", c, "predict", "--checkpoint", p(&ckpt), "--input", p(data.path()), "--out", p(&preds)]);
    assert_eq!(stdout.lines().count(), 4);
    assert!(preds.join("case_0000_pred.nii.gz").exists());

    let first = fs::read(preds.join("case_0002_pred.nii.gz")).unwrap();
    let single = run.path().join("single");
    ok(&[
        "--config",
        c,
        "predict",
        "--checkpoint",
        p(&ckpt),
        "--input",
        p(&data.path().join("case_0002_img.nii.gz")),
        "--out",
        p(&single),
    ]);
    assert_eq!(fs::read(single.join("case_0002_pred.nii.gz")).unwrap(), first);

    let by_files = ok(&["evaluate", "--pred", p(&preds), "--gt", p(data.path())]);
    assert!(by_files.contains("| Mean |"));
    let by_model = ok(&[
        "--config",
        c,
        "--jobs",
        "2",
        "evaluate",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(data.path()),
        "--split",
        p(&split),
    ]);
    assert!(by_model.contains("| Mean |"));
}
