mod config;
mod dataset;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use myoseg::gradcheck::{run_suite, TOLERANCE};
use myoseg::inference::{evaluate_cases, map_ordered, predict, summarize, Evaluation};
use myoseg::metrics::{aggregate, case_dice, load_csv, DiceReport, EmptyPolicy};
use myoseg::nifti::{read_label_map, read_volume, write_label_map, write_volume};
use myoseg::phantom::{generate, PhantomSpec};
use myoseg::trainer::{split_dataset, train_with};
use myoseg::unet::{read_checkpoint, write_checkpoint, Model};

use config::RunConfig;
use dataset::{case_name, file_name, load_cases, parse_name, scan, Split, IMAGE, PREDICTION, SEGMENTATION};

#[derive(Parser, Debug)]
#[command(name = "myoseg", version, about = "3D U-Net segmentation of uterine MRI")]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Default data directory for commands that read or write cases.
    #[arg(long, global = true, env = "MYOSEG_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Worker threads for per-case evaluation.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic phantom cases as NIfTI image/ground-truth pairs.
    GenPhantoms(GenArgs),
    /// Split the cases of a directory into train and test ids.
    Split(SplitArgs),
    /// Train a network and write its checkpoint and log.
    Train(TrainArgs),
    /// Predict label maps for one image or a directory of images.
    Predict(PredictArgs),
    /// Score predictions against ground truth and report per-class Dice.
    Evaluate(EvaluateArgs),
    /// Render the Dice table for a per-case results CSV.
    Report(ReportArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output directory (defaults to the data directory).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// Case `i` uses seed `seed + i`.
    #[arg(long)]
    seed: Option<u64>,
    /// Edge length of the cubic grid.
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Where to write the split (defaults to `<data>/split.toml`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Train on the `train` ids of this split instead of splitting afresh.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Directory for `model.ckpt` and `training_log.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batches_per_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Cubic patch edge length.
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
}

#[derive(Args, Debug)]
struct WindowArgs {
    /// Cubic window edge length.
    #[arg(long)]
    patch: Option<usize>,
    /// Window step along every axis.
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// An image file or a directory of `*_img.nii[.gz]` files.
    #[arg(long)]
    input: PathBuf,
    /// Output directory (defaults to next to each input).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    window: WindowArgs,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Directory of `*_pred` (or `*_seg`) label maps.
    #[arg(long, requires = "gt", conflicts_with = "checkpoint")]
    pred: Option<PathBuf>,
    /// Directory of `*_seg` ground-truth label maps.
    #[arg(long, requires = "pred")]
    gt: Option<PathBuf>,
    /// Predict the cases of `--data` with this checkpoint instead.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// With `--checkpoint`, evaluate only the split's test ids.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Score a class absent from both maps as 1 instead of leaving it out.
    #[arg(long)]
    empty_as_one: bool,
    /// Directory for `dice.csv`, `report.md` and box-plot data.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    window: WindowArgs,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Per-case CSV with header `case_id,class_id,class_name,dsc`.
    #[arg(long)]
    csv: PathBuf,
    /// Directory for `report.md` and box-plot data.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

struct Env {
    cfg: RunConfig,
    data_dir: Option<PathBuf>,
    jobs: usize,
}

impl Env {
    fn data(&self, flag: Option<PathBuf>) -> Result<PathBuf> {
        flag.or_else(|| self.data_dir.clone())
            .context("no data directory: pass --data, --data-dir, set MYOSEG_DATA_DIR or data_dir in the config")
    }

    fn window(&self, w: &WindowArgs) -> ([usize; 3], [usize; 3]) {
        let patch = w.patch.map_or(self.cfg.inference.patch_size, |p| [p; 3]);
        let stride = w.stride.map_or(self.cfg.inference.stride, |s| [s; 3]);
        (patch, stride)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn gen_phantoms(ctx: &Env, a: GenArgs) -> Result<ExitCode> {
    let out = ctx.data(a.out)?;
    create_dir(&out)?;
    let base = PhantomSpec {
        seed: a.seed.unwrap_or(ctx.cfg.phantom.seed),
        size: a.size.map_or(ctx.cfg.phantom.size, |s| [s; 3]),
        ..ctx.cfg.phantom.clone()
    };
    base.validate()?;
    for i in 0..a.count {
        let spec = PhantomSpec {
            seed: base.seed + i as u64,
            ..base.clone()
        };
        let (image, labels) = generate(&spec)?;
        let id = case_name(i);
        write_volume(&out.join(file_name(&id, IMAGE)), &image)?;
        write_label_map(&out.join(file_name(&id, SEGMENTATION)), &labels)?;
    }
    println!("wrote {} phantom cases to {}", a.count, out.display());
    Ok(ExitCode::SUCCESS)
}

fn split(ctx: &Env, a: SplitArgs) -> Result<ExitCode> {
    let data = ctx.data(a.data)?;
    let ids: Vec<String> = scan(&data, IMAGE)?.into_keys().collect();
    let fraction = a.fraction.unwrap_or(ctx.cfg.train.train_fraction);
    let seed = a.seed.unwrap_or(ctx.cfg.train.seed);
    let (train, test) = split_dataset(&ids, fraction, seed)?;
    let out = a.out.unwrap_or_else(|| data.join("split.toml"));
    println!("train {} / test {} -> {}", train.len(), test.len(), out.display());
    Split {
        seed,
        train_fraction: fraction,
        train,
        test,
    }
    .save(&out)?;
    Ok(ExitCode::SUCCESS)
}

fn train(ctx: &Env, a: TrainArgs) -> Result<ExitCode> {
    let data = ctx.data(a.data)?;
    let mut model_cfg = ctx.cfg.model.clone();
    model_cfg.levels = a.levels.unwrap_or(model_cfg.levels);
    model_cfg.base_channels = a.base_channels.unwrap_or(model_cfg.base_channels);
    let mut cfg = ctx.cfg.train.clone();
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.batches_per_epoch = a.batches_per_epoch.unwrap_or(cfg.batches_per_epoch);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.patch_size = a.patch.map_or(cfg.patch_size, |p| [p; 3]);
    cfg.learning_rate = a.lr.unwrap_or(cfg.learning_rate);
    cfg.momentum = a.momentum.unwrap_or(cfg.momentum);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    model_cfg.validate()?;
    cfg.validate(model_cfg.divisor(), model_cfg.num_classes)?;

    let train_ids = match &a.split {
        Some(path) => Split::load(path)?.train,
        None => {
            let ids: Vec<String> = scan(&data, IMAGE)?.into_keys().collect();
            split_dataset(&ids, cfg.train_fraction, cfg.seed)?.0
        }
    };
    let cases = load_cases(&data, Some(&train_ids))?;
    create_dir(&a.out)?;
    let mut model = Model::<f32>::build(model_cfg, cfg.seed)?;
    eprintln!(
        "training {} parameters on {} cases for {} steps",
        model.parameter_count(),
        cases.len(),
        cfg.total_steps()
    );
    let start = Instant::now();
    let log = train_with(&mut model, &cases, &cfg, |r| {
        eprintln!(
            "epoch {:>4}  loss {:.5}  dice {:.5}  ce {:.5}  lr {:.6}  {:.0}s",
            r.epoch,
            r.mean_total_loss,
            r.mean_dice_loss,
            r.mean_ce_loss,
            r.lr,
            start.elapsed().as_secs_f64()
        )
    })?;
    write_checkpoint(&model, &a.out.join("model.ckpt"))?;
    log.save_csv(&a.out.join("training_log.csv"))?;
    println!("wrote {}", a.out.join("model.ckpt").display());
    Ok(ExitCode::SUCCESS)
}

fn predict_cmd(ctx: &Env, a: PredictArgs) -> Result<ExitCode> {
    let model: Model<f32> = read_checkpoint(&a.checkpoint)?;
    let (patch, stride) = ctx.window(&a.window);
    let inputs: Vec<(String, PathBuf)> = if a.input.is_dir() {
        scan(&a.input, IMAGE)?.into_iter().collect()
    } else {
        let id = parse_name(&a.input).map_or_else(
            || {
                a.input
                    .file_stem()
                    .map_or("prediction".into(), |s| s.to_string_lossy().into_owned())
            },
            |(id, _)| id,
        );
        vec![(id, a.input.clone())]
    };
    if inputs.is_empty() {
        bail!("no *_{IMAGE}.nii[.gz] files in {}", a.input.display());
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
    }
    for (id, path) in inputs {
        let volume = read_volume(&path).with_context(|| format!("reading {}", path.display()))?;
        let labels = predict(&model, &volume, patch, stride).with_context(|| format!("case {id}"))?;
        let dir = a
            .out
            .clone()
            .unwrap_or_else(|| path.parent().map(Path::to_path_buf).unwrap_or_default());
        let target = dir.join(file_name(&id, PREDICTION));
        write_label_map(&target, &labels)?;
        println!("{}", target.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn publish(report: &DiceReport, out: Option<&Path>, with_csv: bool) -> Result<()> {
    print!("{}", report.to_markdown());
    if let Some(out) = out {
        create_dir(out)?;
        if with_csv {
            report.save_csv(&out.join("dice.csv"))?;
        }
        fs::write(out.join("report.md"), report.to_markdown())
            .with_context(|| format!("writing {}", out.join("report.md").display()))?;
        report.write_box_plot_data(&out.join("boxplot"))?;
    }
    Ok(())
}

fn evaluate(ctx: &Env, a: EvaluateArgs) -> Result<ExitCode> {
    let policy = if a.empty_as_one {
        EmptyPolicy::One
    } else {
        ctx.cfg.inference.empty_policy
    };
    let evaluation: Evaluation = if let (Some(pred), Some(gt)) = (&a.pred, &a.gt) {
        let truths: Vec<(String, PathBuf)> = scan(gt, SEGMENTATION)?.into_iter().collect();
        if truths.is_empty() {
            bail!("no *_{SEGMENTATION}.nii[.gz] files in {}", gt.display());
        }
        let preds = scan(pred, PREDICTION)?;
        let fallback = scan(pred, SEGMENTATION)?;
        let results = map_ordered(&truths, ctx.jobs, |(id, gt_path)| {
            let r = (|| -> myoseg::Result<_> {
                let pred_path = preds.get(id).or_else(|| fallback.get(id)).ok_or_else(|| {
                    myoseg::Error::Invalid(format!("no prediction for case {id} in {}", pred.display()))
                })?;
                let p = read_label_map(pred_path)?;
                let g = read_label_map(gt_path)?;
                case_dice(id.clone(), &p, &g, policy)
            })();
            (id.clone(), r)
        });
        summarize(results)
    } else if let Some(ckpt) = &a.checkpoint {
        let model: Model<f32> = read_checkpoint(ckpt)?;
        let data = ctx.data(a.data.clone())?;
        let ids = a.split.as_ref().map(|s| Split::load(s)).transpose()?.map(|s| s.test);
        let cases = load_cases(&data, ids.as_deref())?;
        let (patch_size, stride) = ctx.window(&a.window);
        let cfg = myoseg::inference::InferenceConfig {
            patch_size,
            stride,
            empty_policy: policy,
            jobs: ctx.jobs,
        };
        evaluate_cases(&model, &cases, &cfg)?
    } else {
        bail!("evaluate needs either --pred and --gt, or --checkpoint");
    };
    for f in &evaluation.failures {
        eprintln!("error: case {}: {}", f.case_id, f.error);
    }
    match &evaluation.report {
        Some(report) => publish(report, a.out.as_deref(), true)?,
        None => bail!("no case could be scored"),
    }
    Ok(if evaluation.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn report(a: ReportArgs) -> Result<ExitCode> {
    let cases = load_csv(&a.csv)?;
    let report = aggregate(&cases)?;
    publish(&report, a.out.as_deref(), false)?;
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let start = Instant::now();
    let checks = run_suite(a.instances, a.seed)?;
    println!("{:<18} {:>9} {:>11} {:>8} {:>14}", "op", "instances", "coordinates", "skipped", "max rel error");
    for c in &checks {
        println!(
            "{:<18} {:>9} {:>11} {:>8} {:>14.3e}",
            c.op.name(),
            c.instances,
            c.coordinates,
            c.skipped,
            c.max_rel_error
        );
    }
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    println!(
        "max relative error {worst:.3e} (tolerance {TOLERANCE:e}) in {:.1}s",
        start.elapsed().as_secs_f64()
    );
    Ok(if checks.iter().all(|c| c.passed()) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let ctx = Env {
        data_dir: cli.data_dir.or_else(|| cfg.data_dir.clone()),
        jobs: cli.jobs.unwrap_or(cfg.inference.jobs).max(1),
        cfg,
    };
    match cli.command {
        Command::GenPhantoms(a) => gen_phantoms(&ctx, a),
        Command::Split(a) => split(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Predict(a) => predict_cmd(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::Report(a) => report(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
