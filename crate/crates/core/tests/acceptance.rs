//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line with the measured values; tolerances are pinned below.
//!
//! The two training criteria take several minutes each. They hold a shared
//! lock so their wall-clock budgets are not eaten by each other.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use myoseg::gradcheck::{run_suite, GradOp};
use myoseg::inference::{evaluate_cases, predict, InferenceConfig};
use myoseg::losses::{dice_loss, one_hot, total_loss, ClassSet, LossConfig, Reduction};
use myoseg::metrics::{aggregate, dsc, CaseDice, DiceReport};
use myoseg::nifti::{encode_label_map, encode_volume, parse, NiftiError};
use myoseg::phantom::{generate, PhantomSpec};
use myoseg::tensor::{Tape, Tensor};
use myoseg::trainer::{split_dataset, train, train_with, TrainConfig};
use myoseg::unet::{Model, UNetConfig};
use myoseg::volume::{DataType, Orientation};
use myoseg::{Case, LabelMap, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_TOLERANCE: f64 = 1e-4;
const FD_INSTANCES: usize = 20;
const FD_BUDGET: Duration = Duration::from_secs(120);
const LOSS_TOLERANCE: f64 = 1e-10;
const METRIC_LOSS_TOLERANCE: f64 = 1e-12;
const OVERFIT_MIN_DSC: f64 = 0.90;
const OVERFIT_BUDGET: Duration = Duration::from_secs(15 * 60);
const GENERALIZE_MIN_WALL: f64 = 0.80;
const GENERALIZE_MIN_CAVITY: f64 = 0.80;
const GENERALIZE_MIN_MYOMA: f64 = 0.60;
const GENERALIZE_BUDGET: Duration = Duration::from_secs(60 * 60);

static HEAVY: Mutex<()> = Mutex::new(());

fn report(n: u32, pass: bool, detail: impl std::fmt::Display) {
    println!("criterion {n}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
}

fn desk_model() -> UNetConfig {
    UNetConfig {
        levels: 4,
        base_channels: 8,
        ..UNetConfig::default()
    }
}

fn desk_training() -> TrainConfig {
    TrainConfig {
        epochs: 60,
        batches_per_epoch: 20,
        batch_size: 2,
        patch_size: [32; 3],
        learning_rate: 0.02,
        momentum: 0.9,
        ..TrainConfig::default()
    }
}

/// Held-out scoring needs more steps than memorization and mirrored patches
/// against overfitting 20 cases; still well inside the budget.
fn generalize_training() -> TrainConfig {
    TrainConfig {
        epochs: 150,
        mirror_probability: 0.5,
        ..desk_training()
    }
}

fn desk_inference() -> InferenceConfig {
    InferenceConfig {
        patch_size: [32; 3],
        stride: [16; 3],
        ..InferenceConfig::default()
    }
}

fn phantom_cases(seeds: impl IntoIterator<Item = u64>) -> Vec<Case> {
    seeds
        .into_iter()
        .map(|s| {
            let (image, labels) = generate(&PhantomSpec::with_seed(s)).unwrap();
            Case::new(format!("case_{s:04}"), image, labels).unwrap()
        })
        .collect()
}

fn class_mean(report: &DiceReport, class: u8) -> f64 {
    report.per_class.get(&class).map_or(f64::NAN, |s| s.mean)
}

#[test]
fn criterion_1_finite_difference_suite() {
    let start = Instant::now();
    let checks = run_suite(FD_INSTANCES, 0).unwrap();
    let elapsed = start.elapsed();
    for c in &checks {
        println!(
            "  {:<16} instances {:>3}  coordinates {:>6}  skipped {:>5}  max rel error {:.3e}",
            c.op.name(),
            c.instances,
            c.coordinates,
            c.skipped,
            c.max_rel_error
        );
    }
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let pass = checks.len() == GradOp::ALL.len()
        && checks.iter().all(|c| c.instances >= FD_INSTANCES && c.max_rel_error <= FD_TOLERANCE)
        && elapsed < FD_BUDGET;
    report(1, pass, format!("worst {worst:.3e} <= {FD_TOLERANCE:e}, {:.1?} < {FD_BUDGET:?}", elapsed));
    assert!(pass);
}

fn simplex(rng: &mut ChaCha8Rng, c: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut p = vec![0.0; c * n];
    let mut g = vec![0.0; c * n];
    for v in 0..n {
        let w: Vec<f64> = (0..c).map(|_| rng.gen_range(-4.0f64..4.0).exp()).collect();
        let z: f64 = w.iter().sum();
        for k in 0..c {
            p[k * n + v] = w[k] / z;
        }
        g[rng.gen_range(0..c) * n + v] = 1.0;
    }
    (p, g)
}

#[test]
fn criterion_2_loss_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (c, n) = (rng.gen_range(2..=5), rng.gen_range(1..=64));
        let (p, g) = simplex(&mut rng, c, n);
        let eps = [0.0, 1e-5][rng.gen_range(0..2)];
        let cfg = LossConfig {
            epsilon: eps,
            class_set: ClassSet::All,
            ce_reduction: Reduction::Sum,
            prob_clamp: 1e-12,
        };
        let mut tape = Tape::<f64>::new();
        let pv = tape.constant(Tensor::from_f64(&[1, c, n], &p).unwrap());
        let gv = tape.constant(Tensor::from_f64(&[1, c, n], &g).unwrap());
        let terms = total_loss(&mut tape, pv, gv, &cfg).unwrap();

        let inter: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
        let denom: f64 = p.iter().map(|a| a * a).sum::<f64>() + g.iter().map(|b| b * b).sum::<f64>() + eps;
        let dice = 1.0 - 2.0 * inter / denom;
        let ce: f64 = p.iter().zip(&g).map(|(a, b)| -b * a.ln()).sum();
        worst = worst
            .max((tape.value(terms.dice).item() - dice).abs())
            .max((tape.value(terms.ce).item() - ce).abs());
    }
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(Tensor::from_f64(&[1, 2, 2], &[0.8, 0.6, 0.2, 0.4]).unwrap());
    let g = tape.constant(Tensor::from_f64(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
    let l = dice_loss(&mut tape, p, g, &LossConfig::literal()).unwrap();
    let example = tape.value(l).item();
    // 0.25 up to the single rounding of the binary64 inputs.
    let pass = worst <= LOSS_TOLERANCE && (example - 0.25).abs() <= 1e-15;
    report(2, pass, format!("max oracle gap {worst:.2e}, worked example {example}"));
    assert!(pass);
}

#[test]
fn criterion_3_metric_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let ext = [rng.gen_range(1..=16), rng.gen_range(1..=16), rng.gen_range(1..=16)];
        let n: usize = ext.iter().product();
        let a: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=4)).collect();
        let b: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=4)).collect();
        let (ma, mb) = (
            LabelMap::new(ext, [1.0; 3], a.clone()).unwrap(),
            LabelMap::new(ext, [1.0; 3], b.clone()).unwrap(),
        );
        for k in 0..=4u8 {
            let (mut both, mut na, mut nb) = (0usize, 0usize, 0usize);
            for (&x, &y) in a.iter().zip(&b) {
                both += usize::from(x == k && y == k);
                na += usize::from(x == k);
                nb += usize::from(y == k);
            }
            let brute = (na + nb > 0).then(|| 2.0 * both as f64 / (na + nb) as f64);
            let got = dsc(&ma, &mb, k).unwrap();
            mismatches += usize::from(got != brute);
            if na > 0 && nb > 0 {
                let mut tape = Tape::<f64>::new();
                let p = tape.constant(one_hot(&a, 1, 5, ext).unwrap());
                let g = tape.constant(one_hot(&b, 1, 5, ext).unwrap());
                let cfg = LossConfig {
                    epsilon: 0.0,
                    class_set: ClassSet::Explicit(vec![k as usize]),
                    ..LossConfig::default()
                };
                let l = dice_loss(&mut tape, p, g, &cfg).unwrap();
                worst = worst.max((got.unwrap() - (1.0 - tape.value(l).item())).abs());
            }
        }
    }
    let pass = mismatches == 0 && worst <= METRIC_LOSS_TOLERANCE;
    report(3, pass, format!("{mismatches} mismatches against counting, max gap to 1 - dice_loss {worst:.2e}"));
    assert!(pass);
}

#[test]
fn criterion_4_shapes_and_determinism() {
    let mut failures = Vec::new();
    for levels in 2..=5 {
        let cfg = UNetConfig {
            levels,
            ..UNetConfig::default()
        };
        let model = Model::<f32>::build(cfg, 0).unwrap();
        for s in [16, 32] {
            for batch in [1, 2] {
                let x = Tensor::full(&[batch, 1, s, s, s], 0.5f32);
                let shape = model.forward(&x).unwrap().shape().to_vec();
                if shape != [batch, 5, s, s, s] {
                    failures.push(format!("levels {levels}, {s}^3: {shape:?}"));
                }
            }
        }
    }
    let cases = phantom_cases(0..2);
    let cfg = TrainConfig {
        epochs: 2,
        batches_per_epoch: 2,
        patch_size: [16; 3],
        ..desk_training()
    };
    let run = || {
        let mut model = Model::<f32>::build(desk_model(), 7).unwrap();
        train(&mut model, &cases, &cfg).unwrap();
        let map = predict(&model, &cases[0].image, [16; 3], [8; 3]).unwrap();
        (model.to_checkpoint_bytes(), map)
    };
    let (ckpt_a, map_a) = run();
    let (ckpt_b, map_b) = run();
    let deterministic = ckpt_a == ckpt_b && map_a == map_b;
    let pass = failures.is_empty() && deterministic;
    report(
        4,
        pass,
        format!("shape failures {failures:?}, bit-identical checkpoint and labels: {deterministic}"),
    );
    assert!(pass);
}

#[test]
fn criterion_5_overfit_surrogate() {
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let cases = phantom_cases(0..4);
    let cfg = desk_training();
    let start = Instant::now();
    let mut model = Model::<f32>::build(desk_model(), 0).unwrap();
    let log = train_with(&mut model, &cases, &cfg, |r| {
        println!("  epoch {:>2}  loss {:.4}  lr {:.5}", r.epoch, r.mean_total_loss, r.lr)
    })
    .unwrap();
    let eval = evaluate_cases(&model, &cases, &desk_inference()).unwrap();
    let elapsed = start.elapsed();
    let report_ = eval.report.unwrap();
    print!("{}", report_.to_markdown());
    let first = log.epochs.first().unwrap().mean_total_loss;
    let last = log.epochs.last().unwrap().mean_total_loss;
    let finite = log.epochs.iter().all(|r| r.mean_total_loss.is_finite());
    let mean = report_.overall_mean;
    let pass = eval.failures.is_empty()
        && mean >= OVERFIT_MIN_DSC
        && finite
        && last <= 0.5 * first
        && elapsed <= OVERFIT_BUDGET;
    report(
        5,
        pass,
        format!(
            "mean foreground DSC {mean:.4} >= {OVERFIT_MIN_DSC}, loss {first:.4} -> {last:.4}, {:.0?} <= {OVERFIT_BUDGET:?}",
            elapsed
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_generalization_surrogate() {
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let ids: Vec<u64> = (0..25).collect();
    let (train_ids, test_ids) = split_dataset(&ids, 0.8, 0).unwrap();
    assert_eq!((train_ids.len(), test_ids.len()), (20, 5));
    let (train_cases, test_cases) = (phantom_cases(train_ids), phantom_cases(test_ids));
    let start = Instant::now();
    let mut model = Model::<f32>::build(desk_model(), 0).unwrap();
    let log = train(&mut model, &train_cases, &generalize_training()).unwrap();
    let eval = evaluate_cases(&model, &test_cases, &desk_inference()).unwrap();
    let elapsed = start.elapsed();
    let r = eval.report.unwrap();
    print!("{}", r.to_markdown());
    let (wall, cavity, myoma) = (class_mean(&r, 1), class_mean(&r, 2), class_mean(&r, 3));
    let pass = eval.failures.is_empty()
        && log.epochs.iter().all(|e| e.mean_total_loss.is_finite())
        && wall >= GENERALIZE_MIN_WALL
        && cavity >= GENERALIZE_MIN_CAVITY
        && myoma >= GENERALIZE_MIN_MYOMA
        && wall > cavity
        && cavity > myoma
        && elapsed <= GENERALIZE_BUDGET;
    report(
        6,
        pass,
        format!(
            "wall {wall:.4} cavity {cavity:.4} myoma {myoma:.4}, {:.0?} <= {GENERALIZE_BUDGET:?}",
            elapsed
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_split_law() {
    let ids: Vec<u32> = (0..300).collect();
    let sizes: Vec<(usize, usize)> = (0..50)
        .map(|seed| {
            let (a, b) = split_dataset(&ids, 0.82, seed).unwrap();
            (a.len(), b.len())
        })
        .collect();
    let pass = sizes.iter().all(|&s| s == (246, 54));
    report(7, pass, format!("sizes over 50 seeds: {:?}", sizes[0]));
    assert!(pass);
}

#[test]
fn criterion_8_aggregation() {
    let case = CaseDice::new("table")
        .with(1, Some(0.86))
        .with(2, Some(0.79))
        .with(3, Some(0.70))
        .with(4, Some(0.68));
    let r = aggregate(&[case]).unwrap();
    let rendered = format!("{:.2}", r.overall_mean);
    let markdown = r.to_markdown();
    let pass = rendered == "0.76" && markdown.ends_with("| Mean | 0.76 |\n");
    report(8, pass, format!("overall mean {} renders as {rendered}", r.overall_mean));
    assert!(pass);
}

fn fuzz_volume(rng: &mut ChaCha8Rng) -> Volume {
    let ext = [rng.gen_range(1..=12), rng.gen_range(1..=12), rng.gen_range(1..=12)];
    let n: usize = ext.iter().product();
    let dtype = [DataType::Uint8, DataType::Int16, DataType::Float32][rng.gen_range(0..3)];
    let data = (0..n)
        .map(|_| match dtype {
            DataType::Uint8 => rng.gen_range(0..=255) as f32,
            DataType::Int16 => rng.gen_range(-32768..=32767) as f32,
            DataType::Float32 => loop {
                let v = f32::from_bits(rng.gen());
                if v.is_finite() {
                    break v;
                }
            },
        })
        .collect();
    let spacing = [rng.gen_range(0.2..4.0), rng.gen_range(0.2..4.0), rng.gen_range(0.2..4.0)];
    let mut v = Volume::new(ext, spacing, data).unwrap().with_dtype(dtype);
    let mut o = [0u8; 76];
    rng.fill(&mut o[..]);
    v.orientation = Orientation(o);
    v
}

#[test]
fn criterion_9_nifti_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut exact = 0;
    for i in 0..200 {
        if i % 2 == 0 {
            let v = fuzz_volume(&mut rng);
            let back = parse(&encode_volume(&v).unwrap()).unwrap().into_volume().unwrap();
            let same = back.extents() == v.extents()
                && back.spacing().map(f32::to_bits) == v.spacing().map(f32::to_bits)
                && back.dtype == v.dtype
                && back.orientation == v.orientation
                && back.data().iter().map(|x| x.to_bits()).eq(v.data().iter().map(|x| x.to_bits()));
            exact += usize::from(same);
        } else {
            let ext = [rng.gen_range(1..=12), rng.gen_range(1..=12), rng.gen_range(1..=12)];
            let n: usize = ext.iter().product();
            let m = LabelMap::new(ext, [1.0, 0.5, 2.0], (0..n).map(|_| rng.gen_range(0..=4)).collect()).unwrap();
            let back = parse(&encode_label_map(&m).unwrap()).unwrap().into_label_map().unwrap();
            exact += usize::from(back == m);
        }
    }
    let mut structured = 0;
    for _ in 0..50 {
        let bytes = encode_volume(&fuzz_volume(&mut rng)).unwrap();
        let cut = rng.gen_range(0..bytes.len());
        let outcome = std::panic::catch_unwind(|| parse(&bytes[..cut]));
        structured += usize::from(matches!(outcome, Ok(Err(NiftiError::Truncated { .. }))));
    }
    let pass = exact == 200 && structured == 50;
    report(9, pass, format!("{exact}/200 bit-exact round trips, {structured}/50 truncations reported"));
    assert!(pass);
}
