//! Central finite-difference checks of every differentiable operation.
//!
//! Each instance builds a scalar objective on a 64-bit tape (non-scalar ops
//! are reduced with a random weighting `Σ r ⊙ y`), takes the analytic
//! gradient with respect to every input, and compares it with
//! `(f(x + h e_i) − f(x − h e_i)) / 2h`. The instance error is
//! `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`.
//!
//! Leaky ReLU is not differentiable at 0. A coordinate whose ±h perturbation
//! flips the sign of any leaky ReLU input is skipped and counted.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{ce_loss, dice_loss, total_loss, ClassSet, LossConfig, Reduction};
use crate::tensor::{ConvGeometry, Tape, Tensor, Var};
use crate::unet::{Model, UNetConfig};

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradOp {
    Conv3d,
    ConvTranspose3d,
    InstanceNorm,
    LeakyRelu,
    Softmax,
    DiceLoss,
    CeLoss,
    TotalLoss,
    MicroUNet,
}

impl GradOp {
    pub const ALL: [GradOp; 9] = [
        GradOp::Conv3d,
        GradOp::ConvTranspose3d,
        GradOp::InstanceNorm,
        GradOp::LeakyRelu,
        GradOp::Softmax,
        GradOp::DiceLoss,
        GradOp::CeLoss,
        GradOp::TotalLoss,
        GradOp::MicroUNet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradOp::Conv3d => "conv3d",
            GradOp::ConvTranspose3d => "conv_transpose3d",
            GradOp::InstanceNorm => "instance_norm",
            GradOp::LeakyRelu => "leaky_relu",
            GradOp::Softmax => "softmax",
            GradOp::DiceLoss => "dice_loss",
            GradOp::CeLoss => "ce_loss",
            GradOp::TotalLoss => "total_loss",
            GradOp::MicroUNet => "micro_unet",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub op: GradOp,
    pub instances: usize,
    pub coordinates: usize,
    /// Coordinates left out because the perturbation crossed a kink.
    pub skipped: usize,
    pub max_rel_error: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`, and 0 when both are zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = norm(analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(analytic.iter().copied()).max(norm(numeric.iter().copied()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

type Objective = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

struct Evaluated {
    value: f64,
    kinks: Vec<bool>,
}

fn evaluate(inputs: &[Tensor<f64>], f: &Objective) -> Result<Evaluated> {
    let mut tape = Tape::leaf_grads_only();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let kinks = tape
        .vars()
        .filter(|&v| tape.op_name(v) == "leaky_relu")
        .flat_map(|v| tape.value(v).data().iter().map(|&x| x >= 0.0).collect::<Vec<_>>())
        .collect();
    Ok(Evaluated {
        value: tape.value(root).item(),
        kinks,
    })
}

struct InstanceResult {
    rel_error: f64,
    coordinates: usize,
    skipped: usize,
}

fn check_instance(inputs: Vec<Tensor<f64>>, f: &Objective) -> Result<InstanceResult> {
    let mut tape = Tape::leaf_grads_only();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let root = f(&mut tape, &vars)?;
    tape.backward(root)?;
    let base = evaluate(&inputs, f)?;

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut skipped = 0;
    let mut work = inputs.clone();
    for (t, &v) in vars.iter().enumerate() {
        let grad = tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[t].len()]);
        for (i, &a) in grad.iter().enumerate() {
            let x = inputs[t].data()[i];
            work[t].data_mut()[i] = x + STEP;
            let plus = evaluate(&work, f)?;
            work[t].data_mut()[i] = x - STEP;
            let minus = evaluate(&work, f)?;
            work[t].data_mut()[i] = x;
            if plus.kinks != base.kinks || minus.kinks != base.kinks {
                skipped += 1;
                continue;
            }
            analytic.push(a);
            numeric.push((plus.value - minus.value) / (2.0 * STEP));
        }
    }
    Ok(InstanceResult {
        rel_error: relative_error(&analytic, &numeric),
        coordinates: analytic.len(),
        skipped,
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_f64(shape, &(0..n).map(|_| rng.gen_range(lo..hi)).collect::<Vec<_>>()).expect("shape and data agree")
}

fn one_hot_random(rng: &mut ChaCha8Rng, batch: usize, classes: usize, vox: usize) -> Tensor<f64> {
    let mut g = vec![0.0; batch * classes * vox];
    for n in 0..batch {
        for v in 0..vox {
            g[(n * classes + rng.gen_range(0..classes)) * vox + v] = 1.0;
        }
    }
    Tensor::from_f64(&[batch, classes, vox], &g).expect("shape and data agree")
}

/// `Σ r ⊙ y` for a fixed random weighting `r`.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let prod = tape.mul(y, rv)?;
    Ok(tape.sum(prod))
}

fn random_loss_config(rng: &mut ChaCha8Rng, classes: usize) -> LossConfig {
    let class_set = match rng.gen_range(0..3) {
        0 => ClassSet::All,
        1 if classes > 1 => ClassSet::Foreground,
        _ => ClassSet::Explicit(vec![rng.gen_range(0..classes)]),
    };
    LossConfig {
        epsilon: if rng.gen_bool(0.5) { 1e-5 } else { 0.0 },
        class_set,
        ce_reduction: if rng.gen_bool(0.5) { Reduction::Sum } else { Reduction::Mean },
        prob_clamp: 1e-12,
    }
}

fn instance(op: GradOp, rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Objective>) {
    match op {
        GradOp::Conv3d | GradOp::ConvTranspose3d => {
            let transposed = op == GradOp::ConvTranspose3d;
            let (n, ci, co) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
            let k = rng.gen_range(1..=3);
            let stride = rng.gen_range(1..=2);
            let pad = rng.gen_range(0..k);
            let s = rng.gen_range(k.max(2)..=5);
            let x = uniform(rng, &[n, ci, s, s, s], -1.0, 1.0);
            let wshape = if transposed { [ci, co, k, k, k] } else { [co, ci, k, k, k] };
            let w = uniform(rng, &wshape, -1.0, 1.0);
            let b = uniform(rng, &[co], -1.0, 1.0);
            let geom = ConvGeometry::uniform(stride, pad);
            let out = if transposed {
                (s - 1) * stride + k - 2 * pad
            } else {
                (s + 2 * pad - k) / stride + 1
            };
            let r = uniform(rng, &[n, co, out, out, out], -1.0, 1.0);
            let f = move |tape: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
                let y = if transposed {
                    tape.conv_transpose3d(v[0], v[1], Some(v[2]), geom)?
                } else {
                    tape.conv3d(v[0], v[1], Some(v[2]), geom)?
                };
                weighted_sum(tape, y, &r)
            };
            (vec![x, w, b], Box::new(f))
        }
        GradOp::InstanceNorm => {
            let (n, c, s) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(2..=3));
            let x = uniform(rng, &[n, c, s, s, s], -2.0, 2.0);
            let gamma = uniform(rng, &[c], 0.5, 1.5);
            let beta = uniform(rng, &[c], -0.5, 0.5);
            let r = uniform(rng, &[n, c, s, s, s], -1.0, 1.0);
            let f = move |tape: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
                let y = tape.instance_norm(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(tape, y, &r)
            };
            (vec![x, gamma, beta], Box::new(f))
        }
        GradOp::LeakyRelu => {
            let len = rng.gen_range(4..=40);
            let data: Vec<f64> = (0..len)
                .map(|_| rng.gen_range(0.05..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
                .collect();
            let x = Tensor::from_f64(&[len], &data).expect("shape and data agree");
            let slope = rng.gen_range(0.01..0.3);
            let r = uniform(rng, &[len], -1.0, 1.0);
            let f = move |tape: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
                let y = tape.leaky_relu(v[0], slope);
                weighted_sum(tape, y, &r)
            };
            (vec![x], Box::new(f))
        }
        GradOp::Softmax => {
            let (n, c, vox) = (rng.gen_range(1..=2), rng.gen_range(2..=5), rng.gen_range(1..=8));
            let x = uniform(rng, &[n, c, vox], -2.0, 2.0);
            let r = uniform(rng, &[n, c, vox], -1.0, 1.0);
            let f = move |tape: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
                let y = tape.softmax_channels(v[0])?;
                weighted_sum(tape, y, &r)
            };
            (vec![x], Box::new(f))
        }
        GradOp::DiceLoss | GradOp::CeLoss => {
            let (n, c, vox) = (rng.gen_range(1..=2), rng.gen_range(2..=5), rng.gen_range(1..=16));
            // The ±h truncation error of ln p grows like h²/(3p²); p ≥ 0.2 keeps it near 1e-5.
            let p = uniform(rng, &[n, c, vox], 0.2, 1.0);
            let g = one_hot_random(rng, n, c, vox);
            let cfg = random_loss_config(rng, c);
            let dice = op == GradOp::DiceLoss;
            let f = move |tape: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
                let gv = tape.constant(g.clone());
                Ok(if dice {
                    dice_loss(tape, v[0], gv, &cfg)?
                } else {
                    ce_loss(tape, v[0], gv, &cfg)?
                })
            };
            (vec![p], Box::new(f))
        }
        GradOp::TotalLoss => {
            let (n, c, vox) = (rng.gen_range(1..=2), rng.gen_range(2..=5), rng.gen_range(1..=16));
            let logits = uniform(rng, &[n, c, vox], -2.0, 2.0);
            let g = one_hot_random(rng, n, c, vox);
            let cfg = LossConfig {
                epsilon: 1e-5,
                ..random_loss_config(rng, c)
            };
            let f = move |tape: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
                let p = tape.softmax_channels(v[0])?;
                let gv = tape.constant(g.clone());
                Ok(total_loss(tape, p, gv, &cfg)?.total)
            };
            (vec![logits], Box::new(f))
        }
        GradOp::MicroUNet => {
            let config = micro_config();
            let seed = rng.gen();
            let model = Model::<f64>::build(config.clone(), seed).expect("micro configuration is valid");
            let s = 4;
            let x = uniform(rng, &[1, 1, s, s, s], -1.0, 1.0);
            let labels: Vec<u8> = (0..s * s * s).map(|_| rng.gen_range(0..config.num_classes as u8)).collect();
            let g = crate::losses::one_hot::<f64>(&labels, 1, config.num_classes, [s; 3]).expect("labels in range");
            let cfg = LossConfig::default();
            let mut inputs = vec![x];
            inputs.extend(model.params().iter().cloned());
            let f = move |tape: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
                let bound = crate::unet::Bound::from_vars(v[1..].to_vec());
                let logits = model.forward_on(tape, &bound, v[0])?;
                let p = tape.softmax_channels(logits)?;
                let gv = tape.constant(g.clone());
                Ok(total_loss(tape, p, gv, &cfg)?.total)
            };
            (inputs, Box::new(f))
        }
    }
}

/// Two-level network with two channels at full resolution and four at the
/// 2³ bottleneck of a 4³ input.
pub fn micro_config() -> UNetConfig {
    UNetConfig {
        in_channels: 1,
        num_classes: 3,
        levels: 2,
        base_channels: 2,
        ..Default::default()
    }
}

/// Check `instances` random instances of `op`.
pub fn check_op(op: GradOp, instances: usize, seed: u64) -> Result<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(op as u64);
    let mut report = OpCheck {
        op,
        instances,
        coordinates: 0,
        skipped: 0,
        max_rel_error: 0.0,
    };
    for _ in 0..instances {
        let (inputs, f) = instance(op, &mut rng);
        let r = check_instance(inputs, f.as_ref())?;
        report.coordinates += r.coordinates;
        report.skipped += r.skipped;
        report.max_rel_error = report.max_rel_error.max(r.rel_error);
    }
    Ok(report)
}

/// Run every operation's check.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<OpCheck>> {
    GradOp::ALL.iter().map(|&op| check_op(op, instances, seed)).collect()
}
