//! Patch-based SGD training on Dice + cross-entropy.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::losses::{one_hot, total_loss, LossConfig};
use crate::tensor::{Real, Tape, Tensor};
use crate::unet::Model;
use crate::volume::{voxel_index, Case, LabelMap, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// An epoch is this many sampled batches, not a pass over the data.
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub patch_size: [usize; 3],
    pub learning_rate: f64,
    pub momentum: f64,
    pub nesterov: bool,
    /// Exponent of the polynomial decay `(1 - step/total)^p`.
    pub poly_exponent: f64,
    pub seed: u64,
    pub train_fraction: f64,
    /// Probability that a sampled patch is centred on a foreground voxel.
    pub foreground_patch_bias: f64,
    /// Chance of mirroring a sampled patch along each axis; 0 disables augmentation.
    pub mirror_probability: f64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            batches_per_epoch: 50,
            batch_size: 2,
            patch_size: [32, 32, 32],
            learning_rate: 0.01,
            momentum: 0.99,
            nesterov: true,
            poly_exponent: 0.9,
            seed: 0,
            train_fraction: 0.82,
            foreground_patch_bias: 0.5,
            mirror_probability: 0.0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, divisor: usize, num_classes: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs < 1 || self.batches_per_epoch < 1 || self.batch_size < 1 {
            return fail("epochs, batches_per_epoch and batch_size must be at least 1".into());
        }
        if self.patch_size.iter().any(|&p| p == 0 || p % divisor != 0) {
            return fail(format!(
                "patch size {:?} must be positive and divisible by {divisor}",
                self.patch_size
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate {} must be finite and >= 0", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if !(self.poly_exponent >= 0.0 && self.poly_exponent.is_finite()) {
            return fail(format!("poly exponent {} must be finite and >= 0", self.poly_exponent));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return fail(format!("train_fraction {} must lie in (0, 1)", self.train_fraction));
        }
        if !(0.0..=1.0).contains(&self.foreground_patch_bias) {
            return fail(format!(
                "foreground_patch_bias {} must lie in [0, 1]",
                self.foreground_patch_bias
            ));
        }
        if !(0.0..=1.0).contains(&self.mirror_probability) {
            return fail(format!("mirror_probability {} must lie in [0, 1]", self.mirror_probability));
        }
        self.loss.validate(num_classes)?;
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.batches_per_epoch
    }
}

/// `lr0 · (1 − step/total)^exponent`.
pub fn poly_lr(lr0: f64, step: usize, total: usize, exponent: f64) -> f64 {
    lr0 * (1.0 - step as f64 / total as f64).max(0.0).powf(exponent)
}

/// Shuffle with `seed` and cut after `round(n · train_fraction)` items.
pub fn split_dataset<I: Clone>(ids: &[I], train_fraction: f64, seed: u64) -> Result<(Vec<I>, Vec<I>)> {
    if ids.len() < 2 {
        return Err(Error::Invalid(format!("need at least 2 cases to split, got {}", ids.len())));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train_fraction {train_fraction} must lie in (0, 1)")));
    }
    let n = ids.len();
    let n_train = (n as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Invalid(format!(
            "splitting {n} cases at {train_fraction} leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize]| idx.iter().map(|&i| ids[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

/// An axis-aligned crop of an image and its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub offset: [usize; 3],
    pub size: [usize; 3],
    pub image: Vec<f32>,
    pub labels: Vec<u8>,
}

impl Patch {
    /// Reverse image and labels together along each axis flagged in `axes`.
    pub fn mirror(&mut self, axes: [bool; 3]) {
        if !axes.iter().any(|&a| a) {
            return;
        }
        let s = self.size;
        let src = |i: usize, a: usize| if axes[a] { s[a] - 1 - i } else { i };
        let mut image = Vec::with_capacity(self.image.len());
        let mut labels = Vec::with_capacity(self.labels.len());
        for d in 0..s[0] {
            for h in 0..s[1] {
                for w in 0..s[2] {
                    let j = voxel_index(s, src(d, 0), src(h, 1), src(w, 2));
                    image.push(self.image[j]);
                    labels.push(self.labels[j]);
                }
            }
        }
        self.image = image;
        self.labels = labels;
    }
}

/// Crop `size` voxels starting at `offset` from a W-fastest grid.
pub fn crop<V: Copy>(data: &[V], extents: [usize; 3], offset: [usize; 3], size: [usize; 3]) -> Vec<V> {
    let mut out = Vec::with_capacity(size.iter().product());
    for d in 0..size[0] {
        for h in 0..size[1] {
            let start = voxel_index(extents, offset[0] + d, offset[1] + h, offset[2]);
            out.extend_from_slice(&data[start..start + size[2]]);
        }
    }
    out
}

/// Sample a crop; with probability `foreground_bias` it is centred (as far
/// as the borders allow) on a uniformly chosen foreground voxel.
pub fn sample_patch(
    image: &Volume,
    labels: &LabelMap,
    size: [usize; 3],
    foreground_bias: f64,
    rng: &mut impl Rng,
) -> Result<Patch> {
    let ext = image.extents();
    if labels.extents() != ext {
        return Err(Error::Shape(format!(
            "image extents {ext:?} differ from label extents {:?}",
            labels.extents()
        )));
    }
    if (0..3).any(|a| size[a] > ext[a] || size[a] == 0) {
        return Err(Error::Shape(format!("patch {size:?} does not fit in volume {ext:?}")));
    }
    let want_fg = rng.gen::<f64>() < foreground_bias;
    let fg_count = if want_fg { labels.foreground() } else { 0 };
    let offset: [usize; 3] = if fg_count > 0 {
        let k = rng.gen_range(0..fg_count);
        let flat = labels
            .labels()
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != 0)
            .nth(k)
            .map(|(i, _)| i)
            .expect("k < foreground count");
        let centre = [flat / (ext[1] * ext[2]), (flat / ext[2]) % ext[1], flat % ext[2]];
        std::array::from_fn(|a| centre[a].saturating_sub(size[a] / 2).min(ext[a] - size[a]))
    } else {
        std::array::from_fn(|a| rng.gen_range(0..=ext[a] - size[a]))
    };
    Ok(Patch {
        offset,
        size,
        image: crop(image.data(), ext, offset, size),
        labels: crop(labels.labels(), ext, offset, size),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_total_loss: f64,
    pub mean_dice_loss: f64,
    pub mean_ce_loss: f64,
    /// Learning rate at the epoch's first step.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    /// CSV with header `epoch,mean_total_loss,mean_dice_loss,mean_ce_loss,lr`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        for r in &self.epochs {
            w.serialize(r)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(io_err(path))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Per-step RNG: batch composition depends only on `(seed, step)`.
fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

/// Draw the `step`-th training batch: `(images [B,1,P,P,P], labels [B,P,P,P])`.
pub fn sample_batch<T: Real>(cases: &[Case], cfg: &TrainConfig, step: usize) -> Result<(Tensor<T>, Vec<u8>)> {
    let mut rng = step_rng(cfg.seed, step);
    let p = cfg.patch_size;
    let vox: usize = p.iter().product();
    let mut images = Vec::with_capacity(cfg.batch_size * vox);
    let mut labels = Vec::with_capacity(cfg.batch_size * vox);
    for _ in 0..cfg.batch_size {
        let case = &cases[rng.gen_range(0..cases.len())];
        let mut patch = sample_patch(&case.image, &case.labels, p, cfg.foreground_patch_bias, &mut rng)
            .map_err(|e| Error::Invalid(format!("case {}: {e}", case.id)))?;
        if cfg.mirror_probability > 0.0 {
            let axes = [0, 1, 2].map(|_| rng.gen::<f64>() < cfg.mirror_probability);
            patch.mirror(axes);
        }
        images.extend(patch.image.iter().map(|&v| T::from_f32(v).unwrap()));
        labels.extend_from_slice(&patch.labels);
    }
    let x = Tensor::new(&[cfg.batch_size, 1, p[0], p[1], p[2]], images)?;
    Ok((x, labels))
}

/// Loss values and parameter gradients of one batch.
pub struct StepResult<T> {
    pub total: f64,
    pub dice: f64,
    pub ce: f64,
    pub grads: Vec<Vec<T>>,
}

/// Forward and backward pass of `total_loss` on one batch.
pub fn loss_and_grads<T: Real>(
    model: &Model<T>,
    images: &Tensor<T>,
    labels: &[u8],
    loss: &LossConfig,
) -> Result<StepResult<T>> {
    let shape = images.shape();
    let spatial = [shape[2], shape[3], shape[4]];
    let target = one_hot::<T>(labels, shape[0], model.config().num_classes, spatial)?;
    let mut tape = Tape::leaf_grads_only();
    let bound = model.bind(&mut tape);
    let x = tape.constant(images.clone());
    let logits = model.forward_on(&mut tape, &bound, x)?;
    let probs = tape.softmax_channels(logits)?;
    let g = tape.constant(target);
    let terms = total_loss(&mut tape, probs, g, loss)?;
    let value = |v| tape.value(v).item().to_f64().unwrap();
    let (total, dice, ce) = (value(terms.total), value(terms.dice), value(terms.ce));
    if !(total.is_finite() && dice.is_finite() && ce.is_finite()) {
        return Ok(StepResult {
            total,
            dice,
            ce,
            grads: Vec::new(),
        });
    }
    tape.backward(terms.total)?;
    let grads = bound
        .vars()
        .iter()
        .zip(model.params())
        .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![T::zero(); p.len()], <[T]>::to_vec))
        .collect();
    Ok(StepResult { total, dice, ce, grads })
}

/// SGD with (optionally Nesterov) momentum over a model's parameters.
pub struct Sgd<T> {
    pub momentum: f64,
    pub nesterov: bool,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(model: &Model<T>, momentum: f64, nesterov: bool) -> Self {
        Self {
            momentum,
            nesterov,
            velocity: model.params().iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    /// `v ← μv + g`; `θ ← θ − lr·(g + μv)` (Nesterov) or `θ ← θ − lr·v`.
    pub fn step(&mut self, model: &mut Model<T>, grads: &[Vec<T>], lr: f64) {
        let (lr, mu) = (T::lit(lr), T::lit(self.momentum));
        for ((p, g), v) in model.params_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = mu * *vi + gi;
                let update = if self.nesterov { gi + mu * *vi } else { *vi };
                *w = *w - lr * update;
            }
        }
    }
}

/// Train in place for `cfg.epochs × cfg.batches_per_epoch` steps, calling
/// `on_epoch` after each epoch.
pub fn train_with<T: Real>(
    model: &mut Model<T>,
    cases: &[Case],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainingLog> {
    cfg.validate(model.config().divisor(), model.config().num_classes)?;
    if cases.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    if model.config().in_channels != 1 {
        return Err(Error::Config("training expects single-channel images".into()));
    }
    let total_steps = cfg.total_steps();
    let mut opt = Sgd::new(model, cfg.momentum, cfg.nesterov);
    let mut log = TrainingLog::default();
    for epoch in 0..cfg.epochs {
        let first = epoch * cfg.batches_per_epoch;
        let mut sums = [0.0f64; 3];
        for step in first..first + cfg.batches_per_epoch {
            let lr = poly_lr(cfg.learning_rate, step, total_steps, cfg.poly_exponent);
            let (x, y) = sample_batch::<T>(cases, cfg, step)?;
            let r = loss_and_grads(model, &x, &y, &cfg.loss)?;
            if r.grads.is_empty() {
                return Err(Error::NonFiniteLoss {
                    step,
                    lr,
                    total: r.total,
                    dice: r.dice,
                    ce: r.ce,
                });
            }
            opt.step(model, &r.grads, lr);
            sums[0] += r.total;
            sums[1] += r.dice;
            sums[2] += r.ce;
        }
        let n = cfg.batches_per_epoch as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            mean_total_loss: sums[0] / n,
            mean_dice_loss: sums[1] / n,
            mean_ce_loss: sums[2] / n,
            lr: poly_lr(cfg.learning_rate, first, total_steps, cfg.poly_exponent),
        };
        on_epoch(&record);
        log.epochs.push(record);
    }
    Ok(log)
}

pub fn train<T: Real>(model: &mut Model<T>, cases: &[Case], cfg: &TrainConfig) -> Result<TrainingLog> {
    train_with(model, cases, cfg, |_| {})
}
