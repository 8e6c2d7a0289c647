//! Segmentation losses: global multi-class soft Dice, voxel cross-entropy
//! and their unit-weighted sum.
//!
//! Dice loss over the configured class set `K` and all voxels `i`:
//!
//! ```text
//! L_dice = 1 − 2·Σ_K Σ_i p·g / (Σ_K Σ_i p² + Σ_K Σ_i g² + ε)
//! ```
//!
//! evaluated as `(Σ (p − g)² + ε) / (Σ p² + Σ g² + ε)`, which is the same
//! quantity without the cancellation of `1 − x` near a perfect prediction.
//!
//! Cross-entropy over every class: `L_ce = −Σ_i Σ_c g·ln(max(p, clamp))`,
//! optionally divided by the voxel count.

use serde::{Deserialize, Serialize};

use crate::tensor::{Backward, Real, Result, Tape, Tensor, TensorError, Var};

/// Which classes enter the Dice sums.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassSet {
    /// Every class except background (class 0).
    #[default]
    Foreground,
    /// Every class including background.
    All,
    Explicit(Vec<usize>),
}

impl ClassSet {
    pub fn resolve(&self, num_classes: usize) -> Vec<usize> {
        match self {
            ClassSet::Foreground => (1..num_classes).collect(),
            ClassSet::All => (0..num_classes).collect(),
            ClassSet::Explicit(v) => v.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub epsilon: f64,
    pub class_set: ClassSet,
    pub ce_reduction: Reduction,
    pub prob_clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            class_set: ClassSet::Foreground,
            ce_reduction: Reduction::Mean,
            prob_clamp: 1e-12,
        }
    }
}

impl LossConfig {
    /// Checks the training-time invariants (`ε > 0`, `clamp > 0`, non-empty
    /// class set). The loss functions themselves also accept `ε = 0`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let bad = |msg: String| Err(TensorError::Invalid { op: "loss_config", msg });
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if !(self.prob_clamp > 0.0) {
            return bad(format!("prob_clamp must be > 0, got {}", self.prob_clamp));
        }
        let classes = self.class_set.resolve(num_classes);
        if classes.is_empty() {
            return bad("class set is empty".into());
        }
        if let Some(&c) = classes.iter().find(|&&c| c >= num_classes) {
            return bad(format!("class {c} out of range for {num_classes} classes"));
        }
        Ok(())
    }

    /// Literal form used by oracle tests: all classes, `ε = 0`, summed CE.
    pub fn literal() -> Self {
        Self {
            epsilon: 0.0,
            class_set: ClassSet::All,
            ce_reduction: Reduction::Sum,
            prob_clamp: 1e-12,
        }
    }
}

/// `(batch, classes, voxels per instance)` of a `[batch, classes, ...]` tensor.
fn layout<T: Real>(t: &Tensor<T>) -> (usize, usize, usize) {
    let (b, c) = (t.shape()[0], t.shape()[1]);
    (b, c, t.len() / (b * c).max(1))
}

fn check_pair<T: Real>(op: &'static str, p: &Tensor<T>, g: &Tensor<T>) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: p.shape().to_vec(),
            right: g.shape().to_vec(),
        });
    }
    if p.rank() < 2 {
        return Err(TensorError::Rank {
            op,
            expected: 5,
            shape: p.shape().to_vec(),
        });
    }
    let (batch, classes, vox) = layout(g);
    let data = g.data();
    for n in 0..batch {
        for v in 0..vox {
            let mut total = T::zero();
            for c in 0..classes {
                let x = data[(n * classes + c) * vox + v];
                if x != T::zero() && x != T::one() {
                    return Err(TensorError::NotOneHot { op, voxel: n * vox + v });
                }
                total = total + x;
            }
            if total != T::one() {
                return Err(TensorError::NotOneHot { op, voxel: n * vox + v });
            }
        }
    }
    Ok(())
}

fn class_mask(op: &'static str, classes: &[usize], num_classes: usize) -> Result<Vec<bool>> {
    if classes.is_empty() {
        return Err(TensorError::Invalid {
            op,
            msg: "class set is empty".into(),
        });
    }
    let mut mask = vec![false; num_classes];
    for &c in classes {
        if c >= num_classes {
            return Err(TensorError::Invalid {
                op,
                msg: format!("class {c} out of range for {num_classes} classes"),
            });
        }
        mask[c] = true;
    }
    Ok(mask)
}

struct DiceBackward<T> {
    mask: Vec<bool>,
    intersection: T,
    denominator: T,
}

impl<T: Real> Backward<T> for DiceBackward<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, upstream: &[T], need: &[bool]) -> Vec<Option<Vec<T>>> {
        if !need[0] {
            return vec![None, None];
        }
        let (p, g) = (inputs[0], inputs[1]);
        let (batch, classes, vox) = layout(p);
        let two = T::lit(2.0);
        let s = self.denominator;
        let k_g = -two / s * upstream[0];
        let k_p = two * two * self.intersection / (s * s) * upstream[0];
        let mut d = vec![T::zero(); p.len()];
        for n in 0..batch {
            for c in (0..classes).filter(|&c| self.mask[c]) {
                let r = (n * classes + c) * vox..(n * classes + c + 1) * vox;
                for ((o, &pv), &gv) in d[r.clone()].iter_mut().zip(&p.data()[r.clone()]).zip(&g.data()[r]) {
                    *o = k_g * gv + k_p * pv;
                }
            }
        }
        vec![Some(d), None]
    }
}

/// Global multi-class soft Dice loss on the tape. Differentiable in `p`;
/// `g` is treated as a constant target.
pub fn dice_loss<T: Real>(tape: &mut Tape<T>, p: Var, g: Var, cfg: &LossConfig) -> Result<Var> {
    let (pt, gt) = (tape.value(p), tape.value(g));
    check_pair("dice_loss", pt, gt)?;
    let (batch, classes, vox) = layout(pt);
    let mask = class_mask("dice_loss", &cfg.class_set.resolve(classes), classes)?;
    let (mut inter, mut p2, mut g2, mut resid) = (T::zero(), T::zero(), T::zero(), T::zero());
    for n in 0..batch {
        for c in (0..classes).filter(|&c| mask[c]) {
            let r = (n * classes + c) * vox..(n * classes + c + 1) * vox;
            for (&pv, &gv) in pt.data()[r.clone()].iter().zip(&gt.data()[r]) {
                inter = inter + pv * gv;
                p2 = p2 + pv * pv;
                g2 = g2 + gv * gv;
                resid = resid + (pv - gv) * (pv - gv);
            }
        }
    }
    let eps = T::lit(cfg.epsilon);
    let denominator = p2 + g2 + eps;
    if denominator <= T::zero() {
        return Err(TensorError::Invalid {
            op: "dice_loss",
            msg: "denominator is zero (empty class set mass with epsilon = 0)".into(),
        });
    }
    let loss = (resid + eps) / denominator;
    Ok(tape.custom(
        &[p, g],
        Tensor::scalar(loss),
        DiceBackward {
            mask,
            intersection: inter,
            denominator,
        },
    ))
}

struct CrossEntropyBackward<T> {
    clamp: T,
    scale: T,
}

impl<T: Real> Backward<T> for CrossEntropyBackward<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, upstream: &[T], need: &[bool]) -> Vec<Option<Vec<T>>> {
        if !need[0] {
            return vec![None, None];
        }
        let (p, g) = (inputs[0], inputs[1]);
        let k = -self.scale * upstream[0];
        let d = p
            .data()
            .iter()
            .zip(g.data())
            .map(|(&pv, &gv)| {
                if gv == T::zero() || pv <= self.clamp {
                    T::zero()
                } else {
                    k * gv / pv
                }
            })
            .collect();
        vec![Some(d), None]
    }
}

/// Voxel cross-entropy over all classes, probabilities clamped below at
/// `prob_clamp` before the logarithm.
pub fn ce_loss<T: Real>(tape: &mut Tape<T>, p: Var, g: Var, cfg: &LossConfig) -> Result<Var> {
    let (pt, gt) = (tape.value(p), tape.value(g));
    check_pair("ce_loss", pt, gt)?;
    let (batch, _, vox) = layout(pt);
    let clamp = T::lit(cfg.prob_clamp);
    let scale = match cfg.ce_reduction {
        Reduction::Sum => T::one(),
        Reduction::Mean => T::one() / T::from_usize(batch * vox).unwrap(),
    };
    let mut total = T::zero();
    for (&pv, &gv) in pt.data().iter().zip(gt.data()) {
        if gv != T::zero() {
            total = total + gv * pv.max(clamp).ln();
        }
    }
    let loss = -total * scale;
    Ok(tape.custom(&[p, g], Tensor::scalar(loss), CrossEntropyBackward { clamp, scale }))
}

/// The three loss values recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub dice: Var,
    pub ce: Var,
}

/// `dice_loss + ce_loss` with unit weights.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, p: Var, g: Var, cfg: &LossConfig) -> Result<LossTerms> {
    let dice = dice_loss(tape, p, g, cfg)?;
    let ce = ce_loss(tape, p, g, cfg)?;
    let total = tape.add(dice, ce)?;
    Ok(LossTerms { total, dice, ce })
}

/// One-hot encode a label grid `[batch, spatial...]` into `[batch, classes, spatial...]`.
pub fn one_hot<T: Real>(labels: &[u8], batch: usize, num_classes: usize, spatial: [usize; 3]) -> Result<Tensor<T>> {
    let vox: usize = spatial.iter().product();
    if labels.len() != batch * vox {
        return Err(TensorError::BufferLength {
            shape: vec![batch, spatial[0], spatial[1], spatial[2]],
            expected: batch * vox,
            actual: labels.len(),
        });
    }
    let mut data = vec![T::zero(); batch * num_classes * vox];
    for n in 0..batch {
        for (v, &l) in labels[n * vox..(n + 1) * vox].iter().enumerate() {
            let l = l as usize;
            if l >= num_classes {
                return Err(TensorError::Invalid {
                    op: "one_hot",
                    msg: format!("label {l} out of range for {num_classes} classes"),
                });
            }
            data[(n * num_classes + l) * vox + v] = T::one();
        }
    }
    Tensor::new(&[batch, num_classes, spatial[0], spatial[1], spatial[2]], data)
}
