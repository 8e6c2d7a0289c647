//! Sliding-window prediction and test-set evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{aggregate, case_dice, CaseDice, DiceReport, EmptyPolicy};
use crate::tensor::{Real, Tensor};
use crate::trainer::crop;
use crate::unet::Model;
use crate::volume::{Case, LabelMap, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub patch_size: [usize; 3],
    pub stride: [usize; 3],
    pub empty_policy: EmptyPolicy,
    /// Worker threads for per-case evaluation.
    pub jobs: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            patch_size: [32, 32, 32],
            stride: [16, 16, 16],
            empty_policy: EmptyPolicy::Absent,
            jobs: 1,
        }
    }
}

/// Window start offsets along one axis: every `stride`, plus one window flush
/// with the end so the whole extent is covered.
pub fn window_starts(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = extent.saturating_sub(patch);
    let mut starts: Vec<usize> = (0..=last).step_by(stride).collect();
    if *starts.last().unwrap() != last {
        starts.push(last);
    }
    starts
}

/// Mirror index `i` into `0..n` without repeating the edge voxel.
pub fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

fn check_windows(patch: [usize; 3], stride: [usize; 3]) -> Result<()> {
    for a in 0..3 {
        if patch[a] == 0 || stride[a] == 0 || stride[a] > patch[a] {
            return Err(Error::Config(format!(
                "stride {stride:?} must satisfy 1 <= stride <= patch {patch:?} on every axis"
            )));
        }
    }
    Ok(())
}

/// Reflect-pad `volume` at the far end of each axis up to at least `patch`.
fn padded(volume: &Volume, patch: [usize; 3]) -> (Vec<f32>, [usize; 3]) {
    let ext = volume.extents();
    let pext: [usize; 3] = std::array::from_fn(|a| ext[a].max(patch[a]));
    if pext == ext {
        return (volume.data().to_vec(), ext);
    }
    let mut out = Vec::with_capacity(pext.iter().product());
    for d in 0..pext[0] {
        for h in 0..pext[1] {
            for w in 0..pext[2] {
                out.push(volume.get(reflect_index(d, ext[0]), reflect_index(h, ext[1]), reflect_index(w, ext[2])));
            }
        }
    }
    (out, pext)
}

/// Class probabilities `[C, D, H, W]` averaged uniformly over every window
/// covering each voxel.
pub fn sliding_window_probabilities<T: Real>(
    model: &Model<T>,
    volume: &Volume,
    patch: [usize; 3],
    stride: [usize; 3],
) -> Result<Vec<f64>> {
    check_windows(patch, stride)?;
    model.config().check_extents(patch)?;
    if model.config().in_channels != 1 {
        return Err(Error::Config("sliding-window inference expects single-channel images".into()));
    }
    let ext = volume.extents();
    let (data, pext) = padded(volume, patch);
    let classes = model.config().num_classes;
    let pvox: usize = pext.iter().product();
    let wvox: usize = patch.iter().product();
    let mut sum = vec![0.0f64; classes * pvox];
    let mut count = vec![0u32; pvox];
    let starts: Vec<Vec<usize>> = (0..3).map(|a| window_starts(pext[a], patch[a], stride[a])).collect();
    for &d0 in &starts[0] {
        for &h0 in &starts[1] {
            for &w0 in &starts[2] {
                let window = crop(&data, pext, [d0, h0, w0], patch);
                let input = Tensor::new(
                    &[1, 1, patch[0], patch[1], patch[2]],
                    window.iter().map(|&v| T::from_f32(v).unwrap()).collect(),
                )?;
                let probs = model.predict_proba(&input)?;
                let probs = probs.data();
                for d in 0..patch[0] {
                    for h in 0..patch[1] {
                        let row = ((d0 + d) * pext[1] + h0 + h) * pext[2] + w0;
                        let src = (d * patch[1] + h) * patch[2];
                        for w in 0..patch[2] {
                            count[row + w] += 1;
                        }
                        for c in 0..classes {
                            let dst = &mut sum[c * pvox + row..c * pvox + row + patch[2]];
                            let p = &probs[c * wvox + src..c * wvox + src + patch[2]];
                            for (s, &v) in dst.iter_mut().zip(p) {
                                *s += v.to_f64().unwrap();
                            }
                        }
                    }
                }
            }
        }
    }
    let vox: usize = ext.iter().product();
    let mut out = vec![0.0f64; classes * vox];
    for c in 0..classes {
        for d in 0..ext[0] {
            for h in 0..ext[1] {
                for w in 0..ext[2] {
                    let pi = (d * pext[1] + h) * pext[2] + w;
                    out[c * vox + (d * ext[1] + h) * ext[2] + w] = sum[c * pvox + pi] / count[pi] as f64;
                }
            }
        }
    }
    Ok(out)
}

/// Per-voxel argmax over `[C, voxels]`; ties go to the lowest class id.
pub fn argmax_classes(probs: &[f64], classes: usize) -> Vec<u8> {
    let vox = probs.len() / classes;
    (0..vox)
        .map(|v| {
            let mut best = 0;
            for c in 1..classes {
                if probs[c * vox + v] > probs[best * vox + v] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Whole-volume label map by sliding-window averaging and argmax.
pub fn predict<T: Real>(model: &Model<T>, volume: &Volume, patch: [usize; 3], stride: [usize; 3]) -> Result<LabelMap> {
    let probs = sliding_window_probabilities(model, volume, patch, stride)?;
    let labels = argmax_classes(&probs, model.config().num_classes);
    let mut map = LabelMap::new(volume.extents(), volume.spacing(), labels)?;
    map.orientation = volume.orientation;
    Ok(map)
}

/// A case that could not be scored, with the reason.
#[derive(Debug)]
pub struct CaseFailure {
    pub case_id: String,
    pub error: Error,
}

#[derive(Debug)]
pub struct Evaluation {
    /// `None` only when every case failed.
    pub report: Option<DiceReport>,
    pub failures: Vec<CaseFailure>,
}

/// Run `score` over `items` on up to `jobs` threads, keeping input order.
pub fn map_ordered<I: Sync, O: Send>(items: &[I], jobs: usize, score: impl Fn(&I) -> O + Sync) -> Vec<O> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(score).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let score = &score;
                s.spawn(move || part.iter().map(score).collect::<Vec<_>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Collect per-case scores, set failures aside, and aggregate in input order.
pub fn summarize(results: Vec<(String, Result<CaseDice>)>) -> Evaluation {
    let mut scored = Vec::new();
    let mut failures = Vec::new();
    for (case_id, r) in results {
        match r {
            Ok(c) => scored.push(c),
            Err(error) => failures.push(CaseFailure { case_id, error }),
        }
    }
    let report = if scored.is_empty() { None } else { aggregate(&scored).ok() };
    Evaluation { report, failures }
}

/// Predict every case and score it against its ground truth.
pub fn evaluate_cases<T: Real>(model: &Model<T>, cases: &[Case], cfg: &InferenceConfig) -> Result<Evaluation> {
    if cases.is_empty() {
        return Err(Error::Invalid("no test cases to evaluate".into()));
    }
    check_windows(cfg.patch_size, cfg.stride)?;
    let results = map_ordered(cases, cfg.jobs, |case| {
        let r = predict(model, &case.image, cfg.patch_size, cfg.stride)
            .and_then(|pred| case_dice(case.id.clone(), &pred, &case.labels, cfg.empty_policy));
        (case.id.clone(), r)
    });
    Ok(summarize(results))
}
