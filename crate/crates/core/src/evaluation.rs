//! Sliding-window inference, Dice scoring and aggregation over runs.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::network::{forward, ModelParams};
use crate::sampling::SamplingMode;
use crate::tensor::Tensor;
use crate::volume::LabeledVolume;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// z-value of a two-sided 95% normal interval.
pub const Z95: f64 = 1.96;

/// Groups with fewer samples than this are flagged `low_n`.
pub const LOW_N: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    /// Per-class probabilities `[N_c, D, H, W]`.
    pub probs: Tensor,
    pub windows: usize,
    /// How many windows covered each voxel, `[D, H, W]`.
    pub coverage: Vec<u32>,
}

/// Window start positions along one axis: a regular grid with the given
/// stride, plus a final window flush with the far edge.
pub fn window_starts(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..=len - patch).step_by(stride.max(1)).collect();
    if *out.last().expect("len >= patch") != len - patch {
        out.push(len - patch);
    }
    out
}

/// Window stride for a fractional overlap in `[0, 1)`.
pub fn window_stride(patch: usize, overlap: f64) -> usize {
    (libm::round(patch as f64 * (1.0 - overlap)) as usize).max(1)
}

/// Runs the network on overlapping cubic windows and averages the sigmoid
/// outputs wherever windows overlap.
pub fn infer_volume(params: &ModelParams, image: &Tensor, patch: usize, overlap: f64) -> Result<Inference> {
    let dims = match *image.shape() {
        [1, d, h, w] => [d, h, w],
        ref s => return Err(Error::shape("infer_volume", format!("image must be [1, D, H, W], got {s:?}"))),
    };
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!("overlap {overlap} must lie in [0, 1)")));
    }
    if patch == 0 || dims.iter().any(|&n| n < patch) {
        return Err(Error::shape("infer_volume", format!("patch {patch} larger than volume {dims:?}")));
    }
    let nc = params.config().num_classes;
    let [dd, hh, ww] = dims;
    let vox = dd * hh * ww;
    let stride = window_stride(patch, overlap);
    let starts: Vec<Vec<usize>> = dims.iter().map(|&n| window_starts(n, patch, stride)).collect();

    let mut acc = vec![0.0; nc * vox];
    let mut coverage = vec![0u32; vox];
    let mut windows = 0;
    for &z0 in &starts[0] {
        for &y0 in &starts[1] {
            for &x0 in &starts[2] {
                let crop = crop(image.data(), 1, dims, [z0, y0, x0], patch);
                let logits = forward(params, &Tensor::new(vec![1, patch, patch, patch], crop)?)?;
                let p3 = patch * patch * patch;
                for z in 0..patch {
                    for y in 0..patch {
                        let dst = ((z0 + z) * hh + (y0 + y)) * ww + x0;
                        let src = (z * patch + y) * patch;
                        for c in 0..nc {
                            let out = &mut acc[c * vox + dst..c * vox + dst + patch];
                            let lg = &logits.data()[c * p3 + src..c * p3 + src + patch];
                            for (o, &l) in out.iter_mut().zip(lg) {
                                *o += sigmoid(l);
                            }
                        }
                        for cv in &mut coverage[dst..dst + patch] {
                            *cv += 1;
                        }
                    }
                }
                windows += 1;
            }
        }
    }
    for c in 0..nc {
        for (a, &n) in acc[c * vox..(c + 1) * vox].iter_mut().zip(&coverage) {
            *a /= n as f64;
        }
    }
    Ok(Inference { probs: Tensor::new(vec![nc, dd, hh, ww], acc)?, windows, coverage })
}

/// Copies a cubic window out of a `[C, D, H, W]` buffer.
pub(crate) fn crop(data: &[f64], channels: usize, dims: [usize; 3], origin: [usize; 3], patch: usize) -> Vec<f64> {
    let [dd, hh, ww] = dims;
    let mut out = Vec::with_capacity(channels * patch * patch * patch);
    for c in 0..channels {
        for z in 0..patch {
            for y in 0..patch {
                let base = ((c * dd + origin[0] + z) * hh + origin[1] + y) * ww + origin[2];
                out.extend_from_slice(&data[base..base + patch]);
            }
        }
    }
    out
}

/// Per-element `prob >= threshold`, each class independently.
pub fn binarize(prob: &Tensor, threshold: f64) -> Tensor {
    prob.map(|p| if p >= threshold { 1.0 } else { 0.0 })
}

/// `2|A ∩ B| / (|A| + |B|)`, or `None` when both masks are empty.
pub fn dice(pred: &Tensor, reference: &Tensor) -> Result<Option<f64>> {
    pred.check_same_shape(reference, "dice")?;
    for t in [pred, reference] {
        if let Some((index, value)) = t.first_non_binary() {
            return Err(Error::NonBinary { op: "dice", index, value });
        }
    }
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &r) in pred.data().iter().zip(reference.data()) {
        let (p, r) = (p == 1.0, r == 1.0);
        a += p as usize;
        b += r as usize;
        both += (p && r) as usize;
    }
    if a + b == 0 {
        return Ok(None);
    }
    Ok(Some(2.0 * both as f64 / (a + b) as f64))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VolumeDice {
    pub volume: String,
    /// Per roster class; `None` when undefined or the class is not annotated.
    pub dice: Vec<Option<f64>>,
}

/// Thresholds the sliding-window prediction and scores every annotated class.
pub fn evaluate_volume(
    params: &ModelParams,
    volume: &LabeledVolume,
    patch: usize,
    overlap: f64,
    threshold: f64,
) -> Result<VolumeDice> {
    let inf = infer_volume(params, &volume.image, patch, overlap)?;
    let pred = binarize(&inf.probs, threshold);
    let mut out = Vec::with_capacity(volume.masks.len());
    for (c, m) in volume.masks.iter().enumerate() {
        out.push(match m {
            Some(m) => dice(&pred.channel(c)?, m)?,
            None => None,
        });
    }
    Ok(VolumeDice { volume: volume.id.clone(), dice: out })
}

/// Mean of the defined per-class scores; `None` if nothing is defined.
pub fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let (s, n) = values.into_iter().flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Dice results of one trained network on the test split.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub mode: SamplingMode,
    pub m: usize,
    pub repetition: usize,
    pub seed: u64,
    pub roster: Vec<String>,
    pub volumes: Vec<VolumeDice>,
}

impl MetricsRecord {
    pub fn class_means(&self) -> Vec<Option<f64>> {
        (0..self.roster.len()).map(|c| mean_defined(self.volumes.iter().map(|v| v.dice[c]))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AggregateRow {
    pub mode: SamplingMode,
    pub m: usize,
    pub class: String,
    pub mean_dice: f64,
    pub ci95_half_width: f64,
    pub n: usize,
    pub excluded: usize,
    pub low_n: bool,
}

/// Sample mean and the half-width `1.96 · sd / √n` of its normal 95% interval
/// (sample standard deviation; zero for a single sample).
pub fn mean_ci95(samples: &[f64]) -> Option<(f64, f64)> {
    let n = samples.len();
    if n == 0 {
        return None;
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Some((mean, 0.0));
    }
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    Some((mean, Z95 * libm::sqrt(var) / libm::sqrt(n as f64)))
}

/// Pools every (repetition, test volume) Dice sample per (mode, M, class).
///
/// Undefined samples are excluded and counted. Rows come out ordered by
/// mode, then M, then roster order.
pub fn aggregate(records: &[MetricsRecord]) -> Result<Vec<AggregateRow>> {
    let roster = &records.first().ok_or(Error::Empty("metrics record collection"))?.roster;
    let mut groups: BTreeMap<(SamplingMode, usize, usize), (Vec<f64>, usize)> = BTreeMap::new();
    for r in records {
        if &r.roster != roster {
            return Err(Error::Config(format!("run {} has a different class roster", r.run_id)));
        }
        for c in 0..roster.len() {
            let g = groups.entry((r.mode, r.m, c)).or_default();
            for v in &r.volumes {
                match v.dice.get(c).copied().flatten() {
                    Some(d) => g.0.push(d),
                    None => g.1 += 1,
                }
            }
        }
    }
    let mut rows = Vec::with_capacity(groups.len());
    for ((mode, m, c), (samples, excluded)) in groups {
        let (mean, ci) = mean_ci95(&samples).ok_or(Error::Empty("aggregate group (no defined Dice samples)"))?;
        rows.push(AggregateRow {
            mode,
            m,
            class: roster[c].clone(),
            mean_dice: mean,
            ci95_half_width: ci,
            n: samples.len(),
            excluded,
            low_n: samples.len() < LOW_N,
        });
    }
    Ok(rows)
}
