//! Patch-based Adam training over the masked multi-label loss.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::evaluation::{crop, evaluate_volume, mean_defined};
use crate::loss::{masked_multilabel_loss_on_tape, PresenceMask};
use crate::network::{build_network, forward_on_tape, ModelParams, NetworkConfig};
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::tensor::Tensor;
use crate::volume::LabeledVolume;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub foreground_patch_fraction: f64,
    pub seed: u64,
    pub validation_interval: usize,
    pub inference_overlap: f64,
    pub threshold: f64,
}

impl Default for TrainerConfig {
    /// Adam at 0.001, 15000 iterations, batches of four 64³ patches.
    fn default() -> Self {
        TrainerConfig {
            learning_rate: 0.001,
            iterations: 15000,
            batch_size: 4,
            patch_size: 64,
            foreground_patch_fraction: 0.5,
            seed: 0,
            validation_interval: 500,
            inference_overlap: 0.5,
            threshold: 0.5,
        }
    }
}

impl TrainerConfig {
    pub fn desk() -> Self {
        TrainerConfig { iterations: 500, patch_size: 16, validation_interval: 100, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.validation_interval == 0 {
            return bad("batch_size and validation_interval must be positive".into());
        }
        if self.patch_size < 8 || !self.patch_size.is_multiple_of(4) {
            return bad(format!("patch_size {} must be a multiple of 4 and at least 8", self.patch_size));
        }
        if !(0.0..=1.0).contains(&self.foreground_patch_fraction) {
            return bad("foreground_patch_fraction must lie in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.inference_overlap) {
            return bad("inference_overlap must lie in [0, 1)".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)".into());
        }
        Ok(())
    }
}

/// First and second moment estimates for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.params().iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        AdamState { first: zeros.clone(), second: zeros, step: 0 }
    }
}

/// One bias-corrected Adam update, in place. `grads` is aligned with
/// `params.params()`.
pub fn adam_step(params: &mut ModelParams, grads: &[Option<Tensor>], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != params.params().len() || state.first.len() != grads.len() {
        return Err(Error::Config(format!(
            "{} gradients and {} moment buffers for {} parameters",
            grads.len(),
            state.first.len(),
            params.params().len()
        )));
    }
    for (p, g) in params.params().iter().zip(grads) {
        match g {
            None => return Err(Error::MissingGrad(p.name.clone())),
            Some(g) if g.shape() != p.tensor.shape() => {
                return Err(Error::shape("adam_step", format!("gradient for {} has shape {:?}", p.name, g.shape())))
            }
            _ => {}
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - libm::pow(ADAM_BETA1, t);
    let c2 = 1.0 - libm::pow(ADAM_BETA2, t);
    for (i, (p, g)) in params.params_mut().iter_mut().zip(grads).enumerate() {
        let g = g.as_ref().expect("checked above");
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (j, (w, &gj)) in p.tensor.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *w -= lr * mhat / (libm::sqrt(vhat) + ADAM_EPS);
        }
    }
    Ok(())
}

/// A cubic training crop.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// `[1, p, p, p]`
    pub image: Tensor,
    /// `[N_c, p, p, p]`, zero for absent classes.
    pub reference: Tensor,
    pub presence: PresenceMask,
    pub origin: [usize; 3],
    pub foreground_centered: bool,
}

/// Draws patches from one volume, caching its foreground voxel lists.
#[derive(Debug, Clone)]
pub struct PatchSampler<'a> {
    volume: &'a LabeledVolume,
    reference: Tensor,
    foreground: Vec<(usize, Vec<usize>)>,
    patch: usize,
}

impl<'a> PatchSampler<'a> {
    pub fn new(volume: &'a LabeledVolume, patch: usize) -> Result<Self> {
        let dims = volume.dims();
        if patch == 0 || dims.iter().any(|&n| n < patch) {
            return Err(Error::shape("sample_patch", format!("volume {:?} smaller than patch {patch}", dims)));
        }
        let foreground = volume
            .masks
            .iter()
            .enumerate()
            .filter_map(|(c, m)| {
                let m = m.as_ref()?;
                let vox: Vec<usize> = m.data().iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect();
                (!vox.is_empty()).then_some((c, vox))
            })
            .collect();
        Ok(PatchSampler { volume, reference: volume.reference(), foreground, patch })
    }

    pub fn sample(&self, foreground_fraction: f64, rng: &mut Rng) -> Patch {
        let dims = self.volume.dims();
        let p = self.patch;
        let want_fg = rng.random::<f64>() < foreground_fraction;
        let (origin, fg) = if want_fg && !self.foreground.is_empty() {
            let (_, vox) = &self.foreground[rng.random_range(0..self.foreground.len())];
            let flat = vox[rng.random_range(0..vox.len())];
            let center = [flat / (dims[1] * dims[2]), (flat / dims[2]) % dims[1], flat % dims[2]];
            (core::array::from_fn(|a| center[a].saturating_sub(p / 2).min(dims[a] - p)), true)
        } else {
            (core::array::from_fn(|a| rng.random_range(0..=dims[a] - p)), false)
        };
        self.crop_at(origin, fg)
    }

    pub fn crop_at(&self, origin: [usize; 3], foreground_centered: bool) -> Patch {
        let p = self.patch;
        let dims = self.volume.dims();
        let nc = self.volume.num_classes();
        let image = Tensor::new(vec![1, p, p, p], crop(self.volume.image.data(), 1, dims, origin, p)).expect("crop");
        let reference =
            Tensor::new(vec![nc, p, p, p], crop(self.reference.data(), nc, dims, origin, p)).expect("crop");
        Patch {
            image,
            reference,
            presence: PresenceMask::from_flags(&self.volume.presence()),
            origin,
            foreground_centered,
        }
    }
}

/// Draws one patch from `volume`: centered on a random foreground voxel of a
/// random annotated class with probability `foreground_fraction`, otherwise
/// uniformly placed.
pub fn sample_patch(volume: &LabeledVolume, patch: usize, foreground_fraction: f64, rng: &mut Rng) -> Result<Patch> {
    Ok(PatchSampler::new(volume, patch)?.sample(foreground_fraction, rng))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    /// Batch-mean masked loss.
    pub total: f64,
    /// Batch mean of `λ_n` over the patches annotating class `n`.
    pub lambda: Vec<Option<f64>>,
    /// Number of patches in the batch annotating class `n`.
    pub presence: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ValidationRow {
    pub iteration: usize,
    pub mean_dice: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct TrainingLog {
    pub roster: Vec<String>,
    pub rows: Vec<LogRow>,
    pub validations: Vec<ValidationRow>,
    /// Iteration count of the returned checkpoint.
    pub selected_iteration: usize,
    pub warnings: Vec<String>,
}

/// Mean Dice over every (volume, annotated class) pair.
pub fn mean_dice(params: &ModelParams, volumes: &[LabeledVolume], cfg: &TrainerConfig) -> Result<Option<f64>> {
    let mut all = Vec::new();
    for v in volumes {
        all.extend(evaluate_volume(params, v, cfg.patch_size, cfg.inference_overlap, cfg.threshold)?.dice);
    }
    Ok(mean_defined(all))
}

/// Trains a freshly initialized network.
///
/// Each iteration draws `batch_size` patches (volume uniformly at random,
/// then [`PatchSampler::sample`]), averages their masked losses and takes one
/// Adam step. When validation volumes are given, mean validation Dice is
/// measured every `validation_interval` iterations and after the last one;
/// the best-scoring checkpoint is returned.
pub fn train(
    volumes: &[LabeledVolume],
    validation: &[LabeledVolume],
    net: &NetworkConfig,
    cfg: &TrainerConfig,
) -> Result<(ModelParams, TrainingLog)> {
    cfg.validate()?;
    let first = volumes.first().ok_or(Error::Empty("training set"))?;
    let roster = first.roster.clone();
    if net.num_classes != roster.len() {
        return Err(Error::Config(format!(
            "network has {} classes but the volumes have {}",
            net.num_classes,
            roster.len()
        )));
    }
    for v in volumes.iter().chain(validation) {
        v.validate()?;
        if v.roster != roster {
            return Err(Error::Config(format!("volume {} has a different class roster", v.id)));
        }
    }
    let mut log = TrainingLog { roster: roster.clone(), ..Default::default() };
    for (c, name) in roster.iter().enumerate() {
        if !volumes.iter().any(|v| v.masks[c].is_some()) {
            log.warnings.push(format!("class {name} is annotated in no training volume; its head gets no supervision"));
        }
    }

    let mut params = build_network(net, cfg.seed)?;
    let samplers = volumes.iter().map(|v| PatchSampler::new(v, cfg.patch_size)).collect::<Result<Vec<_>>>()?;
    let mut adam = AdamState::new(&params);
    let mut rng = rng_from_seed(derive_seed(cfg.seed, &[0x0070_6174_6368_6573]));
    let mut best: Option<(f64, ModelParams, usize)> = None;
    let nc = roster.len();

    for it in 0..cfg.iterations {
        let batch: Vec<Patch> = (0..cfg.batch_size)
            .map(|_| {
                let s = &samplers[rng.random_range(0..samplers.len())];
                s.sample(cfg.foreground_patch_fraction, &mut rng)
            })
            .collect();

        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, true);
        let mut total = None;
        let mut lambda_sum = vec![0.0; nc];
        let mut presence = vec![0usize; nc];
        for patch in &batch {
            let x = tape.constant(patch.image.clone());
            let r = tape.constant(patch.reference.clone());
            let logits = forward_on_tape(&mut tape, net, &vars, x)?;
            let loss = masked_multilabel_loss_on_tape(&mut tape, logits, r, &patch.presence)?;
            for c in 0..nc {
                if patch.presence.is_present(c) {
                    lambda_sum[c] += tape.value(loss.lambda[c]).item();
                    presence[c] += 1;
                }
            }
            total = Some(match total {
                None => loss.total,
                Some(acc) => tape.add(acc, loss.total)?,
            });
        }
        let total = tape.scalar_mul(total.expect("batch_size > 0"), 1.0 / cfg.batch_size as f64)?;
        if tape.requires_grad(total) {
            tape.backward(total)?;
        }
        let grads: Vec<Option<Tensor>> = vars
            .iter()
            .zip(params.params())
            .map(|(&v, p)| Some(tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(p.tensor.shape()))))
            .collect();
        log.rows.push(LogRow {
            iteration: it,
            total: tape.value(total).item(),
            lambda: lambda_sum.iter().zip(&presence).map(|(&s, &n)| (n > 0).then(|| s / n as f64)).collect(),
            presence,
        });
        drop(tape);
        adam_step(&mut params, &grads, &mut adam, cfg.learning_rate)?;

        let done = it + 1;
        if !validation.is_empty() && (done % cfg.validation_interval == 0 || done == cfg.iterations) {
            let score = mean_dice(&params, validation, cfg)?;
            log.validations.push(ValidationRow { iteration: done, mean_dice: score });
            let s = score.unwrap_or(f64::NEG_INFINITY);
            if best.as_ref().is_none_or(|(b, _, _)| s > *b) {
                best = Some((s, params.clone(), done));
            }
        }
    }
    let (params, selected) = match best {
        Some((_, p, i)) => (p, i),
        None => (params, cfg.iterations),
    };
    log.selected_iteration = selected;
    Ok((params, log))
}
