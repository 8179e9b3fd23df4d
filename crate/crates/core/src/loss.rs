//! Presence-masked multi-label loss.
//!
//! Every class has its own sigmoid head and binary cross-entropy `λ_n`. The
//! total is `Σ c_n λ_n`, where `c_n` is zero for classes that carry no
//! annotation in the training volume. Classes with `c_n = 0` are left out of
//! the recorded sum entirely, so their logits receive an exactly-zero
//! gradient.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::LabeledVolume;

/// Per-class loss weights `c_n`; `{0, 1}` unless constructed from weights.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PresenceMask {
    weights: Vec<f64>,
}

impl PresenceMask {
    pub fn from_flags(flags: &[bool]) -> Self {
        PresenceMask { weights: flags.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect() }
    }

    pub fn ones(n: usize) -> Self {
        PresenceMask { weights: alloc::vec![1.0; n] }
    }

    pub fn zeros(n: usize) -> Self {
        PresenceMask { weights: alloc::vec![0.0; n] }
    }

    /// General non-negative class weights.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::Config(format!("class weight {w} must be finite and non-negative")));
        }
        Ok(PresenceMask { weights })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn is_present(&self, n: usize) -> bool {
        self.weights[n] != 0.0
    }

    /// `1 - c_n` for a binary mask.
    pub fn complement(&self) -> Self {
        PresenceMask { weights: self.weights.iter().map(|&w| if w == 0.0 { 1.0 } else { 0.0 }).collect() }
    }
}

/// `c_n = 1` exactly for the classes annotated in `volume`.
pub fn presence_from_labels(volume: &LabeledVolume) -> PresenceMask {
    PresenceMask::from_flags(&volume.presence())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassLossBreakdown {
    pub lambda: Vec<f64>,
    pub total: f64,
}

/// Loss recorded on a tape.
#[derive(Debug, Clone)]
pub struct MaskedLoss {
    pub total: Var,
    pub lambda: Vec<Var>,
}

impl MaskedLoss {
    pub fn breakdown(&self, tape: &Tape) -> ClassLossBreakdown {
        ClassLossBreakdown {
            lambda: self.lambda.iter().map(|&l| tape.value(l).item()).collect(),
            total: tape.value(self.total).item(),
        }
    }
}

fn check_inputs(logits: &Tensor, reference: &Tensor, mask: &PresenceMask) -> Result<usize> {
    let [n, ..] = logits.dims4("masked_multilabel_loss")?;
    logits.check_same_shape(reference, "masked_multilabel_loss")?;
    if mask.len() != n {
        return Err(Error::MaskLength { expected: n, got: mask.len() });
    }
    if let Some((index, value)) = reference.first_non_binary() {
        return Err(Error::NonBinary { op: "masked_multilabel_loss", index, value });
    }
    Ok(n)
}

/// Records `λ_n = bce(sigmoid(logits_n), reference_n)` for every class and
/// `total = Σ c_n λ_n` over the classes with `c_n ≠ 0`.
///
/// When every weight is zero the total is a gradient-free constant zero.
pub fn masked_multilabel_loss_on_tape(
    tape: &mut Tape,
    logits: Var,
    reference: Var,
    mask: &PresenceMask,
) -> Result<MaskedLoss> {
    let n = check_inputs(tape.value(logits), tape.value(reference), mask)?;
    let mut lambda = Vec::with_capacity(n);
    let mut total: Option<Var> = None;
    for c in 0..n {
        let z = tape.channel(logits, c)?;
        let p = tape.sigmoid(z)?;
        let t = tape.channel(reference, c)?;
        let l = tape.bce(p, t)?;
        lambda.push(l);
        let w = mask.weights()[c];
        if w == 0.0 {
            continue;
        }
        let term = if w == 1.0 { l } else { tape.scalar_mul(l, w)? };
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    Ok(MaskedLoss { total, lambda })
}

/// Value-only evaluation of the masked loss.
pub fn masked_multilabel_loss(logits: &Tensor, reference: &Tensor, mask: &PresenceMask) -> Result<ClassLossBreakdown> {
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let r = tape.constant(reference.clone());
    let loss = masked_multilabel_loss_on_tape(&mut tape, z, r, mask)?;
    Ok(loss.breakdown(&tape))
}
