//! Labeled image volumes with possibly incomplete reference segmentations.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image plus a reference mask for every class that was annotated.
///
/// `masks[n]` is `None` when class `n` carries no annotation in this volume;
/// an annotated structure may still have an all-zero mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVolume {
    pub id: String,
    pub roster: Vec<String>,
    /// Intensities, `[1, D, H, W]`.
    pub image: Tensor,
    /// Binary `[D, H, W]` masks, one slot per roster class.
    pub masks: Vec<Option<Tensor>>,
    /// Voxel spacing in mm; metadata only.
    pub spacing: [f64; 3],
}

impl LabeledVolume {
    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let dims = match *self.image.shape() {
            [1, d, h, w] => [d, h, w],
            ref s => return Err(Error::shape("volume", format!("image must be [1, D, H, W], got {s:?}"))),
        };
        if self.masks.len() != self.roster.len() {
            return Err(Error::shape(
                "volume",
                format!("{} mask slots for {} roster classes", self.masks.len(), self.roster.len()),
            ));
        }
        if !self.image.all_finite() {
            return Err(Error::Config(format!("volume {} has non-finite intensities", self.id)));
        }
        for (name, m) in self.roster.iter().zip(&self.masks) {
            if let Some(m) = m {
                if m.shape() != dims {
                    return Err(Error::shape("volume", format!("mask {name} has shape {:?}, image {dims:?}", m.shape())));
                }
                if let Some((index, value)) = m.first_non_binary() {
                    return Err(Error::NonBinary { op: "volume mask", index, value });
                }
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.image.shape();
        [s[1], s[2], s[3]]
    }

    pub fn num_classes(&self) -> usize {
        self.roster.len()
    }

    pub fn presence(&self) -> Vec<bool> {
        self.masks.iter().map(Option::is_some).collect()
    }

    pub fn present_classes(&self) -> Vec<usize> {
        self.masks.iter().enumerate().filter(|(_, m)| m.is_some()).map(|(i, _)| i).collect()
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.masks.iter().all(Option::is_some)
    }

    pub fn class_index(&self, name: &str) -> Result<usize> {
        class_index(&self.roster, name)
    }

    /// Stacks the reference masks into `[N_c, D, H, W]`; absent classes are zero.
    pub fn reference(&self) -> Tensor {
        let [d, h, w] = self.dims();
        let vox = d * h * w;
        let mut data = Vec::with_capacity(vox * self.masks.len());
        for m in &self.masks {
            match m {
                Some(m) => data.extend_from_slice(m.data()),
                None => data.extend(core::iter::repeat_n(0.0, vox)),
            }
        }
        Tensor::new(alloc::vec![self.masks.len(), d, h, w], data).expect("consistent dims")
    }
}

pub(crate) fn class_index(roster: &[String], name: &str) -> Result<usize> {
    roster.iter().position(|c| c == name).ok_or_else(|| Error::UnknownClass(name.into()))
}

/// Restricts annotations to the classes in `keep`; the image is untouched.
pub fn drop_labels(volume: &LabeledVolume, keep: &[usize]) -> Result<LabeledVolume> {
    let n = volume.roster.len();
    if let Some(&bad) = keep.iter().find(|&&c| c >= n) {
        return Err(Error::UnknownClass(format!("#{bad} (roster has {n} classes)")));
    }
    let mut out = volume.clone();
    for (c, m) in out.masks.iter_mut().enumerate() {
        if !keep.contains(&c) {
            *m = None;
        }
    }
    Ok(out)
}
