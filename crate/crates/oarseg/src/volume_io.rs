//! On-disk labeled volumes.
//!
//! A volume `<id>` in a directory is stored as
//!
//! * `<id>.json`: header with id, dims, spacing, class roster, presence flags,
//!   payload file names and the format version;
//! * `<id>.image.f64`: intensities, little-endian `f64`, `D·H·W` values in
//!   depth, height, width order;
//! * `<id>.<class>.mask.u8`: one byte (0 or 1) per voxel for every annotated
//!   class.

use std::path::{Path, PathBuf};

use oarseg_core::volume::LabeledVolume;
use oarseg_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};
use crate::files::{read_bytes, read_json, write_atomic, write_json};

pub const VOLUME_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub format_version: u32,
    pub id: String,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub roster: Vec<String>,
    pub presence: Vec<bool>,
    pub image_file: String,
    /// One entry per roster class; `None` for unannotated classes.
    pub mask_files: Vec<Option<String>>,
}

pub fn header_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.json"))
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if !ok || id.starts_with('.') {
        return Err(AppError::Usage(format!("volume id {id:?} must be a plain file-name stem")));
    }
    Ok(())
}

pub fn save_volume(dir: &Path, volume: &LabeledVolume) -> Result<()> {
    volume.validate()?;
    check_id(&volume.id)?;
    let id = &volume.id;
    let image_file = format!("{id}.image.f64");
    let bytes: Vec<u8> = volume.image.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    write_atomic(&dir.join(&image_file), &bytes)?;
    let mut mask_files = Vec::with_capacity(volume.masks.len());
    for (class, mask) in volume.roster.iter().zip(&volume.masks) {
        mask_files.push(match mask {
            Some(m) => {
                check_id(class)?;
                let name = format!("{id}.{class}.mask.u8");
                let bytes: Vec<u8> = m.data().iter().map(|&v| (v == 1.0) as u8).collect();
                write_atomic(&dir.join(&name), &bytes)?;
                Some(name)
            }
            None => None,
        });
    }
    let header = VolumeHeader {
        format_version: VOLUME_FORMAT_VERSION,
        id: id.clone(),
        dims: volume.dims(),
        spacing: volume.spacing,
        roster: volume.roster.clone(),
        presence: volume.presence(),
        image_file,
        mask_files,
    };
    write_json(&header_path(dir, id), &header)
}

/// Reads `path` as `count` little-endian elements of `elem` bytes.
fn payload(path: &Path, count: usize, elem: usize) -> Result<Vec<u8>> {
    let bytes = read_bytes(path)?;
    if bytes.len() % elem != 0 {
        return Err(AppError::Truncated { path: path.into(), bytes: bytes.len() as u64, elem });
    }
    if bytes.len() / elem != count {
        return Err(AppError::SizeMismatch { path: path.into(), expected: count, found: bytes.len() / elem });
    }
    Ok(bytes)
}

pub fn load_volume_header(path: &Path) -> Result<VolumeHeader> {
    let raw: serde_json::Value = read_json(path)?;
    // Check the version before the schema so old files get the right error.
    let found = raw.get("format_version").and_then(|v| v.as_u64());
    match found {
        Some(v) if v == VOLUME_FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(AppError::Version { path: path.into(), found: v as u32, expected: VOLUME_FORMAT_VERSION })
        }
        None => return Err(AppError::malformed(path, "missing format_version")),
    }
    let header: VolumeHeader =
        serde_json::from_value(raw).map_err(|source| AppError::Json { path: path.into(), source })?;
    if header.presence.len() != header.roster.len() || header.mask_files.len() != header.roster.len() {
        return Err(AppError::malformed(path, "presence and mask_files must have one entry per roster class"));
    }
    if header.presence.iter().zip(&header.mask_files).any(|(p, f)| *p != f.is_some()) {
        return Err(AppError::malformed(path, "presence flags disagree with mask files"));
    }
    Ok(header)
}

pub fn load_volume(dir: &Path, id: &str) -> Result<LabeledVolume> {
    check_id(id)?;
    let hpath = header_path(dir, id);
    let header = load_volume_header(&hpath)?;
    if header.id != id {
        return Err(AppError::malformed(&hpath, format!("header names volume {:?}", header.id)));
    }
    let [d, h, w] = header.dims;
    let n = d * h * w;
    let ipath = dir.join(&header.image_file);
    let image: Vec<f64> = payload(&ipath, n, 8)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut masks = Vec::with_capacity(header.roster.len());
    for file in &header.mask_files {
        masks.push(match file {
            Some(name) => {
                let mpath = dir.join(name);
                let bytes = payload(&mpath, n, 1)?;
                if let Some(pos) = bytes.iter().position(|&b| b > 1) {
                    return Err(AppError::malformed(&mpath, format!("mask byte {} at voxel {pos} is not 0 or 1", bytes[pos])));
                }
                Some(Tensor::new(vec![d, h, w], bytes.iter().map(|&b| b as f64).collect())?)
            }
            None => None,
        });
    }
    let volume = LabeledVolume {
        id: header.id,
        roster: header.roster,
        image: Tensor::new(vec![1, d, h, w], image)?,
        masks,
        spacing: header.spacing,
    };
    volume.validate().map_err(|e| AppError::malformed(&hpath, e.to_string()))?;
    Ok(volume)
}
