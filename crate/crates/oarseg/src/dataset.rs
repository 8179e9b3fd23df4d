//! Dataset directories: volume files plus a `manifest.json` that is the
//! serialized [`DatasetIndex`] of the volumes in the directory.

use std::path::{Path, PathBuf};

use oarseg_core::sampling::DatasetIndex;
use oarseg_core::volume::LabeledVolume;

use crate::error::{AppError, Result};
use crate::files::{create_dir, read_json, write_json};
use crate::volume_io::{load_volume, save_volume};

pub const MANIFEST: &str = "manifest.json";

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST)
}

/// Writes every volume and a manifest listing them in the given order.
pub fn save_dataset(dir: &Path, volumes: &[LabeledVolume]) -> Result<DatasetIndex> {
    create_dir(dir)?;
    for v in volumes {
        save_volume(dir, v)?;
    }
    let index = DatasetIndex::from_volumes(volumes)?;
    write_json(&manifest_path(dir), &index)?;
    Ok(index)
}

pub fn load_index(path: &Path) -> Result<DatasetIndex> {
    let index: DatasetIndex = read_json(path)?;
    index.validate().map_err(|e| AppError::malformed(path, e.to_string()))?;
    Ok(index)
}

/// Loads the listed volumes and checks them against the manifest.
pub fn load_dataset(dir: &Path) -> Result<(DatasetIndex, Vec<LabeledVolume>)> {
    let mpath = manifest_path(dir);
    let index = load_index(&mpath)?;
    let volumes = index.volumes.iter().map(|e| load_volume(dir, &e.id)).collect::<Result<Vec<_>>>()?;
    for (e, v) in index.volumes.iter().zip(&volumes) {
        if v.roster != index.roster {
            return Err(AppError::malformed(&mpath, format!("volume {} has a different roster", v.id)));
        }
        let present: Vec<String> = v.present_classes().into_iter().map(|c| v.roster[c].clone()).collect();
        if present != e.classes {
            return Err(AppError::malformed(&mpath, format!("manifest presence for {} disagrees with its header", v.id)));
        }
    }
    Ok((index, volumes))
}
