//! Datasets on disk: one `sample_NNNN` directory per sample holding
//! `partial.ply`, `complete.ply` and `meta.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dance_core::training::{Sample, ShapeMeta};
use dance_core::CloudRole;

use crate::error::{CliError, Result};
use crate::formats::{read_cloud, write_cloud, PlyEncoding};

pub const SAMPLE_PREFIX: &str = "sample_";
pub const PARTIAL_FILE: &str = "partial.ply";
pub const COMPLETE_FILE: &str = "complete.ply";
pub const META_FILE: &str = "meta.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    pub label: usize,
    pub category: String,
    /// Generation parameters, including the per-sample seed.
    pub shape: ShapeMeta,
}

/// A sample with the directory name that identifies it in reports.
#[derive(Clone, Debug)]
pub struct StoredSample {
    pub id: String,
    pub sample: Sample,
}

pub fn sample_dir_name(index: usize) -> String {
    format!("{SAMPLE_PREFIX}{index:04}")
}

/// Writes every sample under `dir`, creating it if needed. Coordinates are
/// stored as `f32`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    for (i, s) in samples.iter().enumerate() {
        let sd = dir.join(sample_dir_name(i));
        fs::create_dir_all(&sd).map_err(|e| CliError::io(&sd, e))?;
        write_cloud(
            &sd.join(PARTIAL_FILE),
            s.partial.points(),
            PlyEncoding::BinaryLittleEndian,
        )?;
        write_cloud(
            &sd.join(COMPLETE_FILE),
            s.complete.points(),
            PlyEncoding::BinaryLittleEndian,
        )?;
        let meta = SampleMeta {
            label: s.label,
            category: s.category_name.clone(),
            shape: s.meta.clone(),
        };
        let path = sd.join(META_FILE);
        let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
    }
    Ok(())
}

/// Sample directories of `dir`, sorted by name.
fn sample_dirs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let entry = entry.map_err(|e| CliError::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with(SAMPLE_PREFIX) && entry.path().is_dir() {
            out.push((name, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_sample(id: String, dir: &Path) -> Result<StoredSample> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| CliError::io(&meta_path, e))?;
    let meta: SampleMeta =
        serde_json::from_str(&text).map_err(|e| CliError::format(&meta_path, e))?;
    Ok(StoredSample {
        id,
        sample: Sample {
            partial: read_cloud(&dir.join(PARTIAL_FILE), CloudRole::Input)?,
            complete: read_cloud(&dir.join(COMPLETE_FILE), CloudRole::GroundTruth)?,
            label: meta.label,
            category_name: meta.category,
            meta: meta.shape,
        },
    })
}

/// Reads every sample under `dir`; an empty dataset is an error.
pub fn read_dataset(dir: &Path) -> Result<Vec<StoredSample>> {
    let dirs = sample_dirs(dir)?;
    if dirs.is_empty() {
        return Err(CliError::format(
            dir,
            format!("no `{SAMPLE_PREFIX}*` directories found"),
        ));
    }
    dirs.into_iter()
        .map(|(id, path)| read_sample(id, &path))
        .collect()
}
