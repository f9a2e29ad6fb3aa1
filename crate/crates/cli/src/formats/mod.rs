//! On-disk point cloud formats, chosen by file extension.

pub mod ply;
pub mod xyz;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use dance_core::{CloudRole, Point3, PointCloud};

use crate::error::{CliError, Result};
pub use ply::{read_ply, write_ply, PlyEncoding};
pub use xyz::{read_xyz, write_xyz};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    Xyz,
    Ply,
}

impl CloudFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        match ext.as_deref() {
            Some("xyz") => Ok(CloudFormat::Xyz),
            Some("ply") => Ok(CloudFormat::Ply),
            _ => Err(CliError::format(
                path,
                "unknown point cloud extension (expected .xyz or .ply)",
            )),
        }
    }
}

/// Reads a non-empty cloud from an `.xyz` or `.ply` file.
pub fn read_cloud(path: &Path, role: CloudRole) -> Result<PointCloud> {
    let points = match CloudFormat::from_path(path)? {
        CloudFormat::Xyz => {
            let f = File::open(path).map_err(|e| CliError::io(path, e))?;
            read_xyz(BufReader::new(f)).map_err(|e| CliError::parse(path, e))?
        }
        CloudFormat::Ply => {
            let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
            read_ply(&bytes).map_err(|e| CliError::parse(path, e))?
        }
    };
    if points.is_empty() {
        return Err(CliError::format(path, "point cloud is empty"));
    }
    PointCloud::new(points, role).map_err(|e| CliError::format(path, e))
}

/// Writes `points` by extension; PLY files use `encoding`.
pub fn write_cloud(path: &Path, points: &[Point3], encoding: PlyEncoding) -> Result<()> {
    let format = CloudFormat::from_path(path)?;
    let f = File::create(path).map_err(|e| CliError::io(path, e))?;
    let w = BufWriter::new(f);
    match format {
        CloudFormat::Xyz => write_xyz(w, points),
        CloudFormat::Ply => write_ply(w, points, encoding),
    }
    .map_err(|e| CliError::io(path, e))
}
