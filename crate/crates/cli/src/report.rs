//! CSV tables. Values are raw unless `paper_scale` is set, which multiplies
//! Chamfer columns by 1000.

use std::path::Path;

use serde::Serialize;

use dance_core::metrics::{MetricReport, REPORT_SCALE};
use dance_core::training::{DensityRow, EpochStats, NoiseRow};

use crate::error::{CliError, Result};

#[derive(Serialize)]
struct MetricRow<'a> {
    sample_id: &'a str,
    cd_l1: f64,
    cd_l2: f64,
    dcd: f64,
    f1: f64,
    precision: f64,
    recall: f64,
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::format(path, format!("{other:?}")),
    }
}

fn cd_scale(paper_scale: bool) -> f64 {
    if paper_scale {
        REPORT_SCALE
    } else {
        1.0
    }
}

/// Header `sample_id, cd_l1, cd_l2, dcd, f1, precision, recall`.
pub fn write_metric_csv(path: &Path, rows: &[(String, MetricReport)], paper_scale: bool) -> Result<()> {
    write_rows(
        path,
        rows.iter().map(|(id, r)| {
            let r = if paper_scale { r.paper_scaled() } else { *r };
            MetricRow {
                sample_id: id,
                cd_l1: r.cd_l1,
                cd_l2: r.cd_l2,
                dcd: r.dcd,
                f1: r.f1,
                precision: r.precision,
                recall: r.recall,
            }
        }),
    )
}

pub fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    write_rows(path, history)
}

pub fn write_noise_csv(path: &Path, rows: &[NoiseRow], paper_scale: bool) -> Result<()> {
    let s = cd_scale(paper_scale);
    write_rows(
        path,
        rows.iter().map(|r| NoiseRow {
            cd_l1: r.cd_l1 * s,
            cd_l2: r.cd_l2 * s,
            ..*r
        }),
    )
}

pub fn write_density_csv(path: &Path, rows: &[DensityRow], paper_scale: bool) -> Result<()> {
    let s = cd_scale(paper_scale);
    write_rows(
        path,
        rows.iter().map(|r| DensityRow {
            cd_l1: r.cd_l1 * s,
            ..*r
        }),
    )
}
