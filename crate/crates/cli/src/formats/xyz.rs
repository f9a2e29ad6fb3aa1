//! Plain text clouds: one `x y z` line per point.

use std::io::{self, BufRead, Write};

use dance_core::Point3;

use crate::error::ParseError;

/// Reads points at 32-bit precision. Blank lines are skipped; any other line
/// must hold exactly three finite decimal numbers.
pub fn read_xyz<R: BufRead>(reader: R) -> Result<Vec<Point3>, ParseError> {
    let mut points = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| ParseError::new(line_no, e.to_string()))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 3 {
            return Err(ParseError::new(
                line_no,
                format!("expected 3 coordinates, found {}", fields.len()),
            ));
        }
        let mut p = [0.0; 3];
        for (slot, field) in p.iter_mut().zip(&fields) {
            *slot = parse_coord(field).map_err(|m| ParseError::new(line_no, m))?;
        }
        points.push(p);
    }
    Ok(points)
}

pub(crate) fn parse_coord(field: &str) -> Result<f64, String> {
    let v: f32 = field
        .parse()
        .map_err(|_| format!("`{field}` is not a number"))?;
    if !v.is_finite() {
        return Err(format!("`{field}` is not finite"));
    }
    Ok(v as f64)
}

/// Writes each coordinate rounded to `f32` in shortest round-trip form.
pub fn write_xyz<W: Write>(mut writer: W, points: &[Point3]) -> io::Result<()> {
    for p in points {
        writeln!(writer, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32)?;
    }
    writer.flush()
}
