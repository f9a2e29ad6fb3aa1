//! Polygon File Format clouds, ascii or binary little endian.
//!
//! Reading accepts any element layout with a `vertex` element carrying
//! scalar `x`, `y`, `z` properties; other properties and elements are
//! skipped. Writing emits only `float x, y, z`.

use std::io::{self, Write};

use dance_core::Point3;

use crate::error::ParseError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    /// `b` holds exactly `self.size()` bytes.
    fn decode_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b.try_into().expect("8 bytes")),
        }
    }

    fn parse_text(self, token: &str) -> Option<f64> {
        match self {
            Scalar::F32 => token.parse::<f32>().ok().map(f64::from),
            Scalar::F64 => token.parse::<f64>().ok(),
            _ => token.parse::<i64>().ok().map(|v| v as f64),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum PropKind {
    Scalar(Scalar),
    List { count: Scalar, item: Scalar },
}

#[derive(Debug)]
struct Property {
    name: String,
    kind: PropKind,
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

#[derive(Debug)]
struct Header {
    encoding: PlyEncoding,
    elements: Vec<Element>,
    /// Number of header lines including `end_header`.
    lines: usize,
    /// Byte offset of the body.
    body: usize,
}

/// Splits off the next `\n`-terminated line, without its terminator.
fn next_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    if *pos >= bytes.len() {
        return None;
    }
    let rest = &bytes[*pos..];
    let end = rest.iter().position(|&b| b == b'\n');
    let line = match end {
        Some(e) => {
            *pos += e + 1;
            &rest[..e]
        }
        None => {
            *pos = bytes.len();
            rest
        }
    };
    Some(line.strip_suffix(b"\r").unwrap_or(line))
}

fn parse_header(bytes: &[u8]) -> Result<Header, ParseError> {
    let mut pos = 0;
    let mut line_no = 0;
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let raw = next_line(bytes, &mut pos)
            .ok_or_else(|| ParseError::new(line_no + 1, "header ends without `end_header`"))?;
        line_no += 1;
        let line = std::str::from_utf8(raw)
            .map_err(|_| ParseError::new(line_no, "header line is not valid UTF-8"))?;
        let words: Vec<&str> = line.split_whitespace().collect();
        let err = |m: String| ParseError::new(line_no, m);
        if line_no == 1 {
            if words != ["ply"] {
                return Err(err("missing `ply` magic line".into()));
            }
            continue;
        }
        match words.as_slice() {
            ["format", kind, version] => {
                if *version != "1.0" {
                    return Err(err(format!("unsupported format version `{version}`")));
                }
                encoding = Some(match *kind {
                    "ascii" => PlyEncoding::Ascii,
                    "binary_little_endian" => PlyEncoding::BinaryLittleEndian,
                    other => return Err(err(format!("unsupported encoding `{other}`"))),
                });
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| err(format!("bad element count `{count}`")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            ["property", "list", count, item, name] => {
                let (Some(count), Some(item)) = (Scalar::parse(count), Scalar::parse(item)) else {
                    return Err(err(format!("unknown list types in `{line}`")));
                };
                let el = elements
                    .last_mut()
                    .ok_or_else(|| err("property before any element".into()))?;
                el.props.push(Property {
                    name: name.to_string(),
                    kind: PropKind::List { count, item },
                });
            }
            ["property", ty, name] => {
                let ty = Scalar::parse(ty).ok_or_else(|| err(format!("unknown type `{ty}`")))?;
                let el = elements
                    .last_mut()
                    .ok_or_else(|| err("property before any element".into()))?;
                el.props.push(Property {
                    name: name.to_string(),
                    kind: PropKind::Scalar(ty),
                });
            }
            ["end_header"] => break,
            [] => return Err(err("empty header line".into())),
            _ => return Err(err(format!("unrecognized header line `{line}`"))),
        }
    }
    let encoding =
        encoding.ok_or_else(|| ParseError::new(line_no, "header has no `format` line"))?;
    Ok(Header {
        encoding,
        elements,
        lines: line_no,
        body: pos,
    })
}

/// Positions of x, y, z among the vertex properties.
fn xyz_slots(el: &Element, header_end: usize) -> Result<[usize; 3], ParseError> {
    let mut slots = [0; 3];
    for (slot, axis) in slots.iter_mut().zip(["x", "y", "z"]) {
        *slot = el
            .props
            .iter()
            .position(|p| p.name == axis && matches!(p.kind, PropKind::Scalar(_)))
            .ok_or_else(|| {
                ParseError::new(header_end, format!("vertex element has no scalar `{axis}`"))
            })?;
    }
    Ok(slots)
}

/// Reads the vertex coordinates of a PLY document.
pub fn read_ply(bytes: &[u8]) -> Result<Vec<Point3>, ParseError> {
    let header = parse_header(bytes)?;
    let vertex = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| ParseError::new(header.lines, "no `vertex` element"))?;
    let slots = xyz_slots(&header.elements[vertex], header.lines)?;
    let body = &bytes[header.body..];
    match header.encoding {
        PlyEncoding::Ascii => read_ascii_body(body, &header, vertex, slots),
        PlyEncoding::BinaryLittleEndian => read_binary_body(body, &header, vertex, slots),
    }
}

fn finite_point(p: Point3, line: usize) -> Result<Point3, ParseError> {
    if p.iter().all(|v| v.is_finite()) {
        Ok(p)
    } else {
        Err(ParseError::new(line, "non-finite coordinate"))
    }
}

fn read_ascii_body(
    body: &[u8],
    header: &Header,
    vertex: usize,
    slots: [usize; 3],
) -> Result<Vec<Point3>, ParseError> {
    let mut pos = 0;
    let mut line_no = header.lines;
    let mut points = Vec::new();
    for (ei, el) in header.elements.iter().enumerate().take(vertex + 1) {
        if ei == vertex {
            points.reserve(el.count);
        }
        for k in 0..el.count {
            let raw = loop {
                let raw = next_line(body, &mut pos).ok_or_else(|| {
                    ParseError::new(
                        line_no + 1,
                        format!("file ends inside {} {k} of {}", el.name, el.count),
                    )
                })?;
                line_no += 1;
                if !raw.iter().all(u8::is_ascii_whitespace) {
                    break raw;
                }
            };
            let err = |m: String| ParseError::new(line_no, m);
            let line =
                std::str::from_utf8(raw).map_err(|_| err("row is not valid UTF-8".into()))?;
            let mut tokens = line.split_whitespace();
            let mut values = Vec::with_capacity(el.props.len());
            for prop in &el.props {
                let mut take = |ty: Scalar| -> Result<f64, ParseError> {
                    let tok = tokens
                        .next()
                        .ok_or_else(|| err(format!("missing value for `{}`", prop.name)))?;
                    ty.parse_text(tok)
                        .ok_or_else(|| err(format!("bad value `{tok}` for `{}`", prop.name)))
                };
                match prop.kind {
                    PropKind::Scalar(ty) => values.push(take(ty)?),
                    PropKind::List { count, item } => {
                        let n = take(count)?;
                        if n < 0.0 {
                            return Err(err(format!("negative list length for `{}`", prop.name)));
                        }
                        for _ in 0..n as usize {
                            take(item)?;
                        }
                        values.push(f64::NAN);
                    }
                }
            }
            if tokens.next().is_some() {
                return Err(err(format!(
                    "more values than the {} declared properties",
                    el.props.len()
                )));
            }
            if ei == vertex {
                points.push(finite_point(
                    [values[slots[0]], values[slots[1]], values[slots[2]]],
                    line_no,
                )?);
            }
        }
    }
    Ok(points)
}

fn read_binary_body(
    body: &[u8],
    header: &Header,
    vertex: usize,
    slots: [usize; 3],
) -> Result<Vec<Point3>, ParseError> {
    // Binary rows have no line numbers; errors point just past the header.
    let line = header.lines + 1;
    let mut pos = 0;
    let mut points = Vec::new();
    for (ei, el) in header.elements.iter().enumerate().take(vertex + 1) {
        let truncated =
            |k: usize| ParseError::new(line, format!("data ends inside {} {k} of {}", el.name, el.count));
        let mut read = |ty: Scalar, k: usize| -> Result<f64, ParseError> {
            let end = pos + ty.size();
            let b = body.get(pos..end).ok_or_else(|| truncated(k))?;
            pos = end;
            Ok(ty.decode_le(b))
        };
        if ei == vertex {
            points.reserve(el.count);
        }
        let mut values = vec![0.0; el.props.len()];
        for k in 0..el.count {
            for (v, prop) in values.iter_mut().zip(&el.props) {
                match prop.kind {
                    PropKind::Scalar(ty) => *v = read(ty, k)?,
                    PropKind::List { count, item } => {
                        let n = read(count, k)?;
                        if n < 0.0 {
                            return Err(ParseError::new(
                                line,
                                format!("negative list length in {} {k}", el.name),
                            ));
                        }
                        for _ in 0..n as usize {
                            read(item, k)?;
                        }
                    }
                }
            }
            if ei == vertex {
                points.push(finite_point(
                    [values[slots[0]], values[slots[1]], values[slots[2]]],
                    line,
                )?);
            }
        }
    }
    Ok(points)
}

/// Writes `float x, y, z` per vertex; coordinates are rounded to `f32`.
pub fn write_ply<W: Write>(
    mut writer: W,
    points: &[Point3],
    encoding: PlyEncoding,
) -> io::Result<()> {
    let format = match encoding {
        PlyEncoding::Ascii => "ascii",
        PlyEncoding::BinaryLittleEndian => "binary_little_endian",
    };
    write!(
        writer,
        "ply\nformat {format} 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\nend_header\n",
        points.len()
    )?;
    match encoding {
        PlyEncoding::Ascii => {
            for p in points {
                writeln!(writer, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32)?;
            }
        }
        PlyEncoding::BinaryLittleEndian => {
            let mut buf = Vec::with_capacity(points.len() * 12);
            for p in points {
                for v in p {
                    buf.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
            writer.write_all(&buf)?;
        }
    }
    writer.flush()
}
