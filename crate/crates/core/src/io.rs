//! Binary tensor container plus PGM / CSV exporters.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic "T1MC" (4 bytes) | version u8 = 1 | kind u8 | ndim u8 | reserved u8
//! dims: ndim x u32  — (height, width) for images/masks, (height, width, 2) for fields
//! payload: row-major  — f32 for images/fields (fields interleave ux, uy), u8 for masks
//! ```
//!
//! In-memory values are `f64`; they are narrowed to `f32` on save and widened
//! back on load, so `save . load` is a byte-level identity.

use std::fs;
use std::path::Path;

use crate::error::IoError;
use crate::field::DisplacementField;
use crate::image::{Image2D, LabelMask, MIN_EDGE};

pub const MAGIC: [u8; 4] = *b"T1MC";
pub const FORMAT_VERSION: u8 = 1;

/// Discriminant stored in the container header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Image = 1,
    Field = 2,
    Mask = 3,
}

impl TensorKind {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(Self::Image),
            2 => Some(Self::Field),
            3 => Some(Self::Mask),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Image => "image",
            Self::Field => "field",
            Self::Mask => "mask",
        }
    }
}

/// Any object the container can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    Image(Image2D),
    Field(DisplacementField),
    Mask(LabelMask),
}

impl Tensor {
    pub fn kind(&self) -> TensorKind {
        match self {
            Self::Image(_) => TensorKind::Image,
            Self::Field(_) => TensorKind::Field,
            Self::Mask(_) => TensorKind::Mask,
        }
    }
}

fn push_header(buf: &mut Vec<u8>, kind: TensorKind, dims: &[u32]) {
    buf.extend_from_slice(&MAGIC);
    buf.push(FORMAT_VERSION);
    buf.push(kind as u8);
    buf.push(dims.len() as u8);
    buf.push(0); // reserved
    for &d in dims {
        buf.extend_from_slice(&d.to_le_bytes());
    }
}

/// Serializes an image. Refuses non-finite samples before writing anything.
pub fn encode_image(img: &Image2D) -> Result<Vec<u8>, IoError> {
    let payload_start = 8 + 2 * 4;
    let mut buf = Vec::with_capacity(payload_start + img.data().len() * 4);
    push_header(&mut buf, TensorKind::Image, &[img.height() as u32, img.width() as u32]);
    for (index, &v) in img.data().iter().enumerate() {
        if !v.is_finite() {
            return Err(IoError::NonFiniteData {
                offset: payload_start + index * 4,
                index,
            });
        }
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(buf)
}

/// Serializes a displacement field (interleaved `ux, uy` per pixel).
pub fn encode_field(field: &DisplacementField) -> Result<Vec<u8>, IoError> {
    let payload_start = 8 + 3 * 4;
    let mut buf = Vec::with_capacity(payload_start + field.data().len() * 8);
    push_header(
        &mut buf,
        TensorKind::Field,
        &[field.height() as u32, field.width() as u32, 2],
    );
    for (index, v) in field.data().iter().enumerate() {
        for (c, &comp) in v.iter().enumerate() {
            if !comp.is_finite() {
                return Err(IoError::NonFiniteData {
                    offset: payload_start + (index * 2 + c) * 4,
                    index: index * 2 + c,
                });
            }
            buf.extend_from_slice(&(comp as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

/// Serializes a label mask as one byte per pixel.
pub fn encode_mask(mask: &LabelMask) -> Result<Vec<u8>, IoError> {
    let mut buf = Vec::with_capacity(8 + 2 * 4 + mask.data().len());
    push_header(&mut buf, TensorKind::Mask, &[mask.height() as u32, mask.width() as u32]);
    buf.extend_from_slice(mask.data());
    Ok(buf)
}

struct Header {
    kind: TensorKind,
    dims: Vec<u32>,
    payload_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, IoError> {
    if bytes.len() < 8 {
        return Err(IoError::TruncatedPayload {
            offset: bytes.len(),
            needed: 8,
            available: bytes.len(),
        });
    }
    let found = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if found != MAGIC {
        return Err(IoError::BadMagic { offset: 0, found });
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(IoError::VersionMismatch {
            offset: 4,
            found: bytes[4],
            expected: FORMAT_VERSION,
        });
    }
    let kind = TensorKind::from_u8(bytes[5]).ok_or_else(|| IoError::BadHeader {
        offset: 5,
        reason: format!("unknown tensor kind {}", bytes[5]),
    })?;
    let ndim = bytes[6] as usize;
    let expected_ndim = match kind {
        TensorKind::Field => 3,
        _ => 2,
    };
    if ndim != expected_ndim {
        return Err(IoError::BadHeader {
            offset: 6,
            reason: format!("{} expects ndim {expected_ndim}, found {ndim}", kind.name()),
        });
    }
    let dims_end = 8 + ndim * 4;
    if bytes.len() < dims_end {
        return Err(IoError::TruncatedPayload {
            offset: bytes.len(),
            needed: dims_end,
            available: bytes.len(),
        });
    }
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let at = 8 + i * 4;
        dims.push(u32::from_le_bytes([
            bytes[at],
            bytes[at + 1],
            bytes[at + 2],
            bytes[at + 3],
        ]));
    }
    if (dims[0] as usize) < MIN_EDGE || (dims[1] as usize) < MIN_EDGE {
        return Err(IoError::BadHeader {
            offset: 8,
            reason: format!("grid {}x{} below minimum edge {MIN_EDGE}", dims[1], dims[0]),
        });
    }
    if kind == TensorKind::Field && dims[2] != 2 {
        return Err(IoError::BadHeader {
            offset: 16,
            reason: format!("field expects 2 channels, found {}", dims[2]),
        });
    }
    Ok(Header {
        kind,
        dims,
        payload_start: dims_end,
    })
}

fn check_payload(bytes: &[u8], start: usize, needed: usize) -> Result<(), IoError> {
    let available = bytes.len().saturating_sub(start);
    if available < needed {
        return Err(IoError::TruncatedPayload {
            offset: start,
            needed,
            available,
        });
    }
    Ok(())
}

fn read_f32s(bytes: &[u8], start: usize, count: usize) -> Result<Vec<f64>, IoError> {
    check_payload(bytes, start, count * 4)?;
    let mut out = Vec::with_capacity(count);
    for index in 0..count {
        let at = start + index * 4;
        let v = f32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]);
        if !v.is_finite() {
            return Err(IoError::NonFiniteData { offset: at, index });
        }
        out.push(v as f64);
    }
    Ok(out)
}

/// Decodes any supported tensor from a byte buffer.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor, IoError> {
    let header = parse_header(bytes)?;
    let height = header.dims[0] as usize;
    let width = header.dims[1] as usize;
    let pixels = width * height;
    let grid_err = |e| IoError::BadHeader {
        offset: 8,
        reason: format!("{e}"),
    };
    match header.kind {
        TensorKind::Image => {
            let data = read_f32s(bytes, header.payload_start, pixels)?;
            Ok(Tensor::Image(Image2D::new(width, height, data).map_err(grid_err)?))
        }
        TensorKind::Field => {
            let flat = read_f32s(bytes, header.payload_start, pixels * 2)?;
            let data = flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
            Ok(Tensor::Field(
                DisplacementField::new(width, height, data).map_err(grid_err)?,
            ))
        }
        TensorKind::Mask => {
            check_payload(bytes, header.payload_start, pixels)?;
            let data = bytes[header.payload_start..header.payload_start + pixels].to_vec();
            // The container does not store num_classes; recover the tightest
            // class count that admits the stored labels.
            let num_classes = data.iter().copied().max().unwrap_or(0) as usize + 1;
            Ok(Tensor::Mask(
                LabelMask::new(width, height, num_classes, data).map_err(grid_err)?,
            ))
        }
    }
}

pub fn decode_image(bytes: &[u8]) -> Result<Image2D, IoError> {
    match decode_tensor(bytes)? {
        Tensor::Image(img) => Ok(img),
        other => Err(IoError::WrongKind {
            found: other.kind().name(),
            requested: "image",
        }),
    }
}

pub fn decode_field(bytes: &[u8]) -> Result<DisplacementField, IoError> {
    match decode_tensor(bytes)? {
        Tensor::Field(f) => Ok(f),
        other => Err(IoError::WrongKind {
            found: other.kind().name(),
            requested: "field",
        }),
    }
}

pub fn decode_mask(bytes: &[u8]) -> Result<LabelMask, IoError> {
    match decode_tensor(bytes)? {
        Tensor::Mask(m) => Ok(m),
        other => Err(IoError::WrongKind {
            found: other.kind().name(),
            requested: "mask",
        }),
    }
}

pub fn save_image(path: impl AsRef<Path>, img: &Image2D) -> Result<(), IoError> {
    Ok(fs::write(path, encode_image(img)?)?)
}

pub fn save_field(path: impl AsRef<Path>, field: &DisplacementField) -> Result<(), IoError> {
    Ok(fs::write(path, encode_field(field)?)?)
}

pub fn save_mask(path: impl AsRef<Path>, mask: &LabelMask) -> Result<(), IoError> {
    Ok(fs::write(path, encode_mask(mask)?)?)
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor, IoError> {
    decode_tensor(&fs::read(path)?)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image2D, IoError> {
    decode_image(&fs::read(path)?)
}

pub fn load_field(path: impl AsRef<Path>) -> Result<DisplacementField, IoError> {
    decode_field(&fs::read(path)?)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<LabelMask, IoError> {
    decode_mask(&fs::read(path)?)
}

/// Renders an image as binary PGM (P5, maxval 255) with min–max windowing.
/// A constant image has no usable window and exports as mid-gray 128.
pub fn export_pgm(path: impl AsRef<Path>, img: &Image2D) -> Result<(), IoError> {
    let (lo, hi) = img.min_max();
    let mut buf = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    if hi > lo {
        let scale = 255.0 / (hi - lo);
        buf.extend(img.data().iter().map(|&v| ((v - lo) * scale).round() as u8));
    } else {
        buf.extend(std::iter::repeat(128u8).take(img.data().len()));
    }
    Ok(fs::write(path, buf)?)
}

/// A small in-memory table for CSV export; every cell is already formatted.
#[derive(Debug, Clone, Default)]
pub struct CsvTable {
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    /// RFC-4180-style encoding, LF line endings, '.' decimal separator
    /// (callers format numbers with [`csv_float`], which is locale-free).
    pub fn to_string(&self) -> String {
        let mut out = String::new();
        let encode_line = |fields: &[String], out: &mut String| {
            for (i, f) in fields.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                if f.contains([',', '"', '\n']) {
                    out.push('"');
                    out.push_str(&f.replace('"', "\"\""));
                    out.push('"');
                } else {
                    out.push_str(f);
                }
            }
            out.push('\n');
        };
        encode_line(&self.columns, &mut out);
        for row in &self.rows {
            encode_line(row, &mut out);
        }
        out
    }
}

/// Formats a float for CSV: shortest representation that round-trips, always
/// with a decimal point or exponent (`1.0`, not `1`).
pub fn csv_float(v: f64) -> String {
    format!("{v:?}")
}

pub fn export_csv(path: impl AsRef<Path>, table: &CsvTable) -> Result<(), IoError> {
    Ok(fs::write(path, table.to_string())?)
}
