//! ATRC container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "ATRC"
//! 4       2     version (u16) = 1
//! 6       1     dtype   (u8)  1 = f32, 2 = f64
//! 7       1     flags   (u8)  = 0
//! 8       8     rows    (u64)
//! 16      8     cols    (u64)
//! 24      4     reserved, zero
//! 28      ...   rows * cols values, row-major
//! ```
//!
//! All integers and values are little-endian.

use std::fs;
use std::io::Read;
use std::path::Path;

use super::{Dtype, LabelVector, TraceMatrix};
use crate::error::{Error, FormatErrorKind, Result};

pub const MAGIC: [u8; 4] = *b"ATRC";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AtrcHeader {
    pub dtype: Dtype,
    pub rows: u64,
    pub cols: u64,
}

impl AtrcHeader {
    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut buf = [0u8; HEADER_LEN];
        buf[0..4].copy_from_slice(&MAGIC);
        buf[4..6].copy_from_slice(&VERSION.to_le_bytes());
        buf[6] = self.dtype.code();
        buf[7] = 0;
        buf[8..16].copy_from_slice(&self.rows.to_le_bytes());
        buf[16..24].copy_from_slice(&self.cols.to_le_bytes());
        buf
    }

    /// Parses the header from the leading bytes of a file.
    fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || bytes[0..4] != MAGIC {
            let got = &bytes[..bytes.len().min(4)];
            return Err(Error::format(FormatErrorKind::Magic, format!("expected \"ATRC\", found {got:02x?}")));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::format(
                FormatErrorKind::Length,
                format!("header truncated: {} of {HEADER_LEN} bytes", bytes.len()),
            ));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::format(FormatErrorKind::Version, format!("unsupported version {version}")));
        }
        let dtype = Dtype::from_code(bytes[6])
            .ok_or_else(|| Error::format(FormatErrorKind::Dtype, format!("unknown dtype code {}", bytes[6])))?;
        if bytes[7] != 0 {
            return Err(Error::format(FormatErrorKind::Flags, format!("unsupported flags {:#04x}", bytes[7])));
        }
        let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        if cols == 0 {
            return Err(Error::format(FormatErrorKind::Invariant, "cols must be >= 1"));
        }
        Ok(AtrcHeader { dtype, rows, cols })
    }

    /// Payload size in bytes, or `None` if it overflows.
    pub fn payload_len(&self) -> Option<u64> {
        self.rows.checked_mul(self.cols)?.checked_mul(self.dtype.size() as u64)
    }
}

fn check_payload(header: &AtrcHeader, available: u64) -> Result<usize> {
    let want = header
        .payload_len()
        .ok_or_else(|| Error::format(FormatErrorKind::Length, "rows * cols overflows"))?;
    if want != available {
        return Err(Error::format(
            FormatErrorKind::Length,
            format!(
                "header declares {} x {} {:?} values ({want} bytes) but payload has {available} bytes",
                header.rows, header.cols, header.dtype
            ),
        ));
    }
    usize::try_from(want).map_err(|_| Error::format(FormatErrorKind::Length, "payload too large for this platform"))
}

/// Encodes a matrix into ATRC bytes.
pub fn encode(m: &TraceMatrix) -> Result<Vec<u8>> {
    m.validate()?;
    let header = AtrcHeader { dtype: m.dtype(), rows: m.rows() as u64, cols: m.cols() as u64 };
    let mut buf = Vec::with_capacity(HEADER_LEN + m.data().len() * m.dtype().size());
    buf.extend_from_slice(&header.encode());
    match m.dtype() {
        Dtype::F32 => {
            for (pos, &v) in m.data().iter().enumerate() {
                let narrowed = v as f32;
                if !narrowed.is_finite() {
                    return Err(Error::format(
                        FormatErrorKind::Invariant,
                        format!("value {v} at index {pos} overflows f32"),
                    ));
                }
                buf.extend_from_slice(&narrowed.to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &v in m.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(buf)
}

/// Decodes ATRC bytes into a matrix.
pub fn decode(bytes: &[u8]) -> Result<TraceMatrix> {
    let header = AtrcHeader::decode(bytes)?;
    let payload = &bytes[HEADER_LEN..];
    check_payload(&header, payload.len() as u64)?;
    let data: Vec<f64> = match header.dtype {
        Dtype::F32 => payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        Dtype::F64 => payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
    };
    TraceMatrix::with_dtype(header.rows as usize, header.cols as usize, data, header.dtype)
}

/// Writes `m` to `path`. Nothing is written if `m` is invalid.
pub fn write_trace_matrix(m: &TraceMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(m)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_trace_matrix(path: impl AsRef<Path>) -> Result<TraceMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Reads and validates only the header, checking the payload length against
/// the file size without reading the payload.
pub fn read_header(path: impl AsRef<Path>) -> Result<AtrcHeader> {
    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(HEADER_LEN);
    file.by_ref().take(HEADER_LEN as u64).read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    let header = AtrcHeader::decode(&buf)?;
    let size = file.metadata().map_err(|e| Error::io(path, e))?.len();
    check_payload(&header, size.saturating_sub(HEADER_LEN as u64))?;
    Ok(header)
}

/// Writes labels as an `N x 1` f32 ATRC file.
pub fn write_labels(labels: &LabelVector, path: impl AsRef<Path>) -> Result<()> {
    let data: Vec<f64> = labels.values().iter().map(|&v| v as f64).collect();
    let m = TraceMatrix::with_dtype(labels.len(), 1, data, Dtype::F32)?;
    write_trace_matrix(&m, path)
}

/// Reads an `N x 1` label file, rounding each value to the nearest integer.
///
/// When `num_classes` is `None` it is inferred from the largest label.
pub fn read_labels(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<LabelVector> {
    let m = read_trace_matrix(path)?;
    if m.cols() != 1 {
        return Err(Error::Shape(format!("label file must have 1 column, found {}", m.cols())));
    }
    let mut values = Vec::with_capacity(m.rows());
    for &v in m.data() {
        let r = v.round();
        if r < 0.0 {
            return Err(Error::InvalidArgument(format!("negative label {v}")));
        }
        values.push(r as usize);
    }
    match num_classes {
        Some(k) => LabelVector::new(values, k),
        None => Ok(LabelVector::inferred(values)),
    }
}
