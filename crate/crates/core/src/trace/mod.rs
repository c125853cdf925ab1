//! Activation traces, label vectors and dataset manifests.
//!
//! Everything that crosses a process boundary is stored as ATRC: a fixed
//! 28-byte little-endian header followed by a row-major payload of `f32` or
//! `f64` values. Labels reuse the same container with a single column.

mod atrc;
mod manifest;

pub use atrc::{read_header, read_labels, read_trace_matrix, write_labels, write_trace_matrix, AtrcHeader, HEADER_LEN, MAGIC};
pub use manifest::{DatasetManifest, ManifestEntry};

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatErrorKind, Result};

/// On-disk element type of an ATRC payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Row-major `rows x cols` matrix of finite activation values.
///
/// Values are always held as `f64`; `dtype` only records how the matrix is
/// encoded on disk. A matrix read from an `f32` file holds values that are
/// exactly representable in `f32`, so writing it back is lossless.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    dtype: Dtype,
}

impl TraceMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::with_dtype(rows, cols, data, Dtype::F64)
    }

    pub fn from_f32(rows: usize, cols: usize, data: &[f32]) -> Result<Self> {
        Self::with_dtype(rows, cols, data.iter().map(|&v| v as f64).collect(), Dtype::F32)
    }

    pub fn with_dtype(rows: usize, cols: usize, data: Vec<f64>, dtype: Dtype) -> Result<Self> {
        let m = TraceMatrix { rows, cols, data, dtype };
        m.validate()?;
        Ok(m)
    }

    /// Builds a matrix from row vectors; all rows must share a length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(1);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!("row {i} has {} values, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// An empty matrix with the given column count.
    pub fn empty(cols: usize) -> Result<Self> {
        Self::new(0, cols, Vec::new())
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.cols == 0 {
            return Err(Error::format(FormatErrorKind::Invariant, "cols must be >= 1"));
        }
        let expected = self
            .rows
            .checked_mul(self.cols)
            .ok_or_else(|| Error::format(FormatErrorKind::Invariant, "rows * cols overflows"))?;
        if self.data.len() != expected {
            return Err(Error::format(
                FormatErrorKind::Invariant,
                format!("data length {} != rows * cols = {expected}", self.data.len()),
            ));
        }
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(
                FormatErrorKind::Invariant,
                format!("non-finite value at row {}, col {}", pos / self.cols, pos % self.cols),
            ));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact would yield nothing useful for 0 rows anyway
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.iter_rows().map(|r| r[j]).collect()
    }

    /// Re-tags the on-disk dtype without touching values.
    pub fn set_dtype(&mut self, dtype: Dtype) {
        self.dtype = dtype;
    }

    /// Selects rows by index, keeping dtype.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::Shape(format!("row index {i} out of range for {} rows", self.rows)));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(TraceMatrix { rows: indices.len(), cols: self.cols, data, dtype: self.dtype })
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &TraceMatrix) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!("cannot stack {} cols onto {} cols", other.cols, self.cols)));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(TraceMatrix { rows: self.rows + other.rows, cols: self.cols, data, dtype: self.dtype })
    }
}

/// Integer class labels in `0..num_classes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    values: Vec<usize>,
    num_classes: usize,
}

impl LabelVector {
    pub fn new(values: Vec<usize>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!("num_classes must be >= 2, got {num_classes}")));
        }
        if let Some(&bad) = values.iter().find(|&&v| v >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {bad} outside 0..{num_classes}")));
        }
        Ok(LabelVector { values, num_classes })
    }

    /// Infers `num_classes` as `max + 1`, at least 2.
    pub fn inferred(values: Vec<usize>) -> Self {
        let num_classes = values.iter().max().map_or(2, |&m| (m + 1).max(2));
        LabelVector { values, num_classes }
    }

    pub fn values(&self) -> &[usize] {
        &self.values
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        LabelVector { values: indices.iter().map(|&i| self.values[i]).collect(), num_classes: self.num_classes }
    }
}

/// Row-wise argmax; ties resolve to the smallest column index.
pub fn argmax_rows(logits: &TraceMatrix) -> Vec<usize> {
    logits.iter_rows().map(crate::nnrt::argmax).collect()
}
