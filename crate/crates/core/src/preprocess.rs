//! Column filtering, PCA and standardization applied ahead of density
//! estimation.
//!
//! Activation traces are typically rank deficient: many neurons never fire
//! and the rest live in a low-dimensional subspace. Dropping near-constant
//! columns and projecting onto the leading principal directions yields a
//! covariance that a Gaussian KDE can factor.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;
use crate::trace::{Dtype, TraceMatrix};

pub const DEFAULT_VARIANCE_THRESHOLD: f64 = 1e-5;

/// Which trace columns survive the low-variance filter.
///
/// Serializes as a plain JSON boolean array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<bool>", into = "Vec<bool>")]
pub struct ColumnMask {
    keep: Vec<bool>,
    kept_count: usize,
}

impl From<Vec<bool>> for ColumnMask {
    fn from(keep: Vec<bool>) -> Self {
        let kept_count = keep.iter().filter(|&&k| k).count();
        ColumnMask { keep, kept_count }
    }
}

impl From<ColumnMask> for Vec<bool> {
    fn from(m: ColumnMask) -> Self {
        m.keep
    }
}

impl ColumnMask {
    pub fn identity(len: usize) -> Self {
        vec![true; len].into()
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn kept_count(&self) -> usize {
        self.kept_count
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        self.keep.iter().enumerate().filter_map(|(j, &k)| k.then_some(j)).collect()
    }
}

/// Keeps column `j` iff its sample variance is strictly above `threshold`.
pub fn variance_filter_fit(train: &TraceMatrix, threshold: f64) -> Result<ColumnMask> {
    if train.rows() < 2 {
        return Err(Error::InsufficientData(format!("variance filter needs >= 2 rows, got {}", train.rows())));
    }
    if !(threshold >= 0.0) {
        return Err(Error::InvalidArgument(format!("variance threshold must be >= 0, got {threshold}")));
    }
    let keep: Vec<bool> = (0..train.cols()).map(|j| stats::sample_variance(&train.column(j)) > threshold).collect();
    let mask = ColumnMask::from(keep);
    if mask.kept_count() == 0 {
        return Err(Error::DegenerateData(format!(
            "all {} columns have variance <= {threshold}",
            train.cols()
        )));
    }
    Ok(mask)
}

pub fn apply_mask(m: &TraceMatrix, mask: &ColumnMask) -> Result<TraceMatrix> {
    if m.cols() != mask.len() {
        return Err(Error::Shape(format!("mask has length {} but matrix has {} columns", mask.len(), m.cols())));
    }
    if mask.kept_count() == m.cols() {
        return Ok(m.clone());
    }
    let kept = mask.kept_indices();
    let data: Vec<f64> = m.iter_rows().flat_map(|r| kept.iter().map(move |&j| r[j])).collect();
    TraceMatrix::with_dtype(m.rows(), kept.len(), data, m.dtype())
}

/// Top-`k` principal directions of a training matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `k` rows of length `D'`, orthonormal.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }
}

/// Fits PCA from the thin SVD of the column-centered training matrix.
///
/// Components are ordered by decreasing singular value, and each is signed
/// so that its largest-magnitude entry is non-negative.
pub fn pca_fit(train: &TraceMatrix, k: usize) -> Result<PcaModel> {
    let (n, d) = (train.rows(), train.cols());
    let max_k = n.saturating_sub(1).min(d);
    if k == 0 || k > max_k {
        return Err(Error::Shape(format!(
            "pca k = {k} outside 1..={max_k} for {n} x {d} training data"
        )));
    }
    let mean: Vec<f64> = (0..d).map(|j| stats::mean(&train.column(j))).collect();
    let centered = DMatrix::from_fn(n, d, |i, j| train.get(i, j) - mean[j]);
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");

    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let mut components = Vec::with_capacity(k);
    let mut explained_variance = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let mut row: Vec<f64> = v_t.row(idx).iter().copied().collect();
        let pivot = row.iter().copied().fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if pivot < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(row);
        let s = svd.singular_values[idx];
        explained_variance.push(s * s / (n as f64 - 1.0));
    }
    Ok(PcaModel { mean, components, explained_variance })
}

/// Projects rows onto the model's components: `row_i -> C (x_i - mean)`.
pub fn pca_transform(model: &PcaModel, m: &TraceMatrix) -> Result<TraceMatrix> {
    let d = model.input_dim();
    if m.cols() != d {
        return Err(Error::Shape(format!("PCA expects {d} columns, matrix has {}", m.cols())));
    }
    let k = model.k();
    let mut out = vec![0.0; m.rows() * k];
    out.par_chunks_mut(k.max(1)).zip(m.data().par_chunks(d)).for_each(|(dst, row)| {
        for (c, comp) in model.components.iter().enumerate() {
            dst[c] = comp.iter().zip(row).zip(&model.mean).map(|((w, x), mu)| w * (x - mu)).sum();
        }
    });
    TraceMatrix::with_dtype(m.rows(), k, out, Dtype::F64)
}

/// Standardizes to zero mean and unit sample standard deviation.
pub fn zscore(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::InsufficientData(format!("z-score needs >= 2 values, got {}", values.len())));
    }
    let mean = stats::mean(values);
    let std = stats::sample_std(values);
    if stats::is_constant(values, std) {
        return Err(Error::DegenerateData("z-score of a constant sample".into()));
    }
    Ok(values.iter().map(|v| (v - mean) / std).collect())
}
