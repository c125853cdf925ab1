//! Likelihood-based surprise adequacy (LSA).
//!
//! A [`DensityModel`] is fitted on reference activation traces (training data
//! or a generated surrogate of it): low-variance columns are dropped, the
//! rest are projected onto principal components, and a Gaussian KDE with
//! Scott's bandwidth is placed over the projected points. The LSA of a new
//! trace is the negative natural log of that density.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{self, ColumnMask, PcaModel, DEFAULT_VARIANCE_THRESHOLD};
use crate::stats;
use crate::trace::{self, Dtype, TraceMatrix};

/// Gaussian KDE with full-covariance Scott bandwidth `H = n^(-2/(d+4)) * cov`.
#[derive(Debug, Clone)]
pub struct KdeModel {
    points: TraceMatrix,
    bandwidth: DMatrix<f64>,
    chol: DMatrix<f64>,
    /// `L^{-1} p_i` for every reference point, row-major.
    whitened: Vec<f64>,
    log_norm: f64,
}

/// Scott's factor `n^(-1/(d+4))`; the bandwidth covariance scales by its square.
pub fn scott_factor(n: usize, d: usize) -> f64 {
    (n as f64).powf(-1.0 / (d as f64 + 4.0))
}

pub fn kde_fit(points: &TraceMatrix) -> Result<KdeModel> {
    let (n, d) = (points.rows(), points.cols());
    if n < 2 {
        return Err(Error::InsufficientData(format!("KDE needs >= 2 reference points, got {n}")));
    }
    let means: Vec<f64> = (0..d).map(|j| stats::mean(&points.column(j))).collect();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for row in points.iter_rows() {
        for a in 0..d {
            let da = row[a] - means[a];
            for b in 0..=a {
                cov[(a, b)] += da * (row[b] - means[b]);
            }
        }
    }
    let factor2 = scott_factor(n, d).powi(2);
    for a in 0..d {
        for b in 0..=a {
            let v = cov[(a, b)] / (n as f64 - 1.0) * factor2;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let singular = || {
        Error::SingularCovariance(format!(
            "covariance of {n} x {d} reference points is not positive definite; reduce pca_k"
        ))
    };
    let chol = Cholesky::new(cov.clone()).ok_or_else(singular)?.unpack();
    let diag: Vec<f64> = chol.diagonal().iter().copied().collect();
    let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    // pivots this small relative to the largest mean the factorization only
    // succeeded on rounding noise
    if !(lo > 0.0) || (lo / hi).powi(2) < 1e-14 {
        return Err(singular());
    }

    let mut whitened = vec![0.0; n * d];
    for (dst, row) in whitened.chunks_exact_mut(d).zip(points.iter_rows()) {
        forward_substitute(&chol, row, dst);
    }
    let log_det_l: f64 = diag.iter().map(|v| v.ln()).sum();
    let log_norm = -(n as f64).ln() - 0.5 * d as f64 * (2.0 * PI).ln() - log_det_l;
    let mut points = points.clone();
    points.set_dtype(Dtype::F64);
    Ok(KdeModel { points, bandwidth: cov, chol, whitened, log_norm })
}

/// Solves `L y = x` for lower-triangular `L`.
fn forward_substitute(l: &DMatrix<f64>, x: &[f64], y: &mut [f64]) {
    for i in 0..x.len() {
        let mut acc = x[i];
        for j in 0..i {
            acc -= l[(i, j)] * y[j];
        }
        y[i] = acc / l[(i, i)];
    }
}

impl KdeModel {
    pub fn n(&self) -> usize {
        self.points.rows()
    }

    pub fn d(&self) -> usize {
        self.points.cols()
    }

    pub fn points(&self) -> &TraceMatrix {
        &self.points
    }

    /// Bandwidth covariance `H`.
    pub fn bandwidth(&self) -> &DMatrix<f64> {
        &self.bandwidth
    }

    pub fn bandwidth_rows(&self) -> Vec<Vec<f64>> {
        self.bandwidth.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    /// `-ln n - (d/2) ln 2pi - (1/2) ln det H`.
    pub fn log_norm(&self) -> f64 {
        self.log_norm
    }

    /// Natural-log density at `x`, via log-sum-exp over the kernels.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let d = self.d();
        if x.len() != d {
            return Err(Error::Shape(format!("query has {} values, KDE dimension is {d}", x.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("query contains non-finite values".into()));
        }
        let mut z = vec![0.0; d];
        forward_substitute(&self.chol, x, &mut z);
        let exponents: Vec<f64> = self
            .whitened
            .chunks_exact(d)
            .map(|w| -0.5 * w.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .collect();
        Ok(log_sum_exp(&exponents) + self.log_norm)
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `-ln f(x)` under the KDE.
pub fn lsa_score(kde: &KdeModel, x: &[f64]) -> Result<f64> {
    Ok(-kde.log_density(x)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityConfig {
    pub variance_threshold: f64,
    /// Number of principal components; `None` keeps `min(rows - 1, kept columns)`.
    pub pca_k: Option<usize>,
}

impl Default for DensityConfig {
    fn default() -> Self {
        DensityConfig { variance_threshold: DEFAULT_VARIANCE_THRESHOLD, pca_k: None }
    }
}

/// Fitted mask -> PCA -> KDE pipeline.
#[derive(Debug, Clone)]
pub struct DensityModel {
    pub id: String,
    pub config: DensityConfig,
    pub mask: ColumnMask,
    pub pca: PcaModel,
    pub kde: KdeModel,
}

pub fn fit_density_model(train: &TraceMatrix, config: &DensityConfig) -> Result<DensityModel> {
    let mask = preprocess::variance_filter_fit(train, config.variance_threshold)?;
    let masked = preprocess::apply_mask(train, &mask)?;
    let k = config.pca_k.unwrap_or_else(|| (masked.rows() - 1).min(masked.cols()));
    let pca = preprocess::pca_fit(&masked, k)?;
    let projected = preprocess::pca_transform(&pca, &masked)?;
    let kde = kde_fit(&projected)?;
    Ok(DensityModel { id: String::new(), config: config.clone(), mask, pca, kde })
}

/// LSA values for a batch of inputs, tagged with where they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LsaScores {
    pub model_id: String,
    pub dataset_id: String,
    pub values: Vec<f64>,
}

impl LsaScores {
    pub fn with_dataset_id(mut self, id: impl Into<String>) -> Self {
        self.dataset_id = id.into();
        self
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let scores: LsaScores = serde_json::from_str(&text)?;
        if scores.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("{} contains non-finite scores", path.display())));
        }
        Ok(scores)
    }
}

impl DensityModel {
    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn input_dim(&self) -> usize {
        self.mask.len()
    }

    /// Maps raw traces into the KDE space.
    pub fn transform(&self, inputs: &TraceMatrix) -> Result<TraceMatrix> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "inputs have {} columns, density model expects {}",
                inputs.cols(),
                self.input_dim()
            )));
        }
        let masked = preprocess::apply_mask(inputs, &self.mask)?;
        preprocess::pca_transform(&self.pca, &masked)
    }

    pub fn score_batch(&self, inputs: &TraceMatrix) -> Result<LsaScores> {
        let projected = self.transform(inputs)?;
        let values = projected
            .data()
            .par_chunks(projected.cols())
            .map(|row| lsa_score(&self.kde, row))
            .collect::<Result<Vec<_>>>()?;
        Ok(LsaScores { model_id: self.id.clone(), dataset_id: String::new(), values })
    }

    /// Writes `model.json`, `components.atrc` and `points.atrc` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = SavedModel {
            format: MODEL_FORMAT.into(),
            id: self.id.clone(),
            config: self.config.clone(),
            mask: self.mask.clone(),
            pca_mean: self.pca.mean.clone(),
            explained_variance: self.pca.explained_variance.clone(),
            bandwidth: self.kde.bandwidth_rows(),
            n: self.kde.n(),
            d: self.kde.d(),
            components_file: COMPONENTS_FILE.into(),
            points_file: POINTS_FILE.into(),
        };
        let components = TraceMatrix::from_rows(&self.pca.components)?;
        trace::write_trace_matrix(&components, dir.join(COMPONENTS_FILE))?;
        trace::write_trace_matrix(self.kde.points(), dir.join(POINTS_FILE))?;
        let path = dir.join(MODEL_FILE);
        fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MODEL_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: SavedModel = serde_json::from_str(&text)?;
        if meta.format != MODEL_FORMAT {
            return Err(Error::ModelFormat(format!("unsupported density model format {:?}", meta.format)));
        }
        let components = trace::read_trace_matrix(dir.join(&meta.components_file))?;
        let points = trace::read_trace_matrix(dir.join(&meta.points_file))?;
        let dp = meta.mask.kept_count();
        if components.cols() != dp || meta.pca_mean.len() != dp || components.rows() != points.cols() {
            return Err(Error::ModelFormat(format!(
                "stage dimensions do not chain: mask keeps {dp}, mean {}, components {}x{}, points {}x{}",
                meta.pca_mean.len(),
                components.rows(),
                components.cols(),
                points.rows(),
                points.cols()
            )));
        }
        if meta.explained_variance.len() != components.rows() || points.rows() != meta.n || points.cols() != meta.d {
            return Err(Error::ModelFormat("metadata disagrees with stored matrices".into()));
        }
        let kde = kde_fit(&points)?;
        let drift = kde
            .bandwidth_rows()
            .iter()
            .flatten()
            .zip(meta.bandwidth.iter().flatten())
            .any(|(a, b)| (a - b).abs() > 1e-12 * b.abs().max(1e-300));
        if drift || meta.bandwidth.len() != meta.d {
            return Err(Error::ModelFormat("stored bandwidth does not match stored points".into()));
        }
        let pca = PcaModel {
            mean: meta.pca_mean,
            components: components.iter_rows().map(<[f64]>::to_vec).collect(),
            explained_variance: meta.explained_variance,
        };
        Ok(DensityModel { id: meta.id, config: meta.config, mask: meta.mask, pca, kde })
    }
}

const MODEL_FORMAT: &str = "sk-density-model/1";
const MODEL_FILE: &str = "model.json";
const COMPONENTS_FILE: &str = "components.atrc";
const POINTS_FILE: &str = "points.atrc";

#[derive(Serialize, Deserialize)]
struct SavedModel {
    format: String,
    id: String,
    config: DensityConfig,
    mask: ColumnMask,
    pca_mean: Vec<f64>,
    explained_variance: Vec<f64>,
    bandwidth: Vec<Vec<f64>>,
    n: usize,
    d: usize,
    components_file: String,
    points_file: String,
}
