//! Distribution-level comparison of two LSA samples.
//!
//! - 1-D Gaussian KDE curves (Scott bandwidth) for plotting,
//! - Jensen–Shannon divergence between two KDE curves on a shared grid,
//! - Spearman rank correlation with a parametric and a permutation p-value.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::zscore;
use crate::seed;
use crate::stats;
use crate::surprise::log_sum_exp;

pub const DEFAULT_GRID_SIZE: usize = 1000;
pub const MIN_GRID_SIZE: usize = 16;
pub const DEFAULT_N_PERM: usize = 10_000;

/// Density sampled on a uniform ascending grid; integrates to 1 under the
/// trapezoidal rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityCurve {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub bandwidth: f64,
}

impl DensityCurve {
    pub fn trapezoid(&self) -> f64 {
        trapezoid(&self.xs, &self.ys)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y\n");
        for (x, y) in self.xs.iter().zip(&self.ys) {
            let _ = writeln!(out, "{x},{y}");
        }
        out
    }
}

fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2).zip(ys.windows(2)).map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1])).sum()
}

#[derive(Debug, Clone, Copy)]
struct Sample1d<'a> {
    values: &'a [f64],
    bandwidth: f64,
    min: f64,
    max: f64,
}

impl<'a> Sample1d<'a> {
    fn new(values: &'a [f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InsufficientData(format!("KDE curve needs >= 2 samples, got {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("samples contain non-finite values".into()));
        }
        let std = stats::sample_std(values);
        if stats::is_constant(values, std) {
            return Err(Error::DegenerateData("KDE curve of a constant sample".into()));
        }
        let bandwidth = (values.len() as f64).powf(-0.2) * std;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Sample1d { values, bandwidth, min, max })
    }

    /// Log density at `x` (natural log).
    fn log_density(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let exps: Vec<f64> = self.values.iter().map(|s| -0.5 * ((x - s) / h).powi(2)).collect();
        log_sum_exp(&exps) - (self.values.len() as f64).ln() - (h * (2.0 * std::f64::consts::PI).sqrt()).ln()
    }
}

fn uniform_grid(lo: f64, hi: f64, size: usize) -> Vec<f64> {
    let step = (hi - lo) / (size - 1) as f64;
    (0..size).map(|i| if i == size - 1 { hi } else { lo + step * i as f64 }).collect()
}

fn check_grid(grid_size: usize) -> Result<()> {
    if grid_size < MIN_GRID_SIZE {
        return Err(Error::InvalidArgument(format!("grid_size must be >= {MIN_GRID_SIZE}, got {grid_size}")));
    }
    Ok(())
}

/// Gaussian KDE of `samples` on `grid_size` points spanning `[min - 3h, max + 3h]`.
pub fn kde_curve_1d(samples: &[f64], grid_size: usize) -> Result<DensityCurve> {
    check_grid(grid_size)?;
    let s = Sample1d::new(samples)?;
    let h = s.bandwidth;
    let xs = uniform_grid(s.min - 3.0 * h, s.max + 3.0 * h, grid_size);
    let log_ys: Vec<f64> = xs.par_iter().map(|&x| s.log_density(x)).collect();
    let peak = log_ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut ys: Vec<f64> = log_ys.iter().map(|l| (l - peak).exp()).collect();
    let area = trapezoid(&xs, &ys);
    ys.iter_mut().for_each(|y| *y /= area);
    Ok(DensityCurve { xs, ys, bandwidth: h })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceResult {
    /// Base-2 Jensen–Shannon divergence in `[0, 1]`.
    pub jsd: f64,
    pub grid_size: usize,
    pub standardized: bool,
}

/// Jensen–Shannon divergence between the KDEs of two samples.
///
/// With `standardized`, each sample is z-scored first. Both densities are
/// evaluated on one grid covering the union of the samples padded by three
/// of the larger bandwidth, normalized into discrete distributions, and
/// compared with base-2 logarithms.
pub fn js_divergence(a: &[f64], b: &[f64], standardized: bool, grid_size: usize) -> Result<DivergenceResult> {
    check_grid(grid_size)?;
    let (za, zb);
    let (a, b) = if standardized {
        za = zscore(a)?;
        zb = zscore(b)?;
        (za.as_slice(), zb.as_slice())
    } else {
        (a, b)
    };
    let (sa, sb) = (Sample1d::new(a)?, Sample1d::new(b)?);
    let pad = 3.0 * sa.bandwidth.max(sb.bandwidth);
    let xs = uniform_grid(sa.min.min(sb.min) - pad, sa.max.max(sb.max) + pad, grid_size);
    let p = discrete_distribution(&sa, &xs);
    let q = discrete_distribution(&sb, &xs);
    let jsd: f64 = p.iter().zip(&q).map(|(&pi, &qi)| js_term(pi, qi)).sum();
    Ok(DivergenceResult { jsd: jsd.clamp(0.0, 1.0), grid_size, standardized })
}

fn discrete_distribution(s: &Sample1d<'_>, xs: &[f64]) -> Vec<f64> {
    let logs: Vec<f64> = xs.par_iter().map(|&x| s.log_density(x)).collect();
    let total = log_sum_exp(&logs);
    logs.iter().map(|l| (l - total).exp()).collect()
}

/// `(p log2(p/m) + q log2(q/m)) / 2` with `m = (p + q) / 2`; symmetric in
/// its arguments bit for bit.
fn js_term(p: f64, q: f64) -> f64 {
    let m = 0.5 * (p + q);
    let kl = |x: f64| if x > 0.0 { x * (x / m).log2() } else { 0.0 };
    0.5 * (kl(p) + kl(q))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub rho: f64,
    pub p_parametric: f64,
    pub p_permutation: Option<f64>,
    pub n: usize,
}

struct RankedPair {
    /// Centered ranks of `a` and `b`.
    ca: Vec<f64>,
    cb: Vec<f64>,
    norm: f64,
}

impl RankedPair {
    fn new(a: &[f64], b: &[f64]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::Shape(format!("spearman inputs differ in length: {} vs {}", a.len(), b.len())));
        }
        if a.len() < 3 {
            return Err(Error::InsufficientData(format!("spearman needs n >= 3, got {}", a.len())));
        }
        if a.iter().chain(b).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("spearman inputs contain non-finite values".into()));
        }
        let center = |xs: &[f64]| {
            let r = stats::average_ranks(xs);
            let m = stats::mean(&r);
            r.into_iter().map(|v| v - m).collect::<Vec<_>>()
        };
        let (ca, cb) = (center(a), center(b));
        let saa: f64 = ca.iter().map(|v| v * v).sum();
        let sbb: f64 = cb.iter().map(|v| v * v).sum();
        if saa <= 0.0 || sbb <= 0.0 {
            return Err(Error::DegenerateData("spearman of a constant input".into()));
        }
        Ok(RankedPair { ca, cb, norm: (saa * sbb).sqrt() })
    }

    fn rho_with(&self, perm: Option<&[usize]>) -> f64 {
        let dot: f64 = match perm {
            None => self.ca.iter().zip(&self.cb).map(|(x, y)| x * y).sum(),
            Some(p) => self.ca.iter().zip(p).map(|(x, &j)| x * self.cb[j]).sum(),
        };
        (dot / self.norm).clamp(-1.0, 1.0)
    }
}

/// Spearman's rho (Pearson correlation of average ranks) with a two-sided
/// Student-t p-value on `n - 2` degrees of freedom.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<CorrelationResult> {
    let pair = RankedPair::new(a, b)?;
    let rho = pair.rho_with(None);
    Ok(CorrelationResult { rho, p_parametric: parametric_p(rho, a.len()), p_permutation: None, n: a.len() })
}

fn parametric_p(rho: f64, n: usize) -> f64 {
    let denom = 1.0 - rho * rho;
    if denom <= 0.0 {
        return 0.0;
    }
    let df = n as f64 - 2.0;
    stats::student_t_two_sided(rho * (df / denom).sqrt(), df)
}

/// Permuted |rho| within this distance of the observed |rho| counts as "at least as extreme".
const TIE_EPS: f64 = 1e-12;

/// Permutation p-value `(1 + #{|rho_perm| >= |rho_obs|}) / (n_perm + 1)`.
///
/// Trial `t` shuffles `b` with a ChaCha stream seeded by `derive(seed, t)`,
/// so the count does not depend on how trials are scheduled.
pub fn permutation_pvalue(a: &[f64], b: &[f64], n_perm: usize, seed: u64) -> Result<f64> {
    if n_perm == 0 {
        return Err(Error::InvalidArgument("n_perm must be >= 1".into()));
    }
    let pair = RankedPair::new(a, b)?;
    let observed = pair.rho_with(None).abs();
    let n = a.len();
    let hits: usize = (0..n_perm as u64)
        .into_par_iter()
        .map_init(
            || (0..n).collect::<Vec<usize>>(),
            |perm, trial| {
                perm.iter_mut().enumerate().for_each(|(i, v)| *v = i);
                perm.shuffle(&mut seed::rng(seed::derive(seed, trial)));
                usize::from(pair.rho_with(Some(perm)).abs() >= observed - TIE_EPS)
            },
        )
        .sum();
    Ok((1 + hits) as f64 / (n_perm + 1) as f64)
}

/// [`spearman`] plus a permutation p-value.
pub fn spearman_with_permutation(a: &[f64], b: &[f64], n_perm: usize, seed: u64) -> Result<CorrelationResult> {
    let mut r = spearman(a, b)?;
    r.p_permutation = Some(permutation_pvalue(a, b, n_perm, seed)?);
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strength {
    Strong,
    NotStrong,
}

pub const STRONG_RHO: f64 = 0.7;
pub const SIGNIFICANCE: f64 = 0.05;

/// Strong iff `rho > 0.7` and the smallest available p-value is below 0.05.
pub fn strength_label(r: &CorrelationResult) -> Strength {
    let p = r.p_permutation.map_or(r.p_parametric, |pp| pp.min(r.p_parametric));
    if r.rho > STRONG_RHO && p < SIGNIFICANCE {
        Strength::Strong
    } else {
        Strength::NotStrong
    }
}
