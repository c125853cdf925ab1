//! Gaussian Fuzzing of model weights and kill evaluation of the mutants.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnrt::{Layer, NeuralModel};
use crate::seed;
use crate::stats;
use crate::trace::{LabelVector, TraceMatrix};

pub const DEFAULT_SIGMA: f64 = 0.5;
pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_D_MIN: f64 = 0.5;
pub const DEFAULT_INSTANCES: usize = 20;
pub const DEFAULT_SEARCH_ITERS: usize = 10;

/// Stream index reserved for dropout seeds under a search seed.
const DROPOUT_STREAM: u64 = 0xD0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MutationSpec {
    /// Per-weight selection probability.
    pub rho: f64,
    /// Standard deviation of the multiplicative noise.
    pub sigma: f64,
    pub seed: u64,
    #[serde(default)]
    pub mutate_biases: bool,
}

impl MutationSpec {
    pub fn new(rho: f64, sigma: f64, seed: u64) -> Result<Self> {
        let spec = MutationSpec { rho, sigma, seed, mutate_biases: false };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::InvalidArgument(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Returns a mutant where each selected weight becomes `w * (1 + eps)`,
/// `eps ~ N(0, sigma^2)`. Every weight draws a uniform and a normal from the
/// layer's stream whether selected or not, so the draw for a given weight
/// does not depend on `rho`.
pub fn gaussian_fuzz(model: &NeuralModel, spec: &MutationSpec) -> Result<NeuralModel> {
    spec.validate()?;
    let normal = Normal::new(0.0, spec.sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let layers = model
        .layers()
        .iter()
        .enumerate()
        .map(|(li, layer)| match layer {
            Layer::Dense { weights, bias } => {
                let mut rng = seed::rng(seed::derive(spec.seed, li as u64));
                let mut perturb = |w: f64| {
                    let u: f64 = rng.random();
                    let eps = normal.sample(&mut rng);
                    if u < spec.rho {
                        w * (1.0 + eps)
                    } else {
                        w
                    }
                };
                let weights: Vec<Vec<f64>> =
                    weights.iter().map(|row| row.iter().map(|&w| perturb(w)).collect()).collect();
                let bias = if spec.mutate_biases { bias.iter().map(|&b| perturb(b)).collect() } else { bias.clone() };
                Layer::Dense { weights, bias }
            }
            other => other.clone(),
        })
        .collect();
    model.with_layers(layers)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    SingleInstance,
    #[default]
    Statistical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KillDetails {
    /// Inputs the original classifies correctly and the mutant does not.
    KillingInputs { indices: Vec<usize> },
    /// Per-instance accuracies of both models.
    Instances { original: Vec<f64>, mutant: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KillVerdict {
    pub killed: bool,
    pub criterion: Criterion,
    pub p_value: Option<f64>,
    pub effect_size: Option<f64>,
    pub details: KillDetails,
}

pub fn single_instance_kill(orig_pred: &[usize], mut_pred: &[usize], truth: &LabelVector) -> Result<KillVerdict> {
    if orig_pred.len() != truth.len() || mut_pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "prediction lengths {} / {} do not match {} labels",
            orig_pred.len(),
            mut_pred.len(),
            truth.len()
        )));
    }
    let indices: Vec<usize> = truth
        .values()
        .iter()
        .enumerate()
        .filter(|&(i, &t)| orig_pred[i] == t && mut_pred[i] != t)
        .map(|(i, _)| i)
        .collect();
    Ok(KillVerdict {
        killed: !indices.is_empty(),
        criterion: Criterion::SingleInstance,
        p_value: None,
        effect_size: None,
        details: KillDetails::KillingInputs { indices },
    })
}

/// Welch two-sided test on per-instance accuracies plus Cohen's d.
/// `effect_size` is `d(orig, mut)`, positive when the mutant is worse.
pub fn statistical_kill(orig_acc: &[f64], mut_acc: &[f64], alpha: f64, d_min: f64) -> Result<KillVerdict> {
    if orig_acc.len() < 2 || mut_acc.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "statistical kill needs >= 2 instances per model, got {} and {}",
            orig_acc.len(),
            mut_acc.len()
        )));
    }
    if let Some(v) = orig_acc.iter().chain(mut_acc).find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("accuracy {v} outside [0, 1]")));
    }
    let both_constant = stats::is_constant(orig_acc, stats::sample_std(orig_acc))
        && stats::is_constant(mut_acc, stats::sample_std(mut_acc));
    let (p, d) = if both_constant {
        let gap = stats::mean(orig_acc) - stats::mean(mut_acc);
        if gap == 0.0 {
            (1.0, 0.0)
        } else {
            (0.0, f64::MAX.copysign(gap))
        }
    } else {
        let (t, df) = stats::welch_t(orig_acc, mut_acc);
        (stats::student_t_two_sided(t, df), stats::cohens_d(orig_acc, mut_acc))
    };
    Ok(KillVerdict {
        killed: p < alpha && d.abs() >= d_min,
        criterion: Criterion::Statistical,
        p_value: Some(p),
        effect_size: Some(d),
        details: KillDetails::Instances { original: orig_acc.to_vec(), mutant: mut_acc.to_vec() },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KillConfig {
    pub criterion: Criterion,
    pub alpha: f64,
    pub d_min: f64,
    /// Stochastic forward passes per model for the statistical criterion.
    pub instances: usize,
}

impl Default for KillConfig {
    fn default() -> Self {
        KillConfig {
            criterion: Criterion::Statistical,
            alpha: DEFAULT_ALPHA,
            d_min: DEFAULT_D_MIN,
            instances: DEFAULT_INSTANCES,
        }
    }
}

/// Evaluates mutants of one original model against a fixed labeled input
/// set. Original predictions are computed once. Both models share the same
/// per-instance dropout seeds, so an unmodified mutant is never killed.
pub struct KillEvaluator<'a> {
    inputs: &'a TraceMatrix,
    truth: &'a LabelVector,
    config: KillConfig,
    dropout_seed: u64,
    original: Vec<Vec<usize>>,
}

impl<'a> KillEvaluator<'a> {
    pub fn new(
        model: &NeuralModel,
        inputs: &'a TraceMatrix,
        truth: &'a LabelVector,
        config: KillConfig,
        dropout_seed: u64,
    ) -> Result<Self> {
        if inputs.rows() != truth.len() {
            return Err(Error::Shape(format!("{} inputs but {} labels", inputs.rows(), truth.len())));
        }
        if config.criterion == Criterion::Statistical && config.instances < 2 {
            return Err(Error::InvalidArgument("statistical criterion needs >= 2 instances".into()));
        }
        let mut eval = KillEvaluator { inputs, truth, config, dropout_seed, original: Vec::new() };
        eval.original = eval.predictions(model)?;
        Ok(eval)
    }

    fn predictions(&self, model: &NeuralModel) -> Result<Vec<Vec<usize>>> {
        Ok(match self.config.criterion {
            Criterion::SingleInstance => model.predict_batch(self.inputs, 1, None)?.predictions,
            Criterion::Statistical => {
                model.predict_batch(self.inputs, self.config.instances, Some(self.dropout_seed))?.predictions
            }
        })
    }

    fn accuracies(&self, passes: &[Vec<usize>]) -> Vec<f64> {
        let n = self.truth.len().max(1) as f64;
        passes
            .iter()
            .map(|p| p.iter().zip(self.truth.values()).filter(|(a, b)| a == b).count() as f64 / n)
            .collect()
    }

    pub fn original_predictions(&self) -> &[Vec<usize>] {
        &self.original
    }

    pub fn evaluate(&self, mutant: &NeuralModel) -> Result<KillVerdict> {
        let mutated = self.predictions(mutant)?;
        match self.config.criterion {
            Criterion::SingleInstance => single_instance_kill(&self.original[0], &mutated[0], self.truth),
            Criterion::Statistical => statistical_kill(
                &self.accuracies(&self.original),
                &self.accuracies(&mutated),
                self.config.alpha,
                self.config.d_min,
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchStep {
    pub rho: f64,
    pub killed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub rho_star: f64,
    pub trace: Vec<SearchStep>,
    /// False when some killed step has a smaller rho than a surviving step.
    pub monotone_consistent: bool,
}

/// Bisects for the smallest rho at which `killed(rho)` holds, assuming it is
/// monotone. Returns `None` when `killed(1.0)` is false.
pub fn binary_search_with<F>(iters: usize, mut killed: F) -> Result<Option<SearchResult>>
where
    F: FnMut(f64) -> Result<bool>,
{
    if iters == 0 {
        return Err(Error::InvalidArgument("iters must be >= 1".into()));
    }
    let mut trace = vec![SearchStep { rho: 1.0, killed: killed(1.0)? }];
    if !trace[0].killed {
        return Ok(None);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..iters {
        let mid = 0.5 * (lo + hi);
        let k = killed(mid)?;
        trace.push(SearchStep { rho: mid, killed: k });
        if k {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let max_alive = trace.iter().filter(|s| !s.killed).map(|s| s.rho).fold(f64::NEG_INFINITY, f64::max);
    let min_killed = trace.iter().filter(|s| s.killed).map(|s| s.rho).fold(f64::INFINITY, f64::min);
    let monotone_consistent = max_alive <= min_killed;
    if !monotone_consistent {
        log::warn!("non-monotone killability: survived at rho {max_alive}, killed at rho {min_killed}");
    }
    Ok(Some(SearchResult { rho_star: hi, trace, monotone_consistent }))
}

/// Smallest killable mutation ratio for `model` on the labeled inputs.
/// The mutant for candidate `rho` uses seed `derive(seed, rho bits)`.
pub fn binary_search_rho(
    model: &NeuralModel,
    inputs: &TraceMatrix,
    truth: &LabelVector,
    sigma: f64,
    iters: usize,
    config: KillConfig,
    seed: u64,
) -> Result<SearchResult> {
    let evaluator = KillEvaluator::new(model, inputs, truth, config, seed::derive(seed, DROPOUT_STREAM))?;
    let found = binary_search_with(iters, |rho| {
        let spec = MutationSpec::new(rho, sigma, seed::derive(seed, rho.to_bits()))?;
        let mutant = gaussian_fuzz(model, &spec)?;
        Ok(evaluator.evaluate(&mutant)?.killed)
    })?;
    found.ok_or(Error::NotKillable { sigma })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Original,
    Surrogate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KillReport {
    pub label: String,
    pub criterion: Criterion,
    pub subset_size: usize,
    pub source: Source,
    pub killed: bool,
    pub p_value: Option<f64>,
    pub effect_size: Option<f64>,
    pub rho_star: Option<f64>,
}

/// One row per `(label, subset_size)`, one `killed` column per source.
pub fn kill_table_csv(reports: &[KillReport]) -> String {
    let mut keys: Vec<(String, usize)> = Vec::new();
    for r in reports {
        let key = (r.label.clone(), r.subset_size);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let cell = |label: &str, size: usize, source: Source| {
        reports
            .iter()
            .find(|r| r.label == label && r.subset_size == size && r.source == source)
            .map_or("", |r| if r.killed { "1" } else { "0" })
    };
    let mut out = String::from("label,subset_size,original,surrogate\n");
    for (label, size) in keys {
        out.push_str(&format!(
            "{label},{size},{},{}\n",
            cell(&label, size, Source::Original),
            cell(&label, size, Source::Surrogate)
        ));
    }
    out
}
