//! Per-label pipelines comparing a reference and a surrogate density model,
//! and the prioritized-subset mutation experiment.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::diststat::{self, CorrelationResult, DensityCurve, Strength};
use crate::error::{Error, Result};
use crate::mutation::{self, Criterion, KillConfig, KillEvaluator, KillReport, MutationSpec, SearchResult, Source};
use crate::nnrt::NeuralModel;
use crate::preprocess;
use crate::prioritize::{self, AccuracyCurve, Direction, Selection};
use crate::seed;
use crate::surprise::{fit_density_model, DensityConfig, LsaScores};
use crate::trace::{DatasetManifest, LabelVector, TraceMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutationConfig {
    pub sigma: f64,
    pub iters: usize,
    pub alpha: f64,
    pub d_min: f64,
    pub instances: usize,
}

impl Default for MutationConfig {
    fn default() -> Self {
        MutationConfig {
            sigma: mutation::DEFAULT_SIGMA,
            iters: mutation::DEFAULT_SEARCH_ITERS,
            alpha: mutation::DEFAULT_ALPHA,
            d_min: mutation::DEFAULT_D_MIN,
            instances: mutation::DEFAULT_INSTANCES,
        }
    }
}

impl MutationConfig {
    pub fn kill_config(&self, criterion: Criterion) -> KillConfig {
        KillConfig { criterion, alpha: self.alpha, d_min: self.d_min, instances: self.instances }
    }
}

/// Fully resolved run parameters, embedded in every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub reference: Option<PathBuf>,
    pub surrogate: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub variance_threshold: f64,
    pub pca_k: Option<usize>,
    pub grid_size: usize,
    pub n_perm: usize,
    pub seed: u64,
    pub subset_sizes: Vec<usize>,
    pub mutation: MutationConfig,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            reference: None,
            surrogate: None,
            test: None,
            variance_threshold: preprocess::DEFAULT_VARIANCE_THRESHOLD,
            pca_k: None,
            grid_size: diststat::DEFAULT_GRID_SIZE,
            n_perm: diststat::DEFAULT_N_PERM,
            seed: 0,
            subset_sizes: prioritize::SUBSET_PRESET_SMALL.to_vec(),
            mutation: MutationConfig::default(),
            out: None,
        }
    }
}

impl RunConfig {
    pub fn density_config(&self) -> DensityConfig {
        DensityConfig { variance_threshold: self.variance_threshold, pca_k: self.pca_k }
    }
}

/// LSA of the same test traces under a reference-fitted and a
/// surrogate-fitted density model.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedScores {
    pub reference: LsaScores,
    pub surrogate: LsaScores,
}

pub fn score_pair(
    reference: &TraceMatrix,
    surrogate: &TraceMatrix,
    test: &TraceMatrix,
    config: &DensityConfig,
) -> Result<PairedScores> {
    let ref_model = fit_density_model(reference, config)?.with_id("reference");
    let sur_model = fit_density_model(surrogate, config)?.with_id("surrogate");
    Ok(PairedScores {
        reference: ref_model.score_batch(test)?.with_dataset_id("test"),
        surrogate: sur_model.score_batch(test)?.with_dataset_id("test"),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceRecord {
    pub label: String,
    pub n_test: usize,
    pub jsd_standardized: f64,
    pub jsd_raw: f64,
    #[serde(skip)]
    pub curves: Option<LabelCurves>,
}

/// KDE curves of the standardized LSA samples, for plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelCurves {
    pub reference: DensityCurve,
    pub surrogate: DensityCurve,
}

pub fn divergence_record(label: &str, scores: &PairedScores, grid_size: usize) -> Result<DivergenceRecord> {
    let (a, b) = (&scores.reference.values, &scores.surrogate.values);
    let std = diststat::js_divergence(a, b, true, grid_size)?;
    let raw = diststat::js_divergence(a, b, false, grid_size)?;
    let curves = LabelCurves {
        reference: diststat::kde_curve_1d(&preprocess::zscore(a)?, grid_size)?,
        surrogate: diststat::kde_curve_1d(&preprocess::zscore(b)?, grid_size)?,
    };
    Ok(DivergenceRecord {
        label: label.to_string(),
        n_test: a.len(),
        jsd_standardized: std.jsd,
        jsd_raw: raw.jsd,
        curves: Some(curves),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRecord {
    pub label: String,
    #[serde(flatten)]
    pub result: CorrelationResult,
    pub strength: Strength,
    pub seed: u64,
}

pub fn correlation_record(label: &str, scores: &PairedScores, n_perm: usize, seed: u64) -> Result<CorrelationRecord> {
    let result =
        diststat::spearman_with_permutation(&scores.reference.values, &scores.surrogate.values, n_perm, seed)?;
    Ok(CorrelationRecord { label: label.to_string(), strength: diststat::strength_label(&result), result, seed })
}

/// Traces of one label from the reference, surrogate and test manifests.
pub struct LabelTraces {
    pub label: String,
    pub reference: TraceMatrix,
    pub surrogate: TraceMatrix,
    pub test: TraceMatrix,
    pub test_correct: Option<Vec<bool>>,
}

/// Pairs entries by label; every test label must exist in both other manifests.
pub fn collect_label_traces(
    reference: &DatasetManifest,
    surrogate: &DatasetManifest,
    test: &DatasetManifest,
) -> Result<Vec<LabelTraces>> {
    test.entries
        .iter()
        .map(|t| {
            let r = reference.entry(&t.label)?;
            let s = surrogate.entry(&t.label)?;
            Ok(LabelTraces {
                label: t.label.clone(),
                reference: reference.traces(r)?,
                surrogate: surrogate.traces(s)?,
                test: test.traces(t)?,
                test_correct: test.correctness(t)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report<T> {
    pub command: String,
    pub config: RunConfig,
    /// Omitted in deterministic mode so identical runs give identical bytes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_at_unix: Option<u64>,
    pub results: Vec<T>,
}

pub fn rq1(labels: &[LabelTraces], config: &RunConfig) -> Result<Vec<DivergenceRecord>> {
    labels
        .iter()
        .map(|l| {
            let scores = score_pair(&l.reference, &l.surrogate, &l.test, &config.density_config())?;
            divergence_record(&l.label, &scores, config.grid_size)
        })
        .collect()
}

/// Permutation seed for label `index` is `derive(config.seed, index)`.
pub fn rq2(labels: &[LabelTraces], config: &RunConfig) -> Result<Vec<CorrelationRecord>> {
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let scores = score_pair(&l.reference, &l.surrogate, &l.test, &config.density_config())?;
            correlation_record(&l.label, &scores, config.n_perm, seed::derive(config.seed, i as u64))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRecord {
    pub label: String,
    pub source: Source,
    pub overall_accuracy: f64,
    pub curve: AccuracyCurve,
}

/// Accuracy along descending LSA for both density sources.
pub fn rq3_accuracy(labels: &[LabelTraces], config: &RunConfig) -> Result<Vec<AccuracyRecord>> {
    let mut out = Vec::new();
    for l in labels {
        let correct = l.test_correct.as_ref().ok_or_else(|| Error::Manifest {
            entry: l.label.clone(),
            reason: "test entry needs logits_path and true_labels_path".into(),
        })?;
        let scores = score_pair(&l.reference, &l.surrogate, &l.test, &config.density_config())?;
        for (source, s) in [(Source::Original, &scores.reference), (Source::Surrogate, &scores.surrogate)] {
            let ranking = prioritize::rank_by_lsa(s, Direction::Descending);
            let curve = prioritize::cumulative_accuracy_curve(&ranking, correct)?;
            out.push(AccuracyRecord {
                label: l.label.clone(),
                source,
                overall_accuracy: curve.last().unwrap_or(0.0),
                curve,
            });
        }
    }
    Ok(out)
}

/// Penultimate activations of `inputs` without dropout.
pub fn penultimate_traces(model: &NeuralModel, inputs: &TraceMatrix) -> Result<TraceMatrix> {
    Ok(model.predict_batch(inputs, 1, None)?.penultimate)
}

/// Test inputs of a classifier, ranked by surprise against a reference set.
pub struct PrioritizedTestSet {
    pub inputs: TraceMatrix,
    pub truth: LabelVector,
    pub scores: LsaScores,
    pub original_correct: Vec<bool>,
}

impl PrioritizedTestSet {
    /// Fits the density model on the penultimate traces of `reference_inputs`
    /// and scores the test inputs' traces.
    pub fn build(
        model: &NeuralModel,
        reference_inputs: &TraceMatrix,
        inputs: TraceMatrix,
        truth: LabelVector,
        density: &DensityConfig,
    ) -> Result<Self> {
        if inputs.rows() != truth.len() {
            return Err(Error::Shape(format!("{} test inputs but {} labels", inputs.rows(), truth.len())));
        }
        let density_model = fit_density_model(&penultimate_traces(model, reference_inputs)?, density)?;
        let scores = density_model.score_batch(&penultimate_traces(model, &inputs)?)?;
        let predicted = &model.predict_batch(&inputs, 1, None)?.predictions[0];
        let original_correct = predicted.iter().zip(truth.values()).map(|(p, t)| p == t).collect();
        Ok(PrioritizedTestSet { inputs, truth, scores, original_correct })
    }

    /// Top-`k` correctly classified inputs by descending LSA.
    pub fn subset(&self, k: usize) -> Result<(Selection, TraceMatrix, LabelVector)> {
        let ranking = prioritize::rank_by_lsa(&self.scores, Direction::Descending);
        let sel = prioritize::select_top_k_correct(&ranking, &self.original_correct, k)?;
        let inputs = self.inputs.select_rows(&sel.indices)?;
        let truth = self.truth.select(&sel.indices);
        Ok((sel, inputs, truth))
    }
}

/// Kills one fixed-rho mutant, or bisects for the smallest killable rho when
/// `rho` is `None`. A label that cannot be killed at rho = 1 is reported as
/// not killed rather than failing the run.
#[allow(clippy::too_many_arguments)]
pub fn kill_report(
    model: &NeuralModel,
    inputs: &TraceMatrix,
    truth: &LabelVector,
    label: &str,
    source: Source,
    criterion: Criterion,
    rho: Option<f64>,
    mutation_cfg: &MutationConfig,
    seed: u64,
) -> Result<(KillReport, Option<SearchResult>)> {
    let kill_cfg = mutation_cfg.kill_config(criterion);
    let mut report = KillReport {
        label: label.to_string(),
        criterion,
        subset_size: inputs.rows(),
        source,
        killed: false,
        p_value: None,
        effect_size: None,
        rho_star: None,
    };
    match rho {
        Some(rho) => {
            let mutant = mutation::gaussian_fuzz(model, &MutationSpec::new(rho, mutation_cfg.sigma, seed)?)?;
            let evaluator = KillEvaluator::new(model, inputs, truth, kill_cfg, seed::derive(seed, 1))?;
            let verdict = evaluator.evaluate(&mutant)?;
            report.killed = verdict.killed;
            report.p_value = verdict.p_value;
            report.effect_size = verdict.effect_size;
            Ok((report, None))
        }
        None => {
            match mutation::binary_search_rho(model, inputs, truth, mutation_cfg.sigma, mutation_cfg.iters, kill_cfg, seed)
            {
                Ok(found) => {
                    report.killed = true;
                    report.rho_star = Some(found.rho_star);
                    Ok((report, Some(found)))
                }
                Err(Error::NotKillable { .. }) => Ok((report, None)),
                Err(e) => Err(e),
            }
        }
    }
}
