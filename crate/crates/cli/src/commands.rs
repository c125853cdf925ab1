use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use sk_core::diststat::{self, CorrelationResult, DivergenceResult, Strength};
use sk_core::experiment::{self, PrioritizedTestSet, Report, RunConfig};
use sk_core::mutation::{self, Criterion, KillEvaluator, KillReport, KillVerdict, MutationSpec, SearchResult, Source};
use sk_core::nnrt::{load_model, NeuralModel};
use sk_core::preprocess::zscore;
use sk_core::prioritize::{self, AccuracyCurve, Ranking, Selection, SUBSET_PRESET_LARGE, SUBSET_PRESET_SMALL};
use sk_core::seed;
use sk_core::surprise::{fit_density_model, DensityConfig, DensityModel, LsaScores};
use sk_core::trace::{self, DatasetManifest, LabelVector, TraceMatrix};
use sk_core::{Error, Result};

use crate::{
    Cli, Command, CorrArgs, DensityArgs, DistCommand, DistCompareArgs, FuzzArgs, KillArgs, LsaCommand, LsaFitArgs,
    LsaScoreArgs, MutateCommand, PresetArg, PrioritizeArgs, Rq3Command, Rq3KillArgs, RqArgs, SearchArgs,
};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Lsa(LsaCommand::Fit(a)) => lsa_fit(cli, a),
        Command::Lsa(LsaCommand::Score(a)) => lsa_score(cli, a),
        Command::Dist(DistCommand::Compare(a)) => dist_compare(cli, a),
        Command::Corr(a) => corr(cli, a),
        Command::Prioritize(a) => prioritize_cmd(cli, a),
        Command::Mutate(MutateCommand::Fuzz(a)) => mutate_fuzz(cli, a),
        Command::Mutate(MutateCommand::Kill(a)) => mutate_kill(cli, a),
        Command::Mutate(MutateCommand::Search(a)) => mutate_search(cli, a),
        Command::Rq1(a) => rq1(cli, a),
        Command::Rq2(a) => rq2(cli, a),
        Command::Rq3(Rq3Command::Accuracy(a)) => rq3_accuracy(cli, a),
        Command::Rq3(Rq3Command::Kill(a)) => rq3_kill(cli, a),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn file_safe(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

fn echo_seed(what: &str, seed: u64) {
    eprintln!("sk: {what} seed {seed}");
}

/// Prints the report on stdout and, with an output directory, writes it to
/// `<dir>/<name>.json`.
fn emit<T: Serialize>(cli: &Cli, command: &str, config: RunConfig, results: Vec<T>, out_dir: Option<&Path>) -> Result<()> {
    let generated_at_unix =
        (!cli.deterministic).then(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()));
    let report = Report { command: command.to_string(), config, generated_at_unix, results };
    let text = serde_json::to_string_pretty(&report)? + "\n";
    if let Some(dir) = out_dir {
        write_file(&dir.join(format!("{}.json", command.replace(' ', "_"))), &text)?;
    }
    print!("{text}");
    Ok(())
}

fn with_density(mut config: RunConfig, d: &DensityArgs) -> RunConfig {
    config.variance_threshold = d.variance_threshold;
    config.pca_k = d.pca_k;
    config
}

fn density_config(d: &DensityArgs) -> DensityConfig {
    DensityConfig { variance_threshold: d.variance_threshold, pca_k: d.pca_k }
}

#[derive(Serialize)]
struct FitSummary {
    model_id: String,
    model_dir: PathBuf,
    input_dim: usize,
    kept_columns: usize,
    pca_k: usize,
    reference_rows: usize,
}

fn lsa_fit(cli: &Cli, a: &LsaFitArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let entry = manifest.entry(&a.label)?;
    let traces = manifest.traces(entry)?;
    let model = fit_density_model(&traces, &density_config(&a.density))?.with_id(format!("{}/{}", manifest.name, a.label));
    model.save(&a.out)?;
    let summary = FitSummary {
        model_id: model.id.clone(),
        model_dir: a.out.clone(),
        input_dim: model.input_dim(),
        kept_columns: model.mask.kept_count(),
        pca_k: model.pca.k(),
        reference_rows: traces.rows(),
    };
    let mut config = with_density(cli.base_config(), &a.density);
    config.reference = Some(a.manifest.clone());
    config.out = Some(a.out.clone());
    emit(cli, "lsa fit", config, vec![summary], None)
}

fn lsa_score(cli: &Cli, a: &LsaScoreArgs) -> Result<()> {
    let model = DensityModel::load(&a.model)?;
    let mut config = cli.base_config();
    let (traces, dataset_id) = match (&a.traces, &a.manifest, &a.label) {
        (Some(path), _, _) => (trace::read_trace_matrix(path)?, path.display().to_string()),
        (None, Some(mpath), Some(label)) => {
            let manifest = DatasetManifest::load(mpath)?;
            config.test = Some(mpath.clone());
            (manifest.traces(manifest.entry(label)?)?, format!("{}/{label}", manifest.name))
        }
        _ => return Err(Error::InvalidArgument("give --traces or --manifest with --label".into())),
    };
    let scores = model.score_batch(&traces)?.with_dataset_id(dataset_id);
    config.variance_threshold = model.config.variance_threshold;
    config.pca_k = model.config.pca_k;
    config.out = a.out.clone();
    if let Some(out) = &a.out {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        scores.save(out)?;
    }
    emit(cli, "lsa score", config, vec![scores], None)
}

#[derive(Serialize)]
struct CompareResult {
    a: String,
    b: String,
    #[serde(flatten)]
    divergence: DivergenceResult,
}

fn score_id(s: &LsaScores) -> String {
    format!("{} on {}", s.model_id, s.dataset_id)
}

fn dist_compare(cli: &Cli, a: &DistCompareArgs) -> Result<()> {
    let sa = LsaScores::load(&a.a)?;
    let sb = LsaScores::load(&a.b)?;
    let standardized = !a.raw;
    let divergence = diststat::js_divergence(&sa.values, &sb.values, standardized, a.grid_size)?;
    if let Some(dir) = &a.out {
        for (name, s) in [("curve_a.csv", &sa), ("curve_b.csv", &sb)] {
            let values = if standardized { zscore(&s.values)? } else { s.values.clone() };
            write_file(&dir.join(name), &diststat::kde_curve_1d(&values, a.grid_size)?.to_csv())?;
        }
    }
    let config = RunConfig { grid_size: a.grid_size, out: a.out.clone(), ..cli.base_config() };
    let result = CompareResult { a: score_id(&sa), b: score_id(&sb), divergence };
    emit(cli, "dist compare", config, vec![result], a.out.as_deref())
}

#[derive(Serialize)]
struct CorrOutput {
    a: String,
    b: String,
    #[serde(flatten)]
    correlation: CorrelationResult,
    strength: Strength,
    seed: u64,
}

fn corr(cli: &Cli, a: &CorrArgs) -> Result<()> {
    let sa = LsaScores::load(&a.a)?;
    let sb = LsaScores::load(&a.b)?;
    echo_seed("permutation", cli.seed);
    let correlation = diststat::spearman_with_permutation(&sa.values, &sb.values, a.n_perm, cli.seed)?;
    let out = CorrOutput {
        a: score_id(&sa),
        b: score_id(&sb),
        strength: diststat::strength_label(&correlation),
        correlation,
        seed: cli.seed,
    };
    let config = RunConfig { n_perm: a.n_perm, out: a.out.clone(), ..cli.base_config() };
    emit(cli, "corr", config, vec![out], a.out.as_deref())
}

#[derive(Serialize)]
struct PrioritizeOutput {
    ranking: Ranking,
    #[serde(skip_serializing_if = "Option::is_none")]
    curve: Option<AccuracyCurve>,
    #[serde(skip_serializing_if = "Option::is_none")]
    selection: Option<Selection>,
}

fn manifest_correctness(path: &Path, label: &str) -> Result<Vec<bool>> {
    let manifest = DatasetManifest::load(path)?;
    manifest.correctness(manifest.entry(label)?)?.ok_or_else(|| Error::Manifest {
        entry: label.to_string(),
        reason: "entry needs logits_path and true_labels_path".into(),
    })
}

fn prioritize_cmd(cli: &Cli, a: &PrioritizeArgs) -> Result<()> {
    let scores = LsaScores::load(&a.scores)?;
    let ranking = prioritize::rank_by_lsa(&scores, a.direction.into());
    let correct = match (&a.manifest, &a.label) {
        (Some(m), Some(label)) => Some(manifest_correctness(m, label)?),
        _ => None,
    };
    let curve = correct.as_ref().map(|c| prioritize::cumulative_accuracy_curve(&ranking, c)).transpose()?;
    let selection = match (a.top_k, &correct) {
        (Some(k), Some(c)) => Some(prioritize::select_top_k_correct(&ranking, c, k)?),
        _ => None,
    };
    if let (Some(dir), Some(curve)) = (&a.out, &curve) {
        write_file(&dir.join("accuracy_curve.csv"), &curve.to_csv())?;
    }
    let mut config = RunConfig { test: a.manifest.clone(), out: a.out.clone(), ..cli.base_config() };
    if let Some(k) = a.top_k {
        config.subset_sizes = vec![k];
    }
    emit(cli, "prioritize", config, vec![PrioritizeOutput { ranking, curve, selection }], a.out.as_deref())
}

fn mutate_fuzz(cli: &Cli, a: &FuzzArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let spec = MutationSpec { rho: a.rho, sigma: a.sigma, seed: cli.seed, mutate_biases: a.mutate_biases };
    echo_seed("mutation", cli.seed);
    let mutant = mutation::gaussian_fuzz(&model, &spec)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    mutant.save(&a.out)?;
    let mut config = RunConfig { out: Some(a.out.clone()), ..cli.base_config() };
    config.mutation.sigma = a.sigma;
    emit(cli, "mutate fuzz", config, vec![spec], None)
}

fn load_labeled(model: &NeuralModel, inputs: &Path, labels: &Path) -> Result<(TraceMatrix, LabelVector)> {
    let x = trace::read_trace_matrix(inputs)?;
    let y = trace::read_labels(labels, Some(model.num_classes()))?;
    Ok((x, y))
}

/// Dropout seed used for the stochastic instances of both models.
fn instance_seed(seed: u64) -> u64 {
    seed::derive(seed, 1)
}

fn mutate_kill(cli: &Cli, a: &KillArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let mutant = load_model(&a.mutant)?;
    let (inputs, truth) = load_labeled(&model, &a.inputs, &a.labels)?;
    let mutation_cfg = a.mutation.config();
    echo_seed("dropout", instance_seed(cli.seed));
    let verdicts = a
        .criterion
        .criteria()
        .into_iter()
        .map(|c| {
            KillEvaluator::new(&model, &inputs, &truth, mutation_cfg.kill_config(c), instance_seed(cli.seed))?
                .evaluate(&mutant)
        })
        .collect::<Result<Vec<KillVerdict>>>()?;
    let config = RunConfig { mutation: mutation_cfg, out: a.out.clone(), ..cli.base_config() };
    emit(cli, "mutate kill", config, verdicts, a.out.as_deref())
}

#[derive(Serialize)]
struct SearchOutput {
    criterion: Criterion,
    #[serde(flatten)]
    result: SearchResult,
}

fn mutate_search(cli: &Cli, a: &SearchArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let (inputs, truth) = load_labeled(&model, &a.inputs, &a.labels)?;
    let m = a.mutation.config();
    echo_seed("search", cli.seed);
    let results = a
        .criterion
        .criteria()
        .into_iter()
        .map(|c| {
            let result = mutation::binary_search_rho(&model, &inputs, &truth, m.sigma, m.iters, m.kill_config(c), cli.seed)?;
            Ok(SearchOutput { criterion: c, result })
        })
        .collect::<Result<Vec<_>>>()?;
    let config = RunConfig { mutation: m, out: a.out.clone(), ..cli.base_config() };
    emit(cli, "mutate search", config, results, a.out.as_deref())
}

fn rq_setup(cli: &Cli, a: &RqArgs) -> Result<(Vec<experiment::LabelTraces>, RunConfig)> {
    let reference = DatasetManifest::load(&a.reference)?;
    let surrogate = DatasetManifest::load(&a.surrogate)?;
    let test = DatasetManifest::load(&a.test)?;
    let labels = experiment::collect_label_traces(&reference, &surrogate, &test)?;
    let config = RunConfig {
        reference: Some(a.reference.clone()),
        surrogate: Some(a.surrogate.clone()),
        test: Some(a.test.clone()),
        grid_size: a.grid_size,
        n_perm: a.n_perm,
        out: a.out.clone(),
        ..with_density(cli.base_config(), &a.density)
    };
    Ok((labels, config))
}

fn rq1(cli: &Cli, a: &RqArgs) -> Result<()> {
    let (labels, config) = rq_setup(cli, a)?;
    let records = experiment::rq1(&labels, &config)?;
    if let Some(dir) = &a.out {
        for r in &records {
            if let Some(c) = &r.curves {
                let stem = file_safe(&r.label);
                write_file(&dir.join(format!("{stem}_reference_curve.csv")), &c.reference.to_csv())?;
                write_file(&dir.join(format!("{stem}_surrogate_curve.csv")), &c.surrogate.to_csv())?;
            }
        }
    }
    emit(cli, "rq1", config, records, a.out.as_deref())
}

fn rq2(cli: &Cli, a: &RqArgs) -> Result<()> {
    let (labels, config) = rq_setup(cli, a)?;
    echo_seed("permutation base", cli.seed);
    let records = experiment::rq2(&labels, &config)?;
    emit(cli, "rq2", config, records, a.out.as_deref())
}

fn rq3_accuracy(cli: &Cli, a: &RqArgs) -> Result<()> {
    let (labels, config) = rq_setup(cli, a)?;
    let records = experiment::rq3_accuracy(&labels, &config)?;
    if let Some(dir) = &a.out {
        for r in &records {
            let source = match r.source {
                Source::Original => "reference",
                Source::Surrogate => "surrogate",
            };
            write_file(&dir.join(format!("{}_{source}_accuracy.csv", file_safe(&r.label))), &r.curve.to_csv())?;
        }
    }
    emit(cli, "rq3 accuracy", config, records, a.out.as_deref())
}

#[derive(Serialize)]
struct KillRecord {
    #[serde(flatten)]
    report: KillReport,
    selection: Vec<usize>,
    shortfall: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    search: Option<SearchResult>,
}

fn rq3_kill(cli: &Cli, a: &Rq3KillArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let (inputs, truth) = load_labeled(&model, &a.inputs, &a.labels)?;
    let sizes = if a.subsets.is_empty() {
        match a.preset {
            PresetArg::Small => SUBSET_PRESET_SMALL.to_vec(),
            PresetArg::Large => SUBSET_PRESET_LARGE.to_vec(),
        }
    } else {
        a.subsets.clone()
    };
    let mutation_cfg = a.mutation.config();
    let density = density_config(&a.density);
    let mut sources = vec![(Source::Original, &a.reference)];
    if let Some(s) = &a.surrogate {
        sources.push((Source::Surrogate, s));
    }
    echo_seed("mutation", cli.seed);
    let mut records = Vec::new();
    for (source, ref_path) in sources {
        let reference = trace::read_trace_matrix(ref_path)?;
        let set = PrioritizedTestSet::build(&model, &reference, inputs.clone(), truth.clone(), &density)?;
        for &k in &sizes {
            let (selection, sub_inputs, sub_truth) = set.subset(k)?;
            for criterion in a.criterion.criteria() {
                let (report, search) = experiment::kill_report(
                    &model,
                    &sub_inputs,
                    &sub_truth,
                    &a.label,
                    source,
                    criterion,
                    a.rho,
                    &mutation_cfg,
                    cli.seed,
                )?;
                records.push(KillRecord {
                    report: KillReport { subset_size: k, ..report },
                    selection: selection.indices.clone(),
                    shortfall: selection.shortfall,
                    search,
                });
            }
        }
    }
    if let Some(dir) = &a.out {
        let criteria = a.criterion.criteria();
        for &criterion in &criteria {
            let reports: Vec<KillReport> =
                records.iter().filter(|r| r.report.criterion == criterion).map(|r| r.report.clone()).collect();
            let name = match (criteria.len(), criterion) {
                (1, _) => "kill_table.csv",
                (_, Criterion::SingleInstance) => "kill_table_single_instance.csv",
                (_, Criterion::Statistical) => "kill_table_statistical.csv",
            };
            write_file(&dir.join(name), &mutation::kill_table_csv(&reports))?;
        }
    }
    let config = RunConfig {
        reference: Some(a.reference.clone()),
        surrogate: a.surrogate.clone(),
        test: Some(a.inputs.clone()),
        subset_sizes: sizes,
        mutation: mutation_cfg,
        out: a.out.clone(),
        ..with_density(cli.base_config(), &a.density)
    };
    emit(cli, "rq3 kill", config, records, a.out.as_deref())
}
