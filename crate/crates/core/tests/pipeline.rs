use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use sk_core::experiment::{self, RunConfig};
use sk_core::nnrt::{load_model, Layer, NeuralModel};
use sk_core::prioritize::{cumulative_accuracy, cumulative_accuracy_curve, rank_by_lsa, Direction};
use sk_core::seed;
use sk_core::surprise::{fit_density_model, DensityConfig, DensityModel};
use sk_core::trace::{self, DatasetManifest, ManifestEntry, TraceMatrix};
use sk_core::Error;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/toy").join(name)
}

fn cluster(rng: &mut impl Rng, n: usize, d: usize, offset: f64) -> TraceMatrix {
    let data = (0..n * d).map(|_| offset + rng.sample::<f64, _>(StandardNormal)).collect();
    TraceMatrix::new(n, d, data).unwrap()
}

#[test]
fn density_model_shapes_and_determinism() {
    let mut rng = seed::rng(1);
    let train = cluster(&mut rng, 200, 32, 0.0);
    let cfg = DensityConfig { pca_k: Some(8), ..DensityConfig::default() };
    let model = fit_density_model(&train, &cfg).unwrap();
    assert_eq!(model.kde.d(), 8);
    let again = fit_density_model(&train, &cfg).unwrap();
    assert_eq!(model.pca, again.pca);
    assert_eq!(model.kde.bandwidth(), again.kde.bandwidth());

    let too_many = DensityConfig { pca_k: Some(200), ..DensityConfig::default() };
    assert!(matches!(fit_density_model(&train, &too_many), Err(Error::Shape(_))));

    let far = cluster(&mut rng, 50, 32, 10.0);
    let own = model.score_batch(&train).unwrap().values;
    let shifted = model.score_batch(&far).unwrap().values;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&own) < mean(&shifted));
    assert!(model.score_batch(&TraceMatrix::empty(32).unwrap()).unwrap().is_empty());
    assert!(matches!(model.score_batch(&cluster(&mut rng, 3, 31, 0.0)), Err(Error::Shape(_))));
}

#[test]
fn density_model_directory_round_trip() {
    let mut rng = seed::rng(2);
    let train = cluster(&mut rng, 60, 6, 0.0);
    let model = fit_density_model(&train, &DensityConfig::default()).unwrap().with_id("ref");
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let loaded = DensityModel::load(dir.path()).unwrap();
    let q = cluster(&mut rng, 10, 6, 0.5);
    assert_eq!(model.score_batch(&q).unwrap(), loaded.score_batch(&q).unwrap());
}

#[test]
fn toy_fixture_loads() {
    let model = load_model(fixture("model.json")).unwrap();
    assert_eq!((model.input_dim(), model.num_classes(), model.penultimate_dim()), (2, 2, 16));
    let kinds: Vec<&str> = model
        .layers()
        .iter()
        .map(|l| match l {
            Layer::Dense { .. } => "dense",
            Layer::Relu => "relu",
            Layer::Dropout { .. } => "dropout",
            Layer::Softmax => "softmax",
        })
        .collect();
    assert_eq!(kinds, ["dense", "relu", "dense", "relu", "dropout", "dense", "softmax"]);
    let test = trace::read_trace_matrix(fixture("test.atrc")).unwrap();
    let labels = trace::read_labels(fixture("test_labels.atrc"), Some(2)).unwrap();
    assert_eq!((test.rows(), labels.len()), (200, 200));
}

#[test]
fn dropout_passes_vary_near_the_boundary() {
    let model = load_model(fixture("model.json")).unwrap();
    let test = trace::read_trace_matrix(fixture("test.atrc")).unwrap();
    let det = model.predict_batch(&test, 1, None).unwrap();
    for i in 0..test.rows() {
        assert_eq!(det.predictions[0][i], model.forward(test.row(i), None).unwrap().predicted);
    }
    // inputs closest to the decision boundary, by logit margin
    let mut margins: Vec<(f64, usize)> =
        (0..test.rows()).map(|i| ((det.logits.get(i, 0) - det.logits.get(i, 1)).abs(), i)).collect();
    margins.sort_by(|a, b| a.0.total_cmp(&b.0));
    let boundary: Vec<usize> = margins.iter().take(20).map(|m| m.1).collect();
    let near = test.select_rows(&boundary).unwrap();
    let stochastic = model.predict_batch(&near, 20, Some(11)).unwrap();
    let varying = (0..near.rows()).filter(|&i| stochastic.predictions.iter().any(|p| p[i] != stochastic.predictions[0][i])).count();
    assert!(varying > 0);
    assert_eq!(stochastic, model.predict_batch(&near, 20, Some(11)).unwrap());

    let no_dropout: Vec<Layer> =
        model.layers().iter().filter(|l| !matches!(l, Layer::Dropout { .. })).cloned().collect();
    let plain = NeuralModel::new(2, 2, no_dropout).unwrap();
    let passes = plain.predict_batch(&near, 20, Some(11)).unwrap().predictions;
    assert!(passes.iter().all(|p| p == &passes[0]));
}

/// Two clusters; the classifier is always right on the reference-like one and
/// mostly wrong on the far one. The descending-LSA curve stays at or below a
/// random ranking past N/4.
#[test]
fn surprise_ranking_front_loads_errors() {
    let mut good_seeds = 0;
    for s in 0..100u64 {
        let mut rng = seed::rng(seed::derive(77, s));
        let train = cluster(&mut rng, 150, 3, 0.0);
        let test = cluster(&mut rng, 100, 3, 0.0).vstack(&cluster(&mut rng, 100, 3, 6.0)).unwrap();
        let model = fit_density_model(&train, &DensityConfig::default()).unwrap();
        let scores = model.score_batch(&test).unwrap();
        let correct: Vec<bool> = (0..200).map(|i| i < 100 || rng.random::<f64>() < 0.3).collect();
        let lsa_curve = cumulative_accuracy_curve(&rank_by_lsa(&scores, Direction::Descending), &correct).unwrap();
        let mut order: Vec<usize> = (0..200).collect();
        order.shuffle(&mut rng);
        let random_curve = cumulative_accuracy(&order, &correct).unwrap();
        if (50..200).all(|k| lsa_curve.acc[k - 1] <= random_curve.acc[k - 1]) {
            good_seeds += 1;
        }
        assert_eq!(lsa_curve.last(), random_curve.last());
    }
    assert!(good_seeds >= 95, "{good_seeds}/100");
}

fn write_label(dir: &Path, name: &str, traces: &TraceMatrix, logits: Option<(&TraceMatrix, Vec<usize>)>) -> ManifestEntry {
    let trace_path = PathBuf::from(format!("{name}_traces.atrc"));
    trace::write_trace_matrix(traces, dir.join(&trace_path)).unwrap();
    let (logits_path, true_labels_path) = match logits {
        Some((l, truth)) => {
            let lp = PathBuf::from(format!("{name}_logits.atrc"));
            let tp = PathBuf::from(format!("{name}_labels.atrc"));
            trace::write_trace_matrix(l, dir.join(&lp)).unwrap();
            trace::write_labels(&sk_core::trace::LabelVector::new(truth, l.cols()).unwrap(), dir.join(&tp)).unwrap();
            (Some(lp), Some(tp))
        }
        None => (None, None),
    };
    ManifestEntry { label: "cat".into(), class_index: 0, trace_path, logits_path, true_labels_path, count: traces.rows() as u64 }
}

#[test]
fn manifest_driven_reports() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = seed::rng(5);
    let reference = cluster(&mut rng, 120, 8, 0.0);
    let surrogate = cluster(&mut rng, 120, 8, 0.0);
    let test = cluster(&mut rng, 40, 8, 0.0).vstack(&cluster(&mut rng, 40, 8, 4.0)).unwrap();
    let logits = TraceMatrix::new(80, 2, (0..80).flat_map(|i| if i % 3 == 0 { [0.0, 1.0] } else { [1.0, 0.0] }).collect()).unwrap();
    let truth = vec![0; 80];

    let mut manifests = Vec::new();
    for (name, entry) in [
        ("ref", write_label(dir.path(), "ref", &reference, None)),
        ("sur", write_label(dir.path(), "sur", &surrogate, None)),
        ("test", write_label(dir.path(), "test", &test, Some((&logits, truth)))),
    ] {
        let path = dir.path().join(format!("{name}.json"));
        DatasetManifest::new(name, vec![entry], dir.path()).save(&path).unwrap();
        manifests.push(DatasetManifest::load(&path).unwrap());
    }
    let labels = experiment::collect_label_traces(&manifests[0], &manifests[1], &manifests[2]).unwrap();
    let config = RunConfig { n_perm: 500, seed: 3, ..RunConfig::default() };

    let rq1 = experiment::rq1(&labels, &config).unwrap();
    assert_eq!(rq1.len(), 1);
    assert!((0.0..=1.0).contains(&rq1[0].jsd_standardized));
    let rq2 = experiment::rq2(&labels, &config).unwrap();
    assert!(rq2[0].result.rho > 0.7);
    assert_eq!(rq2, experiment::rq2(&labels, &config).unwrap());
    let rq3 = experiment::rq3_accuracy(&labels, &config).unwrap();
    assert_eq!(rq3.len(), 2);
    let overall = 1.0 - 27.0 / 80.0;
    assert!(rq3.iter().all(|r| (r.overall_accuracy - overall).abs() < 1e-12 && r.curve.ks.len() == 80));
}
