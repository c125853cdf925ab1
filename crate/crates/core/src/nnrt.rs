//! Minimal dense feed-forward inference runtime.
//!
//! Models are stacks of `dense`, `relu`, `dropout` and `softmax` layers read
//! from JSON. The forward pass records the penultimate activation (the input
//! of the last dense layer), which is the activation trace used for LSA.
//! Dropout is identity unless a seed is supplied, in which case it runs in
//! inverted mode with masks fixed by `(seed, layer index, unit index)`.

use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::trace::{Dtype, TraceMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Layer {
    Dense {
        /// `out x in`
        weights: Vec<Vec<f64>>,
        bias: Vec<f64>,
    },
    Relu,
    Dropout {
        rate: f64,
    },
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuralModel {
    input_dim: usize,
    num_classes: usize,
    layers: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub penultimate: Vec<f64>,
    pub predicted: usize,
}

/// Predictions of several forward passes over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPrediction {
    /// `passes x N`
    pub predictions: Vec<Vec<usize>>,
    /// Penultimate activations from pass 0.
    pub penultimate: TraceMatrix,
    /// Logits from pass 0.
    pub logits: TraceMatrix,
}

impl NeuralModel {
    pub fn new(input_dim: usize, num_classes: usize, layers: Vec<Layer>) -> Result<Self> {
        let model = NeuralModel { input_dim, num_classes, layers };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::ModelFormat(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.input_dim == 0 {
            return Err(Error::ModelFormat("input_dim must be >= 1".into()));
        }
        let last_dense = self
            .final_dense_index()
            .ok_or_else(|| Error::ModelFormat("model has no dense layer".into()))?;
        let mut width = self.input_dim;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense { weights, bias } => {
                    let out = weights.len();
                    if out == 0 {
                        return Err(Error::ModelFormat(format!("layer {i}: dense layer with no outputs")));
                    }
                    if bias.len() != out {
                        return Err(Error::ModelFormat(format!(
                            "layer {i}: bias has {} entries for {out} outputs",
                            bias.len()
                        )));
                    }
                    if let Some((r, row)) = weights.iter().enumerate().find(|(_, row)| row.len() != weights[0].len()) {
                        return Err(Error::ModelFormat(format!(
                            "layer {i}: weight row {r} has {} entries, row 0 has {}",
                            row.len(),
                            weights[0].len()
                        )));
                    }
                    if weights.iter().flatten().chain(bias).any(|v| !v.is_finite()) {
                        return Err(Error::ModelFormat(format!("layer {i}: non-finite parameter")));
                    }
                    let fan_in = weights[0].len();
                    if fan_in != width {
                        return Err(Error::Shape(format!("layer {i}: dense expects {fan_in} inputs but receives {width}")));
                    }
                    width = out;
                }
                Layer::Relu => {}
                Layer::Dropout { rate } => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(Error::ModelFormat(format!("layer {i}: dropout rate {rate} outside [0, 1)")));
                    }
                }
                Layer::Softmax => {
                    if i + 1 != self.layers.len() {
                        return Err(Error::ModelFormat(format!("layer {i}: softmax is only allowed as the final layer")));
                    }
                }
            }
            if i > last_dense && !matches!(layer, Layer::Softmax) {
                return Err(Error::ModelFormat(format!(
                    "layer {i}: only softmax may follow the final dense layer"
                )));
            }
        }
        if width != self.num_classes {
            return Err(Error::Shape(format!(
                "final dense layer produces {width} logits, num_classes is {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    fn final_dense_index(&self) -> Option<usize> {
        self.layers.iter().rposition(|l| matches!(l, Layer::Dense { .. }))
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn has_dropout(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::Dropout { rate } if *rate > 0.0))
    }

    /// Width of the activation entering the final dense layer.
    pub fn penultimate_dim(&self) -> usize {
        match &self.layers[self.final_dense_index().expect("validated")] {
            Layer::Dense { weights, .. } => weights[0].len(),
            _ => unreachable!(),
        }
    }

    /// Replaces layer parameters, re-validating the result.
    pub(crate) fn with_layers(&self, layers: Vec<Layer>) -> Result<Self> {
        NeuralModel::new(self.input_dim, self.num_classes, layers)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: NeuralModel =
            serde_json::from_str(text).map_err(|e| Error::ModelFormat(format!("invalid model JSON: {e}")))?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn forward(&self, x: &[f64], dropout_seed: Option<u64>) -> Result<ForwardOutput> {
        if x.len() != self.input_dim {
            return Err(Error::Shape(format!("input has {} values, model expects {}", x.len(), self.input_dim)));
        }
        let last_dense = self.final_dense_index().expect("validated");
        let mut act = x.to_vec();
        let mut penultimate = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense { weights, bias } => {
                    if i == last_dense {
                        penultimate = act.clone();
                    }
                    act = weights
                        .iter()
                        .zip(bias)
                        .map(|(row, b)| row.iter().zip(&act).map(|(w, a)| w * a).sum::<f64>() + b)
                        .collect();
                }
                Layer::Relu => act.iter_mut().for_each(|v| *v = v.max(0.0)),
                Layer::Dropout { rate } => {
                    if let (Some(s), true) = (dropout_seed, *rate > 0.0) {
                        apply_dropout(&mut act, *rate, seed::derive(s, i as u64));
                    }
                }
                // logits are kept; probabilities are derived below
                Layer::Softmax => {}
            }
        }
        let probabilities = softmax(&act);
        let predicted = argmax(&act);
        Ok(ForwardOutput { logits: act, probabilities, penultimate, predicted })
    }

    /// Runs `passes` forward passes over every row. Pass `p` uses dropout
    /// seed `derive(dropout_seed, p)`, shared by all rows of that pass, so a
    /// pass behaves like one stochastic instance of the model.
    pub fn predict_batch(&self, inputs: &TraceMatrix, passes: usize, dropout_seed: Option<u64>) -> Result<BatchPrediction> {
        if passes == 0 {
            return Err(Error::InvalidArgument("passes must be >= 1".into()));
        }
        if inputs.cols() != self.input_dim {
            return Err(Error::Shape(format!(
                "inputs have {} columns, model expects {}",
                inputs.cols(),
                self.input_dim
            )));
        }
        let mut predictions = Vec::with_capacity(passes);
        let mut penultimate = Vec::new();
        let mut logits = Vec::new();
        for p in 0..passes {
            let pass_seed = dropout_seed.map(|s| seed::derive(s, p as u64));
            let outs = (0..inputs.rows())
                .into_par_iter()
                .map(|i| self.forward(inputs.row(i), pass_seed))
                .collect::<Result<Vec<_>>>()?;
            predictions.push(outs.iter().map(|o| o.predicted).collect());
            if p == 0 {
                for o in outs {
                    penultimate.extend(o.penultimate);
                    logits.extend(o.logits);
                }
            }
        }
        Ok(BatchPrediction {
            predictions,
            penultimate: TraceMatrix::with_dtype(inputs.rows(), self.penultimate_dim(), penultimate, Dtype::F32)?,
            logits: TraceMatrix::with_dtype(inputs.rows(), self.num_classes, logits, Dtype::F32)?,
        })
    }
}

pub fn load_model(path: impl AsRef<Path>) -> Result<NeuralModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    NeuralModel::from_json(&text)
}

fn apply_dropout(act: &mut [f64], rate: f64, layer_seed: u64) {
    let mut rng = seed::rng(layer_seed);
    let scale = 1.0 / (1.0 - rate);
    for v in act.iter_mut() {
        let u: f64 = rng.random();
        *v = if u < rate { 0.0 } else { *v * scale };
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(weights: Vec<Vec<f64>>, bias: Vec<f64>) -> Layer {
        Layer::Dense { weights, bias }
    }

    #[test]
    fn loads_two_four_two_net() {
        let json = r#"{"input_dim": 2, "num_classes": 2, "layers": [
            {"kind": "dense", "weights": [[1,0],[0,1],[1,1],[1,-1]], "bias": [0,0,0,0]},
            {"kind": "relu"},
            {"kind": "dense", "weights": [[1,0,0,0],[0,1,0,0]], "bias": [0,0]},
            {"kind": "softmax"}]}"#;
        let m = NeuralModel::from_json(json).unwrap();
        assert_eq!(m.layers().len(), 4);
        assert!(matches!(m.layers()[3], Layer::Softmax));
        assert_eq!(m.penultimate_dim(), 4);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let layers = vec![dense(vec![vec![0.0; 3]; 4], vec![0.0; 4]), dense(vec![vec![0.0; 5]; 2], vec![0.0; 2])];
        assert!(matches!(NeuralModel::new(3, 2, layers), Err(Error::Shape(_))));
    }

    #[test]
    fn format_errors() {
        let ok_dense = || dense(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0]);
        assert!(matches!(
            NeuralModel::new(2, 2, vec![Layer::Dropout { rate: 1.0 }, ok_dense()]),
            Err(Error::ModelFormat(_))
        ));
        assert!(matches!(NeuralModel::new(2, 2, vec![Layer::Softmax, ok_dense()]), Err(Error::ModelFormat(_))));
        assert!(matches!(NeuralModel::new(2, 2, vec![ok_dense(), Layer::Relu]), Err(Error::ModelFormat(_))));
        assert!(matches!(NeuralModel::new(2, 2, vec![Layer::Relu]), Err(Error::ModelFormat(_))));
        assert!(matches!(NeuralModel::from_json(r#"{"input_dim": 2}"#), Err(Error::ModelFormat(_))));
        assert!(matches!(
            NeuralModel::from_json(r#"{"input_dim": 2, "num_classes": 2, "layers": [{"kind": "conv"}]}"#),
            Err(Error::ModelFormat(_))
        ));
        assert!(matches!(
            NeuralModel::new(2, 2, vec![dense(vec![vec![f64::NAN, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0])]),
            Err(Error::ModelFormat(_))
        ));
    }

    #[test]
    fn identity_softmax_tie_goes_to_class_zero() {
        let m = NeuralModel::new(2, 2, vec![dense(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0]), Layer::Softmax])
            .unwrap();
        let out = m.forward(&[0.0, 0.0], None).unwrap();
        assert_eq!(out.logits, vec![0.0, 0.0]);
        assert_eq!(out.probabilities, vec![0.5, 0.5]);
        assert_eq!(out.predicted, 0);
        assert_eq!(out.penultimate, vec![0.0, 0.0]);
        assert!(matches!(m.forward(&[0.0], None), Err(Error::Shape(_))));
    }

    #[test]
    fn relu_clamps_negatives() {
        let id = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let m = NeuralModel::new(2, 2, vec![dense(id.clone(), vec![0.0, 0.0]), Layer::Relu, dense(id, vec![0.0, 0.0])])
            .unwrap();
        assert_eq!(m.forward(&[-1.0, 2.0], None).unwrap().penultimate, vec![0.0, 2.0]);
    }

    #[test]
    fn dropout_fraction_is_binomial() {
        let n = 10_000;
        let act = vec![1.0; n];
        let mut dropped = act.clone();
        apply_dropout(&mut dropped, 0.5, 99);
        let zeros = dropped.iter().filter(|&&v| v == 0.0).count() as f64;
        let sd = (n as f64 * 0.25).sqrt();
        assert!((zeros - n as f64 * 0.5).abs() <= 3.0 * sd, "{zeros}");
        assert!(dropped.iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn softmax_properties() {
        let z = [1.0, -3.0, 2.5, 0.0];
        let p = softmax(&z);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = z.iter().map(|v| v + 100.0).collect();
        for (a, b) in p.iter().zip(softmax(&shifted)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
