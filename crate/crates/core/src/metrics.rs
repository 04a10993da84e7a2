//! Losses for the three task types, error rates, Macro-F1 and the soft
//! size of layered networks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{HeadKind, HighwayLayer, TunnelLayer};
use crate::numeric::Matrix;

/// Floor applied to probabilities inside logarithms.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    BinaryCrossEntropy,
    CategoricalCrossEntropy,
    MultilabelBinaryCrossEntropy,
}

impl LossKind {
    pub fn head(self) -> HeadKind {
        match self {
            LossKind::BinaryCrossEntropy => HeadKind::BinarySigmoid,
            LossKind::CategoricalCrossEntropy => HeadKind::Softmax,
            LossKind::MultilabelBinaryCrossEntropy => HeadKind::MultilabelSigmoid,
        }
    }
}

fn ln_floor(p: f64) -> f64 {
    p.max(PROBABILITY_FLOOR).ln()
}

/// Loss of one instance and its gradient w.r.t. the logits, which is
/// `p - r` for every head/loss pairing.
pub fn loss_and_grad(kind: LossKind, probabilities: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if probabilities.len() != target.len() {
        return Err(Error::Config(format!(
            "{} probabilities for {} targets",
            probabilities.len(),
            target.len()
        )));
    }
    if let Some(t) = target.iter().find(|&&t| t != 0.0 && t != 1.0) {
        return Err(Error::Data(format!("target value {t} is not 0 or 1")));
    }
    let loss = match kind {
        LossKind::BinaryCrossEntropy | LossKind::MultilabelBinaryCrossEntropy => probabilities
            .iter()
            .zip(target)
            .map(|(&p, &r)| -(r * ln_floor(p) + (1.0 - r) * ln_floor(1.0 - p)))
            .sum(),
        LossKind::CategoricalCrossEntropy => probabilities
            .iter()
            .zip(target)
            .filter(|(_, &r)| r == 1.0)
            .map(|(&p, _)| -ln_floor(p))
            .sum(),
    };
    let grad = probabilities.iter().zip(target).map(|(p, r)| p - r).collect();
    Ok((loss, grad))
}

/// Row-wise loss over a batch: mean loss and the `B x C` logit gradient
/// (not divided by the batch size).
pub fn batch_loss_and_grad(kind: LossKind, probabilities: &Matrix, targets: &Matrix) -> Result<(f64, Matrix)> {
    if probabilities.shape() != targets.shape() {
        return Err(Error::Config("prediction and target shapes differ".into()));
    }
    let mut grad = Matrix::zeros(targets.rows(), targets.cols());
    let mut total = 0.0;
    for r in 0..targets.rows() {
        let (l, g) = loss_and_grad(kind, probabilities.row(r), targets.row(r))?;
        total += l;
        grad.row_mut(r).copy_from_slice(&g);
    }
    Ok((total / targets.rows().max(1) as f64, grad))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Errors made on one instance: 0/1 for binary and categorical, the number
/// of wrong labels for multilabel.
pub fn instance_errors(kind: LossKind, p: &[f64], r: &[f64]) -> f64 {
    match kind {
        LossKind::BinaryCrossEntropy => {
            let predicted = if p[0] >= 0.5 { 1.0 } else { 0.0 };
            (predicted != r[0]) as u8 as f64
        }
        LossKind::CategoricalCrossEntropy => (r[argmax(p)] != 1.0) as u8 as f64,
        LossKind::MultilabelBinaryCrossEntropy => {
            p.iter().zip(r).filter(|(&pi, &ri)| (pi >= 0.5) != (ri == 1.0)).count() as f64
        }
    }
}

/// Mean per-instance error count. For multilabel this may exceed 1.
pub fn error_rate(kind: LossKind, predictions: &Matrix, targets: &Matrix) -> f64 {
    if targets.rows() == 0 {
        return 0.0;
    }
    let total: f64 = (0..targets.rows())
        .map(|i| instance_errors(kind, predictions.row(i), targets.row(i)))
        .sum();
    total / targets.rows() as f64
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_positive: Vec<u64>,
    pub false_positive: Vec<u64>,
    pub false_negative: Vec<u64>,
}

impl ConfusionCounts {
    pub fn new(labels: usize) -> Self {
        ConfusionCounts {
            true_positive: vec![0; labels],
            false_positive: vec![0; labels],
            false_negative: vec![0; labels],
        }
    }

    /// Thresholds `predictions` at 0.5 against 0/1 `targets`.
    pub fn from_predictions(predictions: &Matrix, targets: &Matrix) -> Self {
        let mut c = ConfusionCounts::new(targets.cols());
        for i in 0..targets.rows() {
            for (k, (&p, &r)) in predictions.row(i).iter().zip(targets.row(i)).enumerate() {
                match (p >= 0.5, r == 1.0) {
                    (true, true) => c.true_positive[k] += 1,
                    (true, false) => c.false_positive[k] += 1,
                    (false, true) => c.false_negative[k] += 1,
                    (false, false) => {}
                }
            }
        }
        c
    }

    /// Additive merge of counts from another shard.
    pub fn merge(&mut self, other: &ConfusionCounts) {
        for (a, b) in self.true_positive.iter_mut().zip(&other.true_positive) {
            *a += b;
        }
        for (a, b) in self.false_positive.iter_mut().zip(&other.false_positive) {
            *a += b;
        }
        for (a, b) in self.false_negative.iter_mut().zip(&other.false_negative) {
            *a += b;
        }
    }

    pub fn labels(&self) -> usize {
        self.true_positive.len()
    }
}

/// Unweighted mean over labels of `2TP / (2TP + FP + FN)`; a label with a
/// zero denominator scores 0.
pub fn macro_f1(counts: &ConfusionCounts) -> f64 {
    let n = counts.labels();
    if n == 0 {
        return 0.0;
    }
    let total: f64 = (0..n)
        .map(|k| {
            let tp = counts.true_positive[k] as f64;
            let denom = 2.0 * tp + counts.false_positive[k] as f64 + counts.false_negative[k] as f64;
            if denom == 0.0 {
                0.0
            } else {
                2.0 * tp / denom
            }
        })
        .sum();
    total / n as f64
}

/// Per-layer gate sums and their total.
pub fn tunnel_soft_sizes(layers: &[TunnelLayer]) -> (Vec<f64>, f64) {
    let per_layer: Vec<f64> = layers.iter().map(|l| l.gates.iter().sum()).collect();
    let total = per_layer.iter().sum();
    (per_layer, total)
}

/// Per-layer sum over units of the dataset-mean gate activation.
/// `hidden_input` is the batch entering the first highway layer.
pub fn highway_soft_sizes(layers: &[HighwayLayer], hidden_input: &Matrix) -> Result<(Vec<f64>, f64)> {
    if hidden_input.rows() == 0 {
        return Err(Error::Usage("highway soft size needs a non-empty dataset".into()));
    }
    let n = hidden_input.rows() as f64;
    let mut per_layer = Vec::with_capacity(layers.len());
    let mut x = hidden_input.clone();
    for layer in layers {
        let gate = layer.gate_activations(&x)?;
        per_layer.push(gate.as_slice().iter().sum::<f64>() / n);
        x = layer.forward(&x)?.0;
    }
    let total = per_layer.iter().sum();
    Ok((per_layer, total))
}
