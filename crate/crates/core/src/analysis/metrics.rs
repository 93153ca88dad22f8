use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::engine::predict;
use crate::nn::graph::BlockGraph;
use crate::nn::tensor::{Scalar, Tensor};
use crate::nn::weights::ModelWeights;

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    (0..logits.batch())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

fn check_batch<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::usage("accuracy of an empty batch"));
    }
    if logits.dims().len() != 2 || logits.batch() != labels.len() {
        return Err(Error::structure(format!(
            "logits {:?} do not match {} labels",
            logits.dims(),
            labels.len()
        )));
    }
    Ok(())
}

/// Fraction of rows whose argmax equals the label.
pub fn top1_accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    check_batch(logits, labels)?;
    let hits = argmax_rows(logits).iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Accuracy restricted to each class; `None` for classes absent from `labels`.
pub fn per_class_accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize], classes: usize) -> Result<Vec<Option<f64>>> {
    check_batch(logits, labels)?;
    let mut hits = vec![0usize; classes];
    let mut seen = vec![0usize; classes];
    for (p, &y) in argmax_rows(logits).into_iter().zip(labels) {
        if y >= classes {
            return Err(Error::usage(format!("label {y} out of range for {classes} classes")));
        }
        seen[y] += 1;
        hits[y] += usize::from(p == y);
    }
    Ok(hits
        .iter()
        .zip(&seen)
        .map(|(&h, &s)| (s > 0).then(|| h as f64 / s as f64))
        .collect())
}

/// Accuracy a client would see on a test set with its own label mix: the
/// per-class accuracies weighted by the client's label histogram. Classes
/// missing from the test set are left out and the weights renormalized.
pub fn client_accuracy(per_class: &[Option<f64>], histogram: &[usize]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (acc, &n) in per_class.iter().zip(histogram) {
        if let Some(a) = acc {
            num += a * n as f64;
            den += n as f64;
        }
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Population standard deviation of per-client accuracies.
pub fn fairness_std(accuracies: &[f64]) -> Result<f64> {
    if accuracies.len() < 2 {
        return Err(Error::usage("fairness needs at least two clients"));
    }
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    Ok((accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt())
}

/// Global evaluation of one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub round: usize,
    pub top1: f64,
    pub per_class: Vec<Option<f64>>,
    pub client_accuracy: Vec<f64>,
    /// `None` with fewer than two clients.
    pub fairness: Option<f64>,
}

/// Logits for a whole dataset, computed in chunks.
pub fn dataset_logits<T: Scalar>(
    graph: &BlockGraph,
    weights: &ModelWeights<T>,
    data: &Dataset<T>,
) -> Result<Tensor<T>> {
    const CHUNK: usize = 512;
    let parts = (0..data.len())
        .step_by(CHUNK)
        .map(|start| {
            let idx: Vec<usize> = (start..(start + CHUNK).min(data.len())).collect();
            predict(graph, weights, &data.batch(&idx)?.0)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_rows(&parts)
}

/// Top-1 on `test` plus per-client accuracies for the given label histograms.
pub fn evaluate<T: Scalar>(
    graph: &BlockGraph,
    weights: &ModelWeights<T>,
    test: &Dataset<T>,
    client_histograms: &[Vec<usize>],
    round: usize,
) -> Result<EvalReport> {
    let logits = dataset_logits(graph, weights, test)?;
    let per_class = per_class_accuracy(&logits, &test.labels, test.classes)?;
    let client_accuracy: Vec<f64> = client_histograms
        .iter()
        .map(|h| client_accuracy(&per_class, h))
        .collect();
    Ok(EvalReport {
        round,
        top1: top1_accuracy(&logits, &test.labels)?,
        fairness: fairness_std(&client_accuracy).ok(),
        per_class,
        client_accuracy,
    })
}
