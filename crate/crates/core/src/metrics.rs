//! Confusion matrices and accuracy metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::components::Prediction;
use crate::data::WindowedSample;
use crate::{CoreError, Result};

/// Anything that labels windows.
pub trait Predictor: Sync {
    fn predict(&self, windows: &[&[f64]]) -> Result<Vec<Prediction>>;
}

/// Rows are true activities, columns predicted activities.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn column_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    /// Element-wise sum, for pooling several evaluations.
    pub fn add(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(CoreError::Label("confusion matrices of different sizes".into()));
        }
        for (a, b) in self.counts.iter_mut().flatten().zip(other.counts.iter().flatten()) {
            *a += b;
        }
        Ok(())
    }
}

pub fn confusion_matrix(preds: &[usize], truths: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != truths.len() {
        return Err(CoreError::Data(format!(
            "{} predictions for {} labels",
            preds.len(),
            truths.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(classes);
    for (&p, &t) in preds.iter().zip(truths) {
        if p >= classes || t >= classes {
            return Err(CoreError::Label(format!("label pair ({t}, {p}) outside 0..{classes}")));
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
}

impl Metrics {
    /// Precision and recall of a class with no predictions or no support are 0.
    pub fn from_confusion(confusion: ConfusionMatrix) -> Self {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let per_class = (0..confusion.classes())
            .map(|c| ClassMetrics {
                precision: ratio(confusion.counts[c][c], confusion.column_sum(c)),
                recall: ratio(confusion.counts[c][c], confusion.row_sum(c)),
                support: confusion.row_sum(c),
            })
            .collect();
        Self {
            accuracy: ratio(confusion.trace(), confusion.total()),
            per_class,
            confusion,
        }
    }
}

const EVAL_CHUNK: usize = 256;

/// Labels `windows` with `model` and scores against their ground truth.
pub fn evaluate(model: &dyn Predictor, windows: &[WindowedSample], classes: usize) -> Result<Metrics> {
    if windows.is_empty() {
        return Err(CoreError::Data("no windows to evaluate".into()));
    }
    let truths = windows
        .iter()
        .map(|w| w.activity.ok_or_else(|| CoreError::Data("evaluation window lacks a label".into())))
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<&[f64]> = windows.iter().map(|w| w.values.as_slice()).collect();
    // Chunks are independent and collected in order, so the thread count never changes the result.
    let chunks = values
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| model.predict(chunk))
        .collect::<Result<Vec<_>>>()?;
    let preds: Vec<usize> = chunks.into_iter().flatten().map(|p| p.label).collect();
    Ok(Metrics::from_confusion(confusion_matrix(&preds, &truths, classes)?))
}
