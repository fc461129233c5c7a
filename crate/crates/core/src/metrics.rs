//! Confusion matrices and per-class / global pixel accuracy.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[i * L + j]` = pixels of true class `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let classes = rows.len();
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::Dimension("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix { classes, counts: rows.concat() })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.counts[truth * self.classes..(truth + 1) * self.classes].iter().sum()
    }

    /// Adds one batch. Ground-truth `void_label` pixels are skipped.
    pub fn accumulate(&mut self, predictions: &[u8], labels: &[u8], void_label: u8) -> Result<()> {
        if predictions.len() != labels.len() {
            return Err(Error::Dimension(format!("{} predictions for {} labels", predictions.len(), labels.len())));
        }
        for (&p, &y) in predictions.iter().zip(labels) {
            if y == void_label {
                continue;
            }
            let (p, y) = (p as usize, y as usize);
            if p >= self.classes || y >= self.classes {
                return Err(Error::Data(format!("class id {} outside [0, {})", p.max(y), self.classes)));
            }
            self.counts[y * self.classes + p] += 1;
        }
        Ok(())
    }

    /// Elementwise sum, for combining per-thread partial matrices.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Dimension(format!("merging {}-class into {}-class matrix", other.classes, self.classes)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Accuracies in percent. `per_class_breakdown[l]` is `None` for classes
/// without ground-truth pixels, which are left out of `per_class`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_class: f64,
    pub global: f64,
    pub per_class_breakdown: Vec<Option<f64>>,
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Data("confusion matrix has no counted pixels".into()));
    }
    let breakdown: Vec<Option<f64>> = (0..cm.classes())
        .map(|i| {
            let row = cm.row_sum(i);
            (row > 0).then(|| 100.0 * cm.get(i, i) as f64 / row as f64)
        })
        .collect();
    let scored: Vec<f64> = breakdown.iter().flatten().copied().collect();
    let per_class = scored.iter().sum::<f64>() / scored.len() as f64;
    let trace: u64 = (0..cm.classes()).map(|i| cm.get(i, i)).sum();
    Ok(Metrics { per_class, global: 100.0 * trace as f64 / total as f64, per_class_breakdown: breakdown })
}

fn fmt_pct(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.2}"),
        None => "n/a".into(),
    }
}

impl Metrics {
    /// One row per class followed by `per-class` and `global` rows.
    pub fn to_csv_rows(&self, class_names: &[String]) -> String {
        let mut out = String::from("class,accuracy\n");
        for (name, acc) in class_names.iter().zip(&self.per_class_breakdown) {
            let _ = writeln!(out, "{name},{}", fmt_pct(*acc));
        }
        let _ = writeln!(out, "per-class,{:.2}", self.per_class);
        let _ = writeln!(out, "global,{:.2}", self.global);
        out
    }

    /// Header of the wide layout: one column per class, then the summaries.
    pub fn table_header(class_names: &[String]) -> String {
        let mut cols: Vec<String> = class_names.to_vec();
        cols.push("per-class".into());
        cols.push("global".into());
        cols.join(",")
    }

    pub fn table_row(&self) -> String {
        let mut cols: Vec<String> = self.per_class_breakdown.iter().map(|v| fmt_pct(*v)).collect();
        cols.push(format!("{:.2}", self.per_class));
        cols.push(format!("{:.2}", self.global));
        cols.join(",")
    }
}
