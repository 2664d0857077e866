//! Accuracy, the 10-class confusion matrix, and CSV export of training curves.

use std::fmt::Write as _;
use std::io::{self, Write};

use thiserror::Error;

use crate::model::NUM_CLASSES;
use crate::training::EpochMetrics;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("{predicted} predictions for {truth} labels")]
    LengthMismatch { predicted: usize, truth: usize },
    #[error("no samples to evaluate")]
    EmptyInput,
    #[error("label {0} is outside 0-9")]
    InvalidLabel(u8),
}

fn check_lengths(predicted: &[u8], truth: &[u8]) -> Result<(), MetricsError> {
    if predicted.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            predicted: predicted.len(),
            truth: truth.len(),
        });
    }
    if truth.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok(())
}

/// Fraction of positions where `predicted` equals `truth`.
pub fn accuracy(predicted: &[u8], truth: &[u8]) -> Result<f64, MetricsError> {
    check_lengths(predicted, truth)?;
    let correct = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / truth.len() as f64)
}

/// Counts indexed `[predicted][true]`: rows are predictions, columns the
/// true digit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

pub fn confusion_matrix(predicted: &[u8], truth: &[u8]) -> Result<ConfusionMatrix, MetricsError> {
    check_lengths(predicted, truth)?;
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in predicted.iter().zip(truth) {
        for label in [p, t] {
            if label as usize >= NUM_CLASSES {
                return Err(MetricsError::InvalidLabel(label));
            }
        }
        cm.counts[p as usize][t as usize] += 1;
    }
    Ok(cm)
}

impl ConfusionMatrix {
    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Per-class count of true labels.
    pub fn column_sums(&self) -> [u64; NUM_CLASSES] {
        std::array::from_fn(|t| self.counts.iter().map(|row| row[t]).sum())
    }

    /// Per-class count of predictions.
    pub fn row_sums(&self) -> [u64; NUM_CLASSES] {
        std::array::from_fn(|p| self.counts[p].iter().sum())
    }

    pub fn accuracy(&self) -> Result<f64, MetricsError> {
        match self.total() {
            0 => Err(MetricsError::EmptyInput),
            total => Ok(self.trace() as f64 / total as f64),
        }
    }

    /// CSV with a digit header row and column; the corner cell
    /// `predicted\true` records the orientation.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("predicted\\true");
        for t in 0..NUM_CLASSES {
            let _ = write!(s, ",{t}");
        }
        s.push('\n');
        for (p, row) in self.counts.iter().enumerate() {
            let _ = write!(s, "{p}");
            for c in row {
                let _ = write!(s, ",{c}");
            }
            s.push('\n');
        }
        s
    }
}

/// Two-decimal percentage, e.g. `99.15%`.
pub fn format_percent(fraction: f64) -> String {
    format!("{:.2}%", fraction * 100.0)
}

pub const METRICS_HEADER: &str = "epoch,train_loss,train_accuracy,val_loss,val_accuracy";

/// Losses use shortest round-trip decimal formatting, accuracies 6 decimals.
pub fn metrics_csv_row(m: &EpochMetrics) -> String {
    format!(
        "{},{},{:.6},{},{:.6}",
        m.epoch, m.train_loss, m.train_accuracy, m.val_loss, m.val_accuracy
    )
}

pub fn write_metrics_csv(history: &[EpochMetrics], mut out: impl Write) -> io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for m in history {
        writeln!(out, "{}", metrics_csv_row(m))?;
    }
    Ok(())
}
