//! Metrics, paired significance tests, homogeneous model grouping and
//! permutation feature importance.

mod groups;
mod importance;
mod significance;

pub use groups::{group_models, GroupEntry, HomogeneousGroups, ModelOutcome};
pub use importance::{permutation_importance, ImportanceReport};
pub use significance::{mcnemar, mcnemar_exact, stuart_maxwell, SignificanceResult, TestName};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Accuracy, macro precision/recall/F1 and the confusion matrix of one model
/// on one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub per_class: Vec<ClassMetrics>,
    /// confusion_matrix[gold][pred]
    pub confusion_matrix: Vec<Vec<usize>>,
    pub n: usize,
    pub class_set: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Exact-match accuracy plus per-class precision/recall/F1 with the
/// 0-convention for empty denominators; macro scores are unweighted means
/// over the full class set.
pub fn compute_metrics(gold: &[usize], pred: &[usize], class_set: &[String]) -> Result<EvaluationReport> {
    if gold.is_empty() || gold.len() != pred.len() {
        return Err(Error::Data(format!(
            "gold and predictions must be non-empty and aligned ({} vs {})",
            gold.len(),
            pred.len()
        )));
    }
    let k = class_set.len();
    if let Some(&bad) = gold.iter().chain(pred).find(|&&label| label >= k) {
        return Err(Error::Data(format!(
            "label index {bad} outside the {k}-class set"
        )));
    }
    let n = gold.len();
    let mut confusion = vec![vec![0usize; k]; k];
    for (&g, &p) in gold.iter().zip(pred) {
        confusion[g][p] += 1;
    }
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let tp = confusion[c][c];
        let pred_c: usize = (0..k).map(|g| confusion[g][c]).sum();
        let gold_c: usize = confusion[c].iter().sum();
        let precision = if pred_c == 0 { 0.0 } else { tp as f64 / pred_c as f64 };
        let recall = if gold_c == 0 { 0.0 } else { tp as f64 / gold_c as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics {
            class: class_set[c].clone(),
            precision,
            recall,
            f1,
        });
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let macro_of = |f: fn(&ClassMetrics) -> f64| -> f64 {
        per_class.iter().map(f).sum::<f64>() / k as f64
    };
    Ok(EvaluationReport {
        accuracy: correct as f64 / n as f64,
        macro_f1: macro_of(|m| m.f1),
        macro_precision: macro_of(|m| m.precision),
        macro_recall: macro_of(|m| m.recall),
        per_class,
        confusion_matrix: confusion,
        n,
        class_set: class_set.to_vec(),
    })
}

/// Two models' predictions paired with the gold labels of one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedPredictions {
    pub gold: Vec<usize>,
    pub pred_a: Vec<usize>,
    pub pred_b: Vec<usize>,
    pub n_classes: usize,
}

impl PairedPredictions {
    pub fn new(
        gold: Vec<usize>,
        pred_a: Vec<usize>,
        pred_b: Vec<usize>,
        n_classes: usize,
    ) -> Result<PairedPredictions> {
        if gold.is_empty() || gold.len() != pred_a.len() || gold.len() != pred_b.len() {
            return Err(Error::Data("paired predictions must be non-empty and aligned".into()));
        }
        if gold
            .iter()
            .chain(&pred_a)
            .chain(&pred_b)
            .any(|&label| label >= n_classes)
        {
            return Err(Error::Data("label index outside the class set".into()));
        }
        Ok(PairedPredictions {
            gold,
            pred_a,
            pred_b,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.gold.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gold.is_empty()
    }
}
