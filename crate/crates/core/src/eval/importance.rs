//! Permutation feature importance over engineered columns.

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::indexed_substream;
use crate::selection::EngineeredMatrix;

/// Per-feature weight: mean score drop over repeated shuffles of that
/// column. Positive weight = the score drops when the feature is destroyed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub base_score: f64,
    pub repeats: usize,
    /// (feature name, weight) in column order.
    pub weights: Vec<(String, f64)>,
}

impl ImportanceReport {
    pub fn sorted_desc(&self) -> Vec<(String, f64)> {
        let mut sorted = self.weights.clone();
        sorted.sort_by(|a, b| b.1.total_cmp(&a.1));
        sorted
    }

    /// Two-tailed text table: strongest positive weights, an ellipsis row,
    /// strongest negative tail.
    pub fn format_two_tailed(&self, tail: usize) -> String {
        let sorted = self.sorted_desc();
        let mut out = String::from("weight   feature\n");
        let n = sorted.len();
        if n <= 2 * tail {
            for (name, w) in &sorted {
                out.push_str(&format!("{w:<9.3}{name}\n"));
            }
            return out;
        }
        for (name, w) in &sorted[..tail] {
            out.push_str(&format!("{w:<9.3}{name}\n"));
        }
        out.push_str("...      ...\n");
        for (name, w) in &sorted[n - tail..] {
            out.push_str(&format!("{w:<9.3}{name}\n"));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("feature,weight\n");
        for (name, w) in self.sorted_desc() {
            let field = if name.contains(',') || name.contains('"') {
                format!("\"{}\"", name.replace('"', "\"\""))
            } else {
                name
            };
            out.push_str(&format!("{field},{w}\n"));
        }
        out
    }
}

/// For each column: shuffle it within the test set `repeats` times, score
/// the evaluator on the perturbed matrix, and average `base - perturbed`.
/// Column shuffles draw from per-column seeded streams, so results do not
/// depend on evaluation order.
pub fn permutation_importance<F>(
    mut evaluator: F,
    x: &EngineeredMatrix,
    repeats: usize,
    seed: u64,
) -> Result<ImportanceReport>
where
    F: FnMut(&EngineeredMatrix) -> Result<f64>,
{
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    if x.n_rows() == 0 {
        return Err(Error::Data("cannot assess importance on an empty matrix".into()));
    }
    let base_score = evaluator(x)?;
    let mut weights = Vec::with_capacity(x.dim());
    let mut scratch = x.clone();
    for col in 0..x.dim() {
        let mut rng = indexed_substream(seed, "importance.column", col as u64);
        let original: Vec<f64> = x.data.column(col).to_vec();
        let mut drop_sum = 0.0;
        for _ in 0..repeats {
            let mut shuffled = original.clone();
            shuffled.shuffle(&mut rng);
            set_column(&mut scratch.data, col, &shuffled);
            drop_sum += base_score - evaluator(&scratch)?;
        }
        set_column(&mut scratch.data, col, &original);
        weights.push((x.columns[col].qualified(), drop_sum / repeats as f64));
    }
    Ok(ImportanceReport {
        base_score,
        repeats,
        weights,
    })
}

fn set_column(data: &mut Array2<f64>, col: usize, values: &[f64]) {
    for (i, &v) in values.iter().enumerate() {
        data[[i, col]] = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selection::{EngineeredChannel, FeatureName};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// y = indicator planted in column 0; other columns are noise.
    fn planted_matrix(n: usize, cols: usize, seed: u64) -> (EngineeredMatrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let mut data = Array2::zeros((n, cols));
        for i in 0..n {
            data[[i, 0]] = y[i] as f64;
            for j in 1..cols {
                data[[i, j]] = rng.random::<f64>();
            }
        }
        let columns = (0..cols)
            .map(|j| FeatureName {
                channel: EngineeredChannel::Sngram,
                name: format!("f{j}"),
            })
            .collect();
        (EngineeredMatrix::new(data, columns).unwrap(), y)
    }

    /// Fixed rule standing in for a trained model: predict by column 0.
    fn rule_accuracy(x: &EngineeredMatrix, y: &[usize]) -> f64 {
        let correct = (0..x.n_rows())
            .filter(|&i| ((x.data[[i, 0]] > 0.5) as usize) == y[i])
            .count();
        correct as f64 / y.len() as f64
    }

    #[test]
    fn ignored_column_gets_near_zero_weight() {
        let (x, y) = planted_matrix(60, 3, 5);
        let report =
            permutation_importance(|m| Ok(rule_accuracy(m, &y)), &x, 5, 42).unwrap();
        assert_eq!(report.base_score, 1.0);
        // Columns 1 and 2 are ignored by the rule entirely.
        assert_eq!(report.weights[1].1, 0.0);
        assert_eq!(report.weights[2].1, 0.0);
    }

    #[test]
    fn planted_column_weight_is_score_minus_chance() {
        let (x, y) = planted_matrix(200, 4, 6);
        let report =
            permutation_importance(|m| Ok(rule_accuracy(m, &y)), &x, 20, 7).unwrap();
        // Shuffling the indicator leaves ~half the rows matching: expected
        // perturbed accuracy 0.5, so weight ~ 1.0 - 0.5.
        let w0 = report.weights[0].1;
        assert!((w0 - 0.5).abs() < 0.05, "weight {w0}");
        let top = report.sorted_desc()[0].0.clone();
        assert_eq!(top, "sngram:f0");
    }

    #[test]
    fn importance_is_reproducible_for_a_seed() {
        let (x, y) = planted_matrix(40, 3, 9);
        let a = permutation_importance(|m| Ok(rule_accuracy(m, &y)), &x, 3, 11).unwrap();
        let b = permutation_importance(|m| Ok(rule_accuracy(m, &y)), &x, 3, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn variance_shrinks_with_more_repeats() {
        // Estimate the planted column's weight across seeds; the spread
        // over seeds must shrink when repeats grow from 2 to 50.
        let (x, y) = planted_matrix(30, 2, 13);
        let weight_with = |repeats: usize, seed: u64| {
            permutation_importance(|m| Ok(rule_accuracy(m, &y)), &x, repeats, seed)
                .unwrap()
                .weights[0]
                .1
        };
        let spread = |repeats: usize| {
            let samples: Vec<f64> = (0..12).map(|s| weight_with(repeats, s)).collect();
            let mean = samples.iter().sum::<f64>() / samples.len() as f64;
            samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / samples.len() as f64
        };
        let coarse = spread(2);
        let fine = spread(50);
        assert!(
            fine < coarse,
            "variance did not shrink: repeats=2 gives {coarse}, repeats=50 gives {fine}"
        );
    }

    #[test]
    fn two_tailed_layout() {
        let weights = vec![
            ("a".to_string(), 3.0),
            ("b".to_string(), 2.0),
            ("c".to_string(), 0.1),
            ("d".to_string(), -1.0),
            ("e".to_string(), -2.5),
        ];
        let report = ImportanceReport {
            base_score: 0.9,
            repeats: 5,
            weights,
        };
        let table = report.format_two_tailed(2);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0], "weight   feature");
        assert!(lines[1].ends_with('a'));
        assert!(lines[2].ends_with('b'));
        assert!(lines[3].starts_with("..."));
        assert!(lines[4].ends_with('d'));
        assert!(lines[5].ends_with('e'));
    }
}
