//! Homogeneous model grouping: disjoint accuracy-ordered clusters in which
//! no pair of models differs significantly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::significance::paired_test;
use super::PairedPredictions;

/// One model's outcome on the shared test set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelOutcome {
    pub name: String,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub name: String,
    pub accuracy: f64,
    /// 0 = group A, 1 = group B, ...
    pub group: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomogeneousGroups {
    /// Sorted by accuracy descending; each model in exactly one group.
    pub entries: Vec<GroupEntry>,
    pub alpha: f64,
}

pub fn group_letter(group: usize) -> char {
    (b'A' + (group as u8).min(25)) as char
}

impl HomogeneousGroups {
    pub fn group_count(&self) -> usize {
        self.entries.last().map_or(0, |e| e.group + 1)
    }

    /// Fixed-width text table, one letter column per group.
    pub fn format_table(&self) -> String {
        let name_width = self
            .entries
            .iter()
            .map(|e| e.name.len())
            .max()
            .unwrap_or(5)
            .max(5)
            + 2;
        let mut out = format!("{:<name_width$}{:<8}Groups\n", "Model", "Acc");
        for entry in &self.entries {
            let mut cells = vec!["  ".to_string(); self.group_count()];
            cells[entry.group] = format!("{} ", group_letter(entry.group));
            out.push_str(&format!(
                "{:<name_width$}{:<8.2}{}\n",
                entry.name,
                entry.accuracy,
                cells.concat().trim_end()
            ));
        }
        out
    }
}

/// Sort models by accuracy descending and form disjoint groups greedily:
/// open a group at the best unassigned model and extend downward while the
/// candidate is pairwise non-significant (p >= alpha) against every current
/// member; then close the group and repeat.
pub fn group_models(
    gold: &[usize],
    n_classes: usize,
    models: &[ModelOutcome],
    alpha: f64,
) -> Result<HomogeneousGroups> {
    if models.is_empty() {
        return Err(Error::Data("no models to group".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must be in (0, 1), got {alpha}")));
    }
    for model in models {
        if model.predictions.len() != gold.len() {
            return Err(Error::Data(format!(
                "model {:?} was evaluated on {} documents, gold has {}",
                model.name,
                model.predictions.len(),
                gold.len()
            )));
        }
    }

    let mut order: Vec<usize> = (0..models.len()).collect();
    order.sort_by(|&a, &b| {
        models[b]
            .accuracy
            .total_cmp(&models[a].accuracy)
            .then(a.cmp(&b))
    });

    let mut entries: Vec<GroupEntry> = Vec::with_capacity(models.len());
    let mut group = 0usize;
    let mut members: Vec<usize> = Vec::new();
    for &idx in &order {
        let mut joins = true;
        for &member in &members {
            let paired = PairedPredictions::new(
                gold.to_vec(),
                models[member].predictions.clone(),
                models[idx].predictions.clone(),
                n_classes,
            )?;
            if paired_test(&paired)?.p_value < alpha {
                joins = false;
                break;
            }
        }
        if !joins {
            group += 1;
            members.clear();
        }
        members.push(idx);
        entries.push(GroupEntry {
            name: models[idx].name.clone(),
            accuracy: models[idx].accuracy,
            group,
        });
    }
    Ok(HomogeneousGroups { entries, alpha })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn accuracy(gold: &[usize], pred: &[usize]) -> f64 {
        gold.iter().zip(pred).filter(|(g, p)| g == p).count() as f64 / gold.len() as f64
    }

    fn outcome(name: &str, gold: &[usize], pred: Vec<usize>) -> ModelOutcome {
        ModelOutcome {
            name: name.into(),
            accuracy: accuracy(gold, &pred),
            predictions: pred,
        }
    }

    #[test]
    fn identical_models_form_one_group() {
        let gold: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let pred: Vec<usize> = gold.iter().map(|&g| 1 - g).collect();
        let models = vec![
            outcome("m1", &gold, pred.clone()),
            outcome("m2", &gold, pred.clone()),
            outcome("m3", &gold, pred),
        ];
        let groups = group_models(&gold, 2, &models, 0.05).unwrap();
        assert_eq!(groups.group_count(), 1);
        assert!(groups.entries.iter().all(|e| e.group == 0));
    }

    #[test]
    fn disjoint_errors_split_into_two_groups() {
        // Model A correct everywhere; model B wrong on 60 of 120 items:
        // b = 60, c = 0 gives a tiny p-value.
        let gold: Vec<usize> = (0..120).map(|i| i % 2).collect();
        let pred_a = gold.clone();
        let pred_b: Vec<usize> = gold
            .iter()
            .enumerate()
            .map(|(i, &g)| if i % 2 == 0 { 1 - g } else { g })
            .collect();
        let models = vec![
            outcome("strong", &gold, pred_a),
            outcome("weak", &gold, pred_b),
        ];
        let groups = group_models(&gold, 2, &models, 0.05).unwrap();
        assert_eq!(groups.group_count(), 2);
        assert_eq!(groups.entries[0].name, "strong");
        assert_eq!(groups.entries[0].group, 0);
        assert_eq!(groups.entries[1].group, 1);
    }

    #[test]
    fn within_group_pairs_are_non_significant() {
        // Three models with forced structure: m1 == m2, m3 far away.
        let gold: Vec<usize> = (0..200).map(|i| i % 2).collect();
        let pred1 = gold.clone();
        let mut pred2 = gold.clone();
        pred2[0] = 1 - pred2[0]; // nearly identical
        let pred3: Vec<usize> = gold
            .iter()
            .enumerate()
            .map(|(i, &g)| if i % 4 == 0 { 1 - g } else { g })
            .collect();
        let models = vec![
            outcome("m1", &gold, pred1),
            outcome("m2", &gold, pred2),
            outcome("m3", &gold, pred3),
        ];
        let groups = group_models(&gold, 2, &models, 0.05).unwrap();
        assert_eq!(groups.entries[0].group, 0);
        assert_eq!(groups.entries[1].group, 0);
        assert_eq!(groups.entries[2].group, 1);

        // Assert the within-group property directly.
        for a in &groups.entries {
            for b in &groups.entries {
                if a.name < b.name && a.group == b.group {
                    let pa = &models.iter().find(|m| m.name == a.name).unwrap().predictions;
                    let pb = &models.iter().find(|m| m.name == b.name).unwrap().predictions;
                    let paired =
                        PairedPredictions::new(gold.clone(), pa.clone(), pb.clone(), 2).unwrap();
                    assert!(paired_test(&paired).unwrap().p_value >= 0.05);
                }
            }
        }
    }

    #[test]
    fn output_is_a_partition_sorted_by_accuracy() {
        let gold: Vec<usize> = (0..60).map(|i| i % 2).collect();
        let preds: Vec<Vec<usize>> = (0..4)
            .map(|m| {
                gold.iter()
                    .enumerate()
                    .map(|(i, &g)| if i % (m + 2) == 0 { 1 - g } else { g })
                    .collect()
            })
            .collect();
        let models: Vec<ModelOutcome> = preds
            .into_iter()
            .enumerate()
            .map(|(i, p)| outcome(&format!("m{i}"), &gold, p))
            .collect();
        let groups = group_models(&gold, 2, &models, 0.05).unwrap();
        assert_eq!(groups.entries.len(), 4);
        for pair in groups.entries.windows(2) {
            assert!(pair[0].accuracy >= pair[1].accuracy);
            assert!(pair[1].group >= pair[0].group);
            assert!(pair[1].group - pair[0].group <= 1);
        }
    }

    #[test]
    fn ternary_grouping_uses_marginal_homogeneity() {
        let gold: Vec<usize> = (0..90).map(|i| i % 3).collect();
        let pred_a = gold.clone();
        let pred_b = gold.clone();
        // Systematic label skew: everything gold-labeled class 1 predicted
        // as class 0 (this also lands on the singular-S pseudo-inverse path).
        let pred_c: Vec<usize> = gold.iter().map(|&g| if g == 1 { 0 } else { g }).collect();
        let models = vec![
            outcome("a", &gold, pred_a),
            outcome("b", &gold, pred_b),
            outcome("c", &gold, pred_c),
        ];
        let groups = group_models(&gold, 3, &models, 0.05).unwrap();
        assert_eq!(groups.entries[0].group, 0);
        assert_eq!(groups.entries[1].group, 0);
        assert_eq!(groups.entries[2].group, 1);
        assert_eq!(groups.entries[2].name, "c");
    }

    #[test]
    fn mismatched_test_sets_error() {
        let gold = vec![0, 1, 0];
        let models = vec![outcome("short", &[0, 1], vec![0, 1])];
        assert!(group_models(&gold, 2, &models, 0.05).is_err());
    }

    #[test]
    fn table_layout_has_one_letter_per_model() {
        let gold: Vec<usize> = (0..120).map(|i| i % 2).collect();
        let pred_a = gold.clone();
        let pred_b: Vec<usize> = gold
            .iter()
            .enumerate()
            .map(|(i, &g)| if i % 2 == 0 { 1 - g } else { g })
            .collect();
        let models = vec![
            outcome("alpha+beta", &gold, pred_a),
            outcome("gamma", &gold, pred_b),
        ];
        let table = group_models(&gold, 2, &models, 0.05)
            .unwrap()
            .format_table();
        let lines: Vec<&str> = table.lines().collect();
        assert!(lines[0].starts_with("Model"));
        assert!(lines[0].contains("Acc") && lines[0].contains("Groups"));
        assert!(lines[1].contains("alpha+beta") && lines[1].trim_end().ends_with('A'));
        assert!(lines[2].contains("gamma") && lines[2].trim_end().ends_with('B'));
    }
}
