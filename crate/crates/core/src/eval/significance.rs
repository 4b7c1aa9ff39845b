//! Paired significance tests over classifier predictions.
//!
//! Binary tasks use the continuity-corrected McNemar test on the discordant
//! counts (with an exact binomial form offered for small counts); ternary
//! tasks use the Stuart-Maxwell marginal homogeneity test over the two
//! models' predicted-label agreement table.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF};

use crate::error::{Error, Result};

use super::PairedPredictions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestName {
    Mcnemar,
    McnemarExact,
    StuartMaxwell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub test_name: TestName,
    pub statistic: f64,
    pub degrees_of_freedom: Option<f64>,
    pub p_value: f64,
}

impl SignificanceResult {
    /// `χ = 5.161, α = 0.05, p = 0.023` style report line.
    pub fn formatted(&self, alpha: f64) -> String {
        format!(
            "χ = {:.3}, α = {}, p = {:.4}{}",
            self.statistic,
            alpha,
            self.p_value,
            if self.p_value < alpha { " (significant)" } else { "" }
        )
    }
}

fn chi_squared_sf(statistic: f64, df: f64) -> f64 {
    if statistic <= 0.0 {
        return 1.0;
    }
    let dist = ChiSquared::new(df).expect("positive degrees of freedom");
    dist.sf(statistic)
}

/// Discordant counts: b = A correct and B wrong, c = A wrong and B correct.
fn discordant_counts(paired: &PairedPredictions) -> (u64, u64) {
    let mut b = 0;
    let mut c = 0;
    for ((&g, &a), &p_b) in paired.gold.iter().zip(&paired.pred_a).zip(&paired.pred_b) {
        let a_ok = a == g;
        let b_ok = p_b == g;
        if a_ok && !b_ok {
            b += 1;
        } else if !a_ok && b_ok {
            c += 1;
        }
    }
    (b, c)
}

/// Continuity-corrected McNemar test:
/// statistic = (max(|b - c| - 1, 0))^2 / (b + c), df = 1. No discordant
/// pairs means no evidence of a difference (statistic 0, p 1).
pub fn mcnemar(paired: &PairedPredictions) -> Result<SignificanceResult> {
    if paired.n_classes != 2 {
        return Err(Error::Data(format!(
            "McNemar applies to binary tasks; use the Stuart-Maxwell test for {} classes",
            paired.n_classes
        )));
    }
    let (b, c) = discordant_counts(paired);
    let (statistic, p_value) = if b + c == 0 {
        (0.0, 1.0)
    } else {
        let diff = (b as f64 - c as f64).abs();
        let stat = (diff - 1.0).max(0.0).powi(2) / (b + c) as f64;
        (stat, chi_squared_sf(stat, 1.0))
    };
    Ok(SignificanceResult {
        test_name: TestName::Mcnemar,
        statistic,
        degrees_of_freedom: Some(1.0),
        p_value,
    })
}

/// Exact two-sided binomial form of the McNemar test, preferable when the
/// discordant count b + c is small (< 25).
pub fn mcnemar_exact(paired: &PairedPredictions) -> Result<SignificanceResult> {
    if paired.n_classes != 2 {
        return Err(Error::Data(format!(
            "McNemar applies to binary tasks; use the Stuart-Maxwell test for {} classes",
            paired.n_classes
        )));
    }
    let (b, c) = discordant_counts(paired);
    let n = b + c;
    let p_value = if n == 0 {
        1.0
    } else {
        let dist = Binomial::new(0.5, n).expect("valid binomial");
        (2.0 * dist.cdf(b.min(c))).min(1.0)
    };
    Ok(SignificanceResult {
        test_name: TestName::McnemarExact,
        statistic: b.min(c) as f64,
        degrees_of_freedom: None,
        p_value,
    })
}

/// Stuart-Maxwell marginal homogeneity test over the 3x3 table
/// N[i][j] = count(pred_A = i and pred_B = j).
///
/// d_i = row_i - col_i over the first k-1 categories,
/// S_ii = row_i + col_i - 2 N_ii, S_ij = -(N_ij + N_ji),
/// statistic = d' S^-1 d with df = k - 1. A singular S falls back to the
/// pseudo-inverse with the df reduced to the rank.
pub fn stuart_maxwell(paired: &PairedPredictions) -> Result<SignificanceResult> {
    if paired.n_classes != 3 {
        return Err(Error::Data(format!(
            "the Stuart-Maxwell test applies to ternary tasks; use the McNemar test for {} classes",
            paired.n_classes
        )));
    }
    let k = 3usize;
    let mut table = [[0.0f64; 3]; 3];
    for (&a, &b) in paired.pred_a.iter().zip(&paired.pred_b) {
        table[a][b] += 1.0;
    }
    let row = |i: usize| table[i].iter().sum::<f64>();
    let col = |j: usize| (0..k).map(|i| table[i][j]).sum::<f64>();

    let d = [row(0) - col(0), row(1) - col(1)];
    let s = [
        [row(0) + col(0) - 2.0 * table[0][0], -(table[0][1] + table[1][0])],
        [-(table[0][1] + table[1][0]), row(1) + col(1) - 2.0 * table[1][1]],
    ];
    if d[0] == 0.0 && d[1] == 0.0 {
        return Ok(SignificanceResult {
            test_name: TestName::StuartMaxwell,
            statistic: 0.0,
            degrees_of_freedom: Some((k - 1) as f64),
            p_value: 1.0,
        });
    }

    let scale = s
        .iter()
        .flatten()
        .fold(1.0f64, |acc, &v| acc.max(v.abs()));
    let tol = 1e-12 * scale;
    let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
    let (statistic, df) = if det.abs() > tol * scale {
        let inv = [
            [s[1][1] / det, -s[0][1] / det],
            [-s[1][0] / det, s[0][0] / det],
        ];
        let stat = d[0] * (inv[0][0] * d[0] + inv[0][1] * d[1])
            + d[1] * (inv[1][0] * d[0] + inv[1][1] * d[1]);
        (stat, 2.0)
    } else {
        // Symmetric 2x2 pseudo-inverse via closed-form eigendecomposition.
        let trace = s[0][0] + s[1][1];
        let gap = ((s[0][0] - s[1][1]).powi(2) + 4.0 * s[0][1] * s[0][1]).sqrt();
        let eigenvalues = [(trace + gap) / 2.0, (trace - gap) / 2.0];
        let mut stat = 0.0;
        let mut rank = 0.0;
        for &lambda in &eigenvalues {
            if lambda.abs() > tol {
                rank += 1.0;
                // Eigenvector for lambda.
                let (vx, vy) = if s[0][1].abs() > tol {
                    (lambda - s[1][1], s[0][1])
                } else if (s[0][0] - lambda).abs() < tol {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                };
                let norm = (vx * vx + vy * vy).sqrt();
                let proj = (d[0] * vx + d[1] * vy) / norm;
                stat += proj * proj / lambda;
            }
        }
        if rank == 0.0 {
            return Ok(SignificanceResult {
                test_name: TestName::StuartMaxwell,
                statistic: 0.0,
                degrees_of_freedom: Some(0.0),
                p_value: 1.0,
            });
        }
        (stat, rank)
    };
    Ok(SignificanceResult {
        test_name: TestName::StuartMaxwell,
        statistic: statistic.max(0.0),
        degrees_of_freedom: Some(df),
        p_value: chi_squared_sf(statistic, df),
    })
}

/// Pick the pairwise test matching the task arity.
pub fn paired_test(paired: &PairedPredictions) -> Result<SignificanceResult> {
    match paired.n_classes {
        2 => mcnemar(paired),
        3 => stuart_maxwell(paired),
        k => Err(Error::Data(format!("no paired test for {k} classes"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Independent p-value oracles: Abramowitz-Stegun erfc for df = 1
    /// (sf(x) = erfc(sqrt(x/2))) and the closed form exp(-x/2) for df = 2.
    fn erfc_approx(x: f64) -> f64 {
        let t = 1.0 / (1.0 + 0.3275911 * x);
        let poly = t
            * (0.254829592
                + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
        poly * (-x * x).exp()
    }

    fn chi2_sf_df1_oracle(x: f64) -> f64 {
        erfc_approx((x / 2.0).sqrt())
    }

    fn chi2_sf_df2_oracle(x: f64) -> f64 {
        (-x / 2.0).exp()
    }

    /// Build paired predictions with exactly the given (b, c) discordances.
    fn paired_from_counts(b: usize, c: usize, both_right: usize, both_wrong: usize) -> PairedPredictions {
        let mut gold = Vec::new();
        let mut pa = Vec::new();
        let mut pb = Vec::new();
        for _ in 0..b {
            gold.push(0);
            pa.push(0);
            pb.push(1);
        }
        for _ in 0..c {
            gold.push(0);
            pa.push(1);
            pb.push(0);
        }
        for _ in 0..both_right {
            gold.push(1);
            pa.push(1);
            pb.push(1);
        }
        for _ in 0..both_wrong {
            gold.push(1);
            pa.push(0);
            pb.push(0);
        }
        PairedPredictions::new(gold, pa, pb, 2).unwrap()
    }

    #[test]
    fn equal_discordance_is_not_significant() {
        let paired = paired_from_counts(7, 7, 5, 3);
        let result = mcnemar(&paired).unwrap();
        assert_eq!(result.statistic, 0.0);
        assert_eq!(result.p_value, 1.0);
    }

    #[test]
    fn no_discordance_is_not_significant() {
        let paired = paired_from_counts(0, 0, 5, 5);
        let result = mcnemar(&paired).unwrap();
        assert_eq!(result.statistic, 0.0);
        assert_eq!(result.p_value, 1.0);
    }

    #[test]
    fn ten_two_case_matches_frozen_values() {
        let paired = paired_from_counts(10, 2, 8, 4);
        let result = mcnemar(&paired).unwrap();
        assert_relative_eq!(result.statistic, 49.0 / 12.0, epsilon = 1e-12);
        assert!((result.statistic - 4.083).abs() < 1e-3);
        assert!((result.p_value - 0.0433).abs() < 1e-3);
    }

    #[test]
    fn mcnemar_statistic_matches_definition_on_random_pairs() {
        let mut state = 0x243f6a8885a308d3u64;
        let mut next = |m: u64| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state % m
        };
        for _ in 0..100 {
            let b = next(40) as usize;
            let c = next(40) as usize;
            let paired = paired_from_counts(b, c, next(20) as usize, next(20) as usize);
            let result = mcnemar(&paired).unwrap();
            let expect = if b + c == 0 {
                0.0
            } else {
                ((b as f64 - c as f64).abs() - 1.0).max(0.0).powi(2) / (b + c) as f64
            };
            assert_relative_eq!(result.statistic, expect, epsilon = 1e-12);
            if b + c > 0 {
                assert_relative_eq!(
                    result.p_value,
                    chi2_sf_df1_oracle(expect),
                    epsilon = 1e-6
                );
            }
        }
    }

    #[test]
    fn mcnemar_is_symmetric_in_model_order() {
        let paired = paired_from_counts(13, 4, 6, 2);
        let swapped = PairedPredictions::new(
            paired.gold.clone(),
            paired.pred_b.clone(),
            paired.pred_a.clone(),
            2,
        )
        .unwrap();
        let a = mcnemar(&paired).unwrap();
        let b = mcnemar(&swapped).unwrap();
        assert_eq!(a.statistic, b.statistic);
        assert_eq!(a.p_value, b.p_value);
    }

    #[test]
    fn mcnemar_rejects_ternary_and_directs_to_stuart_maxwell() {
        let paired = PairedPredictions::new(vec![0, 1, 2], vec![0, 1, 2], vec![2, 1, 0], 3).unwrap();
        let err = mcnemar(&paired).err().unwrap();
        assert!(err.to_string().contains("Stuart-Maxwell"), "{err}");
        let err = stuart_maxwell(&paired_from_counts(1, 1, 1, 1)).err().unwrap();
        assert!(err.to_string().contains("McNemar"), "{err}");
    }

    #[test]
    fn exact_binomial_small_counts() {
        // b = 0, c = 5: two-sided exact p = 2 * (1/2)^5 = 1/16.
        let paired = paired_from_counts(0, 5, 3, 1);
        let result = mcnemar_exact(&paired).unwrap();
        assert_relative_eq!(result.p_value, 2.0 * 0.5f64.powi(5), epsilon = 1e-12);
        // Balanced counts cap at 1.
        let result = mcnemar_exact(&paired_from_counts(3, 3, 0, 0)).unwrap();
        assert_eq!(result.p_value, 1.0);
    }

    fn paired_from_table(table: [[usize; 3]; 3]) -> PairedPredictions {
        let mut pa = Vec::new();
        let mut pb = Vec::new();
        for (i, row) in table.iter().enumerate() {
            for (j, &count) in row.iter().enumerate() {
                for _ in 0..count {
                    pa.push(i);
                    pb.push(j);
                }
            }
        }
        let gold = vec![0; pa.len()];
        PairedPredictions::new(gold, pa, pb, 3).unwrap()
    }

    /// Independent marginal-homogeneity oracle: explicit formula with the
    /// adjugate 2x2 inverse and the closed-form df = 2 survival function.
    fn stuart_maxwell_oracle(table: [[usize; 3]; 3]) -> (f64, f64) {
        let t: Vec<Vec<f64>> = table
            .iter()
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect();
        let row: Vec<f64> = (0..3).map(|i| t[i].iter().sum()).collect();
        let col: Vec<f64> = (0..3).map(|j| (0..3).map(|i| t[i][j]).sum()).collect();
        let d = [row[0] - col[0], row[1] - col[1]];
        let s00 = row[0] + col[0] - 2.0 * t[0][0];
        let s11 = row[1] + col[1] - 2.0 * t[1][1];
        let s01 = -(t[0][1] + t[1][0]);
        let det = s00 * s11 - s01 * s01;
        let stat = (s11 * d[0] * d[0] - 2.0 * s01 * d[0] * d[1] + s00 * d[1] * d[1]) / det;
        (stat, chi2_sf_df2_oracle(stat))
    }

    #[test]
    fn symmetric_table_is_homogeneous() {
        let result = stuart_maxwell(&paired_from_table([[5, 2, 3], [2, 7, 1], [3, 1, 4]])).unwrap();
        assert_eq!(result.statistic, 0.0);
        assert_eq!(result.p_value, 1.0);
    }

    #[test]
    fn diagonal_table_is_homogeneous() {
        let result = stuart_maxwell(&paired_from_table([[9, 0, 0], [0, 4, 0], [0, 0, 7]])).unwrap();
        assert_eq!(result.statistic, 0.0);
        assert_eq!(result.p_value, 1.0);
    }

    #[test]
    fn worked_example_table_has_homogeneous_marginals() {
        // Rows sum to (18, 14, 16) and so do the columns, so d = 0 and the
        // statistic is exactly 0 despite the asymmetry.
        let result = stuart_maxwell(&paired_from_table([[10, 5, 3], [2, 8, 4], [6, 1, 9]])).unwrap();
        assert_eq!(result.statistic, 0.0);
        assert_eq!(result.p_value, 1.0);
    }

    #[test]
    fn asymmetric_table_matches_oracle() {
        let table = [[10, 9, 1], [2, 8, 4], [6, 1, 9]];
        let result = stuart_maxwell(&paired_from_table(table)).unwrap();
        let (stat, p) = stuart_maxwell_oracle(table);
        assert_relative_eq!(result.statistic, stat, epsilon = 1e-9);
        assert_relative_eq!(result.p_value, p, epsilon = 1e-6);
        assert!(result.statistic > 0.0);
    }

    #[test]
    fn random_tables_match_oracle() {
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = |m: u64| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state % m) as usize
        };
        let mut checked = 0;
        while checked < 50 {
            let mut table = [[0usize; 3]; 3];
            for row in table.iter_mut() {
                for v in row.iter_mut() {
                    *v = next(12) + 1;
                }
            }
            // The oracle needs a non-singular S; regenerate on degenerate draws.
            let (stat, p) = stuart_maxwell_oracle(table);
            if !stat.is_finite() {
                continue;
            }
            let result = stuart_maxwell(&paired_from_table(table)).unwrap();
            assert_relative_eq!(result.statistic, stat.max(0.0), epsilon = 1e-9, max_relative = 1e-9);
            if stat > 0.0 {
                assert_relative_eq!(result.p_value, p, epsilon = 1e-9, max_relative = 1e-7);
            }
            checked += 1;
        }
    }

    #[test]
    fn formatted_line_carries_chi_alpha_p() {
        let paired = paired_from_counts(10, 2, 8, 4);
        let line = mcnemar(&paired).unwrap().formatted(0.05);
        assert!(line.contains("χ = 4.083"), "{line}");
        assert!(line.contains("α = 0.05"), "{line}");
        assert!(line.contains("p = 0.0433"), "{line}");
    }
}
