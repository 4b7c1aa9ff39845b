//! Univariate feature selection and z-score standardization for the
//! engineered (sngram + psych) vector.
//!
//! Scoring is the one-way ANOVA F-statistic of a column grouped by class.
//! Selection runs per channel, because the experiment manifest reports the
//! chosen k separately for each channel.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tfidf::SparseVector;

/// Feature channel a column originates from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineeredChannel {
    Sngram,
    Psych,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureName {
    pub channel: EngineeredChannel,
    pub name: String,
}

impl FeatureName {
    /// Channel-qualified column name, e.g. `sngram:dog→the`.
    pub fn qualified(&self) -> String {
        let channel = match self.channel {
            EngineeredChannel::Sngram => "sngram",
            EngineeredChannel::Psych => "psych",
        };
        format!("{channel}:{}", self.name)
    }
}

/// Documents (rows) by engineered features (columns), sngram columns first,
/// with per-column provenance labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EngineeredMatrix {
    pub data: Array2<f64>,
    pub columns: Vec<FeatureName>,
}

impl EngineeredMatrix {
    pub fn new(data: Array2<f64>, columns: Vec<FeatureName>) -> Result<Self> {
        if data.ncols() != columns.len() {
            return Err(Error::Data(format!(
                "matrix has {} columns but {} column labels",
                data.ncols(),
                columns.len()
            )));
        }
        Ok(EngineeredMatrix { data, columns })
    }

    /// Assemble from per-document sngram vectors and psych profiles.
    pub fn from_channels(
        sngram_rows: &[SparseVector],
        sngram_names: Vec<String>,
        psych_rows: &[Vec<f64>],
        psych_names: Vec<String>,
    ) -> Result<Self> {
        if sngram_rows.len() != psych_rows.len() {
            return Err(Error::Data(format!(
                "row count mismatch: {} sngram rows vs {} psych rows",
                sngram_rows.len(),
                psych_rows.len()
            )));
        }
        let n = sngram_rows.len();
        let s_dim = sngram_names.len();
        let p_dim = psych_names.len();
        let mut data = Array2::zeros((n, s_dim + p_dim));
        for (r, vec) in sngram_rows.iter().enumerate() {
            for (&c, &v) in vec.indices.iter().zip(&vec.values) {
                data[[r, c]] = v;
            }
        }
        for (r, profile) in psych_rows.iter().enumerate() {
            for (c, &v) in profile.iter().enumerate() {
                data[[r, s_dim + c]] = v;
            }
        }
        let columns = sngram_names
            .into_iter()
            .map(|name| FeatureName {
                channel: EngineeredChannel::Sngram,
                name,
            })
            .chain(psych_names.into_iter().map(|name| FeatureName {
                channel: EngineeredChannel::Psych,
                name,
            }))
            .collect();
        EngineeredMatrix::new(data, columns)
    }

    pub fn n_rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn channel_columns(&self, channel: EngineeredChannel) -> Vec<usize> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, f)| f.channel == channel)
            .map(|(i, _)| i)
            .collect()
    }

    /// New matrix keeping `columns` (in the given order).
    pub fn take_columns(&self, columns: &[usize]) -> EngineeredMatrix {
        let data = self.data.select(Axis(1), columns);
        let names = columns.iter().map(|&c| self.columns[c].clone()).collect();
        EngineeredMatrix {
            data,
            columns: names,
        }
    }

    /// Restrict to a subset of channels, preserving column order.
    pub fn restrict_channels(&self, keep: &[EngineeredChannel]) -> EngineeredMatrix {
        let cols: Vec<usize> = self
            .columns
            .iter()
            .enumerate()
            .filter(|(_, f)| keep.contains(&f.channel))
            .map(|(i, _)| i)
            .collect();
        self.take_columns(&cols)
    }
}

/// One-way ANOVA F-statistic of a column grouped by class. Constant columns
/// score 0; perfectly separating columns (zero within-group variance) score
/// infinity.
pub fn anova_f_scores(x: ArrayView2<'_, f64>, y: &[usize]) -> Result<Vec<f64>> {
    let n = x.nrows();
    if n != y.len() {
        return Err(Error::Data(format!(
            "matrix has {n} rows but {} labels",
            y.len()
        )));
    }
    let n_classes = y.iter().copied().max().map_or(0, |m| m + 1);
    let mut group_sizes = vec![0usize; n_classes];
    for &label in y {
        group_sizes[label] += 1;
    }
    let present = group_sizes.iter().filter(|&&s| s > 0).count();
    if present < 2 {
        return Err(Error::Data("need at least two classes to score features".into()));
    }
    let df_between = (present - 1) as f64;
    let df_within = (n - present) as f64;

    let mut scores = Vec::with_capacity(x.ncols());
    for col in x.columns() {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in col.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo == hi {
            scores.push(0.0);
            continue;
        }
        let mut group_sums = vec![0.0; n_classes];
        for (&v, &label) in col.iter().zip(y) {
            group_sums[label] += v;
        }
        let grand_mean = col.iter().sum::<f64>() / n as f64;
        let mut ss_between = 0.0;
        for (g, &size) in group_sizes.iter().enumerate() {
            if size > 0 {
                let mean = group_sums[g] / size as f64;
                ss_between += size as f64 * (mean - grand_mean).powi(2);
            }
        }
        let mut ss_within = 0.0;
        for (&v, &label) in col.iter().zip(y) {
            let mean = group_sums[label] / group_sizes[label] as f64;
            ss_within += (v - mean).powi(2);
        }
        let score = if ss_within == 0.0 || df_within == 0.0 {
            if ss_between > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        } else {
            (ss_between / df_between) / (ss_within / df_within)
        };
        scores.push(score);
    }
    Ok(scores)
}

/// Univariate column scoring function.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreFunction {
    /// One-way ANOVA F-statistic (the default).
    #[default]
    AnovaF,
    /// Macro-F1 of a one-column nearest-class-mean classifier.
    ClassifierF1,
}

impl ScoreFunction {
    pub fn name(self) -> &'static str {
        match self {
            ScoreFunction::AnovaF => "anova_f",
            ScoreFunction::ClassifierF1 => "classifier_f1",
        }
    }
}

/// Macro-F1 of predicting each row's class by the nearest class mean on a
/// single column.
fn single_column_f1(col: &[f64], y: &[usize], n_classes: usize) -> f64 {
    let mut sums = vec![0.0; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (&v, &label) in col.iter().zip(y) {
        sums[label] += v;
        counts[label] += 1;
    }
    let means: Vec<Option<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect();
    let pred: Vec<usize> = col
        .iter()
        .map(|&v| {
            let mut best = 0;
            let mut best_gap = f64::INFINITY;
            for (c, mean) in means.iter().enumerate() {
                if let Some(m) = mean {
                    let gap = (v - m).abs();
                    if gap < best_gap {
                        best_gap = gap;
                        best = c;
                    }
                }
            }
            best
        })
        .collect();
    // Per-class F1 with the 0-convention, averaged over classes.
    let mut f1_sum = 0.0;
    for c in 0..n_classes {
        let tp = pred
            .iter()
            .zip(y)
            .filter(|(&p, &g)| p == c && g == c)
            .count() as f64;
        let fp = pred
            .iter()
            .zip(y)
            .filter(|(&p, &g)| p == c && g != c)
            .count() as f64;
        let fn_ = pred
            .iter()
            .zip(y)
            .filter(|(&p, &g)| p != c && g == c)
            .count() as f64;
        let precision = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
        let recall = if tp + fn_ == 0.0 { 0.0 } else { tp / (tp + fn_) };
        if precision + recall > 0.0 {
            f1_sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    f1_sum / n_classes as f64
}

/// Score every column with the configured score function.
pub fn score_columns(
    x: ArrayView2<'_, f64>,
    y: &[usize],
    score: ScoreFunction,
) -> Result<Vec<f64>> {
    match score {
        ScoreFunction::AnovaF => anova_f_scores(x, y),
        ScoreFunction::ClassifierF1 => {
            let n_classes = y.iter().copied().max().map_or(0, |m| m + 1);
            if n_classes < 2 {
                return Err(Error::Data("need at least two classes to score features".into()));
            }
            if x.nrows() != y.len() {
                return Err(Error::Data(format!(
                    "matrix has {} rows but {} labels",
                    x.nrows(),
                    y.len()
                )));
            }
            Ok(x.columns()
                .into_iter()
                .map(|col| single_column_f1(&col.to_vec(), y, n_classes))
                .collect())
        }
    }
}

/// Fitted column selection: scores plus the k best column indices
/// (ties broken toward the lower index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selector {
    pub scores: Vec<f64>,
    pub selected_columns: Vec<usize>,
    pub k: usize,
}

pub fn fit_selector(x: ArrayView2<'_, f64>, y: &[usize], k: usize) -> Result<Selector> {
    fit_selector_with(x, y, k, ScoreFunction::AnovaF)
}

pub fn fit_selector_with(
    x: ArrayView2<'_, f64>,
    y: &[usize],
    k: usize,
    score: ScoreFunction,
) -> Result<Selector> {
    if k == 0 || k > x.ncols() {
        return Err(Error::Config(format!(
            "k must be in 1..={}, got {k}",
            x.ncols()
        )));
    }
    let scores = score_columns(x, y, score)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut selected: Vec<usize> = order[..k].to_vec();
    selected.sort_unstable();
    Ok(Selector {
        scores,
        selected_columns: selected,
        k,
    })
}

impl Selector {
    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.select(Axis(1), &self.selected_columns)
    }
}

/// Grid search over k values: returns the argmax of the evaluator, ties
/// resolved toward the smallest k. Evaluator failures skip that k with a
/// warning; an all-failed grid is an error.
pub fn grid_search_k<F>(grid: &[usize], mut evaluator: F) -> Result<usize>
where
    F: FnMut(usize) -> Result<f64>,
{
    if grid.is_empty() {
        return Err(Error::Config("empty k grid".into()));
    }
    let mut best: Option<(f64, usize)> = None;
    for &k in grid {
        match evaluator(k) {
            Ok(score) => {
                let better = match best {
                    None => true,
                    Some((s, bk)) => score > s || (score == s && k < bk),
                };
                if better {
                    best = Some((score, k));
                }
            }
            Err(err) => {
                eprintln!("warning: grid point k={k} failed, skipping: {err}");
            }
        }
    }
    best.map(|(_, k)| k)
        .ok_or_else(|| Error::Data("every grid point failed".into()))
}

/// Default k grid: {1%, 5%, 10%, 25%, 50%, 100%} of the channel
/// dimensionality, minimum 1, deduplicated.
pub fn default_grid(dim: usize) -> Vec<usize> {
    let mut grid: Vec<usize> = [0.01, 0.05, 0.10, 0.25, 0.50, 1.00]
        .iter()
        .map(|frac| ((dim as f64 * frac).round() as usize).max(1).min(dim.max(1)))
        .collect();
    grid.sort_unstable();
    grid.dedup();
    grid
}

/// Per-column mean and population (ddof = 0) standard deviation fitted on
/// development rows. Zero-variance columns standardize to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn fit_standardizer(x: ArrayView2<'_, f64>) -> Result<Standardizer> {
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::Data("cannot fit standardizer on an empty matrix".into()));
    }
    let n = x.nrows() as f64;
    let mean: Vec<f64> = x.columns().into_iter().map(|c| c.sum() / n).collect();
    let std: Vec<f64> = x
        .columns()
        .into_iter()
        .zip(&mean)
        .map(|(c, &m)| (c.iter().map(|&v| (v - m).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    Ok(Standardizer { mean, std })
}

pub fn apply_standardizer(x: ArrayView2<'_, f64>, s: &Standardizer) -> Result<Array2<f64>> {
    if x.ncols() != s.mean.len() {
        return Err(Error::Data(format!(
            "standardizer fitted on {} columns, input has {}",
            s.mean.len(),
            x.ncols()
        )));
    }
    let mut out = x.to_owned();
    for (j, mut col) in out.columns_mut().into_iter().enumerate() {
        let (m, sd) = (s.mean[j], s.std[j]);
        col.mapv_inplace(|v| if sd > 0.0 { (v - m) / sd } else { 0.0 });
    }
    Ok(out)
}
