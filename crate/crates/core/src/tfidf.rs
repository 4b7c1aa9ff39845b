//! TF-IDF weighting over arbitrary string terms.
//!
//! One weighting scheme is used everywhere a TF-IDF space appears (syntactic
//! bigrams, the political-content reference space): raw term counts scaled by
//! smoothed inverse document frequency, then L2-normalized per document.
//!
//! idf(t) = ln((1 + N) / (1 + df(t))) + 1

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A document as a term multiset (term -> count).
pub type TermCounts = BTreeMap<String, u64>;

/// Count terms from an iterator, preserving multiplicity.
pub fn count_terms<I, S>(terms: I) -> TermCounts
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let mut counts = TermCounts::new();
    for term in terms {
        *counts.entry(term.into()).or_insert(0) += 1;
    }
    counts
}

/// Sparse vector over a declared dimensionality. Indices strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseVector {
    pub dim: usize,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseVector {
    pub fn zeros(dim: usize) -> Self {
        SparseVector {
            dim,
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &SparseVector) -> f64 {
        debug_assert_eq!(self.dim, other.dim);
        let (mut i, mut j) = (0, 0);
        let mut acc = 0.0;
        while i < self.indices.len() && j < other.indices.len() {
            match self.indices[i].cmp(&other.indices[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += self.values[i] * other.values[j];
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut dense = vec![0.0; self.dim];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            dense[i] = v;
        }
        dense
    }
}

/// Fitted TF-IDF space: vocabulary (lexicographically ordered) plus per-term
/// idf weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfIdfModel {
    /// term -> column index; columns contiguous from 0, sorted by term.
    pub vocabulary: BTreeMap<String, usize>,
    pub idf: Vec<f64>,
    pub num_documents_fitted: usize,
}

impl TfIdfModel {
    /// Fit vocabulary and idf weights on a corpus of term multisets.
    pub fn fit(corpus: &[TermCounts]) -> Result<TfIdfModel> {
        if corpus.is_empty() {
            return Err(Error::Data("cannot fit TF-IDF on an empty corpus".into()));
        }
        let mut df: BTreeMap<&str, usize> = BTreeMap::new();
        for doc in corpus {
            for term in doc.keys() {
                *df.entry(term.as_str()).or_insert(0) += 1;
            }
        }
        let n = corpus.len();
        let mut vocabulary = BTreeMap::new();
        let mut idf = Vec::with_capacity(df.len());
        // BTreeMap iteration gives the lexicographic column order.
        for (col, (term, term_df)) in df.into_iter().enumerate() {
            vocabulary.insert(term.to_owned(), col);
            idf.push(((1 + n) as f64 / (1 + term_df) as f64).ln() + 1.0);
        }
        Ok(TfIdfModel {
            vocabulary,
            idf,
            num_documents_fitted: n,
        })
    }

    pub fn dim(&self) -> usize {
        self.idf.len()
    }

    /// tf * idf per known term, L2-normalized. Terms outside the fitted
    /// vocabulary are ignored.
    pub fn transform(&self, doc: &TermCounts) -> SparseVector {
        let mut pairs: Vec<(usize, f64)> = doc
            .iter()
            .filter_map(|(term, &count)| {
                self.vocabulary
                    .get(term)
                    .map(|&col| (col, count as f64 * self.idf[col]))
            })
            .collect();
        pairs.sort_unstable_by_key(|&(col, _)| col);
        let norm = pairs.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
        let mut vec = SparseVector::zeros(self.dim());
        for (col, value) in pairs {
            vec.indices.push(col);
            vec.values.push(if norm > 0.0 { value / norm } else { value });
        }
        vec
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn doc(terms: &[(&str, u64)]) -> TermCounts {
        terms.iter().map(|&(t, c)| (t.to_owned(), c)).collect()
    }

    #[test]
    fn idf_of_ubiquitous_term_is_one() {
        let corpus: Vec<TermCounts> = (0..4).map(|_| doc(&[("a", 1)])).collect();
        let model = TfIdfModel::fit(&corpus).unwrap();
        assert_relative_eq!(model.idf[model.vocabulary["a"]], 1.0);
    }

    #[test]
    fn idf_of_rare_term_matches_formula() {
        let mut corpus: Vec<TermCounts> = (0..3).map(|_| doc(&[("a", 1)])).collect();
        corpus.push(doc(&[("a", 1), ("rare", 2)]));
        let model = TfIdfModel::fit(&corpus).unwrap();
        // ln(5/2) + 1
        assert_relative_eq!(
            model.idf[model.vocabulary["rare"]],
            (5.0f64 / 2.0).ln() + 1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn unseen_term_is_ignored_at_transform() {
        let model = TfIdfModel::fit(&[doc(&[("a", 1)])]).unwrap();
        let v = model.transform(&doc(&[("zzz", 5)]));
        assert!(v.indices.is_empty());
        assert_eq!(v.dim, 1);
    }

    #[test]
    fn empty_document_is_zero_vector() {
        let model = TfIdfModel::fit(&[doc(&[("a", 1), ("b", 1)])]).unwrap();
        let v = model.transform(&TermCounts::new());
        assert_eq!(v.l2_norm(), 0.0);
    }

    #[test]
    fn single_known_term_is_unit_vector() {
        let model = TfIdfModel::fit(&[doc(&[("a", 1), ("b", 1)]), doc(&[("b", 1)])]).unwrap();
        let v = model.transform(&doc(&[("a", 3)]));
        assert_relative_eq!(v.l2_norm(), 1.0, epsilon = 1e-12);
        assert_eq!(v.indices.len(), 1);
    }

    #[test]
    fn counts_two_one_with_equal_idf_normalize_to_two_one_over_sqrt5() {
        // Both terms occur in the single fitted document, so idf is equal.
        let model = TfIdfModel::fit(&[doc(&[("x", 1), ("y", 1)])]).unwrap();
        let v = model.transform(&doc(&[("x", 2), ("y", 1)]));
        let dense = v.to_dense();
        let s5 = 5.0f64.sqrt();
        assert_relative_eq!(dense[model.vocabulary["x"]], 2.0 / s5, epsilon = 1e-12);
        assert_relative_eq!(dense[model.vocabulary["y"]], 1.0 / s5, epsilon = 1e-12);
    }

    #[test]
    fn fit_rejects_empty_corpus() {
        assert!(TfIdfModel::fit(&[]).is_err());
    }

    #[test]
    fn vocabulary_is_lexicographically_ordered() {
        let model = TfIdfModel::fit(&[doc(&[("zeta", 1), ("alpha", 1), ("mid", 1)])]).unwrap();
        let cols: Vec<(&str, usize)> = model
            .vocabulary
            .iter()
            .map(|(t, &c)| (t.as_str(), c))
            .collect();
        assert_eq!(cols, vec![("alpha", 0), ("mid", 1), ("zeta", 2)]);
    }
}
