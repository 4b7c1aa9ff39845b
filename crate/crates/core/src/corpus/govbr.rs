//! Hashtag-based stance corpus construction.
//!
//! Pipeline: group tweets by user, assign each user a stance from the
//! hashtags they promote (conflicting users discarded), strip hashtags and
//! drop short messages, then keep only tweets with a minimum TF-IDF cosine
//! similarity to a political-news reference corpus.

use std::collections::{BTreeMap, BTreeSet};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess;
use crate::tfidf::{count_terms, SparseVector, TfIdfModel};

use super::Document;

/// Stance assigned to a user from their hashtag use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UserStance {
    For,
    Against,
    Discard,
}

fn hashtag_regex() -> Regex {
    Regex::new(r"#\w+").expect("static regex")
}

/// All hashtags in a text, lowercased and without the leading `#`.
pub fn extract_hashtags(text: &str) -> Vec<String> {
    hashtag_regex()
        .find_iter(text)
        .map(|m| m.as_str()[1..].to_lowercase())
        .collect()
}

fn normalize_tag(tag: &str) -> String {
    tag.trim().trim_start_matches('#').to_lowercase()
}

/// The supportive/opposing hashtag lists that define user stance.
/// Validated disjoint and non-empty at construction, which makes stance
/// assignment itself total.
#[derive(Debug, Clone)]
pub struct HashtagStanceRules {
    supportive: BTreeSet<String>,
    opposing: BTreeSet<String>,
}

impl HashtagStanceRules {
    pub fn new<S: AsRef<str>>(supportive: &[S], opposing: &[S]) -> Result<Self> {
        let supportive: BTreeSet<String> =
            supportive.iter().map(|t| normalize_tag(t.as_ref())).collect();
        let opposing: BTreeSet<String> =
            opposing.iter().map(|t| normalize_tag(t.as_ref())).collect();
        if supportive.is_empty() || opposing.is_empty() {
            return Err(Error::Config("hashtag lists must be non-empty".into()));
        }
        if let Some(shared) = supportive.intersection(&opposing).next() {
            return Err(Error::Config(format!(
                "hashtag {shared:?} appears in both the supportive and opposing lists"
            )));
        }
        Ok(HashtagStanceRules {
            supportive,
            opposing,
        })
    }

    /// Stance of one user given all their tweets. Users promoting both tag
    /// kinds, or neither, are discarded.
    pub fn assign_user_stance(&self, user_tweets: &[Document]) -> UserStance {
        let mut has_supportive = false;
        let mut has_opposing = false;
        for tweet in user_tweets {
            for tag in extract_hashtags(&tweet.text) {
                if self.supportive.contains(&tag) {
                    has_supportive = true;
                } else if self.opposing.contains(&tag) {
                    has_opposing = true;
                }
            }
        }
        match (has_supportive, has_opposing) {
            (true, false) => UserStance::For,
            (false, true) => UserStance::Against,
            _ => UserStance::Discard,
        }
    }
}

/// Strip all hashtags from a tweet; reject it when fewer than `min_words`
/// whitespace tokens remain. Rejection is a normal outcome, not an error.
pub fn clean_tweet(doc: &Document, min_words: usize) -> Option<Document> {
    let stripped = hashtag_regex().replace_all(&doc.text, "");
    let words: Vec<&str> = stripped.split_whitespace().collect();
    if words.len() < min_words {
        return None;
    }
    Some(Document {
        text: words.join(" "),
        ..doc.clone()
    })
}

/// TF-IDF reference space fitted on political news; tweets are kept when
/// their cosine similarity to the reference centroid clears a threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoliticalFilter {
    model: TfIdfModel,
    centroid: SparseVector,
    centroid_norm: f64,
}

fn filter_terms(text: &str) -> Vec<String> {
    preprocess::clean_text(text)
        .to_lowercase()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

impl PoliticalFilter {
    /// Fit the reference space on a political-news corpus.
    pub fn fit<S: AsRef<str>>(reference_texts: &[S]) -> Result<Self> {
        let counts: Vec<_> = reference_texts
            .iter()
            .map(|t| count_terms(filter_terms(t.as_ref())))
            .collect();
        let model = TfIdfModel::fit(&counts)?;
        let mut dense = vec![0.0; model.dim()];
        for doc in &counts {
            let v = model.transform(doc);
            for (&i, &x) in v.indices.iter().zip(&v.values) {
                dense[i] += x;
            }
        }
        let n = counts.len() as f64;
        let mut centroid = SparseVector::zeros(model.dim());
        for (i, x) in dense.into_iter().enumerate() {
            if x != 0.0 {
                centroid.indices.push(i);
                centroid.values.push(x / n);
            }
        }
        let centroid_norm = centroid.l2_norm();
        Ok(PoliticalFilter {
            model,
            centroid,
            centroid_norm,
        })
    }

    /// Cosine similarity between a document and the reference centroid.
    pub fn similarity(&self, text: &str) -> f64 {
        let v = self.model.transform(&count_terms(filter_terms(text)));
        let norm = v.l2_norm();
        if norm == 0.0 || self.centroid_norm == 0.0 {
            return 0.0;
        }
        // Transformed vectors are already unit length.
        v.dot(&self.centroid) / self.centroid_norm
    }

    pub fn keep(&self, text: &str, threshold: f64) -> bool {
        self.similarity(text) >= threshold
    }
}

/// Pick the similarity threshold whose retained mean-per-user tweet count is
/// closest to `target_per_user`. When even retaining everything falls short
/// of the target, saturate to the minimal threshold 0. Ties between equally
/// close thresholds resolve to the largest one.
pub fn calibrate_threshold(
    per_user_scores: &BTreeMap<String, Vec<f64>>,
    target_per_user: f64,
) -> Result<f64> {
    let total_scores: usize = per_user_scores.values().map(Vec::len).sum();
    if per_user_scores.is_empty() || total_scores == 0 {
        return Err(Error::Data("no scored tweets to calibrate on".into()));
    }
    let users = per_user_scores.len() as f64;
    let mean_retained = |threshold: f64| -> f64 {
        per_user_scores
            .values()
            .map(|scores| scores.iter().filter(|&&s| s >= threshold).count() as f64)
            .sum::<f64>()
            / users
    };
    if mean_retained(0.0) < target_per_user {
        return Ok(0.0);
    }
    let mut candidates: Vec<f64> = per_user_scores
        .values()
        .flatten()
        .copied()
        .collect();
    candidates.sort_by(|a, b| a.total_cmp(b));
    candidates.dedup();
    let mut best = (f64::INFINITY, 0.0);
    for &t in &candidates {
        let gap = (mean_retained(t) - target_per_user).abs();
        if gap < best.0 || (gap == best.0 && t > best.1) {
            best = (gap, t);
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tweet(id: &str, user: &str, text: &str) -> Document {
        Document {
            id: id.into(),
            text: text.into(),
            label: None,
            group_key: Some(user.into()),
            topic: None,
        }
    }

    fn rules() -> HashtagStanceRules {
        HashtagStanceRules::new(&["#RespectThePresident"], &["#NotHim"]).unwrap()
    }

    #[test]
    fn supportive_only_user_is_for() {
        let tweets = vec![tweet("a", "u", "great speech today #RespectThePresident")];
        assert_eq!(rules().assign_user_stance(&tweets), UserStance::For);
    }

    #[test]
    fn conflicting_user_is_discarded() {
        let tweets = vec![
            tweet("a", "u", "yes #respectthepresident"),
            tweet("b", "u", "no #nothim"),
        ];
        assert_eq!(rules().assign_user_stance(&tweets), UserStance::Discard);
    }

    #[test]
    fn untagged_user_is_discarded() {
        let tweets = vec![tweet("a", "u", "talking about the weather #sunny")];
        assert_eq!(rules().assign_user_stance(&tweets), UserStance::Discard);
    }

    #[test]
    fn adding_opposing_tag_to_for_user_discards() {
        let mut tweets = vec![tweet("a", "u", "#RespectThePresident always")];
        assert_eq!(rules().assign_user_stance(&tweets), UserStance::For);
        tweets.push(tweet("b", "u", "changed my mind #NotHim"));
        assert_eq!(rules().assign_user_stance(&tweets), UserStance::Discard);
    }

    #[test]
    fn rules_reject_overlap_and_empty() {
        assert!(HashtagStanceRules::new(&["#a"], &["#a"]).is_err());
        assert!(HashtagStanceRules::new::<&str>(&[], &["#a"]).is_err());
    }

    #[test]
    fn clean_rejects_short_tweet() {
        let doc = tweet("a", "u", "THIS IS MY PRESIDENT");
        assert!(clean_tweet(&doc, 5).is_none());
    }

    #[test]
    fn clean_strips_hashtags_at_boundary() {
        let doc = tweet("a", "u", "one two three four five #tag");
        let cleaned = clean_tweet(&doc, 5).unwrap();
        assert_eq!(cleaned.text, "one two three four five");
    }

    #[test]
    fn clean_keeps_exact_five_words_unchanged() {
        let doc = tweet("a", "u", "one two three four five");
        let cleaned = clean_tweet(&doc, 5).unwrap();
        assert_eq!(cleaned.text, "one two three four five");
    }

    #[test]
    fn filter_rejects_orthogonal_vocabulary() {
        let filter = PoliticalFilter::fit(&["congress votes on the budget bill"]).unwrap();
        assert_eq!(filter.similarity("zebra giraffe savanna"), 0.0);
        assert!(!filter.keep("zebra giraffe savanna", 0.01));
    }

    #[test]
    fn filter_keeps_reference_document() {
        let refs = [
            "the senate approved the new tax law",
            "congress debates the election reform",
            "the president signed the budget decree",
        ];
        let filter = PoliticalFilter::fit(&refs).unwrap();
        assert!(filter.keep(refs[0], 0.05));
    }

    #[test]
    fn calibrate_degenerate_all_equal_scores() {
        let mut scores = BTreeMap::new();
        for u in 0..4 {
            scores.insert(format!("u{u}"), vec![1.0; 25]);
        }
        let t = calibrate_threshold(&scores, 25.0).unwrap();
        assert_eq!(t, 1.0);
    }

    #[test]
    fn calibrate_grid_scores_hits_median() {
        // Every user has scores 0.1 .. 1.0; target half the tweets.
        let grid: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let mut scores = BTreeMap::new();
        for u in 0..3 {
            scores.insert(format!("u{u}"), grid.clone());
        }
        let t = calibrate_threshold(&scores, 5.0).unwrap();
        // Brute-force oracle over the same candidates.
        let mut best = (f64::INFINITY, 0.0f64);
        for &cand in &grid {
            let retained = grid.iter().filter(|&&s| s >= cand).count() as f64;
            let gap = (retained - 5.0).abs();
            if gap < best.0 || (gap == best.0 && cand > best.1) {
                best = (gap, cand);
            }
        }
        assert_eq!(t, best.1);
        assert!((t - 0.6).abs() < 1e-12);
    }

    #[test]
    fn calibrate_saturates_to_zero_when_target_unreachable() {
        let mut scores = BTreeMap::new();
        scores.insert("u1".to_string(), vec![0.4, 0.9]);
        scores.insert("u2".to_string(), vec![0.7]);
        let t = calibrate_threshold(&scores, 25.0).unwrap();
        assert_eq!(t, 0.0);
    }

    #[test]
    fn calibrate_rejects_empty_input() {
        assert!(calibrate_threshold(&BTreeMap::new(), 25.0).is_err());
    }
}
