//! Psycholinguistic category profiles from LIWC-style and MRC-style lexicons.
//!
//! Both lexicon kinds share one counting interface: an entry maps a word
//! pattern to weighted category contributions. LIWC entries contribute 1 per
//! matching category; MRC entries contribute the word's score, min-max
//! normalized to [0, 1] per dimension at load time. Profiles are counts per
//! word (category accumulation divided by document word count).
//!
//! LIWC file format: a `%` line, `index<TAB>category` header rows, a closing
//! `%`, then `word<TAB>index[,index…]` rows where a trailing `*` marks a
//! prefix pattern. MRC file format: CSV `word,dim1,…,dimK` with a header row.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Language;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LexiconKind {
    Liwc,
    Mrc,
}

/// A word pattern: literal word or prefix (trailing `*` in source files).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pattern {
    Exact(String),
    Prefix(String),
}

impl Pattern {
    pub fn matches(&self, token: &str) -> bool {
        match self {
            Pattern::Exact(w) => token == w,
            Pattern::Prefix(p) => token.starts_with(p.as_str()),
        }
    }
}

/// Weighted category contributions of one pattern.
type Contributions = Vec<(usize, f64)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub kind: LexiconKind,
    pub language: Language,
    categories: Vec<String>,
    exact: BTreeMap<String, Contributions>,
    prefixes: Vec<(String, Contributions)>,
    /// Per-dimension (min, max) used for MRC score normalization.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub score_ranges: Vec<(f64, f64)>,
}

impl Lexicon {
    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn category_count(&self) -> usize {
        self.categories.len()
    }

    pub fn entry_count(&self) -> usize {
        self.exact.len() + self.prefixes.len()
    }

    /// Load a lexicon file in the format matching `kind`.
    pub fn load(path: &Path, kind: LexiconKind, language: Language) -> Result<Lexicon> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        match kind {
            LexiconKind::Liwc => parse_liwc(&text, language).map_err(|(row, msg)| {
                Error::ParseLine {
                    path: path.to_owned(),
                    line: row,
                    message: msg,
                }
            }),
            LexiconKind::Mrc => parse_mrc(&text, language).map_err(|(row, msg)| {
                Error::ParseLine {
                    path: path.to_owned(),
                    line: row,
                    message: msg,
                }
            }),
        }
    }

    fn contributions_for<'a>(
        &'a self,
        token: &'a str,
    ) -> impl Iterator<Item = (usize, f64)> + 'a {
        let exact = self
            .exact
            .get(token)
            .into_iter()
            .flat_map(|c| c.iter().copied());
        let prefixed = self
            .prefixes
            .iter()
            .filter(move |(p, _)| token.starts_with(p.as_str()))
            .flat_map(|(_, c)| c.iter().copied());
        exact.chain(prefixed)
    }
}

type RowError = (usize, String);

fn parse_liwc(text: &str, language: Language) -> std::result::Result<Lexicon, RowError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "%" => {}
        _ => return Err((1, "expected '%' header start".into())),
    }
    let mut categories: Vec<String> = Vec::new();
    let mut code_to_index: BTreeMap<String, usize> = BTreeMap::new();
    let mut in_header = true;
    let mut exact: BTreeMap<String, Contributions> = BTreeMap::new();
    let mut prefixes: BTreeMap<String, Contributions> = BTreeMap::new();
    for (idx, line) in lines {
        let row = idx + 1;
        let line = line.trim_end();
        if line.trim().is_empty() {
            continue;
        }
        if in_header {
            if line.trim() == "%" {
                in_header = false;
                continue;
            }
            let (code, name) = line
                .split_once('\t')
                .ok_or((row, "header row must be 'index<TAB>category'".to_string()))?;
            let name = name.trim().to_owned();
            if categories.contains(&name) {
                return Err((row, format!("duplicate category name {name:?}")));
            }
            code_to_index.insert(code.trim().to_owned(), categories.len());
            categories.push(name);
        } else {
            let (word, rest) = line
                .split_once('\t')
                .ok_or((row, "entry row must be 'word<TAB>index[,index…]'".to_string()))?;
            let word = word.trim();
            if word.is_empty() {
                return Err((row, "empty word pattern".into()));
            }
            let mut contributions = Contributions::new();
            for code in rest.split([',', '\t']) {
                let code = code.trim();
                if code.is_empty() {
                    continue;
                }
                let &cat = code_to_index
                    .get(code)
                    .ok_or((row, format!("unknown category index {code:?}")))?;
                contributions.push((cat, 1.0));
            }
            if contributions.is_empty() {
                return Err((row, format!("entry {word:?} lists no categories")));
            }
            let target = if let Some(prefix) = word.strip_suffix('*') {
                if prefix.is_empty() {
                    return Err((row, "bare '*' is not a valid pattern".into()));
                }
                prefixes.entry(prefix.to_lowercase()).or_default()
            } else {
                exact.entry(word.to_lowercase()).or_default()
            };
            target.extend(contributions);
        }
    }
    if in_header {
        return Err((1, "missing '%' header terminator".into()));
    }
    Ok(Lexicon {
        kind: LexiconKind::Liwc,
        language,
        categories,
        exact,
        prefixes: prefixes.into_iter().collect(),
        score_ranges: Vec::new(),
    })
}

fn parse_mrc(text: &str, language: Language) -> std::result::Result<Lexicon, RowError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or((1, "empty MRC file".to_string()))?;
    let mut fields = header.split(',');
    let word_field = fields.next().unwrap_or("").trim();
    if word_field != "word" {
        return Err((1, format!("MRC header must start with 'word', got {word_field:?}")));
    }
    let categories: Vec<String> = fields.map(|f| f.trim().to_owned()).collect();
    if categories.is_empty() {
        return Err((1, "MRC header lists no dimensions".into()));
    }
    for (i, a) in categories.iter().enumerate() {
        if categories[i + 1..].contains(a) {
            return Err((1, format!("duplicate category name {a:?}")));
        }
    }
    let dims = categories.len();
    let mut raw: Vec<(usize, String, Vec<f64>)> = Vec::new();
    for (idx, line) in lines {
        let row = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let word = parts.next().unwrap_or("").trim().to_lowercase();
        if word.is_empty() {
            return Err((row, "empty word".into()));
        }
        let scores: Vec<f64> = parts
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| (row, format!("non-numeric score {:?}", p.trim())))
            })
            .collect::<std::result::Result<_, RowError>>()?;
        if scores.len() != dims {
            return Err((row, format!("expected {dims} scores, got {}", scores.len())));
        }
        if raw.iter().any(|(_, w, _)| *w == word) {
            return Err((row, format!("duplicate word {word:?}")));
        }
        raw.push((row, word, scores));
    }
    // Min-max normalize each dimension to [0, 1]; constant dimensions map to 0.
    let mut score_ranges = Vec::with_capacity(dims);
    for d in 0..dims {
        let lo = raw.iter().map(|(_, _, s)| s[d]).fold(f64::INFINITY, f64::min);
        let hi = raw.iter().map(|(_, _, s)| s[d]).fold(f64::NEG_INFINITY, f64::max);
        score_ranges.push((lo, hi));
    }
    let mut exact: BTreeMap<String, Contributions> = BTreeMap::new();
    for (_, word, scores) in raw {
        let contributions = scores
            .iter()
            .enumerate()
            .map(|(d, &v)| {
                let (lo, hi) = score_ranges[d];
                let norm = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
                (d, norm)
            })
            .collect();
        exact.insert(word, contributions);
    }
    Ok(Lexicon {
        kind: LexiconKind::Mrc,
        language,
        categories,
        exact,
        prefixes: Vec::new(),
        score_ranges,
    })
}

/// Per-category accumulation normalized by document word count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryProfile {
    pub language: Language,
    pub values: Vec<f64>,
}

/// Count every matching category for every token; a token belonging to
/// several categories updates all of them. Values are divided by the token
/// count; an empty document yields a zero profile.
pub fn count_categories<S: AsRef<str>>(tokens: &[S], lexicon: &Lexicon) -> CategoryProfile {
    let mut values = vec![0.0; lexicon.category_count()];
    if tokens.is_empty() {
        return CategoryProfile {
            language: lexicon.language,
            values,
        };
    }
    for token in tokens {
        for (cat, weight) in lexicon.contributions_for(token.as_ref()) {
            values[cat] += weight;
        }
    }
    let n = tokens.len() as f64;
    for v in &mut values {
        *v /= n;
    }
    CategoryProfile {
        language: lexicon.language,
        values,
    }
}

/// Concatenate a LIWC profile with an MRC profile computed on the same
/// document: LIWC values first, MRC appended.
pub fn concat_profiles(liwc: &CategoryProfile, mrc: &CategoryProfile) -> Result<CategoryProfile> {
    if liwc.language != mrc.language {
        return Err(Error::Data(format!(
            "profile language mismatch: {:?} vs {:?}",
            liwc.language, mrc.language
        )));
    }
    let mut values = liwc.values.clone();
    values.extend_from_slice(&mrc.values);
    Ok(CategoryProfile {
        language: liwc.language,
        values,
    })
}

/// A LIWC + MRC lexicon pair for one language, the unit the pipeline
/// configures per task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LexiconPair {
    pub liwc: Lexicon,
    pub mrc: Lexicon,
}

impl LexiconPair {
    pub fn new(liwc: Lexicon, mrc: Lexicon) -> Result<Self> {
        if liwc.kind != LexiconKind::Liwc || mrc.kind != LexiconKind::Mrc {
            return Err(Error::Config("lexicon pair must be (liwc, mrc)".into()));
        }
        if liwc.language != mrc.language {
            return Err(Error::Config("lexicon pair languages differ".into()));
        }
        Ok(LexiconPair { liwc, mrc })
    }

    pub fn load(liwc_path: &Path, mrc_path: &Path, language: Language) -> Result<Self> {
        LexiconPair::new(
            Lexicon::load(liwc_path, LexiconKind::Liwc, language)?,
            Lexicon::load(mrc_path, LexiconKind::Mrc, language)?,
        )
    }

    /// Concatenated profile width (101 for the bundled English pair,
    /// 70 for the Portuguese pair).
    pub fn profile_width(&self) -> usize {
        self.liwc.category_count() + self.mrc.category_count()
    }

    pub fn profile<S: AsRef<str>>(&self, tokens: &[S]) -> CategoryProfile {
        let l = count_categories(tokens, &self.liwc);
        let m = count_categories(tokens, &self.mrc);
        concat_profiles(&l, &m).expect("same language by construction")
    }

    /// Column names in profile order, qualified by lexicon kind.
    pub fn feature_names(&self) -> Vec<String> {
        self.liwc
            .categories()
            .iter()
            .map(|c| format!("liwc:{c}"))
            .chain(self.mrc.categories().iter().map(|c| format!("mrc:{c}")))
            .collect()
    }
}
