//! Syntactic bigrams over dependency graphs, vectorized with TF-IDF.
//!
//! Parsing is an adapter contract: any parser that produces a valid
//! [`DependencyGraph`] plugs in. A deterministic stub parser (head = previous
//! token) ships for tests and desk-scale runs; named external pipelines are
//! configuration entries that error until their adapter is installed.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tfidf::{SparseVector, TermCounts, TfIdfModel};

/// A dependency tree over the tokens of one text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyGraph {
    tokens: Vec<String>,
    edges: Vec<DependencyEdge>,
    root: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyEdge {
    pub head: usize,
    pub dependent: usize,
    pub relation: String,
}

impl DependencyGraph {
    /// Validate tree shape: every non-root node has exactly one head, all
    /// indices are in range, and head chains terminate at the root.
    pub fn new(tokens: Vec<String>, edges: Vec<DependencyEdge>, root: usize) -> Result<Self> {
        let n = tokens.len();
        if n == 0 {
            return Err(Error::Data("dependency graph needs at least one token".into()));
        }
        if root >= n {
            return Err(Error::Data(format!("root index {root} out of range for {n} tokens")));
        }
        let mut head_of = vec![None; n];
        for edge in &edges {
            if edge.head >= n || edge.dependent >= n {
                return Err(Error::Data("dependency edge index out of range".into()));
            }
            if edge.dependent == root {
                return Err(Error::Data("root node cannot have a head".into()));
            }
            if head_of[edge.dependent].replace(edge.head).is_some() {
                return Err(Error::Data(format!(
                    "token {} has more than one head",
                    edge.dependent
                )));
            }
        }
        for (i, head) in head_of.iter().enumerate() {
            if i != root && head.is_none() {
                return Err(Error::Data(format!("token {i} has no head and is not the root")));
            }
        }
        // Every head chain must reach the root in at most n steps.
        for start in 0..n {
            let mut node = start;
            let mut steps = 0;
            while node != root {
                node = head_of[node].expect("checked above");
                steps += 1;
                if steps > n {
                    return Err(Error::Data("dependency graph contains a cycle".into()));
                }
            }
        }
        Ok(DependencyGraph {
            tokens,
            edges,
            root,
        })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn edges(&self) -> &[DependencyEdge] {
        &self.edges
    }

    pub fn root(&self) -> usize {
        self.root
    }
}

/// Adapter contract for dependency parsing.
pub trait DependencyParser {
    fn name(&self) -> &str;
    fn parse(&self, text: &str) -> Result<DependencyGraph>;
}

/// Deterministic test parser: whitespace tokens, head = previous token,
/// root = first token, all relations "dep".
#[derive(Debug, Clone, Default)]
pub struct StubParser;

impl DependencyParser for StubParser {
    fn name(&self) -> &str {
        "stub"
    }

    fn parse(&self, text: &str) -> Result<DependencyGraph> {
        let tokens: Vec<String> = text.split_whitespace().map(str::to_owned).collect();
        if tokens.is_empty() {
            return Err(Error::Data("cannot parse empty text".into()));
        }
        let edges = (1..tokens.len())
            .map(|i| DependencyEdge {
                head: i - 1,
                dependent: i,
                relation: "dep".into(),
            })
            .collect();
        DependencyGraph::new(tokens, edges, 0)
    }
}

/// Build a parser from its configured name. External pipelines (e.g.
/// `spacy:en_core_web_sm`, `spacy:pt_core_news_sm`) are recognized names but
/// require an installed adapter.
pub fn build_parser(name: &str) -> Result<Box<dyn DependencyParser>> {
    match name {
        "stub" => Ok(Box::new(StubParser)),
        other if other.starts_with("spacy:") => Err(Error::Capability(format!(
            "dependency parser {other:?} requires an external adapter; \
             only the built-in \"stub\" parser is bundled"
        ))),
        other => Err(Error::Config(format!("unknown dependency parser {other:?}"))),
    }
}

/// One bigram per dependency edge: lowercased `head→dependent` surface forms,
/// arc direction preserved, multiplicity preserved. With `include_labels`
/// the relation is spliced in as `head→relation→dependent`.
pub fn extract_sngrams(graph: &DependencyGraph, include_labels: bool) -> TermCounts {
    let mut counts = TermCounts::new();
    for edge in graph.edges() {
        let head = graph.tokens()[edge.head].to_lowercase();
        let dep = graph.tokens()[edge.dependent].to_lowercase();
        let bigram = if include_labels {
            format!("{head}→{}→{dep}", edge.relation)
        } else {
            format!("{head}→{dep}")
        };
        *counts.entry(bigram).or_insert(0) += 1;
    }
    counts
}

const SNGRAM_MODEL_VERSION: u32 = 1;

/// Fitted TF-IDF space over syntactic bigrams, with fit metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnGramModel {
    pub version: u32,
    pub adapter_name: String,
    pub include_labels: bool,
    tfidf: TfIdfModel,
}

impl SnGramModel {
    /// Fit vocabulary and idf on a corpus of bigram multisets (development
    /// data only; transform ignores bigrams outside this vocabulary).
    pub fn fit(corpus: &[TermCounts], adapter_name: &str, include_labels: bool) -> Result<Self> {
        Ok(SnGramModel {
            version: SNGRAM_MODEL_VERSION,
            adapter_name: adapter_name.to_owned(),
            include_labels,
            tfidf: TfIdfModel::fit(corpus)?,
        })
    }

    pub fn vocabulary(&self) -> &BTreeMap<String, usize> {
        &self.tfidf.vocabulary
    }

    pub fn idf(&self) -> &[f64] {
        &self.tfidf.idf
    }

    pub fn num_documents_fitted(&self) -> usize {
        self.tfidf.num_documents_fitted
    }

    pub fn dim(&self) -> usize {
        self.tfidf.dim()
    }

    /// Column names in column order.
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = vec![String::new(); self.dim()];
        for (term, &col) in &self.tfidf.vocabulary {
            names[col] = term.clone();
        }
        names
    }

    pub fn transform(&self, doc_bigrams: &TermCounts) -> SparseVector {
        self.tfidf.transform(doc_bigrams)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: SnGramModel = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if model.version != SNGRAM_MODEL_VERSION {
            return Err(Error::Data(format!(
                "unsupported sngram model version {}",
                model.version
            )));
        }
        Ok(model)
    }
}

/// Parse and vectorize a batch of texts. Parser failures skip the document
/// with a warning and yield an all-zero vector, keeping row alignment.
pub fn vectorize_documents(
    parser: &dyn DependencyParser,
    model: &SnGramModel,
    texts: &[&str],
) -> Vec<SparseVector> {
    texts
        .iter()
        .map(|text| match parser.parse(text) {
            Ok(graph) => model.transform(&extract_sngrams(&graph, model.include_labels)),
            Err(err) => {
                eprintln!("warning: parse failed, vectorizing as zeros: {err}");
                SparseVector::zeros(model.dim())
            }
        })
        .collect()
}
