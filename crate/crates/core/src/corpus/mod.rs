//! Dataset schema, loaders, deterministic splitting and weak labeling.
//!
//! Datasets are interchanged as JSON Lines, one object per line with fields
//! `{id, text, label, group_key, topic}` (all but `id` and `text` optional).
//! Raw tweet records may additionally carry `retweet: true`, which excludes
//! them at ingestion time.

pub mod govbr;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;

/// One text unit: an article, essay or tweet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Author or publisher identifier for author-level tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_key: Option<String>,
    /// Essay topic, where the corpus has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskId {
    T1,
    T2,
    T3,
    T4,
    T5,
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self)
    }
}

impl std::str::FromStr for TaskId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "T1" => Ok(TaskId::T1),
            "T2" => Ok(TaskId::T2),
            "T3" => Ok(TaskId::T3),
            "T4" => Ok(TaskId::T4),
            "T5" => Ok(TaskId::T5),
            other => Err(Error::Config(format!("unknown task id {other:?}"))),
        }
    }
}

/// Whether labels attach to the text's meaning or to its author/publisher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Text,
    Author,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arity {
    Binary,
    Ternary,
}

impl Arity {
    pub fn class_count(self) -> usize {
        match self {
            Arity::Binary => 2,
            Arity::Ternary => 3,
        }
    }
}

/// Default lexicon/embedder language for a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    En,
    Pt,
}

/// One classification task: level, arity and the ordered class set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub level: Level,
    pub arity: Arity,
    pub class_set: Vec<String>,
}

impl TaskSpec {
    /// Registry of the five task presets. Errors on an arity the task does
    /// not define (only T2 and T4 have a ternary form).
    pub fn preset(task_id: TaskId, arity: Arity) -> Result<TaskSpec> {
        let (level, classes): (Level, Vec<&str>) = match (task_id, arity) {
            (TaskId::T1, Arity::Binary) => (Level::Text, vec!["hyperpartisan", "neutral"]),
            (TaskId::T2, Arity::Binary) => (Level::Text, vec!["left", "right"]),
            (TaskId::T2, Arity::Ternary) => (Level::Text, vec!["left", "centre", "right"]),
            (TaskId::T3, Arity::Binary) => (Level::Author, vec!["hyperpartisan", "neutral"]),
            (TaskId::T4, Arity::Binary) => (Level::Author, vec!["left", "right"]),
            (TaskId::T4, Arity::Ternary) => (Level::Author, vec!["left", "centre", "right"]),
            (TaskId::T5, Arity::Binary) => (Level::Author, vec!["for", "against"]),
            (id, Arity::Ternary) => {
                return Err(Error::Config(format!("task {id} has no ternary form")))
            }
        };
        Ok(TaskSpec {
            task_id,
            level,
            arity,
            class_set: classes.into_iter().map(str::to_owned).collect(),
        })
    }

    pub fn custom(task_id: TaskId, level: Level, class_set: Vec<String>) -> Result<TaskSpec> {
        let arity = match class_set.len() {
            2 => Arity::Binary,
            3 => Arity::Ternary,
            n => return Err(Error::Config(format!("class set must have 2 or 3 classes, got {n}"))),
        };
        Ok(TaskSpec {
            task_id,
            level,
            arity,
            class_set,
        })
    }

    /// Default language for each task preset.
    pub fn default_language(task_id: TaskId) -> Language {
        match task_id {
            TaskId::T1 | TaskId::T3 => Language::En,
            TaskId::T2 | TaskId::T4 | TaskId::T5 => Language::Pt,
        }
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.class_set.iter().position(|c| c == label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Development,
    Test,
    Unsplit,
}

/// A labeled dataset: every document label is validated against the task's
/// class set at construction time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub task: TaskSpec,
    pub documents: Vec<Document>,
    pub split_tag: SplitTag,
}

impl LabeledDataset {
    pub fn new(task: TaskSpec, documents: Vec<Document>, split_tag: SplitTag) -> Result<Self> {
        let mut seen = HashSet::new();
        for doc in &documents {
            if !seen.insert(doc.id.as_str()) {
                return Err(Error::Data(format!("duplicate document id {:?}", doc.id)));
            }
            if doc.text.is_empty() {
                return Err(Error::Data(format!("document {:?} has empty text", doc.id)));
            }
            match &doc.label {
                None => {
                    return Err(Error::Data(format!("document {:?} has no label", doc.id)));
                }
                Some(label) if task.class_index(label).is_none() => {
                    return Err(Error::Data(format!(
                        "document {:?} has label {label:?}, not in class set {:?}",
                        doc.id, task.class_set
                    )));
                }
                Some(_) => {}
            }
        }
        Ok(LabeledDataset {
            task,
            documents,
            split_tag,
        })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Label of each document as an index into the task's class set.
    pub fn label_indices(&self) -> Vec<usize> {
        self.documents
            .iter()
            .map(|d| {
                self.task
                    .class_index(d.label.as_deref().expect("validated at construction"))
                    .expect("validated at construction")
            })
            .collect()
    }
}

/// Load a labeled JSONL dataset, validating labels against the task.
pub fn load_jsonl(path: &Path, task: &TaskSpec) -> Result<LabeledDataset> {
    let documents = read_jsonl(path, false)?;
    for (line_no, doc) in documents.iter().enumerate() {
        match &doc.label {
            None => {
                return Err(Error::ParseLine {
                    path: path.to_owned(),
                    line: line_no + 1,
                    message: format!("record {:?} has no label", doc.id),
                });
            }
            Some(label) if task.class_index(label).is_none() => {
                return Err(Error::ParseLine {
                    path: path.to_owned(),
                    line: line_no + 1,
                    message: format!(
                        "unknown label {label:?} (expected one of {:?})",
                        task.class_set
                    ),
                });
            }
            Some(_) => {}
        }
    }
    LabeledDataset::new(task.clone(), documents, SplitTag::Unsplit)
}

/// Load raw, possibly unlabeled documents (e.g. crawled tweets). When
/// `skip_retweets` is set, records flagged `retweet: true` are dropped.
pub fn load_raw_jsonl(path: &Path, skip_retweets: bool) -> Result<Vec<Document>> {
    read_jsonl(path, skip_retweets)
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    text: String,
    #[serde(default)]
    label: Option<String>,
    #[serde(default)]
    group_key: Option<String>,
    #[serde(default)]
    topic: Option<String>,
    #[serde(default)]
    retweet: bool,
}

fn read_jsonl(path: &Path, skip_retweets: bool) -> Result<Vec<Document>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut documents = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord = serde_json::from_str(&line).map_err(|e| Error::ParseLine {
            path: path.to_owned(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        if skip_retweets && record.retweet {
            continue;
        }
        if record.text.is_empty() {
            return Err(Error::ParseLine {
                path: path.to_owned(),
                line: idx + 1,
                message: format!("record {:?} has empty text", record.id),
            });
        }
        if !seen.insert(record.id.clone()) {
            return Err(Error::ParseLine {
                path: path.to_owned(),
                line: idx + 1,
                message: format!("duplicate document id {:?}", record.id),
            });
        }
        documents.push(Document {
            id: record.id,
            text: record.text,
            label: record.label,
            group_key: record.group_key,
            topic: record.topic,
        });
    }
    Ok(documents)
}

/// An essay paired with its ordinal stance toward its topic.
#[derive(Debug, Clone, PartialEq)]
pub struct StanceRecord {
    pub document: Document,
    pub stance: StanceScore,
}

#[derive(Deserialize)]
struct RawStanceRecord {
    id: String,
    text: String,
    topic: String,
    stance: u32,
    #[serde(default)]
    group_key: Option<String>,
}

/// Load stance-scored essays (JSONL with `{id, text, topic, stance}`; the
/// scale bound is corpus-specific and supplied by the caller).
pub fn load_stance_jsonl(path: &Path, scale_max: u32) -> Result<Vec<StanceRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawStanceRecord = serde_json::from_str(&line).map_err(|e| Error::ParseLine {
            path: path.to_owned(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        if raw.text.is_empty() {
            return Err(Error::ParseLine {
                path: path.to_owned(),
                line: idx + 1,
                message: format!("record {:?} has empty text", raw.id),
            });
        }
        if !seen.insert(raw.id.clone()) {
            return Err(Error::ParseLine {
                path: path.to_owned(),
                line: idx + 1,
                message: format!("duplicate document id {:?}", raw.id),
            });
        }
        let stance = StanceScore::new(raw.stance, scale_max, raw.topic.clone()).map_err(|e| {
            Error::ParseLine {
                path: path.to_owned(),
                line: idx + 1,
                message: e.to_string(),
            }
        })?;
        records.push(StanceRecord {
            document: Document {
                id: raw.id,
                text: raw.text,
                label: None,
                group_key: raw.group_key,
                topic: Some(raw.topic),
            },
            stance,
        });
    }
    Ok(records)
}

/// Write documents as JSONL.
pub fn write_jsonl(path: &Path, documents: &[Document]) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for doc in documents {
        let line = serde_json::to_string(doc).map_err(|e| Error::json(path, e))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Uniform random development/test partition without stratification.
/// Deterministic for a fixed seed; development size is `round(ratio * N)`.
pub fn split_dev_test(
    dataset: LabeledDataset,
    ratio: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    if dataset.split_tag != SplitTag::Unsplit {
        return Err(Error::Config("dataset is already split".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    let n = dataset.len();
    let n_dev = (ratio * n as f64).round() as usize;
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut substream(seed, "split_dev_test"));
    let mut dev_idx: Vec<usize> = indices[..n_dev].to_vec();
    let mut test_idx: Vec<usize> = indices[n_dev..].to_vec();
    dev_idx.sort_unstable();
    test_idx.sort_unstable();

    let pick = |idx: &[usize]| -> Vec<Document> {
        idx.iter().map(|&i| dataset.documents[i].clone()).collect()
    };
    let dev = LabeledDataset {
        task: dataset.task.clone(),
        documents: pick(&dev_idx),
        split_tag: SplitTag::Development,
    };
    let test = LabeledDataset {
        task: dataset.task,
        documents: pick(&test_idx),
        split_tag: SplitTag::Test,
    };
    Ok((dev, test))
}

/// Ordinal stance toward one essay topic, on a `0..=scale_max` scale from
/// totally-against to totally-for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StanceScore {
    pub value: u32,
    pub scale_max: u32,
    pub topic: String,
}

impl StanceScore {
    pub fn new(value: u32, scale_max: u32, topic: impl Into<String>) -> Result<Self> {
        if scale_max == 0 {
            return Err(Error::Config("stance scale_max must be positive".into()));
        }
        if value > scale_max {
            return Err(Error::Data(format!(
                "stance value {value} outside scale [0, {scale_max}]"
            )));
        }
        Ok(StanceScore {
            value,
            scale_max,
            topic: topic.into(),
        })
    }
}

/// Essay topics whose endorsement signals a left-leaning opinion.
pub const LIBERAL_TOPICS: [&str; 4] = [
    "same-sex marriage",
    "abortion",
    "drug legalisation",
    "racial quotas",
];

/// Essay topics whose endorsement signals a right-leaning opinion.
pub const CONSERVATIVE_TOPICS: [&str; 4] = [
    "death penalty",
    "gun possession",
    "lowering of criminal age",
    "tax exemptions for churches",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Left,
    Centre,
    Right,
}

impl Orientation {
    pub fn as_str(self) -> &'static str {
        match self {
            Orientation::Left => "left",
            Orientation::Centre => "centre",
            Orientation::Right => "right",
        }
    }
}

/// Map an essay stance score to a political orientation label.
///
/// Favouring a liberal topic maps to `left`, opposing it to `right`; the
/// mapping mirrors for conservative topics. The exact scale midpoint maps
/// to `centre`.
pub fn brmoral_opinion_label(stance: &StanceScore) -> Result<Orientation> {
    let topic = stance.topic.trim().to_lowercase();
    let liberal = LIBERAL_TOPICS.contains(&topic.as_str());
    let conservative = CONSERVATIVE_TOPICS.contains(&topic.as_str());
    if !liberal && !conservative {
        return Err(Error::Data(format!("unknown essay topic {:?}", stance.topic)));
    }
    // Compare 2*value against scale_max so the midpoint test stays exact.
    let doubled = 2 * stance.value;
    let against = doubled < stance.scale_max;
    let favour = doubled > stance.scale_max;
    Ok(if liberal {
        if favour {
            Orientation::Left
        } else if against {
            Orientation::Right
        } else {
            Orientation::Centre
        }
    } else if favour {
        Orientation::Right
    } else if against {
        Orientation::Left
    } else {
        Orientation::Centre
    })
}

/// Per-class (count, percentage) in class-set order. Classes absent from the
/// data report `(0, 0.0)`.
pub fn class_distribution(dataset: &LabeledDataset) -> Vec<(String, usize, f64)> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for doc in &dataset.documents {
        if let Some(label) = &doc.label {
            *counts.entry(label.as_str()).or_insert(0) += 1;
        }
    }
    let n = dataset.len();
    dataset
        .task
        .class_set
        .iter()
        .map(|class| {
            let count = counts.get(class.as_str()).copied().unwrap_or(0);
            let pct = if n == 0 {
                0.0
            } else {
                100.0 * count as f64 / n as f64
            };
            (class.clone(), count, pct)
        })
        .collect()
}

/// Render development/test class distributions as a fixed-width text table
/// (one row per split, per-class `count (pct%)` cells and a total column).
pub fn format_distribution_table(dev: &LabeledDataset, test: &LabeledDataset) -> String {
    let classes = &dev.task.class_set;
    let mut header = format!("{:<12}", "Set");
    for class in classes {
        header.push_str(&format!("{:<18}", class));
    }
    header.push_str("Total");
    let mut out = header;
    out.push('\n');
    for (name, split) in [("Development", dev), ("Test", test)] {
        let dist = class_distribution(split);
        let mut row = format!("{:<12}", name);
        for (_, count, pct) in &dist {
            row.push_str(&format!("{:<18}", format!("{count} ({pct:.1}%)")));
        }
        row.push_str(&split.len().to_string());
        out.push_str(&row);
        out.push('\n');
    }
    out
}

/// CSV form of the same distribution report.
pub fn distribution_csv(dev: &LabeledDataset, test: &LabeledDataset) -> String {
    let mut out = String::from("set,class,count,percentage\n");
    for (name, split) in [("development", dev), ("test", test)] {
        for (class, count, pct) in class_distribution(split) {
            out.push_str(&format!("{name},{class},{count},{pct:.1}\n"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn doc(id: &str, text: &str, label: Option<&str>) -> Document {
        Document {
            id: id.into(),
            text: text.into(),
            label: label.map(str::to_owned),
            group_key: None,
            topic: None,
        }
    }

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for line in lines {
            writeln!(f, "{line}").unwrap();
        }
        f.flush().unwrap();
        f
    }

    #[test]
    fn load_jsonl_well_formed() {
        let f = write_lines(&[
            r#"{"id":"a","text":"first text","label":"for"}"#,
            r#"{"id":"b","text":"second text","label":"against"}"#,
            r#"{"id":"c","text":"third text","label":"for"}"#,
        ]);
        let task = TaskSpec::preset(TaskId::T5, Arity::Binary).unwrap();
        let ds = load_jsonl(f.path(), &task).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.split_tag, SplitTag::Unsplit);
    }

    #[test]
    fn load_jsonl_rejects_unknown_label() {
        let f = write_lines(&[r#"{"id":"a","text":"some text","label":"maybe"}"#]);
        let task = TaskSpec::preset(TaskId::T5, Arity::Binary).unwrap();
        let err = load_jsonl(f.path(), &task).unwrap_err();
        assert!(err.to_string().contains("maybe"), "error should name the label: {err}");
    }

    #[test]
    fn load_jsonl_reports_malformed_line_number() {
        let f = write_lines(&[
            r#"{"id":"a","text":"ok","label":"for"}"#,
            r#"{"id":"b","text":"#,
        ]);
        let task = TaskSpec::preset(TaskId::T5, Arity::Binary).unwrap();
        let err = load_jsonl(f.path(), &task).unwrap_err();
        match err {
            Error::ParseLine { line, .. } => assert_eq!(line, 2),
            other => panic!("expected ParseLine, got {other:?}"),
        }
    }

    #[test]
    fn load_jsonl_rejects_duplicate_ids() {
        let f = write_lines(&[
            r#"{"id":"a","text":"x y","label":"for"}"#,
            r#"{"id":"a","text":"z w","label":"against"}"#,
        ]);
        let task = TaskSpec::preset(TaskId::T5, Arity::Binary).unwrap();
        assert!(load_jsonl(f.path(), &task).is_err());
    }

    #[test]
    fn raw_loader_skips_retweets() {
        let f = write_lines(&[
            r#"{"id":"a","text":"original tweet","group_key":"u1"}"#,
            r#"{"id":"b","text":"copied tweet","group_key":"u1","retweet":true}"#,
        ]);
        let docs = load_raw_jsonl(f.path(), true).unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(docs[0].id, "a");
    }

    #[test]
    fn preset_registry_matches_task_table() {
        let t1 = TaskSpec::preset(TaskId::T1, Arity::Binary).unwrap();
        assert_eq!(t1.level, Level::Text);
        assert_eq!(t1.class_set, ["hyperpartisan", "neutral"]);
        let t4 = TaskSpec::preset(TaskId::T4, Arity::Ternary).unwrap();
        assert_eq!(t4.level, Level::Author);
        assert_eq!(t4.class_set, ["left", "centre", "right"]);
        assert!(TaskSpec::preset(TaskId::T1, Arity::Ternary).is_err());
        assert!(TaskSpec::preset(TaskId::T5, Arity::Ternary).is_err());
    }

    fn toy_dataset(n: usize) -> LabeledDataset {
        let task = TaskSpec::preset(TaskId::T5, Arity::Binary).unwrap();
        let docs = (0..n)
            .map(|i| doc(&format!("d{i}"), "text body", Some(if i % 2 == 0 { "for" } else { "against" })))
            .collect();
        LabeledDataset::new(task, docs, SplitTag::Unsplit).unwrap()
    }

    #[test]
    fn split_sizes_and_partition() {
        let ds = toy_dataset(10);
        let (dev, test) = split_dev_test(ds.clone(), 0.8, 7).unwrap();
        assert_eq!(dev.len(), 8);
        assert_eq!(test.len(), 2);
        let mut ids: Vec<&str> = dev
            .documents
            .iter()
            .chain(test.documents.iter())
            .map(|d| d.id.as_str())
            .collect();
        ids.sort_unstable();
        let mut expect: Vec<String> = (0..10).map(|i| format!("d{i}")).collect();
        expect.sort();
        assert_eq!(ids, expect.iter().map(String::as_str).collect::<Vec<_>>());
    }

    #[test]
    fn split_is_deterministic() {
        let ds = toy_dataset(50);
        let (dev_a, test_a) = split_dev_test(ds.clone(), 0.8, 7).unwrap();
        let (dev_b, test_b) = split_dev_test(ds, 0.8, 7).unwrap();
        assert_eq!(dev_a.documents, dev_b.documents);
        assert_eq!(test_a.documents, test_b.documents);
    }

    #[test]
    fn split_brmoral_scale() {
        let ds = toy_dataset(4080);
        let (dev, test) = split_dev_test(ds, 0.8, 1).unwrap();
        assert_eq!(dev.len(), 3264);
        assert_eq!(test.len(), 816);
    }

    #[test]
    fn split_rejects_empty_and_bad_ratio() {
        let task = TaskSpec::preset(TaskId::T5, Arity::Binary).unwrap();
        let empty = LabeledDataset::new(task, vec![], SplitTag::Unsplit).unwrap();
        assert!(split_dev_test(empty, 0.8, 1).is_err());
        let ds = toy_dataset(4);
        assert!(split_dev_test(ds, 1.0, 1).is_err());
    }

    #[test]
    fn opinion_label_mapping() {
        // Totally for a liberal topic: left.
        let s = StanceScore::new(4, 4, "same-sex marriage").unwrap();
        assert_eq!(brmoral_opinion_label(&s).unwrap(), Orientation::Left);
        // Totally for a conservative topic: right.
        let s = StanceScore::new(4, 4, "death penalty").unwrap();
        assert_eq!(brmoral_opinion_label(&s).unwrap(), Orientation::Right);
        // Exact midpoint: centre regardless of topic polarity.
        let s = StanceScore::new(2, 4, "abortion").unwrap();
        assert_eq!(brmoral_opinion_label(&s).unwrap(), Orientation::Centre);
        let s = StanceScore::new(2, 4, "gun possession").unwrap();
        assert_eq!(brmoral_opinion_label(&s).unwrap(), Orientation::Centre);
        // Unknown topic errors.
        let s = StanceScore::new(1, 4, "pineapple on pizza").unwrap();
        assert!(brmoral_opinion_label(&s).is_err());
    }

    #[test]
    fn opinion_label_flips_with_topic_polarity() {
        for value in 0..=4u32 {
            let lib = StanceScore::new(value, 4, "racial quotas").unwrap();
            let con = StanceScore::new(value, 4, "tax exemptions for churches").unwrap();
            let a = brmoral_opinion_label(&lib).unwrap();
            let b = brmoral_opinion_label(&con).unwrap();
            match a {
                Orientation::Left => assert_eq!(b, Orientation::Right),
                Orientation::Right => assert_eq!(b, Orientation::Left),
                Orientation::Centre => assert_eq!(b, Orientation::Centre),
            }
        }
    }

    #[test]
    fn opinion_label_flips_under_stance_reflection() {
        for value in 0..=4u32 {
            let s = StanceScore::new(value, 4, "abortion").unwrap();
            let r = StanceScore::new(4 - value, 4, "abortion").unwrap();
            let a = brmoral_opinion_label(&s).unwrap();
            let b = brmoral_opinion_label(&r).unwrap();
            match a {
                Orientation::Left => assert_eq!(b, Orientation::Right),
                Orientation::Right => assert_eq!(b, Orientation::Left),
                Orientation::Centre => assert_eq!(b, Orientation::Centre),
            }
        }
    }

    #[test]
    fn distribution_counts_match_brute_tally() {
        let ds = toy_dataset(9);
        let dist = class_distribution(&ds);
        let brute_for = ds
            .documents
            .iter()
            .filter(|d| d.label.as_deref() == Some("for"))
            .count();
        assert_eq!(dist[0], ("for".into(), brute_for, 100.0 * brute_for as f64 / 9.0));
        let total: usize = dist.iter().map(|(_, c, _)| c).sum();
        assert_eq!(total, 9);
        let pct_sum: f64 = dist.iter().map(|(_, _, p)| p).sum();
        assert!((pct_sum - 100.0).abs() < 1e-9);
    }

    #[test]
    fn distribution_reports_empty_class() {
        let task = TaskSpec::preset(TaskId::T5, Arity::Binary).unwrap();
        let docs = vec![doc("a", "x", Some("for")), doc("b", "y", Some("for"))];
        let ds = LabeledDataset::new(task, docs, SplitTag::Unsplit).unwrap();
        let dist = class_distribution(&ds);
        assert_eq!(dist[0].1, 2);
        assert_eq!(dist[1], ("against".into(), 0, 0.0));
    }

    #[test]
    fn distribution_table_layout() {
        let (dev, test) = split_dev_test(toy_dataset(10), 0.8, 3).unwrap();
        let table = format_distribution_table(&dev, &test);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("Set"));
        assert!(lines[0].contains("for") && lines[0].contains("against") && lines[0].contains("Total"));
        assert!(lines[1].starts_with("Development"));
        assert!(lines[2].starts_with("Test"));
        assert!(lines[1].contains('%'));
    }
}
