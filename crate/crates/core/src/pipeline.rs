//! End-to-end experiment orchestration: corpus construction, feature
//! extraction, training, evaluation, model comparison and explanation.
//!
//! Every step reads and writes files under the experiment's output
//! directory, so the stages compose as separate batch commands:
//!
//! ```text
//! out_dir/
//!   features/      split datasets, fitted feature models, matrices, cache
//!   models/<variant>/   weights + config + manifest per model variant
//!   eval/          metrics, predictions, comparison and importance reports
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{
    self, govbr, Arity, Document, LabeledDataset, Language, SplitTag, TaskId, TaskSpec,
};
use crate::embed::{build_embedder, Embedder, EmbedderSpec, EmbeddingCache, TokenEmbeddingMatrix};
use crate::error::{Error, Result};
use crate::eval::{
    compute_metrics, group_models, mcnemar, permutation_importance, stuart_maxwell,
    EvaluationReport, HomogeneousGroups, ImportanceReport, ModelOutcome, PairedPredictions,
    SignificanceResult,
};
use crate::model::{
    self, InputDims, ModelConfig, Prediction, TrainedModel, Variant,
};
use crate::preprocess::{content_words, embedding_tokens};
use crate::psych::LexiconPair;
use crate::rng::fnv1a64;
use crate::selection::{
    apply_standardizer, default_grid, fit_selector_with, fit_standardizer, grid_search_k,
    EngineeredChannel, EngineeredMatrix, ScoreFunction, Selector,
};
use crate::sngram::{build_parser, extract_sngrams, SnGramModel};
use crate::tfidf::TermCounts;

pub const MANIFEST_VERSION: u32 = 1;

/// The declarative experiment configuration (one document, nested sections).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub data: DataSection,
    #[serde(default)]
    pub sngram: SngramSection,
    pub psych: PsychSection,
    pub embedder: EmbedderSection,
    #[serde(default)]
    pub selection: SelectionSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub govbr: Option<GovBrSection>,
    #[serde(default)]
    pub brmoral: Option<BrmoralSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSection {
    pub task: TaskId,
    #[serde(default = "default_arity")]
    pub arity: Arity,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub out_dir: PathBuf,
}

fn default_arity() -> Arity {
    Arity::Binary
}

fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSection {
    pub dataset: PathBuf,
    #[serde(default = "default_split_ratio")]
    pub split_ratio: f64,
}

fn default_split_ratio() -> f64 {
    0.8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SngramSection {
    #[serde(default = "default_parser")]
    pub parser: String,
    #[serde(default)]
    pub label_bigrams: bool,
}

impl Default for SngramSection {
    fn default() -> Self {
        SngramSection {
            parser: default_parser(),
            label_bigrams: false,
        }
    }
}

fn default_parser() -> String {
    "stub".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsychSection {
    pub liwc: PathBuf,
    pub mrc: PathBuf,
    pub language: Language,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedderSection {
    #[serde(default = "default_embedder_name")]
    pub name: String,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default)]
    pub fine_tune_epochs: usize,
}

fn default_embedder_name() -> String {
    "stub".into()
}

fn default_embed_dim() -> usize {
    768
}

fn default_max_len() -> usize {
    300
}

impl EmbedderSection {
    pub fn spec(&self) -> EmbedderSpec {
        match self.name.as_str() {
            "bert-base-uncased" => EmbedderSpec::base_uncased(),
            "bert-base-multilingual-uncased" => EmbedderSpec::multilingual_base_uncased(),
            _ => EmbedderSpec::stub(self.embed_dim),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SelectionSection {
    /// Fixed per-channel k values; omitted channels are grid-searched.
    pub k_sngram: Option<usize>,
    pub k_psych: Option<usize>,
    /// Explicit grid; defaults to {1%, 5%, 10%, 25%, 50%, 100%} of each
    /// channel's width.
    pub grid: Option<Vec<usize>>,
    #[serde(default = "default_score")]
    pub score: ScoreFunction,
}

fn default_score() -> ScoreFunction {
    ScoreFunction::AnovaF
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "default_filters")]
    pub filters: usize,
    #[serde(default = "default_filters")]
    pub projection_units: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_channels")]
    pub channels: String,
    #[serde(default)]
    pub stacked_conv: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            widths: default_widths(),
            filters: default_filters(),
            projection_units: default_filters(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            channels: default_channels(),
            stacked_conv: false,
        }
    }
}

fn default_widths() -> Vec<usize> {
    vec![2, 3, 4, 5, 6]
}

fn default_filters() -> usize {
    128
}

fn default_epochs() -> usize {
    30
}

fn default_batch_size() -> usize {
    32
}

fn default_learning_rate() -> f64 {
    1e-3
}

fn default_channels() -> String {
    "bert+sngram+psych".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationSection {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_repeats")]
    pub importance_repeats: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            alpha: default_alpha(),
            importance_repeats: default_repeats(),
        }
    }
}

fn default_alpha() -> f64 {
    0.05
}

fn default_repeats() -> usize {
    5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GovBrSection {
    pub tweets: PathBuf,
    pub reference: PathBuf,
    pub supportive_tags: Vec<String>,
    pub opposing_tags: Vec<String>,
    #[serde(default = "default_min_words")]
    pub min_words: usize,
    #[serde(default = "default_target_per_user")]
    pub target_tweets_per_user: f64,
    /// Fixed similarity threshold; omitted means calibrate.
    pub similarity_threshold: Option<f64>,
    #[serde(default)]
    pub balanced: bool,
    pub max_documents: Option<usize>,
}

fn default_min_words() -> usize {
    5
}

fn default_target_per_user() -> f64 {
    25.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BrmoralSection {
    /// Stance-scored essays: JSONL `{id, text, topic, stance}`.
    pub essays: PathBuf,
    /// Upper bound of the ordinal stance scale (0 = totally against).
    pub scale_max: u32,
}

impl ExperimentConfig {
    pub fn task(&self) -> Result<TaskSpec> {
        TaskSpec::preset(self.experiment.task, self.experiment.arity)
    }

    pub fn variant(&self) -> Result<Variant> {
        parse_variant(&self.model.channels)
    }

    pub fn features_dir(&self) -> PathBuf {
        self.experiment.out_dir.join("features")
    }

    pub fn model_dir(&self, variant: &Variant) -> PathBuf {
        self.experiment.out_dir.join("models").join(variant.name())
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.experiment.out_dir.join("eval")
    }

    pub fn model_config(&self, variant: Variant) -> Result<ModelConfig> {
        let task = self.task()?;
        let mut config = ModelConfig::new(task.arity.class_count(), variant, self.experiment.seed);
        config.conv_branch_widths = self.model.widths.clone();
        config.filters_per_branch = self.model.filters;
        config.engineered_projection_units = self.model.projection_units;
        config.epochs = self.model.epochs;
        config.batch_size = self.model.batch_size;
        config.learning_rate = self.model.learning_rate;
        config.stacked_conv = self.model.stacked_conv;
        config.validate()?;
        Ok(config)
    }
}

pub fn parse_variant(channels: &str) -> Result<Variant> {
    if channels.trim().eq_ignore_ascii_case("baseline") {
        Ok(Variant::PlainEmbedding)
    } else {
        Variant::parse(channels)
    }
}

/// The experiment manifest: the run's fitted dimensions, chosen k values,
/// grids, seeds and component identifiers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub version: u32,
    pub task: TaskSpec,
    pub seed: u64,
    pub split_ratio: f64,
    pub parser: String,
    pub score_function: String,
    pub grid_sngram: Vec<usize>,
    pub grid_psych: Vec<usize>,
    pub chosen_k_sngram: usize,
    pub chosen_k_psych: usize,
    pub sngram_vocabulary_dim: usize,
    pub psych_width: usize,
    pub embedder: EmbedderSpec,
    pub embedder_snapshot: String,
    pub fine_tune_epochs: usize,
    pub max_len: usize,
    pub selector_sngram_id: String,
    pub selector_psych_id: String,
    pub standardizer_id: String,
    pub standardizer_ddof: u32,
    pub mrc_normalization: String,
    pub grid_probe: String,
    pub created_unix: u64,
}

fn fingerprint<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("serializable");
    format!("{:016x}", fnv1a64(json.as_bytes()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Embedding cache root: `POLINFER_CACHE_DIR` when set, otherwise
/// `<features>/embeddings`.
pub fn cache_root(features_dir: &Path) -> PathBuf {
    std::env::var_os("POLINFER_CACHE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| features_dir.join("embeddings"))
}

/// Outcome summary of the corpus-construction command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub users_total: usize,
    pub users_for: usize,
    pub users_against: usize,
    pub users_discarded: usize,
    pub tweets_after_stance: usize,
    pub tweets_after_clean: usize,
    pub similarity_threshold: f64,
    pub tweets_after_filter: usize,
    pub documents_written: usize,
    pub dev_size: usize,
    pub test_size: usize,
}

/// Build a stance-labeled corpus from raw tweets: stance from hashtags,
/// conflicting users discarded, hashtags stripped, short messages removed,
/// off-topic tweets rejected by TF-IDF similarity to a political reference
/// corpus. Writes dev/test JSONL plus distribution reports.
pub fn build_corpus_govbr(config: &ExperimentConfig) -> Result<CorpusSummary> {
    let section = config
        .govbr
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [govbr] section".into()))?;
    let task = config.task()?;
    if task.task_id != TaskId::T5 {
        return Err(Error::Config(format!(
            "corpus construction builds the stance task (T5), config says {}",
            task.task_id
        )));
    }
    let seed = config.experiment.seed;
    let out_dir = config.features_dir();
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;

    let tweets = corpus::load_raw_jsonl(&section.tweets, true)?;
    let mut by_user: BTreeMap<String, Vec<Document>> = BTreeMap::new();
    for doc in tweets {
        let user = doc.group_key.clone().ok_or_else(|| {
            Error::Data(format!("tweet {:?} has no group_key (user id)", doc.id))
        })?;
        by_user.entry(user).or_default().push(doc);
    }

    let rules = govbr::HashtagStanceRules::new(&section.supportive_tags, &section.opposing_tags)?;
    let users_total = by_user.len();
    let mut users_for = 0;
    let mut users_against = 0;
    let mut stanced: Vec<(String, govbr::UserStance, Vec<Document>)> = Vec::new();
    for (user, docs) in by_user {
        match rules.assign_user_stance(&docs) {
            govbr::UserStance::Discard => {}
            stance => {
                if stance == govbr::UserStance::For {
                    users_for += 1;
                } else {
                    users_against += 1;
                }
                stanced.push((user, stance, docs));
            }
        }
    }
    let users_discarded = users_total - users_for - users_against;
    let tweets_after_stance: usize = stanced.iter().map(|(_, _, d)| d.len()).sum();

    // Hashtag stripping and the length rule.
    let mut cleaned: Vec<(String, govbr::UserStance, Vec<Document>)> = Vec::new();
    for (user, stance, docs) in stanced {
        let kept: Vec<Document> = docs
            .iter()
            .filter_map(|d| govbr::clean_tweet(d, section.min_words))
            .collect();
        if !kept.is_empty() {
            cleaned.push((user, stance, kept));
        }
    }
    let tweets_after_clean: usize = cleaned.iter().map(|(_, _, d)| d.len()).sum();

    // Political-content filter.
    let reference = corpus::load_raw_jsonl(&section.reference, false)?;
    let reference_texts: Vec<&str> = reference.iter().map(|d| d.text.as_str()).collect();
    let filter = govbr::PoliticalFilter::fit(&reference_texts)?;
    let threshold = match section.similarity_threshold {
        Some(t) => t,
        None => {
            let per_user: BTreeMap<String, Vec<f64>> = cleaned
                .iter()
                .map(|(user, _, docs)| {
                    (
                        user.clone(),
                        docs.iter().map(|d| filter.similarity(&d.text)).collect(),
                    )
                })
                .collect();
            govbr::calibrate_threshold(&per_user, section.target_tweets_per_user)?
        }
    };

    let mut documents: Vec<Document> = Vec::new();
    for (_, stance, docs) in &cleaned {
        let label = match stance {
            govbr::UserStance::For => "for",
            govbr::UserStance::Against => "against",
            govbr::UserStance::Discard => unreachable!(),
        };
        for doc in docs {
            if filter.keep(&doc.text, threshold) {
                documents.push(Document {
                    label: Some(label.to_owned()),
                    ..doc.clone()
                });
            }
        }
    }
    let tweets_after_filter = documents.len();

    // Optional balancing and capping, seeded.
    if section.balanced {
        use rand::seq::SliceRandom;
        let mut rng = crate::rng::substream(seed, "corpus.balance");
        let mut for_docs: Vec<Document> = documents
            .iter()
            .filter(|d| d.label.as_deref() == Some("for"))
            .cloned()
            .collect();
        let mut against_docs: Vec<Document> = documents
            .iter()
            .filter(|d| d.label.as_deref() == Some("against"))
            .cloned()
            .collect();
        let per_class = for_docs.len().min(against_docs.len());
        for_docs.shuffle(&mut rng);
        against_docs.shuffle(&mut rng);
        documents = for_docs
            .into_iter()
            .take(per_class)
            .chain(against_docs.into_iter().take(per_class))
            .collect();
        documents.sort_by(|a, b| a.id.cmp(&b.id));
    }
    if let Some(cap) = section.max_documents {
        use rand::seq::SliceRandom;
        if documents.len() > cap {
            let mut rng = crate::rng::substream(seed, "corpus.cap");
            documents.shuffle(&mut rng);
            documents.truncate(cap);
            documents.sort_by(|a, b| a.id.cmp(&b.id));
        }
    }
    let documents_written = documents.len();

    let dataset = LabeledDataset::new(task, documents, SplitTag::Unsplit)?;
    let (dev, test) = corpus::split_dev_test(dataset, config.data.split_ratio, seed)?;
    corpus::write_jsonl(&out_dir.join("dev.jsonl"), &dev.documents)?;
    corpus::write_jsonl(&out_dir.join("test.jsonl"), &test.documents)?;
    let table = corpus::format_distribution_table(&dev, &test);
    std::fs::write(out_dir.join("distribution.txt"), &table)
        .map_err(|e| Error::io(out_dir.join("distribution.txt"), e))?;
    std::fs::write(
        out_dir.join("distribution.csv"),
        corpus::distribution_csv(&dev, &test),
    )
    .map_err(|e| Error::io(out_dir.join("distribution.csv"), e))?;

    let summary = CorpusSummary {
        users_total,
        users_for,
        users_against,
        users_discarded,
        tweets_after_stance,
        tweets_after_clean,
        similarity_threshold: threshold,
        tweets_after_filter,
        documents_written,
        dev_size: dev.len(),
        test_size: test.len(),
    };
    let manifest = serde_json::json!({
        "version": MANIFEST_VERSION,
        "task": dev.task,
        "seed": seed,
        "split_ratio": config.data.split_ratio,
        "supportive_tags": section.supportive_tags,
        "opposing_tags": section.opposing_tags,
        "min_words": section.min_words,
        "target_tweets_per_user": section.target_tweets_per_user,
        "summary": summary,
        "created_unix": unix_now(),
    });
    write_json(&out_dir.join("corpus_manifest.json"), &manifest)?;
    Ok(summary)
}

/// Outcome summary of opinion-labeled corpus construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OpinionCorpusSummary {
    pub essays_total: usize,
    pub labeled: usize,
    /// Essays whose derived label is outside the task's class set (centre
    /// essays under a binary class definition).
    pub outside_class_set: usize,
    pub dev_size: usize,
    pub test_size: usize,
}

/// Label stance-scored essays with a political orientation (favouring a
/// liberal topic maps left, opposing it maps right, mirrored for
/// conservative topics, midpoint maps centre), keep the labels the task's
/// class set admits, split, and write the dataset plus distribution reports.
pub fn build_corpus_brmoral(config: &ExperimentConfig) -> Result<OpinionCorpusSummary> {
    let section = config
        .brmoral
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [brmoral] section".into()))?;
    let task = config.task()?;
    if task.task_id != TaskId::T2 {
        return Err(Error::Config(format!(
            "opinion labeling builds the text-level orientation task (T2), config says {}",
            task.task_id
        )));
    }
    let out_dir = config.features_dir();
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;

    let records = corpus::load_stance_jsonl(&section.essays, section.scale_max)?;
    let essays_total = records.len();
    let mut documents = Vec::new();
    let mut outside = 0;
    for record in records {
        let orientation = corpus::brmoral_opinion_label(&record.stance)?;
        if task.class_index(orientation.as_str()).is_some() {
            documents.push(Document {
                label: Some(orientation.as_str().to_owned()),
                ..record.document
            });
        } else {
            outside += 1;
        }
    }
    let labeled = documents.len();
    let dataset = LabeledDataset::new(task, documents, SplitTag::Unsplit)?;
    let (dev, test) = corpus::split_dev_test(dataset, config.data.split_ratio, config.experiment.seed)?;
    corpus::write_jsonl(&out_dir.join("dev.jsonl"), &dev.documents)?;
    corpus::write_jsonl(&out_dir.join("test.jsonl"), &test.documents)?;
    std::fs::write(
        out_dir.join("distribution.txt"),
        corpus::format_distribution_table(&dev, &test),
    )
    .map_err(|e| Error::io(out_dir.join("distribution.txt"), e))?;
    std::fs::write(
        out_dir.join("distribution.csv"),
        corpus::distribution_csv(&dev, &test),
    )
    .map_err(|e| Error::io(out_dir.join("distribution.csv"), e))?;
    let summary = OpinionCorpusSummary {
        essays_total,
        labeled,
        outside_class_set: outside,
        dev_size: dev.len(),
        test_size: test.len(),
    };
    let manifest = serde_json::json!({
        "version": MANIFEST_VERSION,
        "task": dev.task,
        "seed": config.experiment.seed,
        "split_ratio": config.data.split_ratio,
        "stance_scale_max": section.scale_max,
        "summary": summary,
        "created_unix": unix_now(),
    });
    write_json(&out_dir.join("corpus_manifest.json"), &manifest)?;
    Ok(summary)
}

/// Summary of the feature-extraction command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSummary {
    pub dev_size: usize,
    pub test_size: usize,
    pub sngram_vocabulary_dim: usize,
    pub psych_width: usize,
    pub chosen_k_sngram: usize,
    pub chosen_k_psych: usize,
}

fn dataset_bigrams(
    parser: &dyn crate::sngram::DependencyParser,
    include_labels: bool,
    dataset: &LabeledDataset,
) -> Vec<Option<TermCounts>> {
    dataset
        .documents
        .iter()
        .map(|doc| match parser.parse(&doc.text) {
            Ok(graph) => Some(extract_sngrams(&graph, include_labels)),
            Err(err) => {
                eprintln!("warning: parse failed for {:?}, using zeros: {err}", doc.id);
                None
            }
        })
        .collect()
}

fn raw_engineered_matrix(
    sngram_model: &SnGramModel,
    bigrams: &[Option<TermCounts>],
    lexicons: &LexiconPair,
    dataset: &LabeledDataset,
) -> Result<EngineeredMatrix> {
    let sngram_rows: Vec<_> = bigrams
        .iter()
        .map(|b| match b {
            Some(counts) => sngram_model.transform(counts),
            None => crate::tfidf::SparseVector::zeros(sngram_model.dim()),
        })
        .collect();
    let psych_rows: Vec<Vec<f64>> = dataset
        .documents
        .iter()
        .map(|doc| lexicons.profile(&content_words(&doc.text)).values)
        .collect();
    EngineeredMatrix::from_channels(
        &sngram_rows,
        sngram_model.feature_names(),
        &psych_rows,
        lexicons.feature_names(),
    )
}

/// Nearest-class-mean probe used as the default grid-search evaluator: the
/// development rows are split once (seeded), candidate columns are selected
/// and standardized on the probe-train part, and the probe scores accuracy
/// on the held-out part.
fn nearest_centroid_accuracy(
    train_x: &ndarray::Array2<f64>,
    train_y: &[usize],
    val_x: &ndarray::Array2<f64>,
    val_y: &[usize],
    n_classes: usize,
) -> f64 {
    let dim = train_x.ncols();
    let mut centroids = vec![vec![0.0; dim]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (row, &label) in train_x.rows().into_iter().zip(train_y) {
        counts[label] += 1;
        for (j, &v) in row.iter().enumerate() {
            centroids[label][j] += v;
        }
    }
    for (centroid, &count) in centroids.iter_mut().zip(&counts) {
        if count > 0 {
            for v in centroid.iter_mut() {
                *v /= count as f64;
            }
        }
    }
    let mut correct = 0;
    for (row, &label) in val_x.rows().into_iter().zip(val_y) {
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for (c, centroid) in centroids.iter().enumerate() {
            if counts[c] == 0 {
                continue;
            }
            let dist: f64 = row
                .iter()
                .zip(centroid)
                .map(|(&a, &b)| (a - b).powi(2))
                .sum();
            if dist < best_dist {
                best_dist = dist;
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct as f64 / val_y.len().max(1) as f64
}

struct ChannelSelection {
    selector: Selector,
    grid: Vec<usize>,
}

fn select_channel(
    matrix: &EngineeredMatrix,
    channel: EngineeredChannel,
    y: &[usize],
    n_classes: usize,
    fixed_k: Option<usize>,
    explicit_grid: Option<&[usize]>,
    score: ScoreFunction,
    seed: u64,
) -> Result<ChannelSelection> {
    let cols = matrix.channel_columns(channel);
    let view = matrix.data.select(ndarray::Axis(1), &cols);
    let dim = view.ncols();
    if dim == 0 {
        return Err(Error::Data(format!("{} channel has no columns", channel.name())));
    }
    let grid: Vec<usize> = match (fixed_k, explicit_grid) {
        (Some(k), _) => vec![k.min(dim).max(1)],
        (None, Some(g)) => g.iter().map(|&k| k.min(dim).max(1)).collect(),
        (None, None) => default_grid(dim),
    };
    let k = if grid.len() == 1 {
        grid[0]
    } else {
        // Seeded probe split of the development rows.
        use rand::seq::SliceRandom;
        let n = view.nrows();
        let mut indices: Vec<usize> = (0..n).collect();
        indices.shuffle(&mut crate::rng::substream(seed, "selection.probe"));
        let n_train = ((n as f64) * 0.8).round() as usize;
        let (train_idx, val_idx) = indices.split_at(n_train.clamp(1, n - 1));
        let train_x = view.select(ndarray::Axis(0), train_idx);
        let val_x = view.select(ndarray::Axis(0), val_idx);
        let train_y: Vec<usize> = train_idx.iter().map(|&i| y[i]).collect();
        let val_y: Vec<usize> = val_idx.iter().map(|&i| y[i]).collect();
        grid_search_k(&grid, |k| {
            let selector = fit_selector_with(train_x.view(), &train_y, k, score)?;
            let t = selector.apply(train_x.view());
            let standardizer = fit_standardizer(t.view())?;
            let t = apply_standardizer(t.view(), &standardizer)?;
            let v = apply_standardizer(selector.apply(val_x.view()).view(), &standardizer)?;
            Ok(nearest_centroid_accuracy(&t, &train_y, &v, &val_y, n_classes))
        })?
    };
    let selector = fit_selector_with(view.view(), y, k, score)?;
    Ok(ChannelSelection { selector, grid })
}

/// Split the dataset, fit the sngram and psych channels on development data,
/// run per-channel selection and standardization, cache embeddings, and
/// write every artifact plus the experiment manifest.
pub fn extract_features(config: &ExperimentConfig) -> Result<FeatureSummary> {
    let task = config.task()?;
    let seed = config.experiment.seed;
    let out_dir = config.features_dir();
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;

    let dataset = corpus::load_jsonl(&config.data.dataset, &task)?;
    let (dev, test) = corpus::split_dev_test(dataset, config.data.split_ratio, seed)?;
    corpus::write_jsonl(&out_dir.join("dev.jsonl"), &dev.documents)?;
    corpus::write_jsonl(&out_dir.join("test.jsonl"), &test.documents)?;
    std::fs::write(
        out_dir.join("distribution.txt"),
        corpus::format_distribution_table(&dev, &test),
    )
    .map_err(|e| Error::io(out_dir.join("distribution.txt"), e))?;
    std::fs::write(
        out_dir.join("distribution.csv"),
        corpus::distribution_csv(&dev, &test),
    )
    .map_err(|e| Error::io(out_dir.join("distribution.csv"), e))?;

    // sngram channel, fitted on development only.
    let parser = build_parser(&config.sngram.parser)?;
    let dev_bigrams = dataset_bigrams(parser.as_ref(), config.sngram.label_bigrams, &dev);
    let test_bigrams = dataset_bigrams(parser.as_ref(), config.sngram.label_bigrams, &test);
    let fit_corpus: Vec<TermCounts> = dev_bigrams.iter().flatten().cloned().collect();
    let sngram_model = SnGramModel::fit(&fit_corpus, parser.name(), config.sngram.label_bigrams)?;
    sngram_model.save(&out_dir.join("sngram_model.json"))?;

    // psych channel.
    let lexicons = LexiconPair::load(&config.psych.liwc, &config.psych.mrc, config.psych.language)?;

    let dev_raw = raw_engineered_matrix(&sngram_model, &dev_bigrams, &lexicons, &dev)?;
    let test_raw = raw_engineered_matrix(&sngram_model, &test_bigrams, &lexicons, &test)?;
    let dev_y = dev.label_indices();
    let n_classes = task.arity.class_count();

    // Per-channel selection on development data.
    let sngram_sel = select_channel(
        &dev_raw,
        EngineeredChannel::Sngram,
        &dev_y,
        n_classes,
        config.selection.k_sngram,
        config.selection.grid.as_deref(),
        config.selection.score,
        seed,
    )?;
    let psych_sel = select_channel(
        &dev_raw,
        EngineeredChannel::Psych,
        &dev_y,
        n_classes,
        config.selection.k_psych,
        config.selection.grid.as_deref(),
        config.selection.score,
        seed,
    )?;

    // Map channel-local selections to global matrix columns.
    let sngram_cols = dev_raw.channel_columns(EngineeredChannel::Sngram);
    let psych_cols = dev_raw.channel_columns(EngineeredChannel::Psych);
    let selected_cols: Vec<usize> = sngram_sel
        .selector
        .selected_columns
        .iter()
        .map(|&i| sngram_cols[i])
        .chain(psych_sel.selector.selected_columns.iter().map(|&i| psych_cols[i]))
        .collect();
    let dev_selected = dev_raw.take_columns(&selected_cols);
    let test_selected = test_raw.take_columns(&selected_cols);

    // Standardize on development statistics (select, then standardize).
    let standardizer = fit_standardizer(dev_selected.data.view())?;
    let dev_matrix = EngineeredMatrix::new(
        apply_standardizer(dev_selected.data.view(), &standardizer)?,
        dev_selected.columns.clone(),
    )?;
    let test_matrix = EngineeredMatrix::new(
        apply_standardizer(test_selected.data.view(), &standardizer)?,
        test_selected.columns.clone(),
    )?;

    write_json(&out_dir.join("selector_sngram.json"), &sngram_sel.selector)?;
    write_json(&out_dir.join("selector_psych.json"), &psych_sel.selector)?;
    write_json(&out_dir.join("standardizer.json"), &standardizer)?;
    write_json(&out_dir.join("engineered_dev.json"), &dev_matrix)?;
    write_json(&out_dir.join("engineered_test.json"), &test_matrix)?;

    // Embedding channel: optional adapter fine-tuning, then a warm cache.
    let spec = config.embedder.spec();
    let mut embedder = build_embedder(&spec, seed)?;
    if config.embedder.fine_tune_epochs > 0 {
        embedder.fine_tune(&dev, config.embedder.fine_tune_epochs)?;
    }
    let mut cache = EmbeddingCache::open(cache_root(&out_dir))?;
    for doc in dev.documents.iter().chain(&test.documents) {
        let seq = embedding_tokens(&doc.text, config.embedder.max_len)?;
        cache.get_or_compute(&doc.id, embedder.as_ref(), &seq)?;
    }

    let manifest = ExperimentManifest {
        version: MANIFEST_VERSION,
        task: task.clone(),
        seed,
        split_ratio: config.data.split_ratio,
        parser: config.sngram.parser.clone(),
        score_function: config.selection.score.name().into(),
        grid_sngram: sngram_sel.grid.clone(),
        grid_psych: psych_sel.grid.clone(),
        chosen_k_sngram: sngram_sel.selector.k,
        chosen_k_psych: psych_sel.selector.k,
        sngram_vocabulary_dim: sngram_model.dim(),
        psych_width: lexicons.profile_width(),
        embedder: spec,
        embedder_snapshot: embedder.snapshot_id(),
        fine_tune_epochs: config.embedder.fine_tune_epochs,
        max_len: config.embedder.max_len,
        selector_sngram_id: fingerprint(&sngram_sel.selector),
        selector_psych_id: fingerprint(&psych_sel.selector),
        standardizer_id: fingerprint(&standardizer),
        standardizer_ddof: 0,
        mrc_normalization: "minmax[0,1]".into(),
        grid_probe: "nearest_centroid".into(),
        created_unix: unix_now(),
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;

    Ok(FeatureSummary {
        dev_size: dev.len(),
        test_size: test.len(),
        sngram_vocabulary_dim: sngram_model.dim(),
        psych_width: lexicons.profile_width(),
        chosen_k_sngram: sngram_sel.selector.k,
        chosen_k_psych: psych_sel.selector.k,
    })
}

/// Extracted-feature artifacts loaded back for training and evaluation.
pub struct FeatureStore {
    pub manifest: ExperimentManifest,
    pub dev: LabeledDataset,
    pub test: LabeledDataset,
    pub dev_matrix: EngineeredMatrix,
    pub test_matrix: EngineeredMatrix,
    embedder: Box<dyn Embedder>,
    cache: EmbeddingCache,
    max_len: usize,
}

impl FeatureStore {
    pub fn open(config: &ExperimentConfig) -> Result<FeatureStore> {
        let dir = config.features_dir();
        let manifest: ExperimentManifest = read_json(&dir.join("manifest.json"))?;
        let task = manifest.task.clone();
        let dev_docs = corpus::load_raw_jsonl(&dir.join("dev.jsonl"), false)?;
        let test_docs = corpus::load_raw_jsonl(&dir.join("test.jsonl"), false)?;
        let dev = LabeledDataset::new(task.clone(), dev_docs, SplitTag::Development)?;
        let test = LabeledDataset::new(task, test_docs, SplitTag::Test)?;
        let dev_matrix: EngineeredMatrix = read_json(&dir.join("engineered_dev.json"))?;
        let test_matrix: EngineeredMatrix = read_json(&dir.join("engineered_test.json"))?;
        // Replay the recorded fine-tuning so the snapshot (and therefore the
        // cache keys) match the extraction run exactly.
        let mut embedder = build_embedder(&manifest.embedder, manifest.seed)?;
        if manifest.fine_tune_epochs > 0 {
            embedder.fine_tune(&dev, manifest.fine_tune_epochs)?;
        }
        if embedder.snapshot_id() != manifest.embedder_snapshot {
            return Err(Error::Data(format!(
                "embedder snapshot mismatch: manifest records {}, reconstruction gives {}",
                manifest.embedder_snapshot,
                embedder.snapshot_id()
            )));
        }
        let cache = EmbeddingCache::open(cache_root(&dir))?;
        let max_len = manifest.max_len;
        Ok(FeatureStore {
            manifest,
            dev,
            test,
            dev_matrix,
            test_matrix,
            embedder,
            cache,
            max_len,
        })
    }

    pub fn dims(&self) -> InputDims {
        InputDims {
            max_len: self.max_len,
            embed_dim: self.manifest.embedder.embed_dim,
            sngram_dim: self.manifest.chosen_k_sngram,
            psych_dim: self.manifest.chosen_k_psych,
        }
    }

    pub fn embeddings(&mut self, dataset: &LabeledDataset) -> Result<Vec<TokenEmbeddingMatrix>> {
        dataset
            .documents
            .iter()
            .map(|doc| {
                let seq = embedding_tokens(&doc.text, self.max_len)?;
                self.cache.get_or_compute(&doc.id, self.embedder.as_ref(), &seq)
            })
            .collect()
    }
}

/// Summary of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub variant: String,
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub model_dir: PathBuf,
}

/// Train one variant on the development split and save its artifact
/// directory.
pub fn train_variant(config: &ExperimentConfig, variant: Variant) -> Result<TrainSummary> {
    let mut store = FeatureStore::open(config)?;
    let model_config = config.model_config(variant)?;
    let dims = store.dims();
    let network = model::build(&model_config, &dims)?;
    let y = store.dev.label_indices();
    let embeddings = if variant.uses_embedding() {
        Some(store.embeddings(&store.dev.clone())?)
    } else {
        None
    };
    let mut trained = model::train(
        network,
        embeddings.as_deref(),
        Some(&store.dev_matrix),
        &y,
    )?;
    trained.manifest = model::ModelManifest {
        embedder_snapshot: variant
            .uses_embedding()
            .then(|| store.manifest.embedder_snapshot.clone()),
        selector_id: Some(store.manifest.selector_sngram_id.clone()),
        standardizer_id: Some(store.manifest.standardizer_id.clone()),
    };
    let model_dir = config.model_dir(&variant);
    trained.save(&model_dir)?;
    Ok(TrainSummary {
        variant: variant.name(),
        epochs: trained.history.len(),
        final_loss: trained.history.last().copied(),
        model_dir,
    })
}

/// One model's evaluation artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub doc_id: String,
    pub gold: String,
    pub predicted: String,
    pub probabilities: Vec<f64>,
}

/// Predict the test split with a trained variant and write its metrics and
/// per-document prediction files.
fn evaluate_with_store(
    config: &ExperimentConfig,
    store: &mut FeatureStore,
    variant: Variant,
) -> Result<(EvaluationReport, Vec<usize>)> {
    let trained = TrainedModel::load(&config.model_dir(&variant))?;
    let embeddings = if variant.uses_embedding() {
        Some(store.embeddings(&store.test.clone())?)
    } else {
        None
    };
    let predictions = model::predict(&trained, embeddings.as_deref(), Some(&store.test_matrix))?;
    let gold = store.test.label_indices();
    let pred: Vec<usize> = predictions.iter().map(|p| p.argmax).collect();
    let class_set = store.test.task.class_set.clone();
    let report = compute_metrics(&gold, &pred, &class_set)?;

    let eval_dir = config.eval_dir();
    std::fs::create_dir_all(&eval_dir).map_err(|e| Error::io(&eval_dir, e))?;
    write_json(
        &eval_dir.join(format!("metrics_{}.json", variant.name())),
        &report,
    )?;
    let records: Vec<PredictionRecord> = store
        .test
        .documents
        .iter()
        .zip(&predictions)
        .map(|(doc, p): (&Document, &Prediction)| PredictionRecord {
            doc_id: doc.id.clone(),
            gold: doc.label.clone().unwrap_or_default(),
            predicted: class_set[p.argmax].clone(),
            probabilities: p.probabilities.clone(),
        })
        .collect();
    write_json(
        &eval_dir.join(format!("predictions_{}.json", variant.name())),
        &records,
    )?;
    Ok((report, pred))
}

/// Evaluate a trained variant on the test split: metrics JSON plus per-
/// document predictions (needed later for paired significance tests).
pub fn evaluate_variant(config: &ExperimentConfig, variant: Variant) -> Result<EvaluationReport> {
    let mut store = FeatureStore::open(config)?;
    evaluate_with_store(config, &mut store, variant).map(|(report, _)| report)
}

/// Comparison artifacts across a set of variants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareSummary {
    pub groups: HomogeneousGroups,
    /// (model A, model B, result) for every unordered pair.
    pub pairwise: Vec<(String, String, SignificanceResult)>,
    /// Reference-model comparisons in χ/α/p form, one line per model.
    pub reference_lines: Vec<String>,
    pub reference: String,
}

/// Train (when missing) and evaluate every variant, then run the pairwise
/// significance grid, homogeneous grouping and the reference comparison.
pub fn compare(config: &ExperimentConfig, variants: &[Variant]) -> Result<CompareSummary> {
    if variants.is_empty() {
        return Err(Error::Config("no variants to compare".into()));
    }
    let mut store = FeatureStore::open(config)?;
    let gold = store.test.label_indices();
    let n_classes = store.test.task.arity.class_count();

    let mut outcomes: Vec<ModelOutcome> = Vec::new();
    for &variant in variants {
        let model_dir = config.model_dir(&variant);
        if !model_dir.join("weights.bin").exists() {
            train_variant(config, variant)?;
        }
        let (report, pred) = evaluate_with_store(config, &mut store, variant)?;
        outcomes.push(ModelOutcome {
            name: variant.name(),
            accuracy: report.accuracy,
            predictions: pred,
        });
    }

    let alpha = config.evaluation.alpha;
    let groups = group_models(&gold, n_classes, &outcomes, alpha)?;

    let test_for = |a: &ModelOutcome, b: &ModelOutcome| -> Result<SignificanceResult> {
        let paired = PairedPredictions::new(
            gold.clone(),
            a.predictions.clone(),
            b.predictions.clone(),
            n_classes,
        )?;
        match n_classes {
            2 => mcnemar(&paired),
            _ => stuart_maxwell(&paired),
        }
    };

    let mut pairwise = Vec::new();
    for i in 0..outcomes.len() {
        for j in (i + 1)..outcomes.len() {
            let result = test_for(&outcomes[i], &outcomes[j])?;
            pairwise.push((outcomes[i].name.clone(), outcomes[j].name.clone(), result));
        }
    }

    // Reference comparison: the plain-embedder baseline when present,
    // otherwise the first variant given.
    let reference_name = variants
        .iter()
        .find(|v| matches!(v, Variant::PlainEmbedding))
        .map(|v| v.name())
        .unwrap_or_else(|| variants[0].name());
    let reference = outcomes
        .iter()
        .find(|o| o.name == reference_name)
        .expect("reference evaluated")
        .clone();
    let mut reference_lines = Vec::new();
    for outcome in &outcomes {
        if outcome.name == reference.name {
            continue;
        }
        let result = test_for(outcome, &reference)?;
        let marker = if outcome.accuracy > reference.accuracy && result.p_value < alpha {
            " *"
        } else {
            ""
        };
        reference_lines.push(format!(
            "{} vs {}: {}{marker}",
            outcome.name,
            reference.name,
            result.formatted(alpha)
        ));
    }

    let eval_dir = config.eval_dir();
    std::fs::create_dir_all(&eval_dir).map_err(|e| Error::io(&eval_dir, e))?;
    std::fs::write(eval_dir.join("groups.txt"), groups.format_table())
        .map_err(|e| Error::io(eval_dir.join("groups.txt"), e))?;
    let mut csv = String::from("model_a,model_b,test,statistic,p_value\n");
    for (a, b, r) in &pairwise {
        csv.push_str(&format!(
            "{a},{b},{:?},{},{}\n",
            r.test_name, r.statistic, r.p_value
        ));
    }
    std::fs::write(eval_dir.join("comparison.csv"), csv)
        .map_err(|e| Error::io(eval_dir.join("comparison.csv"), e))?;
    std::fs::write(
        eval_dir.join("comparison.txt"),
        format!(
            "Reference model: {reference_name}\n{}\n\
             note: pairwise p-values carry no multiple-comparison correction\n",
            reference_lines.join("\n")
        ),
    )
    .map_err(|e| Error::io(eval_dir.join("comparison.txt"), e))?;

    Ok(CompareSummary {
        groups,
        pairwise,
        reference_lines,
        reference: reference_name,
    })
}

/// Permutation importance of every engineered column under a trained
/// variant, written as a CSV and a two-tailed text table.
pub fn explain(config: &ExperimentConfig, variant: Variant) -> Result<ImportanceReport> {
    if variant.engineered_channels().is_empty() {
        return Err(Error::Config(format!(
            "variant {} has no engineered columns to explain",
            variant.name()
        )));
    }
    let mut store = FeatureStore::open(config)?;
    let trained = TrainedModel::load(&config.model_dir(&variant))?;
    let embeddings = if variant.uses_embedding() {
        Some(store.embeddings(&store.test.clone())?)
    } else {
        None
    };
    let gold = store.test.label_indices();
    let report = permutation_importance(
        |matrix: &EngineeredMatrix| {
            let predictions = model::predict(&trained, embeddings.as_deref(), Some(matrix))?;
            let correct = predictions
                .iter()
                .zip(&gold)
                .filter(|(p, &g)| p.argmax == g)
                .count();
            Ok(correct as f64 / gold.len() as f64)
        },
        &store.test_matrix,
        config.evaluation.importance_repeats,
        config.experiment.seed,
    )?;
    let eval_dir = config.eval_dir();
    std::fs::create_dir_all(&eval_dir).map_err(|e| Error::io(&eval_dir, e))?;
    std::fs::write(
        eval_dir.join(format!("importance_{}.csv", variant.name())),
        report.to_csv(),
    )
    .map_err(|e| Error::io(&eval_dir, e))?;
    std::fs::write(
        eval_dir.join(format!("importance_{}.txt", variant.name())),
        report.format_two_tailed(7),
    )
    .map_err(|e| Error::io(&eval_dir, e))?;
    Ok(report)
}
