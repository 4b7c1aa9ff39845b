//! Contextual token-embedding adapters and the on-disk embedding cache.
//!
//! The pipeline depends only on the [`Embedder`] contract. A deterministic
//! stub embedder ships for tests and desk-scale runs; the named transformer
//! presets are recognized configurations that error until a real adapter is
//! installed (never a silent fallback to the stub).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::LabeledDataset;
use crate::error::{Error, Result};
use crate::preprocess::{TokenSequence, PAD_TOKEN};
use crate::rng::fnv1a64;

/// Per-document embedding of shape (max_len, embed_dim). Pad positions carry
/// the embedder's fixed pad vector; `mask` is true at real-token positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddingMatrix {
    pub values: Array2<f64>,
    pub mask: Vec<bool>,
}

impl TokenEmbeddingMatrix {
    pub fn max_len(&self) -> usize {
        self.values.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.values.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Casing {
    Cased,
    Uncased,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LanguageProfile {
    EnBase,
    Multilingual,
}

/// Which embedding backend to use and its output width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderSpec {
    pub name: String,
    pub embed_dim: usize,
    pub casing: Casing,
    pub language_profile: LanguageProfile,
}

impl EmbedderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        Ok(())
    }

    /// Deterministic test stub.
    pub fn stub(embed_dim: usize) -> EmbedderSpec {
        EmbedderSpec {
            name: "stub".into(),
            embed_dim,
            casing: Casing::Uncased,
            language_profile: LanguageProfile::EnBase,
        }
    }

    /// English transformer preset (requires an installed adapter).
    pub fn base_uncased() -> EmbedderSpec {
        EmbedderSpec {
            name: "bert-base-uncased".into(),
            embed_dim: 768,
            casing: Casing::Uncased,
            language_profile: LanguageProfile::EnBase,
        }
    }

    /// Multilingual transformer preset (requires an installed adapter).
    pub fn multilingual_base_uncased() -> EmbedderSpec {
        EmbedderSpec {
            name: "bert-base-multilingual-uncased".into(),
            embed_dim: 768,
            casing: Casing::Uncased,
            language_profile: LanguageProfile::Multilingual,
        }
    }
}

/// Contextual embedding adapter.
pub trait Embedder {
    fn spec(&self) -> &EmbedderSpec;

    /// Identifier of the current weights snapshot; embeddings are a pure
    /// function of (spec, snapshot, input).
    fn snapshot_id(&self) -> String;

    fn embed(&self, seq: &TokenSequence) -> Result<TokenEmbeddingMatrix>;

    /// Adapt the weights on a labeled dataset, returning the new snapshot
    /// id. Zero epochs must leave the snapshot unchanged.
    fn fine_tune(&mut self, dataset: &LabeledDataset, epochs: usize) -> Result<String>;
}

/// Build the adapter named by `spec`. Transformer presets produce a
/// capability error until a real adapter is installed.
pub fn build_embedder(spec: &EmbedderSpec, seed: u64) -> Result<Box<dyn Embedder>> {
    spec.validate()?;
    match spec.name.as_str() {
        "stub" => Ok(Box::new(StubEmbedder::new(spec.clone(), seed))),
        "bert-base-uncased" | "bert-base-multilingual-uncased" => Err(Error::Capability(format!(
            "embedder {:?} requires an external transformer adapter; \
             only the built-in \"stub\" embedder is bundled",
            spec.name
        ))),
        other => Err(Error::Config(format!("unknown embedder {other:?}"))),
    }
}

/// Deterministic, weakly contextual stub embedder.
///
/// The vector at position `i` for token `t` is a pure function of
/// `(t, i mod context_window, snapshot)`: a seeded stream expanded to
/// `embed_dim` values in [-1, 1]. Pad positions all carry one fixed pad
/// vector. Reproducible across platforms.
#[derive(Debug, Clone)]
pub struct StubEmbedder {
    spec: EmbedderSpec,
    context_window: usize,
    snapshot: u64,
}

impl StubEmbedder {
    pub fn new(spec: EmbedderSpec, seed: u64) -> Self {
        StubEmbedder {
            spec,
            context_window: 3,
            snapshot: seed,
        }
    }

    pub fn with_context_window(mut self, window: usize) -> Self {
        self.context_window = window.max(1);
        self
    }

    fn token_vector(&self, token: &str, slot: u64) -> Vec<f64> {
        let key = self
            .snapshot
            .wrapping_mul(0x9e3779b97f4a7c15)
            .rotate_left(17)
            ^ fnv1a64(token.as_bytes()).wrapping_add(slot.wrapping_mul(0xa24baed4963ee407));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        (0..self.spec.embed_dim)
            .map(|_| rng.random::<f64>() * 2.0 - 1.0)
            .collect()
    }
}

impl Embedder for StubEmbedder {
    fn spec(&self) -> &EmbedderSpec {
        &self.spec
    }

    fn snapshot_id(&self) -> String {
        format!("stub-{:016x}", self.snapshot)
    }

    fn embed(&self, seq: &TokenSequence) -> Result<TokenEmbeddingMatrix> {
        let max_len = seq.max_len();
        let dim = self.spec.embed_dim;
        let mut values = Array2::zeros((max_len, dim));
        let pad = self.token_vector(PAD_TOKEN, 0);
        for (i, token) in seq.tokens().iter().enumerate() {
            let row = if i < seq.real_len() {
                self.token_vector(token, (i % self.context_window) as u64)
            } else {
                pad.clone()
            };
            for (j, v) in row.into_iter().enumerate() {
                values[[i, j]] = v;
            }
        }
        Ok(TokenEmbeddingMatrix {
            values,
            mask: seq.mask(),
        })
    }

    fn fine_tune(&mut self, dataset: &LabeledDataset, epochs: usize) -> Result<String> {
        if epochs > 0 {
            let mut fingerprint = fnv1a64(b"fine-tune");
            for doc in &dataset.documents {
                fingerprint ^= fnv1a64(doc.id.as_bytes())
                    .wrapping_mul(fnv1a64(doc.label.as_deref().unwrap_or("").as_bytes()) | 1);
            }
            self.snapshot = self
                .snapshot
                .wrapping_add(fingerprint.wrapping_mul(epochs as u64 | 1));
        }
        Ok(self.snapshot_id())
    }
}

const CACHE_MAGIC: &[u8; 4] = b"PEMB";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Default, Serialize, Deserialize)]
struct CacheIndex {
    entries: BTreeMap<String, CacheEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheEntry {
    file: String,
    doc_id: String,
    embedder: String,
    embed_dim: usize,
    snapshot: String,
}

/// Disk cache of per-document embeddings, keyed by
/// (document id, embedder spec, snapshot id). One binary array file per
/// document plus a JSON index; writes go through a temp file and rename.
pub struct EmbeddingCache {
    root: PathBuf,
    index: CacheIndex,
}

impl EmbeddingCache {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let index_path = root.join("index.json");
        let index = if index_path.exists() {
            let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::json(&index_path, e))?
        } else {
            CacheIndex::default()
        };
        Ok(EmbeddingCache { root, index })
    }

    fn key(doc_id: &str, embedder: &dyn Embedder) -> String {
        format!(
            "{doc_id}|{}|{}|{}",
            embedder.spec().name,
            embedder.spec().embed_dim,
            embedder.snapshot_id()
        )
    }

    /// Fetch the embedding for a document, computing and persisting it on a
    /// cache miss.
    pub fn get_or_compute(
        &mut self,
        doc_id: &str,
        embedder: &dyn Embedder,
        seq: &TokenSequence,
    ) -> Result<TokenEmbeddingMatrix> {
        let key = Self::key(doc_id, embedder);
        if let Some(entry) = self.index.entries.get(&key) {
            let path = self.root.join(&entry.file);
            if path.exists() {
                return read_embedding(&path);
            }
        }
        let matrix = embedder.embed(seq)?;
        let file = format!("{:016x}.emb", fnv1a64(key.as_bytes()));
        let path = self.root.join(&file);
        write_embedding_atomic(&path, &matrix)?;
        self.index.entries.insert(
            key,
            CacheEntry {
                file,
                doc_id: doc_id.to_owned(),
                embedder: embedder.spec().name.clone(),
                embed_dim: embedder.spec().embed_dim,
                snapshot: embedder.snapshot_id(),
            },
        );
        self.flush_index()?;
        Ok(matrix)
    }

    fn flush_index(&self) -> Result<()> {
        let index_path = self.root.join("index.json");
        let tmp = self.root.join("index.json.tmp");
        let text = serde_json::to_string_pretty(&self.index).map_err(|e| Error::json(&index_path, e))?;
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &index_path).map_err(|e| Error::io(&index_path, e))
    }
}

fn write_embedding_atomic(path: &Path, matrix: &TokenEmbeddingMatrix) -> Result<()> {
    let tmp = path.with_extension("emb.tmp");
    {
        let mut out =
            std::io::BufWriter::new(std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?);
        let io = |e| Error::io(&tmp, e);
        out.write_all(CACHE_MAGIC).map_err(io)?;
        out.write_u32::<LittleEndian>(CACHE_VERSION).map_err(io)?;
        out.write_u64::<LittleEndian>(matrix.max_len() as u64).map_err(io)?;
        out.write_u64::<LittleEndian>(matrix.embed_dim() as u64).map_err(io)?;
        let real_len = matrix.mask.iter().filter(|&&m| m).count() as u64;
        out.write_u64::<LittleEndian>(real_len).map_err(io)?;
        for &v in matrix.values.iter() {
            out.write_f64::<LittleEndian>(v).map_err(io)?;
        }
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_embedding(path: &Path) -> Result<TokenEmbeddingMatrix> {
    let mut file =
        std::io::BufReader::new(std::fs::File::open(path).map_err(|e| Error::io(path, e))?);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic).map_err(io)?;
    if &magic != CACHE_MAGIC {
        return Err(Error::Data(format!("{} is not an embedding file", path.display())));
    }
    let version = file.read_u32::<LittleEndian>().map_err(io)?;
    if version != CACHE_VERSION {
        return Err(Error::Data(format!("unsupported embedding file version {version}")));
    }
    let rows = file.read_u64::<LittleEndian>().map_err(io)? as usize;
    let cols = file.read_u64::<LittleEndian>().map_err(io)? as usize;
    let real_len = file.read_u64::<LittleEndian>().map_err(io)? as usize;
    let mut values = Array2::zeros((rows, cols));
    for v in values.iter_mut() {
        *v = file.read_f64::<LittleEndian>().map_err(io)?;
    }
    Ok(TokenEmbeddingMatrix {
        values,
        mask: (0..rows).map(|i| i < real_len).collect(),
    })
}
